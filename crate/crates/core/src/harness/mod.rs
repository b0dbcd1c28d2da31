//! Synthetic data, dataset splitting, metrics and the GCN baseline.

pub mod gcn;
pub mod metrics;
pub mod synth;

pub use gcn::{gcn_baseline, Gcn, GcnConfig};
pub use metrics::{compute_metrics, roc_auc, MetricsReport};
pub use synth::{generate_dataset, reachable_payload, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.75;

/// Seeded shuffle, then the first `round(ratio·n)` items train.
pub fn split<T: Clone>(dataset: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * dataset.len() as f64).round() as usize).min(dataset.len());
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
