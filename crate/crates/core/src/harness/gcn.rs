//! Fixed-depth graph convolution baseline: the same block encoder,
//! pooling and head as the equilibrium model, but `layers` explicit
//! message-passing steps `H ← φ(Âᵀ·H·W_l + b_l)` from `H⁰ = U`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::metrics::MetricsReport;
use crate::nn::encoder::{encode, encode_backward, EncoderParams, PoolMode};
use crate::nn::params::{glorot, Gradients, ParamId, ParamStore};
use crate::nn::{Activation, Precision, Tensor};
use crate::training::model::{head_backward, head_forward, Mode, PreparedGraph};
use crate::training::trainer::{bce_grad, evaluate, Classifier, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pool: PoolMode,
    pub activation: Activation,
    pub dropout: f64,
}

impl GcnConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden: 64,
            layers: 2,
            pool: PoolMode::Avg,
            activation: Activation::Tanh,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gcn {
    pub config: GcnConfig,
    pub store: ParamStore,
    encoder: EncoderParams,
    weights: Vec<(ParamId, ParamId)>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    head: ParamId,
}

impl Gcn {
    pub fn new(config: GcnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let h = config.hidden;
        let encoder = EncoderParams::register(&mut store, config.vocab_size, config.embed_dim, h, &mut rng);
        let weights = (0..config.layers)
            .map(|l| {
                (
                    store.add(&format!("gcn{l}.w"), glorot(&mut rng, h, h)),
                    store.add(&format!("gcn{l}.bias"), Tensor::zeros(&[h])),
                )
            })
            .collect();
        let ln_gain = store.add("ln.gain", Tensor::filled(&[h], 1.0));
        let ln_bias = store.add("ln.bias", Tensor::zeros(&[h]));
        let head = store.add("head", glorot(&mut rng, 1, h).reshape(&[h]).expect("shape"));
        Self { config, store, encoder, weights, ln_gain, ln_bias, head }
    }

    /// Logit and, when `label` is given, the loss gradients.
    pub fn run(&self, g: &PreparedGraph, mode: Mode, seed: u64, label: Option<f64>) -> Result<(f64, Option<Gradients>)> {
        let (u_raw, enc_cache) = encode(&self.store, &self.encoder, &g.tokens, self.config.pool)?;
        let dropout: Option<Vec<f64>> = match mode {
            Mode::Train if self.config.dropout > 0.0 => {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - self.config.dropout);
                Some((0..u_raw.len()).map(|_| if rng.random::<f64>() < self.config.dropout { 0.0 } else { keep }).collect())
            }
            _ => None,
        };
        let mut h = match &dropout {
            Some(m) => Tensor::from_vec(u_raw.shape(), u_raw.data().iter().zip(m).map(|(a, b)| a * b).collect())?,
            None => u_raw,
        };
        let a = &g.adjacency.matrix;
        let phi = self.config.activation;
        // (aggregated, pre, out) per layer
        let mut layers = Vec::with_capacity(self.weights.len());
        for &(w, b) in &self.weights {
            let agg = a.matmul_tn(&h);
            let mut pre = agg.matmul(self.store.get(w));
            let bias = self.store.get(b).data();
            for i in 0..pre.rows() {
                for (p, bb) in pre.row_mut(i).iter_mut().zip(bias) {
                    *p += bb;
                }
            }
            let out = pre.map(|v| phi.apply(v));
            out.ensure_finite("gcn layer")?;
            layers.push((agg, pre, out.clone()));
            h = out;
        }
        let (logit, head) = head_forward(
            &h,
            self.store.get(self.ln_gain).data(),
            self.store.get(self.ln_bias).data(),
            self.store.get(self.head).data(),
        );
        let Some(y) = label else {
            return Ok((logit, None));
        };

        let mut grads = self.store.zeros_like();
        let hd = self.config.hidden;
        let (mut dg, mut db, mut dh) = (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
        let mut dx = head_backward(
            &head,
            bce_grad(logit, y),
            self.store.get(self.ln_gain).data(),
            self.store.get(self.head).data(),
            &mut dg,
            &mut db,
            &mut dh,
        );
        grads.get_mut(self.ln_gain).data_mut().copy_from_slice(&dg);
        grads.get_mut(self.ln_bias).data_mut().copy_from_slice(&db);
        grads.get_mut(self.head).data_mut().copy_from_slice(&dh);
        for (&(w, b), (agg, pre, out)) in self.weights.iter().zip(&layers).rev() {
            let dpre = Tensor::from_vec(
                pre.shape(),
                dx.data()
                    .iter()
                    .zip(pre.data().iter().zip(out.data()))
                    .map(|(d, (&p, &o))| d * phi.derivative(p, o))
                    .collect(),
            )?;
            grads.get_mut(w).add_assign(&agg.matmul_tn(&dpre));
            grads.get_mut(b).data_mut().iter_mut().zip(dpre.sum_rows()).for_each(|(g, s)| *g += s);
            dx = a.matmul(&dpre.matmul_nt(self.store.get(w)));
        }
        if let Some(m) = &dropout {
            for (d, k) in dx.data_mut().iter_mut().zip(m) {
                *d *= k;
            }
        }
        encode_backward(&self.store, &self.encoder, &enc_cache, &dx, &mut grads);
        Ok((logit, Some(grads)))
    }
}

impl Classifier for Gcn {
    const KIND: &'static str = "gcn";

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn train_step(&self, graph: &PreparedGraph, seed: u64) -> Result<(f64, Gradients)> {
        let y = graph.label.map(f64::from).ok_or_else(|| crate::Error::LabelMissing(graph.id.clone()))?;
        let (logit, grads) = self.run(graph, Mode::Train, seed, Some(y))?;
        Ok((logit, grads.expect("label given")))
    }

    fn predict(&self, graph: &PreparedGraph) -> Result<f64> {
        Ok(self.run(graph, Mode::Eval, 0, None)?.0)
    }

    fn after_step(&mut self, _lambda_pf_max: f64, precision: Precision) {
        self.store.round_to(precision);
    }

    fn config_value(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serializes")
    }

    fn from_config_value(value: serde_json::Value, seed: u64) -> Result<Self> {
        Ok(Gcn::new(serde_json::from_value(value)?, seed))
    }
}

/// Trains the baseline on `train` and reports metrics of its best-AUC
/// parameters on `eval`.
pub fn gcn_baseline(
    train: &[PreparedGraph],
    eval: &[PreparedGraph],
    config: GcnConfig,
    train_config: TrainConfig,
) -> Result<MetricsReport> {
    let model = Gcn::new(config, train_config.seed);
    let mut trainer = Trainer::new(train_config, model, train)?;
    trainer.fit(train, eval)?;
    Ok(evaluate(&trainer.best_model(), eval)?.1)
}
