use deepexe::harness::{generate_dataset, split, Gcn, GcnConfig, SyntheticSpec};
use deepexe::nn::{Precision, Tensor};
use deepexe::solver::pf_eigenvalue;
use deepexe::training::{
    load_checkpoint, read_manifest, save_checkpoint, Classifier, Model, ModelConfig, PreparedGraph, TrainConfig, Trainer,
};
use proptest::prelude::*;

const VOCAB: usize = 24;

fn data(n: usize, seed: u64) -> (Vec<PreparedGraph>, Vec<PreparedGraph>) {
    let mut spec = SyntheticSpec::new(n, 2, false, seed);
    spec.vocab_size = VOCAB;
    spec.tokens_per_block = [2, 4];
    let (tr, ev) = split(&generate_dataset(&spec).unwrap(), 0.75, seed).unwrap();
    (tr.iter().map(PreparedGraph::new).collect(), ev.iter().map(PreparedGraph::new).collect())
}

fn model(seed: u64) -> Model {
    let mut cfg = ModelConfig::new(VOCAB);
    cfg.hidden = 8;
    cfg.embed_dim = 6;
    Model::new(cfg, seed)
}

fn config(precision: Precision) -> TrainConfig {
    TrainConfig { batch_size: 5, epochs: 4, seed: 17, precision, ..TrainConfig::default() }
}

fn max_row_sum(w: &Tensor) -> f64 {
    (0..w.rows()).map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[test]
fn identical_runs_give_identical_csv() {
    let (tr, ev) = data(24, 1);
    let run = || {
        let mut t = Trainer::new(config(Precision::F32), model(3), &tr).unwrap();
        t.fit(&tr, &ev).unwrap();
        t.metrics_csv()
    };
    let a = run();
    assert_eq!(a.lines().count(), 1 + 2 * 4);
    assert_eq!(a, run());
}

fn resume_matches<M: Classifier + PartialEqParams>(make: impl Fn() -> M, precision: Precision) {
    let (tr, ev) = data(24, 2);
    let mut straight = Trainer::new(config(precision), make(), &tr).unwrap();
    straight.fit(&tr, &ev).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = Trainer::new(config(precision), make(), &tr).unwrap();
    first.run_epoch(&tr, &ev).unwrap();
    first.run_epoch(&tr, &ev).unwrap();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.kind, M::KIND);
    assert_eq!(manifest.rng.epoch, 2);

    let mut resumed: Trainer<M> = load_checkpoint(&path).unwrap();
    resumed.fit(&tr, &ev).unwrap();
    assert_eq!(resumed.metrics_csv(), straight.metrics_csv());
    assert!(resumed.model.same_params(&straight.model));
    assert_eq!(resumed.adam.m, straight.adam.m);
    assert_eq!(resumed.adam.v, straight.adam.v);
    assert_eq!(resumed.best, straight.best);
}

trait PartialEqParams {
    fn same_params(&self, other: &Self) -> bool;
}

impl<M: Classifier> PartialEqParams for M {
    fn same_params(&self, other: &Self) -> bool {
        self.store().values() == other.store().values()
    }
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    resume_matches(|| model(3), Precision::F32);
    resume_matches(|| model(3), Precision::F64);
}

#[test]
fn gcn_checkpoint_resume_is_bit_identical() {
    let mut cfg = GcnConfig::new(VOCAB);
    cfg.hidden = 8;
    cfg.embed_dim = 6;
    resume_matches(|| Gcn::new(cfg, 4), Precision::F32);
}

#[test]
fn loading_the_wrong_kind_fails() {
    let (tr, _) = data(8, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&Trainer::new(config(Precision::F32), model(1), &tr).unwrap(), &path).unwrap();
    assert!(matches!(load_checkpoint::<Gcn>(&path), Err(deepexe::Error::Checkpoint(_))));
}

#[test]
fn projection_holds_after_every_step() {
    let (tr, ev) = data(20, 4);
    let lambda = tr.iter().map(PreparedGraph::pf_eigenvalue).fold(0.0, f64::max);
    for precision in [Precision::F32, Precision::F64] {
        // one step per epoch, so every step is observed
        let cfg = TrainConfig { batch_size: tr.len(), epochs: 15, ..config(precision) };
        let mut m = model(9);
        m.config.solver.kappa = 0.5;
        // start far outside the feasible set
        m.store.get_mut(m.ids.w).data_mut().iter_mut().for_each(|v| *v *= 50.0);
        let mut t = Trainer::new(cfg, m, &tr).unwrap();
        let bound = 0.5 / lambda + 1e-8;
        assert!(max_row_sum(t.model.store.get(t.model.ids.w)) <= bound);
        while !t.done() {
            t.run_epoch(&tr, &ev).unwrap();
            let norm = max_row_sum(t.model.store.get(t.model.ids.w));
            assert!(norm <= bound, "{precision:?}: {norm} > {bound}");
        }
    }
}

fn dense_radius(data: &[f64]) -> f64 {
    let dense = nalgebra::DMatrix::from_row_slice(5, 5, data);
    dense.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Whether some power of the nonzero pattern vanishes, i.e. the matrix is
/// nilpotent and its spectral radius is exactly zero.
fn nilpotent_pattern(data: &[f64]) -> bool {
    let a: Vec<bool> = data.iter().map(|&v| v != 0.0).collect();
    let mut p = a.clone();
    for _ in 0..5 {
        p = (0..25).map(|k| (0..5).any(|m| p[k / 5 * 5 + m] && a[m * 5 + k % 5])).collect();
    }
    p.iter().all(|&x| !x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pf_eigenvalue_matches_dense_eigensolver(vals in prop::collection::vec(1e-3f64..2.0, 25)) {
        let ours = pf_eigenvalue(&Tensor::from_vec(&[5, 5], vals.clone()).unwrap());
        let rho = dense_radius(&vals);
        prop_assert!((ours - rho).abs() < 1e-8, "{ours} vs {rho}");
    }

    #[test]
    fn pf_eigenvalue_on_sparse_patterns(vals in prop::collection::vec(0.0f64..2.0, 25), zeros in prop::collection::vec(any::<bool>(), 25)) {
        let data: Vec<f64> = vals.iter().zip(&zeros).map(|(&v, &z)| if z { 0.0 } else { v }).collect();
        let ours = pf_eigenvalue(&Tensor::from_vec(&[5, 5], data.clone()).unwrap());
        if nilpotent_pattern(&data) {
            prop_assert_eq!(ours, 0.0);
        } else {
            // Zero eigenvalues of sparse patterns are often defective, and the
            // dense solver then perturbs its whole spectrum by far more than
            // machine precision, so the oracle is only good to about 1e-7.
            let rho = dense_radius(&data);
            prop_assert!((ours - rho).abs() < 1e-6 * rho.max(1.0), "{ours} vs {rho}");
        }
    }
}
