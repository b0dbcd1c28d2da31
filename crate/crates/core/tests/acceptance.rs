//! One test per acceptance criterion. Each writes a single
//! `criterion N: PASS|FAIL ...` line to stderr before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use deepexe::executor::{gate_adjacency, gumbel_noise, gumbel_sample, relaxed_sample, GatingMode};
use deepexe::harness::{compute_metrics, gcn_baseline, generate_dataset, roc_auc, split, GcnConfig, SyntheticSpec};
use deepexe::nn::{finite_diff_check, Precision, Tensor};
use deepexe::solver::{anderson, naive_iterate, pf_eigenvalue, SolverConfig};
use deepexe::training::{
    evaluate, load_checkpoint, save_checkpoint, Mode, Model, ModelConfig, PreparedGraph, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epochs without an eval-AUC improvement before the synthetic
/// experiment stops early.
const PATIENCE: usize = 25;

fn verdict(n: u32, pass: bool, detail: String, elapsed: Duration) {
    let tag = if pass { "PASS" } else { "FAIL" };
    // straight to the handle, which the test harness does not capture
    let _ = writeln!(std::io::stderr(), "criterion {n}: {tag} {detail} ({:.1} s)", elapsed.as_secs_f64());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn max_row_sum(w: &Tensor) -> f64 {
    (0..w.rows()).map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (mut model, g) = setup(100 + seed, 4, 8);
        let label = f64::from(g.label.unwrap());
        let (logit, cache) = model.forward(&g, Mode::Train, seed).unwrap();
        let (analytic, _) = model.backward(&g, &cache, bce_grad(logit, label)).unwrap();
        let (config, ids) = (model.config, model.ids);
        let report = finite_diff_check(&mut model.store, &analytic, 1e-4, |store| {
            let m = Model { config, store: store.clone(), ids };
            Ok(bce(m.forward(&g, Mode::Train, seed)?.0, label))
        })
        .unwrap();
        worst = worst.max(report.max_rel_error());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(1, pass, format!("max rel error {worst:.2e} over 10 seeds (limit 1e-4, 120 s)"), elapsed);
}

#[test]
fn criterion_2_implicit_matches_unrolled() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (model, g) = setup(seed, 4, 4);
        let label = f64::from(g.label.unwrap());
        let (logit, cache) = model.forward(&g, Mode::Train, seed).unwrap();
        let (implicit, _) = model.backward(&g, &cache, bce_grad(logit, label)).unwrap();
        let (_, unrolled) = unrolled_gradients(&model, &g, Mode::Train, seed, 100);
        worst = worst.max(max_rel_error(&implicit, &unrolled).0);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    verdict(2, pass, format!("max rel error vs 100-step unrolled {worst:.2e} (limit 1e-4, 60 s)"), elapsed);
}

#[test]
fn criterion_3_fixed_point() {
    let start = Instant::now();
    let tight = SolverConfig { tol: 1e-12, max_iter: 2000, ..SolverConfig::default() };
    let (mut spread, mut solver_gap): (f64, f64) = (0.0, 0.0);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let g = PreparedGraph::new(&random_graph(&mut rng, 6, 5));
        let mut model = small_model(seed, 8, 8);
        model.project(g.pf_eigenvalue());
        let (_, base) = model.forward_with(&g, Mode::Eval, 0, None, &tight).unwrap();
        for _ in 0..10 {
            let x0 = Tensor::from_vec(&[g.len(), 8], (0..g.len() * 8).map(|_| rng.random_range(-3.0..3.0)).collect())
                .unwrap();
            let (_, other) = model.forward_with(&g, Mode::Eval, 0, Some(&x0), &tight).unwrap();
            spread = spread.max(max_abs_diff(base.x_star(), other.x_star()));
        }
        let naive = SolverConfig { naive: true, ..tight };
        let (_, plain) = model.forward_with(&g, Mode::Eval, 0, None, &naive).unwrap();
        solver_gap = solver_gap.max(max_abs_diff(base.x_star(), plain.x_star()));
    }

    // cos(x) = x by bisection on cos(x) − x, which is decreasing.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid.cos() - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    let x0 = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let cfg = SolverConfig { tol: 1e-10, max_iter: 1000, ..SolverConfig::default() };
    let cos = |x: &Tensor| Ok(x.map(f64::cos));
    let fast = anderson(cos, &x0, &cfg).unwrap();
    let slow = naive_iterate(cos, &x0, 1000, 1e-10).unwrap();
    let value = fast.x_star.data()[0];
    let cos_ok = fast.converged
        && slow.converged
        && (value - 0.739_085_1).abs() < 5e-8
        && (oracle - 0.739_085_1).abs() < 5e-8
        && 2 * fast.iterations <= slow.iterations;

    let elapsed = start.elapsed();
    let pass = spread < 1e-5 && solver_gap < 1e-5 && cos_ok;
    verdict(
        3,
        pass,
        format!(
            "init spread {spread:.1e}, anderson vs naive {solver_gap:.1e}, cos x* = {value:.9} in {} vs {} naive iterations",
            fast.iterations, slow.iterations
        ),
        elapsed,
    );
}

#[test]
fn criterion_4_projection_and_spectral() {
    let start = Instant::now();
    let mut spec = SyntheticSpec::new(24, 3, true, 4);
    spec.vocab_size = 16;
    spec.tokens_per_block = [2, 4];
    let train: Vec<PreparedGraph> = generate_dataset(&spec).unwrap().iter().map(PreparedGraph::new).collect();
    let lambda = train.iter().map(PreparedGraph::pf_eigenvalue).fold(0.0, f64::max);
    let mut worst_excess = f64::NEG_INFINITY;
    for precision in [Precision::F32, Precision::F64] {
        let mut cfg = ModelConfig::new(16);
        cfg.hidden = 8;
        cfg.embed_dim = 8;
        let mut model = Model::new(cfg, 1);
        model.store.get_mut(model.ids.w).data_mut().iter_mut().for_each(|v| *v *= 40.0);
        // full batch: one optimizer step per epoch
        let tc = TrainConfig { batch_size: train.len(), epochs: 12, seed: 1, precision, ..TrainConfig::default() };
        let mut t = Trainer::new(tc, model, &train).unwrap();
        let bound = t.model.config.solver.kappa / lambda;
        worst_excess = worst_excess.max(max_row_sum(t.model.store.get(t.model.ids.w)) - bound);
        while !t.done() {
            t.run_epoch(&train, &[]).unwrap();
            worst_excess = worst_excess.max(max_row_sum(t.model.store.get(t.model.ids.w)) - bound);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut eig_err: f64 = 0.0;
    for _ in 0..100 {
        let data: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..2.0)).collect();
        let dense = nalgebra::DMatrix::from_row_slice(5, 5, &data);
        let rho = dense.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        eig_err = eig_err.max((pf_eigenvalue(&Tensor::from_vec(&[5, 5], data).unwrap()) - rho).abs());
    }

    let mut gate_violations = 0;
    for k in 0..100 {
        let g = &train[k % train.len()];
        let a_hat = &g.adjacency;
        let gate: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
        let mode = if k % 2 == 0 { GatingMode::Column } else { GatingMode::Row };
        if pf_eigenvalue(&gate_adjacency(&a_hat.matrix, &gate, mode)) > a_hat.pf_eigenvalue + 1e-12 {
            gate_violations += 1;
        }
    }

    let elapsed = start.elapsed();
    let pass = worst_excess <= 1e-8 && eig_err < 1e-8 && gate_violations == 0;
    verdict(
        4,
        pass,
        format!(
            "max ‖W‖∞ − κ/λ {worst_excess:.2e} (limit 1e-8), PF vs dense eigensolver {eig_err:.1e}, gate violations {gate_violations}/100"
        ),
        elapsed,
    );
}

#[test]
fn criterion_5_gumbel_statistics() {
    let start = Instant::now();
    let s = [0.2, 0.3, 0.5];
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[gumbel_sample(&s, 0.1, &mut rng, true).selected] += 1;
    }
    // argmax(ln s + g) is categorical with probabilities s / Σs
    let total: f64 = s.iter().sum();
    let freq_err = counts.iter().zip(&s).map(|(&c, p)| (c as f64 / draws as f64 - p / total).abs()).fold(0.0, f64::max);

    let mut uniform_err: f64 = 0.0;
    for _ in 0..draws {
        let z = relaxed_sample(&s, &gumbel_noise(&mut rng, 3), 1e6, None);
        uniform_err = uniform_err.max(z.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max));
    }
    let elapsed = start.elapsed();
    let pass = freq_err <= 0.02 && uniform_err <= 1e-3;
    verdict(
        5,
        pass,
        format!("τ=0.1 max frequency error {freq_err:.4} (limit 0.02), τ=1e6 max deviation from uniform {uniform_err:.1e} (limit 1e-3)"),
        elapsed,
    );
}

#[test]
fn criterion_6_path_sensitivity_experiment() {
    let start = Instant::now();
    let spec = SyntheticSpec::new(1000, 8, true, 42);
    let data = generate_dataset(&spec).unwrap();
    let (train, eval) = split(&data, 0.75, 42).unwrap();
    let train: Vec<PreparedGraph> = train.iter().map(PreparedGraph::new).collect();
    let eval: Vec<PreparedGraph> = eval.iter().map(PreparedGraph::new).collect();
    let tc = TrainConfig { seed: 42, patience: Some(PATIENCE), ..TrainConfig::default() };

    let mut trainer = Trainer::new(tc, Model::new(ModelConfig::new(spec.vocab_size), 42), &train).unwrap();
    trainer.fit(&train, &eval).unwrap();
    let (_, deq) = evaluate(&trainer.best_model(), &eval).unwrap();
    let deq_epochs = trainer.epoch;
    let deq_time = start.elapsed();

    let gcn = gcn_baseline(&train, &eval, GcnConfig::new(spec.vocab_size), tc).unwrap();
    let elapsed = start.elapsed();

    let pass = deq.accuracy >= 0.90 && deq.auc >= 0.95 && gcn.accuracy <= 0.75 && elapsed < Duration::from_secs(1800);
    verdict(
        6,
        pass,
        format!(
            "equilibrium model acc {:.3} auc {:.3} after {deq_epochs} epochs ({:.0} s); 2-layer GCN acc {:.3} auc {:.3} (targets ≥0.90, ≥0.95, ≤0.75, <1800 s)",
            deq.accuracy,
            deq.auc,
            deq_time.as_secs_f64(),
            gcn.accuracy,
            gcn.auc
        ),
        elapsed,
    );
}

#[test]
fn criterion_7_metrics() {
    let start = Instant::now();
    let brute = |scores: &[f64], labels: &[u8]| {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    };
    let mut fixtures: Vec<(Vec<f64>, Vec<u8>)> = vec![
        (vec![0.9, 0.8, 0.2, 0.1], vec![1, 1, 0, 0]),
        (vec![0.9, 0.8, 0.2, 0.1], vec![0, 0, 1, 1]),
        (vec![0.9, 0.8, 0.4, 0.3], vec![1, 0, 1, 0]),
        (vec![0.5, 0.5, 0.5], vec![1, 0, 1]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let labels: Vec<u8> = (0..n).map(|i| if i < 1 { 1 } else if i < 2 { 0 } else { rng.random_range(0..2) }).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..30u8)) / 30.0).collect();
        fixtures.push((scores, labels));
    }
    let worst = fixtures
        .iter()
        .map(|(s, l)| (compute_metrics(s, l, 0.5).unwrap().auc - brute(s, l)).abs())
        .fold(0.0, f64::max);
    let fixture = roc_auc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap();
    let elapsed = start.elapsed();
    verdict(
        7,
        worst < 1e-12 && fixture == 0.75,
        format!("max |AUC − concordance| {worst:.1e} over {} fixtures, fixture AUC {fixture}", fixtures.len()),
        elapsed,
    );
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let start = Instant::now();
    let mut spec = SyntheticSpec::new(40, 2, false, 8);
    spec.vocab_size = 20;
    spec.tokens_per_block = [2, 4];
    let (train, eval) = split(&generate_dataset(&spec).unwrap(), 0.75, 8).unwrap();
    let train: Vec<PreparedGraph> = train.iter().map(PreparedGraph::new).collect();
    let eval: Vec<PreparedGraph> = eval.iter().map(PreparedGraph::new).collect();
    let model = || {
        let mut cfg = ModelConfig::new(20);
        cfg.hidden = 12;
        cfg.embed_dim = 10;
        Model::new(cfg, 8)
    };
    let tc = TrainConfig { batch_size: 8, epochs: 6, seed: 8, ..TrainConfig::default() };
    let full = || {
        let mut t = Trainer::new(tc, model(), &train).unwrap();
        t.fit(&train, &eval).unwrap();
        t
    };
    let (a, b) = (full(), full());
    let same_runs = a.metrics_csv() == b.metrics_csv();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    let mut half = Trainer::new(tc, model(), &train).unwrap();
    for _ in 0..3 {
        half.run_epoch(&train, &eval).unwrap();
    }
    save_checkpoint(&half, &path).unwrap();
    drop(half);
    let mut resumed: Trainer<Model> = load_checkpoint(&path).unwrap();
    resumed.fit(&train, &eval).unwrap();
    let same_resume = resumed.metrics_csv() == a.metrics_csv()
        && resumed.model.store.values() == a.model.store.values()
        && resumed.adam.m == a.adam.m
        && resumed.adam.v == a.adam.v;
    let elapsed = start.elapsed();
    verdict(
        8,
        same_runs && same_resume,
        format!("identical CSVs across runs: {same_runs}; resume from epoch 3 bit-identical: {same_resume}"),
        elapsed,
    );
}

#[test]
fn criterion_9_memory_contract() {
    let start = Instant::now();
    let spec = SyntheticSpec::new(4, 8, true, 9);
    let g = PreparedGraph::new(&generate_dataset(&spec).unwrap()[0]);
    let mut model = Model::new(ModelConfig::new(spec.vocab_size), 9);
    model.project(g.pf_eigenvalue());
    let mut counts = Vec::new();
    let mut iterations = Vec::new();
    for max_iter in [10, 50] {
        // tol 0: both solves spend the whole budget
        model.config.solver = SolverConfig { max_iter, tol: 0.0, ..SolverConfig::default() };
        let (logit, cache) = model.forward(&g, Mode::Train, 3).unwrap();
        let (_, stats) = model.backward(&g, &cache, bce_grad(logit, 1.0)).unwrap();
        iterations.push((cache.solver.iterations, stats.adjoint_iterations));
        counts.push(stats.retained_floats);
    }
    let change = (counts[1] as f64 - counts[0] as f64).abs() / counts[0] as f64;
    let elapsed = start.elapsed();
    verdict(
        9,
        change < 0.01 && iterations == [(10, 10), (50, 50)],
        format!(
            "retained floats {} at 10 iterations vs {} at 50 (change {:.3}%, limit 1%)",
            counts[0],
            counts[1],
            100.0 * change
        ),
        elapsed,
    );
}
