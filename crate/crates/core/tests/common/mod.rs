#![allow(dead_code)]

use deepexe::graph::CfgGraph;
use deepexe::nn::{Gradients, Tensor};
use deepexe::solver::SolverConfig;
use deepexe::training::model::{head_backward, head_forward};
use deepexe::training::{Mode, Model, ModelConfig, PreparedGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 10;

/// Random valid CFG with `n` nodes: a spine `0 → 1 → … → n−1` plus random
/// extra edges among the non-exit nodes. Node `n−1` is the only exit.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, max_tokens: usize) -> CfgGraph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for i in 0..n.saturating_sub(1) {
        for j in 0..n {
            if i != j && !edges.contains(&(i, j)) && rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let nodes = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_tokens);
            (0..len).map(|_| rng.random_range(1..VOCAB as u32)).collect()
        })
        .collect();
    CfgGraph::from_edges("rand", nodes, &edges, 0, vec![n - 1], Some(rng.random_range(0..2))).unwrap()
}

pub fn small_model(seed: u64, hidden: usize, embed_dim: usize) -> Model {
    let mut cfg = ModelConfig::new(VOCAB);
    cfg.hidden = hidden;
    cfg.embed_dim = embed_dim;
    cfg.dropout = 0.0;
    Model::new(cfg, seed)
}

/// Solver that runs a fixed number of plain iterations, which makes the
/// loss a smooth function of the parameters.
pub fn fixed_steps(steps: usize) -> SolverConfig {
    SolverConfig { naive: true, tol: 0.0, max_iter: steps, ..SolverConfig::default() }
}

pub fn bce(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p()
}

pub fn bce_grad(logit: f64, label: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp()) - label
}

/// Gradient oracle by explicit backpropagation through `steps` unrolled
/// applications of the joint update from `X⁰ = U`, with the same frozen
/// noise as the implicit path. Returns `(loss, gradients)`.
pub fn unrolled_gradients(model: &Model, graph: &PreparedGraph, mode: Mode, seed: u64, steps: usize) -> (f64, Gradients) {
    let label = f64::from(graph.label.unwrap());
    let (u_raw, enc_cache) = model.encode(graph).unwrap();
    let (dropout, noise) = model.draw_randomness(graph.len(), mode, seed);
    let u = match &dropout {
        Some(m) => Tensor::from_vec(u_raw.shape(), u_raw.data().iter().zip(m).map(|(a, b)| a * b).collect()).unwrap(),
        None => u_raw,
    };
    let mask = model.initial_mask(graph, &u, &noise);
    let step = model.joint_step(graph, &u, &noise, mask.as_deref());

    let mut caches = Vec::with_capacity(steps);
    let mut x = u.clone();
    for _ in 0..steps {
        let c = step.forward(&x).unwrap();
        x = c.out.clone();
        caches.push(c);
    }
    let ids = model.ids;
    let s = &model.store;
    let (logit, head) = head_forward(&x, s.get(ids.ln_gain).data(), s.get(ids.ln_bias).data(), s.get(ids.head).data());
    let loss = bce(logit, label);

    let mut grads = s.zeros_like();
    let h = model.config.hidden;
    let (mut dg, mut db, mut dh) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    let mut dx = head_backward(&head, bce_grad(logit, label), s.get(ids.ln_gain).data(), s.get(ids.head).data(), &mut dg, &mut db, &mut dh);
    grads.get_mut(ids.ln_gain).data_mut().copy_from_slice(&dg);
    grads.get_mut(ids.ln_bias).data_mut().copy_from_slice(&db);
    grads.get_mut(ids.head).data_mut().copy_from_slice(&dh);

    let mut du = Tensor::zeros(u.shape());
    for c in caches.iter().rev() {
        let v = step.vjp(c, &dx);
        grads.get_mut(ids.w_s).add_assign(&v.dw_s);
        grads.get_mut(ids.w).add_assign(&v.dw);
        grads.get_mut(ids.omega).add_assign(&v.domega);
        grads.get_mut(ids.cell_bias).add_assign(&v.dbias);
        du.add_assign(&v.du);
        dx = v.dx;
    }
    // X⁰ = U contributes too.
    du.add_assign(&dx);
    if let Some(m) = &dropout {
        for (d, k) in du.data_mut().iter_mut().zip(m) {
            *d *= k;
        }
    }
    deepexe::nn::encode_backward(s, &ids.encoder, &enc_cache, &du, &mut grads);
    (loss, grads)
}

/// Worst relative error `|a−b| / max(|a|,|b|,1e-8)` over all entries.
pub fn max_rel_error(a: &Gradients, b: &Gradients) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (p, (ta, tb)) in a.0.iter().zip(&b.0).enumerate() {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let e = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            if e > worst.0 {
                worst = (e, p);
            }
        }
    }
    worst
}

/// Random graph with `n ≤ n_max` nodes and a model with `h ≤ h_max`,
/// projected onto the well-posed set and solved by 300 plain iterations.
pub fn setup(seed: u64, n_max: usize, h_max: usize) -> (Model, PreparedGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=n_max);
    let g = PreparedGraph::new(&random_graph(&mut rng, n, 5));
    let h = rng.random_range(2..=h_max);
    let mut model = small_model(seed, h, rng.random_range(2..=h_max));
    model.config.solver = fixed_steps(300);
    model.project(g.pf_eigenvalue());
    (model, g)
}
