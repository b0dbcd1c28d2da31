mod common;

use common::*;
use deepexe::nn::finite_diff_check;
use deepexe::training::{Mode, Model};

#[test]
fn implicit_matches_unrolled_oracle() {
    for seed in 0..10 {
        let (model, g) = setup(seed, 4, 4);
        let label = f64::from(g.label.unwrap());
        let (logit, cache) = model.forward(&g, Mode::Train, seed).unwrap();
        let (implicit, _) = model.backward(&g, &cache, bce_grad(logit, label)).unwrap();
        let (_, unrolled) = unrolled_gradients(&model, &g, Mode::Train, seed, 100);
        let (err, p) = max_rel_error(&implicit, &unrolled);
        assert!(err < 1e-4, "seed {seed}: {err} at {}", model.store.name(deepexe::nn::ParamId(p)));
    }
}

#[test]
fn full_model_matches_finite_differences() {
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
        let worst = report.worst().unwrap();
        assert!(worst.max_rel_error < 1e-4, "seed {seed}: {} {}", worst.name, worst.max_rel_error);
    }
}

#[test]
fn implicit_matches_unrolled_for_every_agent_variant() {
    use deepexe::executor::{AgentMode, GatingMode};
    let variants = [
        (AgentMode::Hard, GatingMode::Column, false, 0.0),
        (AgentMode::Soft, GatingMode::Row, false, 0.0),
        (AgentMode::Soft, GatingMode::Column, true, 0.5),
        (AgentMode::Hard, GatingMode::Row, true, 0.5),
    ];
    for (k, &(mode, gating, mask, dropout)) in variants.iter().enumerate() {
        for seed in 0..3 {
            let (mut model, g) = setup(500 + seed, 4, 4);
            model.config.agent.mode = mode;
            model.config.agent.gating = gating;
            model.config.agent.successor_mask = mask;
            model.config.agent.tau = 0.5;
            model.config.dropout = dropout;
            let label = f64::from(g.label.unwrap());
            let (logit, cache) = model.forward(&g, Mode::Train, seed).unwrap();
            let (implicit, _) = model.backward(&g, &cache, bce_grad(logit, label)).unwrap();
            let (_, unrolled) = unrolled_gradients(&model, &g, Mode::Train, seed, 100);
            let (err, _) = max_rel_error(&implicit, &unrolled);
            assert!(err < 1e-4, "variant {k} seed {seed}: {err}");
        }
    }
}

#[test]
fn agent_vjp_matches_closed_form() {
    // ∂z/∂q for z = softmax((ln σ(q) + g)/τ).
    use deepexe::executor::agent_vjp;
    let z = [0.2, 0.5, 0.3];
    let s = [0.4, 0.9, 0.6];
    let d = [1.0, -2.0, 0.5];
    let expected: Vec<f64> = {
        let inner: f64 = z.iter().zip(&d).map(|(a, b)| a * b).sum();
        (0..3).map(|i| z[i] * (d[i] - inner) * (1.0 - s[i]) / 0.7).collect()
    };
    for (a, b) in agent_vjp(&z, &s, 0.7, &d).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}
