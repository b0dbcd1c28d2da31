//! Gated recurrent unit with reset applied before the candidate transform:
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! c  = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
//! h' = (1 − z) ⊙ h + z ⊙ c
//! ```

use rand_chacha::ChaCha8Rng;

use super::ops::sigmoid;
use super::params::{glorot, Gradients, ParamId, ParamStore};
use super::tensor::{dot, Tensor};

/// Gate order: update, reset, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
}

impl GruParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gates = ["z", "r", "n"];
        let w = gates.map(|g| store.add(&format!("{prefix}.w_{g}"), glorot(rng, input, hidden)));
        let u = gates.map(|g| store.add(&format!("{prefix}.u_{g}"), glorot(rng, hidden, hidden)));
        let b = gates.map(|g| store.add(&format!("{prefix}.b_{g}"), Tensor::zeros(&[hidden])));
        Self { w, u, b }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.get(self.u[0]).rows()
    }
}

/// Activations retained for backpropagation through one sequence.
#[derive(Debug, Clone)]
pub struct GruTrace {
    xs: Tensor,
    /// `L+1` rows; row 0 is the zero initial state.
    hs: Tensor,
    z: Tensor,
    r: Tensor,
    c: Tensor,
    rh: Tensor,
}

impl GruTrace {
    pub fn retained_floats(&self) -> usize {
        self.xs.len() + self.hs.len() + self.z.len() + self.r.len() + self.c.len() + self.rh.len()
    }
}

fn vecmat(v: &[f64], m: &Tensor, out: &mut [f64]) {
    out.fill(0.0);
    let n = m.cols();
    for (p, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(&m.data()[p * n..(p + 1) * n]) {
            *o += a * b;
        }
    }
}

/// Runs the cell over the rows of `xs` (`L×in`) from a zero state.
/// Returns the hidden states `L×h`.
pub fn gru_sequence(store: &ParamStore, p: &GruParams, xs: &Tensor) -> (Tensor, GruTrace) {
    let h = p.hidden(store);
    let len = xs.rows();
    let xw: Vec<Tensor> = (0..3).map(|g| xs.matmul(store.get(p.w[g]))).collect();
    let u: Vec<&Tensor> = p.u.iter().map(|&id| store.get(id)).collect();
    let b: Vec<&[f64]> = p.b.iter().map(|&id| store.get(id).data()).collect();

    let mut hs = Tensor::zeros(&[len + 1, h]);
    let mut z = Tensor::zeros(&[len, h]);
    let mut r = Tensor::zeros(&[len, h]);
    let mut c = Tensor::zeros(&[len, h]);
    let mut rh = Tensor::zeros(&[len, h]);
    let mut hu = vec![0.0; h];

    for t in 0..len {
        let prev = hs.row(t).to_vec();
        vecmat(&prev, u[0], &mut hu);
        for k in 0..h {
            z.set(t, k, sigmoid(xw[0].at(t, k) + hu[k] + b[0][k]));
        }
        vecmat(&prev, u[1], &mut hu);
        for k in 0..h {
            let rv = sigmoid(xw[1].at(t, k) + hu[k] + b[1][k]);
            r.set(t, k, rv);
            rh.set(t, k, rv * prev[k]);
        }
        vecmat(rh.row(t), u[2], &mut hu);
        for k in 0..h {
            c.set(t, k, (xw[2].at(t, k) + hu[k] + b[2][k]).tanh());
        }
        for k in 0..h {
            let zv = z.at(t, k);
            hs.set(t + 1, k, (1.0 - zv) * prev[k] + zv * c.at(t, k));
        }
    }
    let out = Tensor::from_vec(&[len, h], hs.data()[h..].to_vec()).expect("shape");
    (out, GruTrace { xs: xs.clone(), hs, z, r, c, rh })
}

/// Backpropagates `d_out` (`L×h`, gradient w.r.t. every emitted state)
/// through the sequence. Accumulates parameter gradients and returns `dxs`.
pub fn gru_sequence_backward(
    store: &ParamStore,
    p: &GruParams,
    trace: &GruTrace,
    d_out: &Tensor,
    grads: &mut Gradients,
) -> Tensor {
    let h = p.hidden(store);
    let len = trace.xs.rows();
    let u: Vec<&Tensor> = p.u.iter().map(|&id| store.get(id)).collect();

    let mut dz_pre = Tensor::zeros(&[len, h]);
    let mut dr_pre = Tensor::zeros(&[len, h]);
    let mut dc_pre = Tensor::zeros(&[len, h]);
    let mut dh = vec![0.0; h];
    let mut tmp = vec![0.0; h];

    for t in (0..len).rev() {
        for (k, d) in dh.iter_mut().enumerate() {
            *d += d_out.at(t, k);
        }
        let prev = trace.hs.row(t);
        let mut dprev = vec![0.0; h];
        for k in 0..h {
            let (zv, cv) = (trace.z.at(t, k), trace.c.at(t, k));
            dz_pre.set(t, k, dh[k] * (cv - prev[k]) * zv * (1.0 - zv));
            dc_pre.set(t, k, dh[k] * zv * (1.0 - cv * cv));
            dprev[k] = dh[k] * (1.0 - zv);
        }
        // d(r ⊙ h) = dc_pre · U_nᵀ
        let drh: Vec<f64> = (0..h)
            .map(|i| dot(u[2].row(i), dc_pre.row(t)))
            .collect();
        for k in 0..h {
            let rv = trace.r.at(t, k);
            dr_pre.set(t, k, drh[k] * prev[k] * rv * (1.0 - rv));
            dprev[k] += drh[k] * rv;
        }
        for (gate, dpre) in [(0, &dz_pre), (1, &dr_pre)] {
            for (i, o) in tmp.iter_mut().enumerate() {
                *o = dot(u[gate].row(i), dpre.row(t));
            }
            for (d, t) in dprev.iter_mut().zip(&tmp) {
                *d += t;
            }
        }
        dh = dprev;
    }

    let hs_prev = Tensor::from_vec(&[len, h], trace.hs.data()[..len * h].to_vec()).expect("shape");
    grads.get_mut(p.u[0]).add_assign(&hs_prev.matmul_tn(&dz_pre));
    grads.get_mut(p.u[1]).add_assign(&hs_prev.matmul_tn(&dr_pre));
    grads.get_mut(p.u[2]).add_assign(&trace.rh.matmul_tn(&dc_pre));

    let mut dxs = Tensor::zeros(trace.xs.shape());
    for (g, dpre) in [&dz_pre, &dr_pre, &dc_pre].into_iter().enumerate() {
        grads.get_mut(p.w[g]).add_assign(&trace.xs.matmul_tn(dpre));
        let db = grads.get_mut(p.b[g]);
        for (o, s) in db.data_mut().iter_mut().zip(dpre.sum_rows()) {
            *o += s;
        }
        dxs.add_assign(&dpre.matmul_nt(store.get(p.w[g])));
    }
    dxs
}

/// `out[i,:] = a[i,:]·m` for the first `rows` rows of `a`, streaming each
/// row of `m` once across all rows.
fn rows_matmul(a: &[f64], rows: usize, m: &Tensor, out: &mut [f64]) {
    let (k, n) = (m.rows(), m.cols());
    out[..rows * n].fill(0.0);
    for p in 0..k {
        let mrow = &m.data()[p * n..(p + 1) * n];
        for i in 0..rows {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(mrow) {
                *o += x * b;
            }
        }
    }
}

/// `out[i,p] = m[p,:]·a[i,:]` (that is `a·mᵀ`) for the first `rows` rows.
fn rows_matmul_nt(a: &[f64], rows: usize, m: &Tensor, out: &mut [f64]) {
    let (k, n) = (m.rows(), m.cols());
    for p in 0..k {
        let mrow = m.row(p);
        for i in 0..rows {
            out[i * k + p] = dot(mrow, &a[i * n..(i + 1) * n]);
        }
    }
}

/// Sequence indices by decreasing length, so the sequences still running
/// at any step form a prefix.
fn by_length(lens: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(lens[i]));
    order
}

/// [`gru_sequence`] over many independent sequences at once. Results are
/// identical to running each sequence alone.
pub fn gru_batch(store: &ParamStore, p: &GruParams, seqs: &[Tensor]) -> Vec<(Tensor, GruTrace)> {
    let h = p.hidden(store);
    let lens: Vec<usize> = seqs.iter().map(Tensor::rows).collect();
    let order = by_length(&lens);
    let m = seqs.len();
    let u: Vec<&Tensor> = p.u.iter().map(|&id| store.get(id)).collect();
    let b: Vec<&[f64]> = p.b.iter().map(|&id| store.get(id).data()).collect();
    let xw: Vec<Vec<Tensor>> = seqs.iter().map(|xs| (0..3).map(|g| xs.matmul(store.get(p.w[g]))).collect()).collect();
    let mut traces: Vec<GruTrace> = seqs
        .iter()
        .map(|xs| {
            let len = xs.rows();
            GruTrace {
                xs: xs.clone(),
                hs: Tensor::zeros(&[len + 1, h]),
                z: Tensor::zeros(&[len, h]),
                r: Tensor::zeros(&[len, h]),
                c: Tensor::zeros(&[len, h]),
                rh: Tensor::zeros(&[len, h]),
            }
        })
        .collect();

    // packed rows follow `order`
    let mut prev = vec![0.0; m * h];
    let mut rh = vec![0.0; m * h];
    let mut hu = vec![0.0; m * h];
    let max_len = lens.iter().copied().max().unwrap_or(0);
    for t in 0..max_len {
        let active = order.iter().take_while(|&&i| lens[i] > t).count();
        rows_matmul(&prev, active, u[0], &mut hu);
        for (row, &i) in order[..active].iter().enumerate() {
            let tr = &mut traces[i];
            for k in 0..h {
                tr.z.set(t, k, sigmoid(xw[i][0].at(t, k) + hu[row * h + k] + b[0][k]));
            }
        }
        rows_matmul(&prev, active, u[1], &mut hu);
        for (row, &i) in order[..active].iter().enumerate() {
            let tr = &mut traces[i];
            for k in 0..h {
                let rv = sigmoid(xw[i][1].at(t, k) + hu[row * h + k] + b[1][k]);
                tr.r.set(t, k, rv);
                rh[row * h + k] = rv * prev[row * h + k];
                tr.rh.set(t, k, rh[row * h + k]);
            }
        }
        rows_matmul(&rh, active, u[2], &mut hu);
        for (row, &i) in order[..active].iter().enumerate() {
            let tr = &mut traces[i];
            for k in 0..h {
                let cv = (xw[i][2].at(t, k) + hu[row * h + k] + b[2][k]).tanh();
                tr.c.set(t, k, cv);
                let zv = tr.z.at(t, k);
                let next = (1.0 - zv) * prev[row * h + k] + zv * cv;
                tr.hs.set(t + 1, k, next);
                prev[row * h + k] = next;
            }
        }
    }
    traces
        .into_iter()
        .map(|tr| {
            let len = tr.xs.rows();
            let out = Tensor::from_vec(&[len, h], tr.hs.data()[h..].to_vec()).expect("shape");
            (out, tr)
        })
        .collect()
}

/// Gradients of [`gru_batch`]; returns the input gradient per sequence.
pub fn gru_batch_backward(
    store: &ParamStore,
    p: &GruParams,
    traces: &[&GruTrace],
    d_outs: &[Tensor],
    grads: &mut Gradients,
) -> Vec<Tensor> {
    let h = p.hidden(store);
    let lens: Vec<usize> = traces.iter().map(|t| t.xs.rows()).collect();
    let order = by_length(&lens);
    let m = traces.len();
    let u: Vec<&Tensor> = p.u.iter().map(|&id| store.get(id)).collect();
    let mut pre: Vec<[Tensor; 3]> = lens.iter().map(|&l| std::array::from_fn(|_| Tensor::zeros(&[l, h]))).collect();

    let mut dh = vec![0.0; m * h];
    let mut dprev = vec![0.0; m * h];
    let mut dc = vec![0.0; m * h];
    let mut dgate = vec![0.0; m * h];
    let mut tmp = vec![0.0; m * h];
    let max_len = lens.iter().copied().max().unwrap_or(0);
    for t in (0..max_len).rev() {
        let active = order.iter().take_while(|&&i| lens[i] > t).count();
        for (row, &i) in order[..active].iter().enumerate() {
            let tr = traces[i];
            let prev = tr.hs.row(t);
            for k in 0..h {
                let d = &mut dh[row * h + k];
                *d += d_outs[i].at(t, k);
                let (zv, cv) = (tr.z.at(t, k), tr.c.at(t, k));
                pre[i][0].set(t, k, *d * (cv - prev[k]) * zv * (1.0 - zv));
                dc[row * h + k] = *d * zv * (1.0 - cv * cv);
                pre[i][2].set(t, k, dc[row * h + k]);
                dprev[row * h + k] = *d * (1.0 - zv);
            }
        }
        rows_matmul_nt(&dc, active, u[2], &mut tmp);
        for (row, &i) in order[..active].iter().enumerate() {
            let tr = traces[i];
            let prev = tr.hs.row(t);
            for k in 0..h {
                let rv = tr.r.at(t, k);
                let drh = tmp[row * h + k];
                pre[i][1].set(t, k, drh * prev[k] * rv * (1.0 - rv));
                dprev[row * h + k] += drh * rv;
            }
        }
        for gate in 0..2 {
            for (row, &i) in order[..active].iter().enumerate() {
                dgate[row * h..(row + 1) * h].copy_from_slice(pre[i][gate].row(t));
            }
            rows_matmul_nt(&dgate, active, u[gate], &mut tmp);
            for (d, x) in dprev[..active * h].iter_mut().zip(&tmp) {
                *d += x;
            }
        }
        dh[..active * h].copy_from_slice(&dprev[..active * h]);
    }

    traces
        .iter()
        .zip(&pre)
        .map(|(tr, [dz_pre, dr_pre, dc_pre])| {
            let len = tr.xs.rows();
            let hs_prev = Tensor::from_vec(&[len, h], tr.hs.data()[..len * h].to_vec()).expect("shape");
            grads.get_mut(p.u[0]).add_assign(&hs_prev.matmul_tn(dz_pre));
            grads.get_mut(p.u[1]).add_assign(&hs_prev.matmul_tn(dr_pre));
            grads.get_mut(p.u[2]).add_assign(&tr.rh.matmul_tn(dc_pre));
            let mut dxs = Tensor::zeros(tr.xs.shape());
            for (g, dpre) in [dz_pre, dr_pre, dc_pre].into_iter().enumerate() {
                grads.get_mut(p.w[g]).add_assign(&tr.xs.matmul_tn(dpre));
                let db = grads.get_mut(p.b[g]);
                for (o, s) in db.data_mut().iter_mut().zip(dpre.sum_rows()) {
                    *o += s;
                }
                dxs.add_assign(&dpre.matmul_nt(store.get(p.w[g])));
            }
            dxs
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_zero_input_hand_cell() {
        // z = r = σ(0) = 0.5, c = tanh(0) = 0, h' = 0.5·0 + 0.5·0 = 0.
        let mut store = ParamStore::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::register(&mut store, "g", 2, 3, &mut rng);
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let (out, trace) = gru_sequence(&store, &p, &Tensor::zeros(&[1, 2]));
        assert_eq!(out.data(), &[0.0; 3]);
        assert!(trace.z.data().iter().all(|&z| z == 0.5));
        assert!(trace.r.data().iter().all(|&r| r == 0.5));
    }

    #[test]
    fn single_step_with_bias_matches_hand_computation() {
        // b_n = 1, b_z = 0: h' = 0.5 · tanh(1).
        let mut store = ParamStore::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::register(&mut store, "g", 1, 1, &mut rng);
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        store.get_mut(p.b[2]).data_mut()[0] = 1.0;
        let (out, _) = gru_sequence(&store, &p, &Tensor::zeros(&[1, 1]));
        assert!((out.data()[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let mut store = ParamStore::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GruParams::register(&mut store, "g", 3, 4, &mut rng);
        let xs = super::super::params::uniform(&mut rng, &[5, 3], 1.0);
        let (a, _) = gru_sequence(&store, &p, &xs);
        let (b, _) = gru_sequence(&store, &p, &xs);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batch_matches_single_sequences() {
        let mut store = ParamStore::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruParams::register(&mut store, "g", 3, 4, &mut rng);
        let seqs: Vec<Tensor> =
            [5, 1, 3, 5, 2].iter().map(|&l| super::super::params::uniform(&mut rng, &[l, 3], 1.0)).collect();
        let batch = gru_batch(&store, &p, &seqs);
        let d_outs: Vec<Tensor> = seqs.iter().map(|s| super::super::params::uniform(&mut rng, &[s.rows(), 4], 1.0)).collect();
        let mut g_single = store.zeros_like();
        let mut g_batch = store.zeros_like();
        for ((xs, (out, trace)), d) in seqs.iter().zip(&batch).zip(&d_outs) {
            let (o, tr) = gru_sequence(&store, &p, xs);
            assert_eq!(o.data(), out.data());
            let dx = gru_sequence_backward(&store, &p, &tr, d, &mut g_single);
            let dxb = gru_batch_backward(&store, &p, &[trace], std::slice::from_ref(d), &mut store.zeros_like());
            for (a, b) in dx.data().iter().zip(dxb[0].data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let traces: Vec<&GruTrace> = batch.iter().map(|(_, t)| t).collect();
        gru_batch_backward(&store, &p, &traces, &d_outs, &mut g_batch);
        for (a, b) in g_single.0.iter().zip(&g_batch.0) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
