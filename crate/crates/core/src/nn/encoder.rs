//! Block semantics encoder: token embedding, bidirectional GRU and pooling
//! along the time axis, producing one `h`-vector per basic block.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru::{gru_batch, gru_batch_backward, GruParams, GruTrace};
use super::params::{glorot, uniform, Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    #[default]
    Avg,
}

/// Padded `n×v` token-id matrix with its real-position mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub width: usize,
}

impl TokenBatch {
    /// Pads ragged sequences with [`PAD_ID`]. Pad ids are masked out.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = s.clone();
            row.resize(width, PAD_ID);
            mask.push(row.iter().map(|&t| t != PAD_ID).collect());
            ids.push(row);
        }
        Self { ids, mask, width }
    }

    pub fn nodes(&self) -> usize {
        self.ids.len()
    }
}

/// `out[i,t,:] = E[ids[i,t],:]`; the pad id always yields a zero row.
pub fn embed(ids: &[Vec<u32>], table: &Tensor) -> Result<Tensor> {
    let (vocab, h) = (table.rows(), table.cols());
    let width = ids.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[ids.len(), width, h]);
    for (i, row) in ids.iter().enumerate() {
        for (t, &id) in row.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::IdOutOfRange { id, size: vocab });
            }
            if id == PAD_ID as usize {
                continue;
            }
            let base = (i * width + t) * h;
            out.data_mut()[base..base + h].copy_from_slice(table.row(id));
        }
    }
    Ok(out)
}

/// Scatter-add of `d_out` into the embedding gradient. Row 0 stays frozen.
pub fn embed_backward(ids: &[Vec<u32>], d_out: &Tensor, d_table: &mut Tensor) {
    let h = d_table.cols();
    let width = ids.first().map_or(0, Vec::len);
    for (i, row) in ids.iter().enumerate() {
        for (t, &id) in row.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            let base = (i * width + t) * h;
            for (g, d) in d_table.row_mut(id as usize).iter_mut().zip(&d_out.data()[base..base + h]) {
                *g += d;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruParams {
    pub forward: GruParams,
    pub backward: GruParams,
    /// `2h×h` projection of the concatenated directions back to `h`.
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

impl BiGruParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let forward = GruParams::register(store, &format!("{prefix}.fwd"), input, hidden, rng);
        let backward = GruParams::register(store, &format!("{prefix}.bwd"), input, hidden, rng);
        let mix_w = store.add(&format!("{prefix}.mix_w"), glorot(rng, 2 * hidden, hidden));
        let mix_b = store.add(&format!("{prefix}.mix_b"), Tensor::zeros(&[hidden]));
        Self { forward, backward, mix_w, mix_b }
    }
}

#[derive(Debug, Clone)]
struct NodeTrace {
    positions: Vec<usize>,
    fwd: GruTrace,
    bwd: GruTrace,
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    nodes: Vec<NodeTrace>,
    /// Both directions side by side, all nodes stacked in order.
    concat: Tensor,
    input_shape: Vec<usize>,
}

impl BiGruCache {
    pub fn retained_floats(&self) -> usize {
        self.nodes.iter().map(|n| n.fwd.retained_floats() + n.bwd.retained_floats()).sum::<usize>()
            + self.concat.len()
    }
}

fn gather(x: &Tensor, node: usize, positions: &[usize]) -> Tensor {
    let (width, h) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[positions.len(), h]);
    for (r, &t) in positions.iter().enumerate() {
        let base = (node * width + t) * h;
        out.row_mut(r).copy_from_slice(&x.data()[base..base + h]);
    }
    out
}

fn reversed(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let len = x.rows();
    for r in 0..len {
        out.row_mut(len - 1 - r).copy_from_slice(x.row(r));
    }
    out
}

/// Bidirectional GRU over the unmasked positions of each node (`n×v×h_in`
/// to `n×v×h`). Masked positions produce zero rows.
pub fn bigru_forward(
    store: &ParamStore,
    p: &BiGruParams,
    x: &Tensor,
    mask: &[Vec<bool>],
) -> Result<(Tensor, BiGruCache)> {
    let (n, width) = (x.shape()[0], x.shape()[1]);
    let h = p.forward.hidden(store);
    let mut positions = Vec::with_capacity(n);
    for (i, m) in mask.iter().enumerate() {
        let pos: Vec<usize> = (0..width).filter(|&t| m[t]).collect();
        if pos.is_empty() {
            return Err(Error::AllPadNode(i));
        }
        positions.push(pos);
    }
    let xs: Vec<Tensor> = positions.iter().enumerate().map(|(i, pos)| gather(x, i, pos)).collect();
    let rev: Vec<Tensor> = xs.iter().map(reversed).collect();
    let fwd = gru_batch(store, &p.forward, &xs);
    let bwd = gru_batch(store, &p.backward, &rev);

    let total: usize = positions.iter().map(Vec::len).sum();
    let mut concat = Tensor::zeros(&[total, 2 * h]);
    let mut at = 0;
    for ((hf, _), (hb_rev, _)) in fwd.iter().zip(&bwd) {
        let len = hf.rows();
        for r in 0..len {
            concat.row_mut(at + r)[..h].copy_from_slice(hf.row(r));
            concat.row_mut(at + r)[h..].copy_from_slice(hb_rev.row(len - 1 - r));
        }
        at += len;
    }
    let mixed = super::ops::linear(&concat, store.get(p.mix_w), Some(store.get(p.mix_b)))?;
    let mut out = Tensor::zeros(&[n, width, h]);
    let mut row = 0;
    for (i, pos) in positions.iter().enumerate() {
        for &t in pos {
            let base = (i * width + t) * h;
            out.data_mut()[base..base + h].copy_from_slice(mixed.row(row));
            row += 1;
        }
    }
    let nodes = positions
        .into_iter()
        .zip(fwd.into_iter().zip(bwd))
        .map(|(positions, ((_, fwd), (_, bwd)))| NodeTrace { positions, fwd, bwd })
        .collect();
    Ok((out, BiGruCache { nodes, concat, input_shape: x.shape().to_vec() }))
}

/// Returns the gradient w.r.t. the `n×v×h_in` input.
pub fn bigru_backward(
    store: &ParamStore,
    p: &BiGruParams,
    cache: &BiGruCache,
    d_out: &Tensor,
    grads: &mut Gradients,
) -> Tensor {
    let width = cache.input_shape[1];
    let h_in = cache.input_shape[2];
    let h = p.forward.hidden(store);
    let mut d_mixed = Tensor::zeros(&[cache.concat.rows(), h]);
    let mut row = 0;
    for (i, node) in cache.nodes.iter().enumerate() {
        for &t in &node.positions {
            let base = (i * width + t) * h;
            d_mixed.row_mut(row).copy_from_slice(&d_out.data()[base..base + h]);
            row += 1;
        }
    }
    let (d_concat, dw, db) = super::ops::linear_backward(&cache.concat, store.get(p.mix_w), &d_mixed);
    grads.get_mut(p.mix_w).add_assign(&dw);
    grads.get_mut(p.mix_b).add_assign(&db);

    let mut dhf = Vec::with_capacity(cache.nodes.len());
    let mut dhb_rev = Vec::with_capacity(cache.nodes.len());
    let mut at = 0;
    for node in &cache.nodes {
        let len = node.positions.len();
        let (mut f, mut b) = (Tensor::zeros(&[len, h]), Tensor::zeros(&[len, h]));
        for r in 0..len {
            f.row_mut(r).copy_from_slice(&d_concat.row(at + r)[..h]);
            b.row_mut(len - 1 - r).copy_from_slice(&d_concat.row(at + r)[h..]);
        }
        dhf.push(f);
        dhb_rev.push(b);
        at += len;
    }
    let fwd: Vec<&GruTrace> = cache.nodes.iter().map(|n| &n.fwd).collect();
    let bwd: Vec<&GruTrace> = cache.nodes.iter().map(|n| &n.bwd).collect();
    let dxf = gru_batch_backward(store, &p.forward, &fwd, &dhf, grads);
    let dxb_rev = gru_batch_backward(store, &p.backward, &bwd, &dhb_rev, grads);

    let mut dx = Tensor::zeros(&cache.input_shape);
    for (i, node) in cache.nodes.iter().enumerate() {
        let len = node.positions.len();
        for (r, &t) in node.positions.iter().enumerate() {
            let base = (i * width + t) * h_in;
            let slot = &mut dx.data_mut()[base..base + h_in];
            for k in 0..h_in {
                slot[k] += dxf[i].at(r, k) + dxb_rev[i].at(len - 1 - r, k);
            }
        }
    }
    dx
}

/// Per-node pooling choice: the argmax position per feature for `Max`.
#[derive(Debug, Clone)]
pub struct PoolCache {
    mode: PoolMode,
    shape: Vec<usize>,
    counts: Vec<usize>,
    argmax: Vec<Vec<usize>>,
}

/// Pools `n×v×h` to `n×h` over unmasked positions only.
pub fn time_pool(x: &Tensor, mode: PoolMode, mask: &[Vec<bool>]) -> Result<(Tensor, PoolCache)> {
    let (n, width, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[n, h]);
    let mut counts = Vec::with_capacity(n);
    let mut argmax = Vec::new();
    for i in 0..n {
        let positions: Vec<usize> = (0..width).filter(|&t| mask[i][t]).collect();
        if positions.is_empty() {
            return Err(Error::AllPadNode(i));
        }
        counts.push(positions.len());
        let at = |t: usize, k: usize| x.data()[(i * width + t) * h + k];
        match mode {
            PoolMode::Avg => {
                let inv = 1.0 / positions.len() as f64;
                for k in 0..h {
                    out.set(i, k, positions.iter().map(|&t| at(t, k)).sum::<f64>() * inv);
                }
            }
            PoolMode::Max => {
                let mut best = Vec::with_capacity(h);
                for k in 0..h {
                    let t = *positions
                        .iter()
                        .max_by(|&&a, &&b| at(a, k).total_cmp(&at(b, k)).then(b.cmp(&a)))
                        .expect("nonempty");
                    best.push(t);
                    out.set(i, k, at(t, k));
                }
                argmax.push(best);
            }
        }
    }
    Ok((out, PoolCache { mode, shape: x.shape().to_vec(), counts, argmax }))
}

pub fn time_pool_backward(cache: &PoolCache, mask: &[Vec<bool>], d_out: &Tensor) -> Tensor {
    let (width, h) = (cache.shape[1], cache.shape[2]);
    let mut dx = Tensor::zeros(&cache.shape);
    for i in 0..cache.shape[0] {
        match cache.mode {
            PoolMode::Avg => {
                let inv = 1.0 / cache.counts[i] as f64;
                for t in (0..width).filter(|&t| mask[i][t]) {
                    let base = (i * width + t) * h;
                    for k in 0..h {
                        dx.data_mut()[base + k] = d_out.at(i, k) * inv;
                    }
                }
            }
            PoolMode::Max => {
                for k in 0..h {
                    let t = cache.argmax[i][k];
                    dx.data_mut()[(i * width + t) * h + k] += d_out.at(i, k);
                }
            }
        }
    }
    dx
}

/// Embedding table plus bidirectional GRU.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub bigru: BiGruParams,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut table = uniform(rng, &[vocab, embed_dim], 1.0 / (embed_dim as f64).sqrt());
        table.row_mut(PAD_ID as usize).fill(0.0);
        let embedding = store.add("embedding", table);
        let bigru = BiGruParams::register(store, "bigru", embed_dim, hidden, rng);
        Self { embedding, bigru }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    batch: TokenBatch,
    gru: BiGruCache,
    pool: PoolCache,
}

impl EncoderCache {
    pub fn retained_floats(&self) -> usize {
        self.gru.retained_floats()
    }
}

/// Block embeddings `U` (`n×h`) for a padded token batch.
pub fn encode(
    store: &ParamStore,
    p: &EncoderParams,
    batch: &TokenBatch,
    pool: PoolMode,
) -> Result<(Tensor, EncoderCache)> {
    let x = embed(&batch.ids, store.get(p.embedding))?;
    let (seq, gru) = bigru_forward(store, &p.bigru, &x, &batch.mask)?;
    let (u, pool) = time_pool(&seq, pool, &batch.mask)?;
    Ok((u, EncoderCache { batch: batch.clone(), gru, pool }))
}

pub fn encode_backward(
    store: &ParamStore,
    p: &EncoderParams,
    cache: &EncoderCache,
    d_u: &Tensor,
    grads: &mut Gradients,
) {
    let d_seq = time_pool_backward(&cache.pool, &cache.batch.mask, d_u);
    let d_x = bigru_backward(store, &p.bigru, &cache.gru, &d_seq, grads);
    embed_backward(&cache.batch.ids, &d_x, grads.get_mut(p.embedding));
}
