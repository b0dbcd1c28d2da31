//! Synthetic path-sensitive CFG datasets.
//!
//! Every graph has a live chain `entry = s0 → … → sL → exit` and a dead
//! chain `d0 → … → dL → exit` whose head has no in-edges. The payload
//! token sits at `sL` (positive) or `dL` (negative), so both classes have
//! the same token multiset and the same shape; only reachability from the
//! entry, which carries a prologue marker, tells them apart. Extra nodes
//! are detours `h → f → next(h)` hung off either chain.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::CfgGraph;
use crate::training::derive_seed;

fn default_vocab_size() -> usize {
    64
}

fn default_prologue() -> u32 {
    4
}

fn default_tokens_per_block() -> [usize; 2] {
    [3, 8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_graphs: usize,
    /// Inclusive node-count bounds.
    pub node_count_range: [usize; 2],
    /// Hops from the entry to the payload block.
    pub chain_length: usize,
    pub vuln_token_id: u32,
    /// Put the payload behind a two-way conditional split.
    pub exclusive_branching: bool,
    pub seed: u64,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Marker token placed in the entry block.
    #[serde(default = "default_prologue")]
    pub prologue_token_id: u32,
    /// Inclusive bounds on body tokens per block (bos/eos excluded).
    #[serde(default = "default_tokens_per_block")]
    pub tokens_per_block: [usize; 2],
}

impl SyntheticSpec {
    pub fn new(n_graphs: usize, chain_length: usize, exclusive_branching: bool, seed: u64) -> Self {
        let base = Self::base_nodes(chain_length, exclusive_branching);
        Self {
            n_graphs,
            node_count_range: [base + 2, base + 8],
            chain_length,
            vuln_token_id: 5,
            exclusive_branching,
            seed,
            vocab_size: default_vocab_size(),
            prologue_token_id: default_prologue(),
            tokens_per_block: default_tokens_per_block(),
        }
    }

    /// Nodes of the two chains, the exit and the branch siblings.
    pub fn base_nodes(chain_length: usize, exclusive: bool) -> usize {
        2 * (chain_length + 1) + 1 + if exclusive { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        let [lo, hi] = self.node_count_range;
        let base = Self::base_nodes(self.chain_length, self.exclusive_branching);
        if lo > hi {
            return bad(format!("node_count_range [{lo}, {hi}] is empty"));
        }
        if self.chain_length >= lo {
            return bad(format!("chain_length {} must be below the minimum node count {lo}", self.chain_length));
        }
        if lo < base {
            return bad(format!("chain_length {} needs at least {base} nodes, range starts at {lo}", self.chain_length));
        }
        if self.exclusive_branching && self.chain_length == 0 {
            return bad("exclusive branching needs chain_length ≥ 1".into());
        }
        let reserved = EOS + 1;
        for (what, id) in [("vuln_token_id", self.vuln_token_id), ("prologue_token_id", self.prologue_token_id)] {
            if id < reserved || id as usize >= self.vocab_size {
                return bad(format!("{what} {id} must lie in [{reserved}, {})", self.vocab_size));
            }
        }
        if self.vuln_token_id == self.prologue_token_id {
            return bad("vuln and prologue tokens coincide".into());
        }
        if self.vocab_size < reserved as usize + 3 {
            return bad(format!("vocab_size {} leaves no filler tokens", self.vocab_size));
        }
        let [tmin, tmax] = self.tokens_per_block;
        if tmin == 0 || tmin > tmax {
            return bad(format!("tokens_per_block [{tmin}, {tmax}] invalid"));
        }
        Ok(())
    }
}

/// Independent reachability: iterative DFS over the raw edge list.
pub fn reachable_payload(g: &CfgGraph, token: u32) -> bool {
    let edges = g.edges();
    let mut seen = vec![false; g.len()];
    let mut stack = vec![g.entry];
    while let Some(v) = stack.pop() {
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        if g.nodes[v].contains(&token) {
            return true;
        }
        stack.extend(edges.iter().filter(|e| e.0 == v).map(|e| e.1));
    }
    false
}

struct Builder<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    fillers: Vec<u32>,
}

impl Builder<'_> {
    fn body(&mut self) -> Vec<u32> {
        let [lo, hi] = self.spec.tokens_per_block;
        let len = self.rng.random_range(lo..=hi);
        (0..len).map(|_| *self.fillers.choose(&mut self.rng).expect("fillers nonempty")).collect()
    }

    fn block(&mut self, marker: Option<u32>) -> Vec<u32> {
        let mut body = self.body();
        if let Some(t) = marker {
            let at = self.rng.random_range(0..=body.len());
            body.insert(at, t);
        }
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend(body);
        ids.push(EOS);
        ids
    }

    fn graph(&mut self, id: String, positive: bool) -> Result<CfgGraph> {
        let spec = self.spec;
        let l = spec.chain_length;
        let n = self.rng.random_range(spec.node_count_range[0]..=spec.node_count_range[1]);

        // Logical layout: live chain 0..=l, dead chain, exit, siblings, detours.
        let live: Vec<usize> = (0..=l).collect();
        let dead: Vec<usize> = (l + 1..=2 * l + 1).collect();
        let exit = 2 * l + 2;
        let mut next = 2 * l + 3;
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for chain in [&live, &dead] {
            for w in chain.windows(2) {
                succ[w[0]].push(w[1]);
            }
            succ[chain[l]].push(exit);
        }
        if spec.exclusive_branching {
            for chain in [&live, &dead] {
                let sib = next;
                next += 1;
                succ[chain[l - 1]].push(sib);
                succ[sib].push(exit);
            }
        }
        let hosts: Vec<usize> = (0..next).filter(|&v| v != exit).collect();
        while next < n {
            let h = *hosts.choose(&mut self.rng).expect("hosts nonempty");
            let after = succ[h][0];
            succ[h].push(next);
            succ[next].push(after);
            next += 1;
        }

        let payload = if positive { live[l] } else { dead[l] };
        // Random node order with the entry kept first.
        let mut perm: Vec<usize> = (1..n).collect();
        perm.shuffle(&mut self.rng);
        perm.insert(0, 0);
        let mut pos = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let mut nodes = vec![Vec::new(); n];
        for old in 0..n {
            let marker = if old == payload && old == 0 {
                // chain_length 0: the entry carries both markers
                let mut b = self.block(Some(spec.prologue_token_id));
                let at = self.rng.random_range(1..b.len());
                b.insert(at, spec.vuln_token_id);
                nodes[pos[old]] = b;
                continue;
            } else if old == payload {
                Some(spec.vuln_token_id)
            } else if old == 0 {
                Some(spec.prologue_token_id)
            } else {
                None
            };
            nodes[pos[old]] = self.block(marker);
        }
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|v| succ[v].iter().map(move |&w| (v, w))).map(|(a, b)| (pos[a], pos[b])).collect();
        Ok(CfgGraph::from_edges(id, nodes, &edges, 0, vec![pos[exit]], Some(u8::from(positive)))?)
    }
}

/// Balanced labelled dataset; every label is checked against
/// [`reachable_payload`].
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<CfgGraph>> {
    spec.validate()?;
    let mut labels: Vec<bool> = (0..spec.n_graphs).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[u64::MAX])));
    let fillers: Vec<u32> = (EOS + 1..spec.vocab_size as u32)
        .filter(|&t| t != spec.vuln_token_id && t != spec.prologue_token_id)
        .collect();
    labels
        .par_iter()
        .enumerate()
        .map(|(k, &positive)| {
            let mut b = Builder {
                spec,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k as u64])),
                fillers: fillers.clone(),
            };
            let g = b.graph(format!("synth-{k}"), positive)?;
            if reachable_payload(&g, spec.vuln_token_id) != positive {
                return Err(Error::OracleMismatch { index: k });
            }
            Ok(g)
        })
        .collect()
}
