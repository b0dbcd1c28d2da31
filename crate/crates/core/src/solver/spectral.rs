use crate::nn::Tensor;

pub const PF_MAX_ITER: usize = 20_000;
pub const PF_REL_TOL: f64 = 1e-13;

/// Strongly connected components of the nonzero pattern of `b`
/// (iterative Tarjan).
fn components(b: &Tensor) -> Vec<Vec<usize>> {
    let n = b.rows();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // (node, next column to scan)
        let mut work = vec![(root, 0)];
        while let Some(&mut (v, ref mut j)) = work.last_mut() {
            if *j == 0 && index[v] == usize::MAX {
                index[v] = next;
                low[v] = next;
                next += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            let mut descended = false;
            while *j < n {
                let w = *j;
                *j += 1;
                if b.at(v, w) == 0.0 {
                    continue;
                }
                if index[w] == usize::MAX {
                    work.push((w, 0));
                    descended = true;
                    break;
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            }
            if descended {
                continue;
            }
            work.pop();
            if let Some(&(parent, _)) = work.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                while let Some(w) = stack.pop() {
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Power iteration on `B + I` for an irreducible block, stopped once the
/// Collatz–Wielandt bounds `min/max (Bv)ᵢ/vᵢ` meet. Returns the upper bound.
fn irreducible_radius(b: &Tensor, nodes: &[usize]) -> f64 {
    let k = nodes.len();
    let mut v = vec![1.0; k];
    let mut w = vec![0.0; k];
    let mut upper = f64::INFINITY;
    for _ in 0..PF_MAX_ITER {
        for (r, &i) in nodes.iter().enumerate() {
            w[r] = v[r] + nodes.iter().zip(&v).map(|(&j, x)| b.at(i, j) * x).sum::<f64>();
        }
        let ratios = w.iter().zip(&v).map(|(a, x)| a / x);
        let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q), hi.max(q)));
        upper = upper.min(hi - 1.0);
        let scale = w.iter().fold(0.0f64, |a, &x| a.max(x));
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / scale;
        }
        if hi - lo <= PF_REL_TOL * hi {
            break;
        }
    }
    upper
}

/// Perron–Frobenius eigenvalue (spectral radius) of `|M|`.
///
/// The spectral radius of a nonnegative matrix is the largest over its
/// irreducible diagonal blocks, so each strongly connected component is
/// handled on its own. Within a component power iteration runs on
/// `B + I`, which is primitive, so periodic blocks converge too. The
/// result is a Collatz–Wielandt upper bound: an unconverged estimate errs
/// on the high side.
pub fn pf_eigenvalue(m: &Tensor) -> f64 {
    let b = m.map(f64::abs);
    components(&b)
        .iter()
        .map(|c| if c.len() == 1 { b.at(c[0], c[0]) } else { irreducible_radius(&b, c) })
        .fold(0.0, f64::max)
        .max(0.0)
}
