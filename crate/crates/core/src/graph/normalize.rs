use crate::nn::Tensor;
use crate::solver::pf_eigenvalue;

/// `Â = D̃^{-1/2}(A + I)D̃^{-1/2}` with its cached Perron–Frobenius eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
    pub pf_eigenvalue: f64,
}

impl NormalizedAdjacency {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

/// Two-sided degree scaling with `D̃` taken from the row sums of `A + I`.
/// Edge direction is preserved: a symmetric input gives a symmetric
/// output, an asymmetric one stays asymmetric.
pub fn renormalize(a: &Tensor) -> NormalizedAdjacency {
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        m.set(i, i, m.at(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / m.row(i).iter().sum::<f64>().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = m.at(i, j);
            if v != 0.0 {
                m.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    let pf_eigenvalue = pf_eigenvalue(&m);
    NormalizedAdjacency { matrix: m, pf_eigenvalue }
}
