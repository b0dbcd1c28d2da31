use crate::nn::Tensor;

/// Euclidean projection of `v` onto `{x : ‖x‖₁ ≤ radius}` by the
/// sort-and-threshold method. Points already inside are returned as is.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - radius) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// Frobenius-nearest `W'` with `‖W'‖∞ ≤ κ/λ_pf`. The infinity norm is the
/// maximum absolute row sum, so the problem separates into one L1-ball
/// projection per row. `λ_pf = 0` imposes no constraint.
pub fn project_wellposed(w: &Tensor, lambda_pf: f64, kappa: f64) -> Tensor {
    if lambda_pf <= 0.0 {
        return w.clone();
    }
    let radius = kappa / lambda_pf;
    let mut out = w.clone();
    for i in 0..w.rows() {
        let row = project_l1_ball(w.row(i), radius);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}
