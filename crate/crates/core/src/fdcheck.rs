//! Finite-difference oracles for gradient verification. These stay
//! independent of the analytic backward paths they check: they only call
//! scalar objective evaluations on perturbed flat parameter vectors.

/// Central-difference gradient of `f` at `x`.
pub fn central_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Central-difference Jacobian of a vector-valued map; row i holds
/// `d out_i / d x_j`.
pub fn central_diff_jacobian(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    step: f64,
) -> Vec<Vec<f64>> {
    let dim_out = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; dim_out];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + step;
        let fp = f(&xp);
        xp[j] = x[j] - step;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..dim_out {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

/// Norm-relative error between an analytic and a numeric gradient. Pairs
/// whose common magnitude is below 1e-6 are compared absolutely against
/// 1e-10 instead, where finite differences are pure noise.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let na: f64 = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = na.max(nn);
    if scale < 1e-6 {
        if diff <= 1e-10 {
            0.0
        } else {
            diff / 1e-6
        }
    } else {
        diff / scale
    }
}
