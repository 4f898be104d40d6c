//! Shared helpers for the integration suites: a central finite-difference
//! oracle, independent of every backward path it checks, plus small utilities.

use hypercd_core::cdnet::CdcnnParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite differences with step `h`: (f(x+h) - f(x-h)) / 2h per slot.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Max relative error between analytic and numeric gradients; the
/// denominator is floored so slots whose true gradient is zero compare
/// against finite-difference noise on an absolute scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Replace every parameter value with a uniform draw at a healthy magnitude
/// so full-network gradients are far from the noise floor.
pub fn randomize_params(params: &mut CdcnnParams<f64>, rng: &mut ChaCha8Rng) {
    for pt in params.params_mut() {
        let fan_in = (pt.numel() / pt.shape[0].max(1)).max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        for v in &mut pt.value {
            *v = rng.random_range(-bound..bound);
        }
    }
}
