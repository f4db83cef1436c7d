//! Small numerical helpers: deterministic reductions, sample statistics,
//! Gauss-Hermite rules, and a doubling composite-Simpson integrator.

use gauss_quad::hermite::GaussHermite;

use crate::error::{CoreError, Result};

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// slice length, so results are identical for any thread count upstream.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error (`sample std / sqrt(n)`), two-pass.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Gauss-Hermite rule rewritten for expectations of standard-normal
/// functionals: `E[g(Z)] ~= sum_j p_j g(sqrt(2) x_j)` with the probability
/// weights `p_j = w_j / sum w_j` (so constants integrate exactly).
#[derive(Debug, Clone)]
pub struct NormalExpectation {
    /// `sqrt(2) x_j`, the standard-normal abscissae.
    pub z_nodes: Vec<f64>,
    /// Probability weights summing to one.
    pub prob_weights: Vec<f64>,
}

impl NormalExpectation {
    pub fn new(order: usize) -> Result<Self> {
        let rule = GaussHermite::new(order)
            .map_err(|e| CoreError::Numerical(format!("Gauss-Hermite order {order}: {e}")))?;
        let nodes: Vec<f64> = rule.nodes().copied().collect();
        let weights: Vec<f64> = rule.weights().copied().collect();
        let total: f64 = weights.iter().sum();
        Ok(Self {
            z_nodes: nodes.iter().map(|&x| std::f64::consts::SQRT_2 * x).collect(),
            prob_weights: weights.iter().map(|&w| w / total).collect(),
        })
    }
}

/// Composite Simpson on `[a, b]` with interval-doubling until the relative
/// change between successive refinements drops below `rel_tol`.
pub fn simpson_doubling(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
    max_doublings: u32,
) -> Result<f64> {
    let simpson_n = |n: usize| -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + k as f64 * h);
        }
        acc * h / 3.0
    };
    let mut n = 64;
    let mut prev = simpson_n(n);
    for _ in 0..max_doublings {
        n *= 2;
        let cur = simpson_n(n);
        if !cur.is_finite() {
            return Err(CoreError::Numerical(format!(
                "Simpson integral not finite on [{a}, {b}]"
            )));
        }
        if (cur - prev).abs() <= rel_tol * cur.abs().max(f64::MIN_POSITIVE) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(CoreError::Numerical(format!(
        "Simpson integral on [{a}, {b}] did not converge to rel tol {rel_tol}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_smooth_data() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn mean_stderr_on_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_stderr(&xs);
        assert_eq!(m, 2.5);
        // sample var = 5/3, se = sqrt(5/12)
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gauss_hermite_moments_are_exact() {
        let rule = NormalExpectation::new(21).unwrap();
        // E[Z^{2k}] = (2k-1)!! for a standard normal
        let moment = |p: u32| -> f64 {
            rule.z_nodes
                .iter()
                .zip(rule.prob_weights.iter())
                .map(|(&z, &w)| w * z.powi(p as i32))
                .sum()
        };
        assert!((moment(0) - 1.0).abs() < 1e-14);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(8) - 105.0).abs() < 1e-8);
        // lognormal mean E[e^{sZ}] = e^{s^2/2}
        let s = 0.3;
        let ln_mean: f64 = rule
            .z_nodes
            .iter()
            .zip(rule.prob_weights.iter())
            .map(|(&z, &w)| w * (s * z).exp())
            .sum();
        assert!((ln_mean - (s * s / 2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn simpson_integrates_exponential() {
        let got = simpson_doubling(|x| (-x).exp(), 0.0, 5.0, 1e-12, 20).unwrap();
        let want = 1.0 - (-5.0f64).exp();
        assert!((got - want).abs() < 1e-11);
    }
}
