//! Problem data: capacity-process coefficients, production functions, and
//! the quadratic-root constants used by the closed forms.
//!
//! Coefficients are deterministic piecewise-constant functions of time,
//! evaluated right-continuously, so that accumulated integrals such as
//! `int_0^t mu(s) ds` are exact (rate times duration, no quadrature error).

use std::fmt;
use std::sync::Arc;

use crate::error::{CoreError, Result};

/// A piecewise-constant function of time, right-continuous, defined on
/// `[breakpoints[0], +inf)` with `breakpoints[0] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    /// A constant function.
    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![0.0],
            values: vec![value],
        }
    }

    /// Builds a piecewise-constant function from breakpoints and segment values.
    ///
    /// `breakpoints[0]` must be `0.0` and the sequence strictly increasing;
    /// `values[j]` applies on `[breakpoints[j], breakpoints[j+1])`.
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(CoreError::validation(
                "piecewise",
                "breakpoints and values must be nonempty and of equal length",
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(CoreError::validation(
                "piecewise.breakpoints",
                "first breakpoint must be 0",
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CoreError::validation(
                "piecewise.breakpoints",
                "breakpoints must be strictly increasing",
            ));
        }
        if breakpoints.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(CoreError::validation(
                "piecewise",
                "breakpoints and values must be finite",
            ));
        }
        Ok(Self {
            breakpoints,
            values,
        })
    }

    /// Right-continuous evaluation: the value of the segment containing `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        // partition_point returns the first index with breakpoint > t.
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        self.values[idx.saturating_sub(1).min(self.values.len() - 1)]
    }

    /// Exact `int_a^b f(s) ds` for `0 <= a <= b`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        debug_assert!(a <= b);
        let mut acc = 0.0;
        for (j, &v) in self.values.iter().enumerate() {
            let seg_lo = self.breakpoints[j].max(a);
            let seg_hi = if j + 1 < self.breakpoints.len() {
                self.breakpoints[j + 1].min(b)
            } else {
                b
            };
            if seg_hi > seg_lo {
                acc += v * (seg_hi - seg_lo);
            }
        }
        acc
    }

    /// Exact `int_a^b exp(-int_a^s f(u) du) ds` for `0 <= a <= b`.
    ///
    /// Each segment with rate `r` over duration `d` contributes
    /// `D * (1 - e^{-r d}) / r` (or `D * d` when `r == 0`), where `D` is the
    /// decay accumulated before the segment.
    pub fn exp_decay_integral(&self, a: f64, b: f64) -> f64 {
        debug_assert!(a <= b);
        let mut acc = 0.0;
        let mut decay = 1.0;
        for (j, &r) in self.values.iter().enumerate() {
            let seg_lo = self.breakpoints[j].max(a);
            let seg_hi = if j + 1 < self.breakpoints.len() {
                self.breakpoints[j + 1].min(b)
            } else {
                b
            };
            if seg_hi > seg_lo {
                let d = seg_hi - seg_lo;
                if r == 0.0 {
                    acc += decay * d;
                } else {
                    acc += decay * (1.0 - (-r * d).exp()) / r;
                    decay *= (-r * d).exp();
                }
            }
        }
        acc
    }

    /// True when the function has a single segment.
    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    /// Smallest segment value active on `[0, t_max]`.
    pub fn min_on(&self, t_max: f64) -> f64 {
        self.active_values(t_max).fold(f64::INFINITY, f64::min)
    }

    /// Largest segment value active on `[0, t_max]`.
    pub fn max_on(&self, t_max: f64) -> f64 {
        self.active_values(t_max).fold(f64::NEG_INFINITY, f64::max)
    }

    fn active_values(&self, t_max: f64) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints
            .iter()
            .zip(self.values.iter())
            .take_while(move |(&b, _)| b <= t_max)
            .map(|(_, &v)| v)
    }

    /// Pointwise combination of several piecewise-constant functions on the
    /// union of their breakpoints.
    pub fn combine(parts: &[&PiecewiseConstant], f: impl Fn(&[f64]) -> f64) -> PiecewiseConstant {
        let mut breaks: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.breakpoints.iter().copied())
            .collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        let mut args = vec![0.0; parts.len()];
        let values = breaks
            .iter()
            .map(|&b| {
                for (slot, p) in args.iter_mut().zip(parts.iter()) {
                    *slot = p.value_at(b);
                }
                f(&args)
            })
            .collect();
        PiecewiseConstant {
            breakpoints: breaks,
            values,
        }
    }
}

/// Coefficient values at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSnapshot {
    pub mu_c: f64,
    pub sigma_c: f64,
    pub f_c: f64,
    pub mu_f: f64,
}

/// Capacity-process parameters: decay rate `mu_c`, volatility `sigma_c`,
/// investment conversion factor `f_c`, discount rate `mu_f`, horizon, and
/// initial capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mu_c: PiecewiseConstant,
    pub sigma_c: PiecewiseConstant,
    pub f_c: PiecewiseConstant,
    pub mu_f: PiecewiseConstant,
    /// Horizon `T > 0`; may be `f64::INFINITY` for the closed-form operations
    /// (grid-based solvers require a finite horizon).
    pub horizon: f64,
    /// Initial capacity `y0 > 0`.
    pub y0: f64,
}

impl ModelParams {
    /// Constant-coefficient parameter set.
    pub fn constant(mu_c: f64, sigma_c: f64, f_c: f64, mu_f: f64, horizon: f64, y0: f64) -> Self {
        Self {
            mu_c: PiecewiseConstant::constant(mu_c),
            sigma_c: PiecewiseConstant::constant(sigma_c),
            f_c: PiecewiseConstant::constant(f_c),
            mu_f: PiecewiseConstant::constant(mu_f),
            horizon,
            y0,
        }
    }

    /// Checks the model invariants: `mu_c >= 0`, `sigma_c >= 0`, `mu_f >= 0`,
    /// `0 < k_f <= f_c`, `y0 > 0`, `horizon > 0`.
    pub fn validate(&self) -> Result<()> {
        let t_max = if self.horizon.is_finite() {
            self.horizon
        } else {
            f64::MAX
        };
        if !(self.horizon > 0.0) {
            return Err(CoreError::validation("horizon", "must be > 0"));
        }
        if !(self.y0 > 0.0) || !self.y0.is_finite() {
            return Err(CoreError::validation("y0", "must be finite and > 0"));
        }
        if self.mu_c.min_on(t_max) < 0.0 {
            return Err(CoreError::validation("mu_c", "must be >= 0"));
        }
        if self.sigma_c.min_on(t_max) < 0.0 {
            return Err(CoreError::validation("sigma_c", "must be >= 0"));
        }
        if self.mu_f.min_on(t_max) < 0.0 {
            return Err(CoreError::validation("mu_f", "must be >= 0"));
        }
        if !(self.f_c.min_on(t_max) > 0.0) {
            return Err(CoreError::validation("f_c", "must be bounded below by k_f > 0"));
        }
        Ok(())
    }

    /// Coefficient values at `t in [0, T]`, right-continuous at breakpoints.
    pub fn eval_coefficients(&self, t: f64) -> Result<CoefficientSnapshot> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(CoreError::domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(CoefficientSnapshot {
            mu_c: self.mu_c.value_at(t),
            sigma_c: self.sigma_c.value_at(t),
            f_c: self.f_c.value_at(t),
            mu_f: self.mu_f.value_at(t),
        })
    }

    /// True when all four coefficient functions are single-segment.
    pub fn is_constant(&self) -> bool {
        self.mu_c.is_constant()
            && self.sigma_c.is_constant()
            && self.f_c.is_constant()
            && self.mu_f.is_constant()
    }

    /// The conversion factor is only guaranteed continuous by the model when
    /// it is constant; piecewise `f_c` is permitted but flagged in reports.
    pub fn f_c_is_piecewise(&self) -> bool {
        !self.f_c.is_constant()
    }

    /// Combined discount rate `mubar = mu_c + mu_f`.
    pub fn mu_bar(&self) -> PiecewiseConstant {
        PiecewiseConstant::combine(&[&self.mu_c, &self.mu_f], |v| v[0] + v[1])
    }

    /// Decay rate of the discounted Cobb-Douglas moment:
    /// `lambda = mu_f + alpha mu_c + alpha (1 - alpha) sigma_c^2 / 2`.
    pub fn lambda_rate(&self, alpha: f64) -> PiecewiseConstant {
        PiecewiseConstant::combine(&[&self.mu_f, &self.mu_c, &self.sigma_c], move |v| {
            v[0] + alpha * v[1] + 0.5 * alpha * (1.0 - alpha) * v[2] * v[2]
        })
    }

    /// `exp(-int_0^t mu_f)`, the discount factor at `t`.
    pub fn discount_to(&self, t: f64) -> f64 {
        (-self.mu_f.integral(0.0, t)).exp()
    }
}

/// Revenue function of installed capacity.
///
/// `CobbDouglas { alpha }` is `R(c) = c^alpha / alpha`; `Custom` carries
/// evaluator handles for `R` and its derivative `R_c`. Custom marginals are
/// probed (not proven) for the Inada conditions at construction:
/// `R_c(1e-8) > R_c(1) > R_c(1e8)` and `R_c(1e8) < 1e-3 R_c(1)`.
#[derive(Clone)]
pub enum ProductionFunction {
    CobbDouglas {
        alpha: f64,
    },
    Custom {
        revenue: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        marginal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for ProductionFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProductionFunction::CobbDouglas { alpha } => {
                write!(f, "CobbDouglas {{ alpha: {alpha} }}")
            }
            ProductionFunction::Custom { .. } => write!(f, "Custom {{ .. }}"),
        }
    }
}

impl ProductionFunction {
    /// Cobb-Douglas production `R(c) = c^alpha / alpha`, `alpha in (0, 1)`.
    pub fn cobb_douglas(alpha: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(CoreError::domain(format!(
                "alpha = {alpha} outside (0, 1)"
            )));
        }
        Ok(ProductionFunction::CobbDouglas { alpha })
    }

    /// Custom production function from evaluator handles for `R` and `R_c`.
    ///
    /// Sublinear growth of `R` at infinity is a documented caller obligation;
    /// the Inada behaviour of `R_c` is probed at extreme points.
    pub fn custom(
        revenue: impl Fn(f64) -> f64 + Send + Sync + 'static,
        marginal: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let lo = marginal(1e-8);
        let mid = marginal(1.0);
        let hi = marginal(1e8);
        if !(lo > mid && mid > hi && hi >= 0.0) {
            return Err(CoreError::validation(
                "production.marginal",
                "marginal must be strictly decreasing (probed at 1e-8, 1, 1e8)",
            ));
        }
        if !(hi < 1e-3 * mid) {
            return Err(CoreError::validation(
                "production.marginal",
                "marginal must vanish at large capacity (probed: R_c(1e8) < 1e-3 R_c(1))",
            ));
        }
        Ok(ProductionFunction::Custom {
            revenue: Arc::new(revenue),
            marginal: Arc::new(marginal),
        })
    }

    /// Validates directly-constructed values (enum fields are public).
    pub fn validate(&self) -> Result<()> {
        match self {
            ProductionFunction::CobbDouglas { alpha } => {
                if !(0.0 < *alpha && *alpha < 1.0) {
                    return Err(CoreError::domain(format!(
                        "alpha = {alpha} outside (0, 1)"
                    )));
                }
                Ok(())
            }
            ProductionFunction::Custom { .. } => Ok(()),
        }
    }

    /// The Cobb-Douglas exponent, when applicable.
    pub fn alpha(&self) -> Option<f64> {
        match self {
            ProductionFunction::CobbDouglas { alpha } => Some(*alpha),
            ProductionFunction::Custom { .. } => None,
        }
    }

    /// Revenue rate `R(c)` for `c > 0`.
    #[inline]
    pub fn revenue(&self, c: f64) -> f64 {
        match self {
            ProductionFunction::CobbDouglas { alpha } => c.powf(*alpha) / alpha,
            ProductionFunction::Custom { revenue, .. } => revenue(c),
        }
    }

    /// Marginal revenue `R_c(c)`; strictly decreasing, `c <= 0` is a domain error.
    pub fn marginal(&self, c: f64) -> Result<f64> {
        if !(c > 0.0) {
            return Err(CoreError::domain(format!("capacity c = {c} must be > 0")));
        }
        Ok(self.marginal_unchecked(c))
    }

    /// Marginal revenue without the domain check, for hot loops.
    #[inline]
    pub fn marginal_unchecked(&self, c: f64) -> f64 {
        match self {
            ProductionFunction::CobbDouglas { alpha } => c.powf(*alpha - 1.0),
            ProductionFunction::Custom { marginal, .. } => marginal(c),
        }
    }
}

/// Roots of `sigma_c^2 x^2 / 2 + mu_tilde x - mu_f = 0` with
/// `mu_tilde = mu_c + sigma_c^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRoots {
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub mu_tilde: f64,
}

/// Computes the beta roots from constant coefficients.
///
/// Uses the numerically stable quadratic form: with
/// `q = -(mu_tilde + sqrt(mu_tilde^2 + 2 mu_f sigma^2)) / 2`,
/// the roots are `beta_minus = 2q / sigma^2` and `beta_plus = -mu_f / q`.
pub fn beta_roots(mu_c: f64, sigma_c: f64, mu_f: f64) -> Result<BetaRoots> {
    if !(sigma_c > 0.0) {
        return Err(CoreError::DegenerateVolatility(format!(
            "sigma_c = {sigma_c}; closed forms require sigma_c > 0"
        )));
    }
    if !(mu_f > 0.0) {
        return Err(CoreError::domain(format!("mu_f = {mu_f} must be > 0")));
    }
    let sigma2 = sigma_c * sigma_c;
    let mu_tilde = mu_c + 0.5 * sigma2;
    let disc = (mu_tilde * mu_tilde + 2.0 * mu_f * sigma2).sqrt();
    let q = -0.5 * (mu_tilde + disc);
    Ok(BetaRoots {
        beta_plus: -mu_f / q,
        beta_minus: 2.0 * q / sigma2,
        mu_tilde,
    })
}
