//! Step sizes: theoretical constants, the parameter-free adaptive schedule,
//! closed-form per-method instances of it, an Adam baseline and the
//! batch/probability presets.

use crate::error::{Error, Result};
use crate::estimators::{constants, HyperParams, Method, VRConstants};

pub const DEFAULT_ALPHA: f64 = 0.33;

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0 / 3.0) {
        return Err(Error::invalid(format!("alpha = {alpha} outside (0, 1/3)")));
    }
    Ok(())
}

/// `ν^{−(1−α)/2} · sum^{−α}`, or 0 when the sum is 0.
pub fn adaptive_gamma(nu: f64, alpha: f64, sum: f64) -> f64 {
    if sum <= 0.0 {
        return 0.0;
    }
    nu.powf(-(1.0 - alpha) / 2.0) * sum.powf(-alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveStep {
    pub gamma: f64,
    /// Every estimate so far was zero.
    pub stationary: bool,
}

/// Running state of the adaptive schedule. The sum includes the current
/// estimate, so `γ_0` is defined.
#[derive(Debug, Clone)]
pub struct AdaptiveAccumulator {
    alpha: f64,
    nu: f64,
    sum: f64,
    t: u64,
}

impl AdaptiveAccumulator {
    pub fn new(alpha: f64, nu: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        if !(nu >= 1.0) || !nu.is_finite() {
            return Err(Error::invalid(format!("nu = {nu} must be a finite value >= 1")));
        }
        Ok(AdaptiveAccumulator {
            alpha,
            nu,
            sum: 0.0,
            t: 0,
        })
    }

    pub fn push(&mut self, g: &[f64]) -> AdaptiveStep {
        self.push_sq_norm(g.iter().map(|v| v * v).sum())
    }

    pub fn push_sq_norm(&mut self, sq_norm: f64) -> AdaptiveStep {
        self.sum += sq_norm;
        self.t += 1;
        AdaptiveStep {
            gamma: adaptive_gamma(self.nu, self.alpha, self.sum),
            stationary: self.sum == 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn calls(&self) -> u64 {
        self.t
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn check_l(l: f64) -> Result<()> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::invalid(format!("smoothness L = {l} must be positive")));
    }
    Ok(())
}

/// `1 / (L (1 + √((Bρ2 + AC)/(ρ1ρ2))))`
pub fn theoretical_gamma_nonconvex(c: &VRConstants, l: f64) -> Result<f64> {
    check_l(l)?;
    c.validate()?;
    Ok(1.0 / (l * (1.0 + c.ratio().sqrt())))
}

/// `min{1 / (L (1 + √((Bρ2 + 4AC)/(ρ1ρ2)))), min(ρ1, ρ2)/(2μ)}`
pub fn theoretical_gamma_pl(c: &VRConstants, l: f64, mu: f64) -> Result<f64> {
    check_l(l)?;
    c.validate()?;
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("PL constant mu = {mu} must be positive")));
    }
    if mu > l {
        return Err(Error::invalid(format!("PL constant mu = {mu} exceeds L = {l}")));
    }
    let ratio = (c.b * c.rho2 + 4.0 * c.a * c.c) / (c.rho1 * c.rho2);
    let first = 1.0 / (l * (1.0 + ratio.sqrt()));
    Ok(first.min(c.rho1.min(c.rho2) / (2.0 * mu)))
}

/// `(Bρ2 + AC)/(ρ1ρ2)` simplified by hand for each method. Used as an
/// independent route to the adaptive step of each method.
pub fn corollary_ratio(method: Method, h: &HyperParams) -> Result<f64> {
    h.validate(method)?;
    let n = h.n as f64;
    let b = h.b as f64;
    let d = h.d as f64;
    let p = h.p;
    let w = h.omega;
    let delta = h.delta;
    Ok(match method {
        Method::LSvrg => (2.0 * p * p + 4.0 * p + 8.0) / (b * p * p),
        Method::Saga => 1.0 / b + 4.0 * n / (b * b) + 4.0 * n * n / (b * b * b),
        Method::Page => (1.0 - p) / (p * b),
        Method::ZeroSarah => 8.0 * n / (b * b),
        Method::Ef21 => delta - 1.0 + 4.0 * delta.powi(3) / (delta + 1.0),
        Method::Diana => 2.0 * w * (w + 1.0) * (2.0 * w + 3.0) / n,
        Method::Dasha => (8.0 * w * w + 2.0 * w) / n,
        Method::Sega => d * d / (b * b) + 6.0 * d.powi(3) / b.powi(3),
        Method::Jaguar => 6.0 * d * d / (b * b),
        Method::Sgd => {
            return Err(Error::Unsupported("minibatch SGD has no adaptive corollary".into()))
        }
    })
}

/// Per-method adaptive step `max{√ratio, 1}^{−(1−α)} · sum^{−α}`.
pub fn corollary_gamma(method: Method, h: &HyperParams, alpha: f64, sum: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    if sum <= 0.0 {
        return Ok(0.0);
    }
    let r = corollary_ratio(method, h)?;
    Ok(r.sqrt().max(1.0).powf(-(1.0 - alpha)) * sum.powf(-alpha))
}

/// Theoretical non-convex step for a method and hyperparameters.
pub fn method_gamma(method: Method, h: &HyperParams, l: f64) -> Result<f64> {
    theoretical_gamma_nonconvex(&constants(method, h)?, l)
}

// ---------------------------------------------------------------------------
// Adam baseline

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(d: usize) -> Self {
        AdamState {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        }
    }

    /// Bias-corrected Adam update to be added to the iterate.
    pub fn step(&mut self, g: &[f64], hp: &AdamParams) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powi(self.t);
        let c2 = 1.0 - hp.beta2.powi(self.t);
        let mut out = vec![0.0; g.len()];
        for j in 0..g.len() {
            self.m[j] = hp.beta1 * self.m[j] + (1.0 - hp.beta1) * g[j];
            self.v[j] = hp.beta2 * self.v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = self.m[j] / c1;
            let vh = self.v[j] / c2;
            out[j] = -hp.lr * mh / (vh.sqrt() + hp.eps);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Presets

/// Smallest `b` with `b³ ≥ n²`, i.e. `⌈n^{2/3}⌉` in exact arithmetic.
pub fn ceil_two_thirds(n: usize) -> usize {
    let target = (n as u128) * (n as u128);
    let mut b = ((n as f64).cbrt().powi(2).ceil() as u128).max(1);
    while b > 1 && (b - 1).pow(3) >= target {
        b -= 1;
    }
    while b.pow(3) < target {
        b += 1;
    }
    b as usize
}

/// Smallest `b` with `b² ≥ n`.
pub fn ceil_sqrt(n: usize) -> usize {
    let mut b = ((n as f64).sqrt().ceil() as u128).max(1);
    while b > 1 && (b - 1).pow(2) >= n as u128 {
        b -= 1;
    }
    while b.pow(2) < n as u128 {
        b += 1;
    }
    b as usize
}

/// Batch size and probability presets: `b = ⌈n^{2/3}⌉` and `p = n^{−1/3}` for
/// L-SVRG, SAGA and PAGE; `b = ⌈n^{1/2}⌉` for ZeroSARAH. `None` leaves the
/// configured value in place.
pub fn presets(method: Method, n: usize) -> (Option<usize>, Option<f64>) {
    let p = 1.0 / (n as f64).cbrt();
    match method {
        Method::LSvrg | Method::Page => (Some(ceil_two_thirds(n)), Some(p)),
        Method::Saga => (Some(ceil_two_thirds(n)), None),
        Method::ZeroSarah => (Some(ceil_sqrt(n)), None),
        _ => (None, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_arithmetic() {
        let mut acc = AdaptiveAccumulator::new(0.25, 1.0).unwrap();
        assert_eq!(acc.push_sq_norm(16.0).gamma, 0.5);
        assert!((adaptive_gamma(64.0, 1.0 / 3.0, 8.0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn adaptive_zero_is_stationary() {
        let mut acc = AdaptiveAccumulator::new(0.33, 2.0).unwrap();
        let s = acc.push(&[0.0, 0.0]);
        assert_eq!(s.gamma, 0.0);
        assert!(s.stationary);
        let s = acc.push(&[1.0, 0.0]);
        assert!(s.gamma > 0.0 && !s.stationary);
    }

    #[test]
    fn alpha_range() {
        assert!(AdaptiveAccumulator::new(0.33, 1.0).is_ok());
        assert!(AdaptiveAccumulator::new(1.0 / 3.0, 1.0).is_err());
        assert!(AdaptiveAccumulator::new(0.0, 1.0).is_err());
        assert!(AdaptiveAccumulator::new(0.2, 0.5).is_err());
    }

    fn page(p: f64, b: usize) -> VRConstants {
        constants(
            Method::Page,
            &HyperParams {
                n: 16,
                b,
                p,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn theoretical_page() {
        assert_eq!(theoretical_gamma_nonconvex(&page(1.0, 8), 1.0).unwrap(), 1.0);
        assert_eq!(theoretical_gamma_nonconvex(&page(0.5, 1), 1.0).unwrap(), 0.5);
        assert_eq!(theoretical_gamma_pl(&page(1.0, 8), 1.0, 1.0).unwrap(), 0.5);
        assert!(theoretical_gamma_nonconvex(&page(1.0, 8), 0.0).is_err());
        assert!(theoretical_gamma_pl(&page(1.0, 8), 1.0, 0.0).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(1);
        let hp = AdamParams {
            lr: 0.1,
            ..Default::default()
        };
        let u = st.step(&[1.0], &hp);
        assert!((u[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        let mut st = AdamState::new(2);
        assert_eq!(st.step(&[0.0, 0.0], &hp), vec![0.0, 0.0]);
    }

    #[test]
    fn preset_values() {
        assert_eq!(ceil_two_thirds(4000), 252);
        assert_eq!(ceil_two_thirds(1000), 100);
        assert_eq!(ceil_two_thirds(8), 4);
        assert_eq!(ceil_two_thirds(1), 1);
        assert_eq!(ceil_sqrt(4000), 64);
        assert_eq!(ceil_sqrt(4096), 64);
        assert_eq!(ceil_sqrt(4097), 65);
        let (b, p) = presets(Method::Page, 4000);
        assert_eq!(b, Some(252));
        assert!((p.unwrap() - 4000f64.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(presets(Method::Ef21, 4000), (None, None));
    }
}
