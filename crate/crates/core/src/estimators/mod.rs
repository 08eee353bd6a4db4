//! Stateful gradient estimators sharing one interface, plus the registered
//! constants `(ρ1, ρ2, A, B, C)` of the recursive error bounds
//!
//! ```text
//! E‖g^t − ∇f(x^t)‖² ≤ (1−ρ1)‖g^{t−1} − ∇f(x^{t−1})‖² + A σ²_{t−1} + B L² ‖x^t − x^{t−1}‖²
//! E σ²_t            ≤ (1−ρ2) σ²_{t−1}                          + C L² ‖x^t − x^{t−1}‖²
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::compress::{BiasedCompressor, Identity, RandK, TopK, UnbiasedCompressor};
use crate::error::{Error, Result};
use crate::problem::ProblemRef;
use crate::rng::SimRng;

mod coordinate;
mod distributed;
mod finite_sum;

pub use coordinate::{Jaguar, Sega};
pub use distributed::{Dasha, Diana, Ef21};
pub use finite_sum::{LSvrg, Page, Saga, Sgd, ZeroSarah};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    LSvrg,
    Saga,
    Page,
    ZeroSarah,
    Ef21,
    Diana,
    Dasha,
    Sega,
    Jaguar,
    /// Plain minibatch SGD, the gradient source of the Adam baseline. It has
    /// no registered constants.
    Sgd,
}

impl Method {
    /// The nine variance-reduced methods, in registry order.
    pub const ALL: [Method; 9] = [
        Method::LSvrg,
        Method::Saga,
        Method::Page,
        Method::ZeroSarah,
        Method::Ef21,
        Method::Diana,
        Method::Dasha,
        Method::Sega,
        Method::Jaguar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LSvrg => "lsvrg",
            Method::Saga => "saga",
            Method::Page => "page",
            Method::ZeroSarah => "zerosarah",
            Method::Ef21 => "ef21",
            Method::Diana => "diana",
            Method::Dasha => "dasha",
            Method::Sega => "sega",
            Method::Jaguar => "jaguar",
            Method::Sgd => "sgd",
        }
    }

    pub fn is_distributed(self) -> bool {
        matches!(self, Method::Ef21 | Method::Diana | Method::Dasha)
    }

    pub fn is_coordinate(self) -> bool {
        matches!(self, Method::Sega | Method::Jaguar)
    }

    pub fn uses_batch(self) -> bool {
        !self.is_distributed()
    }

    pub fn uses_probability(self) -> bool {
        matches!(self, Method::LSvrg | Method::Page)
    }

    /// Whether the second inequality is informative (σ² is not identically 0).
    pub fn has_sigma(self) -> bool {
        !matches!(self, Method::Page | Method::Jaguar | Method::Sgd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_'))
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "lsvrg" => Method::LSvrg,
            "saga" => Method::Saga,
            "page" => Method::Page,
            "zerosarah" => Method::ZeroSarah,
            "ef21" => Method::Ef21,
            "diana" => Method::Diana,
            "dasha" => Method::Dasha,
            "sega" => Method::Sega,
            "jaguar" => Method::Jaguar,
            "sgd" => Method::Sgd,
            _ => return Err(Error::invalid(format!("unknown method `{s}`"))),
        })
    }
}

/// Estimator hyperparameters that the constants may depend on. For the
/// distributed methods `n` counts clients; for the coordinate methods `b`
/// counts coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub n: usize,
    pub b: usize,
    pub p: f64,
    pub d: usize,
    pub delta: f64,
    pub omega: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            n: 1,
            b: 1,
            p: 1.0,
            d: 1,
            delta: 1.0,
            omega: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, method: Method) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{method}: {m}")));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if method.uses_probability() && !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p = {} outside (0, 1]", self.p));
        }
        match method {
            Method::LSvrg | Method::Saga | Method::Page | Method::ZeroSarah | Method::Sgd => {
                if self.b == 0 || self.b > self.n {
                    return bad(format!("b = {} outside [1, n = {}]", self.b, self.n));
                }
            }
            Method::Sega | Method::Jaguar => {
                if self.b == 0 || self.b > self.d {
                    return bad(format!("b = {} outside [1, d = {}]", self.b, self.d));
                }
            }
            Method::Ef21 => {
                if !(self.delta >= 1.0) || !self.delta.is_finite() {
                    return bad(format!("delta = {} must be at least 1", self.delta));
                }
            }
            Method::Diana | Method::Dasha => {
                if !(self.omega >= 1.0) || !self.omega.is_finite() {
                    return bad(format!("omega = {} must be at least 1", self.omega));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VRConstants {
    pub rho1: f64,
    pub rho2: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantField {
    Rho1,
    Rho2,
    A,
    B,
    C,
}

impl FromStr for ConstantField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "rho1" => ConstantField::Rho1,
            "rho2" => ConstantField::Rho2,
            "a" => ConstantField::A,
            "b" => ConstantField::B,
            "c" => ConstantField::C,
            _ => return Err(Error::invalid(format!("unknown constant `{s}`"))),
        })
    }
}

impl VRConstants {
    /// `(Bρ2 + AC) / (ρ1ρ2)`
    pub fn ratio(&self) -> f64 {
        (self.b * self.rho2 + self.a * self.c) / (self.rho1 * self.rho2)
    }

    pub fn nu(&self) -> f64 {
        nu_of(self)
    }

    pub fn get(&self, field: ConstantField) -> f64 {
        match field {
            ConstantField::Rho1 => self.rho1,
            ConstantField::Rho2 => self.rho2,
            ConstantField::A => self.a,
            ConstantField::B => self.b,
            ConstantField::C => self.c,
        }
    }

    /// Copy with one constant multiplied by `factor` (mutation testing).
    pub fn scaled(mut self, field: ConstantField, factor: f64) -> Self {
        let slot = match field {
            ConstantField::Rho1 => &mut self.rho1,
            ConstantField::Rho2 => &mut self.rho2,
            ConstantField::A => &mut self.a,
            ConstantField::B => &mut self.b,
            ConstantField::C => &mut self.c,
        };
        *slot *= factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |r: f64| r > 0.0 && r <= 1.0;
        if !in_unit(self.rho1) || !in_unit(self.rho2) {
            return Err(Error::invalid("rho1 and rho2 must lie in (0, 1]"));
        }
        if !(self.a >= 0.0 && self.b >= 0.0 && self.c >= 0.0) {
            return Err(Error::invalid("A, B, C must be nonnegative"));
        }
        Ok(())
    }
}

pub fn nu_of(c: &VRConstants) -> f64 {
    c.ratio().max(1.0)
}

/// Registered constants. They depend on hyperparameters only, never on the
/// data, `L` or `μ`.
pub fn constants(method: Method, h: &HyperParams) -> Result<VRConstants> {
    h.validate(method)?;
    let n = h.n as f64;
    let b = h.b as f64;
    let d = h.d as f64;
    let p = h.p;
    let c = match method {
        Method::LSvrg => VRConstants {
            rho1: 1.0,
            a: 2.0 / b,
            b: 2.0 / b,
            rho2: p / 2.0,
            c: 1.0 + 2.0 / p,
        },
        Method::Saga => VRConstants {
            rho1: 1.0,
            a: (1.0 / b) * (1.0 + b / (2.0 * n)),
            b: (1.0 / b) * (1.0 + 2.0 * n / b),
            rho2: b / (2.0 * n),
            c: 2.0 * n / b,
        },
        Method::Page => VRConstants {
            rho1: p,
            a: 0.0,
            b: (1.0 - p) / b,
            rho2: 1.0,
            c: 0.0,
        },
        Method::ZeroSarah => VRConstants {
            rho1: b / (2.0 * n),
            a: b / (2.0 * n * n),
            b: 2.0 / b,
            rho2: b / (2.0 * n),
            c: 2.0 * n / b,
        },
        Method::Ef21 => {
            let delta = h.delta;
            VRConstants {
                rho1: 1.0,
                a: 1.0,
                b: delta - 1.0,
                rho2: (delta + 1.0) / (2.0 * delta * delta),
                c: 2.0 * delta,
            }
        }
        Method::Diana => {
            let w = h.omega;
            VRConstants {
                rho1: 1.0,
                a: w / n,
                b: 2.0 * w * (w + 1.0) / n,
                rho2: 1.0 / (2.0 * (1.0 + w)),
                c: 2.0 * (w + 1.0),
            }
        }
        Method::Dasha => {
            let w = h.omega;
            let s = 2.0 * w + 1.0;
            VRConstants {
                rho1: 1.0 / s,
                a: 2.0 * w / (s * s * n),
                b: 2.0 * w / n,
                rho2: 1.0 / s,
                c: 2.0 * w,
            }
        }
        Method::Sega => VRConstants {
            rho1: 1.0,
            a: d / b,
            b: d * d / (b * b),
            rho2: b / (2.0 * d),
            c: 3.0 * d / b,
        },
        Method::Jaguar => VRConstants {
            rho1: b / (2.0 * d),
            a: 0.0,
            b: 3.0 * d / b,
            rho2: 1.0,
            c: 0.0,
        },
        Method::Sgd => {
            return Err(Error::Unsupported(
                "minibatch SGD has no variance-reduction constants".into(),
            ))
        }
    };
    Ok(c)
}

/// Hyperparameter string used in tables and reports.
pub fn describe_hyper(method: Method, h: &HyperParams) -> String {
    match method {
        Method::LSvrg | Method::Page => format!("n={};b={};p={}", h.n, h.b, h.p),
        Method::Saga | Method::ZeroSarah | Method::Sgd => format!("n={};b={}", h.n, h.b),
        Method::Ef21 => format!("n={};delta={}", h.n, h.delta),
        Method::Diana | Method::Dasha => format!("n={};omega={}", h.n, h.omega),
        Method::Sega | Method::Jaguar => format!("d={};b={}", h.d, h.b),
    }
}

// ---------------------------------------------------------------------------
// Runtime interface

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Component-gradient oracle calls `∇f_i`.
    pub grad_calls: u64,
    /// Single-coordinate oracle calls `∂_j f`.
    pub partial_calls: u64,
    /// Uplink bits (client to server).
    pub bits: u64,
    pub dense_messages: u64,
    pub sparse_messages: u64,
}

pub trait Estimator: Send {
    fn method(&self) -> Method;

    /// One full pass at `x0`: `g⁰ = ∇f(x⁰)` and all memory consistent with `x⁰`.
    fn init(&mut self, x0: &[f64]) -> Result<()>;

    /// Produces `g^t` at `x^t` with fresh randomness and advances the state.
    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]>;

    /// The latest estimate `g^t`.
    fn estimate(&self) -> &[f64];

    /// The point at which the latest estimate was produced.
    fn prev_point(&self) -> &[f64];

    /// Overrides the previous point and estimate. Memory that must track the
    /// previous point exactly (stored client gradients) is recomputed.
    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()>;

    /// `σ²_t` of the current state. An O(n) diagnostic.
    fn sigma_sq(&self) -> Result<f64>;

    fn counters(&self) -> Counters;

    /// Moves the memory to an adversarial configuration around the upcoming
    /// point `x_next`: each stored gradient `m` that tracks `G(x_prev)` becomes
    /// `G(x_next) + c·sign(G(x_prev) − G(x_next))` with
    /// `c = level · mean|G(x_prev) − G(x_next)|`. Used by the verifier to
    /// probe states far from a trajectory.
    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()>;

    fn box_clone(&self) -> Box<dyn Estimator>;
}

impl Clone for Box<dyn Estimator> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorSpec {
    Identity,
    TopK(usize),
    RandK(usize),
}

impl CompressorSpec {
    pub fn biased(self, d: usize) -> Result<Arc<dyn BiasedCompressor>> {
        Ok(match self {
            CompressorSpec::Identity => Arc::new(Identity),
            CompressorSpec::TopK(k) => Arc::new(TopK::new(d, k)?),
            CompressorSpec::RandK(_) => {
                return Err(Error::invalid("RandK is unbiased; EF21 needs a contractive compressor"))
            }
        })
    }

    pub fn unbiased(self, d: usize) -> Result<Arc<dyn UnbiasedCompressor>> {
        Ok(match self {
            CompressorSpec::Identity => Arc::new(Identity),
            CompressorSpec::RandK(k) => Arc::new(RandK::new(d, k)?),
            CompressorSpec::TopK(_) => {
                return Err(Error::invalid("TopK is biased; DIANA and DASHA need an unbiased compressor"))
            }
        })
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorSpec::Identity => f.write_str("identity"),
            CompressorSpec::TopK(k) => write!(f, "topk:{k}"),
            CompressorSpec::RandK(k) => write!(f, "randk:{k}"),
        }
    }
}

impl FromStr for CompressorSpec {
    type Err = Error;

    /// `identity`, `topk:K` or `randk:K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "identity" || s == "none" {
            return Ok(CompressorSpec::Identity);
        }
        let (kind, k) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("compressor `{s}`: expected identity, topk:K or randk:K")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::invalid(format!("compressor `{s}`: bad k")))?;
        match kind {
            "topk" => Ok(CompressorSpec::TopK(k)),
            "randk" => Ok(CompressorSpec::RandK(k)),
            _ => Err(Error::invalid(format!("unknown compressor `{kind}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSpec {
    pub method: Method,
    pub b: usize,
    pub p: f64,
    /// Minibatch sampling with replacement for L-SVRG, PAGE and SGD. Table
    /// and coordinate methods always sample without replacement.
    pub replacement: bool,
    pub compressor: CompressorSpec,
    pub value_bits: u64,
    pub index_bits: u64,
}

impl EstimatorSpec {
    pub fn new(method: Method) -> Self {
        EstimatorSpec {
            method,
            b: 1,
            p: 1.0,
            replacement: false,
            compressor: CompressorSpec::Identity,
            value_bits: 32,
            index_bits: 32,
        }
    }

    pub fn with_b(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn with_compressor(mut self, c: CompressorSpec) -> Self {
        self.compressor = c;
        self
    }

    /// Hyperparameters seen by [`constants`] for this spec on a problem with
    /// `n` components, dimension `d` and `clients` clients.
    pub fn hyperparams(&self, n: usize, d: usize, clients: usize) -> Result<HyperParams> {
        let mut h = HyperParams {
            n,
            b: self.b,
            p: self.p,
            d,
            delta: 1.0,
            omega: 1.0,
        };
        match self.method {
            Method::Ef21 => {
                h.n = clients;
                h.delta = self.compressor.biased(d)?.delta();
            }
            Method::Diana | Method::Dasha => {
                h.n = clients;
                h.omega = self.compressor.unbiased(d)?.omega();
            }
            _ => {}
        }
        Ok(h)
    }
}

/// Builds an uninitialized estimator. Distributed methods need `clients`.
pub fn build_estimator(spec: &EstimatorSpec, problem: ProblemRef, clients: Option<&[ProblemRef]>) -> Result<Box<dyn Estimator>> {
    let n = problem.n_components();
    let d = problem.dim();
    let n_clients = clients.map_or(0, |c| c.len());
    let hyper = spec.hyperparams(n, d, n_clients.max(1))?;
    hyper.validate(spec.method)?;
    let need_clients = || -> Result<Vec<ProblemRef>> {
        match clients {
            Some(c) if !c.is_empty() => {
                if c.iter().any(|p| p.dim() != d) {
                    return Err(Error::invalid("client dimension differs from the problem"));
                }
                Ok(c.to_vec())
            }
            _ => Err(Error::invalid(format!("{} needs at least one client", spec.method))),
        }
    };
    let est: Box<dyn Estimator> = match spec.method {
        Method::LSvrg => Box::new(LSvrg::new(problem, spec.b, spec.p, spec.replacement)),
        Method::Saga => Box::new(Saga::new(problem, spec.b)),
        Method::Page => Box::new(Page::new(problem, spec.b, spec.p, spec.replacement)),
        Method::ZeroSarah => Box::new(ZeroSarah::new(problem, spec.b)),
        Method::Sgd => Box::new(Sgd::new(problem, spec.b, spec.replacement)),
        Method::Ef21 => Box::new(Ef21::new(
            need_clients()?,
            spec.compressor.biased(d)?,
            spec.value_bits,
            spec.index_bits,
        )),
        Method::Diana => Box::new(Diana::new(
            need_clients()?,
            spec.compressor.unbiased(d)?,
            spec.value_bits,
            spec.index_bits,
        )),
        Method::Dasha => Box::new(Dasha::new(
            need_clients()?,
            spec.compressor.unbiased(d)?,
            spec.value_bits,
            spec.index_bits,
        )),
        Method::Sega => Box::new(Sega::new(problem, spec.b)),
        Method::Jaguar => Box::new(Jaguar::new(problem, spec.b)),
    };
    Ok(est)
}

// ---------------------------------------------------------------------------
// Shared helpers

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_len(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x.len(),
        });
    }
    Ok(())
}

/// `at_next + c·sign(at_prev − at_next)` with `c = level · mean|at_prev − at_next|`.
pub(crate) fn skewed(at_prev: &[f64], at_next: &[f64], level: f64) -> Vec<f64> {
    let d = at_prev.len() as f64;
    let c = level * at_prev.iter().zip(at_next).map(|(a, b)| (a - b).abs()).sum::<f64>() / d;
    at_prev
        .iter()
        .zip(at_next)
        .map(|(&a, &b)| {
            let s = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            b + c * s
        })
        .collect()
}
