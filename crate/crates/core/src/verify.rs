//! Numerical checks of the estimator contracts and convergence claims:
//! Monte-Carlo margins of the two recursive error inequalities at frozen
//! states, rate-slope fits and PL decay fits on engine traces.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::engine::Trace;
use crate::error::{Error, Result};
use crate::estimators::{
    build_estimator, constants, CompressorSpec, ConstantField, Estimator, EstimatorSpec, Method, VRConstants,
};
use crate::problem::{grad_vec, partition_problem, PartitionScheme, ProblemRef, QuadraticProblem};
use crate::rng::{derive_seed, normal_vec, seeded, SimRng};

pub const MIN_SAMPLES: usize = 1000;

/// Relative slack for float rounding in the pass rule.
const FLOAT_SLACK: f64 = 1e-10;

/// Absolute rounding floor, relative to the squared gradient scale.
const ROUNDING_FLOOR: f64 = 1e-20;

/// Memory skew levels cycled through by the stress state points.
const STRESS_LEVELS: [f64; 6] = [8.0, 11.0, 3.0, 20.0, 1.0, 40.0];

/// Size of the random `±ε` move used at stress points.
const STRESS_STEP: f64 = 0.1;

pub const SIGMA_ALIGNMENT: &str =
    "sigma_t is evaluated on the state after step t; the right-hand side uses sigma of the frozen state";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    PostInit,
    Trajectory,
    Stress,
}

impl PointKind {
    pub fn name(self) -> &'static str {
        match self {
            PointKind::PostInit => "post-init",
            PointKind::Trajectory => "trajectory",
            PointKind::Stress => "stress",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginRow {
    pub method: Method,
    /// 1 for the estimator-error inequality, 2 for the σ² inequality.
    pub inequality: u8,
    pub state_point: usize,
    pub kind: PointKind,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct MarginReport {
    pub method: Method,
    pub constants: VRConstants,
    pub rows: Vec<MarginRow>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct MarginOptions {
    pub state_points: usize,
    pub samples: usize,
    pub seed: u64,
    /// Multiply one registered constant before checking (mutation testing).
    pub perturb: Option<(ConstantField, f64)>,
}

impl Default for MarginOptions {
    fn default() -> Self {
        MarginOptions {
            state_points: 10,
            samples: 20000,
            seed: 0,
            perturb: None,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A frozen state: the estimator after `t−1` steps and the candidate `x^t`.
struct Frozen {
    est: Box<dyn Estimator>,
    x_next: Vec<f64>,
    kind: PointKind,
}

fn freeze(
    spec: &EstimatorSpec,
    problem: &ProblemRef,
    clients: Option<&[ProblemRef]>,
    k: usize,
    rng: &mut SimRng,
) -> Result<Frozen> {
    let l = problem.smoothness();
    let d = problem.dim();
    let mut est = build_estimator(spec, problem.clone(), clients)?;
    let x0 = normal_vec(rng, d);
    est.init(&x0)?;
    if k == 0 {
        return Ok(Frozen {
            est,
            x_next: x0,
            kind: PointKind::PostInit,
        });
    }
    let (steps, kind) = if k % 2 == 1 {
        (k, PointKind::Trajectory)
    } else {
        (k / 2, PointKind::Stress)
    };
    let gamma = 0.5 / l;
    let mut x = x0;
    for _ in 0..steps {
        let g = est.estimate().to_vec();
        x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= gamma * gi);
        est.step(&x, rng)?;
    }
    let x_prev = est.prev_point().to_vec();
    let x_next: Vec<f64> = match kind {
        PointKind::Trajectory => {
            let g = est.estimate();
            x_prev.iter().zip(g).map(|(a, b)| a - b / l).collect()
        }
        _ => {
            let x_next: Vec<f64> = x_prev
                .iter()
                .map(|a| a + if rng.random_bool(0.5) { STRESS_STEP } else { -STRESS_STEP })
                .collect();
            let level = STRESS_LEVELS[(k / 2 - 1) % STRESS_LEVELS.len()];
            est.skew_memory(&x_next, level)?;
            x_next
        }
    };
    Ok(Frozen { est, x_next, kind })
}

/// Checks both inequalities at `state_points` frozen states with
/// `samples` fresh draws each. Margins are `LHS − RHS`; a margin passes when
/// it is at most three standard errors (plus float slack).
pub fn assumption_margin(
    spec: &EstimatorSpec,
    problem: ProblemRef,
    clients: Option<&[ProblemRef]>,
    opts: &MarginOptions,
) -> Result<MarginReport> {
    if opts.samples < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "need at least {MIN_SAMPLES} samples per state point, got {}",
            opts.samples
        )));
    }
    let method = spec.method;
    let m = clients.map_or(1, |c| c.len());
    let hyper = spec.hyperparams(problem.n_components(), problem.dim(), m)?;
    let mut consts = constants(method, &hyper)?;
    if let Some((field, factor)) = opts.perturb {
        consts = consts.scaled(field, factor);
    }
    let l = problem.smoothness();
    let l2 = l * l;

    let per_point: Vec<Result<Vec<MarginRow>>> = (0..opts.state_points)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeded(derive_seed(opts.seed, k as u64));
            let frozen = freeze(spec, &problem, clients, k, &mut rng)?;
            let est = frozen.est;
            let x_prev = est.prev_point().to_vec();
            let g_prev = est.estimate().to_vec();
            let grad_prev = grad_vec(problem.as_ref(), &x_prev)?;
            let grad_next = grad_vec(problem.as_ref(), &frozen.x_next)?;
            let err_prev = sq_diff(&g_prev, &grad_prev);
            let sigma_prev = est.sigma_sq()?;
            let step_sq = sq_diff(&frozen.x_next, &x_prev);

            let mut w1 = Welford::default();
            let mut w2 = Welford::default();
            for _ in 0..opts.samples {
                let mut trial = est.box_clone();
                let g = trial.step(&frozen.x_next, &mut rng)?;
                w1.push(sq_diff(g, &grad_next));
                if method.has_sigma() {
                    w2.push(trial.sigma_sq()?);
                }
            }

            let floor = ROUNDING_FLOOR * (1.0 + sq(&grad_next) + sq(&g_prev));
            let rhs1 = (1.0 - consts.rho1) * err_prev + consts.a * sigma_prev + consts.b * l2 * step_sq;
            let mut rows = vec![row(method, 1, k, frozen.kind, w1, rhs1, floor)];
            if method.has_sigma() {
                let rhs2 = (1.0 - consts.rho2) * sigma_prev + consts.c * l2 * step_sq;
                rows.push(row(method, 2, k, frozen.kind, w2, rhs2, floor));
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    let passed = rows.iter().all(|r| r.pass);
    Ok(MarginReport {
        method,
        constants: consts,
        rows,
        passed,
    })
}

fn row(method: Method, inequality: u8, k: usize, kind: PointKind, w: Welford, rhs: f64, floor: f64) -> MarginRow {
    let lhs = w.mean;
    let margin = lhs - rhs;
    let stderr = w.stderr();
    let slack = FLOAT_SLACK * lhs.abs().max(rhs.abs()) + floor;
    MarginRow {
        method,
        inequality,
        state_point: k,
        kind,
        lhs,
        rhs,
        margin,
        stderr,
        pass: margin <= 3.0 * stderr + slack,
    }
}

pub const MARGIN_CSV_HEADER: &str = "method,inequality,state_point,lhs,rhs,margin,stderr,pass";

pub fn margin_rows_to_csv<W: Write>(rows: &[MarginRow], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{MARGIN_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.method,
            r.inequality,
            r.state_point,
            r.lhs,
            r.rhs,
            r.margin,
            r.stderr,
            if r.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(())
}

/// Mean and per-coordinate standard error of `g^t` over `samples` steps
/// from clones of a frozen estimator.
pub fn sample_mean_estimate(est: &dyn Estimator, x: &[f64], samples: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.len();
    let mut ws = vec![Welford::default(); d];
    let mut rng = seeded(seed);
    for _ in 0..samples {
        let mut trial = est.box_clone();
        let g = trial.step(x, &mut rng)?;
        for (w, v) in ws.iter_mut().zip(g) {
            w.push(*v);
        }
    }
    Ok((ws.iter().map(|w| w.mean).collect(), ws.iter().map(|w| w.stderr()).collect()))
}

/// The small quadratic used for margin checks: 20 components in 10
/// dimensions, curvatures uniform in `[3, 4]`.
pub struct Fixture {
    pub spec: EstimatorSpec,
    pub problem: ProblemRef,
    pub clients: Option<Vec<ProblemRef>>,
}

pub const FIXTURE_N: usize = 20;
pub const FIXTURE_D: usize = 10;

pub fn standard_fixture(method: Method, seed: u64) -> Result<Fixture> {
    let problem: ProblemRef = Arc::new(QuadraticProblem::random(FIXTURE_N, FIXTURE_D, 3.0, 4.0, 1.0, seed)?);
    let spec = match method {
        Method::LSvrg | Method::Page => EstimatorSpec::new(method).with_b(4).with_p(0.3),
        Method::Saga | Method::ZeroSarah | Method::Sgd => EstimatorSpec::new(method).with_b(4),
        Method::Ef21 => EstimatorSpec::new(method).with_compressor(CompressorSpec::TopK(2)),
        Method::Diana | Method::Dasha => EstimatorSpec::new(method).with_compressor(CompressorSpec::RandK(3)),
        Method::Sega | Method::Jaguar => EstimatorSpec::new(method).with_b(3),
    };
    let clients = if method.is_distributed() {
        Some(partition_problem(problem.clone(), FIXTURE_N, PartitionScheme::Contiguous)?)
    } else {
        None
    };
    Ok(Fixture { spec, problem, clients })
}

// ---------------------------------------------------------------------------
// Rates

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub const MIN_RATE_POINTS: usize = 50;

/// Slope of `log(running-min ‖∇f‖)` against `log t` over the recorded rows
/// past the burn-in fraction (rows with `t = 0` are skipped).
pub fn rate_slope(trace: &Trace, burn_in_fraction: f64) -> Result<f64> {
    if trace.len() < MIN_RATE_POINTS {
        return Err(Error::invalid(format!(
            "rate fit needs at least {MIN_RATE_POINTS} recorded points, got {}",
            trace.len()
        )));
    }
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
    }
    let start = (burn_in_fraction * trace.len() as f64).floor() as usize;
    let mut run_min = f64::INFINITY;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, r) in trace.rows.iter().enumerate() {
        run_min = run_min.min(r.grad_norm.max(1e-300));
        if i >= start && r.t > 0 {
            xs.push((r.t as f64).ln());
            ys.push(run_min.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::invalid("too few points after burn-in"));
    }
    Ok(ls_slope(&xs, &ys))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlReport {
    /// `exp` of the fitted slope of `log(mean gap)` per iteration.
    pub factor: f64,
    /// `1 − γμ + 0.05`
    pub bound: f64,
    pub passed: bool,
    pub points_used: usize,
    pub seeds: usize,
}

pub const PL_SLACK: f64 = 0.05;

/// Fits the geometric decay of `f(x^t) − f*` averaged over `traces` (one per
/// seed, recorded at the same iterations). The fit stops before the gap
/// reaches float resolution of `f*`.
pub fn pl_decay_check(traces: &[Trace], gamma: f64, mu: f64, f_star: Option<f64>) -> Result<PlReport> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu = {mu} must be positive")));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma = {gamma} must be positive")));
    }
    let f_star = f_star.ok_or_else(|| Error::invalid("decay check needs a known optimal value"))?;
    if traces.is_empty() {
        return Err(Error::invalid("no traces"));
    }
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    let floor = 1e-9 * f_star.abs().max(1.0);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..len {
        let t = traces[0].rows[i].t;
        if traces.iter().any(|tr| tr.rows[i].t != t) {
            return Err(Error::invalid("traces are recorded at different iterations"));
        }
        let gap = traces.iter().map(|tr| tr.rows[i].loss - f_star).sum::<f64>() / traces.len() as f64;
        if gap <= floor {
            break;
        }
        xs.push(t as f64);
        ys.push(gap.ln());
    }
    if xs.len() < 2 {
        return Err(Error::invalid("gap reaches float resolution before two points"));
    }
    let factor = ls_slope(&xs, &ys).exp();
    let bound = 1.0 - gamma * mu + PL_SLACK;
    Ok(PlReport {
        factor,
        bound,
        passed: factor <= bound,
        points_used: xs.len(),
        seeds: traces.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TraceRow;

    fn trace_of(f: impl Fn(u64) -> f64, n: u64) -> Trace {
        Trace {
            rows: (0..n)
                .map(|t| TraceRow {
                    t,
                    loss: f(t),
                    grad_norm: f(t),
                    est_norm: 0.0,
                    gamma: 0.0,
                    grad_calls: 0,
                    partial_calls: 0,
                    bits: 0,
                    wall_ms: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn slope_of_inverse_sqrt() {
        let tr = trace_of(|t| if t == 0 { 10.0 } else { (t as f64).powf(-0.5) }, 200);
        assert!((rate_slope(&tr, 0.0).unwrap() + 0.5).abs() < 1e-6);
        assert!((rate_slope(&tr, 0.5).unwrap() + 0.5).abs() < 1e-6);
    }

    #[test]
    fn slope_of_constant() {
        let tr = trace_of(|_| 3.0, 100);
        assert!(rate_slope(&tr, 0.2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn slope_needs_points() {
        assert!(rate_slope(&trace_of(|_| 1.0, 10), 0.0).is_err());
    }

    #[test]
    fn pl_geometric() {
        let tr = trace_of(|t| 1.0 + 0.5f64.powi(t as i32), 30);
        let rep = pl_decay_check(&[tr.clone()], 0.5, 1.0, Some(1.0)).unwrap();
        assert!((rep.factor - 0.5).abs() < 1e-9);
        assert!(rep.passed);
        assert!(pl_decay_check(&[tr.clone()], 0.5, 0.0, Some(1.0)).is_err());
        assert!(pl_decay_check(&[tr], 0.5, 1.0, None).is_err());
    }
}
