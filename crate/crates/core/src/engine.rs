//! Runs `x^{t+1} = x^t − γ_t g^t` end to end and records traces.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, InitPoint, ProblemKind, SchedulerKind, Spacing, PROBLEM_KEYS};
use crate::data::{load_libsvm, synthetic_a9a};
use crate::error::{Error, Result};
use crate::estimators::{build_estimator, constants, nu_of, CompressorSpec, Counters, EstimatorSpec, HyperParams};
use crate::problem::{partition_problem, LogisticProblem, ProblemRef, QuadraticProblem};
use crate::rng::{derive_seed, fnv1a, normal_vec, seeded, splitmix};
use crate::schedule::{presets, theoretical_gamma_nonconvex, theoretical_gamma_pl, AdamState, AdaptiveAccumulator};

/// Iterates beyond this norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

pub const CSV_HEADER: &str = "t,loss,grad_norm,est_norm,gamma,grad_calls,partial_calls,bits,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub est_norm: f64,
    pub gamma: f64,
    pub grad_calls: u64,
    pub partial_calls: u64,
    pub bits: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Writes the trace as CSV with 17 significant digits and LF line endings.
pub fn trace_to_csv<W: Write>(trace: &Trace, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{CSV_HEADER}")?;
    for r in &trace.rows {
        writeln!(
            sink,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{:.16e}",
            r.t, r.loss, r.grad_norm, r.est_norm, r.gamma, r.grad_calls, r.partial_calls, r.bits, r.wall_ms
        )?;
    }
    Ok(())
}

pub fn trace_to_csv_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    trace_to_csv(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn trace_from_csv<R: BufRead>(reader: R) -> Result<Trace> {
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing trace header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: lineno,
            message: format!("bad {what}"),
        };
        let float = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(what));
        rows.push(TraceRow {
            t: int(f[0], "t")?,
            loss: float(f[1], "loss")?,
            grad_norm: float(f[2], "grad_norm")?,
            est_norm: float(f[3], "est_norm")?,
            gamma: float(f[4], "gamma")?,
            grad_calls: int(f[5], "grad_calls")?,
            partial_calls: int(f[6], "partial_calls")?,
            bits: int(f[7], "bits")?,
            wall_ms: float(f[8], "wall_ms")?,
        });
    }
    Ok(Trace { rows })
}

/// First recorded `t` with `‖∇f(x^t)‖ ≤ tol`.
pub fn iterations_to_tolerance(trace: &Trace, tol: f64) -> Result<Option<u64>> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    Ok(trace.rows.iter().find(|r| r.grad_norm <= tol).map(|r| r.t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// The configured tolerance was reached.
    Converged,
    BudgetExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub status: RunStatus,
    /// Iterations actually taken.
    pub iterations: u64,
    pub iterations_to_tolerance: Option<u64>,
    pub min_grad_norm: f64,
    pub final_loss: f64,
    pub counters: Counters,
    pub gamma_first: f64,
    /// The adaptive schedule saw only zero estimates at some point.
    pub stationary: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub x: Vec<f64>,
    pub trace: Trace,
    pub summary: Summary,
    /// Every γ_t used, including unrecorded iterations.
    pub gammas: Vec<f64>,
}

/// A config with its problem, clients and resolved estimator spec.
#[derive(Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub problem: ProblemRef,
    pub clients: Option<Vec<ProblemRef>>,
    pub spec: EstimatorSpec,
    pub smoothness: f64,
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<ProblemRef> {
    Ok(match cfg.problem {
        ProblemKind::Quadratic => {
            let q = &cfg.quadratic;
            let p = match q.spacing {
                Spacing::Uniform => QuadraticProblem::random(q.n, q.d, q.lo, q.hi, q.tilt, q.seed)?,
                Spacing::Log => QuadraticProblem::log_spaced(q.n, q.d, q.lo, q.hi, q.spread, q.tilt, q.seed)?,
            };
            Arc::new(p)
        }
        ProblemKind::Logistic => {
            let path = cfg
                .data
                .as_ref()
                .ok_or_else(|| Error::config("data", "logistic problems need a data path"))?;
            let ds = load_libsvm(path, cfg.dim, cfg.rows)?;
            Arc::new(LogisticProblem::new(Arc::new(ds))?)
        }
        ProblemKind::SyntheticA9a => {
            let ds = synthetic_a9a(cfg.rows.unwrap_or(4000), cfg.synthetic_seed);
            Arc::new(LogisticProblem::new(Arc::new(ds))?)
        }
    })
}

/// Resolves presets and compressor size for a problem with `n` components and
/// dimension `d`.
pub fn resolve_spec(cfg: &ExperimentConfig, n: usize, d: usize) -> EstimatorSpec {
    let mut b = cfg.b;
    let mut p = cfg.p;
    if cfg.presets {
        let (pb, pp) = presets(cfg.method, n);
        b = pb.unwrap_or(b);
        p = pp.unwrap_or(p);
    }
    let compressor = match (cfg.k_fraction, cfg.compressor) {
        (Some(f), CompressorSpec::TopK(_)) => CompressorSpec::TopK(((f * d as f64).ceil() as usize).clamp(1, d)),
        (Some(f), CompressorSpec::RandK(_)) => CompressorSpec::RandK(((f * d as f64).ceil() as usize).clamp(1, d)),
        (_, c) => c,
    };
    EstimatorSpec {
        method: cfg.method,
        b,
        p,
        replacement: cfg.replacement,
        compressor,
        value_bits: cfg.value_bits,
        index_bits: cfg.index_bits,
    }
}

impl Prepared {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let problem = build_problem(&config)?;
        Self::with_problem(config, problem)
    }

    pub fn with_problem(config: ExperimentConfig, problem: ProblemRef) -> Result<Self> {
        config.validate()?;
        let spec = resolve_spec(&config, problem.n_components(), problem.dim());
        let clients = if config.method.is_distributed() {
            Some(partition_problem(problem.clone(), config.clients, config.partition)?)
        } else {
            None
        };
        let smoothness = config.smoothness.unwrap_or_else(|| problem.smoothness());
        Ok(Prepared {
            config,
            problem,
            clients,
            spec,
            smoothness,
        })
    }

    pub fn hyperparams(&self) -> Result<HyperParams> {
        let m = self.clients.as_ref().map_or(1, |c| c.len());
        self.spec
            .hyperparams(self.problem.n_components(), self.problem.dim(), m)
    }

    /// Constant step of the configured scheduler (theoretical or tuned).
    pub fn constant_gamma(&self) -> Result<f64> {
        let c = constants(self.spec.method, &self.hyperparams()?)?;
        let base = if self.config.pl_step {
            let mu = self
                .config
                .mu
                .or_else(|| self.problem.strong_convexity())
                .ok_or_else(|| Error::config("mu", "PL step needs mu or a problem with known mu"))?;
            theoretical_gamma_pl(&c, self.smoothness, mu)?
        } else {
            theoretical_gamma_nonconvex(&c, self.smoothness)?
        };
        Ok(match self.config.scheduler {
            SchedulerKind::Tuned => base * self.config.multiplier,
            _ => base,
        })
    }

    pub fn run(&self) -> Result<RunResult> {
        self.run_seeded(self.config.seed)
    }

    pub fn run_seeded(&self, seed: u64) -> Result<RunResult> {
        let cfg = &self.config;
        let d = self.problem.dim();
        let mut est = build_estimator(&self.spec, self.problem.clone(), self.clients.as_deref())?;
        let mut x = match cfg.init {
            InitPoint::Zero => vec![0.0; d],
            InitPoint::Random => normal_vec(&mut seeded(derive_seed(seed, 0x1417)), d),
        };

        enum Rule {
            Constant(f64),
            Adaptive(AdaptiveAccumulator),
            Adam(AdamState),
        }
        let mut rule = match cfg.scheduler {
            SchedulerKind::Theoretical | SchedulerKind::Tuned => Rule::Constant(self.constant_gamma()?),
            SchedulerKind::Adaptive => {
                let nu = nu_of(&constants(self.spec.method, &self.hyperparams()?)?);
                Rule::Adaptive(AdaptiveAccumulator::new(cfg.alpha, nu)?)
            }
            SchedulerKind::Adam => Rule::Adam(AdamState::new(d)),
        };

        let start = Instant::now();
        let mut rng = seeded(seed);
        let mut trace = Trace::default();
        let mut gammas = Vec::new();
        let mut grad = vec![0.0; d];
        let mut status = RunStatus::BudgetExhausted;
        let mut min_grad_norm = f64::INFINITY;
        let mut stationary = false;
        let mut final_loss = f64::NAN;
        let mut taken = 0u64;
        let total = cfg.iterations as u64;

        est.init(&x)?;
        for t in 0..=total {
            let g: Vec<f64> = if t == 0 {
                est.estimate().to_vec()
            } else {
                est.step(&x, &mut rng)?.to_vec()
            };
            let est_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (gamma, update) = match &mut rule {
                Rule::Constant(c) => (*c, None),
                Rule::Adaptive(acc) => {
                    let s = acc.push(&g);
                    stationary |= s.stationary;
                    (s.gamma, None)
                }
                Rule::Adam(st) => (cfg.adam.lr, Some(st.step(&g, &cfg.adam))),
            };
            gammas.push(gamma);

            let record = t % cfg.cadence as u64 == 0 || t == total;
            let mut reached = false;
            if record || cfg.stop_at_tol {
                self.problem.grad(&x, &mut grad)?;
                let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let loss = self.problem.loss(&x)?;
                if !grad_norm.is_finite() || !loss.is_finite() {
                    status = RunStatus::Diverged;
                    break;
                }
                final_loss = loss;
                min_grad_norm = min_grad_norm.min(grad_norm);
                reached = cfg.tol.is_some_and(|tol| grad_norm <= tol);
                let c = est.counters();
                trace.rows.push(TraceRow {
                    t,
                    loss,
                    grad_norm,
                    est_norm,
                    gamma,
                    grad_calls: c.grad_calls,
                    partial_calls: c.partial_calls,
                    bits: c.bits,
                    wall_ms: if cfg.wall_clock {
                        start.elapsed().as_secs_f64() * 1e3
                    } else {
                        0.0
                    },
                });
            }
            if reached && cfg.stop_at_tol {
                break;
            }
            if t == total {
                break;
            }
            match update {
                Some(u) => x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi += ui),
                None => x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= gamma * gi),
            }
            taken += 1;
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                status = RunStatus::Diverged;
                break;
            }
        }

        let iterations_to_tolerance = match cfg.tol {
            Some(tol) => iterations_to_tolerance(&trace, tol)?,
            None => None,
        };
        if status != RunStatus::Diverged && iterations_to_tolerance.is_some() {
            status = RunStatus::Converged;
        }
        let summary = Summary {
            status,
            iterations: taken,
            iterations_to_tolerance,
            min_grad_norm,
            final_loss,
            counters: est.counters(),
            gamma_first: gammas.first().copied().unwrap_or(f64::NAN),
            stationary,
        };
        Ok(RunResult {
            x,
            trace,
            summary,
            gammas,
        })
    }
}

pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    Prepared::new(config.clone())?.run()
}

// ---------------------------------------------------------------------------
// Sweeps

pub use crate::config::Grid;

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub point: Vec<(String, String)>,
    pub seed: u64,
    pub result: RunResult,
}

/// Cartesian product of the grid, first key varying slowest.
pub fn grid_points(grid: &Grid) -> Vec<Vec<(String, String)>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut q = p.clone();
                q.push((key.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

pub fn point_label(point: &[(String, String)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Seed of a grid point: a mix of the base seed and a stable hash of the
/// point. The empty point keeps the base seed.
pub fn point_seed(base: u64, point: &[(String, String)]) -> u64 {
    if point.is_empty() {
        return base;
    }
    splitmix(base ^ fnv1a(point_label(point).as_bytes()))
}

/// Runs every grid point with up to `jobs` threads. Results follow grid
/// order regardless of scheduling.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, jobs: usize) -> Result<Vec<SweepResult>> {
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::config(key.as_str(), "grid key has no values"));
        }
    }
    let points = grid_points(grid);
    let mut configs = Vec::with_capacity(points.len());
    for point in &points {
        let mut cfg = base.clone();
        for (k, v) in point {
            cfg.set(k, v)?;
        }
        cfg.seed = point_seed(base.seed, point);
        cfg.validate()?;
        configs.push(cfg);
    }
    let shares_problem = !grid.iter().any(|(k, _)| PROBLEM_KEYS.contains(&k.as_str()));
    let shared = if shares_problem {
        Some(build_problem(base)?)
    } else {
        None
    };
    let job = |cfg: &ExperimentConfig| -> Result<RunResult> {
        let prepared = match &shared {
            Some(p) => Prepared::with_problem(cfg.clone(), p.clone())?,
            None => Prepared::new(cfg.clone())?,
        };
        prepared.run()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let results: Vec<Result<RunResult>> = pool.install(|| configs.par_iter().map(job).collect());
    points
        .into_iter()
        .zip(configs)
        .zip(results)
        .map(|((point, cfg), r)| {
            Ok(SweepResult {
                point,
                seed: cfg.seed,
                result: r?,
            })
        })
        .collect()
}
