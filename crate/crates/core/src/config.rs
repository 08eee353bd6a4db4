//! `key = value` experiment configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed
//! values are errors naming the key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimators::{CompressorSpec, Method};
use crate::problem::PartitionScheme;
use crate::schedule::{validate_alpha, AdamParams, DEFAULT_ALPHA};

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    /// Deterministic stand-in with the shape of `a9a`.
    SyntheticA9a,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spacing {
    Uniform,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConfig {
    pub n: usize,
    pub d: usize,
    pub lo: f64,
    pub hi: f64,
    pub tilt: f64,
    pub spacing: Spacing,
    /// Per-component multiplicative spread around the log-spaced spectrum.
    pub spread: f64,
    pub seed: u64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        QuadraticConfig {
            n: 20,
            d: 10,
            lo: 1.0,
            hi: 4.0,
            tilt: 1.0,
            spacing: Spacing::Uniform,
            spread: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    Theoretical,
    Tuned,
    Adaptive,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPoint {
    Zero,
    /// Standard normal, seeded by the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub data: Option<PathBuf>,
    pub rows: Option<usize>,
    pub dim: Option<usize>,
    pub synthetic_seed: u64,
    pub quadratic: QuadraticConfig,
    pub smoothness: Option<f64>,
    pub mu: Option<f64>,

    pub method: Method,
    pub b: usize,
    pub p: f64,
    pub presets: bool,
    pub replacement: bool,
    pub compressor: CompressorSpec,
    /// When set, the compressor keeps `⌈k_fraction · d⌉` coordinates.
    pub k_fraction: Option<f64>,
    pub clients: usize,
    pub partition: PartitionScheme,
    pub value_bits: u64,
    pub index_bits: u64,

    pub scheduler: SchedulerKind,
    pub alpha: f64,
    pub multiplier: f64,
    /// Use the PL step instead of the non-convex one for theoretical/tuned.
    pub pl_step: bool,
    pub adam: AdamParams,

    pub iterations: usize,
    pub seed: u64,
    pub cadence: usize,
    pub tol: Option<f64>,
    pub stop_at_tol: bool,
    pub init: InitPoint,
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::Quadratic,
            data: None,
            rows: None,
            dim: None,
            synthetic_seed: 1,
            quadratic: QuadraticConfig::default(),
            smoothness: None,
            mu: None,
            method: Method::Page,
            b: 1,
            p: 1.0,
            presets: false,
            replacement: false,
            compressor: CompressorSpec::Identity,
            k_fraction: None,
            clients: 1,
            partition: PartitionScheme::Contiguous,
            value_bits: 32,
            index_bits: 32,
            scheduler: SchedulerKind::Adaptive,
            alpha: DEFAULT_ALPHA,
            multiplier: 1.0,
            pl_step: false,
            adam: AdamParams::default(),
            iterations: 1000,
            seed: 0,
            cadence: 1,
            tol: None,
            stop_at_tol: false,
            init: InitPoint::Zero,
            wall_clock: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

fn positive_int(key: &str, v: &str) -> Result<usize> {
    let n: usize = parse_num(key, v)?;
    if n == 0 {
        return Err(Error::config(key, "must be at least 1"));
    }
    Ok(n)
}

/// Sweep axes in file order: each key with the values it takes.
pub type Grid = Vec<(String, Vec<String>)>;

fn reject_grid(grid: &Grid) -> Result<()> {
    match grid.first() {
        Some((axis, _)) => Err(Error::config(format!("grid.{axis}"), "grid axes belong in sweep configs")),
        None => Ok(()),
    }
}

/// Keys that change the problem (used to decide whether a sweep can share
/// one problem instance).
pub const PROBLEM_KEYS: &[&str] = &[
    "problem",
    "data",
    "rows",
    "dim",
    "synthetic_seed",
    "quad_n",
    "quad_d",
    "quad_lo",
    "quad_hi",
    "quad_tilt",
    "quad_spacing",
    "quad_spread",
    "quad_seed",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let (cfg, grid) = Self::parse_with_grid(text)?;
        reject_grid(&grid)?;
        Ok(cfg)
    }

    /// Parses a sweep file: ordinary keys plus axes written as
    /// `grid.<key> = v1, v2, ...`. Axes keep file order.
    pub fn parse_with_grid(text: &str) -> Result<(Self, Grid)> {
        let mut cfg = ExperimentConfig::default();
        let mut grid = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k.strip_prefix("grid.") {
                Some(axis) => {
                    let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    if values.is_empty() {
                        return Err(Error::config(k, "grid axis has no values"));
                    }
                    // fail early on values the key cannot take
                    let mut probe = cfg.clone();
                    for value in &values {
                        probe.set(axis, value)?;
                    }
                    grid.push((axis.to_string(), values));
                }
                None => cfg.set(k, v)?,
            }
        }
        cfg.validate()?;
        Ok((cfg, grid))
    }

    /// Reads a config file; a relative `data` path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, grid) = Self::load_with_grid(path)?;
        reject_grid(&grid)?;
        Ok(cfg)
    }

    pub fn load_with_grid(path: &Path) -> Result<(Self, Grid)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut cfg, grid) = Self::parse_with_grid(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() && !data.exists() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok((cfg, grid))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "problem" => {
                self.problem = match v.to_ascii_lowercase().as_str() {
                    "quadratic" => ProblemKind::Quadratic,
                    "logistic" => ProblemKind::Logistic,
                    "a9a-synthetic" | "synthetic-a9a" => ProblemKind::SyntheticA9a,
                    _ => return Err(Error::config(k, format!("unknown problem `{v}`"))),
                }
            }
            "data" => self.data = Some(PathBuf::from(v)),
            "rows" => self.rows = Some(positive_int(k, v)?),
            "dim" => self.dim = Some(positive_int(k, v)?),
            "synthetic_seed" => self.synthetic_seed = parse_num(k, v)?,
            "quad_n" => self.quadratic.n = positive_int(k, v)?,
            "quad_d" => self.quadratic.d = positive_int(k, v)?,
            "quad_lo" => self.quadratic.lo = positive(k, parse_num(k, v)?)?,
            "quad_hi" => self.quadratic.hi = positive(k, parse_num(k, v)?)?,
            "quad_tilt" => self.quadratic.tilt = parse_num(k, v)?,
            "quad_spacing" => {
                self.quadratic.spacing = match v {
                    "uniform" => Spacing::Uniform,
                    "log" => Spacing::Log,
                    _ => return Err(Error::config(k, format!("expected uniform or log, got `{v}`"))),
                }
            }
            "quad_spread" => self.quadratic.spread = parse_num(k, v)?,
            "quad_seed" => self.quadratic.seed = parse_num(k, v)?,
            "smoothness" => self.smoothness = Some(positive(k, parse_num(k, v)?)?),
            "mu" => self.mu = Some(positive(k, parse_num(k, v)?)?),
            "method" => self.method = v.parse().map_err(|e: Error| Error::config(k, e.to_string()))?,
            "b" => self.b = positive_int(k, v)?,
            "p" => {
                let p: f64 = parse_num(k, v)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::config(k, format!("must lie in (0, 1], got {p}")));
                }
                self.p = p;
            }
            "presets" => self.presets = parse_bool(k, v)?,
            "replacement" => self.replacement = parse_bool(k, v)?,
            "compressor" => {
                self.compressor = v.parse().map_err(|e: Error| Error::config(k, e.to_string()))?
            }
            "k_fraction" => {
                let f: f64 = parse_num(k, v)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config(k, format!("must lie in (0, 1], got {f}")));
                }
                self.k_fraction = Some(f);
            }
            "clients" => self.clients = positive_int(k, v)?,
            "partition" => {
                self.partition = match v {
                    "contiguous" => PartitionScheme::Contiguous,
                    "round-robin" | "roundrobin" => PartitionScheme::RoundRobin,
                    _ => return Err(Error::config(k, format!("unknown partition `{v}`"))),
                }
            }
            "value_bits" => self.value_bits = parse_num(k, v)?,
            "index_bits" => self.index_bits = parse_num(k, v)?,
            "scheduler" => {
                self.scheduler = match v.to_ascii_lowercase().as_str() {
                    "theoretical" => SchedulerKind::Theoretical,
                    "tuned" => SchedulerKind::Tuned,
                    "adaptive" => SchedulerKind::Adaptive,
                    "adam" => SchedulerKind::Adam,
                    _ => return Err(Error::config(k, format!("unknown scheduler `{v}`"))),
                }
            }
            "alpha" => {
                let a: f64 = parse_num(k, v)?;
                validate_alpha(a).map_err(|e| Error::config(k, e.to_string()))?;
                self.alpha = a;
            }
            "multiplier" => self.multiplier = positive(k, parse_num(k, v)?)?,
            "pl_step" => self.pl_step = parse_bool(k, v)?,
            "lr" => self.adam.lr = positive(k, parse_num(k, v)?)?,
            "beta1" => self.adam.beta1 = parse_num(k, v)?,
            "beta2" => self.adam.beta2 = parse_num(k, v)?,
            "eps" => self.adam.eps = positive(k, parse_num(k, v)?)?,
            "iterations" => self.iterations = parse_num(k, v)?,
            "seed" => self.seed = parse_num(k, v)?,
            "cadence" => self.cadence = positive_int(k, v)?,
            "tol" => self.tol = Some(positive(k, parse_num(k, v)?)?),
            "stop_at_tol" => self.stop_at_tol = parse_bool(k, v)?,
            "x0" => {
                self.init = match v {
                    "zero" => InitPoint::Zero,
                    "random" => InitPoint::Random,
                    _ => return Err(Error::config(k, format!("expected zero or random, got `{v}`"))),
                }
            }
            "wall_clock" => self.wall_clock = parse_bool(k, v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.problem == ProblemKind::Logistic && self.data.is_none() {
            return Err(Error::config("data", "logistic problems need a data path"));
        }
        if self.quadratic.hi < self.quadratic.lo {
            return Err(Error::config("quad_hi", "must be at least quad_lo"));
        }
        if !(0.0..1.0).contains(&self.quadratic.spread) {
            return Err(Error::config("quad_spread", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if self.stop_at_tol && self.tol.is_none() {
            return Err(Error::config("stop_at_tol", "needs tol"));
        }
        if self.scheduler == SchedulerKind::Adam && self.method != Method::Sgd && !self.method.uses_batch() {
            return Err(Error::config("scheduler", "adam is only wired to single-node estimators"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "problem",
            match self.problem {
                ProblemKind::Quadratic => "quadratic",
                ProblemKind::Logistic => "logistic",
                ProblemKind::SyntheticA9a => "a9a-synthetic",
            }
            .into(),
        );
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(r) = self.rows {
            kv("rows", r.to_string());
        }
        if let Some(d) = self.dim {
            kv("dim", d.to_string());
        }
        kv("synthetic_seed", self.synthetic_seed.to_string());
        let q = &self.quadratic;
        kv("quad_n", q.n.to_string());
        kv("quad_d", q.d.to_string());
        kv("quad_lo", q.lo.to_string());
        kv("quad_hi", q.hi.to_string());
        kv("quad_tilt", q.tilt.to_string());
        kv(
            "quad_spacing",
            match q.spacing {
                Spacing::Uniform => "uniform",
                Spacing::Log => "log",
            }
            .into(),
        );
        kv("quad_spread", q.spread.to_string());
        kv("quad_seed", q.seed.to_string());
        if let Some(l) = self.smoothness {
            kv("smoothness", l.to_string());
        }
        if let Some(m) = self.mu {
            kv("mu", m.to_string());
        }
        kv("method", self.method.name().into());
        kv("b", self.b.to_string());
        kv("p", self.p.to_string());
        kv("presets", self.presets.to_string());
        kv("replacement", self.replacement.to_string());
        kv("compressor", self.compressor.to_string());
        if let Some(f) = self.k_fraction {
            kv("k_fraction", f.to_string());
        }
        kv("clients", self.clients.to_string());
        kv(
            "partition",
            match self.partition {
                PartitionScheme::Contiguous => "contiguous",
                PartitionScheme::RoundRobin => "round-robin",
            }
            .into(),
        );
        kv("value_bits", self.value_bits.to_string());
        kv("index_bits", self.index_bits.to_string());
        kv(
            "scheduler",
            match self.scheduler {
                SchedulerKind::Theoretical => "theoretical",
                SchedulerKind::Tuned => "tuned",
                SchedulerKind::Adaptive => "adaptive",
                SchedulerKind::Adam => "adam",
            }
            .into(),
        );
        kv("alpha", self.alpha.to_string());
        kv("multiplier", self.multiplier.to_string());
        kv("pl_step", self.pl_step.to_string());
        kv("lr", self.adam.lr.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("eps", self.adam.eps.to_string());
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("cadence", self.cadence.to_string());
        if let Some(t) = self.tol {
            kv("tol", t.to_string());
        }
        kv("stop_at_tol", self.stop_at_tol.to_string());
        kv(
            "x0",
            match self.init {
                InitPoint::Zero => "zero",
                InitPoint::Random => "random",
            }
            .into(),
        );
        kv("wall_clock", self.wall_clock.to_string());
        s
    }
}
