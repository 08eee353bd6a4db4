use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use vradapt_core::compress::{check_biased_contract, check_unbiased_contract};
use vradapt_core::config::ExperimentConfig;
use vradapt_core::data::load_libsvm;
use vradapt_core::engine::{point_label, sweep as run_sweep, trace_to_csv, Grid, RunStatus, Summary};
use vradapt_core::estimators::{constants as registered, describe_hyper, ConstantField, HyperParams, Method};
use vradapt_core::problem::{LogisticProblem, Problem};
use vradapt_core::rng::seeded;
use vradapt_core::verify::{
    assumption_margin, margin_rows_to_csv, standard_fixture, MarginOptions, MarginRow, SIGMA_ALIGNMENT,
};

use crate::{ConstantsArgs, IngestArgs, RunArgs, SweepArgs, VerifyArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;
pub const EXIT_VERIFY_FAILED: u8 = 3;

pub const SEED_ENV: &str = "VRADAPT_SEED";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn usage(message: impl Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

type Outcome = Result<u8, Failure>;

/// `--seed`, then `VRADAPT_SEED`, then whatever the config says.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}: cannot parse `{v}` as a seed"))),
        Err(_) => Ok(None),
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_failure(e: io::Error) -> Failure {
    usage(format!("write failed: {e}"))
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::BudgetExhausted => "budget",
        RunStatus::Diverged => "diverged",
    }
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

fn summary_line(s: &Summary, seed: u64) -> String {
    format!(
        "status={} iterations={} iterations_to_tol={} min_grad_norm={:e} final_loss={} grad_calls={} partial_calls={} bits={} seed={seed}",
        status_name(s.status),
        s.iterations,
        opt(s.iterations_to_tolerance),
        s.min_grad_norm,
        s.final_loss,
        s.counters.grad_calls,
        s.counters.partial_calls,
        s.counters.bits,
    )
}

pub fn run(a: RunArgs) -> Outcome {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(usage)?;
    if let Some(seed) = resolve_seed(a.seed)? {
        cfg.seed = seed;
    }
    let result = vradapt_core::engine::run(&cfg).map_err(usage)?;
    let mut out = sink(a.out.as_deref())?;
    trace_to_csv(&result.trace, &mut out).map_err(io_failure)?;
    out.flush().map_err(io_failure)?;
    drop(out);
    let line = summary_line(&result.summary, cfg.seed);
    // keep standard output pure CSV when the trace goes there
    if a.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(if result.summary.status == RunStatus::Diverged {
        EXIT_DIVERGED
    } else {
        EXIT_OK
    })
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>), Failure> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--grid expects KEY=V1,V2,..., got `{spec}`")))?;
    let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    Ok((k.trim().to_string(), values))
}

fn file_label(index: usize, label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    if clean.is_empty() {
        format!("{index:03}.csv")
    } else {
        format!("{index:03}_{clean}.csv")
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "index,label,seed,status,iterations,iterations_to_tol,min_grad_norm,final_loss,grad_calls,partial_calls,bits";

pub fn sweep(a: SweepArgs) -> Outcome {
    let (mut base, mut grid): (ExperimentConfig, Grid) = ExperimentConfig::load_with_grid(&a.config).map_err(usage)?;
    for spec in &a.grid {
        grid.push(parse_axis(spec)?);
    }
    if let Some(seed) = resolve_seed(a.seed)? {
        base.seed = seed;
    }
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let results = run_sweep(&base, &grid, a.jobs).map_err(usage)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        for (i, r) in results.iter().enumerate() {
            let path = dir.join(file_label(i, &point_label(&r.point)));
            let mut w = sink(Some(&path))?;
            trace_to_csv(&r.result.trace, &mut w).map_err(io_failure)?;
            w.flush().map_err(io_failure)?;
        }
    }
    let mut out = sink(None)?;
    writeln!(out, "{SWEEP_CSV_HEADER}").map_err(io_failure)?;
    for (i, r) in results.iter().enumerate() {
        let s = &r.result.summary;
        writeln!(
            out,
            "{i},{},{},{},{},{},{:e},{},{},{},{}",
            point_label(&r.point),
            r.seed,
            status_name(s.status),
            s.iterations,
            opt(s.iterations_to_tolerance),
            s.min_grad_norm,
            s.final_loss,
            s.counters.grad_calls,
            s.counters.partial_calls,
            s.counters.bits,
        )
        .map_err(io_failure)?;
    }
    out.flush().map_err(io_failure)?;
    Ok(EXIT_OK)
}

fn parse_method(name: &str) -> Result<Method, Failure> {
    name.parse().map_err(|_| {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        usage(format!("unknown method `{name}` (expected one of {})", known.join(", ")))
    })
}

fn parse_perturb(spec: &str) -> Result<(ConstantField, f64), Failure> {
    let bad = || usage(format!("--perturb expects FIELD:FACTOR such as C:0.5, got `{spec}`"));
    let (f, v) = spec.split_once(':').ok_or_else(bad)?;
    let field: ConstantField = f.trim().parse().map_err(usage)?;
    let factor: f64 = v.trim().parse().map_err(|_| bad())?;
    if !(factor >= 0.0) || !factor.is_finite() {
        return Err(bad());
    }
    Ok((field, factor))
}

const CONTRACT_TRIALS: usize = 100;

pub fn verify(a: VerifyArgs) -> Outcome {
    let methods = match &a.method {
        Some(name) => vec![parse_method(name)?],
        None => Method::ALL.to_vec(),
    };
    let opts = MarginOptions {
        state_points: a.states,
        samples: a.samples,
        seed: resolve_seed(a.seed)?.unwrap_or(0),
        perturb: a.perturb.as_deref().map(parse_perturb).transpose()?,
    };
    let mut rows: Vec<MarginRow> = Vec::new();
    let mut notes = Vec::new();
    let mut all_pass = true;
    for m in methods {
        let fx = standard_fixture(m, opts.seed).map_err(usage)?;
        let report = assumption_margin(&fx.spec, fx.problem.clone(), fx.clients.as_deref(), &opts).map_err(usage)?;
        let worst = report.rows.iter().map(|r| r.margin).fold(f64::NEG_INFINITY, f64::max);
        let failed = report.rows.iter().filter(|r| !r.pass).count();
        notes.push(format!(
            "{m}: {} ({} rows, {failed} failing, worst margin {worst:.3e})",
            if report.passed { "PASS" } else { "FAIL" },
            report.rows.len()
        ));
        all_pass &= report.passed;
        rows.extend(report.rows);

        let d = fx.problem.dim();
        let mut rng = seeded(opts.seed);
        let contract = match m {
            Method::Ef21 => {
                let c = fx.spec.compressor.biased(d).map_err(usage)?;
                Some((c.name(), check_biased_contract(c.as_ref(), d, CONTRACT_TRIALS, &mut rng)))
            }
            Method::Diana | Method::Dasha => {
                let q = fx.spec.compressor.unbiased(d).map_err(usage)?;
                Some((q.name(), check_unbiased_contract(q.as_ref(), d, CONTRACT_TRIALS, &mut rng)))
            }
            _ => None,
        };
        if let Some((name, r)) = contract {
            notes.push(format!(
                "{m}: compressor {name} contract {} (worst margin {:.3e}, {})",
                if r.passed { "PASS" } else { "FAIL" },
                r.max_margin,
                if r.exact { "exact" } else { "sampled" }
            ));
            all_pass &= r.passed;
        }
    }
    let mut out = sink(a.out.as_deref())?;
    margin_rows_to_csv(&rows, &mut out).map_err(io_failure)?;
    out.flush().map_err(io_failure)?;
    drop(out);
    for n in &notes {
        eprintln!("{n}");
    }
    eprintln!("sigma alignment: {SIGMA_ALIGNMENT}");
    Ok(if all_pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub const CONSTANTS_CSV_HEADER: &str = "method,hyperparams,rho1,rho2,A,B,C,nu";

fn resolve_count(v: &str, n: usize, d: usize) -> Result<usize, Failure> {
    match v {
        "n" => Ok(n),
        "d" => Ok(d),
        _ => v.parse().map_err(|_| usage(format!("--b expects an integer, `n` or `d`, got `{v}`"))),
    }
}

pub fn constants(a: ConstantsArgs) -> Outcome {
    let methods = match &a.method {
        Some(name) => vec![parse_method(name)?],
        None => Method::ALL.to_vec(),
    };
    let ratio = match a.k {
        Some(0) => return Err(usage("--k must be at least 1")),
        Some(k) => Some(a.d as f64 / k as f64),
        None => None,
    };
    let h = HyperParams {
        n: a.n,
        b: resolve_count(&a.b, a.n, a.d)?,
        p: a.p,
        d: a.d,
        delta: a.delta.or(ratio).unwrap_or(1.0),
        omega: a.omega.or(ratio).unwrap_or(1.0),
    };
    let mut table = Vec::new();
    for m in methods {
        let c = registered(m, &h).map_err(|e| usage(format!("{m}: {e}")))?;
        table.push([
            m.name().to_string(),
            describe_hyper(m, &h),
            c.rho1.to_string(),
            c.rho2.to_string(),
            c.a.to_string(),
            c.b.to_string(),
            c.c.to_string(),
            c.nu().to_string(),
        ]);
    }
    let mut out = sink(None)?;
    if a.csv {
        writeln!(out, "{CONSTANTS_CSV_HEADER}").map_err(io_failure)?;
        for row in &table {
            writeln!(out, "{}", row.join(",")).map_err(io_failure)?;
        }
    } else {
        let header: Vec<&str> = CONSTANTS_CSV_HEADER.split(',').collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| table.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(out, "{}", line(header.clone())).map_err(io_failure)?;
        for row in &table {
            writeln!(out, "{}", line(row.iter().map(String::as_str).collect())).map_err(io_failure)?;
        }
    }
    out.flush().map_err(io_failure)?;
    Ok(EXIT_OK)
}

pub fn ingest(a: IngestArgs) -> Outcome {
    let data = load_libsvm(&a.input, a.dim, a.rows).map_err(usage)?;
    let nnz: usize = data.rows().iter().map(|r| r.nnz()).sum();
    let positive = data.labels().iter().filter(|&&y| y > 0.0).count();
    let data = Arc::new(data);
    let problem = LogisticProblem::new(data.clone()).map_err(usage)?;
    println!(
        "rows={} dim={} nnz={nnz} positive={positive} negative={} smoothness={}",
        data.len(),
        data.dim(),
        data.len() - positive,
        problem.smoothness()
    );
    if let Some(path) = &a.out {
        std::fs::write(path, data.to_libsvm()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    Ok(EXIT_OK)
}
