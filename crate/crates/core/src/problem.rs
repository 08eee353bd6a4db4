//! Finite-sum objectives `f(x) = (1/n) Σ f_i(x)` with component, full and
//! single-coordinate gradient access.

use std::sync::Arc;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{normal_vec, seeded};

pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;
    fn n_components(&self) -> usize;

    fn loss(&self, x: &[f64]) -> Result<f64>;
    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
    fn component_loss(&self, i: usize, x: &[f64]) -> Result<f64>;
    fn component_grad(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()>;
    /// `∂_j f(x)` of the full objective.
    fn partial(&self, j: usize, x: &[f64]) -> Result<f64>;
    /// `∂_j f_i(x)`.
    fn component_partial(&self, i: usize, j: usize, x: &[f64]) -> Result<f64>;

    /// Smoothness constant `L` of the full objective.
    fn smoothness(&self) -> f64;
    fn component_smoothness(&self, i: usize) -> f64;

    fn strong_convexity(&self) -> Option<f64> {
        None
    }
    fn optimal_value(&self) -> Option<f64> {
        None
    }
    fn optimum(&self) -> Option<Vec<f64>> {
        None
    }
    /// Applies the Hessian, or a PSD matrix dominating it, to `v`.
    /// Returns `false` when the problem offers neither.
    fn hessian_bound_apply(&self, _v: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

pub type ProblemRef = Arc<dyn Problem>;

pub(crate) fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_index(i: usize, n: usize) -> Result<()> {
    if i >= n {
        return Err(Error::OutOfRange { index: i, len: n });
    }
    Ok(())
}

pub fn grad_vec(p: &dyn Problem, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.dim()];
    p.grad(x, &mut out)?;
    Ok(out)
}

pub fn component_grad_vec(p: &dyn Problem, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.dim()];
    p.component_grad(i, x, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diagonal quadratics

/// `f_i(x) = ½ (x-x*)ᵀ diag(h_i) (x-x*) + q_iᵀ (x-x*) + c_i` with the tilts
/// `q_i` centred so that they sum to zero. Then `∇f(x*) = 0` and the minimum
/// value is the mean offset.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    eig: Vec<Vec<f64>>,
    avg_eig: Vec<f64>,
    optimum: Vec<f64>,
    tilts: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    smoothness: f64,
}

impl QuadraticProblem {
    pub fn new(
        eigenvalues: Vec<Vec<f64>>,
        optimum: Vec<f64>,
        tilts: Option<Vec<Vec<f64>>>,
        offsets: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = eigenvalues.len();
        let d = optimum.len();
        if n == 0 || d == 0 {
            return Err(Error::invalid("quadratic needs at least one component and one coordinate"));
        }
        for row in &eigenvalues {
            check_dim(row, d)?;
            if row.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
                return Err(Error::invalid("quadratic eigenvalues must be positive and finite"));
            }
        }
        let mut tilts = tilts.unwrap_or_else(|| vec![vec![0.0; d]; n]);
        if tilts.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: tilts.len(),
            });
        }
        for t in &tilts {
            check_dim(t, d)?;
        }
        let mut mean_tilt = vec![0.0; d];
        for t in &tilts {
            for (m, v) in mean_tilt.iter_mut().zip(t) {
                *m += v / n as f64;
            }
        }
        for t in &mut tilts {
            for (v, m) in t.iter_mut().zip(&mean_tilt) {
                *v -= m;
            }
        }
        let offsets = offsets.unwrap_or_else(|| vec![0.0; n]);
        if offsets.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: offsets.len(),
            });
        }
        let mut avg_eig = vec![0.0; d];
        for row in &eigenvalues {
            for (a, h) in avg_eig.iter_mut().zip(row) {
                *a += h / n as f64;
            }
        }
        let smoothness = eigenvalues
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold(0.0, f64::max);
        Ok(QuadraticProblem {
            eig: eigenvalues,
            avg_eig,
            optimum,
            tilts,
            offsets,
            smoothness,
        })
    }

    /// Random fixture: eigenvalues uniform in `[lo, hi]`, optimum and tilts
    /// Gaussian (tilts scaled by `tilt`).
    pub fn random(n: usize, d: usize, lo: f64, hi: f64, tilt: f64, seed: u64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("need 0 < lo <= hi"));
        }
        let mut rng = seeded(seed);
        let eig = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(lo..=hi)).collect())
            .collect();
        let optimum = normal_vec(&mut rng, d);
        let tilts = (0..n)
            .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v * tilt).collect())
            .collect();
        let offsets = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Self::new(eig, optimum, Some(tilts), Some(offsets))
    }

    /// Ill-conditioned fixture: coordinate `j` has base curvature spaced
    /// log-uniformly in `[lo, hi]`, and each component scales it by a factor
    /// in `[1 - spread, 1 + spread]`.
    pub fn log_spaced(n: usize, d: usize, lo: f64, hi: f64, spread: f64, tilt: f64, seed: u64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || !(0.0..1.0).contains(&spread) {
            return Err(Error::invalid("need 0 < lo <= hi and spread in [0, 1)"));
        }
        let mut rng = seeded(seed);
        let base: Vec<f64> = (0..d)
            .map(|j| {
                let t = if d == 1 { 0.0 } else { j as f64 / (d - 1) as f64 };
                lo * (hi / lo).powf(t)
            })
            .collect();
        let eig = (0..n)
            .map(|_| {
                base.iter()
                    .map(|&h| h * (1.0 + spread * rng.random_range(-1.0..=1.0)))
                    .collect()
            })
            .collect();
        let optimum = normal_vec(&mut rng, d);
        let tilts = (0..n)
            .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v * tilt).collect())
            .collect();
        Self::new(eig, optimum, Some(tilts), None)
    }

    pub fn averaged_curvature(&self) -> &[f64] {
        &self.avg_eig
    }
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.optimum.len()
    }

    fn n_components(&self) -> usize {
        self.eig.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        let quad: f64 = x
            .iter()
            .zip(&self.optimum)
            .zip(&self.avg_eig)
            .map(|((xi, oi), h)| 0.5 * h * (xi - oi) * (xi - oi))
            .sum();
        let off = self.offsets.iter().sum::<f64>() / self.offsets.len() as f64;
        Ok(quad + off)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(x, self.dim())?;
        check_dim(out, self.dim())?;
        for j in 0..x.len() {
            out[j] = self.avg_eig[j] * (x[j] - self.optimum[j]);
        }
        Ok(())
    }

    fn component_loss(&self, i: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        let mut v = self.offsets[i];
        for j in 0..x.len() {
            let e = x[j] - self.optimum[j];
            v += 0.5 * self.eig[i][j] * e * e + self.tilts[i][j] * e;
        }
        Ok(v)
    }

    fn component_grad(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        check_dim(out, self.dim())?;
        let (h, q) = (&self.eig[i], &self.tilts[i]);
        for j in 0..x.len() {
            out[j] = h[j] * (x[j] - self.optimum[j]) + q[j];
        }
        Ok(())
    }

    fn partial(&self, j: usize, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        check_index(j, self.dim())?;
        Ok(self.avg_eig[j] * (x[j] - self.optimum[j]))
    }

    fn component_partial(&self, i: usize, j: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        check_index(j, self.dim())?;
        Ok(self.eig[i][j] * (x[j] - self.optimum[j]) + self.tilts[i][j])
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn component_smoothness(&self, i: usize) -> f64 {
        self.eig[i].iter().copied().fold(0.0, f64::max)
    }

    fn strong_convexity(&self) -> Option<f64> {
        Some(self.avg_eig.iter().copied().fold(f64::INFINITY, f64::min))
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(self.offsets.iter().sum::<f64>() / self.offsets.len() as f64)
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        Some(self.optimum.clone())
    }

    fn hessian_bound_apply(&self, v: &[f64], out: &mut [f64]) -> bool {
        for j in 0..v.len() {
            out[j] = self.avg_eig[j] * v[j];
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `f_i(x) = log(1 + exp(-b_i <a_i, x>))` over a sparse dataset.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    data: Arc<Dataset>,
    /// Column-major copy of the features for coordinate access.
    columns: Vec<Vec<(u32, f64)>>,
    smoothness: f64,
}

pub const SMOOTHNESS_ITERS: usize = 200;
pub const SMOOTHNESS_SEED: u64 = 0x5eed_1ca1;

impl LogisticProblem {
    /// Builds the problem and estimates `L = λ_max(AᵀA / 4n)` by power
    /// iteration.
    pub fn new(data: Arc<Dataset>) -> Result<Self> {
        let mut p = Self::with_smoothness(data, f64::NAN)?;
        p.smoothness = estimate_smoothness(&p, SMOOTHNESS_ITERS, SMOOTHNESS_SEED)?;
        Ok(p)
    }

    pub fn with_smoothness(data: Arc<Dataset>, smoothness: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("logistic problem needs at least one example"));
        }
        let mut columns = vec![Vec::new(); data.dim()];
        for (i, row) in data.rows().iter().enumerate() {
            for (&j, &v) in row.indices.iter().zip(&row.values) {
                columns[j as usize].push((i as u32, v));
            }
        }
        Ok(LogisticProblem {
            data,
            columns,
            smoothness,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// `-b_i σ(-b_i <a_i, x>)`, the scalar multiplying `a_i` in `∇f_i`.
    fn residual(&self, i: usize, x: &[f64]) -> f64 {
        let y = self.data.labels()[i];
        -y * sigmoid(-y * self.data.row(i).dot(x))
    }
}

impl Problem for LogisticProblem {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn n_components(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        let n = self.n_components();
        let s: f64 = (0..n)
            .map(|i| softplus(-self.data.labels()[i] * self.data.row(i).dot(x)))
            .sum();
        Ok(s / n as f64)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(x, self.dim())?;
        check_dim(out, self.dim())?;
        out.fill(0.0);
        let n = self.n_components();
        for i in 0..n {
            let r = self.residual(i, x);
            self.data.row(i).axpy(r / n as f64, out);
        }
        Ok(())
    }

    fn component_loss(&self, i: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        Ok(softplus(-self.data.labels()[i] * self.data.row(i).dot(x)))
    }

    fn component_grad(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        check_dim(out, self.dim())?;
        out.fill(0.0);
        let r = self.residual(i, x);
        self.data.row(i).axpy(r, out);
        Ok(())
    }

    fn partial(&self, j: usize, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        check_index(j, self.dim())?;
        let n = self.n_components() as f64;
        Ok(self.columns[j]
            .iter()
            .map(|&(i, v)| self.residual(i as usize, x) * v)
            .sum::<f64>()
            / n)
    }

    fn component_partial(&self, i: usize, j: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.n_components())?;
        check_dim(x, self.dim())?;
        check_index(j, self.dim())?;
        let row = self.data.row(i);
        match row.indices.binary_search(&(j as u32)) {
            Ok(k) => Ok(self.residual(i, x) * row.values[k]),
            Err(_) => Ok(0.0),
        }
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn component_smoothness(&self, i: usize) -> f64 {
        self.data.row(i).sq_norm() / 4.0
    }

    fn hessian_bound_apply(&self, v: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        let n = self.n_components() as f64;
        for row in self.data.rows() {
            let av = row.dot(v);
            row.axpy(av / (4.0 * n), out);
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Client partitioning

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Consecutive blocks; the first `n mod m` clients get one extra component.
    Contiguous,
    RoundRobin,
}

/// Client `c` objective `F_c = (m/n) Σ_{i∈c} f_i`, so that the mean over the
/// `m` clients equals the parent objective. Each client component is the
/// parent component scaled by `m|c|/n`.
#[derive(Clone)]
pub struct SubProblem {
    parent: ProblemRef,
    components: Vec<usize>,
    scale: f64,
}

impl SubProblem {
    pub fn components(&self) -> &[usize] {
        &self.components
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Problem for SubProblem {
    fn dim(&self) -> usize {
        self.parent.dim()
    }

    fn n_components(&self) -> usize {
        self.components.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for &i in &self.components {
            s += self.parent.component_loss(i, x)?;
        }
        Ok(self.scale * s / self.components.len() as f64)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(out, self.dim())?;
        out.fill(0.0);
        let mut buf = vec![0.0; self.dim()];
        let w = self.scale / self.components.len() as f64;
        for &i in &self.components {
            self.parent.component_grad(i, x, &mut buf)?;
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
        Ok(())
    }

    fn component_loss(&self, i: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.components.len())?;
        Ok(self.scale * self.parent.component_loss(self.components[i], x)?)
    }

    fn component_grad(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.components.len())?;
        self.parent.component_grad(self.components[i], x, out)?;
        for o in out.iter_mut() {
            *o *= self.scale;
        }
        Ok(())
    }

    fn partial(&self, j: usize, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for &i in &self.components {
            s += self.parent.component_partial(i, j, x)?;
        }
        Ok(self.scale * s / self.components.len() as f64)
    }

    fn component_partial(&self, i: usize, j: usize, x: &[f64]) -> Result<f64> {
        check_index(i, self.components.len())?;
        Ok(self.scale * self.parent.component_partial(self.components[i], j, x)?)
    }

    /// Upper bound: the largest scaled component constant.
    fn smoothness(&self) -> f64 {
        (0..self.components.len())
            .map(|i| self.component_smoothness(i))
            .fold(0.0, f64::max)
    }

    fn component_smoothness(&self, i: usize) -> f64 {
        self.scale * self.parent.component_smoothness(self.components[i])
    }
}

pub fn partition_problem(parent: ProblemRef, n_clients: usize, scheme: PartitionScheme) -> Result<Vec<ProblemRef>> {
    let n = parent.n_components();
    if n_clients == 0 || n_clients > n {
        return Err(Error::invalid(format!(
            "cannot split {n} components across {n_clients} clients"
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    match scheme {
        PartitionScheme::Contiguous => {
            let (base, extra) = (n / n_clients, n % n_clients);
            let mut start = 0;
            for (c, g) in groups.iter_mut().enumerate() {
                let len = base + usize::from(c < extra);
                g.extend(start..start + len);
                start += len;
            }
        }
        PartitionScheme::RoundRobin => {
            for i in 0..n {
                groups[i % n_clients].push(i);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|components| {
            let scale = (n_clients * components.len()) as f64 / n as f64;
            Arc::new(SubProblem {
                parent: parent.clone(),
                components,
                scale,
            }) as ProblemRef
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Numerical checks

/// Power iteration on the Hessian bound. Returns the Rayleigh quotient of the
/// final iterate.
pub fn estimate_smoothness(p: &dyn Problem, iterations: usize, seed: u64) -> Result<f64> {
    let d = p.dim();
    let mut v = normal_vec(&mut seeded(seed), d);
    let mut hv = vec![0.0; d];
    let norm = |u: &[f64]| u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    if !p.hessian_bound_apply(&v, &mut hv) {
        return Err(Error::Unsupported(
            "problem exposes neither a Hessian product nor an upper-bound surrogate".into(),
        ));
    }
    for _ in 0..iterations {
        let nh = norm(&hv);
        if nh == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().zip(&hv).for_each(|(a, b)| *a = b / nh);
        p.hessian_bound_apply(&v, &mut hv);
    }
    Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum())
}

/// Largest per-coordinate deviation `|analytic − central| / (|analytic| + h)`
/// over `points` standard-normal points.
pub fn grad_fd_check(p: &dyn Problem, points: usize, h: f64, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let d = p.dim();
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let mut g = vec![0.0; d];
    for _ in 0..points {
        let x = normal_vec(&mut rng, d);
        p.grad(&x, &mut g)?;
        let mut xp = x.clone();
        for j in 0..d {
            xp[j] = x[j] + h;
            let fp = p.loss(&xp)?;
            xp[j] = x[j] - h;
            let fm = p.loss(&xp)?;
            xp[j] = x[j];
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / (g[j].abs() + h));
        }
    }
    Ok(worst)
}
