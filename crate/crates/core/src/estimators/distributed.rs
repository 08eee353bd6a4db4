//! Compressed distributed estimators simulated in one process: EF21, DIANA
//! and DASHA. Client `c` owns the objective `F_c`; the server estimate is the
//! fixed-order mean over clients.

use std::sync::Arc;

use super::{check_len, skewed, sq_dist, Counters, Estimator, Method};
use crate::compress::{bits_cost, BiasedCompressor, CompressedVector, UnbiasedCompressor};
use crate::error::Result;
use crate::problem::{check_index, ProblemRef};
use crate::rng::SimRng;

/// Caller-supplied compression of client `c`'s message, for deterministic
/// tests and enumeration.
pub type CompressFn<'a> = dyn FnMut(usize, &[f64]) -> CompressedVector + 'a;

#[derive(Clone)]
struct Clients {
    problems: Vec<ProblemRef>,
    value_bits: u64,
    index_bits: u64,
    counters: Counters,
}

impl Clients {
    fn m(&self) -> usize {
        self.problems.len()
    }

    fn dim(&self) -> usize {
        self.problems[0].dim()
    }

    fn grad(&mut self, c: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.problems[c].grad(x, out)?;
        self.counters.grad_calls += self.problems[c].n_components() as u64;
        Ok(())
    }

    fn grads_uncounted(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.problems
            .iter()
            .map(|p| {
                let mut g = vec![0.0; x.len()];
                p.grad(x, &mut g)?;
                Ok(g)
            })
            .collect()
    }

    fn send(&mut self, msg: &CompressedVector) {
        self.counters.bits += bits_cost(msg, self.value_bits, self.index_bits);
        if msg.is_dense() {
            self.counters.dense_messages += 1;
        } else {
            self.counters.sparse_messages += 1;
        }
    }

    /// Initial upload: every client sends its full gradient uncompressed.
    fn init(&mut self, x0: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.m());
        for c in 0..self.m() {
            let mut g = vec![0.0; x0.len()];
            self.grad(c, x0, &mut g)?;
            self.send(&CompressedVector::dense(&g));
            out.push(g);
        }
        Ok(out)
    }

    fn skewed_rows(&self, x_prev: &[f64], x_next: &[f64], level: f64) -> Result<Vec<Vec<f64>>> {
        let a = self.grads_uncounted(x_prev)?;
        let b = self.grads_uncounted(x_next)?;
        Ok(a.iter().zip(&b).map(|(u, v)| skewed(u, v, level)).collect())
    }

    /// `(1/m) Σ ‖rows_c − ∇F_c(x)‖²`
    fn mismatch(&self, rows: &[Vec<f64>], x: &[f64]) -> Result<f64> {
        let grads = self.grads_uncounted(x)?;
        Ok(rows.iter().zip(&grads).map(|(r, g)| sq_dist(r, g)).sum::<f64>() / self.m() as f64)
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    let m = rows.len() as f64;
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / m;
        }
    }
    out
}

// ---------------------------------------------------------------------------

/// EF21: `g_c ← g_c + C(∇F_c(x) − g_c)` on each client and `g = mean g_c`.
#[derive(Clone)]
pub struct Ef21 {
    clients: Clients,
    compressor: Arc<dyn BiasedCompressor>,
    gc: Vec<Vec<f64>>,
    g: Vec<f64>,
    x_prev: Vec<f64>,
}

impl Ef21 {
    pub fn new(problems: Vec<ProblemRef>, compressor: Arc<dyn BiasedCompressor>, value_bits: u64, index_bits: u64) -> Self {
        let d = problems[0].dim();
        let m = problems.len();
        Ef21 {
            clients: Clients {
                problems,
                value_bits,
                index_bits,
                counters: Counters::default(),
            },
            compressor,
            gc: vec![vec![0.0; d]; m],
            g: vec![0.0; d],
            x_prev: vec![0.0; d],
        }
    }

    pub fn client_estimate(&self, c: usize) -> &[f64] {
        &self.gc[c]
    }

    /// Overrides client `c`'s estimate and re-derives the server mean.
    pub fn set_client_estimate(&mut self, c: usize, v: &[f64]) -> Result<()> {
        check_index(c, self.clients.m())?;
        check_len(v, self.clients.dim())?;
        self.gc[c].copy_from_slice(v);
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], compress: &mut CompressFn<'_>) -> Result<&[f64]> {
        let d = self.clients.dim();
        check_len(x, d)?;
        let m = self.clients.m();
        let mut grad = vec![0.0; d];
        let mut agg = vec![0.0; d];
        for c in 0..m {
            self.clients.grad(c, x, &mut grad)?;
            let diff: Vec<f64> = grad.iter().zip(&self.gc[c]).map(|(a, b)| a - b).collect();
            let msg = compress(c, &diff);
            msg.add_to(1.0, &mut self.gc[c]);
            msg.add_to(1.0, &mut agg);
            self.clients.send(&msg);
        }
        for (g, a) in self.g.iter_mut().zip(&agg) {
            *g += a / m as f64;
        }
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Ef21 {
    fn method(&self) -> Method {
        Method::Ef21
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.clients.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.gc = self.clients.init(x0)?;
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let comp = self.compressor.clone();
        self.step_with(x, &mut |_, v| comp.compress(v, rng))
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.clients.dim())?;
        check_len(g, self.clients.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    /// `(1/m) Σ ‖g_c − ∇F_c(x^t)‖²`
    fn sigma_sq(&self) -> Result<f64> {
        self.clients.mismatch(&self.gc, &self.x_prev)
    }

    fn counters(&self) -> Counters {
        self.clients.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.clients.dim())?;
        self.gc = self.clients.skewed_rows(&self.x_prev, x_next, level)?;
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// DIANA: `Δ_c = Q(∇F_c(x) − h_c)`, `g = h + mean Δ_c`, then the shifts move
/// by `Δ/(ω+1)` on clients and server alike.
#[derive(Clone)]
pub struct Diana {
    clients: Clients,
    compressor: Arc<dyn UnbiasedCompressor>,
    hc: Vec<Vec<f64>>,
    h: Vec<f64>,
    g: Vec<f64>,
    x_prev: Vec<f64>,
}

impl Diana {
    pub fn new(problems: Vec<ProblemRef>, compressor: Arc<dyn UnbiasedCompressor>, value_bits: u64, index_bits: u64) -> Self {
        let d = problems[0].dim();
        let m = problems.len();
        Diana {
            clients: Clients {
                problems,
                value_bits,
                index_bits,
                counters: Counters::default(),
            },
            compressor,
            hc: vec![vec![0.0; d]; m],
            h: vec![0.0; d],
            g: vec![0.0; d],
            x_prev: vec![0.0; d],
        }
    }

    pub fn server_shift(&self) -> &[f64] {
        &self.h
    }

    pub fn client_shift(&self, c: usize) -> &[f64] {
        &self.hc[c]
    }

    /// Overrides client `c`'s shift and re-derives the server shift as the mean.
    pub fn set_shift(&mut self, c: usize, v: &[f64]) -> Result<()> {
        check_index(c, self.clients.m())?;
        check_len(v, self.clients.dim())?;
        self.hc[c].copy_from_slice(v);
        self.h = mean_rows(&self.hc);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], compress: &mut CompressFn<'_>) -> Result<&[f64]> {
        let d = self.clients.dim();
        check_len(x, d)?;
        let m = self.clients.m();
        let step = 1.0 / (self.compressor.omega() + 1.0);
        let mut grad = vec![0.0; d];
        let mut agg = vec![0.0; d];
        for c in 0..m {
            self.clients.grad(c, x, &mut grad)?;
            let diff: Vec<f64> = grad.iter().zip(&self.hc[c]).map(|(a, b)| a - b).collect();
            let msg = compress(c, &diff);
            msg.add_to(step, &mut self.hc[c]);
            msg.add_to(1.0 / m as f64, &mut agg);
            self.clients.send(&msg);
        }
        for j in 0..d {
            self.g[j] = self.h[j] + agg[j];
            self.h[j] += step * agg[j];
        }
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Diana {
    fn method(&self) -> Method {
        Method::Diana
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.clients.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.hc = self.clients.init(x0)?;
        self.h = mean_rows(&self.hc);
        self.g = self.h.clone();
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let comp = self.compressor.clone();
        self.step_with(x, &mut |_, v| comp.compress(v, rng))
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.clients.dim())?;
        check_len(g, self.clients.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    /// `(1/m) Σ ‖∇F_c(x^t) − h_c‖²` with the shifts after the update.
    fn sigma_sq(&self) -> Result<f64> {
        self.clients.mismatch(&self.hc, &self.x_prev)
    }

    fn counters(&self) -> Counters {
        self.clients.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.clients.dim())?;
        self.hc = self.clients.skewed_rows(&self.x_prev, x_next, level)?;
        self.h = mean_rows(&self.hc);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// DASHA with momentum `a = 1/(2ω+1)`:
/// `Δ_c = Q(∇F_c(x) − ∇F_c(x_prev) − a(g_c − ∇F_c(x_prev)))`, `g_c += Δ_c`,
/// `g += mean Δ_c`. After init no client ever sends an uncompressed vector.
#[derive(Clone)]
pub struct Dasha {
    clients: Clients,
    compressor: Arc<dyn UnbiasedCompressor>,
    gc: Vec<Vec<f64>>,
    /// `∇F_c(x_prev)`, kept by each client from the previous round.
    prev_grads: Vec<Vec<f64>>,
    g: Vec<f64>,
    x_prev: Vec<f64>,
}

impl Dasha {
    pub fn new(problems: Vec<ProblemRef>, compressor: Arc<dyn UnbiasedCompressor>, value_bits: u64, index_bits: u64) -> Self {
        let d = problems[0].dim();
        let m = problems.len();
        Dasha {
            clients: Clients {
                problems,
                value_bits,
                index_bits,
                counters: Counters::default(),
            },
            compressor,
            gc: vec![vec![0.0; d]; m],
            prev_grads: vec![vec![0.0; d]; m],
            g: vec![0.0; d],
            x_prev: vec![0.0; d],
        }
    }

    pub fn client_estimate(&self, c: usize) -> &[f64] {
        &self.gc[c]
    }

    pub fn set_client_estimate(&mut self, c: usize, v: &[f64]) -> Result<()> {
        check_index(c, self.clients.m())?;
        check_len(v, self.clients.dim())?;
        self.gc[c].copy_from_slice(v);
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], compress: &mut CompressFn<'_>) -> Result<&[f64]> {
        let d = self.clients.dim();
        check_len(x, d)?;
        let m = self.clients.m();
        let a = 1.0 / (2.0 * self.compressor.omega() + 1.0);
        let mut agg = vec![0.0; d];
        for c in 0..m {
            let mut grad = vec![0.0; d];
            self.clients.grad(c, x, &mut grad)?;
            let prev = &self.prev_grads[c];
            let gc = &self.gc[c];
            let z: Vec<f64> = (0..d).map(|j| grad[j] - prev[j] - a * (gc[j] - prev[j])).collect();
            let msg = compress(c, &z);
            msg.add_to(1.0, &mut self.gc[c]);
            msg.add_to(1.0, &mut agg);
            self.clients.send(&msg);
            self.prev_grads[c] = grad;
        }
        for (g, s) in self.g.iter_mut().zip(&agg) {
            *g += s / m as f64;
        }
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Dasha {
    fn method(&self) -> Method {
        Method::Dasha
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.clients.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.gc = self.clients.init(x0)?;
        self.prev_grads = self.gc.clone();
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let comp = self.compressor.clone();
        self.step_with(x, &mut |_, v| comp.compress(v, rng))
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.clients.dim())?;
        check_len(g, self.clients.dim())?;
        self.x_prev.copy_from_slice(x);
        self.prev_grads = self.clients.grads_uncounted(x)?;
        self.g.copy_from_slice(g);
        Ok(())
    }

    /// `(1/m) Σ ‖g_c − ∇F_c(x^t)‖²`
    fn sigma_sq(&self) -> Result<f64> {
        self.clients.mismatch(&self.gc, &self.x_prev)
    }

    fn counters(&self) -> Counters {
        self.clients.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.clients.dim())?;
        self.gc = self.clients.skewed_rows(&self.x_prev, x_next, level)?;
        self.g = mean_rows(&self.gc);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}
