//! Single-node finite-sum estimators: L-SVRG, SAGA, PAGE, ZeroSARAH and plain
//! minibatch SGD.

use rand::Rng;

use super::{check_len, skewed, sq_dist, Counters, Estimator, Method};
use crate::error::{Error, Result};
use crate::problem::{check_index, ProblemRef};
use crate::rng::{sample_batch, SimRng};

fn full_grad(p: &ProblemRef, x: &[f64], out: &mut [f64], counters: &mut Counters) -> Result<()> {
    p.grad(x, out)?;
    counters.grad_calls += p.n_components() as u64;
    Ok(())
}

fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for &i in batch {
        check_index(i, n)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Loopless SVRG: `g = ∇f(w) + (1/b) Σ_S (∇f_i(x) − ∇f_i(w))`, with the anchor
/// `w` moved to the previous point with probability `p` before sampling.
#[derive(Clone)]
pub struct LSvrg {
    problem: ProblemRef,
    b: usize,
    p: f64,
    replacement: bool,
    x_prev: Vec<f64>,
    g: Vec<f64>,
    anchor: Vec<f64>,
    anchor_grad: Vec<f64>,
    counters: Counters,
    gi: Vec<f64>,
    gw: Vec<f64>,
}

impl LSvrg {
    pub fn new(problem: ProblemRef, b: usize, p: f64, replacement: bool) -> Self {
        let d = problem.dim();
        LSvrg {
            problem,
            b,
            p,
            replacement,
            x_prev: vec![0.0; d],
            g: vec![0.0; d],
            anchor: vec![0.0; d],
            anchor_grad: vec![0.0; d],
            counters: Counters::default(),
            gi: vec![0.0; d],
            gw: vec![0.0; d],
        }
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// Moves the anchor without charging oracle calls (test setup).
    pub fn set_anchor(&mut self, w: &[f64]) -> Result<()> {
        check_len(w, self.problem.dim())?;
        self.anchor.copy_from_slice(w);
        self.problem.grad(w, &mut self.anchor_grad)
    }

    /// Step with the refresh coin and the batch supplied by the caller.
    pub fn step_with(&mut self, x: &[f64], refresh: bool, batch: &[usize]) -> Result<&[f64]> {
        check_len(x, self.problem.dim())?;
        check_batch(batch, self.problem.n_components())?;
        if refresh {
            self.anchor.copy_from_slice(&self.x_prev);
            full_grad(&self.problem, &self.anchor, &mut self.anchor_grad, &mut self.counters)?;
        }
        self.g.copy_from_slice(&self.anchor_grad);
        let w = 1.0 / batch.len() as f64;
        for &i in batch {
            self.problem.component_grad(i, x, &mut self.gi)?;
            self.problem.component_grad(i, &self.anchor, &mut self.gw)?;
            for j in 0..self.g.len() {
                self.g[j] += w * (self.gi[j] - self.gw[j]);
            }
        }
        self.counters.grad_calls += 2 * batch.len() as u64;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for LSvrg {
    fn method(&self) -> Method {
        Method::LSvrg
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.anchor.copy_from_slice(x0);
        full_grad(&self.problem, x0, &mut self.anchor_grad, &mut self.counters)?;
        self.g.copy_from_slice(&self.anchor_grad);
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let refresh = rng.random_bool(self.p);
        let batch = sample_batch(rng, self.problem.n_components(), self.b, self.replacement);
        self.step_with(x, refresh, &batch)
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.problem.dim())?;
        check_len(g, self.problem.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    /// `(1/n) Σ ‖∇f_i(w) − ∇f_i(x^t)‖²` for the anchor `w` used at step `t`.
    fn sigma_sq(&self) -> Result<f64> {
        let n = self.problem.n_components();
        let d = self.problem.dim();
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        let mut s = 0.0;
        for i in 0..n {
            self.problem.component_grad(i, &self.anchor, &mut a)?;
            self.problem.component_grad(i, &self.x_prev, &mut b)?;
            s += sq_dist(&a, &b);
        }
        Ok(s / n as f64)
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    /// The anchor is a point, so it is pushed away from `x_next` along the
    /// step direction: `w = x_prev + level·(x_prev − x_next)`.
    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.problem.dim())?;
        let w: Vec<f64> = self
            .x_prev
            .iter()
            .zip(x_next)
            .map(|(a, b)| a + level * (a - b))
            .collect();
        self.set_anchor(&w)
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Gradient table shared by SAGA and ZeroSARAH, with its running sum.
#[derive(Clone)]
struct Table {
    rows: Vec<Vec<f64>>,
    sum: Vec<f64>,
}

impl Table {
    fn empty(n: usize, d: usize) -> Self {
        Table {
            rows: vec![vec![0.0; d]; n],
            sum: vec![0.0; d],
        }
    }

    fn fill(&mut self, p: &ProblemRef, x: &[f64]) -> Result<()> {
        for (i, row) in self.rows.iter_mut().enumerate() {
            p.component_grad(i, x, row)?;
        }
        self.resum();
        Ok(())
    }

    fn resum(&mut self) {
        self.sum.fill(0.0);
        for row in &self.rows {
            for (s, v) in self.sum.iter_mut().zip(row) {
                *s += v;
            }
        }
    }

    fn set(&mut self, i: usize, y: &[f64]) {
        for j in 0..y.len() {
            self.sum[j] += y[j] - self.rows[i][j];
        }
        self.rows[i].copy_from_slice(y);
    }

    fn mean(&self, j: usize) -> f64 {
        self.sum[j] / self.rows.len() as f64
    }

    /// `(1/n) Σ ‖∇f_i(x) − y_i‖²`
    fn staleness(&self, p: &ProblemRef, x: &[f64]) -> Result<f64> {
        let mut gi = vec![0.0; x.len()];
        let mut s = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            p.component_grad(i, x, &mut gi)?;
            s += sq_dist(&gi, row);
        }
        Ok(s / self.rows.len() as f64)
    }

    fn skew(&mut self, p: &ProblemRef, x_prev: &[f64], x_next: &[f64], level: f64) -> Result<()> {
        let d = x_prev.len();
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        for i in 0..self.rows.len() {
            p.component_grad(i, x_prev, &mut a)?;
            p.component_grad(i, x_next, &mut b)?;
            self.rows[i] = skewed(&a, &b, level);
        }
        self.resum();
        Ok(())
    }
}

/// SAGA: `g = ȳ + (1/b) Σ_S (∇f_i(x) − y_i)`, then `y_i ← ∇f_i(x)` on `S`.
#[derive(Clone)]
pub struct Saga {
    problem: ProblemRef,
    b: usize,
    x_prev: Vec<f64>,
    g: Vec<f64>,
    table: Table,
    counters: Counters,
    fresh: Vec<(usize, Vec<f64>)>,
}

impl Saga {
    pub fn new(problem: ProblemRef, b: usize) -> Self {
        let (n, d) = (problem.n_components(), problem.dim());
        Saga {
            problem,
            b,
            x_prev: vec![0.0; d],
            g: vec![0.0; d],
            table: Table::empty(n, d),
            counters: Counters::default(),
            fresh: Vec::new(),
        }
    }

    pub fn table_row(&self, i: usize) -> &[f64] {
        &self.table.rows[i]
    }

    pub fn set_table_row(&mut self, i: usize, y: &[f64]) -> Result<()> {
        check_index(i, self.table.rows.len())?;
        check_len(y, self.problem.dim())?;
        self.table.set(i, y);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], batch: &[usize]) -> Result<&[f64]> {
        let d = self.problem.dim();
        check_len(x, d)?;
        check_batch(batch, self.problem.n_components())?;
        for j in 0..d {
            self.g[j] = self.table.mean(j);
        }
        let w = 1.0 / batch.len() as f64;
        self.fresh.clear();
        for &i in batch {
            let mut gi = vec![0.0; d];
            self.problem.component_grad(i, x, &mut gi)?;
            let yi = &self.table.rows[i];
            for j in 0..d {
                self.g[j] += w * (gi[j] - yi[j]);
            }
            self.fresh.push((i, gi));
        }
        for (i, gi) in std::mem::take(&mut self.fresh) {
            self.table.set(i, &gi);
        }
        self.counters.grad_calls += batch.len() as u64;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Saga {
    fn method(&self) -> Method {
        Method::Saga
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.table.fill(&self.problem, x0)?;
        self.counters.grad_calls += self.problem.n_components() as u64;
        self.problem.grad(x0, &mut self.g)
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let batch = sample_batch(rng, self.problem.n_components(), self.b, false);
        self.step_with(x, &batch)
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.problem.dim())?;
        check_len(g, self.problem.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    /// `(1/n) Σ ‖∇f_i(x^t) − y_i‖²` against the updated table.
    fn sigma_sq(&self) -> Result<f64> {
        self.table.staleness(&self.problem, &self.x_prev)
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.problem.dim())?;
        let x_prev = self.x_prev.clone();
        self.table.skew(&self.problem, &x_prev, x_next, level)
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// PAGE: a full gradient with probability `p`, otherwise the SARAH-style
/// recursive update `g + (1/b) Σ_S (∇f_i(x) − ∇f_i(x_prev))`.
#[derive(Clone)]
pub struct Page {
    problem: ProblemRef,
    b: usize,
    p: f64,
    replacement: bool,
    x_prev: Vec<f64>,
    g: Vec<f64>,
    counters: Counters,
    gi: Vec<f64>,
    gp: Vec<f64>,
}

impl Page {
    pub fn new(problem: ProblemRef, b: usize, p: f64, replacement: bool) -> Self {
        let d = problem.dim();
        Page {
            problem,
            b,
            p,
            replacement,
            x_prev: vec![0.0; d],
            g: vec![0.0; d],
            counters: Counters::default(),
            gi: vec![0.0; d],
            gp: vec![0.0; d],
        }
    }

    pub fn step_with(&mut self, x: &[f64], refresh: bool, batch: &[usize]) -> Result<&[f64]> {
        check_len(x, self.problem.dim())?;
        if refresh {
            full_grad(&self.problem, x, &mut self.g, &mut self.counters)?;
        } else {
            check_batch(batch, self.problem.n_components())?;
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                self.problem.component_grad(i, x, &mut self.gi)?;
                self.problem.component_grad(i, &self.x_prev, &mut self.gp)?;
                for j in 0..self.g.len() {
                    self.g[j] += w * (self.gi[j] - self.gp[j]);
                }
            }
            self.counters.grad_calls += 2 * batch.len() as u64;
        }
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Page {
    fn method(&self) -> Method {
        Method::Page
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        full_grad(&self.problem, x0, &mut self.g, &mut self.counters)
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        if rng.random_bool(self.p) {
            self.step_with(x, true, &[])
        } else {
            let batch = sample_batch(rng, self.problem.n_components(), self.b, self.replacement);
            self.step_with(x, false, &batch)
        }
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.problem.dim())?;
        check_len(g, self.problem.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    fn sigma_sq(&self) -> Result<f64> {
        Ok(0.0)
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.problem.dim())?;
        let (mut a, mut b) = (vec![0.0; x_next.len()], vec![0.0; x_next.len()]);
        self.problem.grad(&self.x_prev, &mut a)?;
        self.problem.grad(x_next, &mut b)?;
        self.g = skewed(&a, &b, level);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// ZeroSARAH with `λ = b/(2n)`:
/// `g = (1/b) Σ_S (∇f_i(x) − ∇f_i(x_prev)) + (1−λ) g_prev
///      + λ ((1/b) Σ_S (∇f_i(x_prev) − y_i) + ȳ)`, then `y_i ← ∇f_i(x)` on `S`.
#[derive(Clone)]
pub struct ZeroSarah {
    problem: ProblemRef,
    b: usize,
    x_prev: Vec<f64>,
    g: Vec<f64>,
    table: Table,
    counters: Counters,
}

impl ZeroSarah {
    pub fn new(problem: ProblemRef, b: usize) -> Self {
        let (n, d) = (problem.n_components(), problem.dim());
        ZeroSarah {
            problem,
            b,
            x_prev: vec![0.0; d],
            g: vec![0.0; d],
            table: Table::empty(n, d),
            counters: Counters::default(),
        }
    }

    pub fn set_table_row(&mut self, i: usize, y: &[f64]) -> Result<()> {
        check_index(i, self.table.rows.len())?;
        check_len(y, self.problem.dim())?;
        self.table.set(i, y);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], batch: &[usize]) -> Result<&[f64]> {
        let n = self.problem.n_components();
        let d = self.problem.dim();
        check_len(x, d)?;
        check_batch(batch, n)?;
        let lambda = batch.len() as f64 / (2.0 * n as f64);
        let w = 1.0 / batch.len() as f64;
        let mut next = vec![0.0; d];
        for j in 0..d {
            next[j] = (1.0 - lambda) * self.g[j] + lambda * self.table.mean(j);
        }
        let mut fresh = Vec::with_capacity(batch.len());
        let mut gp = vec![0.0; d];
        for &i in batch {
            let mut gi = vec![0.0; d];
            self.problem.component_grad(i, x, &mut gi)?;
            self.problem.component_grad(i, &self.x_prev, &mut gp)?;
            let yi = &self.table.rows[i];
            for j in 0..d {
                next[j] += w * (gi[j] - gp[j]) + lambda * w * (gp[j] - yi[j]);
            }
            fresh.push((i, gi));
        }
        for (i, gi) in fresh {
            self.table.set(i, &gi);
        }
        self.counters.grad_calls += 2 * batch.len() as u64;
        self.g = next;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for ZeroSarah {
    fn method(&self) -> Method {
        Method::ZeroSarah
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.table.fill(&self.problem, x0)?;
        self.counters.grad_calls += self.problem.n_components() as u64;
        self.problem.grad(x0, &mut self.g)
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let batch = sample_batch(rng, self.problem.n_components(), self.b, false);
        self.step_with(x, &batch)
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.problem.dim())?;
        check_len(g, self.problem.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    fn sigma_sq(&self) -> Result<f64> {
        self.table.staleness(&self.problem, &self.x_prev)
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.problem.dim())?;
        let x_prev = self.x_prev.clone();
        self.table.skew(&self.problem, &x_prev, x_next, level)?;
        let (mut a, mut b) = (vec![0.0; x_next.len()], vec![0.0; x_next.len()]);
        self.problem.grad(&x_prev, &mut a)?;
        self.problem.grad(x_next, &mut b)?;
        self.g = skewed(&a, &b, level);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Plain minibatch gradient `(1/b) Σ_S ∇f_i(x)`.
#[derive(Clone)]
pub struct Sgd {
    problem: ProblemRef,
    b: usize,
    replacement: bool,
    x_prev: Vec<f64>,
    g: Vec<f64>,
    counters: Counters,
    gi: Vec<f64>,
}

impl Sgd {
    pub fn new(problem: ProblemRef, b: usize, replacement: bool) -> Self {
        let d = problem.dim();
        Sgd {
            problem,
            b,
            replacement,
            x_prev: vec![0.0; d],
            g: vec![0.0; d],
            counters: Counters::default(),
            gi: vec![0.0; d],
        }
    }

    pub fn step_with(&mut self, x: &[f64], batch: &[usize]) -> Result<&[f64]> {
        check_len(x, self.problem.dim())?;
        check_batch(batch, self.problem.n_components())?;
        self.g.fill(0.0);
        let w = 1.0 / batch.len() as f64;
        for &i in batch {
            self.problem.component_grad(i, x, &mut self.gi)?;
            for j in 0..self.g.len() {
                self.g[j] += w * self.gi[j];
            }
        }
        self.counters.grad_calls += batch.len() as u64;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Sgd {
    fn method(&self) -> Method {
        Method::Sgd
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        full_grad(&self.problem, x0, &mut self.g, &mut self.counters)
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let batch = sample_batch(rng, self.problem.n_components(), self.b, self.replacement);
        self.step_with(x, &batch)
    }

    fn estimate(&self) -> &[f64] {
        &self.g
    }

    fn prev_point(&self) -> &[f64] {
        &self.x_prev
    }

    fn set_prev(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        check_len(x, self.problem.dim())?;
        check_len(g, self.problem.dim())?;
        self.x_prev.copy_from_slice(x);
        self.g.copy_from_slice(g);
        Ok(())
    }

    fn sigma_sq(&self) -> Result<f64> {
        Ok(0.0)
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn skew_memory(&mut self, _x_next: &[f64], _level: f64) -> Result<()> {
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}
