//! Coordinate estimators built from partial derivatives: SEGA and JAGUAR.
//! Each step samples `b` distinct coordinates.

use super::{check_len, skewed, sq_dist, Counters, Estimator, Method};
use crate::error::{Error, Result};
use crate::problem::{check_index, ProblemRef};
use crate::rng::{sample_batch, SimRng};

fn check_coords(coords: &[usize], d: usize) -> Result<()> {
    if coords.is_empty() || coords.len() > d {
        return Err(Error::invalid(format!(
            "coordinate block of size {} outside [1, {d}]",
            coords.len()
        )));
    }
    for &j in coords {
        check_index(j, d)?;
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("coordinate block has repeated indices"));
    }
    Ok(())
}

/// SEGA: the sketch memory `h` is refreshed on `S` from `∂f(x_prev)` and
/// `g = (d/b) Σ_S (∂_i f(x) − h_i) e_i + h`.
#[derive(Clone)]
pub struct Sega {
    problem: ProblemRef,
    b: usize,
    h: Vec<f64>,
    g: Vec<f64>,
    x_prev: Vec<f64>,
    counters: Counters,
}

impl Sega {
    pub fn new(problem: ProblemRef, b: usize) -> Self {
        let d = problem.dim();
        Sega {
            problem,
            b,
            h: vec![0.0; d],
            g: vec![0.0; d],
            x_prev: vec![0.0; d],
            counters: Counters::default(),
        }
    }

    pub fn memory(&self) -> &[f64] {
        &self.h
    }

    pub fn set_memory(&mut self, h: &[f64]) -> Result<()> {
        check_len(h, self.problem.dim())?;
        self.h.copy_from_slice(h);
        Ok(())
    }

    pub fn step_with(&mut self, x: &[f64], coords: &[usize]) -> Result<&[f64]> {
        let d = self.problem.dim();
        check_len(x, d)?;
        check_coords(coords, d)?;
        for &j in coords {
            self.h[j] = self.problem.partial(j, &self.x_prev)?;
        }
        self.g.copy_from_slice(&self.h);
        let scale = d as f64 / coords.len() as f64;
        for &j in coords {
            self.g[j] = scale * (self.problem.partial(j, x)? - self.h[j]) + self.h[j];
        }
        self.counters.partial_calls += 2 * coords.len() as u64;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Sega {
    fn method(&self) -> Method {
        Method::Sega
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.problem.grad(x0, &mut self.h)?;
        self.counters.grad_calls += self.problem.n_components() as u64;
        self.g.copy_from_slice(&self.h);
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let coords = sample_batch(rng, self.problem.dim(), self.b, false);
        self.step_with(x, &coords)
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

    /// `‖h − ∇f(x^t)‖²` with the memory after the update.
    fn sigma_sq(&self) -> Result<f64> {
        let mut grad = vec![0.0; self.h.len()];
        self.problem.grad(&self.x_prev, &mut grad)?;
        Ok(sq_dist(&self.h, &grad))
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn skew_memory(&mut self, x_next: &[f64], level: f64) -> Result<()> {
        check_len(x_next, self.problem.dim())?;
        let (mut a, mut b) = (vec![0.0; x_next.len()], vec![0.0; x_next.len()]);
        self.problem.grad(&self.x_prev, &mut a)?;
        self.problem.grad(x_next, &mut b)?;
        self.h = skewed(&a, &b, level);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn Estimator> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// JAGUAR: overwrite the sampled coordinates of the previous estimate with
/// fresh partial derivatives.
#[derive(Clone)]
pub struct Jaguar {
    problem: ProblemRef,
    b: usize,
    g: Vec<f64>,
    x_prev: Vec<f64>,
    counters: Counters,
}

impl Jaguar {
    pub fn new(problem: ProblemRef, b: usize) -> Self {
        let d = problem.dim();
        Jaguar {
            problem,
            b,
            g: vec![0.0; d],
            x_prev: vec![0.0; d],
            counters: Counters::default(),
        }
    }

    pub fn step_with(&mut self, x: &[f64], coords: &[usize]) -> Result<&[f64]> {
        let d = self.problem.dim();
        check_len(x, d)?;
        check_coords(coords, d)?;
        for &j in coords {
            self.g[j] = self.problem.partial(j, x)?;
        }
        self.counters.partial_calls += coords.len() as u64;
        self.x_prev.copy_from_slice(x);
        Ok(&self.g)
    }
}

impl Estimator for Jaguar {
    fn method(&self) -> Method {
        Method::Jaguar
    }

    fn init(&mut self, x0: &[f64]) -> Result<()> {
        check_len(x0, self.problem.dim())?;
        self.x_prev.copy_from_slice(x0);
        self.problem.grad(x0, &mut self.g)?;
        self.counters.grad_calls += self.problem.n_components() as u64;
        Ok(())
    }

    fn step(&mut self, x: &[f64], rng: &mut SimRng) -> Result<&[f64]> {
        let coords = sample_batch(rng, self.problem.dim(), self.b, false);
        self.step_with(x, &coords)
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
