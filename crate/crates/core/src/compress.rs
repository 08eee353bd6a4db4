//! Communication compressors: contractive (biased) and unbiased operators,
//! their contract checkers and wire-cost accounting.

use std::fmt;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, SimRng};

/// Sparse message with the dimension of the vector it came from. A dense
/// message carries every coordinate and no indices on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
    dense: bool,
}

impl CompressedVector {
    pub fn sparse(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate index {}", w[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i >= dim {
                return Err(Error::OutOfRange { index: i, len: dim });
            }
        }
        Ok(CompressedVector {
            dim,
            entries,
            dense: false,
        })
    }

    pub fn dense(x: &[f64]) -> Self {
        CompressedVector {
            dim: x.len(),
            entries: x.iter().copied().enumerate().collect(),
            dense: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_dense(&self) -> bool {
        self.dense
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_to(1.0, &mut out);
        out
    }

    /// `out += scale * self`
    pub fn add_to(&self, scale: f64, out: &mut [f64]) {
        for &(i, v) in &self.entries {
            out[i] += scale * v;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum()
    }
}

impl fmt::Display for CompressedVector {
    /// Space-separated `idx:val` pairs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (i, v)) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}:{v}")?;
        }
        Ok(())
    }
}

pub fn bits_cost(v: &CompressedVector, value_bits: u64, index_bits: u64) -> u64 {
    if v.dense {
        v.dim as u64 * value_bits
    } else {
        v.entries.len() as u64 * (value_bits + index_bits)
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::invalid(format!("k = {k} outside [1, {d}]")));
    }
    Ok(())
}

/// Largest `k` magnitudes; ties go to the lowest index.
pub fn top_k(x: &[f64], k: usize) -> Result<CompressedVector> {
    check_k(k, x.len())?;
    let mut order: Vec<usize> = (0..x.len()).collect();
    // Stable sort keeps lower indices first among equal magnitudes.
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()));
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(CompressedVector {
        dim: x.len(),
        entries: keep.into_iter().map(|i| (i, x[i])).collect(),
        dense: false,
    })
}

/// Keeps the coordinates in `subset` scaled by `d/|subset|`.
pub fn rand_k_with_subset(x: &[f64], subset: &[usize]) -> Result<CompressedVector> {
    let d = x.len();
    check_k(subset.len(), d)?;
    let scale = d as f64 / subset.len() as f64;
    CompressedVector::sparse(d, subset.iter().map(|&i| (i, scale * x[i])).collect())
}

pub fn rand_k(x: &[f64], k: usize, rng: &mut SimRng) -> Result<CompressedVector> {
    check_k(k, x.len())?;
    let subset = index::sample(rng, x.len(), k).into_vec();
    rand_k_with_subset(x, &subset)
}

pub trait BiasedCompressor: Send + Sync {
    fn name(&self) -> String;
    fn delta(&self) -> f64;
    fn is_deterministic(&self) -> bool;
    fn compress(&self, x: &[f64], rng: &mut SimRng) -> CompressedVector;
}

pub trait UnbiasedCompressor: Send + Sync {
    fn name(&self) -> String;
    fn omega(&self) -> f64;
    fn compress(&self, x: &[f64], rng: &mut SimRng) -> CompressedVector;
    /// Full output distribution `(probability, Q(x))`, when small enough to
    /// enumerate.
    fn outcomes(&self, _x: &[f64]) -> Option<Vec<(f64, CompressedVector)>> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Identity;

impl BiasedCompressor for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn delta(&self) -> f64 {
        1.0
    }
    fn is_deterministic(&self) -> bool {
        true
    }
    fn compress(&self, x: &[f64], _rng: &mut SimRng) -> CompressedVector {
        CompressedVector::dense(x)
    }
}

impl UnbiasedCompressor for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn omega(&self) -> f64 {
        1.0
    }
    fn compress(&self, x: &[f64], _rng: &mut SimRng) -> CompressedVector {
        CompressedVector::dense(x)
    }
    fn outcomes(&self, x: &[f64]) -> Option<Vec<(f64, CompressedVector)>> {
        Some(vec![(1.0, CompressedVector::dense(x))])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TopK {
    d: usize,
    k: usize,
}

impl TopK {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        check_k(k, d)?;
        Ok(TopK { d, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl BiasedCompressor for TopK {
    fn name(&self) -> String {
        format!("top{}", self.k)
    }
    fn delta(&self) -> f64 {
        self.d as f64 / self.k as f64
    }
    fn is_deterministic(&self) -> bool {
        true
    }
    fn compress(&self, x: &[f64], _rng: &mut SimRng) -> CompressedVector {
        assert_eq!(x.len(), self.d, "TopK input dimension");
        top_k(x, self.k).expect("k validated at construction")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandK {
    d: usize,
    k: usize,
}

/// Enumeration is offered up to this many subsets.
const MAX_OUTCOMES: u64 = 1 << 16;

impl RandK {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        check_k(k, d)?;
        Ok(RandK { d, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut c: u64 = 1;
    for i in 0..k {
        c = c * (n - i) as u64 / (i + 1) as u64;
    }
    c
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

impl UnbiasedCompressor for RandK {
    fn name(&self) -> String {
        format!("rand{}", self.k)
    }
    fn omega(&self) -> f64 {
        self.d as f64 / self.k as f64
    }
    fn compress(&self, x: &[f64], rng: &mut SimRng) -> CompressedVector {
        assert_eq!(x.len(), self.d, "RandK input dimension");
        rand_k(x, self.k, rng).expect("k validated at construction")
    }
    fn outcomes(&self, x: &[f64]) -> Option<Vec<(f64, CompressedVector)>> {
        let count = binomial(self.d, self.k);
        if count > MAX_OUTCOMES {
            return None;
        }
        let p = 1.0 / count as f64;
        Some(
            subsets(self.d, self.k)
                .into_iter()
                .map(|s| (p, rand_k_with_subset(x, &s).expect("valid subset")))
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// Contract checkers

#[derive(Debug, Clone, PartialEq)]
pub struct ContractReport {
    pub passed: bool,
    /// Worst `observed − allowed` over all trials.
    pub max_margin: f64,
    /// Standard error attached to the worst margin (0 for exact checks).
    pub stderr: f64,
    pub exact: bool,
    pub trials: usize,
}

const DETERMINISTIC_TOL: f64 = 1e-12;
const INNER_SAMPLES: usize = 400;

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn mean_se(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

pub fn check_biased_contract(c: &dyn BiasedCompressor, d: usize, trials: usize, rng: &mut SimRng) -> ContractReport {
    let bound = 1.0 - 1.0 / c.delta();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_se = 0.0;
    let mut passed = true;
    for _ in 0..trials.max(1) {
        let x = normal_vec(rng, d);
        let nx = sq(&x);
        let ratio = |cx: &CompressedVector| {
            let diff: Vec<f64> = cx.to_dense().iter().zip(&x).map(|(a, b)| a - b).collect();
            sq(&diff) / nx
        };
        if c.is_deterministic() {
            let margin = ratio(&c.compress(&x, rng)) - bound;
            if margin > worst {
                worst = margin;
                worst_se = 0.0;
            }
            passed &= margin <= DETERMINISTIC_TOL;
        } else {
            let samples: Vec<f64> = (0..INNER_SAMPLES).map(|_| ratio(&c.compress(&x, rng))).collect();
            let (mean, se) = mean_se(&samples);
            let margin = mean - bound;
            if margin > worst {
                worst = margin;
                worst_se = se;
            }
            passed &= margin <= 3.0 * se + DETERMINISTIC_TOL;
        }
    }
    ContractReport {
        passed,
        max_margin: worst,
        stderr: worst_se,
        exact: c.is_deterministic(),
        trials: trials.max(1),
    }
}

/// Enumeration is used whenever the operator exposes its distribution and
/// `d ≤ 8`; otherwise `E Q(x)` and `E‖Q(x)‖²` are estimated by sampling.
pub fn check_unbiased_contract(q: &dyn UnbiasedCompressor, d: usize, trials: usize, rng: &mut SimRng) -> ContractReport {
    let omega = q.omega();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_se = 0.0;
    let mut passed = true;
    let mut exact = true;
    for _ in 0..trials.max(1) {
        let x = normal_vec(rng, d);
        let nx = sq(&x);
        let enumerated = if d <= 8 { q.outcomes(&x) } else { None };
        match enumerated {
            Some(outs) => {
                let mut mean = vec![0.0; d];
                let mut second = 0.0;
                for (p, v) in &outs {
                    v.add_to(*p, &mut mean);
                    second += p * v.sq_norm();
                }
                let bias: Vec<f64> = mean.iter().zip(&x).map(|(a, b)| a - b).collect();
                let bias_margin = sq(&bias).sqrt() / nx.sqrt() - DETERMINISTIC_TOL;
                let moment_margin = second / nx - omega;
                let margin = bias_margin.max(moment_margin);
                if margin > worst {
                    worst = margin;
                    worst_se = 0.0;
                }
                passed &= bias_margin <= 0.0 && moment_margin <= DETERMINISTIC_TOL;
            }
            None => {
                exact = false;
                let m = INNER_SAMPLES;
                let mut sum = vec![0.0; d];
                let mut sum_sq = vec![0.0; d];
                let mut ratios = Vec::with_capacity(m);
                for _ in 0..m {
                    let v = q.compress(&x, rng).to_dense();
                    for j in 0..d {
                        sum[j] += v[j];
                        sum_sq[j] += v[j] * v[j];
                    }
                    ratios.push(sq(&v) / nx);
                }
                let mf = m as f64;
                let mut bias_sq = 0.0;
                let mut var_of_mean = 0.0;
                for j in 0..d {
                    let mean = sum[j] / mf;
                    bias_sq += (mean - x[j]).powi(2);
                    var_of_mean += (sum_sq[j] / mf - mean * mean).max(0.0) / (mf - 1.0);
                }
                let bias_se = var_of_mean.sqrt();
                let (ratio, ratio_se) = mean_se(&ratios);
                let bias_ok = bias_sq.sqrt() <= 3.0 * bias_se + DETERMINISTIC_TOL;
                let moment_margin = ratio - omega;
                let moment_ok = moment_margin <= 3.0 * ratio_se + DETERMINISTIC_TOL;
                let bias_margin = (bias_sq.sqrt() - 3.0 * bias_se) / nx.sqrt();
                let margin = bias_margin.max(moment_margin);
                if margin > worst {
                    worst = margin;
                    worst_se = ratio_se;
                }
                passed &= bias_ok && moment_ok;
            }
        }
    }
    ContractReport {
        passed,
        max_margin: worst,
        stderr: worst_se,
        exact,
        trials: trials.max(1),
    }
}
