//! LibSVM sparse text format: parsing, label normalization and a
//! deterministic synthetic stand-in with the same shape as `a9a`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    /// Zero-based feature indices, strictly increasing.
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&j, &v)| v * x[j as usize])
            .sum()
    }

    /// `out += scale * row`
    pub fn axpy(&self, scale: f64, out: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            out[j as usize] += scale * v;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<SparseRow>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<SparseRow>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        for row in &rows {
            if let Some(&last) = row.indices.last() {
                if last as usize >= dim {
                    return Err(Error::OutOfRange {
                        index: last as usize,
                        len: dim,
                    });
                }
            }
        }
        Ok(Dataset { rows, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn dense_row(&self, i: usize) -> Result<Vec<f64>> {
        let row = self.rows.get(i).ok_or(Error::OutOfRange {
            index: i,
            len: self.rows.len(),
        })?;
        let mut out = vec![0.0; self.dim];
        row.axpy(1.0, &mut out);
        Ok(out)
    }

    /// Keeps the first `n` rows; the dimension is left unchanged.
    pub fn truncate(&mut self, n: usize) {
        self.rows.truncate(n);
        self.labels.truncate(n);
    }

    pub fn to_libsvm(&self) -> String {
        let mut s = String::new();
        for (row, &y) in self.rows.iter().zip(&self.labels) {
            s.push_str(if y > 0.0 { "+1" } else { "-1" });
            for (&j, &v) in row.indices.iter().zip(&row.values) {
                // `{}` on f64 is the shortest representation that round-trips.
                let _ = write!(s, " {}:{}", j + 1, v);
            }
            s.push('\n');
        }
        s
    }
}

/// Parses LibSVM text. `dim` forces the feature dimension; it must be at
/// least the largest index present.
pub fn parse_libsvm<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad label `{label_tok}`"),
        })?;
        if !label.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("non-finite label `{label_tok}`"),
            });
        }

        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("expected index:value, got `{tok}`"),
            })?;
            let idx: usize = i.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature index `{i}`"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: "feature indices are 1-based".into(),
                });
            }
            let val: f64 = v.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad feature value `{v}`"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite feature value `{v}`"),
                });
            }
            if let Some(&prev) = indices.last() {
                if idx - 1 <= prev as usize {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("feature indices not increasing at `{tok}`"),
                    });
                }
            }
            max_index = max_index.max(idx);
            indices.push((idx - 1) as u32);
            values.push(val);
        }
        rows.push(SparseRow { indices, values });
        raw_labels.push(label);
    }

    let dim = match dim {
        Some(d) if d < max_index => {
            return Err(Error::invalid(format!(
                "forced dimension {d} is smaller than the largest feature index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    let labels = normalize_labels(&raw_labels);
    Dataset::new(rows, labels, dim)
}

/// Maps raw labels to {-1, +1}. Labels already in that set are kept, a
/// {0, 1} encoding maps 0 to -1, and otherwise the largest label becomes +1
/// and every other label -1.
pub fn normalize_labels(raw: &[f64]) -> Vec<f64> {
    let is_pm = raw.iter().all(|&y| y == 1.0 || y == -1.0);
    if is_pm {
        return raw.to_vec();
    }
    let is_01 = raw.iter().all(|&y| y == 0.0 || y == 1.0);
    if is_01 {
        return raw.iter().map(|&y| if y == 1.0 { 1.0 } else { -1.0 }).collect();
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|&y| if y == max { 1.0 } else { -1.0 }).collect()
}

/// Loads a LibSVM file, transparently decompressing `.gz`. `max_rows` keeps
/// only the first rows; the dimension is computed over the whole file unless
/// forced, so subsets of one file share a dimension.
pub fn load_libsvm(path: &Path, dim: Option<usize>, max_rows: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut ds = parse_libsvm(BufReader::new(reader), dim)?;
    if let Some(n) = max_rows {
        ds.truncate(n);
    }
    Ok(ds)
}

/// Category counts of the 14 one-hot encoded attributes of `a9a`.
pub const A9A_GROUPS: [usize; 14] = [5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 2, 2, 5, 41];
pub const A9A_DIM: usize = 123;

/// Deterministic binary dataset with the shape of `a9a`: 123 binary features
/// in 14 one-hot groups (about 14 non-zeros per row) and labels drawn from a
/// noisy logistic model with roughly a quarter positives.
pub fn synthetic_a9a(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    // Skewed category frequencies and a fixed planted weight vector.
    let mut group_weights = Vec::with_capacity(A9A_GROUPS.len());
    for &size in &A9A_GROUPS {
        let w: Vec<f64> = (0..size).map(|k| 1.0 / (1.0 + k as f64).powf(1.2)).collect();
        group_weights.push(w);
    }
    let planted: Vec<f64> = (0..A9A_DIM).map(|_| rng.random_range(-1.5..1.5)).collect();

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut indices = Vec::with_capacity(A9A_GROUPS.len());
        let mut offset = 0usize;
        for (g, &size) in A9A_GROUPS.iter().enumerate() {
            // A small fraction of attributes is missing, as in the real data.
            if rng.random::<f64>() >= 0.02 {
                let w = &group_weights[g];
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = size - 1;
                for (k, &wk) in w.iter().enumerate() {
                    if u < wk {
                        pick = k;
                        break;
                    }
                    u -= wk;
                }
                indices.push((offset + pick) as u32);
            }
            offset += size;
        }
        let values = vec![1.0; indices.len()];
        let row = SparseRow { indices, values };
        let margin = row.dot(&planted) - 1.0;
        let p = 1.0 / (1.0 + (-margin).exp());
        labels.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        rows.push(row);
    }
    Dataset {
        rows,
        labels,
        dim: A9A_DIM,
    }
}
