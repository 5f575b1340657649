//! Discrete probability measures `α = Σ_i α_i δ_{x_i}` on `R^D`.
//!
//! Atoms with zero weight are dropped at construction and the remaining
//! weights are renormalized to unit mass, so every stored weight has a finite
//! logarithm.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weighted point cloud with strictly positive weights summing to one.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    positions: Vec<f64>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    weights: Vec<f64>,
    positions: Vec<Vec<f64>>,
}

impl DiscreteMeasure {
    /// Builds a measure from a weight vector and one position row per atom.
    pub fn from_arrays(weights: &[f64], positions: &[Vec<f64>]) -> Result<Self> {
        if weights.len() != positions.len() {
            return Err(Error::invalid(format!(
                "{} weights but {} position rows",
                weights.len(),
                positions.len()
            )));
        }
        let dim = positions.first().map_or(0, Vec::len);
        if let Some((i, row)) = positions.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::invalid(format!(
                "position row {i} has {} coordinates, expected {dim}",
                row.len()
            )));
        }
        let flat: Vec<f64> = positions.iter().flatten().copied().collect();
        Self::from_flat(weights, &flat, dim)
    }

    /// Builds a measure from weights and a row-major `N×D` coordinate buffer.
    pub fn from_flat(weights: &[f64], positions: &[f64], dim: usize) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::degenerate("no atoms"));
        }
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if positions.len() != weights.len() * dim {
            return Err(Error::invalid(format!(
                "expected {}x{dim} coordinates, got {}",
                weights.len(),
                positions.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("non-finite weight {w}")));
        }
        if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(Error::invalid(format!("negative weight {w}")));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }

        let mut kept_w = Vec::with_capacity(weights.len());
        let mut kept_x = Vec::with_capacity(positions.len());
        for (w, row) in weights.iter().zip(positions.chunks_exact(dim)) {
            if *w > 0.0 {
                kept_w.push(*w);
                kept_x.extend_from_slice(row);
            }
        }
        if kept_w.is_empty() {
            return Err(Error::degenerate("all weights are zero"));
        }
        let total: f64 = kept_w.iter().sum();
        if !total.is_finite() {
            return Err(Error::invalid("weights overflow when summed"));
        }
        // Already-normalized input is kept verbatim so save/load is exact.
        if (total - 1.0).abs() > 1e-13 {
            for w in &mut kept_w {
                *w /= total;
            }
        }
        let log_weights = kept_w.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights: kept_w,
            log_weights,
            positions: kept_x,
            dim,
        })
    }

    /// `n` atoms of weight `1/n` at the given row-major positions.
    pub fn uniform(positions: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || positions.len() % dim != 0 {
            return Err(Error::invalid("position buffer is not a multiple of dim"));
        }
        let n = positions.len() / dim;
        Self::from_flat(&vec![1.0; n], positions, dim)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Row-major `N×D` coordinates.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks_exact(self.dim)
    }

    /// True when every weight equals `1/N` to within `1e-12`.
    pub fn has_equal_weights(&self) -> bool {
        let target = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - target).abs() <= 1e-12)
    }

    /// Same weights, new positions.
    pub fn with_positions(&self, positions: Vec<f64>) -> Result<Self> {
        if positions.len() != self.positions.len() {
            return Err(Error::invalid("position buffer has the wrong length"));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(Self {
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            positions,
            dim: self.dim,
        })
    }

    /// Loads a measure from `.json` or CSV (any other extension).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_json(path) {
            Self::load_json(path)
        } else {
            Self::load_csv(path)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_json(path) {
            self.save_json(path)
        } else {
            self.save_csv(path)
        }
    }

    /// Reads rows `w,x1,...,xD`. A first row that does not parse as numbers
    /// is treated as a header.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);

        let mut weights = Vec::new();
        let mut coords = Vec::new();
        let mut width: Option<usize> = None;
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::FormatError(e.to_string()))?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if line == 0 => continue,
                Err(e) => {
                    return Err(Error::FormatError(format!("row {}: {e}", line + 1)));
                }
            };
            if values.len() < 2 {
                return Err(Error::FormatError(format!(
                    "row {}: need a weight and at least one coordinate",
                    line + 1
                )));
            }
            match width {
                None => width = Some(values.len()),
                Some(w) if w != values.len() => {
                    return Err(Error::FormatError(format!(
                        "row {} has {} columns, expected {w}",
                        line + 1,
                        values.len()
                    )));
                }
                Some(_) => {}
            }
            weights.push(values[0]);
            coords.extend_from_slice(&values[1..]);
        }
        let width = width.ok_or_else(|| Error::FormatError("no data rows".into()))?;
        Self::from_flat(&weights, &coords, width - 1)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Writes one `w,x1,...,xD` row per atom using shortest round-trip
    /// formatting, so reading the file back is exact.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        for (w, x) in self.weights.iter().zip(self.points()) {
            write!(out, "{w:?}")?;
            for c in x {
                write!(out, ",{c:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: MeasureJson =
            serde_json::from_str(&text).map_err(|e| Error::FormatError(e.to_string()))?;
        Self::from_arrays(&raw.weights, &raw.positions)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = MeasureJson {
            weights: self.weights.clone(),
            positions: self.points().map(<[f64]>::to_vec).collect(),
        };
        let text = serde_json::to_string(&raw).map_err(|e| Error::FormatError(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// `n` equal-weight atoms drawn i.i.d. uniformly on `[lo, hi)`.
pub fn sample_uniform_interval(n: usize, lo: f64, hi: f64, seed: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::degenerate("cannot sample zero atoms"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("empty interval [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    DiscreteMeasure::uniform(&xs, 1)
}

/// `n` equal-weight atoms drawn i.i.d. uniformly on the unit square.
pub fn sample_unit_square(n: usize, seed: u64) -> Result<DiscreteMeasure> {
    sample_unit_cube(n, 2, seed)
}

/// `n` equal-weight atoms drawn i.i.d. uniformly on `[0,1)^dim`.
pub fn sample_unit_cube(n: usize, dim: usize, seed: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::degenerate("cannot sample zero atoms"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>()).collect();
    DiscreteMeasure::uniform(&xs, dim)
}
