//! Pairwise reductions between a set of source rows and a set of targets.
//!
//! Two reduction families cover everything the solvers need:
//!
//! * log-sum-exp rows `LSE_j [ logw_j + (pot_j − C(x_i, y_j)) / ε ]`, optionally
//!   accompanied by softmax-weighted averages of a per-pair payload (used for
//!   position gradients);
//! * plain weighted kernel sums `Σ_ij a_i b_j k(x_i, y_j)`.
//!
//! In [`ReductionMode::Streaming`] the terms are recomputed on the fly, tile by
//! tile, and no `N×M` buffer is ever allocated. Each row first sweeps all tiles
//! with a running maximum, then sweeps them again accumulating
//! `exp(term − max)`. [`ReductionMode::Dense`] materializes the term matrix and
//! runs the textbook max-then-sum reduction; both modes visit the targets of a
//! row in the same order and produce bit-identical results.
//!
//! Rows are distributed over the rayon pool in fixed blocks. The accumulation
//! order inside a row never depends on the number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostSpec, MmdKernelSpec};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;

/// Rows handled together by one task; their accumulators stay in cache while
/// a tile of targets is swept.
const ROW_BLOCK: usize = 16;

/// Largest term matrix the dense mode agrees to build.
pub const DENSE_LIMIT: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMode {
    Dense,
    #[default]
    Streaming,
}

/// Shape-independent engine settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: ReductionMode,
    pub tile_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: ReductionMode::Streaming,
            tile_size: 256,
        }
    }
}

impl EngineConfig {
    pub fn dense() -> Self {
        Self {
            mode: ReductionMode::Dense,
            ..Self::default()
        }
    }

    pub fn streaming(tile_size: usize) -> Self {
        Self {
            mode: ReductionMode::Streaming,
            tile_size,
        }
    }
}

/// A reduction over `n_rows` sources and `n_cols` targets, optionally repeated
/// over `batch` independent problems of the same shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionPlan {
    n_rows: usize,
    n_cols: usize,
    config: EngineConfig,
    batch: Option<usize>,
}

impl ReductionPlan {
    pub fn new(n_rows: usize, n_cols: usize, config: EngineConfig) -> Result<Self> {
        if n_cols == 0 {
            return Err(Error::degenerate("reduction over zero targets"));
        }
        if n_rows == 0 {
            return Err(Error::degenerate("reduction with zero output rows"));
        }
        if config.tile_size == 0 {
            return Err(Error::invalid("tile size must be at least 1"));
        }
        if config.mode == ReductionMode::Dense && n_rows.saturating_mul(n_cols) > DENSE_LIMIT {
            return Err(Error::TooLarge {
                rows: n_rows,
                cols: n_cols,
                limit: DENSE_LIMIT,
            });
        }
        Ok(Self {
            n_rows,
            n_cols,
            config,
            batch: None,
        })
    }

    pub fn with_batch(mut self, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        self.batch = Some(batch);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn mode(&self) -> ReductionMode {
        self.config.mode
    }

    pub fn tile_size(&self) -> usize {
        self.config.tile_size
    }

    pub fn batch(&self) -> Option<usize> {
        self.batch
    }

    /// Heap bytes the engine itself allocates for one call carrying a payload
    /// of `payload_width` values per row (outputs included, inputs excluded).
    pub fn scratch_bytes(&self, payload_width: usize) -> usize {
        let per_problem = {
            let out = self.n_rows * (1 + payload_width);
            let acc = rayon::current_num_threads() * ROW_BLOCK * (2 + payload_width);
            let dense = match self.config.mode {
                ReductionMode::Dense => self.n_rows * self.n_cols,
                ReductionMode::Streaming => 0,
            };
            (out + acc + dense) * std::mem::size_of::<f64>()
        };
        per_problem * self.batch.unwrap_or(1)
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.n_rows || cols != self.n_cols {
            return Err(Error::invalid(format!(
                "plan is {}x{}, inputs are {rows}x{cols}",
                self.n_rows, self.n_cols
            )));
        }
        Ok(())
    }
}

/// Inputs of one log-sum-exp reduction. Points are row-major with `dim`
/// coordinates each.
#[derive(Debug, Clone, Copy)]
pub struct LseProblem<'a> {
    pub logw: &'a [f64],
    pub pot: &'a [f64],
    pub targets: &'a [f64],
    pub sources: &'a [f64],
    pub dim: usize,
}

impl LseProblem<'_> {
    fn validate(&self) -> Result<(usize, usize)> {
        let m = self.logw.len();
        if m == 0 {
            return Err(Error::degenerate("reduction over zero targets"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if self.pot.len() != m || self.targets.len() != m * self.dim {
            return Err(Error::invalid("target arrays have inconsistent lengths"));
        }
        if self.sources.len() % self.dim != 0 {
            return Err(Error::invalid("source buffer is not a multiple of dim"));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.logw) && finite(self.pot) && finite(self.targets) && finite(self.sources)) {
            return Err(Error::invalid("non-finite reduction input"));
        }
        Ok((self.sources.len() / self.dim, m))
    }
}

/// Term generator for one LSE problem.
#[derive(Clone, Copy)]
pub(crate) struct LogTerms<'a> {
    pub(crate) problem: LseProblem<'a>,
    pub(crate) cost: CostSpec,
}

impl<'a> LogTerms<'a> {
    #[inline]
    fn source(&self, i: usize) -> &'a [f64] {
        let d = self.problem.dim;
        &self.problem.sources[i * d..(i + 1) * d]
    }

    #[inline]
    pub(crate) fn target(&self, j: usize) -> &'a [f64] {
        let d = self.problem.dim;
        &self.problem.targets[j * d..(j + 1) * d]
    }

    #[inline]
    fn term(&self, i: usize, j: usize) -> f64 {
        let c = self.cost.eval(self.source(i), self.target(j));
        self.problem.logw[j] + (self.problem.pot[j] - c) / self.cost.epsilon()
    }
}

/// Per-row output of [`reduce_lse`]: the log-sum-exp and the softmax-weighted
/// average of the payload.
pub(crate) struct LseRows {
    pub(crate) lse: Vec<f64>,
    pub(crate) avg: Vec<f64>,
}

/// Row reduction with a payload: for each row `i`, `lse_i = LSE_j t_ij` and
/// `avg_i = Σ_j softmax_j(t_i·) · payload(i, j)`.
///
/// `payload(i, j, w, acc)` must add `w · payload(i, j)` into `acc`
/// (`width` values).
pub(crate) fn reduce_lse<F>(
    config: &EngineConfig,
    terms: LogTerms<'_>,
    width: usize,
    payload: F,
) -> Result<LseRows>
where
    F: Fn(usize, usize, f64, &mut [f64]) + Sync,
{
    let (n, m) = terms.problem.validate()?;
    let plan = ReductionPlan::new(n, m, *config)?;
    reduce_lse_planned(&plan, terms, width, &payload)
}

fn reduce_lse_planned<F>(
    plan: &ReductionPlan,
    terms: LogTerms<'_>,
    width: usize,
    payload: &F,
) -> Result<LseRows>
where
    F: Fn(usize, usize, f64, &mut [f64]) + Sync,
{
    let (n, m) = terms.problem.validate()?;
    plan.check(n, m)?;
    let mut lse = vec![0.0; n];
    // One slot per row even without payload so rows and chunks stay zipped.
    let stride = width.max(1);
    let mut avg = vec![0.0; n * stride];

    match plan.mode() {
        ReductionMode::Streaming => {
            let tile = plan.tile_size();
            lse.par_chunks_mut(ROW_BLOCK)
                .zip(avg.par_chunks_mut(ROW_BLOCK * stride))
                .enumerate()
                .for_each(|(block, (lse_blk, avg_blk))| {
                    let row0 = block * ROW_BLOCK;
                    let rows = lse_blk.len();
                    let mut maxes = [f64::NEG_INFINITY; ROW_BLOCK];
                    let mut sums = [0.0f64; ROW_BLOCK];
                    for j0 in (0..m).step_by(tile) {
                        let j1 = (j0 + tile).min(m);
                        for (r, mx) in maxes.iter_mut().enumerate().take(rows) {
                            for j in j0..j1 {
                                let t = terms.term(row0 + r, j);
                                if t > *mx {
                                    *mx = t;
                                }
                            }
                        }
                    }
                    for j0 in (0..m).step_by(tile) {
                        let j1 = (j0 + tile).min(m);
                        for r in 0..rows {
                            let i = row0 + r;
                            let acc = &mut avg_blk[r * stride..r * stride + width];
                            let mx = maxes[r];
                            let mut s = sums[r];
                            for j in j0..j1 {
                                let e = (terms.term(i, j) - mx).exp();
                                s += e;
                                if width > 0 {
                                    payload(i, j, e, acc);
                                }
                            }
                            sums[r] = s;
                        }
                    }
                    for r in 0..rows {
                        lse_blk[r] = maxes[r] + sums[r].ln();
                        for a in &mut avg_blk[r * stride..r * stride + width] {
                            *a /= sums[r];
                        }
                    }
                });
        }
        ReductionMode::Dense => {
            let mut matrix = vec![0.0; n * m];
            matrix
                .par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, row)| {
                    for (j, t) in row.iter_mut().enumerate() {
                        *t = terms.term(i, j);
                    }
                });
            lse.par_iter_mut()
                .zip(avg.par_chunks_mut(stride))
                .enumerate()
                .for_each(|(i, (out, acc))| {
                    let row = &matrix[i * m..(i + 1) * m];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for (j, t) in row.iter().enumerate() {
                        let e = (t - mx).exp();
                        s += e;
                        if width > 0 {
                            payload(i, j, e, acc);
                        }
                    }
                    *out = mx + s.ln();
                    if width > 0 {
                        for a in acc.iter_mut() {
                            *a /= s;
                        }
                    }
                });
        }
    }

    if let Some(bad) = lse.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!("log-sum-exp produced {bad}")));
    }
    if width == 0 {
        avg = Vec::new();
    }
    Ok(LseRows { lse, avg })
}

/// For each source `i`: `LSE_j [ logw_j + pot_j/ε − C(source_i, target_j)/ε ]`.
pub fn lse_rows(plan: &ReductionPlan, problem: LseProblem<'_>, cost: CostSpec) -> Result<Vec<f64>> {
    let terms = LogTerms { problem, cost };
    Ok(reduce_lse_planned(plan, terms, 0, &|_, _, _, _: &mut [f64]| {})?.lse)
}

/// [`lse_rows`] together with the softmax-weighted average of
/// `∇_x C(source_i, target_j)`, i.e. the gradient of the row's log-sum-exp
/// times `−ε`. Returns `(lse, grad)` with `grad` row-major `N×D`.
pub fn lse_rows_with_grad(
    plan: &ReductionPlan,
    problem: LseProblem<'_>,
    cost: CostSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let terms = LogTerms { problem, cost };
    let d = problem.dim;
    let rows = reduce_lse_planned(plan, terms, d, &|i, j, w, acc: &mut [f64]| {
        cost.add_grad(terms.source(i), terms.target(j), w, acc);
    })?;
    Ok((rows.lse, rows.avg))
}

/// Runs several LSE reductions of identical shape in one call, in parallel
/// across problems and rows.
pub fn lse_rows_batched(
    plan: &ReductionPlan,
    problems: &[LseProblem<'_>],
    cost: CostSpec,
) -> Result<Vec<Vec<f64>>> {
    if let Some(b) = plan.batch() {
        if b != problems.len() {
            return Err(Error::invalid(format!(
                "plan expects a batch of {b}, got {}",
                problems.len()
            )));
        }
    }
    problems
        .par_iter()
        .map(|p| lse_rows(plan, *p, cost))
        .collect()
}

/// SoftMin of `C(x, ·) − φ(x)` over `x ∼ measure`, evaluated at each query
/// point: `−ε log Σ_k α_k exp((φ_k − C(x_k, y))/ε)`.
pub fn softmin(
    measure: &DiscreteMeasure,
    phi: &[f64],
    cost: CostSpec,
    queries: &[f64],
) -> Result<Vec<f64>> {
    softmin_with(&EngineConfig::default(), measure, phi, cost, queries)
}

pub fn softmin_with(
    config: &EngineConfig,
    measure: &DiscreteMeasure,
    phi: &[f64],
    cost: CostSpec,
    queries: &[f64],
) -> Result<Vec<f64>> {
    let problem = measure_problem(measure, phi, queries)?;
    let terms = LogTerms { problem, cost };
    let rows = reduce_lse(config, terms, 0, |_, _, _, _| {})?;
    let eps = cost.epsilon();
    Ok(rows.lse.into_iter().map(|v| -eps * v).collect())
}

/// SoftMin values and their gradients with respect to the query point.
pub fn softmin_with_grad(
    config: &EngineConfig,
    measure: &DiscreteMeasure,
    phi: &[f64],
    cost: CostSpec,
    queries: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let problem = measure_problem(measure, phi, queries)?;
    let terms = LogTerms { problem, cost };
    let rows = reduce_lse(config, terms, problem.dim, |i, j, w, acc| {
        cost.add_grad(terms.source(i), terms.target(j), w, acc);
    })?;
    let eps = cost.epsilon();
    Ok((rows.lse.into_iter().map(|v| -eps * v).collect(), rows.avg))
}

pub(crate) fn measure_problem<'a>(
    measure: &'a DiscreteMeasure,
    phi: &'a [f64],
    queries: &'a [f64],
) -> Result<LseProblem<'a>> {
    if phi.len() != measure.len() {
        return Err(Error::invalid(format!(
            "potential has length {}, measure has {} atoms",
            phi.len(),
            measure.len()
        )));
    }
    if queries.is_empty() || queries.len() % measure.dim() != 0 {
        return Err(Error::invalid("query buffer does not match the measure dimension"));
    }
    Ok(LseProblem {
        logw: measure.log_weights(),
        pot: phi,
        targets: measure.positions(),
        sources: queries,
        dim: measure.dim(),
    })
}

/// Inputs of a kernel sum `Σ_ij wA_i wB_j k(a_i, b_j)`.
#[derive(Debug, Clone, Copy)]
pub struct KernelProblem<'a> {
    pub weights_a: &'a [f64],
    pub points_a: &'a [f64],
    pub weights_b: &'a [f64],
    pub points_b: &'a [f64],
    pub dim: usize,
}

impl KernelProblem<'_> {
    fn validate(&self) -> Result<(usize, usize)> {
        let (n, m) = (self.weights_a.len(), self.weights_b.len());
        if n == 0 || m == 0 {
            return Err(Error::degenerate("kernel sum over an empty point set"));
        }
        if self.dim == 0 || self.points_a.len() != n * self.dim || self.points_b.len() != m * self.dim {
            return Err(Error::invalid("kernel sum arrays have inconsistent lengths"));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.weights_a) && finite(self.weights_b) && finite(self.points_a) && finite(self.points_b)) {
            return Err(Error::invalid("non-finite kernel sum input"));
        }
        Ok((n, m))
    }
}

/// Per-row sums `r_i = Σ_j wB_j k(a_i, b_j)` and, when `with_grad`, the
/// companions `g_i = Σ_j wB_j ∇_1 k(a_i, b_j)`.
pub fn kernel_rows(
    plan: &ReductionPlan,
    problem: KernelProblem<'_>,
    kernel: MmdKernelSpec,
    with_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = problem.validate()?;
    plan.check(n, m)?;
    let d = problem.dim;
    let stride = if with_grad { d } else { 1 };
    let a = |i: usize| &problem.points_a[i * d..(i + 1) * d];
    let b = |j: usize| &problem.points_b[j * d..(j + 1) * d];
    let mut rows = vec![0.0; n];
    let mut grads = vec![0.0; n * stride];

    match plan.mode() {
        ReductionMode::Streaming => {
            let tile = plan.tile_size();
            rows.par_chunks_mut(ROW_BLOCK)
                .zip(grads.par_chunks_mut(ROW_BLOCK * stride))
                .enumerate()
                .for_each(|(block, (row_blk, grad_blk))| {
                    let row0 = block * ROW_BLOCK;
                    for j0 in (0..m).step_by(tile) {
                        let j1 = (j0 + tile).min(m);
                        for (r, out) in row_blk.iter_mut().enumerate() {
                            let i = row0 + r;
                            let mut s = *out;
                            for j in j0..j1 {
                                s += problem.weights_b[j] * kernel.eval(a(i), b(j));
                                if with_grad {
                                    kernel.add_grad(
                                        a(i),
                                        b(j),
                                        problem.weights_b[j],
                                        &mut grad_blk[r * d..(r + 1) * d],
                                    );
                                }
                            }
                            *out = s;
                        }
                    }
                });
        }
        ReductionMode::Dense => {
            let mut matrix = vec![0.0; n * m];
            matrix.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
                for (j, k) in row.iter_mut().enumerate() {
                    *k = kernel.eval(a(i), b(j));
                }
            });
            rows.par_iter_mut()
                .zip(grads.par_chunks_mut(stride))
                .enumerate()
                .for_each(|(i, (out, g))| {
                    let mut s = 0.0;
                    for (j, k) in matrix[i * m..(i + 1) * m].iter().enumerate() {
                        s += problem.weights_b[j] * k;
                        if with_grad {
                            kernel.add_grad(a(i), b(j), problem.weights_b[j], g);
                        }
                    }
                    *out = s;
                });
        }
    }
    if !with_grad {
        grads = Vec::new();
    }
    Ok((rows, grads))
}

/// `Σ_ij wA_i wB_j k(a_i, b_j)`, accumulated row by row in index order.
pub fn weighted_kernel_sum(
    plan: &ReductionPlan,
    problem: KernelProblem<'_>,
    kernel: MmdKernelSpec,
) -> Result<f64> {
    let (rows, _) = kernel_rows(plan, problem, kernel, false)?;
    Ok(rows
        .iter()
        .zip(problem.weights_a)
        .fold(0.0, |acc, (r, w)| acc + w * r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::sample_unit_cube;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan(n: usize, m: usize) -> ReductionPlan {
        ReductionPlan::new(n, m, EngineConfig::default()).unwrap()
    }

    #[test]
    fn single_target_is_the_term_itself() {
        let cost = CostSpec::new(2.0, 0.5).unwrap();
        let sources = [0.0, 1.0, -2.0];
        let p = LseProblem {
            logw: &[-0.3],
            pot: &[0.7],
            targets: &[0.25],
            sources: &sources,
            dim: 1,
        };
        let out = lse_rows(&plan(3, 1), p, cost).unwrap();
        for (o, x) in out.iter().zip(sources) {
            let expected = -0.3 + 0.7 / 0.5 - (x - 0.25f64).powi(2) / 0.5;
            assert_relative_eq!(*o, expected, max_relative = 1e-15);
        }
    }

    #[test]
    fn shift_moves_every_output() {
        let cost = CostSpec::new(1.0, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
        let sources: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let logw: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let pot: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = logw.iter().map(|v| v + 1.75).collect();
        let base = LseProblem { logw: &logw, pot: &pot, targets: &targets, sources: &sources, dim: 2 };
        let moved = LseProblem { logw: &shifted, ..base };
        let a = lse_rows(&plan(15, 20), base, cost).unwrap();
        let b = lse_rows(&plan(15, 20), moved, cost).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(y - x, 1.75, epsilon = 1e-13);
        }
    }

    #[test]
    fn rejects_degenerate_and_non_finite_input() {
        let cost = CostSpec::new(1.0, 1.0).unwrap();
        assert!(matches!(
            ReductionPlan::new(3, 0, EngineConfig::default()),
            Err(Error::DegenerateMeasure(_))
        ));
        let p = LseProblem {
            logw: &[0.0, f64::NAN],
            pot: &[0.0, 0.0],
            targets: &[0.0, 1.0],
            sources: &[0.0],
            dim: 1,
        };
        assert!(matches!(lse_rows(&plan(1, 2), p, cost), Err(Error::InvalidInput(_))));
        let empty = LseProblem { logw: &[], pot: &[], targets: &[], sources: &[0.0], dim: 1 };
        let cfg = EngineConfig::default();
        assert!(matches!(
            reduce_lse(&cfg, LogTerms { problem: empty, cost }, 0, |_, _, _, _| {}),
            Err(Error::DegenerateMeasure(_))
        ));
        assert!(matches!(
            ReductionPlan::new(3, 3, EngineConfig::streaming(0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn plan_shape_is_enforced() {
        let cost = CostSpec::new(1.0, 1.0).unwrap();
        let p = LseProblem { logw: &[0.0], pot: &[0.0], targets: &[0.0], sources: &[0.0, 1.0], dim: 1 };
        assert!(matches!(lse_rows(&plan(3, 1), p, cost), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmin_single_atom() {
        let cost = CostSpec::new(2.0, 0.3).unwrap();
        let m = DiscreteMeasure::from_arrays(&[1.0], &[vec![0.5, 0.5]]).unwrap();
        let q = [0.0, 0.0, 1.0, 0.25];
        let out = softmin(&m, &[0.4], cost, &q).unwrap();
        assert_relative_eq!(out[0], 0.5 - 0.4, epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.3125 - 0.4, epsilon = 1e-15);
    }

    #[test]
    fn softmin_gradient_matches_finite_differences() {
        let a = sample_unit_cube(25, 2, 4).unwrap();
        let cost = CostSpec::new(2.0, 0.05).unwrap();
        let phi: Vec<f64> = (0..25).map(|k| 0.01 * k as f64).collect();
        let q = [0.3, 0.6];
        let (_, g) = softmin_with_grad(&EngineConfig::default(), &a, &phi, cost, &q).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let (mut qp, mut qm) = (q, q);
            qp[d] += h;
            qm[d] -= h;
            let fd = (softmin(&a, &phi, cost, &qp).unwrap()[0] - softmin(&a, &phi, cost, &qm).unwrap()[0])
                / (2.0 * h);
            assert_relative_eq!(g[d], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn batched_equals_individual_calls() {
        let cost = CostSpec::new(1.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen()).collect() };
        let data: Vec<[Vec<f64>; 4]> = (0..3)
            .map(|_| [mk(&mut rng, 12), mk(&mut rng, 12), mk(&mut rng, 12), mk(&mut rng, 9)])
            .collect();
        let problems: Vec<LseProblem> = data
            .iter()
            .map(|[l, p, t, s]| LseProblem { logw: l, pot: p, targets: t, sources: s, dim: 1 })
            .collect();
        let bplan = plan(9, 12).with_batch(3).unwrap();
        let batched = lse_rows_batched(&bplan, &problems, cost).unwrap();
        for (b, p) in batched.iter().zip(&problems) {
            assert_eq!(b, &lse_rows(&plan(9, 12), *p, cost).unwrap());
        }
        assert!(lse_rows_batched(&bplan, &problems[..2], cost).is_err());
    }

    #[test]
    fn kernel_sum_single_atoms() {
        let p = KernelProblem {
            weights_a: &[1.0],
            points_a: &[0.0, 0.0],
            weights_b: &[1.0],
            points_b: &[3.0, 4.0],
            dim: 2,
        };
        let v = weighted_kernel_sum(&plan(1, 1), p, MmdKernelSpec::energy()).unwrap();
        assert_eq!(v, -5.0);
        let empty = KernelProblem { weights_b: &[], points_b: &[], ..p };
        assert!(matches!(
            weighted_kernel_sum(&plan(1, 1), empty, MmdKernelSpec::energy()),
            Err(Error::DegenerateMeasure(_))
        ));
    }

    #[test]
    fn kernel_sum_matches_naive_double_loop() {
        let a = sample_unit_cube(500, 2, 11).unwrap();
        let b = sample_unit_cube(500, 2, 12).unwrap();
        let k = MmdKernelSpec::gaussian(0.3).unwrap();
        let p = KernelProblem {
            weights_a: a.weights(),
            points_a: a.positions(),
            weights_b: b.weights(),
            points_b: b.positions(),
            dim: 2,
        };
        let v = weighted_kernel_sum(&plan(500, 500), p, k).unwrap();
        let mut naive = 0.0;
        for (wa, x) in a.weights().iter().zip(a.points()) {
            for (wb, y) in b.weights().iter().zip(b.points()) {
                let r2: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
                naive += wa * wb * (-r2 / 0.18).exp();
            }
        }
        assert_relative_eq!(v, naive, max_relative = 1e-12);
    }
}
