//! Sinkhorn solvers working on dual vectors.
//!
//! For `α = Σ α_i δ_{x_i}` and `β = Σ β_j δ_{y_j}` the optimal dual vectors
//! satisfy
//!
//! ```text
//! B_i = −ε LSE_k [ log β_k + A_k/ε − C(x_i, y_k)/ε ]
//! A_j = −ε LSE_k [ log α_k + B_k/ε − C(x_k, y_j)/ε ]
//! ```
//!
//! and `OT_ε(α, β) = ⟨α, B⟩ + ⟨β, A⟩`. [`sinkhorn`] enforces the two equations
//! alternately from `B = A = 0`; [`sinkhorn_symmetric`] solves the `α = β`
//! case with the averaged update `P ← ½(P + T(α, P))`, which contracts much
//! faster than the alternating loop.

use serde::Serialize;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::reduce::{softmin_with, EngineConfig};

/// Largest `N·M` for which [`plan_diagnostics`] agrees to enumerate the plan.
pub const DIAGNOSTICS_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverParams {
    pub cost: CostSpec,
    /// Cap on alternating iterations (one `A` and one `B` update each).
    pub max_iters: usize,
    /// Threshold on `Σ_i α_i |ΔB_i|` for the alternating loop and on the
    /// max-norm fixed-point residual for the symmetric solver.
    pub tol: f64,
    /// Cap on map evaluations of the symmetric solver.
    pub symmetric_max_iters: usize,
    #[serde(skip)]
    pub engine: EngineConfig,
}

impl SolverParams {
    pub fn new(cost: CostSpec) -> Self {
        Self {
            cost,
            max_iters: 1000,
            tol: 1e-6,
            symmetric_max_iters: 50,
            engine: EngineConfig::default(),
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_symmetric_max_iters(mut self, n: usize) -> Self {
        self.symmetric_max_iters = n;
        self
    }

    pub fn with_engine(mut self, engine: EngineConfig) -> Self {
        self.engine = engine;
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.cost.epsilon()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.symmetric_max_iters == 0 {
            return Err(Error::invalid("iteration caps must be positive"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::invalid(format!("tolerance must lie in (0, 1), got {}", self.tol)));
        }
        if self.engine.tile_size == 0 {
            return Err(Error::invalid("tile size must be at least 1"));
        }
        Ok(())
    }
}

/// Dual vectors of `OT_ε(α, β)`: `b` lives on α's atoms, `a` on β's.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub iterations: usize,
    /// `Σ_i α_i |ΔB_i|` of the last iteration.
    pub residual: f64,
    pub converged: bool,
}

/// The self-transport potential of one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricDual {
    pub potential: Vec<f64>,
    /// Number of evaluations of the Sinkhorn mapping.
    pub iterations: usize,
    /// `max_i |P_i − T(α, P)_i|` for the returned potential.
    pub residual: f64,
    pub converged: bool,
}

fn check_pair(alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> Result<()> {
    if alpha.dim() != beta.dim() {
        return Err(Error::invalid(format!(
            "measures live in dimensions {} and {}",
            alpha.dim(),
            beta.dim()
        )));
    }
    Ok(())
}

/// Alternating Sinkhorn loop from null potentials.
pub fn sinkhorn(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, params: &SolverParams) -> Result<DualState> {
    sinkhorn_warm(alpha, beta, params, None)
}

/// Alternating Sinkhorn loop started from `init_b` (the first step overwrites
/// `A`, so only `B` needs an initial value). A warm start changes the gauge
/// and the iteration count, not the limit.
pub fn sinkhorn_warm(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    init_b: Option<&[f64]>,
) -> Result<DualState> {
    params.validate()?;
    check_pair(alpha, beta)?;
    let mut b = match init_b {
        Some(v) if v.len() != alpha.len() => {
            return Err(Error::invalid("warm-start vector does not match the measure"));
        }
        Some(v) => v.to_vec(),
        None => vec![0.0; alpha.len()],
    };
    let cost = params.cost;
    let mut a = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < params.max_iters {
        a = softmin_with(&params.engine, alpha, &b, cost, beta.positions())?;
        let next = softmin_with(&params.engine, beta, &a, cost, alpha.positions())?;
        residual = alpha
            .weights()
            .iter()
            .zip(next.iter().zip(&b))
            .map(|(w, (n, o))| w * (n - o).abs())
            .sum();
        b = next;
        iterations += 1;
        if !residual.is_finite() {
            return Err(Error::NumericalFailure("Sinkhorn update is not finite".into()));
        }
        if residual <= params.tol {
            break;
        }
    }

    Ok(DualState {
        b,
        a,
        iterations,
        residual,
        converged: residual <= params.tol,
    })
}

/// Symmetric solver for `OT_ε(α, α)`, started from `P = 0`.
pub fn sinkhorn_symmetric(alpha: &DiscreteMeasure, params: &SolverParams) -> Result<SymmetricDual> {
    sinkhorn_symmetric_warm(alpha, params, None)
}

pub fn sinkhorn_symmetric_warm(
    alpha: &DiscreteMeasure,
    params: &SolverParams,
    init: Option<&[f64]>,
) -> Result<SymmetricDual> {
    params.validate()?;
    let mut p = match init {
        Some(v) if v.len() != alpha.len() => {
            return Err(Error::invalid("warm-start vector does not match the measure"));
        }
        Some(v) => v.to_vec(),
        None => vec![0.0; alpha.len()],
    };
    let map = |p: &[f64]| softmin_with(&params.engine, alpha, p, params.cost, alpha.positions());

    let mut t = map(&p)?;
    let mut residual = max_abs_diff(&p, &t);
    let mut iterations = 1;
    while residual > params.tol && iterations < params.symmetric_max_iters {
        for (pi, ti) in p.iter_mut().zip(&t) {
            *pi = 0.5 * (*pi + ti);
        }
        t = map(&p)?;
        residual = max_abs_diff(&p, &t);
        iterations += 1;
        if !residual.is_finite() {
            return Err(Error::NumericalFailure("symmetric update is not finite".into()));
        }
    }

    Ok(SymmetricDual {
        potential: p,
        iterations,
        residual,
        converged: residual <= params.tol,
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `⟨α, B⟩ + ⟨β, A⟩`.
pub fn dual_value(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, b: &[f64], a: &[f64]) -> Result<f64> {
    if b.len() != alpha.len() || a.len() != beta.len() {
        return Err(Error::invalid(format!(
            "dual vectors of lengths {}, {} for measures of sizes {}, {}",
            b.len(),
            a.len(),
            alpha.len(),
            beta.len()
        )));
    }
    Ok(dot(alpha.weights(), b) + dot(beta.weights(), a))
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Extends a potential known on `measure`'s atoms to arbitrary points through
/// the Sinkhorn mapping `y ↦ −ε log Σ_k w_k exp((f_k − C(x_k, y))/ε)`.
pub fn extend_potential(
    measure: &DiscreteMeasure,
    own_potential: &[f64],
    cost: CostSpec,
    queries: &[f64],
) -> Result<Vec<f64>> {
    softmin_with(&EngineConfig::default(), measure, own_potential, cost, queries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanDiagnostics {
    /// `⟨π, C⟩`.
    pub transport_cost: f64,
    /// `KL(π | α⊗β)` in its f-divergence form `Σ ξ ψ(π/ξ)`, `ψ(t) = t log t − t + 1`.
    pub kl: f64,
    /// `‖π 1 − α‖₁ + ‖πᵀ 1 − β‖₁`.
    pub marginal_err_l1: f64,
}

/// Enumerates the plan `π_ij = α_i β_j exp((B_i + A_j − C_ij)/ε)` implied by
/// a pair of dual vectors. Entries are generated on the fly; only the row and
/// column sums are stored.
pub fn plan_diagnostics(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    b: &[f64],
    a: &[f64],
    cost: CostSpec,
) -> Result<PlanDiagnostics> {
    check_pair(alpha, beta)?;
    let (n, m) = (alpha.len(), beta.len());
    if n.saturating_mul(m) > DIAGNOSTICS_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: m,
            limit: DIAGNOSTICS_LIMIT,
        });
    }
    if b.len() != n || a.len() != m {
        return Err(Error::invalid("dual vectors do not match the measures"));
    }
    let eps = cost.epsilon();
    let mut transport_cost = 0.0;
    let mut kl = 0.0;
    let mut col_sums = vec![0.0; m];
    let mut row_err = 0.0;
    for (i, x) in alpha.points().enumerate() {
        let mut row = 0.0;
        for (j, y) in beta.points().enumerate() {
            let c = cost.eval(x, y);
            let log_ratio = (b[i] + a[j] - c) / eps;
            let xi = alpha.weights()[i] * beta.weights()[j];
            let ratio = log_ratio.exp();
            let pi = xi * ratio;
            transport_cost += pi * c;
            kl += xi * (ratio * log_ratio - ratio + 1.0);
            row += pi;
            col_sums[j] += pi;
        }
        row_err += (row - alpha.weights()[i]).abs();
    }
    let col_err: f64 = col_sums
        .iter()
        .zip(beta.weights())
        .map(|(s, w)| (s - w).abs())
        .sum();
    Ok(PlanDiagnostics {
        transport_cost,
        kl,
        marginal_err_l1: row_err + col_err,
    })
}
