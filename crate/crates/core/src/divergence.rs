//! Loss functions between discrete measures and their gradients.
//!
//! Every entropic loss is assembled from three dual problems: the cross
//! problem `OT_ε(α, β)` with duals `(B, A)` and the two self-transport
//! problems with symmetric potentials `P` (of α) and `Q` (of β).
//!
//! Gradients use the at-convergence formulas only. They are exact when the
//! duals solve their fixed-point equations, so the solvers should be run to a
//! tolerance well below the accuracy wanted on the gradient. Weight gradients
//! are defined up to a global additive constant and are reported raw;
//! position gradients are true partial derivatives `∂L/∂x_i` (they carry the
//! factor `α_i`).

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::cost::{MmdKernel, MmdKernelSpec};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::reduce::{
    kernel_rows, measure_problem, reduce_lse, softmin_with, softmin_with_grad, EngineConfig, KernelProblem,
    LogTerms, ReductionPlan,
};
use crate::solver::{
    dot, sinkhorn_symmetric_warm, sinkhorn_warm, DualState, SolverParams, SymmetricDual,
};

/// Convergence record of one dual sub-problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    /// `"cross"`, `"alpha"` or `"beta"`.
    pub problem: &'static str,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub diagnostics: Vec<SolveDiagnostics>,
}

impl LossValue {
    pub fn converged(&self) -> bool {
        self.diagnostics.iter().all(|d| d.converged)
    }

    pub fn max_residual(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.residual).fold(0.0, f64::max)
    }
}

/// Gradient with respect to the weights and positions of the first measure.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    /// `∂L/∂α_i`, defined modulo a global additive constant.
    pub d_weights: Vec<f64>,
    /// `∂L/∂x_i`, row-major `N×D`.
    pub d_positions: Vec<f64>,
    pub dim: usize,
}

impl LossGradient {
    pub fn position(&self, i: usize) -> &[f64] {
        &self.d_positions[i * self.dim..(i + 1) * self.dim]
    }
}

/// The losses the library can evaluate and differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    OtEps,
    Sinkhorn,
    Hausdorff,
    Mmd(MmdKernelSpec),
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::OtEps => "ot_eps",
            Loss::Sinkhorn => "sinkhorn",
            Loss::Hausdorff => "hausdorff",
            Loss::Mmd(k) => match k.kind() {
                MmdKernel::Energy => "mmd-energy",
                MmdKernel::Gaussian => "mmd-gaussian",
                MmdKernel::Laplacian => "mmd-laplacian",
            },
        }
    }

    /// Parses a loss name; `sigma` is the bandwidth of the Gaussian and
    /// Laplacian kernels.
    pub fn parse(name: &str, sigma: f64) -> Result<Self> {
        Ok(match name {
            "ot_eps" => Loss::OtEps,
            "sinkhorn" => Loss::Sinkhorn,
            "hausdorff" => Loss::Hausdorff,
            "mmd-energy" => Loss::Mmd(MmdKernelSpec::energy()),
            "mmd-gaussian" => Loss::Mmd(MmdKernelSpec::gaussian(sigma)?),
            "mmd-laplacian" => Loss::Mmd(MmdKernelSpec::laplacian(sigma)?),
            other => return Err(Error::invalid(format!("unknown loss '{other}'"))),
        })
    }

    pub fn is_entropic(&self) -> bool {
        !matches!(self, Loss::Mmd(_))
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Loss::parse(s, 1.0)
    }
}

/// Dual vectors kept between successive evaluations (e.g. along a flow) to
/// warm-start the solvers.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    cross_b: Option<Vec<f64>>,
    alpha_p: Option<Vec<f64>>,
    beta_q: Option<Vec<f64>>,
}

impl WarmStart {
    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

fn usable(v: &Option<Vec<f64>>, len: usize) -> Option<&[f64]> {
    v.as_deref().filter(|v| v.len() == len)
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

fn cross_diag(s: &DualState) -> SolveDiagnostics {
    SolveDiagnostics {
        problem: "cross",
        iterations: s.iterations,
        residual: s.residual,
        converged: s.converged,
    }
}

fn sym_diag(problem: &'static str, s: &SymmetricDual) -> SolveDiagnostics {
    SolveDiagnostics {
        problem,
        iterations: s.iterations,
        residual: s.residual,
        converged: s.converged,
    }
}

/// Solved dual problems of one `(α, β)` pair.
struct Duals {
    cross: Option<DualState>,
    alpha: Option<SymmetricDual>,
    beta: Option<SymmetricDual>,
}

impl Duals {
    fn diagnostics(&self) -> Vec<SolveDiagnostics> {
        let mut d = Vec::new();
        if let Some(c) = &self.cross {
            d.push(cross_diag(c));
        }
        if let Some(a) = &self.alpha {
            d.push(sym_diag("alpha", a));
        }
        if let Some(b) = &self.beta {
            d.push(sym_diag("beta", b));
        }
        d
    }

    fn store(&self, warm: &mut WarmStart) {
        if let Some(c) = &self.cross {
            warm.cross_b = Some(c.b.clone());
        }
        if let Some(a) = &self.alpha {
            warm.alpha_p = Some(a.potential.clone());
        }
        if let Some(b) = &self.beta {
            warm.beta_q = Some(b.potential.clone());
        }
    }
}

/// Runs the requested sub-problems concurrently.
fn solve(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    warm: &WarmStart,
    (want_cross, want_alpha, want_beta): (bool, bool, bool),
) -> Result<Duals> {
    check_pair(alpha, beta)?;
    let (cross, (sa, sb)) = rayon::join(
        || {
            want_cross
                .then(|| sinkhorn_warm(alpha, beta, params, usable(&warm.cross_b, alpha.len())))
                .transpose()
        },
        || {
            rayon::join(
                || {
                    want_alpha
                        .then(|| sinkhorn_symmetric_warm(alpha, params, usable(&warm.alpha_p, alpha.len())))
                        .transpose()
                },
                || {
                    want_beta
                        .then(|| sinkhorn_symmetric_warm(beta, params, usable(&warm.beta_q, beta.len())))
                        .transpose()
                },
            )
        },
    );
    Ok(Duals {
        cross: cross?,
        alpha: sa?,
        beta: sb?,
    })
}

/// `OT_ε(α, β) = ⟨α, B⟩ + ⟨β, A⟩` at convergence of the Sinkhorn loop.
pub fn ot_eps(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, params: &SolverParams) -> Result<LossValue> {
    let (v, _) = evaluate(Loss::OtEps, alpha, beta, params, &mut WarmStart::default(), false)?;
    Ok(v)
}

/// `S_ε(α, β) = Σ α_i (B_i − P_i) + Σ β_j (A_j − Q_j)`.
pub fn sinkhorn_divergence(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
) -> Result<LossValue> {
    let (v, _) = evaluate(Loss::Sinkhorn, alpha, beta, params, &mut WarmStart::default(), false)?;
    Ok(v)
}

/// `H_ε(α, β) = ½⟨α − β, Q̄ − P̄⟩`, where `P̄` and `Q̄` are the symmetric
/// potentials of α and β extended to the whole space.
pub fn hausdorff_divergence(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
) -> Result<LossValue> {
    let (v, _) = evaluate(Loss::Hausdorff, alpha, beta, params, &mut WarmStart::default(), false)?;
    Ok(v)
}

/// `½⟨α − β, k ⋆ (α − β)⟩`.
pub fn mmd(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, kernel: MmdKernelSpec) -> Result<LossValue> {
    mmd_with(&EngineConfig::default(), alpha, beta, kernel)
}

pub fn mmd_with(
    engine: &EngineConfig,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    kernel: MmdKernelSpec,
) -> Result<LossValue> {
    check_pair(alpha, beta)?;
    Ok(mmd_parts(engine, alpha, beta, kernel, false)?.0)
}

pub fn sinkhorn_gradient(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
) -> Result<LossGradient> {
    gradient(Loss::Sinkhorn, alpha, beta, params)
}

pub fn mmd_gradient(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, kernel: MmdKernelSpec) -> Result<LossGradient> {
    check_pair(alpha, beta)?;
    let (_, g) = mmd_parts(&EngineConfig::default(), alpha, beta, kernel, true)?;
    Ok(g.expect("gradient requested"))
}

/// Gradient of any [`Loss`] with respect to α.
pub fn gradient(
    loss: Loss,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
) -> Result<LossGradient> {
    let (_, g) = evaluate(loss, alpha, beta, params, &mut WarmStart::default(), true)?;
    Ok(g.expect("gradient requested"))
}

/// Evaluates `loss(α, β)` and, when `with_grad`, its gradient with respect to
/// α, reusing and updating the warm-start duals.
///
/// A gradient built from duals that missed their tolerance is returned as
/// [`Error::GradientUnreliable`] carrying the gradient anyway.
pub fn evaluate(
    loss: Loss,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    warm: &mut WarmStart,
    with_grad: bool,
) -> Result<(LossValue, Option<LossGradient>)> {
    if let Loss::Mmd(kernel) = loss {
        check_pair(alpha, beta)?;
        return mmd_parts(&params.engine, alpha, beta, kernel, with_grad);
    }
    params.validate()?;
    let needs = match loss {
        Loss::OtEps => (true, false, false),
        Loss::Sinkhorn => (true, true, true),
        Loss::Hausdorff => (false, true, true),
        Loss::Mmd(_) => unreachable!(),
    };
    let duals = solve(alpha, beta, params, warm, needs)?;
    duals.store(warm);
    let diagnostics = duals.diagnostics();

    let (value, grad) = match loss {
        Loss::OtEps => ot_parts(alpha, beta, params, &duals, with_grad)?,
        Loss::Sinkhorn => sinkhorn_parts(alpha, beta, params, &duals, with_grad)?,
        Loss::Hausdorff => hausdorff_parts(alpha, beta, params, &duals, with_grad)?,
        Loss::Mmd(_) => unreachable!(),
    };
    let value = LossValue { value, diagnostics };
    if !value.value.is_finite() {
        return Err(Error::NumericalFailure(format!("{loss} evaluated to {}", value.value)));
    }
    if let Some(g) = grad {
        if !value.converged() {
            return Err(Error::GradientUnreliable {
                residual: value.max_residual(),
                partial: Box::new(g),
            });
        }
        return Ok((value, Some(g)));
    }
    Ok((value, None))
}

fn ot_parts(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    duals: &Duals,
    with_grad: bool,
) -> Result<(f64, Option<LossGradient>)> {
    let cross = duals.cross.as_ref().expect("cross problem solved");
    let value = dot(alpha.weights(), &cross.b) + dot(beta.weights(), &cross.a);
    if !with_grad {
        return Ok((value, None));
    }
    let (_, grad_b) = softmin_with_grad(&params.engine, beta, &cross.a, params.cost, alpha.positions())?;
    Ok((
        value,
        Some(LossGradient {
            d_weights: cross.b.clone(),
            d_positions: scale_rows(alpha, grad_b),
            dim: alpha.dim(),
        }),
    ))
}

fn sinkhorn_parts(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    duals: &Duals,
    with_grad: bool,
) -> Result<(f64, Option<LossGradient>)> {
    let cross = duals.cross.as_ref().expect("cross problem solved");
    let p = &duals.alpha.as_ref().expect("alpha problem solved").potential;
    let q = &duals.beta.as_ref().expect("beta problem solved").potential;
    let value = alpha
        .weights()
        .iter()
        .zip(cross.b.iter().zip(p))
        .map(|(w, (b, p))| w * (b - p))
        .sum::<f64>()
        + beta
            .weights()
            .iter()
            .zip(cross.a.iter().zip(q))
            .map(|(w, (a, q))| w * (a - q))
            .sum::<f64>();
    if !with_grad {
        return Ok((value, None));
    }
    let (engine, cost, x) = (&params.engine, params.cost, alpha.positions());
    let ((_, grad_cross), (_, grad_self)) = {
        let (c, s) = rayon::join(
            || softmin_with_grad(engine, beta, &cross.a, cost, x),
            || softmin_with_grad(engine, alpha, p, cost, x),
        );
        (c?, s?)
    };
    let diff: Vec<f64> = grad_cross.iter().zip(&grad_self).map(|(c, s)| c - s).collect();
    Ok((
        value,
        Some(LossGradient {
            d_weights: cross.b.iter().zip(p).map(|(b, p)| b - p).collect(),
            d_positions: scale_rows(alpha, diff),
            dim: alpha.dim(),
        }),
    ))
}

/// Cap and target of the adjoint iteration used by the Hausdorff gradient.
const ADJOINT_MAX_ITERS: usize = 500;
const ADJOINT_TOL: f64 = 1e-14;

fn hausdorff_parts(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    params: &SolverParams,
    duals: &Duals,
    with_grad: bool,
) -> Result<(f64, Option<LossGradient>)> {
    let p = &duals.alpha.as_ref().expect("alpha problem solved").potential;
    let q = &duals.beta.as_ref().expect("beta problem solved").potential;
    let (engine, cost, eps) = (&params.engine, params.cost, params.epsilon());
    let (x, y) = (alpha.positions(), beta.positions());

    // Q̄ on α's atoms and P̄ on β's atoms.
    let (q_on_x, p_on_y) = {
        let (qx, py) = rayon::join(
            || softmin_with_grad(engine, beta, q, cost, x),
            || softmin_with(engine, alpha, p, cost, y),
        );
        (qx?, py?)
    };
    let (q_on_x, grad_q) = q_on_x;
    let value = 0.5
        * (alpha
            .weights()
            .iter()
            .zip(q_on_x.iter().zip(p))
            .map(|(w, (qx, p))| w * (qx - p))
            .sum::<f64>()
            + beta
                .weights()
                .iter()
                .zip(p_on_y.iter().zip(q))
                .map(|(w, (py, q))| w * (py - q))
                .sum::<f64>());
    if !with_grad {
        return Ok((value, None));
    }

    // Differentiating ⟨β, P̄⟩ with P fixed: ρ_i = exp((P_i − S_i)/ε) with
    // S = T(β, P̄) on α's atoms is the β-mass the extension pulls onto x_i.
    // The value then depends on P through v = ∂(2H)/∂P = −α(1 + ρ).
    let (s_on_x, grad_s) = softmin_with_grad(engine, beta, &p_on_y, cost, x)?;
    let rho: Vec<f64> = p.iter().zip(&s_on_x).map(|(p, s)| ((p - s) / eps).exp()).collect();
    let w_alpha = alpha.weights();
    let v: Vec<f64> = w_alpha.iter().zip(&rho).map(|(a, r)| -a * (1.0 + r)).collect();

    // Adjoint of the symmetric fixed point: (I + Πᵀ) w = v with
    // Πᵀ w = α ⊙ Π(w/α) and Π the softmax matrix of T(α, P) on α's atoms.
    let self_terms = || -> Result<LogTerms<'_>> {
        Ok(LogTerms {
            problem: measure_problem(alpha, p, x)?,
            cost,
        })
    };
    let apply_pi_t = |w: &[f64]| -> Result<Vec<f64>> {
        let u: Vec<f64> = w.iter().zip(w_alpha).map(|(w, a)| w / a).collect();
        let rows = reduce_lse(engine, self_terms()?, 1, |_, k, e, acc| acc[0] += e * u[k])?;
        Ok(rows.avg.iter().zip(w_alpha).map(|(pu, a)| a * pu).collect())
    };
    let v_scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut w: Vec<f64> = v.iter().map(|v| 0.5 * v).collect();
    let mut adjoint_residual = f64::INFINITY;
    for _ in 0..ADJOINT_MAX_ITERS {
        let ptw = apply_pi_t(&w)?;
        let r: Vec<f64> = v.iter().zip(&w).zip(&ptw).map(|((v, w), t)| v - w - t).collect();
        adjoint_residual = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if adjoint_residual <= ADJOINT_TOL * v_scale {
            break;
        }
        for (wi, ri) in w.iter_mut().zip(&r) {
            *wi += 0.5 * ri;
        }
    }
    if adjoint_residual > 1e-8 * v_scale {
        return Err(Error::NumericalFailure(format!(
            "adjoint solve stalled at residual {adjoint_residual:e}"
        )));
    }
    let u: Vec<f64> = w.iter().zip(w_alpha).map(|(w, a)| w / a).collect();

    let d = alpha.dim();
    let implicit = reduce_lse(engine, self_terms()?, 2 * d, |i, k, e, acc| {
        let (xi, xk) = (&x[i * d..(i + 1) * d], &x[k * d..(k + 1) * d]);
        let (plain, weighted) = acc.split_at_mut(d);
        cost.add_grad(xi, xk, e, plain);
        cost.add_grad(xi, xk, e * u[k], weighted);
    })?;

    let mut d_positions = vec![0.0; x.len()];
    for i in 0..alpha.len() {
        let ai = w_alpha[i];
        let row = &implicit.avg[i * 2 * d..(i + 1) * 2 * d];
        for c in 0..d {
            let idx = i * d + c;
            d_positions[idx] = 0.5
                * (ai * grad_q[idx] + ai * rho[i] * grad_s[idx] + w[i] * row[c] + ai * row[d + c]);
        }
    }
    let d_weights = (0..alpha.len())
        .map(|i| 0.5 * (q_on_x[i] - p[i] + eps * u[i]))
        .collect();
    Ok((
        value,
        Some(LossGradient {
            d_weights,
            d_positions,
            dim: d,
        }),
    ))
}

fn mmd_parts(
    engine: &EngineConfig,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    kernel: MmdKernelSpec,
    with_grad: bool,
) -> Result<(LossValue, Option<LossGradient>)> {
    let d = alpha.dim();
    let plan = |a: &DiscreteMeasure, b: &DiscreteMeasure| ReductionPlan::new(a.len(), b.len(), *engine);
    let ((aa, ab), bb) = rayon::join(
        || {
            rayon::join(
                || kernel_rows(&plan(alpha, alpha)?, kernel_problem(alpha, alpha), kernel, with_grad),
                || kernel_rows(&plan(alpha, beta)?, kernel_problem(alpha, beta), kernel, with_grad),
            )
        },
        || kernel_rows(&plan(beta, beta)?, kernel_problem(beta, beta), kernel, false),
    );
    let ((raa, gaa), (rab, gab), (rbb, _)) = (aa?, ab?, bb?);
    let value = 0.5 * (dot(alpha.weights(), &raa) + dot(beta.weights(), &rbb)) - dot(alpha.weights(), &rab);
    let loss = LossValue {
        value,
        diagnostics: Vec::new(),
    };
    if !with_grad {
        return Ok((loss, None));
    }
    let diff: Vec<f64> = gaa.iter().zip(&gab).map(|(s, c)| s - c).collect();
    Ok((
        loss,
        Some(LossGradient {
            d_weights: raa.iter().zip(&rab).map(|(s, c)| s - c).collect(),
            d_positions: scale_rows(alpha, diff),
            dim: d,
        }),
    ))
}

fn kernel_problem<'a>(a: &'a DiscreteMeasure, b: &'a DiscreteMeasure) -> KernelProblem<'a> {
    KernelProblem {
        weights_a: a.weights(),
        points_a: a.positions(),
        weights_b: b.weights(),
        points_b: b.positions(),
        dim: a.dim(),
    }
}

/// Multiplies row `i` of an `N×D` buffer by `α_i`.
fn scale_rows(alpha: &DiscreteMeasure, mut rows: Vec<f64>) -> Vec<f64> {
    let d = alpha.dim();
    for (row, w) in rows.chunks_exact_mut(d).zip(alpha.weights()) {
        for v in row {
            *v *= w;
        }
    }
    rows
}
