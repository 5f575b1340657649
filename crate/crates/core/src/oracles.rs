//! Reference computations used to validate the fast paths.
//!
//! Everything here is written directly from the definitions with plain loops
//! and never calls into [`crate::reduce`], [`crate::solver`] or
//! [`crate::divergence`]. The routines are quadratic (or worse) and guarded
//! against large inputs.

use nalgebra::{DMatrix, DVector};

use crate::cost::{CostSpec, MmdKernel, MmdKernelSpec};
use crate::divergence::LossGradient;
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;

/// Largest number of pairwise entries an oracle will evaluate.
pub const ORACLE_LIMIT: usize = 1_000_000;

/// A reference value next to the value under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub reference_value: f64,
    pub test_value: f64,
    pub abs_err: f64,
    /// `abs_err / (1 + |reference|)`.
    pub rel_err: f64,
}

impl OracleReport {
    pub fn new(reference_value: f64, test_value: f64) -> Self {
        let abs_err = (reference_value - test_value).abs();
        Self {
            reference_value,
            test_value,
            abs_err,
            rel_err: abs_err / (1.0 + reference_value.abs()),
        }
    }
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn ground_cost(p: f64, x: &[f64], y: &[f64]) -> f64 {
    let r = dist(x, y);
    if p == 2.0 {
        r * r
    } else {
        r
    }
}

fn guard(n: usize, m: usize) -> Result<()> {
    if n.saturating_mul(m) > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: m,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

fn same_dim(alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> Result<()> {
    if alpha.dim() != beta.dim() {
        return Err(Error::invalid("measures of different dimensions"));
    }
    Ok(())
}

/// Exact unregularized OT cost `∫|x−y|^p dπ` between 1D measures, computed by
/// walking the two cumulative distributions in sorted order.
pub fn ot0_1d_sorted(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, p: f64) -> Result<f64> {
    if alpha.dim() != 1 || beta.dim() != 1 {
        return Err(Error::invalid("the sorting oracle handles one-dimensional measures only"));
    }
    if p <= 0.0 || !p.is_finite() {
        return Err(Error::invalid(format!("cost exponent must be positive, got {p}")));
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        // Stable: ties keep their original order.
        idx.sort_by(|&a, &b| m.positions()[a].total_cmp(&m.positions()[b]));
        idx.into_iter()
            .map(|i| (m.positions()[i], m.weights()[i]))
            .collect::<Vec<_>>()
    };
    let (xs, ys) = (sorted(alpha), sorted(beta));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xs[0].1, ys[0].1);
    let mut total = 0.0;
    while i < xs.len() && j < ys.len() {
        let mass = ra.min(rb);
        total += mass * (xs[i].0 - ys[j].0).abs().powf(p);
        ra -= mass;
        rb -= mass;
        if ra <= rb {
            i += 1;
            if i < xs.len() {
                ra = xs[i].1;
            }
        } else {
            j += 1;
            if j < ys.len() {
                rb = ys[j].1;
            }
        }
    }
    Ok(total)
}

/// `⟨π, C⟩ + ε KL(π ‖ α⊗β)` for an explicit row-major `N×M` plan, with
/// `KL(π ‖ ξ) = Σ π log(π/ξ) − π + ξ`.
pub fn primal_value_dense(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    plan: &[f64],
    spec: CostSpec,
) -> Result<f64> {
    same_dim(alpha, beta)?;
    let (n, m) = (alpha.len(), beta.len());
    guard(n, m)?;
    if plan.len() != n * m {
        return Err(Error::invalid(format!("plan has {} entries, expected {}", plan.len(), n * m)));
    }
    if let Some(v) = plan.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("plan entry {v} is not a finite non-negative number")));
    }
    let eps = spec.epsilon();
    let mut transport = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..m {
            let pi = plan[i * m + j];
            let xi = alpha.weights()[i] * beta.weights()[j];
            transport += pi * ground_cost(spec.p(), alpha.point(i), beta.point(j));
            kl += xi - pi;
            if pi > 0.0 {
                if xi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                kl += pi * (pi / xi).ln();
            }
        }
    }
    Ok(transport + eps * kl)
}

/// `π_ij = α_i β_j exp((b_i + a_j − C(x_i, y_j))/ε)`.
pub fn plan_from_duals(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    b: &[f64],
    a: &[f64],
    spec: CostSpec,
) -> Result<Vec<f64>> {
    same_dim(alpha, beta)?;
    let (n, m) = (alpha.len(), beta.len());
    guard(n, m)?;
    if b.len() != n || a.len() != m {
        return Err(Error::invalid("dual vectors do not match the measures"));
    }
    let eps = spec.epsilon();
    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let c = ground_cost(spec.p(), alpha.point(i), beta.point(j));
            plan.push(alpha.weights()[i] * beta.weights()[j] * ((b[i] + a[j] - c) / eps).exp());
        }
    }
    Ok(plan)
}

/// `L1` distance between the marginals of `plan` and `(α, β)`.
pub fn marginal_error(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, plan: &[f64]) -> f64 {
    let m = beta.len();
    let rows: f64 = plan
        .chunks_exact(m)
        .zip(alpha.weights())
        .map(|(r, w)| (r.iter().sum::<f64>() - w).abs())
        .sum();
    let cols: f64 = (0..m)
        .map(|j| (plan.iter().skip(j).step_by(m).sum::<f64>() - beta.weights()[j]).abs())
        .sum();
    rows + cols
}

/// Central-difference gradient of a scalar function of a point.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|c| {
            probe[c] = x[c] + h;
            let up = f(&probe);
            probe[c] = x[c] - h;
            let down = f(&probe);
            probe[c] = x[c];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of `loss(α, β)` with respect to α.
///
/// `d_positions` perturbs each coordinate of each atom. `d_weights[i]` is the
/// derivative along the mass-preserving direction `e_i − e_0`, so
/// `d_weights[0] = 0` and the entries are comparable to analytic weight
/// gradients after subtracting their first entry.
pub fn finite_diff_gradient<F>(
    mut loss: F,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    h: f64,
) -> Result<LossGradient>
where
    F: FnMut(&DiscreteMeasure, &DiscreteMeasure) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let d = alpha.dim();
    let mut d_positions = vec![0.0; alpha.positions().len()];
    let mut x = alpha.positions().to_vec();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = loss(&alpha.with_positions(x.clone())?, beta)?;
        x[k] = orig - h;
        let down = loss(&alpha.with_positions(x.clone())?, beta)?;
        x[k] = orig;
        d_positions[k] = (up - down) / (2.0 * h);
    }
    let mut d_weights = vec![0.0; alpha.len()];
    if alpha.len() > 1 {
        if alpha.weights()[0] <= h {
            return Err(Error::invalid("first weight too small for the weight step"));
        }
        let mut w = alpha.weights().to_vec();
        for i in 1..alpha.len() {
            if w[i] <= h {
                return Err(Error::invalid(format!("weight {i} too small for the weight step")));
            }
            let eval = |s: f64, w: &mut Vec<f64>, loss: &mut F| -> Result<f64> {
                let (w0, wi) = (w[0], w[i]);
                w[i] = wi + s;
                w[0] = w0 - s;
                let m = DiscreteMeasure::from_flat(w, alpha.positions(), d);
                w[i] = wi;
                w[0] = w0;
                loss(&m?, beta)
            };
            let up = eval(h, &mut w, &mut loss)?;
            let down = eval(-h, &mut w, &mut loss)?;
            d_weights[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(LossGradient {
        d_weights,
        d_positions,
        dim: d,
    })
}

/// Result of [`negentropy_variational`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalMinimum {
    /// Best objective value found.
    pub value: f64,
    pub iterations: usize,
    /// Whether the gradient fell below tolerance within the budget.
    pub converged: bool,
}

/// Minimizes `J(μ) = Σ α_i log(α_i/μ_i) + ½ μᵀ K μ` over positive weights
/// `μ` on α's atoms, `K_ij = exp(−C(x_i, x_j)/ε)`, by damped Newton steps on
/// `log μ` with backtracking. The iterate values never increase.
pub fn negentropy_variational(alpha: &DiscreteMeasure, spec: CostSpec, iters: usize) -> Result<VariationalMinimum> {
    let n = alpha.len();
    if n > 2_000 {
        return Err(Error::TooLarge {
            rows: n,
            cols: n,
            limit: 2_000 * 2_000,
        });
    }
    let eps = spec.epsilon();
    let a = DVector::from_column_slice(alpha.weights());
    let k = DMatrix::from_fn(n, n, |i, j| (-ground_cost(spec.p(), alpha.point(i), alpha.point(j)) / eps).exp());
    let objective = |theta: &DVector<f64>| -> f64 {
        let mu = theta.map(f64::exp);
        let entropy: f64 = (0..n).map(|i| a[i] * (a[i].ln() - theta[i])).sum();
        entropy + 0.5 * mu.dot(&(&k * &mu))
    };

    let mut theta = a.map(f64::ln);
    let mut value = objective(&theta);
    let mut converged = false;
    let mut it = 0;
    while it < iters {
        it += 1;
        let mu = theta.map(f64::exp);
        let kmu = &k * &mu;
        let grad = mu.component_mul(&kmu) - &a;
        if grad.amax() <= 1e-15 {
            converged = true;
            break;
        }
        let mut hess = DMatrix::from_fn(n, n, |i, j| mu[i] * k[(i, j)] * mu[j]);
        for i in 0..n {
            hess[(i, i)] += mu[i] * kmu[i];
        }
        let dir = match hess.cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -grad.clone(),
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + step * &dir;
            let v = objective(&cand);
            if v <= value + 1e-4 * step * slope {
                theta = cand;
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No further decrease representable in floating point.
            converged = grad.amax() <= 1e-10;
            break;
        }
    }
    Ok(VariationalMinimum {
        value,
        iterations: it,
        converged,
    })
}

fn kernel_value(kernel: &MmdKernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let r = dist(x, y);
    let s = kernel.sigma();
    match kernel.kind() {
        MmdKernel::Energy => -r,
        MmdKernel::Gaussian => (-r * r / (2.0 * s * s)).exp(),
        MmdKernel::Laplacian => (-r / s).exp(),
    }
}

/// `½ Σ_ij ξ_i ξ_j k(z_i, z_j)` for `ξ = α − β` by a naive double loop.
pub fn mmd_bruteforce(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, kernel: MmdKernelSpec) -> Result<f64> {
    same_dim(alpha, beta)?;
    let big = alpha.len().max(beta.len());
    guard(big, big)?;
    let pair = |u: &DiscreteMeasure, v: &DiscreteMeasure| -> f64 {
        let mut s = 0.0;
        for i in 0..u.len() {
            for j in 0..v.len() {
                s += u.weights()[i] * v.weights()[j] * kernel_value(&kernel, u.point(i), v.point(j));
            }
        }
        s
    };
    Ok(0.5 * (pair(alpha, alpha) + pair(beta, beta)) - pair(alpha, beta))
}
