//! Ground costs `C(x,y) = ‖x−y‖^p`, the Gibbs kernel `exp(−C/ε)` and the
//! MMD kernels.
//!
//! `ε` is expressed in raw cost units for both exponents: for `p = 2` it has
//! the units of a squared length, for `p = 1` of a length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost exponent `p ∈ {1, 2}` and entropic strength `ε > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    p: f64,
    epsilon: f64,
}

impl CostSpec {
    pub fn new(p: f64, epsilon: f64) -> Result<Self> {
        if p != 1.0 && p != 2.0 {
            return Err(Error::invalid(format!("cost exponent must be 1 or 2, got {p}")));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        Ok(Self { p, epsilon })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.p, epsilon)
    }

    /// `‖x−y‖^p`, checking dimensions.
    pub fn cost(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.eval(x, y))
    }

    /// `exp(−C(x,y)/ε)`.
    pub fn gibbs(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok((-self.cost(x, y)? / self.epsilon).exp())
    }

    #[inline]
    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq = sq_dist(x, y);
        if self.p == 2.0 {
            sq
        } else {
            sq.sqrt()
        }
    }

    /// Adds `scale · ∇_x C(x,y)` into `out`. For `p = 1` the gradient at
    /// `x = y` is taken to be zero.
    #[inline]
    pub(crate) fn add_grad(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        if self.p == 2.0 {
            for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                *o += scale * 2.0 * (a - b);
            }
        } else {
            let r = sq_dist(x, y).sqrt();
            if r > 0.0 {
                let s = scale / r;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o += s * (a - b);
                }
            }
        }
    }

    /// Lipschitz constant of `y ↦ C(x,y)` on a set of the given diameter:
    /// `p · diameter^(p−1)`.
    pub fn lipschitz_bound(&self, diameter: f64) -> f64 {
        self.p * diameter.powf(self.p - 1.0)
    }
}

/// Which kernel an MMD loss integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdKernel {
    /// `k(x,y) = −‖x−y‖`, conditionally positive.
    Energy,
    /// `k(x,y) = exp(−‖x−y‖²/2σ²)`.
    Gaussian,
    /// `k(x,y) = exp(−‖x−y‖/σ)`.
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdKernelSpec {
    kind: MmdKernel,
    sigma: f64,
}

impl MmdKernelSpec {
    pub fn energy() -> Self {
        Self {
            kind: MmdKernel::Energy,
            sigma: 1.0,
        }
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(MmdKernel::Gaussian, sigma)
    }

    pub fn laplacian(sigma: f64) -> Result<Self> {
        Self::new(MmdKernel::Laplacian, sigma)
    }

    /// `sigma` is ignored for the energy kernel.
    pub fn new(kind: MmdKernel, sigma: f64) -> Result<Self> {
        if kind != MmdKernel::Energy && (!(sigma > 0.0) || !sigma.is_finite()) {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Ok(Self { kind, sigma })
    }

    pub fn kind(&self) -> MmdKernel {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.eval(x, y))
    }

    #[inline]
    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq = sq_dist(x, y);
        match self.kind {
            MmdKernel::Energy => -sq.sqrt(),
            MmdKernel::Gaussian => (-sq / (2.0 * self.sigma * self.sigma)).exp(),
            MmdKernel::Laplacian => (-sq.sqrt() / self.sigma).exp(),
        }
    }

    /// Adds `scale · ∇_x k(x,y)` into `out`; zero at `x = y` for the
    /// non-smooth kernels.
    #[inline]
    pub(crate) fn add_grad(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let sq = sq_dist(x, y);
        let coef = match self.kind {
            MmdKernel::Energy => {
                if sq == 0.0 {
                    return;
                }
                -1.0 / sq.sqrt()
            }
            MmdKernel::Gaussian => {
                let s2 = self.sigma * self.sigma;
                -(-sq / (2.0 * s2)).exp() / s2
            }
            MmdKernel::Laplacian => {
                if sq == 0.0 {
                    return;
                }
                let r = sq.sqrt();
                -(-r / self.sigma).exp() / (self.sigma * r)
            }
        };
        let s = scale * coef;
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o += s * (a - b);
        }
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "points have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cost_values() {
        let l1 = CostSpec::new(1.0, 0.1).unwrap();
        let l2 = CostSpec::new(2.0, 0.1).unwrap();
        assert_eq!(l1.cost(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(l2.cost(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(l1.cost(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!(matches!(l1.cost(&[0.0], &[0.0, 1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(CostSpec::new(3.0, 0.1).is_err());
        assert!(CostSpec::new(1.0, 0.0).is_err());
        assert!(CostSpec::new(1.0, f64::INFINITY).is_err());
        assert!(MmdKernelSpec::gaussian(0.0).is_err());
        assert!(MmdKernelSpec::new(MmdKernel::Energy, 0.0).is_ok());
    }

    #[test]
    fn kernel_values() {
        let e = MmdKernelSpec::energy();
        let g = MmdKernelSpec::gaussian(0.5).unwrap();
        let l = MmdKernelSpec::laplacian(0.5).unwrap();
        assert_eq!(e.kernel(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(g.kernel(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(e.kernel(&[0.0], &[2.0]).unwrap(), -2.0);
        let r = 0.5 * 2f64.sqrt();
        assert_relative_eq!(g.kernel(&[0.0], &[r]).unwrap(), (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(l.kernel(&[0.0], &[1.0]).unwrap(), (-2.0f64).exp(), max_relative = 1e-15);
        assert!(matches!(g.kernel(&[0.0], &[0.0, 1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = [0.3, -0.7];
        let y = [1.1, 0.4];
        let h = 1e-6;
        let costs = [CostSpec::new(1.0, 1.0).unwrap(), CostSpec::new(2.0, 1.0).unwrap()];
        for c in costs {
            let mut g = [0.0; 2];
            c.add_grad(&x, &y, 1.0, &mut g);
            for d in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[d] += h;
                xm[d] -= h;
                let fd = (c.eval(&xp, &y) - c.eval(&xm, &y)) / (2.0 * h);
                assert_relative_eq!(g[d], fd, max_relative = 1e-7);
            }
        }
        let kernels = [
            MmdKernelSpec::energy(),
            MmdKernelSpec::gaussian(0.7).unwrap(),
            MmdKernelSpec::laplacian(0.7).unwrap(),
        ];
        for k in kernels {
            let mut g = [0.0; 2];
            k.add_grad(&x, &y, 1.0, &mut g);
            for d in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[d] += h;
                xm[d] -= h;
                let fd = (k.eval(&xp, &y) - k.eval(&xm, &y)) / (2.0 * h);
                assert_relative_eq!(g[d], fd, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn subgradient_zero_at_coincident_points() {
        let c = CostSpec::new(1.0, 1.0).unwrap();
        let mut g = [0.0; 2];
        c.add_grad(&[0.5, 0.5], &[0.5, 0.5], 1.0, &mut g);
        assert_eq!(g, [0.0, 0.0]);
        let mut g = [0.0; 2];
        MmdKernelSpec::energy().add_grad(&[0.5, 0.5], &[0.5, 0.5], 1.0, &mut g);
        assert_eq!(g, [0.0, 0.0]);
    }

    fn triple(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        let pt = move || prop::collection::vec(0.0..1.0f64, dim);
        (pt(), pt(), pt())
    }

    proptest! {
        #[test]
        fn cost_is_symmetric_and_nonnegative((x, y, _z) in triple(3), p in prop_oneof![Just(1.0), Just(2.0)]) {
            let c = CostSpec::new(p, 0.1).unwrap();
            let cxy = c.cost(&x, &y).unwrap();
            prop_assert!(cxy >= 0.0);
            prop_assert_eq!(cxy, c.cost(&y, &x).unwrap());
            prop_assert_eq!(c.cost(&x, &x).unwrap(), 0.0);
            let k = c.gibbs(&x, &y).unwrap();
            prop_assert!(k > 0.0 && k <= 1.0);
        }

        #[test]
        fn cost_is_lipschitz_on_the_unit_cube((x, y, z) in triple(3), p in prop_oneof![Just(1.0), Just(2.0)]) {
            let c = CostSpec::new(p, 0.1).unwrap();
            let kappa = c.lipschitz_bound(3f64.sqrt());
            let lhs = (c.cost(&x, &y).unwrap() - c.cost(&x, &z).unwrap()).abs();
            prop_assert!(lhs <= kappa * sq_dist(&y, &z).sqrt() + 1e-12);
        }
    }
}
