//! Finite-rank spectral representation of the state space.
//!
//! The generator `A` is diagonal in its own eigenbasis, so the semigroup
//! `e^{tA}` acts mode-wise as `exp(-lambda_i t)` and is exact at every time
//! step. Operator norms (operator / Hilbert-Schmidt / trace / Schatten-kappa)
//! reduce to singular-value norms of dense matrices at the retained rank.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type ModeVector = DVector<f64>;
pub type ModeOperator = DMatrix<f64>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SpectralError {
    #[error("dimension must be at least 1")]
    InvalidDimension,
    #[error("domain length must be positive, got {0}")]
    InvalidDomainLength(f64),
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("time grid entries must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("Schatten order must satisfy kappa >= 1, got {0}")]
    InvalidKappa(f64),
    #[error("eigenvalues must be non-negative and sorted non-decreasing")]
    InvalidEigenvalues,
}

/// How the eigenbasis of `A` is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Cosine modes on `[0, L]` with no-flux boundary: `lambda_i = (pi (i-1) / L)^2`.
    NeumannCosine,
    /// Sine modes on `[0, L]` with absorbing boundary: `lambda_i = (pi i / L)^2`.
    DirichletSine,
    /// Caller-supplied non-negative spectrum.
    AbstractDiagonal,
}

/// Eigenbasis, spectrum, and semigroup of the diagonal generator.
#[derive(Debug, Clone)]
pub struct SpectralSpace {
    dim_h: usize,
    eigenvalues: DVector<f64>,
    domain_length: f64,
    basis_kind: BasisKind,
}

impl SpectralSpace {
    pub fn new_neumann(dim_h: usize, domain_length: f64) -> Result<Self, SpectralError> {
        Self::validate(dim_h, domain_length)?;
        let eigenvalues = DVector::from_fn(dim_h, |i, _| {
            let k = i as f64;
            (std::f64::consts::PI * k / domain_length).powi(2)
        });
        Ok(Self { dim_h, eigenvalues, domain_length, basis_kind: BasisKind::NeumannCosine })
    }

    pub fn new_dirichlet(dim_h: usize, domain_length: f64) -> Result<Self, SpectralError> {
        Self::validate(dim_h, domain_length)?;
        let eigenvalues = DVector::from_fn(dim_h, |i, _| {
            let k = (i + 1) as f64;
            (std::f64::consts::PI * k / domain_length).powi(2)
        });
        Ok(Self { dim_h, eigenvalues, domain_length, basis_kind: BasisKind::DirichletSine })
    }

    pub fn new_abstract(
        eigenvalues: Vec<f64>,
        domain_length: f64,
    ) -> Result<Self, SpectralError> {
        Self::validate(eigenvalues.len(), domain_length)?;
        let sorted = eigenvalues.windows(2).all(|w| w[0] <= w[1]);
        if !sorted || eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(SpectralError::InvalidEigenvalues);
        }
        Ok(Self {
            dim_h: eigenvalues.len(),
            eigenvalues: DVector::from_vec(eigenvalues),
            domain_length,
            basis_kind: BasisKind::AbstractDiagonal,
        })
    }

    fn validate(dim_h: usize, domain_length: f64) -> Result<(), SpectralError> {
        if dim_h == 0 {
            return Err(SpectralError::InvalidDimension);
        }
        if !(domain_length > 0.0) {
            return Err(SpectralError::InvalidDomainLength(domain_length));
        }
        Ok(())
    }

    pub fn dim_h(&self) -> usize {
        self.dim_h
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    pub fn basis_kind(&self) -> BasisKind {
        self.basis_kind
    }

    /// Per-mode semigroup factors `exp(-lambda_i t)`.
    pub fn semigroup_factors(&self, t: f64) -> Result<DVector<f64>, SpectralError> {
        if t < 0.0 {
            return Err(SpectralError::NegativeTime(t));
        }
        Ok(self.eigenvalues.map(|l| (-l * t).exp()))
    }

    pub fn apply_semigroup(&self, t: f64, x: &ModeVector) -> Result<ModeVector, SpectralError> {
        debug_assert_eq!(x.len(), self.dim_h);
        let factors = self.semigroup_factors(t)?;
        Ok(x.component_mul(&factors))
    }

    /// In-place semigroup action, used in the time-stepping hot loops.
    pub fn apply_semigroup_mut(&self, factors: &DVector<f64>, x: &mut ModeVector) {
        debug_assert_eq!(x.len(), self.dim_h);
        x.component_mul_assign(factors);
    }

    /// `||e^{tA}||_2 = (sum_i exp(-2 lambda_i t))^{1/2}` at each grid time.
    pub fn semigroup_hs_profile(&self, t_grid: &[f64]) -> Result<Vec<f64>, SpectralError> {
        let mut out = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            if !(t > 0.0) {
                return Err(SpectralError::NonPositiveTime(t));
            }
            let s: f64 = self.eigenvalues.iter().map(|&l| (-2.0 * l * t).exp()).sum();
            out.push(s.sqrt());
        }
        Ok(out)
    }

    /// Least-squares fit of `log ||e^{tA}||_2 = log C - theta * log t` over a grid,
    /// returning `(C, theta)`. Diagnostic for the smoothing exponent of the semigroup.
    pub fn fit_decay_exponent(&self, t_grid: &[f64]) -> Result<(f64, f64), SpectralError> {
        let profile = self.semigroup_hs_profile(t_grid)?;
        let xs: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = profile.iter().map(|v| v.ln()).collect();
        let (slope, intercept) = crate::stats::linear_fit(&xs, &ys);
        Ok((intercept.exp(), -slope))
    }

    /// Values of the basis functions at a spatial point, for pointwise reconstruction.
    /// Only meaningful for the concrete 1-D bases.
    pub fn basis_values_at(&self, xi: f64) -> DVector<f64> {
        let l = self.domain_length;
        match self.basis_kind {
            BasisKind::NeumannCosine | BasisKind::AbstractDiagonal => {
                DVector::from_fn(self.dim_h, |i, _| {
                    if i == 0 {
                        (1.0 / l).sqrt()
                    } else {
                        (2.0 / l).sqrt() * (std::f64::consts::PI * i as f64 * xi / l).cos()
                    }
                })
            }
            BasisKind::DirichletSine => DVector::from_fn(self.dim_h, |i, _| {
                (2.0 / l).sqrt() * (std::f64::consts::PI * (i + 1) as f64 * xi / l).sin()
            }),
        }
    }
}

/// Midpoint quadrature paired with the basis, for pointwise (Nemytskii)
/// nonlinearities evaluated pseudo-spectrally.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// Quadrature nodes in the spatial domain.
    pub nodes: Vec<f64>,
    /// Shared midpoint weight `L / n`.
    pub weight: f64,
    /// `n_nodes x dim_h` synthesis matrix: coefficients -> point values.
    pub synthesis: DMatrix<f64>,
    /// `dim_h x n_nodes` analysis matrix: point values -> coefficients.
    pub analysis: DMatrix<f64>,
}

impl QuadratureGrid {
    pub fn new(space: &SpectralSpace, n_nodes: usize) -> Self {
        let l = space.domain_length();
        let weight = l / n_nodes as f64;
        let nodes: Vec<f64> = (0..n_nodes).map(|q| (q as f64 + 0.5) * weight).collect();
        let mut synthesis = DMatrix::zeros(n_nodes, space.dim_h());
        for (q, &xi) in nodes.iter().enumerate() {
            synthesis.row_mut(q).copy_from(&space.basis_values_at(xi).transpose());
        }
        let analysis = synthesis.transpose() * weight;
        Self { nodes, weight, synthesis, analysis }
    }

    pub fn to_grid(&self, coords: &ModeVector) -> DVector<f64> {
        &self.synthesis * coords
    }

    pub fn from_grid(&self, values: &DVector<f64>) -> ModeVector {
        &self.analysis * values
    }

    /// Matrix of the linearized pointwise map `x -> f(x(.))` in mode coordinates,
    /// given the pointwise derivative values `f'(x(xi_q))`.
    pub fn pointwise_jacobian(&self, deriv_values: &DVector<f64>) -> ModeOperator {
        let scaled = DMatrix::from_fn(self.synthesis.nrows(), self.synthesis.ncols(), |q, c| {
            deriv_values[q] * self.synthesis[(q, c)]
        });
        &self.analysis * scaled
    }
}

/// Schatten-kappa norm `(sum_i sigma_i^kappa)^{1/kappa}` over singular values.
/// `kappa = 2` is the Frobenius norm, `kappa = 1` the trace norm.
pub fn schatten_norm(op: &ModeOperator, kappa: f64) -> Result<f64, SpectralError> {
    if !(kappa >= 1.0) {
        return Err(SpectralError::InvalidKappa(kappa));
    }
    let sv = op.clone().singular_values();
    if kappa == 2.0 {
        return Ok(sv.iter().map(|s| s * s).sum::<f64>().sqrt());
    }
    if kappa == 1.0 {
        return Ok(sv.iter().sum());
    }
    Ok(sv.iter().map(|s| s.powf(kappa)).sum::<f64>().powf(1.0 / kappa))
}

/// Largest singular value.
pub fn operator_norm(op: &ModeOperator) -> f64 {
    op.clone().singular_values().iter().cloned().fold(0.0f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn neumann_spectrum_first_mode_is_zero() {
        let s = SpectralSpace::new_neumann(1, 1.0).unwrap();
        assert_eq!(s.eigenvalues()[0], 0.0);
    }

    #[test]
    fn neumann_spectrum_matches_analytic_formula() {
        let s = SpectralSpace::new_neumann(3, 1.0).unwrap();
        assert_relative_eq!(s.eigenvalues()[0], 0.0);
        assert_relative_eq!(s.eigenvalues()[1], PI * PI, max_relative = 1e-14);
        assert_relative_eq!(s.eigenvalues()[2], 4.0 * PI * PI, max_relative = 1e-14);
    }

    #[test]
    fn dirichlet_spectrum_matches_analytic_formula() {
        let s = SpectralSpace::new_dirichlet(2, 2.0).unwrap();
        assert_relative_eq!(s.eigenvalues()[0], (PI / 2.0).powi(2), max_relative = 1e-14);
        assert_relative_eq!(s.eigenvalues()[1], PI * PI, max_relative = 1e-14);
    }

    #[test]
    fn rejects_degenerate_construction() {
        assert!(SpectralSpace::new_neumann(0, 1.0).is_err());
        assert!(SpectralSpace::new_neumann(4, 0.0).is_err());
        assert!(SpectralSpace::new_neumann(4, -1.0).is_err());
        assert!(SpectralSpace::new_abstract(vec![1.0, 0.5], 1.0).is_err());
        assert!(SpectralSpace::new_abstract(vec![-0.1, 0.5], 1.0).is_err());
    }

    #[test]
    fn semigroup_identity_at_zero_and_scalar_decay() {
        let s = SpectralSpace::new_abstract(vec![0.0, 4.0], 1.0).unwrap();
        let x = DVector::from_vec(vec![0.7, 1.0]);
        let y = s.apply_semigroup(0.0, &x).unwrap();
        assert_eq!(y, x);
        let y = s.apply_semigroup(0.5, &x).unwrap();
        assert_relative_eq!(y[1], (-2.0f64).exp(), max_relative = 1e-14);
        assert!(s.apply_semigroup(-0.1, &x).is_err());
    }

    #[test]
    fn hs_profile_small_cases() {
        let s = SpectralSpace::new_abstract(vec![0.0], 1.0).unwrap();
        assert_relative_eq!(s.semigroup_hs_profile(&[0.3]).unwrap()[0], 1.0);
        let s = SpectralSpace::new_abstract(vec![0.0, 1.0], 1.0).unwrap();
        let t = 2.0f64.ln();
        assert_relative_eq!(
            s.semigroup_hs_profile(&[t]).unwrap()[0],
            1.25f64.sqrt(),
            max_relative = 1e-14
        );
        assert!(s.semigroup_hs_profile(&[0.0]).is_err());
    }

    #[test]
    fn decay_fit_matches_independent_fit_and_flattens_on_wide_window() {
        // Exact mode sum computed here independently of the implementation path.
        let dim = 64usize;
        let grid: Vec<f64> = (0..=8).map(|g| 10f64.powf(-3.0 + 0.25 * g as f64)).collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &t in &grid {
            let sum: f64 = (0..dim).map(|k| (-2.0 * (PI * k as f64).powi(2) * t).exp()).sum();
            xs.push(t.ln());
            ys.push(sum.sqrt().ln());
        }
        let n = xs.len() as f64;
        let xm = xs.iter().sum::<f64>() / n;
        let ym = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        let oracle_slope = sxy / sxx;

        let s = SpectralSpace::new_neumann(dim, 1.0).unwrap();
        let (_, theta) = s.fit_decay_exponent(&grid).unwrap();
        assert_relative_eq!(-theta, oracle_slope, max_relative = 1e-12);
        // The constant Neumann mode flattens the profile on this window: the
        // fitted exponent sits near 0.2, well below the small-t limit 0.25.
        assert!(theta > 0.15 && theta < 0.30, "theta = {theta}");
    }

    #[test]
    fn decay_fit_reaches_asymptotic_quarter_on_small_time_window() {
        let s = SpectralSpace::new_neumann(512, 1.0).unwrap();
        let grid: Vec<f64> = (0..=8).map(|g| 10f64.powf(-6.0 + 0.25 * g as f64)).collect();
        let (_, theta) = s.fit_decay_exponent(&grid).unwrap();
        assert!((theta - 0.25).abs() <= 0.05, "theta = {theta}");
    }

    #[test]
    fn schatten_norms_of_identity_and_rank_one() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert_relative_eq!(schatten_norm(&id, 2.0).unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(schatten_norm(&id, 1.0).unwrap(), 4.0, max_relative = 1e-12);
        let u = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let op = &u * v.transpose();
        for kappa in [1.0, 1.7, 2.0, 5.0] {
            assert_relative_eq!(schatten_norm(&op, kappa).unwrap(), 1.0, max_relative = 1e-10);
        }
        assert!(schatten_norm(&id, 0.5).is_err());
    }

    #[test]
    fn quadrature_roundtrip_and_pointwise_jacobian() {
        let s = SpectralSpace::new_neumann(8, 1.0).unwrap();
        let quad = QuadratureGrid::new(&s, 32);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let back = quad.from_grid(&quad.to_grid(&x));
        assert_relative_eq!((back - &x).norm(), 0.0, epsilon = 1e-10);

        // Jacobian of x -> x^2 (pointwise) against finite differences in mode space.
        let f = |v: &DVector<f64>| quad.from_grid(&quad.to_grid(v).map(|p| p * p));
        let dvals = quad.to_grid(&x).map(|p| 2.0 * p);
        let jac = quad.pointwise_jacobian(&dvals);
        let h = 1e-6;
        for c in 0..8 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert_relative_eq!((jac.column(c) - fd).norm(), 0.0, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn semigroup_is_contraction(t in 0.0f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let eigs = {
                let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..30.0)).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v
            };
            let s = SpectralSpace::new_abstract(eigs, 1.0).unwrap();
            let x = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let y = s.apply_semigroup(t, &x).unwrap();
            prop_assert!(y.norm() <= x.norm() + 1e-14);
        }

        #[test]
        fn semigroup_law(t in 0.0f64..2.0, u in 0.0f64..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let eigs = {
                let mut v: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..10.0)).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v
            };
            let s = SpectralSpace::new_abstract(eigs, 1.0).unwrap();
            let x = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let a = s.apply_semigroup(t, &s.apply_semigroup(u, &x).unwrap()).unwrap();
            let b = s.apply_semigroup(t + u, &x).unwrap();
            let rel = (a - &b).norm() / (1.0 + b.norm());
            prop_assert!(rel <= 1e-12);
        }

        #[test]
        fn schatten_norm_ordering_and_ideal_property(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let n1 = schatten_norm(&a, 1.0).unwrap();
            let n2 = schatten_norm(&a, 2.0).unwrap();
            let n4 = schatten_norm(&a, 4.0).unwrap();
            prop_assert!(n4 <= n2 * (1.0 + 1e-10));
            prop_assert!(n2 <= n1 * (1.0 + 1e-10));
            for kappa in [1.0, 2.0, 3.0] {
                let lhs = schatten_norm(&(&a * &b), kappa).unwrap();
                let rhs = operator_norm(&a) * schatten_norm(&b, kappa).unwrap();
                prop_assert!(lhs <= rhs * (1.0 + 1e-10));
            }
        }
    }
}
