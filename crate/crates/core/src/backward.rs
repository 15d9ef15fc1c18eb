//! Least-squares Monte Carlo solvers for the backward equations: the scalar
//! BSDE with jumps (and every equation sharing its shape), the forward
//! adjoint SDE, the auxiliary cost pair, and the truncated singular backward
//! SPDE.
//!
//! Conditional expectations are realized by ridge-regularized regression on
//! caller-supplied state features. The backward SPDE discretization is
//! matched to the forward exponential-Euler scheme so that the duality
//! pairing telescopes exactly in expectation: the semigroup factor is applied
//! to the conditional part only, the drift multipliers act on that
//! conditional part, and the martingale integrands are the increment
//! projections of it.

use crate::forward::{LinearSpdeCoeffs, MeasureMode, SimulatedPath};
use crate::model::{BsdeArgs, Model};
use crate::noise::NoiseGrid;
use crate::spectral::{schatten_norm, ModeVector, SpectralSpace};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SolverError {
    #[error("regression design is rank deficient at step {step} (ridge {ridge:.3e})")]
    RankDeficient { step: usize, ridge: f64 },
    #[error("Picard iteration failed to converge at step {step} (delta {delta:.3e})")]
    PicardDiverged { step: usize, delta: f64 },
    #[error("ensemble too small: {m} paths for {features} features")]
    EnsembleTooSmall { m: usize, features: usize },
    #[error("inconsistent ensemble shapes")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BasisKind {
    /// Affine in the feature state.
    ModeLinear,
    /// Affine plus elementwise squares.
    ModeQuadratic,
    /// Per-coordinate powers up to the given degree.
    Polynomial(u32),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub max_features: usize,
}

impl RegressionBasis {
    pub fn mode_linear() -> Self {
        Self { kind: BasisKind::ModeLinear, max_features: 512 }
    }

    pub fn mode_quadratic() -> Self {
        Self { kind: BasisKind::ModeQuadratic, max_features: 512 }
    }

    pub fn n_features(&self, state_len: usize) -> usize {
        let raw = match self.kind {
            BasisKind::ModeLinear => 1 + state_len,
            BasisKind::ModeQuadratic => 1 + 2 * state_len,
            BasisKind::Polynomial(d) => 1 + state_len * d as usize,
        };
        raw.min(self.max_features)
    }

    pub fn features(&self, state: &DVector<f64>) -> DVector<f64> {
        let n = self.n_features(state.len());
        let mut out = DVector::zeros(n);
        out[0] = 1.0;
        let mut idx = 1;
        match self.kind {
            BasisKind::ModeLinear => {
                for &s in state.iter() {
                    if idx >= n {
                        break;
                    }
                    out[idx] = s;
                    idx += 1;
                }
            }
            BasisKind::ModeQuadratic => {
                for &s in state.iter() {
                    if idx >= n {
                        break;
                    }
                    out[idx] = s;
                    idx += 1;
                }
                for &s in state.iter() {
                    if idx >= n {
                        break;
                    }
                    out[idx] = s * s;
                    idx += 1;
                }
            }
            BasisKind::Polynomial(d) => {
                'outer: for p in 1..=d {
                    for &s in state.iter() {
                        if idx >= n {
                            break 'outer;
                        }
                        out[idx] = s.powi(p as i32);
                        idx += 1;
                    }
                }
            }
        }
        out
    }
}

/// Ridge-regularized normal-equation fit shared by all solvers at one step.
pub struct StepRegression {
    chol: Cholesky<f64, nalgebra::Dyn>,
    design: DMatrix<f64>,
}

impl StepRegression {
    /// `design` is `m x f`. The ridge level follows the trace of the Gram
    /// matrix so the regularization is scale-free.
    pub fn new(design: DMatrix<f64>, step: usize) -> Result<Self, SolverError> {
        let f = design.ncols();
        let gram = design.transpose() * &design;
        let trace: f64 = gram.diagonal().iter().sum();
        let mut ridge = 1e-8 * trace / f as f64;
        if ridge <= 0.0 {
            ridge = 1e-12;
        }
        for _ in 0..4 {
            let mut g = gram.clone();
            for i in 0..f {
                g[(i, i)] += ridge;
            }
            if let Some(chol) = Cholesky::new(g) {
                return Ok(Self { chol, design });
            }
            ridge *= 100.0;
        }
        Err(SolverError::RankDeficient { step, ridge })
    }

    /// Coefficients for a block of responses, `m x r -> f x r`.
    pub fn coefficients(&self, responses: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.design.transpose() * responses;
        self.chol.solve(&rhs)
    }

    /// Fitted values at the design points.
    pub fn fitted(&self, coeffs: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * coeffs
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Which process the martingale integrands of a backward equation load on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MartingaleForm {
    /// Written against the observed path (the controlled-state convention).
    Observation,
    /// Written against the innovation (the adjoint-equation convention).
    Innovation,
}

/// Solution of a scalar backward equation with jumps.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `m x (n_steps+1)` value trajectory; the terminal column is assigned
    /// pathwise, not regressed.
    pub y: DMatrix<f64>,
    /// Per step `m x n_w` integrands against the Wiener modes.
    pub z: Vec<DMatrix<f64>>,
    /// Per step `m x d` integrands against the observation/innovation.
    pub r: Vec<DMatrix<f64>>,
    /// Per step `m x K` per-mark jump integrands.
    pub gamma: Vec<DMatrix<f64>>,
    /// Ensemble value at time zero (trivial initial filtration).
    pub y0: f64,
    pub y0_se: f64,
}

impl BsdeSolution {
    pub fn z_at(&self, path: usize, k: usize) -> DVector<f64> {
        self.z[k].row(path).transpose()
    }
    pub fn r_at(&self, path: usize, k: usize) -> DVector<f64> {
        self.r[k].row(path).transpose()
    }
    pub fn gamma_at(&self, path: usize, k: usize) -> DVector<f64> {
        self.gamma[k].row(path).transpose()
    }
}

/// Scalar backward equation specification. The driver receives the already
/// fitted integrands of the current step and must return the mark-integrated
/// drift value.
pub struct ScalarBsdeSpec<'a> {
    pub terminal: &'a (dyn Fn(usize) -> f64 + Sync),
    /// `(path, k, y, z, r, gamma) -> integrated driver`.
    pub driver: &'a (dyn Fn(usize, usize, f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64
             + Sync),
    pub form: MartingaleForm,
    /// Sensor drift along the base trajectory, used for the measure
    /// correction whenever the written form and the simulation measure differ.
    pub h_at: &'a (dyn Fn(usize, usize) -> DVector<f64> + Sync),
}

pub struct BsdeOptions {
    pub n_picard: usize,
    pub picard_tol: f64,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self { n_picard: 5, picard_tol: 1e-10 }
    }
}

/// Generic scalar LSMC backward recursion on a simulated ensemble.
pub fn solve_scalar_bsde(
    spec: &ScalarBsdeSpec,
    noise: &[NoiseGrid],
    measure: MeasureMode,
    jump_weights: &[f64],
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<BsdeSolution, SolverError> {
    let m = noise.len();
    if m == 0 {
        return Err(SolverError::ShapeMismatch);
    }
    let n_steps = noise[0].grid.n_steps;
    let dt = noise[0].grid.dt();
    let n_w = noise[0].n_w();
    let d = noise[0].d();
    let n_marks = jump_weights.len();
    let probe = features(0, 0);
    let f = basis.n_features(probe.len());
    if m < 10 * f {
        return Err(SolverError::EnsembleTooSmall { m, features: f });
    }

    let counts: Vec<DMatrix<u32>> = noise.iter().map(|ng| ng.jump_counts(n_marks)).collect();

    let mut y = DMatrix::zeros(m, n_steps + 1);
    for p in 0..m {
        y[(p, n_steps)] = (spec.terminal)(p);
    }
    let mut z = vec![DMatrix::zeros(m, n_w); n_steps];
    let mut r = vec![DMatrix::zeros(m, d); n_steps];
    let mut gamma = vec![DMatrix::zeros(m, n_marks); n_steps];
    let mut y0_se = 0.0;

    // Indicator moments for the per-mark jump regressions.
    let q_ind: Vec<f64> = jump_weights.iter().map(|w| 1.0 - (-w * dt).exp()).collect();

    for k in (0..n_steps).rev() {
        let mut design = DMatrix::zeros(m, f);
        for p in 0..m {
            design.row_mut(p).copy_from(&basis.features(&features(p, k)).transpose());
        }
        let reg = StepRegression::new(design, k)?;

        // Responses: conditional mean, then increment projections.
        let n_resp = 1 + n_w + d + n_marks;
        let mut resp = DMatrix::zeros(m, n_resp);
        for p in 0..m {
            let ynext = y[(p, k + 1)];
            resp[(p, 0)] = ynext;
            for i in 0..n_w {
                resp[(p, 1 + i)] = ynext * noise[p].dw[(k, i)] / dt;
            }
            for j in 0..d {
                resp[(p, 1 + n_w + j)] = ynext * noise[p].du[(k, j)] / dt;
            }
            for mm in 0..n_marks {
                let ind = if counts[p][(k, mm)] > 0 { 1.0 } else { 0.0 };
                let denom = jump_weights[mm] * dt * (1.0 - q_ind[mm]);
                resp[(p, 1 + n_w + d + mm)] = ynext * (ind - q_ind[mm]) / denom;
            }
        }
        let coeffs = reg.coefficients(&resp);
        let fitted = reg.fitted(&coeffs);

        for p in 0..m {
            for i in 0..n_w {
                z[k][(p, i)] = fitted[(p, 1 + i)];
            }
            for j in 0..d {
                r[k][(p, j)] = fitted[(p, 1 + n_w + j)];
            }
            for mm in 0..n_marks {
                gamma[k][(p, mm)] = fitted[(p, 1 + n_w + d + mm)];
            }
        }

        // Measure correction: the conditional mean of the observation-form
        // martingale part is nonzero under the controlled measure and vice
        // versa.
        let mut worst_delta: f64 = 0.0;
        for p in 0..m {
            let cond = fitted[(p, 0)];
            let zrow = z[k].row(p).transpose();
            let rrow = r[k].row(p).transpose();
            let grow = gamma[k].row(p).transpose();
            let corr = match (measure, spec.form) {
                (MeasureMode::InnovationBrownian, MartingaleForm::Observation) => {
                    -rrow.dot(&(spec.h_at)(p, k))
                }
                (MeasureMode::ObservationBrownian, MartingaleForm::Innovation) => {
                    rrow.dot(&(spec.h_at)(p, k))
                }
                _ => 0.0,
            };
            let mut yk = cond;
            let mut delta = f64::INFINITY;
            for _ in 0..opts.n_picard {
                let drv = (spec.driver)(p, k, yk, &zrow, &rrow, &grow);
                let next = cond + dt * (drv + corr);
                delta = (next - yk).abs();
                yk = next;
                if delta <= opts.picard_tol {
                    break;
                }
            }
            worst_delta = worst_delta.max(delta);
            y[(p, k)] = yk;
        }
        if worst_delta > 1e-3 {
            return Err(SolverError::PicardDiverged { step: k, delta: worst_delta });
        }
        if k == 0 {
            let col: Vec<f64> = (0..m).map(|p| resp[(p, 0)]).collect();
            let (_, se) = crate::stats::mean_se(&col);
            y0_se = se;
        }
    }

    let y0 = y.column(0).sum() / m as f64;
    Ok(BsdeSolution { y, z, r, gamma, y0, y0_se })
}

/// Default feature state of the controlled system: mode coordinates plus the
/// current observation.
pub fn model_state_features(path: &SimulatedPath, k: usize) -> DVector<f64> {
    let nh = path.x.ncols();
    let d = path.y.ncols();
    let mut s = DVector::zeros(nh + d);
    for c in 0..nh {
        s[c] = path.x[(k, c)];
    }
    for j in 0..d {
        s[nh + j] = path.y[(k, j)];
    }
    s
}

/// Solve the controlled backward equation along a simulated ensemble.
pub fn solve_model_bsde(
    model: &dyn Model,
    paths: &[SimulatedPath],
    noise: &[NoiseGrid],
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<BsdeSolution, SolverError> {
    let dt = noise[0].grid.dt();
    let measure = paths[0].measure;
    let n_last = paths[0].n_steps();
    let terminal = move |p: usize| model.terminal_f(&paths[p].x_at(n_last));
    let driver = move |p: usize,
                       k: usize,
                       y: f64,
                       z: &DVector<f64>,
                       r: &DVector<f64>,
                       g: &DVector<f64>|
          -> f64 {
        let t = k as f64 * dt;
        model.driver_g_integrated(t, &paths[p].x_at(k), &paths[p].u_at(k), y, z, r, g)
    };
    let h_at = move |p: usize, k: usize| {
        model.h_obs(k as f64 * dt, &paths[p].x_at(k), &paths[p].u_at(k))
    };
    let features = move |p: usize, k: usize| model_state_features(&paths[p], k);
    let spec = ScalarBsdeSpec {
        terminal: &terminal,
        driver: &driver,
        form: MartingaleForm::Observation,
        h_at: &h_at,
    };
    solve_scalar_bsde(
        &spec,
        noise,
        measure,
        &model.jump_measure().weights,
        &features,
        basis,
        opts,
    )
}

/// Forward adjoint of the recursive value: pathwise Euler with exact
/// compensation, driven in innovation form.
pub fn solve_ell(
    model: &dyn Model,
    paths: &[SimulatedPath],
    noise: &[NoiseGrid],
    bsde: &BsdeSolution,
) -> DMatrix<f64> {
    use rayon::prelude::*;
    let m = paths.len();
    let n_steps = noise[0].grid.n_steps;
    let dt = noise[0].grid.dt();
    let dims = model.dims();
    let jm = model.jump_measure();
    let ell0 = -model.psi_dy(bsde.y0);

    let rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let counts = noise[p].jump_counts(dims.n_marks);
            let mut out = DVector::zeros(n_steps + 1);
            let mut l = ell0;
            out[0] = l;
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let xh = paths[p].x_at(k);
                let uh = paths[p].u_at(k);
                let zv = bsde.z_at(p, k);
                let rv = bsde.r_at(p, k);
                let gv = bsde.gamma_at(p, k);
                let yv = bsde.y[(p, k)];
                let db = paths[p].db_hat(model, k, dt);
                let h = model.h_obs(t, &xh, &uh);
                let dw = noise[p].dw.row(k).transpose();

                let mut drift = 0.0;
                let mut w_load = DVector::zeros(dims.n_w);
                let mut b_load = DVector::zeros(dims.d_obs);
                let mut jump_incr = 0.0;
                for mm in 0..dims.n_marks {
                    let w = jm.weights[mm];
                    let bs = BsdeArgs { y: yv, z: &zv, r: &rv, gamma_m: gv[mm] };
                    let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
                    let lg = model.run_cost_grad(t, &xh, &uh, &bs, mm);
                    drift += w * (gg.dy * l - lg.dy);
                    w_load.axpy(w, &(gg.dz * l - lg.dz), 1.0);
                    b_load.axpy(w, &(gg.dr * l - lg.dr), 1.0);
                    let cw = counts[(k, mm)] as f64 - w * dt;
                    if cw != 0.0 {
                        jump_incr += cw * (gg.dgamma * l - lg.dgamma);
                    }
                }
                b_load.axpy(-l, &h, 1.0);
                l += dt * drift + w_load.dot(&dw) + b_load.dot(&db) + jump_incr;
                out[k + 1] = l;
            }
            out
        })
        .collect();

    let mut ell = DMatrix::zeros(m, n_steps + 1);
    for (p, row) in rows.into_iter().enumerate() {
        ell.row_mut(p).copy_from(&row.transpose());
    }
    ell
}

/// Auxiliary scalar backward pair: the driver is the mark-integrated running
/// cost along the base trajectory, martingale parts in innovation form.
pub fn solve_auxiliary_pq(
    model: &dyn Model,
    paths: &[SimulatedPath],
    noise: &[NoiseGrid],
    bsde: &BsdeSolution,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<BsdeSolution, SolverError> {
    let dt = noise[0].grid.dt();
    let measure = paths[0].measure;
    let n_last = paths[0].n_steps();
    let terminal = move |p: usize| model.phi(&paths[p].x_at(n_last));
    let driver = move |p: usize,
                       k: usize,
                       _y: f64,
                       _z: &DVector<f64>,
                       _r: &DVector<f64>,
                       _g: &DVector<f64>|
          -> f64 {
        let t = k as f64 * dt;
        let zv = bsde.z_at(p, k);
        let rv = bsde.r_at(p, k);
        let gv = bsde.gamma_at(p, k);
        model.run_cost_integrated(
            t,
            &paths[p].x_at(k),
            &paths[p].u_at(k),
            bsde.y[(p, k)],
            &zv,
            &rv,
            &gv,
        )
    };
    let h_at = move |p: usize, k: usize| {
        model.h_obs(k as f64 * dt, &paths[p].x_at(k), &paths[p].u_at(k))
    };
    let features = move |p: usize, k: usize| model_state_features(&paths[p], k);
    let spec = ScalarBsdeSpec {
        terminal: &terminal,
        driver: &driver,
        form: MartingaleForm::Innovation,
        h_at: &h_at,
    };
    solve_scalar_bsde(
        &spec,
        noise,
        measure,
        &model.jump_measure().weights,
        &features,
        basis,
        opts,
    )
}

/// Terminal datum and drift forcing of a vector backward equation.
pub trait BspdeData: Sync {
    fn terminal(&self, path: usize) -> ModeVector;
    /// Accumulate `w * forcing(path, k)` into `acc`.
    fn forcing_add(&self, path: usize, k: usize, w: f64, acc: &mut ModeVector);
}

/// Solution of the truncated singular backward SPDE, stored as per-step
/// regression coefficient tables; values at the design states are recovered
/// through the same feature map that produced them.
pub struct BspdeSolution {
    /// Values at time zero per path.
    pub z0: Vec<ModeVector>,
    /// Per step `f x dim_h`: fitted conditional part (semigroup applied).
    pub zbar_coeffs: Vec<DMatrix<f64>>,
    /// Per step `f x (dim_h * n_w)`.
    pub q1_coeffs: Vec<DMatrix<f64>>,
    /// Per step `f x (dim_h * d)`.
    pub q2_coeffs: Vec<DMatrix<f64>>,
    /// Per step `f x (dim_h * K)`.
    pub q3_coeffs: Vec<DMatrix<f64>>,
    pub trunc_n: usize,
    pub basis: RegressionBasis,
}

impl BspdeSolution {
    pub fn zbar_at(&self, feats: &DVector<f64>, k: usize) -> ModeVector {
        (feats.transpose() * &self.zbar_coeffs[k]).transpose()
    }

    pub fn q1_col(&self, feats: &DVector<f64>, k: usize, i: usize, dim_h: usize) -> ModeVector {
        let block = self.q1_coeffs[k].columns(i * dim_h, dim_h);
        (feats.transpose() * block).transpose()
    }

    pub fn q1_matrix(
        &self,
        feats: &DVector<f64>,
        k: usize,
        dim_h: usize,
        n_w: usize,
    ) -> DMatrix<f64> {
        let flat = (feats.transpose() * &self.q1_coeffs[k]).transpose();
        DMatrix::from_fn(dim_h, n_w, |r, c| flat[c * dim_h + r])
    }

    pub fn q2_col(&self, feats: &DVector<f64>, k: usize, j: usize, dim_h: usize) -> ModeVector {
        let block = self.q2_coeffs[k].columns(j * dim_h, dim_h);
        (feats.transpose() * block).transpose()
    }

    pub fn q3_col(&self, feats: &DVector<f64>, k: usize, m: usize, dim_h: usize) -> ModeVector {
        let block = self.q3_coeffs[k].columns(m * dim_h, dim_h);
        (feats.transpose() * block).transpose()
    }
}

/// Backward solve of the singular equation with the drift series truncated at
/// `trunc_n`. Innovation increments are the raw auxiliary Gaussian columns,
/// so the ensemble must be simulated with the innovation as Brownian.
pub fn solve_singular_bspde(
    coeffs: &dyn LinearSpdeCoeffs,
    data: &dyn BspdeData,
    noise: &[NoiseGrid],
    space: &SpectralSpace,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    basis: &RegressionBasis,
    trunc_n: usize,
) -> Result<BspdeSolution, SolverError> {
    let m = noise.len();
    if m == 0 {
        return Err(SolverError::ShapeMismatch);
    }
    let n_steps = noise[0].grid.n_steps;
    let dt = noise[0].grid.dt();
    let dim = coeffs.dim_h();
    let n_w = coeffs.n_w();
    let d = coeffs.d_obs();
    let n_marks = coeffs.n_marks();
    let probe = features(0, 0);
    let f = basis.n_features(probe.len());
    if m < 5 * f {
        return Err(SolverError::EnsembleTooSmall { m, features: f });
    }
    let sg = space.semigroup_factors(dt).expect("dt >= 0");
    let counts: Vec<DMatrix<u32>> = noise.iter().map(|ng| ng.jump_counts(n_marks)).collect();

    let mut z_next: Vec<ModeVector> = (0..m).map(|p| data.terminal(p)).collect();
    let mut zbar_coeffs = vec![DMatrix::zeros(0, 0); n_steps];
    let mut q1_coeffs = vec![DMatrix::zeros(0, 0); n_steps];
    let mut q2_coeffs = vec![DMatrix::zeros(0, 0); n_steps];
    let mut q3_coeffs = vec![DMatrix::zeros(0, 0); n_steps];
    let mut z0: Vec<ModeVector> = Vec::new();

    for k in (0..n_steps).rev() {
        let mut design = DMatrix::zeros(m, f);
        for p in 0..m {
            design.row_mut(p).copy_from(&basis.features(&features(p, k)).transpose());
        }
        let reg = StepRegression::new(design, k)?;

        let n_resp = dim * (1 + n_w + d + n_marks);
        let mut resp = DMatrix::zeros(m, n_resp);
        for p in 0..m {
            let mut zp = z_next[p].clone();
            space.apply_semigroup_mut(&sg, &mut zp);
            for c in 0..dim {
                resp[(p, c)] = zp[c];
            }
            for i in 0..n_w {
                let w = noise[p].dw[(k, i)] / dt;
                for c in 0..dim {
                    resp[(p, dim * (1 + i) + c)] = zp[c] * w;
                }
            }
            for j in 0..d {
                let w = noise[p].du[(k, j)] / dt;
                for c in 0..dim {
                    resp[(p, dim * (1 + n_w + j) + c)] = zp[c] * w;
                }
            }
            for mm in 0..n_marks {
                let lam = coeffs.jump_weight(mm);
                let w = (counts[p][(k, mm)] as f64 - lam * dt) / (lam * dt);
                for c in 0..dim {
                    resp[(p, dim * (1 + n_w + d + mm) + c)] = zp[c] * w;
                }
            }
        }
        let cf = reg.coefficients(&resp);
        let fitted = reg.fitted(&cf);

        zbar_coeffs[k] = cf.columns(0, dim).into_owned();
        q1_coeffs[k] = cf.columns(dim, dim * n_w).into_owned();
        q2_coeffs[k] = cf.columns(dim * (1 + n_w), dim * d).into_owned();
        q3_coeffs[k] = cf.columns(dim * (1 + n_w + d), dim * n_marks).into_owned();

        let mut z_now: Vec<ModeVector> = Vec::with_capacity(m);
        for p in 0..m {
            let zbar = DVector::from_fn(dim, |c, _| fitted[(p, c)]);
            let mut drift = DVector::zeros(dim);
            coeffs.q1_adj_apply(p, k, &zbar, 1.0, &mut drift);
            for i in 0..trunc_n {
                let q1e = DVector::from_fn(dim, |c, _| fitted[(p, dim * (1 + i) + c)]);
                coeffs.k_adj_apply(p, k, i, &q1e, 1.0, &mut drift);
            }
            for j in 0..d {
                let q2e = DVector::from_fn(dim, |c, _| fitted[(p, dim * (1 + n_w + j) + c)]);
                coeffs.q2_adj_apply(p, k, j, &q2e, 1.0, &mut drift);
            }
            for mm in 0..n_marks {
                let q3e =
                    DVector::from_fn(dim, |c, _| fitted[(p, dim * (1 + n_w + d + mm) + c)]);
                coeffs.q3_adj_apply(p, k, mm, &q3e, coeffs.jump_weight(mm), &mut drift);
            }
            data.forcing_add(p, k, 1.0, &mut drift);
            z_now.push(&zbar + drift * dt);
        }
        if k == 0 {
            z0 = z_now.clone();
        }
        z_next = z_now;
    }

    Ok(BspdeSolution {
        z0,
        zbar_coeffs,
        q1_coeffs,
        q2_coeffs,
        q3_coeffs,
        trunc_n,
        basis: *basis,
    })
}

/// Weighted trace statistic of the Wiener integrand:
/// mean over paths of `sum_k dt (T - t_k)^{2 theta} ||Q1(t_k)||_1^2`.
#[derive(Debug, Clone, Serialize)]
pub struct TraceDiagnostic {
    pub statistic: f64,
    pub se: f64,
    pub theta: f64,
    pub n_paths: usize,
}

pub fn trace_diagnostic(
    sol: &BspdeSolution,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    dim_h: usize,
    n_w: usize,
    horizon: f64,
    n_steps: usize,
    theta: f64,
    n_paths: usize,
) -> TraceDiagnostic {
    use rayon::prelude::*;
    let dt = horizon / n_steps as f64;
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let feats = sol.basis.features(&features(p, k));
                let q1 = sol.q1_matrix(&feats, k, dim_h, n_w);
                let nuc = schatten_norm(&q1, 1.0).unwrap_or(f64::NAN);
                acc += dt * (horizon - t).powf(2.0 * theta) * nuc * nuc;
            }
            acc
        })
        .collect();
    let (mean, se) = crate::stats::mean_se(&samples);
    TraceDiagnostic { statistic: mean, se, theta, n_paths }
}
