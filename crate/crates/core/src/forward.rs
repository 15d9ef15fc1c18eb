//! Exponential-Euler time stepping of the forward equations: the controlled
//! state, its first variation along a control direction, generic linear
//! equations with truncated series forcings, and the operator-valued
//! stochastic flow.
//!
//! One scheme is used everywhere: the semigroup factor is applied to the
//! whole cell update, jumps are aggregated per cell at the cell-start state,
//! and the compensator is subtracted exactly via the finite mark sum.

use crate::model::{ControlLaw, Model, ObsState};
use crate::noise::NoiseGrid;
use crate::spectral::{ModeOperator, ModeVector};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("grid mismatch between path and noise")]
    GridMismatch,
}

/// Which driving role the auxiliary Gaussian columns play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureMode {
    /// The observed path itself is the Brownian columns; plain ensemble
    /// averages are reference-measure expectations.
    ObservationBrownian,
    /// The innovation is the Brownian columns and the observed path is
    /// reconstructed from the sensor drift; plain averages are expectations
    /// under the controlled measure.
    InnovationBrownian,
}

/// One simulated trajectory: states, observations, applied controls, and the
/// running quadratic variation of the observation channels.
#[derive(Debug, Clone)]
pub struct SimulatedPath {
    /// `(n_steps+1) x dim_h` mode snapshots.
    pub x: DMatrix<f64>,
    /// `(n_steps+1) x d` observed path, starting at zero.
    pub y: DMatrix<f64>,
    /// `(n_steps+1) x d` running quadratic-variation proxy of the observation.
    pub qv: DMatrix<f64>,
    /// `n_steps x n_ctrl` applied controls.
    pub u: DMatrix<f64>,
    pub measure: MeasureMode,
}

impl SimulatedPath {
    pub fn n_steps(&self) -> usize {
        self.u.nrows()
    }

    pub fn x_at(&self, k: usize) -> ModeVector {
        self.x.row(k).transpose()
    }

    pub fn u_at(&self, k: usize) -> DVector<f64> {
        self.u.row(k).transpose()
    }

    pub fn dy(&self, k: usize) -> DVector<f64> {
        (self.y.row(k + 1) - self.y.row(k)).transpose()
    }

    pub fn obs_at(&self, k: usize) -> ObsState {
        ObsState { y: self.y.row(k).transpose(), qv: self.qv.row(k).transpose() }
    }

    /// Innovation increment at step `k` for the given model: `dY_k - h_k dt`.
    pub fn db_hat(&self, model: &dyn Model, k: usize, dt: f64) -> DVector<f64> {
        let h = model.h_obs(k as f64 * dt, &self.x_at(k), &self.u_at(k));
        self.dy(k) - h * dt
    }

    /// Sensor drift evaluated along the path, `n_steps x d`.
    pub fn h_path(&self, model: &dyn Model, dt: f64) -> DMatrix<f64> {
        let d = self.y.ncols();
        let mut out = DMatrix::zeros(self.n_steps(), d);
        for k in 0..self.n_steps() {
            let h = model.h_obs(k as f64 * dt, &self.x_at(k), &self.u_at(k));
            out.row_mut(k).copy_from(&h.transpose());
        }
        out
    }
}

/// Simulate the controlled state and observation on one noise path.
pub fn simulate_forward(
    model: &dyn Model,
    law: &dyn ControlLaw,
    ng: &NoiseGrid,
    x0: &ModeVector,
    measure: MeasureMode,
) -> Result<SimulatedPath, SimError> {
    let dims = model.dims();
    let n_steps = ng.grid.n_steps;
    let dt = ng.grid.dt();
    let jm = model.jump_measure();
    let counts = ng.jump_counts(jm.n_marks());
    let sg = model.space().semigroup_factors(dt).expect("dt >= 0");

    let mut x = DMatrix::zeros(n_steps + 1, dims.dim_h);
    let mut y = DMatrix::zeros(n_steps + 1, dims.d_obs);
    let mut qv = DMatrix::zeros(n_steps + 1, dims.d_obs);
    let mut u_hist = DMatrix::zeros(n_steps, dims.n_ctrl);
    x.row_mut(0).copy_from(&x0.transpose());

    let mut xk = x0.clone();
    let mut obs = ObsState::start(dims.d_obs);
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let u = law.control(t, &obs);
        u_hist.row_mut(k).copy_from(&u.transpose());

        let h = model.h_obs(t, &xk, &u);
        let du_row = ng.du.row(k).transpose();
        let dy = match measure {
            MeasureMode::ObservationBrownian => du_row,
            MeasureMode::InnovationBrownian => &h * dt + du_row,
        };

        // Drift of the observation-driven form.
        let mut incr = model.drift(t, &xk, &u);
        for j in 0..dims.d_obs {
            incr.axpy(-h[j], &model.g2(t, &xk, &u, j), 1.0);
        }
        incr *= dt;
        incr += model.g1(t, &xk, &u) * ng.dw.row(k).transpose();
        for j in 0..dims.d_obs {
            incr.axpy(dy[j], &model.g2(t, &xk, &u, j), 1.0);
        }
        for m in 0..jm.n_marks() {
            let c = counts[(k, m)] as f64;
            let w = c - jm.weights[m] * dt;
            if w != 0.0 {
                incr.axpy(w, &model.theta(t, &xk, &u, m), 1.0);
            }
        }

        xk += incr;
        model.space().apply_semigroup_mut(&sg, &mut xk);
        if xk.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step: k });
        }
        x.row_mut(k + 1).copy_from(&xk.transpose());
        obs.advance(&dy);
        y.row_mut(k + 1).copy_from(&obs.y.transpose());
        qv.row_mut(k + 1).copy_from(&obs.qv.transpose());
    }
    Ok(SimulatedPath { x, y, qv, u: u_hist, measure })
}

/// Simulate an ensemble in deterministic path order.
pub fn simulate_ensemble(
    model: &dyn Model,
    law: &dyn ControlLaw,
    noise: &[NoiseGrid],
    x0: &ModeVector,
    measure: MeasureMode,
) -> Result<Vec<SimulatedPath>, SimError> {
    noise
        .par_iter()
        .map(|ng| simulate_forward(model, law, ng, x0, measure))
        .collect()
}

/// Direction values along a simulated path, `n_steps x n_ctrl`.
pub fn direction_along(
    law: &dyn ControlLaw,
    hat: &SimulatedPath,
    dt: f64,
) -> DMatrix<f64> {
    let n = hat.n_steps();
    let mut out = DMatrix::zeros(n, hat.u.ncols());
    for k in 0..n {
        let v = law.control(k as f64 * dt, &hat.obs_at(k));
        out.row_mut(k).copy_from(&v.transpose());
    }
    out
}

/// First variation of the state along a direction, on the same noise and
/// frozen along the given trajectory. Starts from zero, driven in innovation
/// form.
pub fn simulate_first_variation(
    model: &dyn Model,
    hat: &SimulatedPath,
    ng: &NoiseGrid,
    v_path: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SimError> {
    let dims = model.dims();
    let n_steps = ng.grid.n_steps;
    if hat.n_steps() != n_steps {
        return Err(SimError::GridMismatch);
    }
    let dt = ng.grid.dt();
    let jm = model.jump_measure();
    let counts = ng.jump_counts(jm.n_marks());
    let sg = model.space().semigroup_factors(dt).expect("dt >= 0");

    let mut out = DMatrix::zeros(n_steps + 1, dims.dim_h);
    let mut x1 = DVector::zeros(dims.dim_h);
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let xh = hat.x_at(k);
        let uh = hat.u_at(k);
        let v = v_path.row(k).transpose();
        let db = hat.db_hat(model, k, dt);
        let dw = ng.dw.row(k).transpose();

        // Drift multiplier and direction forcing of the innovation form.
        let hdx = model.h_dx(t, &xh, &uh);
        let hdu = model.h_du(t, &xh, &uh);
        let mut drift = model.drift_dx(t, &xh, &uh) * &x1 + model.drift_du(t, &xh, &uh) * &v;
        for j in 0..dims.d_obs {
            let g2 = model.g2(t, &xh, &uh, j);
            let coeff = hdx.row(j).transpose().dot(&x1) + hdu.row(j).transpose().dot(&v);
            drift.axpy(-coeff, &g2, 1.0);
        }

        let mut incr = drift * dt;
        incr += model.g1_dx_combo(t, &xh, &uh, &dw) * &x1;
        incr += model.g1_du_combo(t, &xh, &uh, &dw, &v);
        for j in 0..dims.d_obs {
            incr += (model.g2_dx(t, &xh, &uh, j) * &x1 + model.g2_du(t, &xh, &uh, j) * &v)
                * db[j];
        }
        for m in 0..jm.n_marks() {
            let w = counts[(k, m)] as f64 - jm.weights[m] * dt;
            if w != 0.0 {
                incr += (model.theta_dx(t, &xh, &uh, m) * &x1
                    + model.theta_du(t, &xh, &uh, m) * &v)
                    * w;
            }
        }

        x1 += incr;
        model.space().apply_semigroup_mut(&sg, &mut x1);
        if x1.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step: k });
        }
        out.row_mut(k + 1).copy_from(&x1.transpose());
    }
    Ok(out)
}

/// One-step transfer matrix of the homogeneous linear equation frozen along a
/// trajectory: the flow over a cell is a left product of these.
pub fn flow_transfer_matrix(
    model: &dyn Model,
    hat: &SimulatedPath,
    ng: &NoiseGrid,
    counts: &DMatrix<u32>,
    sg: &DVector<f64>,
    k: usize,
) -> ModeOperator {
    let dims = model.dims();
    let dt = ng.grid.dt();
    let t = k as f64 * dt;
    let xh = hat.x_at(k);
    let uh = hat.u_at(k);
    let db = hat.db_hat(model, k, dt);
    let dw = ng.dw.row(k).transpose();
    let jm = model.jump_measure();

    let mut s = ModeOperator::identity(dims.dim_h, dims.dim_h);
    let hdx = model.h_dx(t, &xh, &uh);
    let mut drift = model.drift_dx(t, &xh, &uh);
    for j in 0..dims.d_obs {
        let g2 = model.g2(t, &xh, &uh, j);
        // rank-one correction G2^j (h^j)_x
        drift -= g2 * hdx.row(j);
    }
    s += drift * dt;
    s += model.g1_dx_combo(t, &xh, &uh, &dw);
    for j in 0..dims.d_obs {
        s += model.g2_dx(t, &xh, &uh, j) * db[j];
    }
    for m in 0..jm.n_marks() {
        let w = counts[(k, m)] as f64 - jm.weights[m] * dt;
        if w != 0.0 {
            s += model.theta_dx(t, &xh, &uh, m) * w;
        }
    }
    // Semigroup factor applied to the whole cell update, row-wise.
    for (r, f) in sg.iter().enumerate() {
        s.row_mut(r).scale_mut(*f);
    }
    s
}

/// All per-step transfer matrices of a path.
pub fn flow_transfer_matrices(
    model: &dyn Model,
    hat: &SimulatedPath,
    ng: &NoiseGrid,
) -> Vec<ModeOperator> {
    let counts = ng.jump_counts(model.jump_measure().n_marks());
    let sg = model.space().semigroup_factors(ng.grid.dt()).expect("dt >= 0");
    (0..hat.n_steps())
        .map(|k| flow_transfer_matrix(model, hat, ng, &counts, &sg, k))
        .collect()
}

/// Flow operators from a fixed start index: entry `k` holds the map from
/// states at `s_index` to states at `k` (identity for `k <= s_index`).
pub fn flow_path(transfers: &[ModeOperator], dim_h: usize, s_index: usize) -> Vec<ModeOperator> {
    let mut out = Vec::with_capacity(transfers.len() + 1);
    let mut phi = ModeOperator::identity(dim_h, dim_h);
    for k in 0..=transfers.len() {
        if k > s_index {
            phi = &transfers[k - 1] * phi;
        }
        out.push(phi.clone());
    }
    out
}

/// Homogeneous linear-equation solution by repeated transfer application;
/// arithmetic matches the flow columns exactly.
pub fn propagate_with_transfers(
    transfers: &[ModeOperator],
    s_index: usize,
    x: &ModeVector,
) -> Vec<ModeVector> {
    let mut out = vec![DVector::zeros(x.len()); transfers.len() + 1];
    let mut cur = x.clone();
    out[s_index] = cur.clone();
    for k in s_index..transfers.len() {
        cur = &transfers[k] * cur;
        out[k + 1] = cur.clone();
    }
    out
}

/// Coefficient provider of a generic linear equation with series loadings.
/// All `*_apply` and `*_add` hooks accumulate `w * (term)` into `acc`;
/// adjoint hooks apply the transposed multipliers for the dual equation.
pub trait LinearSpdeCoeffs: Sync {
    fn dim_h(&self) -> usize;
    fn n_w(&self) -> usize;
    fn d_obs(&self) -> usize;
    fn n_marks(&self) -> usize;
    /// Series truncation on the state loadings.
    fn trunc_n(&self) -> usize;
    /// Series truncation on the chi forcing.
    fn trunc_m(&self) -> usize;
    /// Intensity of mark `m`, used for the exact compensator.
    fn jump_weight(&self, m: usize) -> f64;

    fn q1_apply(&self, path: usize, k: usize, y: &ModeVector, w: f64, acc: &mut ModeVector);
    fn q1_adj_apply(&self, path: usize, k: usize, z: &ModeVector, w: f64, acc: &mut ModeVector);
    fn k_apply(
        &self,
        path: usize,
        k: usize,
        i: usize,
        y: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );
    fn k_adj_apply(
        &self,
        path: usize,
        k: usize,
        i: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );
    fn q2_apply(
        &self,
        path: usize,
        k: usize,
        j: usize,
        y: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );
    fn q2_adj_apply(
        &self,
        path: usize,
        k: usize,
        j: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );
    fn q3_apply(
        &self,
        path: usize,
        k: usize,
        m: usize,
        y: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );
    fn q3_adj_apply(
        &self,
        path: usize,
        k: usize,
        m: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    );

    fn r_dag_add(&self, path: usize, k: usize, w: f64, acc: &mut ModeVector);
    fn k_chi_add(&self, path: usize, k: usize, i: usize, w: f64, acc: &mut ModeVector);
    fn gamma_col_add(&self, path: usize, k: usize, i: usize, w: f64, acc: &mut ModeVector);
    fn r2_add(&self, path: usize, k: usize, j: usize, w: f64, acc: &mut ModeVector);
    fn r3_add(&self, path: usize, k: usize, m: usize, w: f64, acc: &mut ModeVector);
}

/// Simulate the generic linear equation from `y0` at `s_index` on one path.
/// The innovation increments must be supplied by the caller (they depend on
/// the base trajectory in model-derived instances).
pub fn simulate_linear_spde(
    coeffs: &dyn LinearSpdeCoeffs,
    ng: &NoiseGrid,
    path: usize,
    db: &DMatrix<f64>,
    y0: &ModeVector,
    s_index: usize,
    space: &crate::spectral::SpectralSpace,
) -> Result<DMatrix<f64>, SimError> {
    let n_steps = ng.grid.n_steps;
    let dt = ng.grid.dt();
    let dim = coeffs.dim_h();
    let counts = ng.jump_counts(coeffs.n_marks());
    let sg = space.semigroup_factors(dt).expect("dt >= 0");

    let mut out = DMatrix::zeros(n_steps + 1, dim);
    let mut yk = y0.clone();
    out.row_mut(s_index).copy_from(&yk.transpose());
    for k in s_index..n_steps {
        let mut incr = DVector::zeros(dim);
        coeffs.q1_apply(path, k, &yk, dt, &mut incr);
        coeffs.r_dag_add(path, k, dt, &mut incr);
        for i in 0..coeffs.trunc_n() {
            let w = ng.dw[(k, i)];
            coeffs.k_apply(path, k, i, &yk, w, &mut incr);
        }
        for i in 0..coeffs.trunc_m() {
            coeffs.k_chi_add(path, k, i, ng.dw[(k, i)], &mut incr);
        }
        for i in 0..coeffs.n_w() {
            coeffs.gamma_col_add(path, k, i, ng.dw[(k, i)], &mut incr);
        }
        for j in 0..coeffs.d_obs() {
            coeffs.q2_apply(path, k, j, &yk, db[(k, j)], &mut incr);
            coeffs.r2_add(path, k, j, db[(k, j)], &mut incr);
        }
        for m in 0..coeffs.n_marks() {
            let w = counts[(k, m)] as f64 - coeffs.jump_weight(m) * dt;
            if w != 0.0 {
                coeffs.q3_apply(path, k, m, &yk, w, &mut incr);
                coeffs.r3_add(path, k, m, w, &mut incr);
            }
        }
        yk += incr;
        space.apply_semigroup_mut(&sg, &mut yk);
        if yk.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step: k });
        }
        out.row_mut(k + 1).copy_from(&yk.transpose());
    }
    Ok(out)
}

/// Coefficients of the first-variation equation frozen along a base
/// trajectory, with the direction forcing entering through the control
/// derivatives of every coefficient. Instances of the general linear
/// equation used by the duality machinery.
pub struct VariationCoeffs<'a> {
    pub model: &'a dyn Model,
    pub hat: &'a SimulatedPath,
    /// Direction values along the base path, `n_steps x n_ctrl`.
    pub v_path: &'a DMatrix<f64>,
    pub dt: f64,
    /// Optional replacement of the drift forcing (bounded test forcings).
    pub r_dag_override: Option<&'a (dyn Fn(usize, usize) -> ModeVector + Sync)>,
    /// Optional replacement of the series forcing columns.
    pub gamma_override: Option<&'a (dyn Fn(usize, usize, usize) -> ModeVector + Sync)>,
    pub trunc_n: usize,
    pub trunc_m: usize,
}

impl VariationCoeffs<'_> {
    fn args(&self, k: usize) -> (f64, ModeVector, DVector<f64>, DVector<f64>) {
        let t = k as f64 * self.dt;
        (t, self.hat.x_at(k), self.hat.u_at(k), self.v_path.row(k).transpose())
    }
}

impl LinearSpdeCoeffs for VariationCoeffs<'_> {
    fn dim_h(&self) -> usize {
        self.model.dims().dim_h
    }
    fn n_w(&self) -> usize {
        self.model.dims().n_w
    }
    fn d_obs(&self) -> usize {
        self.model.dims().d_obs
    }
    fn n_marks(&self) -> usize {
        self.model.dims().n_marks
    }
    fn trunc_n(&self) -> usize {
        self.trunc_n
    }
    fn trunc_m(&self) -> usize {
        self.trunc_m
    }
    fn jump_weight(&self, m: usize) -> f64 {
        self.model.jump_measure().weights[m]
    }

    fn q1_apply(&self, _path: usize, k: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        let hdx = self.model.h_dx(t, &xh, &uh);
        acc.axpy(w, &(self.model.drift_dx(t, &xh, &uh) * y), 1.0);
        for j in 0..self.d_obs() {
            let coeff = hdx.row(j).transpose().dot(y);
            acc.axpy(-w * coeff, &self.model.g2(t, &xh, &uh, j), 1.0);
        }
    }

    fn q1_adj_apply(&self, _path: usize, k: usize, z: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        let hdx = self.model.h_dx(t, &xh, &uh);
        acc.axpy(w, &(self.model.drift_dx(t, &xh, &uh).transpose() * z), 1.0);
        for j in 0..self.d_obs() {
            let coeff = self.model.g2(t, &xh, &uh, j).dot(z);
            acc.axpy(-w * coeff, &hdx.row(j).transpose(), 1.0);
        }
    }

    fn k_apply(&self, _path: usize, k: usize, i: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.g1_dx_mode(t, &xh, &uh, i) * y), 1.0);
    }

    fn k_adj_apply(&self, _path: usize, k: usize, i: usize, z: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.g1_dx_mode(t, &xh, &uh, i).transpose() * z), 1.0);
    }

    fn q2_apply(&self, _path: usize, k: usize, j: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.g2_dx(t, &xh, &uh, j) * y), 1.0);
    }

    fn q2_adj_apply(&self, _path: usize, k: usize, j: usize, z: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.g2_dx(t, &xh, &uh, j).transpose() * z), 1.0);
    }

    fn q3_apply(&self, _path: usize, k: usize, m: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.theta_dx(t, &xh, &uh, m) * y), 1.0);
    }

    fn q3_adj_apply(&self, _path: usize, k: usize, m: usize, z: &ModeVector, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, _) = self.args(k);
        acc.axpy(w, &(self.model.theta_dx(t, &xh, &uh, m).transpose() * z), 1.0);
    }

    fn r_dag_add(&self, path: usize, k: usize, w: f64, acc: &mut ModeVector) {
        if let Some(f) = self.r_dag_override {
            acc.axpy(w, &f(path, k), 1.0);
            return;
        }
        let (t, xh, uh, v) = self.args(k);
        let hdu = self.model.h_du(t, &xh, &uh);
        acc.axpy(w, &(self.model.drift_du(t, &xh, &uh) * &v), 1.0);
        for j in 0..self.d_obs() {
            let coeff = hdu.row(j).transpose().dot(&v);
            acc.axpy(-w * coeff, &self.model.g2(t, &xh, &uh, j), 1.0);
        }
    }

    fn k_chi_add(&self, _path: usize, _k: usize, _i: usize, _w: f64, _acc: &mut ModeVector) {
        // The variation instance has no chi forcing.
    }

    fn gamma_col_add(&self, path: usize, k: usize, i: usize, w: f64, acc: &mut ModeVector) {
        if let Some(f) = self.gamma_override {
            acc.axpy(w, &f(path, k, i), 1.0);
            return;
        }
        let (t, xh, uh, v) = self.args(k);
        let mut e = DVector::zeros(self.dim_h());
        if i < self.dim_h() {
            e[i] = 1.0;
            acc.axpy(w, &self.model.g1_du_dir(t, &xh, &uh, &e, &v), 1.0);
        }
    }

    fn r2_add(&self, _path: usize, k: usize, j: usize, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, v) = self.args(k);
        acc.axpy(w, &(self.model.g2_du(t, &xh, &uh, j) * &v), 1.0);
    }

    fn r3_add(&self, _path: usize, k: usize, m: usize, w: f64, acc: &mut ModeVector) {
        let (t, xh, uh, v) = self.args(k);
        acc.axpy(w, &(self.model.theta_du(t, &xh, &uh, m) * &v), 1.0);
    }
}
