//! First-order optimality machinery along two routes: the cost expansion in a
//! control direction (first variation plus density ratio), and the adjoint
//! bracket built from the costate equations. Includes the duality residual
//! checks that tie the two together and a projected-gradient policy
//! optimizer.

use crate::backward::{
    model_state_features, solve_auxiliary_pq, solve_ell, solve_model_bsde, solve_scalar_bsde,
    solve_singular_bspde, BsdeOptions, BsdeSolution, BspdeData, BspdeSolution, MartingaleForm,
    RegressionBasis, ScalarBsdeSpec, SolverError,
};
use crate::forward::{
    direction_along, simulate_ensemble, simulate_first_variation, simulate_linear_spde,
    LinearSpdeCoeffs, MeasureMode, SimulatedPath,
};
use crate::girsanov::{compute_cost, density_ensemble, variation_lambda, CostForm, CostReport};
use crate::model::{BsdeArgs, FeatureDirection, Model, PerturbedLaw, PolicyParams};
use crate::noise::{sample_ensemble, NoiseGrid, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SmpError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] crate::forward::SimError),
    #[error("step size collapsed at iteration {iter}")]
    StepCollapse { iter: usize },
}

/// Base ensemble at a fixed policy, together with its backward solution.
pub struct HatBundle {
    pub noise: Vec<NoiseGrid>,
    pub paths: Vec<SimulatedPath>,
    pub bsde: BsdeSolution,
}

pub fn build_hat_bundle(
    model: &dyn Model,
    policy: &PolicyParams,
    grid: TimeGrid,
    seed: u64,
    m: usize,
    measure: MeasureMode,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<HatBundle, SmpError> {
    let dims = model.dims();
    let noise = sample_ensemble(grid, dims.n_w, dims.d_obs, model.jump_measure(), seed, m);
    let paths = simulate_ensemble(model, policy, &noise, &model.initial_state(), measure)?;
    let bsde = solve_model_bsde(model, &paths, &noise, basis, opts)?;
    Ok(HatBundle { noise, paths, bsde })
}

/// Costate data assembled from the base trajectory: terminal datum and drift
/// forcing of the state adjoint.
pub struct PAdjointData {
    pub eta: Vec<DVector<f64>>,
    /// Per path `n_steps x dim_h` forcing rows.
    pub forcing: Vec<DMatrix<f64>>,
}

impl BspdeData for PAdjointData {
    fn terminal(&self, path: usize) -> DVector<f64> {
        self.eta[path].clone()
    }
    fn forcing_add(&self, path: usize, k: usize, w: f64, acc: &mut DVector<f64>) {
        acc.axpy(w, &self.forcing[path].row(k).transpose(), 1.0);
    }
}

/// Terminal datum and forcing of the state adjoint from the base ensemble.
pub fn assemble_p_equation(
    model: &dyn Model,
    hat: &HatBundle,
    ell: &DMatrix<f64>,
    pq: &BsdeSolution,
    dt: f64,
) -> PAdjointData {
    let dims = model.dims();
    let m = hat.paths.len();
    let n_steps = hat.paths[0].n_steps();
    let jm = model.jump_measure();

    let data: Vec<(DVector<f64>, DMatrix<f64>)> = (0..m)
        .into_par_iter()
        .map(|p| {
            let path = &hat.paths[p];
            let x_t = path.x_at(n_steps);
            let eta = model.phi_dx(&x_t) - model.terminal_f_dx(&x_t) * ell[(p, n_steps)];
            let mut forcing = DMatrix::zeros(n_steps, dims.dim_h);
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let xh = path.x_at(k);
                let uh = path.u_at(k);
                let zv = hat.bsde.z_at(p, k);
                let rv = hat.bsde.r_at(p, k);
                let gv = hat.bsde.gamma_at(p, k);
                let mut j = DVector::zeros(dims.dim_h);
                for mm in 0..jm.n_marks() {
                    let w = jm.weights[mm];
                    let bs =
                        BsdeArgs { y: hat.bsde.y[(p, k)], z: &zv, r: &rv, gamma_m: gv[mm] };
                    let lg = model.run_cost_grad(t, &xh, &uh, &bs, mm);
                    let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
                    j.axpy(w, &lg.dx, 1.0);
                    j.axpy(-w * ell[(p, k)], &gg.dx, 1.0);
                }
                // Sensor-derivative coupling through the auxiliary pair.
                let q2 = pq.r_at(p, k);
                j += model.h_dx(t, &xh, &uh).transpose() * q2;
                forcing.row_mut(k).copy_from(&j.transpose());
            }
            (eta, forcing)
        })
        .collect();

    let mut eta = Vec::with_capacity(m);
    let mut forcing = Vec::with_capacity(m);
    for (e, f) in data {
        eta.push(e);
        forcing.push(f);
    }
    PAdjointData { eta, forcing }
}

/// Full adjoint stack at the base policy.
pub struct AdjointBundle {
    pub ell: DMatrix<f64>,
    pub pq: BsdeSolution,
    pub p_data: PAdjointData,
    pub bspde: BspdeSolution,
}

/// Feature state of the state-adjoint solve: modes, observation, and the
/// recursive adjoint value.
pub fn adjoint_state_features(path: &SimulatedPath, ell: &DMatrix<f64>, p: usize, k: usize) -> DVector<f64> {
    let base = model_state_features(path, k);
    let mut s = DVector::zeros(base.len() + 1);
    s.rows_mut(0, base.len()).copy_from(&base);
    s[base.len()] = ell[(p, k)];
    s
}

pub fn solve_adjoints(
    model: &dyn Model,
    hat: &HatBundle,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
    trunc_n: usize,
) -> Result<AdjointBundle, SmpError> {
    let dt = hat.noise[0].grid.dt();
    let ell = solve_ell(model, &hat.paths, &hat.noise, &hat.bsde);
    let pq = solve_auxiliary_pq(model, &hat.paths, &hat.noise, &hat.bsde, basis, opts)?;
    let p_data = assemble_p_equation(model, hat, &ell, &pq, dt);
    let ell_feats = ell.clone();

    // The state adjoint is dualized against the variation dynamics, so its
    // coefficient provider is the variation instance with a trivial direction.
    let zero_dir = DMatrix::zeros(hat.paths[0].n_steps(), model.dims().n_ctrl);
    let bspde = {
        let paths = &hat.paths;
        let features =
            move |p: usize, k: usize| adjoint_state_features(&paths[p], &ell_feats, p, k);
        let coeffs = crate::forward::VariationCoeffs {
            model,
            hat: &hat.paths[0],
            v_path: &zero_dir,
            dt,
            r_dag_override: None,
            gamma_override: None,
            trunc_n,
            trunc_m: 0,
        };
        let coeffs = PerPathVariation { model, paths, v_path: &zero_dir, dt, template: coeffs };
        solve_singular_bspde(
            &coeffs,
            &p_data,
            &hat.noise,
            model.space(),
            &features,
            basis,
            trunc_n,
        )?
    };
    Ok(AdjointBundle { ell, pq, p_data, bspde })
}

/// Variation coefficients evaluated along the per-path base trajectory.
/// The single-path provider in the forward module is path-agnostic; this
/// wrapper routes each path index to its own trajectory.
pub struct PerPathVariation<'a> {
    pub model: &'a dyn Model,
    pub paths: &'a [SimulatedPath],
    pub v_path: &'a DMatrix<f64>,
    pub dt: f64,
    pub template: crate::forward::VariationCoeffs<'a>,
}

impl PerPathVariation<'_> {
    fn for_path(&self, p: usize) -> crate::forward::VariationCoeffs<'_> {
        crate::forward::VariationCoeffs {
            model: self.model,
            hat: &self.paths[p],
            v_path: self.v_path,
            dt: self.dt,
            r_dag_override: self.template.r_dag_override,
            gamma_override: self.template.gamma_override,
            trunc_n: self.template.trunc_n,
            trunc_m: self.template.trunc_m,
        }
    }
}

impl LinearSpdeCoeffs for PerPathVariation<'_> {
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
        self.template.trunc_n
    }
    fn trunc_m(&self) -> usize {
        self.template.trunc_m
    }
    fn jump_weight(&self, m: usize) -> f64 {
        self.model.jump_measure().weights[m]
    }
    fn q1_apply(&self, p: usize, k: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q1_apply(p, k, y, w, acc)
    }
    fn q1_adj_apply(&self, p: usize, k: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q1_adj_apply(p, k, z, w, acc)
    }
    fn k_apply(&self, p: usize, k: usize, i: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).k_apply(p, k, i, y, w, acc)
    }
    fn k_adj_apply(&self, p: usize, k: usize, i: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).k_adj_apply(p, k, i, z, w, acc)
    }
    fn q2_apply(&self, p: usize, k: usize, j: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q2_apply(p, k, j, y, w, acc)
    }
    fn q2_adj_apply(&self, p: usize, k: usize, j: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q2_adj_apply(p, k, j, z, w, acc)
    }
    fn q3_apply(&self, p: usize, k: usize, m: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q3_apply(p, k, m, y, w, acc)
    }
    fn q3_adj_apply(&self, p: usize, k: usize, m: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).q3_adj_apply(p, k, m, z, w, acc)
    }
    fn r_dag_add(&self, p: usize, k: usize, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).r_dag_add(p, k, w, acc)
    }
    fn k_chi_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).k_chi_add(p, k, i, w, acc)
    }
    fn gamma_col_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).gamma_col_add(p, k, i, w, acc)
    }
    fn r2_add(&self, p: usize, k: usize, j: usize, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).r2_add(p, k, j, w, acc)
    }
    fn r3_add(&self, p: usize, k: usize, m: usize, w: f64, acc: &mut DVector<f64>) {
        self.for_path(p).r3_add(p, k, m, w, acc)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FdSlope {
    pub eps: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub j_eps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationReport {
    pub i_v: f64,
    pub i_v_se: f64,
    pub j_base: f64,
    pub fd: Vec<FdSlope>,
    /// Relative disagreement against the smallest-step slope.
    pub agreement_rel: f64,
}

/// First-variation solve along a direction on the base (reference-measure)
/// ensemble: variation state, density ratio, variation of the backward value,
/// and the assembled directional derivative with density weights.
pub struct VariationEnsemble {
    pub x1: Vec<DMatrix<f64>>,
    pub lambda: DMatrix<f64>,
    pub y1: BsdeSolution,
    pub v_paths: Vec<DMatrix<f64>>,
}

pub fn solve_variation_ensemble(
    model: &dyn Model,
    hat: &HatBundle,
    direction: &FeatureDirection,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
) -> Result<VariationEnsemble, SmpError> {
    let dt = hat.noise[0].grid.dt();
    let m = hat.paths.len();
    let n_steps = hat.paths[0].n_steps();
    let dims = model.dims();

    let v_paths: Vec<DMatrix<f64>> =
        hat.paths.par_iter().map(|p| direction_along(direction, p, dt)).collect();
    let x1: Vec<DMatrix<f64>> = (0..m)
        .into_par_iter()
        .map(|p| simulate_first_variation(model, &hat.paths[p], &hat.noise[p], &v_paths[p]))
        .collect::<Result<_, _>>()?;
    let lam_rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|p| variation_lambda(model, &hat.paths[p], &x1[p], &v_paths[p], dt))
        .collect();
    let mut lambda = DMatrix::zeros(m, n_steps + 1);
    for (p, row) in lam_rows.into_iter().enumerate() {
        lambda.row_mut(p).copy_from(&row.transpose());
    }

    // Variation of the backward value: linearized driver along the base
    // solution, observation form, terminal datum from the terminal map
    // derivative.
    let jm = model.jump_measure();
    let terminal = {
        let paths = &hat.paths;
        let x1 = &x1;
        move |p: usize| {
            let xt = paths[p].x_at(n_steps);
            model.terminal_f_dx(&xt).dot(&x1[p].row(n_steps).transpose())
        }
    };
    let driver = {
        let paths = &hat.paths;
        let bsde = &hat.bsde;
        let x1 = &x1;
        let v_paths = &v_paths;
        move |p: usize,
              k: usize,
              y1v: f64,
              z1: &DVector<f64>,
              r1: &DVector<f64>,
              g1: &DVector<f64>|
              -> f64 {
            let t = k as f64 * dt;
            let xh = paths[p].x_at(k);
            let uh = paths[p].u_at(k);
            let zv = bsde.z_at(p, k);
            let rv = bsde.r_at(p, k);
            let gv = bsde.gamma_at(p, k);
            let x1k = x1[p].row(k).transpose();
            let vk = v_paths[p].row(k).transpose();
            let mut acc = 0.0;
            for mm in 0..jm.n_marks() {
                let bs = BsdeArgs { y: bsde.y[(p, k)], z: &zv, r: &rv, gamma_m: gv[mm] };
                let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
                acc += jm.weights[mm]
                    * (gg.dx.dot(&x1k)
                        + gg.du.dot(&vk)
                        + gg.dy * y1v
                        + gg.dz.dot(z1)
                        + gg.dr.dot(r1)
                        + gg.dgamma * g1[mm]);
            }
            acc
        }
    };
    let h_at = {
        let paths = &hat.paths;
        move |p: usize, k: usize| {
            model.h_obs(k as f64 * dt, &paths[p].x_at(k), &paths[p].u_at(k))
        }
    };
    let features = {
        let paths = &hat.paths;
        let x1 = &x1;
        move |p: usize, k: usize| {
            let base = model_state_features(&paths[p], k);
            let mut s = DVector::zeros(base.len() + dims.dim_h);
            s.rows_mut(0, base.len()).copy_from(&base);
            for c in 0..dims.dim_h {
                s[base.len() + c] = x1[p][(k, c)];
            }
            s
        }
    };
    let spec = ScalarBsdeSpec {
        terminal: &terminal,
        driver: &driver,
        form: MartingaleForm::Observation,
        h_at: &h_at,
    };
    let y1 = solve_scalar_bsde(
        &spec,
        &hat.noise,
        hat.paths[0].measure,
        &jm.weights,
        &features,
        basis,
        opts,
    )?;
    Ok(VariationEnsemble { x1, lambda, y1, v_paths })
}

/// Directional derivative of the cost assembled from the variation ensemble,
/// with density weights realizing controlled-measure expectations on the
/// reference ensemble. Returns per-path samples plus the deterministic
/// recursive term.
pub fn directional_derivative(
    model: &dyn Model,
    hat: &HatBundle,
    rho: &DMatrix<f64>,
    var: &VariationEnsemble,
) -> (Vec<f64>, f64) {
    let dt = hat.noise[0].grid.dt();
    let m = hat.paths.len();
    let n_steps = hat.paths[0].n_steps();
    let jm = model.jump_measure();

    let samples: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|p| {
            let path = &hat.paths[p];
            let x_t = path.x_at(n_steps);
            let x1_t = var.x1[p].row(n_steps).transpose();
            let mut s = rho[(p, n_steps)]
                * (model.phi_dx(&x_t).dot(&x1_t) + model.phi(&x_t) * var.lambda[(p, n_steps)]);
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let xh = path.x_at(k);
                let uh = path.u_at(k);
                let zv = hat.bsde.z_at(p, k);
                let rv = hat.bsde.r_at(p, k);
                let gv = hat.bsde.gamma_at(p, k);
                let x1k = var.x1[p].row(k).transpose();
                let vk = var.v_paths[p].row(k).transpose();
                let z1 = var.y1.z_at(p, k);
                let r1 = var.y1.r_at(p, k);
                let g1 = var.y1.gamma_at(p, k);
                let mut term = 0.0;
                for mm in 0..jm.n_marks() {
                    let bs = BsdeArgs { y: hat.bsde.y[(p, k)], z: &zv, r: &rv, gamma_m: gv[mm] };
                    let l = model.run_cost(t, &xh, &uh, &bs, mm);
                    let lg = model.run_cost_grad(t, &xh, &uh, &bs, mm);
                    term += jm.weights[mm]
                        * (var.lambda[(p, k)] * l
                            + lg.du.dot(&vk)
                            + lg.dx.dot(&x1k)
                            + lg.dy * var.y1.y[(p, k)]
                            + lg.dz.dot(&z1)
                            + lg.dr.dot(&r1)
                            + lg.dgamma * g1[mm]);
                }
                s += dt * rho[(p, k)] * term;
            }
            s
        })
        .collect();

    let recursive = model.psi_dy(hat.bsde.y0) * var.y1.y0;
    (samples, recursive)
}

/// Per-path samples of the density-weighted path cost (running plus
/// terminal); the recursive value is reported separately since it is a single
/// ensemble number.
fn p_form_cost_samples(
    model: &dyn Model,
    paths: &[SimulatedPath],
    bsde: &BsdeSolution,
    rho: &DMatrix<f64>,
    dt: f64,
) -> Vec<f64> {
    let m = paths.len();
    let n = paths[0].n_steps();
    (0..m)
        .into_par_iter()
        .map(|p| {
            let mut run = 0.0;
            for k in 0..n {
                let t = k as f64 * dt;
                let zv = bsde.z_at(p, k);
                let rv = bsde.r_at(p, k);
                let gv = bsde.gamma_at(p, k);
                run += dt
                    * rho[(p, k)]
                    * model.run_cost_integrated(
                        t,
                        &paths[p].x_at(k),
                        &paths[p].u_at(k),
                        bsde.y[(p, k)],
                        &zv,
                        &rv,
                        &gv,
                    );
            }
            run + rho[(p, n)] * model.phi(&paths[p].x_at(n))
        })
        .collect()
}

/// The cost expansion check: directional derivative against common-noise
/// finite differences of the density-weighted cost.
pub fn first_variation_report(
    model: &dyn Model,
    policy: &PolicyParams,
    direction: &FeatureDirection,
    hat: &HatBundle,
    basis: &RegressionBasis,
    opts: &BsdeOptions,
    eps_list: &[f64],
) -> Result<VariationReport, SmpError> {
    assert_eq!(hat.paths[0].measure, MeasureMode::ObservationBrownian);
    let dt = hat.noise[0].grid.dt();
    let rho = density_ensemble(model, &hat.paths, dt);
    let var = solve_variation_ensemble(model, hat, direction, basis, opts)?;
    let (samples, recursive) = directional_derivative(model, hat, &rho, &var);
    let (mean, se) = crate::stats::mean_se(&samples);
    let i_v = mean + recursive;
    let i_v_se = (se * se + (model.psi_dy(hat.bsde.y0) * var.y1.y0_se).powi(2)).sqrt();

    let base_samples = p_form_cost_samples(model, &hat.paths, &hat.bsde, &rho, dt);
    let psi_base = model.psi(hat.bsde.y0);
    let j_base = base_samples.iter().sum::<f64>() / base_samples.len() as f64 + psi_base;

    let mut fd = Vec::new();
    for &eps in eps_list {
        let law = PerturbedLaw { base: policy, direction, eps };
        let paths_eps = simulate_ensemble(
            model,
            &law,
            &hat.noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )?;
        let bsde_eps = solve_model_bsde(model, &paths_eps, &hat.noise, basis, opts)?;
        let rho_eps = density_ensemble(model, &paths_eps, dt);
        let eps_samples = p_form_cost_samples(model, &paths_eps, &bsde_eps, &rho_eps, dt);
        let psi_eps = model.psi(bsde_eps.y0);
        let j_eps = eps_samples.iter().sum::<f64>() / eps_samples.len() as f64 + psi_eps;

        let diffs: Vec<f64> = eps_samples
            .iter()
            .zip(&base_samples)
            .map(|(a, b)| (a - b) / eps)
            .collect();
        let (dmean, dse) = crate::stats::mean_se(&diffs);
        let slope = dmean + (psi_eps - psi_base) / eps;
        let psi_se = (model.psi_dy(hat.bsde.y0).abs()
            * (bsde_eps.y0_se + hat.bsde.y0_se))
            / eps;
        fd.push(FdSlope { eps, slope, slope_se: (dse * dse + psi_se * psi_se).sqrt(), j_eps });
    }
    let agreement_rel = fd
        .last()
        .map(|f| (i_v - f.slope).abs() / f.slope.abs().max(1e-12))
        .unwrap_or(f64::NAN);
    Ok(VariationReport { i_v, i_v_se, j_base, fd, agreement_rel })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
    pub pass: bool,
    pub backward_trunc_n: usize,
    pub forward_trunc_n: usize,
    pub forward_trunc_m: usize,
}

/// Truncation override so the forward side of a duality check can run at a
/// different series level than the backward solve.
pub struct TruncOverride<'a> {
    pub inner: &'a dyn LinearSpdeCoeffs,
    pub n: usize,
    pub m: usize,
}

impl LinearSpdeCoeffs for TruncOverride<'_> {
    fn dim_h(&self) -> usize {
        self.inner.dim_h()
    }
    fn n_w(&self) -> usize {
        self.inner.n_w()
    }
    fn d_obs(&self) -> usize {
        self.inner.d_obs()
    }
    fn n_marks(&self) -> usize {
        self.inner.n_marks()
    }
    fn trunc_n(&self) -> usize {
        self.n
    }
    fn trunc_m(&self) -> usize {
        self.m
    }
    fn jump_weight(&self, m: usize) -> f64 {
        self.inner.jump_weight(m)
    }
    fn q1_apply(&self, p: usize, k: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q1_apply(p, k, y, w, acc)
    }
    fn q1_adj_apply(&self, p: usize, k: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q1_adj_apply(p, k, z, w, acc)
    }
    fn k_apply(&self, p: usize, k: usize, i: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.k_apply(p, k, i, y, w, acc)
    }
    fn k_adj_apply(&self, p: usize, k: usize, i: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.k_adj_apply(p, k, i, z, w, acc)
    }
    fn q2_apply(&self, p: usize, k: usize, j: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q2_apply(p, k, j, y, w, acc)
    }
    fn q2_adj_apply(&self, p: usize, k: usize, j: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q2_adj_apply(p, k, j, z, w, acc)
    }
    fn q3_apply(&self, p: usize, k: usize, m: usize, y: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q3_apply(p, k, m, y, w, acc)
    }
    fn q3_adj_apply(&self, p: usize, k: usize, m: usize, z: &DVector<f64>, w: f64, acc: &mut DVector<f64>) {
        self.inner.q3_adj_apply(p, k, m, z, w, acc)
    }
    fn r_dag_add(&self, p: usize, k: usize, w: f64, acc: &mut DVector<f64>) {
        self.inner.r_dag_add(p, k, w, acc)
    }
    fn k_chi_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut DVector<f64>) {
        self.inner.k_chi_add(p, k, i, w, acc)
    }
    fn gamma_col_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut DVector<f64>) {
        self.inner.gamma_col_add(p, k, i, w, acc)
    }
    fn r2_add(&self, p: usize, k: usize, j: usize, w: f64, acc: &mut DVector<f64>) {
        self.inner.r2_add(p, k, j, w, acc)
    }
    fn r3_add(&self, p: usize, k: usize, m: usize, w: f64, acc: &mut DVector<f64>) {
        self.inner.r3_add(p, k, m, w, acc)
    }
}

/// Duality residual between a backward solution and the forward linear
/// equation it is dual to, accumulated per path with common noise so that the
/// reported standard error is the error of the difference.
#[allow(clippy::too_many_arguments)]
pub fn check_duality(
    coeffs: &dyn LinearSpdeCoeffs,
    data: &dyn BspdeData,
    sol: &BspdeSolution,
    noise: &[NoiseGrid],
    space: &crate::spectral::SpectralSpace,
    features: &(dyn Fn(usize, usize) -> DVector<f64> + Sync),
    y_init: &(dyn Fn(usize) -> DVector<f64> + Sync),
    db_at: &(dyn Fn(usize) -> DMatrix<f64> + Sync),
    forward_trunc: (usize, usize),
) -> Result<DualityReport, SmpError> {
    let m_paths = noise.len();
    let n_steps = noise[0].grid.n_steps;
    let dt = noise[0].grid.dt();
    let dim = coeffs.dim_h();
    let fwd = TruncOverride { inner: coeffs, n: forward_trunc.0, m: forward_trunc.1 };

    let diffs: Vec<(f64, f64)> = (0..m_paths)
        .into_par_iter()
        .map(|p| {
            let db = db_at(p);
            let y0 = y_init(p);
            let ypath =
                simulate_linear_spde(&fwd, &noise[p], p, &db, &y0, 0, space).expect("finite");

            let mut lhs = sol.z0[p].dot(&y0);
            let mut rhs = 0.0;
            for k in 0..n_steps {
                let feats = sol.basis.features(&features(p, k));
                let zbar = sol.zbar_at(&feats, k);
                let mut pair = 0.0;
                // Drift forcing pairing.
                let mut r_dag = DVector::zeros(dim);
                coeffs.r_dag_add(p, k, 1.0, &mut r_dag);
                pair += zbar.dot(&r_dag);
                // Chi series and the full series forcing.
                for i in 0..forward_trunc.1 {
                    let q1e = sol.q1_col(&feats, k, i, dim);
                    let mut kchi = DVector::zeros(dim);
                    coeffs.k_chi_add(p, k, i, 1.0, &mut kchi);
                    pair += q1e.dot(&kchi);
                }
                for i in 0..coeffs.n_w() {
                    let q1e = sol.q1_col(&feats, k, i, dim);
                    let mut gcol = DVector::zeros(dim);
                    coeffs.gamma_col_add(p, k, i, 1.0, &mut gcol);
                    pair += q1e.dot(&gcol);
                }
                for j in 0..coeffs.d_obs() {
                    let q2 = sol.q2_col(&feats, k, j, dim);
                    let mut r2 = DVector::zeros(dim);
                    coeffs.r2_add(p, k, j, 1.0, &mut r2);
                    pair += q2.dot(&r2);
                }
                for mm in 0..coeffs.n_marks() {
                    let q3 = sol.q3_col(&feats, k, mm, dim);
                    let mut r3 = DVector::zeros(dim);
                    coeffs.r3_add(p, k, mm, 1.0, &mut r3);
                    pair += coeffs.jump_weight(mm) * q3.dot(&r3);
                }
                lhs += dt * pair;

                let yk = ypath.row(k).transpose();
                let mut forcing = DVector::zeros(dim);
                data.forcing_add(p, k, 1.0, &mut forcing);
                rhs += dt * forcing.dot(&yk);
            }
            rhs += data.terminal(p).dot(&ypath.row(n_steps).transpose());
            (lhs, rhs)
        })
        .collect();

    let d: Vec<f64> = diffs.iter().map(|(l, r)| l - r).collect();
    let (residual, se) = crate::stats::mean_se(&d);
    let lhs_mean = diffs.iter().map(|(l, _)| l).sum::<f64>() / m_paths as f64;
    let rhs_mean = diffs.iter().map(|(_, r)| r).sum::<f64>() / m_paths as f64;
    Ok(DualityReport {
        lhs: lhs_mean,
        rhs: rhs_mean,
        residual,
        se,
        pass: residual.abs() <= 3.0 * se,
        backward_trunc_n: sol.trunc_n,
        forward_trunc_n: forward_trunc.0,
        forward_trunc_m: forward_trunc.1,
    })
}

/// Control-space bracket of the variational inequality at one `(path, step)`.
#[allow(clippy::too_many_arguments)]
pub fn control_bracket(
    model: &dyn Model,
    paths: &[SimulatedPath],
    bsde: &BsdeSolution,
    adj: &AdjointBundle,
    p: usize,
    k: usize,
    dt: f64,
    feats: &DVector<f64>,
) -> DVector<f64> {
    let dims = model.dims();
    let jm = model.jump_measure();
    let t = k as f64 * dt;
    let xh = paths[p].x_at(k);
    let uh = paths[p].u_at(k);

    let p_t = adj.bspde.zbar_at(feats, k);
    // Drift-direction coupling.
    let mut b = model.drift_du(t, &xh, &uh).transpose() * &p_t;
    let hdu = model.h_du(t, &xh, &uh);
    for j in 0..dims.d_obs {
        let g2 = model.g2(t, &xh, &uh, j);
        b.axpy(-g2.dot(&p_t), &hdu.row(j).transpose(), 1.0);
    }
    // Wiener-loading coupling.
    let q1 = adj.bspde.q1_matrix(feats, k, dims.dim_h, dims.n_w);
    b += model.g1_du_adjoint(t, &xh, &uh, &q1);
    // Observation-loading coupling.
    for j in 0..dims.d_obs {
        let q2 = adj.bspde.q2_col(feats, k, j, dims.dim_h);
        b += model.g2_du(t, &xh, &uh, j).transpose() * q2;
    }
    // Sensor coupling through the auxiliary pair.
    let q2pq = adj.pq.r_at(p, k);
    b += hdu.transpose() * q2pq;
    // Jump loadings and the mark-integrated cost/driver direction terms.
    let zv = bsde.z_at(p, k);
    let rv = bsde.r_at(p, k);
    let gv = bsde.gamma_at(p, k);
    for mm in 0..jm.n_marks() {
        let w = jm.weights[mm];
        let q3 = adj.bspde.q3_col(feats, k, mm, dims.dim_h);
        b.axpy(w, &(model.theta_du(t, &xh, &uh, mm).transpose() * q3), 1.0);
        let bs = BsdeArgs { y: bsde.y[(p, k)], z: &zv, r: &rv, gamma_m: gv[mm] };
        let lg = model.run_cost_grad(t, &xh, &uh, &bs, mm);
        let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
        b.axpy(w, &lg.du, 1.0);
        b.axpy(-w * adj.ell[(p, k)], &gg.du, 1.0);
    }
    b
}

#[derive(Debug, Clone, Serialize)]
pub struct KnotStat {
    pub knot: usize,
    pub coord: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub stats: Vec<KnotStat>,
    /// Largest |mean| / se over knots and coordinates.
    pub max_abs_over_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SmpGradient {
    /// Gradient of the cost in the policy parameters.
    pub theta_grad: Vec<f64>,
    pub grad_norm: f64,
    pub stationarity: StationarityReport,
}

/// Bracket evaluation over the ensemble: the parameter-space gradient (chain
/// rule through the policy) and the per-knot conditional statistics of the
/// raw bracket.
pub fn smp_gradient(
    model: &dyn Model,
    policy: &PolicyParams,
    hat: &HatBundle,
    adj: &AdjointBundle,
) -> SmpGradient {
    let dt = hat.noise[0].grid.dt();
    let m = hat.paths.len();
    let n_steps = hat.paths[0].n_steps();
    let dims = model.dims();
    let n_params = policy.n_params();
    let n_knots = policy.n_knots;

    struct PathAccum {
        grad: Vec<f64>,
        knot_means: Vec<f64>,
    }
    let per_path: Vec<PathAccum> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut grad = vec![0.0; n_params];
            let mut knot_sum = vec![0.0; n_knots * dims.n_ctrl];
            let mut knot_cnt = vec![0usize; n_knots];
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let feats = adj
                    .bspde
                    .basis
                    .features(&adjoint_state_features(&hat.paths[p], &adj.ell, p, k));
                let b = control_bracket(model, &hat.paths, &hat.bsde, adj, p, k, dt, &feats);
                let obs = hat.paths[p].obs_at(k);
                for a in 0..n_params {
                    let du = policy.control_jacobian_param(t, &obs, a);
                    let mut dot = 0.0;
                    for c in 0..dims.n_ctrl {
                        if du[c] != 0.0 {
                            dot += b[c] * du[c];
                        }
                    }
                    grad[a] += dt * dot;
                }
                let knot = policy.knot_of(t);
                knot_cnt[knot] += 1;
                for c in 0..dims.n_ctrl {
                    knot_sum[knot * dims.n_ctrl + c] += b[c];
                }
            }
            let mut knot_means = vec![0.0; n_knots * dims.n_ctrl];
            for q in 0..n_knots {
                let cnt = knot_cnt[q].max(1) as f64;
                for c in 0..dims.n_ctrl {
                    knot_means[q * dims.n_ctrl + c] = knot_sum[q * dims.n_ctrl + c] / cnt;
                }
            }
            PathAccum { grad, knot_means }
        })
        .collect();

    let mut theta_grad = vec![0.0; n_params];
    for acc in &per_path {
        for a in 0..n_params {
            theta_grad[a] += acc.grad[a];
        }
    }
    for g in theta_grad.iter_mut() {
        *g /= m as f64;
    }
    let grad_norm = theta_grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut stats = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for q in 0..n_knots {
        for c in 0..dims.n_ctrl {
            let samples: Vec<f64> =
                per_path.iter().map(|a| a.knot_means[q * dims.n_ctrl + c]).collect();
            let (mean, se) = crate::stats::mean_se(&samples);
            if se > 0.0 {
                max_ratio = max_ratio.max(mean.abs() / se);
            }
            stats.push(KnotStat { knot: q, coord: c, mean, se });
        }
    }
    SmpGradient {
        theta_grad,
        grad_norm,
        stationarity: StationarityReport { stats, max_abs_over_se: max_ratio },
    }
}

/// Per-path time integral of the bracket against an adapted direction; this
/// is the adjoint-route value of the directional derivative.
pub fn bracket_dot_direction(
    model: &dyn Model,
    hat: &HatBundle,
    adj: &AdjointBundle,
    direction: &FeatureDirection,
) -> (f64, f64) {
    let dt = hat.noise[0].grid.dt();
    let m = hat.paths.len();
    let n_steps = hat.paths[0].n_steps();
    let samples: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|p| {
            let vpath = direction_along(direction, &hat.paths[p], dt);
            let mut acc = 0.0;
            for k in 0..n_steps {
                let feats = adj
                    .bspde
                    .basis
                    .features(&adjoint_state_features(&hat.paths[p], &adj.ell, p, k));
                let b = control_bracket(model, &hat.paths, &hat.bsde, adj, p, k, dt, &feats);
                acc += dt * b.dot(&vpath.row(k).transpose());
            }
            acc
        })
        .collect();
    crate::stats::mean_se(&samples)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptRow {
    pub iter: usize,
    pub j: f64,
    pub j_se: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub rows: Vec<OptRow>,
    pub policy: PolicyParams,
    pub final_gradient: Option<SmpGradient>,
}

pub struct OptimizeOptions {
    pub step: f64,
    pub iters: usize,
    pub m_paths: usize,
    pub seed: u64,
    pub grad_tol: f64,
    pub trunc_n: usize,
    pub grid: TimeGrid,
    pub basis: RegressionBasis,
}

/// Projected gradient descent on the policy parameters with common random
/// numbers across iterations. A step is accepted when the cost does not
/// increase beyond twice the combined standard error.
pub fn optimize_policy(
    model: &dyn Model,
    policy0: &PolicyParams,
    opts: &OptimizeOptions,
) -> Result<OptimizeOutcome, SmpError> {
    let bsde_opts = BsdeOptions::default();
    let mut policy = policy0.clone();
    let mut rows = Vec::new();
    let mut step = opts.step;
    let mut final_gradient = None;

    let eval_cost = |pol: &PolicyParams| -> Result<(HatBundle, CostReport), SmpError> {
        let hat = build_hat_bundle(
            model,
            pol,
            opts.grid,
            opts.seed,
            opts.m_paths,
            MeasureMode::InnovationBrownian,
            &opts.basis,
            &bsde_opts,
        )?;
        let dt = opts.grid.dt();
        let report = compute_cost(model, &hat.paths, &hat.bsde, None, dt, CostForm::QForm);
        Ok((hat, report))
    };

    let (mut hat, mut cost) = eval_cost(&policy)?;
    for iter in 0..opts.iters {
        let adj = solve_adjoints(model, &hat, &opts.basis, &bsde_opts, opts.trunc_n)?;
        let grad = smp_gradient(model, &policy, &hat, &adj);
        rows.push(OptRow {
            iter,
            j: cost.j_estimate,
            j_se: cost.std_error,
            grad_norm: grad.grad_norm,
            step,
        });
        let below_tol = grad.grad_norm <= opts.grad_tol;
        final_gradient = Some(grad);
        if below_tol {
            break;
        }

        let grad_ref = final_gradient.as_ref().unwrap();
        let mut accepted = false;
        for _ in 0..5 {
            let mut cand = policy.clone();
            for (a, g) in grad_ref.theta_grad.iter().enumerate() {
                cand.theta[a] -= step * g;
            }
            project_policy(&mut cand);
            let (hat_c, cost_c) = eval_cost(&cand)?;
            let tol = 2.0 * (cost.std_error.powi(2) + cost_c.std_error.powi(2)).sqrt();
            if cost_c.j_estimate <= cost.j_estimate + tol {
                policy = cand;
                hat = hat_c;
                cost = cost_c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            rows.last_mut().unwrap().step = step;
            return Err(SmpError::StepCollapse { iter });
        }
    }
    Ok(OptimizeOutcome { rows, policy, final_gradient })
}

/// Intercept parameters of a constant policy are the control itself, so they
/// are clamped into the box; feature coefficients are left free and the
/// output clamp enforces admissibility.
fn project_policy(policy: &mut PolicyParams) {
    let pc = policy.features.per_coord(policy.d_obs);
    for knot in 0..policy.n_knots {
        for c in 0..policy.n_ctrl {
            let idx = (knot * policy.n_ctrl + c) * pc;
            let (lo, hi) = policy.control_box[c];
            policy.theta[idx] = policy.theta[idx].clamp(lo, hi);
        }
    }
}
