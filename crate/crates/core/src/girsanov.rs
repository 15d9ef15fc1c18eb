//! Density process of the observation change of measure, its first variation
//! ratio, and the cost functional in both measure forms.

use crate::backward::BsdeSolution;
use crate::forward::{MeasureMode, SimulatedPath};
use crate::model::Model;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Log-space exponential-martingale stepping: each step multiplies by
/// `exp(h dY - |h|^2 dt / 2)`, which has unit conditional mean under the
/// reference measure, so positivity is structural and the martingale test is
/// sharp up to Monte Carlo error.
pub fn density_path(model: &dyn Model, path: &SimulatedPath, dt: f64) -> DVector<f64> {
    let n = path.n_steps();
    let mut rho = DVector::zeros(n + 1);
    let mut log_rho = 0.0;
    rho[0] = 1.0;
    for k in 0..n {
        let t = k as f64 * dt;
        let h = model.h_obs(t, &path.x_at(k), &path.u_at(k));
        let dy = path.dy(k);
        log_rho += h.dot(&dy) - 0.5 * h.norm_squared() * dt;
        rho[k + 1] = log_rho.exp();
    }
    rho
}

/// Densities of a whole ensemble, `m x (n_steps+1)`.
pub fn density_ensemble(model: &dyn Model, paths: &[SimulatedPath], dt: f64) -> DMatrix<f64> {
    use rayon::prelude::*;
    let rows: Vec<DVector<f64>> =
        paths.par_iter().map(|p| density_path(model, p, dt)).collect();
    let mut out = DMatrix::zeros(paths.len(), paths[0].n_steps() + 1);
    for (p, row) in rows.into_iter().enumerate() {
        out.row_mut(p).copy_from(&row.transpose());
    }
    out
}

/// First-variation ratio of the density along a direction: driven by the
/// innovation with the sensor derivatives as loadings, starting from zero.
pub fn variation_lambda(
    model: &dyn Model,
    hat: &SimulatedPath,
    x1: &DMatrix<f64>,
    v_path: &DMatrix<f64>,
    dt: f64,
) -> DVector<f64> {
    let n = hat.n_steps();
    let mut lam = DVector::zeros(n + 1);
    let mut cur = 0.0;
    for k in 0..n {
        let t = k as f64 * dt;
        let xh = hat.x_at(k);
        let uh = hat.u_at(k);
        let hdx = model.h_dx(t, &xh, &uh);
        let hdu = model.h_du(t, &xh, &uh);
        let db = hat.db_hat(model, k, dt);
        let load = hdx * x1.row(k).transpose() + hdu * v_path.row(k).transpose();
        cur += load.dot(&db);
        lam[k + 1] = cur;
    }
    lam
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostForm {
    /// Expectation under the controlled measure of the plain cost.
    QForm,
    /// Reference-measure expectation of the density-weighted cost.
    PForm,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub j_estimate: f64,
    pub std_error: f64,
    pub running: f64,
    pub terminal: f64,
    pub recursive: f64,
    pub measure_form: CostForm,
}

/// Monte Carlo cost estimate. The form must match how the ensemble was
/// simulated: plain averages are controlled-measure expectations only when
/// the innovation is Brownian, and density weighting is exact only against a
/// Brownian observation.
pub fn compute_cost(
    model: &dyn Model,
    paths: &[SimulatedPath],
    bsde: &BsdeSolution,
    rho: Option<&DMatrix<f64>>,
    dt: f64,
    form: CostForm,
) -> CostReport {
    let m = paths.len();
    let n = paths[0].n_steps();
    match form {
        CostForm::QForm => assert_eq!(paths[0].measure, MeasureMode::InnovationBrownian),
        CostForm::PForm => {
            assert_eq!(paths[0].measure, MeasureMode::ObservationBrownian);
            assert!(rho.is_some(), "density weights required for the reference form");
        }
    }

    let mut samples = Vec::with_capacity(m);
    let mut running_acc = 0.0;
    let mut terminal_acc = 0.0;
    for p in 0..m {
        let mut run = 0.0;
        for k in 0..n {
            let t = k as f64 * dt;
            let zv = bsde.z_at(p, k);
            let rv = bsde.r_at(p, k);
            let gv = bsde.gamma_at(p, k);
            let l = model.run_cost_integrated(
                t,
                &paths[p].x_at(k),
                &paths[p].u_at(k),
                bsde.y[(p, k)],
                &zv,
                &rv,
                &gv,
            );
            let w = match form {
                CostForm::QForm => 1.0,
                CostForm::PForm => rho.unwrap()[(p, k)],
            };
            run += dt * w * l;
        }
        let wt = match form {
            CostForm::QForm => 1.0,
            CostForm::PForm => rho.unwrap()[(p, n)],
        };
        let term = wt * model.phi(&paths[p].x_at(n));
        running_acc += run;
        terminal_acc += term;
        samples.push(run + term);
    }
    let (mean, se) = crate::stats::mean_se(&samples);
    let recursive = model.psi(bsde.y0);
    let rec_se = model.psi_dy(bsde.y0).abs() * bsde.y0_se;
    CostReport {
        j_estimate: mean + recursive,
        std_error: (se * se + rec_se * rec_se).sqrt(),
        running: running_acc / m as f64,
        terminal: terminal_acc / m as f64,
        recursive,
        measure_form: form,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_ensemble, MeasureMode};
    use crate::model::{make_lq_model, LqParams, PolicyFeatures, PolicyParams};
    use crate::noise::{sample_ensemble, TimeGrid};
    use approx::assert_relative_eq;

    fn setup(h_level: f64) -> (crate::model::LqParams, PolicyParams) {
        let mut params = LqParams::default();
        params.dim_h = 4;
        params.n_w = 4;
        params.n_ctrl = 1;
        params.h_level = h_level;
        params.control_box = vec![(-2.0, 2.0)];
        let policy = PolicyParams {
            theta: vec![0.2],
            features: PolicyFeatures::Constant,
            n_knots: 1,
            n_ctrl: 1,
            d_obs: 1,
            horizon: 1.0,
            control_box: vec![(-2.0, 2.0)],
        };
        (params, policy)
    }

    #[test]
    fn flat_sensor_means_unit_density() {
        let (params, policy) = setup(0.0);
        let model = make_lq_model(params).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 3, 16);
        let paths = simulate_ensemble(
            &model,
            &policy,
            &noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )
        .unwrap();
        for p in &paths {
            let rho = density_path(&model, p, grid.dt());
            for k in 0..=16 {
                assert_relative_eq!(rho[k], 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn constant_sensor_density_has_closed_form() {
        let (params, policy) = setup(0.7);
        let model = make_lq_model(params).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 5, 8);
        let paths = simulate_ensemble(
            &model,
            &policy,
            &noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )
        .unwrap();
        for p in &paths {
            let rho = density_path(&model, p, grid.dt());
            let y_t = p.y[(32, 0)];
            let expected = (0.7 * y_t - 0.5 * 0.7 * 0.7).exp();
            assert_relative_eq!(rho[32], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn density_terminal_mean_is_one() {
        let (params, policy) = setup(0.5);
        let model = make_lq_model(params).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let m = 10_000;
        let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 7, m);
        let paths = simulate_ensemble(
            &model,
            &policy,
            &noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )
        .unwrap();
        let rho = density_ensemble(&model, &paths, grid.dt());
        let col: Vec<f64> = (0..m).map(|p| rho[(p, 32)]).collect();
        let (mean, se) = crate::stats::mean_se(&col);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn lambda_with_flat_derivatives_is_a_plain_integral() {
        // Sensor with zero x/u derivatives: Lambda stays zero.
        let (params, policy) = setup(0.4);
        let model = make_lq_model(params).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 9, 4);
        let paths = simulate_ensemble(
            &model,
            &policy,
            &noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )
        .unwrap();
        let x1 = DMatrix::zeros(17, 4);
        let v = DMatrix::from_element(16, 1, 1.0);
        let lam = variation_lambda(&model, &paths[0], &x1, &v, grid.dt());
        assert_relative_eq!(lam[16], 0.0);
    }
}
