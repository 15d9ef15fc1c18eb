//! Cost-expansion and measure-change checks on the harvesting instance.

use fspde_core::backward::{BsdeOptions, RegressionBasis};
use fspde_core::forward::MeasureMode;
use fspde_core::girsanov::{compute_cost, density_ensemble, CostForm};
use fspde_core::model::{
    make_harvesting_model, FeatureDirection, HarvestingParams, Model, PolicyFeatures,
    PolicyParams,
};
use fspde_core::noise::TimeGrid;
use fspde_core::smp::{build_hat_bundle, first_variation_report};

fn harvesting_policy() -> PolicyParams {
    PolicyParams {
        theta: vec![0.45, 0.05, 0.08, -0.02],
        features: PolicyFeatures::AffineY,
        n_knots: 1,
        n_ctrl: 2,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
    }
}

fn small_params() -> HarvestingParams {
    let mut p = HarvestingParams::default();
    p.dim_h = 8;
    p.n_w = 8;
    p
}

#[test]
fn two_measure_cost_forms_agree() {
    let model = make_harvesting_model(small_params()).unwrap();
    let policy = harvesting_policy();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let basis = RegressionBasis::mode_quadratic();
    let opts = BsdeOptions::default();
    let m = 6000;

    let hat_q = build_hat_bundle(
        &model,
        &policy,
        grid,
        301,
        m,
        MeasureMode::InnovationBrownian,
        &basis,
        &opts,
    )
    .unwrap();
    let q_report = compute_cost(&model, &hat_q.paths, &hat_q.bsde, None, grid.dt(), CostForm::QForm);

    let hat_p = build_hat_bundle(
        &model,
        &policy,
        grid,
        302,
        m,
        MeasureMode::ObservationBrownian,
        &basis,
        &opts,
    )
    .unwrap();
    let rho = density_ensemble(&model, &hat_p.paths, grid.dt());
    let p_report =
        compute_cost(&model, &hat_p.paths, &hat_p.bsde, Some(&rho), grid.dt(), CostForm::PForm);

    let tol = 3.0 * (q_report.std_error.powi(2) + p_report.std_error.powi(2)).sqrt();
    assert!(
        (q_report.j_estimate - p_report.j_estimate).abs() <= tol,
        "cost forms disagree: Q {} +- {}, P {} +- {}",
        q_report.j_estimate,
        q_report.std_error,
        p_report.j_estimate,
        p_report.std_error
    );
}

#[test]
fn perturbed_state_gap_scales_quadratically() {
    // Controlled-measure mean-square distance between the perturbed and base
    // trajectories decays like eps^2 on a log-log fit.
    let model = make_harvesting_model(small_params()).unwrap();
    let policy = harvesting_policy();
    let direction = FeatureDirection::random(&policy, 0.5, 99);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let m = 1500;
    let dims = model.dims();
    let noise = fspde_core::noise::sample_ensemble(
        grid,
        dims.n_w,
        dims.d_obs,
        model.jump_measure(),
        303,
        m,
    );
    let base = fspde_core::forward::simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();
    let rho = density_ensemble(&model, &base, grid.dt());

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &eps in &[0.1, 0.05, 0.025] {
        let law = fspde_core::model::PerturbedLaw { base: &policy, direction: &direction, eps };
        let pert = fspde_core::forward::simulate_ensemble(
            &model,
            &law,
            &noise,
            &model.initial_state(),
            MeasureMode::ObservationBrownian,
        )
        .unwrap();
        let mut sup = 0.0f64;
        for k in 0..=32 {
            let mut acc = 0.0;
            for p in 0..m {
                acc += rho[(p, k)] * (pert[p].x.row(k) - base[p].x.row(k)).norm_squared();
            }
            sup = sup.max(acc / m as f64);
        }
        xs.push(eps.ln());
        ys.push(sup.ln());
    }
    let (slope, _) = fspde_core::stats::linear_fit(&xs, &ys);
    assert!(
        (slope - 2.0).abs() <= 0.3,
        "quadratic scaling violated: slope {slope}"
    );
}

#[test]
fn first_variation_matches_finite_difference_slopes() {
    let model = make_harvesting_model(small_params()).unwrap();
    let policy = harvesting_policy();
    let direction = FeatureDirection::random(&policy, 0.4, 7);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let basis = RegressionBasis::mode_quadratic();
    let opts = BsdeOptions::default();
    let m = 8000;

    let hat = build_hat_bundle(
        &model,
        &policy,
        grid,
        304,
        m,
        MeasureMode::ObservationBrownian,
        &basis,
        &opts,
    )
    .unwrap();
    let report = first_variation_report(
        &model,
        &policy,
        &direction,
        &hat,
        &basis,
        &opts,
        &[0.08, 0.04, 0.02],
    )
    .unwrap();

    // Slopes approach the directional derivative as the step shrinks.
    let errs: Vec<f64> =
        report.fd.iter().map(|f| (f.slope - report.i_v).abs()).collect();
    assert!(
        errs[2] <= errs[0] + 3.0 * report.fd[2].slope_se,
        "no shrinkage: {errs:?} (report {report:?})"
    );
    assert!(
        report.agreement_rel <= 0.05,
        "relative disagreement {} too large ({report:?})",
        report.agreement_rel
    );
    // The derivative itself is significant.
    assert!(report.i_v.abs() > 5.0 * report.i_v_se, "no signal in the direction");
}
