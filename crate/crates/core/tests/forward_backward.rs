//! Stepping and backward-solver checks against closed forms and exact
//! structural identities.

use fspde_core::backward::{
    model_state_features, solve_model_bsde, solve_scalar_bsde, solve_singular_bspde,
    BsdeOptions, BspdeData, MartingaleForm, RegressionBasis, ScalarBsdeSpec,
};
use fspde_core::forward::{
    flow_path, flow_transfer_matrices, propagate_with_transfers, simulate_ensemble,
    simulate_first_variation, simulate_forward, LinearSpdeCoeffs, MeasureMode,
};
use fspde_core::model::{
    make_harvesting_model, make_lq_model, HarvestingParams, LqParams, Model, PolicyFeatures,
    PolicyParams,
};
use fspde_core::noise::{sample_ensemble, sample_noise, JumpMeasureSpec, TimeGrid};
use fspde_core::stats::mean_se;
use nalgebra::{DMatrix, DVector};

fn lq_small() -> LqParams {
    let mut p = LqParams::default();
    p.dim_h = 4;
    p.n_w = 4;
    p.n_ctrl = 1;
    p.control_box = vec![(-2.0, 2.0)];
    p
}

fn const_policy(theta: f64) -> PolicyParams {
    PolicyParams {
        theta: vec![theta],
        features: PolicyFeatures::Constant,
        n_knots: 1,
        n_ctrl: 1,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(-2.0, 2.0)],
    }
}

fn zeroed_noise(grid: TimeGrid, n_w: usize, d: usize, m: usize) -> Vec<fspde_core::NoiseGrid> {
    let mut noise = sample_ensemble(grid, n_w, d, &JumpMeasureSpec::empty(), 1, m);
    for ng in noise.iter_mut() {
        ng.dw.fill(0.0);
        ng.du.fill(0.0);
    }
    noise
}

#[test]
fn forward_with_no_coefficients_is_pure_semigroup_transport() {
    let mut params = lq_small();
    params.a_f = 0.0;
    params.b_f = 0.0;
    params.g1_scale = 0.0;
    params.g2_scale = 0.0;
    params.theta_scale = 0.0;
    let model = make_lq_model(params).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let noise = sample_noise(grid, 4, 1, model.jump_measure(), 3, 0);
    let policy = const_policy(0.0);
    let path = simulate_forward(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::InnovationBrownian,
    )
    .unwrap();
    let expected = model.space().apply_semigroup(1.0, &model.initial_state()).unwrap();
    let got = path.x_at(16);
    assert!((got - expected).norm() < 1e-12);
}

#[test]
fn lq_zero_noise_matches_scalar_ode_per_mode() {
    // Drift -a_f x per mode on top of the spectrum: x_T = exp(-(lambda + a_f) T) x_0,
    // up to the first-order splitting error of the scheme.
    let mut params = lq_small();
    params.g1_scale = 0.0;
    params.g2_scale = 0.0;
    params.theta_scale = 0.0;
    params.b_f = 0.0;
    params.h_level = 0.0;
    let a_f = params.a_f;
    let model = make_lq_model(params).unwrap();
    let policy = const_policy(0.0);
    let x0 = model.initial_state();

    let mut errs = Vec::new();
    for n_steps in [32usize, 64, 128] {
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        let noise = zeroed_noise(grid, 4, 1, 1);
        let path = simulate_forward(
            &model,
            &policy,
            &noise[0],
            &x0,
            MeasureMode::InnovationBrownian,
        )
        .unwrap();
        let mut err: f64 = 0.0;
        for c in 0..4 {
            let lam = model.space().eigenvalues()[c];
            let exact = x0[c] * (-(lam + a_f) * 1.0f64).exp();
            err = err.max((path.x[(n_steps, c)] - exact).abs());
        }
        errs.push(err);
    }
    // First-order in dt: halving the step roughly halves the error.
    assert!(errs[0] < 2e-3, "coarse error {}", errs[0]);
    assert!(errs[2] < errs[0] / 2.5, "no first-order decay: {errs:?}");
}

#[test]
fn moment_stability_under_step_refinement() {
    let model = make_harvesting_model(HarvestingParams::default()).unwrap();
    let policy = PolicyParams {
        theta: vec![0.3, 0.0, 0.0, 0.0],
        features: PolicyFeatures::AffineY,
        n_knots: 1,
        n_ctrl: 2,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
    };
    let mut sups = Vec::new();
    for n_steps in [32usize, 64] {
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        let noise = sample_ensemble(grid, 16, 1, model.jump_measure(), 17, 2000);
        let paths = simulate_ensemble(
            &model,
            &policy,
            &noise,
            &model.initial_state(),
            MeasureMode::InnovationBrownian,
        )
        .unwrap();
        let mut sup = 0.0f64;
        for k in 0..=n_steps {
            let mean_sq: f64 =
                paths.iter().map(|p| p.x.row(k).norm_squared()).sum::<f64>() / 2000.0;
            sup = sup.max(mean_sq);
        }
        sups.push(sup);
    }
    assert!(sups[1] <= sups[0] * 1.25, "second moments unstable: {sups:?}");
}

#[test]
fn first_variation_zero_direction_and_exact_linearity() {
    let model = make_harvesting_model(HarvestingParams::default()).unwrap();
    let policy = PolicyParams {
        theta: vec![0.3, 0.05, 0.1, 0.0],
        features: PolicyFeatures::AffineY,
        n_knots: 1,
        n_ctrl: 2,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
    };
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let ng = sample_noise(grid, 16, 1, model.jump_measure(), 23, 5);
    let hat = simulate_forward(
        &model,
        &policy,
        &ng,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();

    let zero = DMatrix::zeros(32, 2);
    let x1 = simulate_first_variation(&model, &hat, &ng, &zero).unwrap();
    assert_eq!(x1.abs().max(), 0.0);

    let v = DMatrix::from_fn(32, 2, |k, c| 0.1 * ((k + c) as f64 * 0.37).sin());
    let x1v = simulate_first_variation(&model, &hat, &ng, &v).unwrap();
    let x1v2 = simulate_first_variation(&model, &hat, &ng, &(&v * 2.0)).unwrap();
    let diff = (&x1v2 - &x1v * 2.0).abs().max();
    assert!(diff < 1e-13, "linearity violated by {diff}");
}

#[test]
fn first_variation_is_the_pathwise_derivative() {
    // (x_eps - x_hat)/eps approaches the variation state at first order on
    // shared noise with the observation held fixed.
    let model = make_harvesting_model(HarvestingParams::default()).unwrap();
    let policy = PolicyParams {
        theta: vec![0.4, 0.05, 0.05, -0.02],
        features: PolicyFeatures::AffineY,
        n_knots: 1,
        n_ctrl: 2,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
    };
    let dir = fspde_core::model::FeatureDirection::from_policy_shape(
        &policy,
        vec![0.2, 0.05, -0.1, 0.02],
    );
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let dt = grid.dt();

    let mut sups = Vec::new();
    for &eps in &[0.1, 0.05, 0.025] {
        let mut worst = 0.0f64;
        for pidx in 0..20 {
            let ng = sample_noise(grid, 16, 1, model.jump_measure(), 29, pidx);
            let hat = simulate_forward(
                &model,
                &policy,
                &ng,
                &model.initial_state(),
                MeasureMode::ObservationBrownian,
            )
            .unwrap();
            let vpath = fspde_core::forward::direction_along(&dir, &hat, dt);
            let x1 = simulate_first_variation(&model, &hat, &ng, &vpath).unwrap();
            let law = fspde_core::model::PerturbedLaw { base: &policy, direction: &dir, eps };
            let xe = simulate_forward(
                &model,
                &law,
                &ng,
                &model.initial_state(),
                MeasureMode::ObservationBrownian,
            )
            .unwrap();
            for k in 0..=64 {
                let fd = (xe.x.row(k) - hat.x.row(k)) / eps;
                worst = worst.max((fd - x1.row(k)).norm());
            }
        }
        sups.push(worst);
    }
    // Error is O(eps): each halving of eps roughly halves the defect.
    assert!(
        sups[2] <= sups[0] * 0.40,
        "no first-order shrinkage: {sups:?}"
    );
}

#[test]
fn flow_axioms_hold_on_shared_noise() {
    let model = make_harvesting_model(HarvestingParams::default()).unwrap();
    let policy = PolicyParams {
        theta: vec![0.3, 0.05, 0.1, 0.0],
        features: PolicyFeatures::AffineY,
        n_knots: 1,
        n_ctrl: 2,
        d_obs: 1,
        horizon: 1.0,
        control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
    };
    let grid = TimeGrid::new(1.0, 32).unwrap();
    for pidx in 0..5 {
        let ng = sample_noise(grid, 16, 1, model.jump_measure(), 31, pidx);
        let hat = simulate_forward(
            &model,
            &policy,
            &ng,
            &model.initial_state(),
            MeasureMode::InnovationBrownian,
        )
        .unwrap();
        let transfers = flow_transfer_matrices(&model, &hat, &ng);

        // Identity at the start index.
        let flow_s = flow_path(&transfers, 16, 8);
        assert_eq!(flow_s[8], DMatrix::identity(16, 16));

        // Composition: flow(r,t) flow(t,s) = flow(r,s) up to rounding.
        let flow_t = flow_path(&transfers, 16, 20);
        let lhs = &flow_t[32] * &flow_s[20];
        let rhs = &flow_s[32];
        let err = fspde_core::spectral::schatten_norm(&(lhs - rhs), 2.0).unwrap();
        assert!(err <= 1e-9, "composition defect {err}");

        // Columns reproduce the homogeneous simulation exactly (same code path).
        let mut e3 = DVector::zeros(16);
        e3[3] = 1.0;
        let prop = propagate_with_transfers(&transfers, 8, &e3);
        let via_flow = &flow_s[32] * &e3;
        let rel = (&prop[32] - &via_flow).norm() / via_flow.norm().max(1e-300);
        assert!(rel <= 1e-10, "column mismatch {rel}");
    }
}

#[test]
fn flow_with_zero_couplings_is_the_semigroup() {
    let mut params = lq_small();
    params.a_f = 0.0;
    params.b_f = 0.0;
    params.g1_scale = 0.0;
    params.g2_scale = 0.0;
    params.theta_scale = 0.0;
    params.h_level = 0.0;
    let model = make_lq_model(params).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let ng = sample_noise(grid, 4, 1, model.jump_measure(), 5, 0);
    let policy = const_policy(0.0);
    let hat = simulate_forward(
        &model,
        &policy,
        &ng,
        &model.initial_state(),
        MeasureMode::InnovationBrownian,
    )
    .unwrap();
    let transfers = flow_transfer_matrices(&model, &hat, &ng);
    let flow = flow_path(&transfers, 4, 0);
    let factors = model.space().semigroup_factors(1.0).unwrap();
    for c in 0..4 {
        assert!((flow[8][(c, c)] - factors[c]).abs() < 1e-12);
    }
}

#[test]
fn bsde_with_degenerate_noise_reproduces_terminal_value() {
    let mut params = lq_small();
    params.g1_scale = 0.0;
    params.g2_scale = 0.0;
    params.theta_scale = 0.0;
    params.g0 = 0.0;
    params.eta_g = 0.0;
    params.jump_marks = vec![];
    params.jump_weights = vec![];
    let model = make_lq_model(params).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let noise = zeroed_noise(grid, 4, 1, 64);
    let policy = const_policy(0.1);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::InnovationBrownian,
    )
    .unwrap();
    let basis = RegressionBasis::mode_linear();
    let sol = solve_model_bsde(&model, &paths, &noise, &basis, &BsdeOptions::default()).unwrap();
    let terminal = model.terminal_f(&paths[0].x_at(8));
    // Tolerance at the ridge-regularization scale of the conditional fits.
    for k in 0..=8 {
        assert!((sol.y[(0, k)] - terminal).abs() < 1e-6);
    }
    for k in 0..8 {
        assert!(sol.z[k].abs().max() <= 1e-6);
        assert!(sol.r[k].abs().max() <= 1e-6);
    }
}

#[test]
fn bsde_martingale_case_tracks_conditional_mean() {
    // No driver: y_0 should match the plain Monte Carlo mean of f(x_T), and
    // the compensated one-step residuals should average to zero.
    let mut params = lq_small();
    params.g0 = 0.0;
    params.eta_g = 0.0;
    let model = make_lq_model(params).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let m = 4000;
    let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 41, m);
    let policy = const_policy(0.2);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();
    let basis = RegressionBasis::mode_linear();
    let sol = solve_model_bsde(&model, &paths, &noise, &basis, &BsdeOptions::default()).unwrap();

    let fs: Vec<f64> = (0..m).map(|p| model.terminal_f(&paths[p].x_at(32))).collect();
    let (ef, se) = mean_se(&fs);
    assert!(
        (sol.y0 - ef).abs() <= 3.0 * (se + sol.y0_se),
        "y0 {} vs mean {ef}",
        sol.y0
    );

    // Martingale residual away from the degenerate initial step; the
    // tolerance budgets the in-sample projection bias of order
    // (responses x mean value) / paths on top of the sampling error.
    let dt = grid.dt();
    for k in [5usize, 10, 25] {
        let resid: Vec<f64> = (0..m)
            .map(|p| {
                let zrow = sol.z_at(p, k);
                let rrow = sol.r_at(p, k);
                let grow = sol.gamma_at(p, k);
                let counts = noise[p].jump_counts(3);
                let mut jump = 0.0;
                for mm in 0..3 {
                    jump += grow[mm]
                        * (counts[(k, mm)] as f64 - model.jump_measure().weights[mm] * dt);
                }
                sol.y[(p, k + 1)]
                    - sol.y[(p, k)]
                    - zrow.dot(&noise[p].dw.row(k).transpose())
                    - rrow.dot(&noise[p].du.row(k).transpose())
                    - jump
            })
            .collect();
        let (mr, mse) = mean_se(&resid);
        // In-sample projection optimism: every fitted integrand correlates
        // with its own increment through the rank-F hat matrix, giving a
        // deterministic offset of about (n_w + d + K) F E|y| / M.
        let y_scale: f64 =
            (0..m).map(|p| sol.y[(p, k + 1)].abs()).sum::<f64>() / m as f64;
        let f = 7.0;
        let optimism = (4.0 + 1.0 + 3.0) * f * y_scale / m as f64;
        assert!(
            mr.abs() <= 4.0 * mse + 1.5 * optimism,
            "martingale residual at {k}: {mr} vs se {mse} + optimism {optimism}"
        );
    }
}

#[test]
fn bsde_discounted_driver_matches_closed_form() {
    // Integrated driver g0 - eta y gives
    // y_0 = exp(-eta T) E[f(x_T)] + g0 (1 - exp(-eta T)) / eta.
    let mut params = lq_small();
    params.eta_g = 0.4;
    params.g0 = 0.07;
    let model = make_lq_model(params).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let m = 4000;
    let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 11, m);
    let policy = const_policy(0.3);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();
    let basis = RegressionBasis::mode_linear();
    let sol = solve_model_bsde(&model, &paths, &noise, &basis, &BsdeOptions::default()).unwrap();

    let fs: Vec<f64> = (0..m).map(|p| model.terminal_f(&paths[p].x_at(32))).collect();
    let (ef, ef_se) = mean_se(&fs);
    let eta = 0.4f64;
    let expected = (-eta).exp() * ef + 0.07 * (1.0 - (-eta).exp()) / eta;
    let tol = 3.0 * (ef_se + sol.y0_se) + 2e-3;
    assert!(
        (sol.y0 - expected).abs() <= tol,
        "y0 = {}, expected = {expected}, tol = {tol}",
        sol.y0
    );
}

#[test]
fn bsde_comparison_monotonicity_in_the_driver() {
    // A pointwise larger driver cannot lower the initial value.
    let model = make_lq_model(lq_small()).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let m = 2000;
    let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 51, m);
    let policy = const_policy(0.1);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();
    let basis = RegressionBasis::mode_linear();
    let n_last = paths[0].n_steps();
    let terminal = |p: usize| model.terminal_f(&paths[p].x_at(n_last));
    let h_at = |p: usize, k: usize| {
        model.h_obs(k as f64 * grid.dt(), &paths[p].x_at(k), &paths[p].u_at(k))
    };
    let features = |p: usize, k: usize| model_state_features(&paths[p], k);
    let mut y0s = Vec::new();
    for bump in [0.0, 0.25] {
        let driver = move |_p: usize,
                           _k: usize,
                           y: f64,
                           _z: &DVector<f64>,
                           _r: &DVector<f64>,
                           _g: &DVector<f64>| { -0.3 * y + bump };
        let spec = ScalarBsdeSpec {
            terminal: &terminal,
            driver: &driver,
            form: MartingaleForm::Observation,
            h_at: &h_at,
        };
        let sol = solve_scalar_bsde(
            &spec,
            &noise,
            MeasureMode::ObservationBrownian,
            &model.jump_measure().weights,
            &features,
            &basis,
            &BsdeOptions::default(),
        )
        .unwrap();
        y0s.push(sol.y0);
    }
    assert!(y0s[1] >= y0s[0], "comparison violated: {y0s:?}");
}

#[test]
fn regression_residuals_are_orthogonal_to_features() {
    let model = make_lq_model(lq_small()).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let m = 1500;
    let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 61, m);
    let policy = const_policy(0.2);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::ObservationBrownian,
    )
    .unwrap();
    let basis = RegressionBasis::mode_linear();
    let sol = solve_model_bsde(&model, &paths, &noise, &basis, &BsdeOptions::default()).unwrap();

    // Reconstruct the step-6 normal equations: residual of the conditional
    // fit must be orthogonal to every feature.
    let k = 6;
    let f = basis.n_features(model_state_features(&paths[0], k).len());
    let mut design = DMatrix::zeros(m, f);
    for p in 0..m {
        design
            .row_mut(p)
            .copy_from(&basis.features(&model_state_features(&paths[p], k)).transpose());
    }
    let reg = fspde_core::backward::StepRegression::new(design.clone(), k).unwrap();
    let resp = DMatrix::from_fn(m, 1, |p, _| sol.y[(p, k + 1)]);
    let coeffs = reg.coefficients(&resp);
    let resid = &resp - reg.fitted(&coeffs);
    let ortho = design.transpose() * resid;
    // Ridge shifts the normal equations by lambda * beta; bound by that scale.
    let gram_trace = design.transpose() * &design;
    let lam = 1e-8 * gram_trace.diagonal().iter().sum::<f64>() / f as f64;
    let bound = lam * coeffs.abs().max() * 10.0 + 1e-10;
    assert!(ortho.abs().max() <= bound, "orthogonality defect {}", ortho.abs().max());
}

#[test]
fn singular_bspde_zero_data_transports_terminal_by_semigroup() {
    struct ZeroCoeffs;
    impl LinearSpdeCoeffs for ZeroCoeffs {
        fn dim_h(&self) -> usize {
            4
        }
        fn n_w(&self) -> usize {
            4
        }
        fn d_obs(&self) -> usize {
            1
        }
        fn n_marks(&self) -> usize {
            3
        }
        fn trunc_n(&self) -> usize {
            0
        }
        fn trunc_m(&self) -> usize {
            0
        }
        fn jump_weight(&self, _m: usize) -> f64 {
            0.5
        }
        fn q1_apply(&self, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn q1_adj_apply(&self, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn k_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn k_adj_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn q2_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn q2_adj_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn q3_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn q3_adj_apply(&self, _: usize, _: usize, _: usize, _: &DVector<f64>, _: f64, _: &mut DVector<f64>) {}
        fn r_dag_add(&self, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
        fn k_chi_add(&self, _: usize, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
        fn gamma_col_add(&self, _: usize, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
        fn r2_add(&self, _: usize, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
        fn r3_add(&self, _: usize, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
    }
    struct ConstEta(DVector<f64>);
    impl BspdeData for ConstEta {
        fn terminal(&self, _path: usize) -> DVector<f64> {
            self.0.clone()
        }
        fn forcing_add(&self, _: usize, _: usize, _: f64, _: &mut DVector<f64>) {}
    }

    let model = make_lq_model(lq_small()).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let noise = sample_ensemble(grid, 4, 1, model.jump_measure(), 71, 128);
    let policy = const_policy(0.0);
    let paths = simulate_ensemble(
        &model,
        &policy,
        &noise,
        &model.initial_state(),
        MeasureMode::InnovationBrownian,
    )
    .unwrap();
    let eta = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
    let features = |p: usize, k: usize| model_state_features(&paths[p], k);
    let basis = RegressionBasis::mode_linear();
    let sol = solve_singular_bspde(
        &ZeroCoeffs,
        &ConstEta(eta.clone()),
        &noise,
        model.space(),
        &features,
        &basis,
        0,
    )
    .unwrap();
    let expected = model.space().apply_semigroup(1.0, &eta).unwrap();
    // With no couplings the integrand estimates never feed back, so the
    // value transport is exact up to the ridge scale, on every path.
    for z0 in &sol.z0 {
        assert!((z0 - &expected).norm() < 1e-6);
    }
}
