//! Optimal-harvesting instance: a stochastic reaction-diffusion population
//! model with logistic growth, mode-wise multiplicative environmental noise,
//! downward proportional jump losses, a noisy integrated sensor, and a
//! recursive cost with Huber-type penalties on the backward integrands.

use super::{BsdeArgs, Control, Model, ModelDims, ModelError, ScalarGrad};
use crate::noise::JumpMeasureSpec;
use crate::spectral::{ModeOperator, ModeVector, QuadratureGrid, SpectralSpace};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestingParams {
    pub dim_h: usize,
    pub n_w: usize,
    pub n_ctrl: usize,
    pub domain_length: f64,
    /// Diffusivity in front of the Laplacian.
    pub diffusivity: f64,
    /// Intrinsic growth rate of the logistic law.
    pub r_a: f64,
    /// Environmental carrying capacity.
    pub c_a: f64,
    /// Multiplicative noise level per mode.
    pub sigma_level: f64,
    /// Jump marks: fractional losses in (0, 1).
    pub jump_marks: Vec<f64>,
    pub jump_weights: Vec<f64>,
    /// Unit revenue from harvesting.
    pub p_l: f64,
    /// Quadratic operational cost weight.
    pub c_l: f64,
    /// Sustainability penalty weight around the target level.
    pub lambda_l: f64,
    /// Target population level.
    pub x_star: f64,
    /// Terminal penalty weight.
    pub beta_terminal: f64,
    /// Terminal target for the integrated population.
    pub x_t_star: f64,
    /// Discount rate of the recursive value.
    pub eta: f64,
    /// Huber penalty scale on the observation integrand.
    pub theta_bar: f64,
    pub delta_r: f64,
    pub delta_gamma: f64,
    /// Positive bounded per-mark weights inside the jump penalty.
    pub rho_weights: Vec<f64>,
    /// Sensor profile: Gaussian bump center and width.
    pub sensor_center: f64,
    pub sensor_width: f64,
    /// Saturation threshold bounding the sensor reading.
    pub sensor_saturation: f64,
    /// Initial population: constant level plus one cosine bump.
    pub x0_level: f64,
    pub x0_bump: f64,
    pub control_box: Vec<(f64, f64)>,
}

impl Default for HarvestingParams {
    fn default() -> Self {
        Self {
            dim_h: 16,
            n_w: 16,
            n_ctrl: 2,
            domain_length: 1.0,
            diffusivity: 0.5,
            r_a: 1.0,
            c_a: 1.0,
            sigma_level: 0.15,
            jump_marks: vec![0.06, 0.12, 0.25],
            jump_weights: vec![1.0, 0.6, 0.4],
            p_l: 1.0,
            c_l: 0.8,
            lambda_l: 0.5,
            x_star: 0.55,
            beta_terminal: 0.6,
            x_t_star: 0.5,
            eta: 0.3,
            theta_bar: 0.5,
            delta_r: 0.4,
            delta_gamma: 0.4,
            rho_weights: vec![1.0, 1.0, 1.0],
            sensor_center: 0.5,
            sensor_width: 0.15,
            sensor_saturation: 4.0,
            x0_level: 0.5,
            x0_bump: 0.1,
            control_box: vec![(0.0, 1.2), (-0.4, 0.4)],
        }
    }
}

/// Huber-type convex penalty `scale * delta^2 (sqrt(1 + (s/delta)^2) - 1)`.
fn huber(scale: f64, delta: f64, s: f64) -> f64 {
    scale * delta * delta * ((1.0 + (s / delta).powi(2)).sqrt() - 1.0)
}

/// Derivative of the Huber penalty with respect to `s`.
fn huber_ds(scale: f64, delta: f64, s: f64) -> f64 {
    scale * s / (1.0 + (s / delta).powi(2)).sqrt()
}

pub struct HarvestingModel {
    params: HarvestingParams,
    space: SpectralSpace,
    quad: QuadratureGrid,
    jumps: JumpMeasureSpec,
    /// Sensor profile in mode coordinates.
    sensor_modes: ModeVector,
    /// Selector embedding control coordinates into the leading modes.
    ctrl_embed: DMatrix<f64>,
    x0: ModeVector,
    lambda_tot: f64,
}

pub fn make_harvesting_model(params: HarvestingParams) -> Result<HarvestingModel, ModelError> {
    for &a in &params.jump_marks {
        if !(a > 0.0 && a < 1.0) {
            return Err(ModelError::BadParameter(format!(
                "jump mark {a} must lie in (0, 1)"
            )));
        }
    }
    for (name, v) in [
        ("domain_length", params.domain_length),
        ("diffusivity", params.diffusivity),
        ("r_a", params.r_a),
        ("c_a", params.c_a),
        ("c_l", params.c_l),
        ("theta_bar", params.theta_bar),
        ("delta_r", params.delta_r),
        ("delta_gamma", params.delta_gamma),
        ("sensor_width", params.sensor_width),
        ("sensor_saturation", params.sensor_saturation),
    ] {
        if !(v > 0.0) {
            return Err(ModelError::BadParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if params.rho_weights.len() != params.jump_marks.len()
        || params.jump_weights.len() != params.jump_marks.len()
    {
        return Err(ModelError::BadParameter(
            "jump_marks, jump_weights, rho_weights must have equal length".into(),
        ));
    }
    if params.n_ctrl > params.dim_h || params.control_box.len() != params.n_ctrl {
        return Err(ModelError::BadParameter("control embedding inconsistent".into()));
    }

    // Half-Laplacian spectrum scaled by the diffusivity, cosine basis retained
    // for the pointwise nonlinearity.
    let base = SpectralSpace::new_neumann(params.dim_h, params.domain_length)
        .map_err(|e| ModelError::BadParameter(e.to_string()))?;
    let eigs: Vec<f64> = base.eigenvalues().iter().map(|l| params.diffusivity * l).collect();
    let space = SpectralSpace::new_abstract(eigs, params.domain_length)
        .map_err(|e| ModelError::BadParameter(e.to_string()))?;
    let quad = QuadratureGrid::new(&space, 4 * params.dim_h);

    let jumps = JumpMeasureSpec::new(params.jump_marks.clone(), params.jump_weights.clone())
        .map_err(|e| ModelError::BadParameter(e.to_string()))?;
    let lambda_tot = jumps.total_intensity();
    if !(lambda_tot > 0.0) {
        return Err(ModelError::BadParameter(
            "the harvesting instance requires a non-trivial jump measure".into(),
        ));
    }

    let sensor_values = DVector::from_fn(quad.nodes.len(), |q, _| {
        let xi = quad.nodes[q];
        (-((xi - params.sensor_center) / params.sensor_width).powi(2) / 2.0).exp()
    });
    let sensor_modes = quad.from_grid(&sensor_values);

    let mut ctrl_embed = DMatrix::zeros(params.dim_h, params.n_ctrl);
    for c in 0..params.n_ctrl {
        ctrl_embed[(c, c)] = 1.0;
    }

    let x0_values = DVector::from_fn(quad.nodes.len(), |q, _| {
        let xi = quad.nodes[q];
        params.x0_level
            + params.x0_bump * (std::f64::consts::PI * xi / params.domain_length).cos()
    });
    let x0 = quad.from_grid(&x0_values);

    Ok(HarvestingModel { params, space, quad, jumps, sensor_modes, ctrl_embed, x0, lambda_tot })
}

impl HarvestingModel {
    pub fn params(&self) -> &HarvestingParams {
        &self.params
    }

    fn logistic(&self, p: f64) -> f64 {
        self.params.r_a * p * (1.0 - p / self.params.c_a)
    }

    fn logistic_dp(&self, p: f64) -> f64 {
        self.params.r_a * (1.0 - 2.0 * p / self.params.c_a)
    }

    /// Raw integrated sensor reading before saturation.
    fn sensor_raw(&self, x: &ModeVector) -> f64 {
        self.sensor_modes.dot(x)
    }
}

impl Model for HarvestingModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            dim_h: self.params.dim_h,
            n_w: self.params.n_w,
            d_obs: 1,
            n_ctrl: self.params.n_ctrl,
            n_marks: self.jumps.n_marks(),
            bsde_dim: 1,
        }
    }

    fn space(&self) -> &SpectralSpace {
        &self.space
    }

    fn jump_measure(&self) -> &JumpMeasureSpec {
        &self.jumps
    }

    fn initial_state(&self) -> ModeVector {
        self.x0.clone()
    }

    fn control_box(&self) -> &[(f64, f64)] {
        &self.params.control_box
    }

    fn drift(&self, _t: f64, x: &ModeVector, u: &Control) -> ModeVector {
        let grid = self.quad.to_grid(x);
        let growth = grid.map(|p| self.logistic(p));
        self.quad.from_grid(&growth) - &self.ctrl_embed * u
    }

    fn drift_dx(&self, _t: f64, x: &ModeVector, _u: &Control) -> ModeOperator {
        let grid = self.quad.to_grid(x);
        self.quad.pointwise_jacobian(&grid.map(|p| self.logistic_dp(p)))
    }

    fn drift_du(&self, _t: f64, _x: &ModeVector, _u: &Control) -> ModeOperator {
        -self.ctrl_embed.clone()
    }

    fn g1(&self, _t: f64, x: &ModeVector, _u: &Control) -> ModeOperator {
        let dims = self.dims();
        let mut m = ModeOperator::zeros(dims.dim_h, dims.n_w);
        for i in 0..dims.dim_h.min(dims.n_w) {
            m[(i, i)] = self.params.sigma_level * x[i];
        }
        m
    }

    fn g1_dx_mode(&self, _t: f64, _x: &ModeVector, _u: &Control, i: usize) -> ModeOperator {
        let n = self.params.dim_h;
        let mut m = ModeOperator::zeros(n, n);
        if i < n {
            m[(i, i)] = self.params.sigma_level;
        }
        m
    }

    fn g1_dx_combo(
        &self,
        _t: f64,
        _x: &ModeVector,
        _u: &Control,
        w: &DVector<f64>,
    ) -> ModeOperator {
        let n = self.params.dim_h;
        let mut m = ModeOperator::zeros(n, n);
        for i in 0..n.min(w.len()) {
            m[(i, i)] = self.params.sigma_level * w[i];
        }
        m
    }

    fn g1_du_dir(
        &self,
        _t: f64,
        _x: &ModeVector,
        _u: &Control,
        _w: &ModeVector,
        _v: &Control,
    ) -> ModeVector {
        DVector::zeros(self.params.dim_h)
    }

    fn g2(&self, _t: f64, _x: &ModeVector, _u: &Control, _j: usize) -> ModeVector {
        DVector::zeros(self.params.dim_h)
    }

    fn g2_dx(&self, _t: f64, _x: &ModeVector, _u: &Control, _j: usize) -> ModeOperator {
        ModeOperator::zeros(self.params.dim_h, self.params.dim_h)
    }

    fn g2_du(&self, _t: f64, _x: &ModeVector, _u: &Control, _j: usize) -> ModeOperator {
        ModeOperator::zeros(self.params.dim_h, self.params.n_ctrl)
    }

    fn theta(&self, _t: f64, x: &ModeVector, _u: &Control, m: usize) -> ModeVector {
        x * (-self.params.jump_marks[m])
    }

    fn theta_dx(&self, _t: f64, _x: &ModeVector, _u: &Control, m: usize) -> ModeOperator {
        ModeOperator::identity(self.params.dim_h, self.params.dim_h)
            * (-self.params.jump_marks[m])
    }

    fn theta_du(&self, _t: f64, _x: &ModeVector, _u: &Control, _m: usize) -> ModeOperator {
        ModeOperator::zeros(self.params.dim_h, self.params.n_ctrl)
    }

    fn h_obs(&self, _t: f64, x: &ModeVector, _u: &Control) -> DVector<f64> {
        let sat = self.params.sensor_saturation;
        DVector::from_vec(vec![sat * (self.sensor_raw(x) / sat).tanh()])
    }

    fn h_dx(&self, _t: f64, x: &ModeVector, _u: &Control) -> ModeOperator {
        let sat = self.params.sensor_saturation;
        let s = (self.sensor_raw(x) / sat).tanh();
        let gain = 1.0 - s * s;
        let mut m = ModeOperator::zeros(1, self.params.dim_h);
        m.row_mut(0).copy_from(&(self.sensor_modes.transpose() * gain));
        m
    }

    fn h_du(&self, _t: f64, _x: &ModeVector, _u: &Control) -> ModeOperator {
        ModeOperator::zeros(1, self.params.n_ctrl)
    }

    // Recursive driver in observation form: the innovation-driven penalty
    // dynamics pick up the `<r, h>` cross term when written against the
    // observed path, and the mark-independent part is spread uniformly over
    // the jump measure so its integral is the intended total.
    fn driver_g(&self, t: f64, x: &ModeVector, u: &Control, bs: &BsdeArgs, m: usize) -> f64 {
        let p = &self.params;
        let r_norm = bs.r.norm();
        let common = p.eta * bs.y - huber(p.theta_bar, p.delta_r, r_norm)
            + bs.r.dot(&self.h_obs(t, x, u));
        common / self.lambda_tot - p.rho_weights[m] * huber(1.0, p.delta_gamma, bs.gamma_m.abs())
    }

    fn driver_g_grad(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        bs: &BsdeArgs,
        m: usize,
    ) -> ScalarGrad {
        let p = &self.params;
        let dims = self.dims();
        let mut g = ScalarGrad::zeros(&dims);
        let h = self.h_obs(t, x, u);
        let hdx = self.h_dx(t, x, u);
        // d/dx <r, h(x)> = h_dx^T r
        g.dx = hdx.transpose() * bs.r / self.lambda_tot;
        g.dy = p.eta / self.lambda_tot;
        let r_norm = bs.r.norm();
        let mut dr = h.clone();
        if r_norm > 0.0 {
            dr -= bs.r * (huber_ds(p.theta_bar, p.delta_r, r_norm) / r_norm);
        }
        g.dr = dr / self.lambda_tot;
        // Smooth through |gamma|: d/dg huber(|g|) = huber'(|g|) sign(g).
        g.dgamma = -p.rho_weights[m] * huber_ds(1.0, p.delta_gamma, bs.gamma_m.abs())
            * bs.gamma_m.signum();
        if bs.gamma_m == 0.0 {
            g.dgamma = 0.0;
        }
        g
    }

    fn terminal_f(&self, _x: &ModeVector) -> f64 {
        0.0
    }

    fn terminal_f_dx(&self, _x: &ModeVector) -> ModeVector {
        DVector::zeros(self.params.dim_h)
    }

    fn run_cost(&self, _t: f64, x: &ModeVector, u: &Control, _bs: &BsdeArgs, _m: usize) -> f64 {
        let p = &self.params;
        let l = self.params.domain_length;
        let sl = l.sqrt();
        // Integrated revenue: only the constant control mode has nonzero mass.
        let u_int = sl * u[0];
        let u_sq = u.norm_squared();
        let xq = x.norm_squared() - 2.0 * p.x_star * sl * x[0] + p.x_star * p.x_star * l;
        (-p.p_l * u_int + 0.5 * p.c_l * u_sq + 0.5 * p.lambda_l * xq) / self.lambda_tot
    }

    fn run_cost_grad(
        &self,
        _t: f64,
        x: &ModeVector,
        u: &Control,
        _bs: &BsdeArgs,
        _m: usize,
    ) -> ScalarGrad {
        let p = &self.params;
        let sl = self.params.domain_length.sqrt();
        let dims = self.dims();
        let mut g = ScalarGrad::zeros(&dims);
        let mut dx = x * p.lambda_l;
        dx[0] -= p.lambda_l * p.x_star * sl;
        g.dx = dx / self.lambda_tot;
        let mut du = u * p.c_l;
        du[0] -= p.p_l * sl;
        g.du = du / self.lambda_tot;
        g
    }

    fn phi(&self, x: &ModeVector) -> f64 {
        let p = &self.params;
        let sl = p.domain_length.sqrt();
        0.5 * p.beta_terminal * (sl * x[0] - p.x_t_star).powi(2)
    }

    fn phi_dx(&self, x: &ModeVector) -> ModeVector {
        let p = &self.params;
        let sl = p.domain_length.sqrt();
        let mut g = DVector::zeros(p.dim_h);
        g[0] = p.beta_terminal * (sl * x[0] - p.x_t_star) * sl;
        g
    }

    fn psi(&self, y: f64) -> f64 {
        y
    }

    fn psi_dy(&self, _y: f64) -> f64 {
        1.0
    }
}
