//! Coefficient models: every drift, diffusion, jump, observation, driver, and
//! cost callable of the controlled system together with its directional
//! derivatives, plus the policy class used for observation-adapted controls.
//!
//! All callables are pure and re-entrant; a model value is shared read-only
//! across path workers. The backward-equation dimension is scalar throughout
//! (`bsde_dim == 1`): every provided instance uses a scalar recursive value.

mod harvesting;
mod lq;
mod policy;
mod random_bounded;

pub use harvesting::{make_harvesting_model, HarvestingParams};
pub use lq::{make_lq_model, LqParams};
pub use policy::{
    ControlLaw, FeatureDirection, ObsState, PerturbedLaw, PolicyFeatures, PolicyParams,
};
pub use random_bounded::{make_random_bounded_model, RandomBoundedParams};

use crate::noise::JumpMeasureSpec;
use crate::spectral::{ModeOperator, ModeVector, SpectralSpace};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub type Control = DVector<f64>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter out of range: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Retained state modes.
    pub dim_h: usize,
    /// Retained cylindrical Wiener modes.
    pub n_w: usize,
    /// Observation channels.
    pub d_obs: usize,
    /// Control coordinates.
    pub n_ctrl: usize,
    /// Jump marks.
    pub n_marks: usize,
    /// Backward-equation dimension (scalar in all instances).
    pub bsde_dim: usize,
}

/// Snapshot of the backward-state arguments fed to the driver and running cost.
#[derive(Debug, Clone, Copy)]
pub struct BsdeArgs<'a> {
    pub y: f64,
    pub z: &'a DVector<f64>,
    pub r: &'a DVector<f64>,
    /// Jump integrand evaluated at the mark under consideration.
    pub gamma_m: f64,
}

/// Gradient bundle of a scalar map of `(x, u, y, z, r, gamma)`.
#[derive(Debug, Clone)]
pub struct ScalarGrad {
    pub dx: DVector<f64>,
    pub du: DVector<f64>,
    pub dy: f64,
    pub dz: DVector<f64>,
    pub dr: DVector<f64>,
    pub dgamma: f64,
}

impl ScalarGrad {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            dx: DVector::zeros(dims.dim_h),
            du: DVector::zeros(dims.n_ctrl),
            dy: 0.0,
            dz: DVector::zeros(dims.n_w),
            dr: DVector::zeros(dims.d_obs),
            dgamma: 0.0,
        }
    }
}

/// Full coefficient interface of the controlled forward-backward system.
pub trait Model: Send + Sync {
    fn dims(&self) -> ModelDims;
    fn space(&self) -> &SpectralSpace;
    fn jump_measure(&self) -> &JumpMeasureSpec;
    fn initial_state(&self) -> ModeVector;
    /// Per-coordinate closed control bounds (the convex control domain).
    fn control_box(&self) -> &[(f64, f64)];

    // Drift.
    fn drift(&self, t: f64, x: &ModeVector, u: &Control) -> ModeVector;
    fn drift_dx(&self, t: f64, x: &ModeVector, u: &Control) -> ModeOperator;
    fn drift_du(&self, t: f64, x: &ModeVector, u: &Control) -> ModeOperator;

    // Diffusion against the cylindrical Wiener modes: an `dim_h x n_w` matrix
    // whose column `i` is the loading on mode increment `i`.
    fn g1(&self, t: f64, x: &ModeVector, u: &Control) -> ModeOperator;
    /// State derivative of column `i`: the operator `chi -> d/dx [G1(x,u) e_i] chi`.
    fn g1_dx_mode(&self, t: f64, x: &ModeVector, u: &Control, i: usize) -> ModeOperator;
    /// Weighted combination `sum_i w_i * g1_dx_mode(i)`; hot path of flow and
    /// first-variation stepping, overridable when the columns have structure.
    fn g1_dx_combo(&self, t: f64, x: &ModeVector, u: &Control, w: &DVector<f64>) -> ModeOperator {
        let dims = self.dims();
        let mut acc = ModeOperator::zeros(dims.dim_h, dims.dim_h);
        for i in 0..dims.n_w {
            if w[i] != 0.0 {
                acc += self.g1_dx_mode(t, x, u, i) * w[i];
            }
        }
        acc
    }
    /// Control derivative in a direction: `d/du [G1(x,u) w] v`.
    fn g1_du_dir(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        w: &ModeVector,
        v: &Control,
    ) -> ModeVector;
    /// Adjoint of the control coupling of the diffusion: the control vector
    /// whose coordinate `c` is `sum_i <q1 e_i, d/du [G1 e_i] e_c>`.
    fn g1_du_adjoint(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        q1: &ModeOperator,
    ) -> Control {
        let dims = self.dims();
        let mut out = DVector::zeros(dims.n_ctrl);
        let mut e_mode = DVector::zeros(dims.dim_h);
        let mut e_ctrl = DVector::zeros(dims.n_ctrl);
        for c in 0..dims.n_ctrl {
            e_ctrl[c] = 1.0;
            let mut acc = 0.0;
            for i in 0..dims.n_w.min(dims.dim_h) {
                e_mode[i] = 1.0;
                acc += q1.column(i).dot(&self.g1_du_dir(t, x, u, &e_mode, &e_ctrl));
                e_mode[i] = 0.0;
            }
            out[c] = acc;
            e_ctrl[c] = 0.0;
        }
        out
    }
    /// Weighted sum over basis columns `sum_i w_i * d/du [G1(x,u) e_i] v`.
    fn g1_du_combo(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        w: &DVector<f64>,
        v: &Control,
    ) -> ModeVector {
        let dims = self.dims();
        let mut acc = DVector::zeros(dims.dim_h);
        let mut e = DVector::zeros(dims.dim_h);
        for i in 0..dims.n_w.min(dims.dim_h) {
            if w[i] != 0.0 {
                e[i] = 1.0;
                acc.axpy(w[i], &self.g1_du_dir(t, x, u, &e, v), 1.0);
                e[i] = 0.0;
            }
        }
        acc
    }

    // Diffusion against the observation channels.
    fn g2(&self, t: f64, x: &ModeVector, u: &Control, j: usize) -> ModeVector;
    fn g2_dx(&self, t: f64, x: &ModeVector, u: &Control, j: usize) -> ModeOperator;
    fn g2_du(&self, t: f64, x: &ModeVector, u: &Control, j: usize) -> ModeOperator;

    // Jump coefficient per mark.
    fn theta(&self, t: f64, x: &ModeVector, u: &Control, m: usize) -> ModeVector;
    fn theta_dx(&self, t: f64, x: &ModeVector, u: &Control, m: usize) -> ModeOperator;
    fn theta_du(&self, t: f64, x: &ModeVector, u: &Control, m: usize) -> ModeOperator;

    // Observation drift.
    fn h_obs(&self, t: f64, x: &ModeVector, u: &Control) -> DVector<f64>;
    fn h_dx(&self, t: f64, x: &ModeVector, u: &Control) -> ModeOperator;
    fn h_du(&self, t: f64, x: &ModeVector, u: &Control) -> ModeOperator;

    // Backward driver, per mark; the integrated driver is
    // `sum_m weight_m * driver_g(..., m)`.
    fn driver_g(&self, t: f64, x: &ModeVector, u: &Control, bs: &BsdeArgs, m: usize) -> f64;
    fn driver_g_grad(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        bs: &BsdeArgs,
        m: usize,
    ) -> ScalarGrad;

    // Terminal datum of the backward equation.
    fn terminal_f(&self, x: &ModeVector) -> f64;
    fn terminal_f_dx(&self, x: &ModeVector) -> ModeVector;

    // Running cost, per mark, same integration convention as the driver.
    fn run_cost(&self, t: f64, x: &ModeVector, u: &Control, bs: &BsdeArgs, m: usize) -> f64;
    fn run_cost_grad(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        bs: &BsdeArgs,
        m: usize,
    ) -> ScalarGrad;

    // Terminal and recursive cost components.
    fn phi(&self, x: &ModeVector) -> f64;
    fn phi_dx(&self, x: &ModeVector) -> ModeVector;
    fn psi(&self, y: f64) -> f64;
    fn psi_dy(&self, y: f64) -> f64;

    /// Integrated driver `sum_m w_m g(..., gamma(m), m)` over the finite mark set.
    fn driver_g_integrated(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        y: f64,
        z: &DVector<f64>,
        r: &DVector<f64>,
        gamma: &DVector<f64>,
    ) -> f64 {
        let jm = self.jump_measure();
        let mut acc = 0.0;
        for m in 0..jm.n_marks() {
            let bs = BsdeArgs { y, z, r, gamma_m: gamma[m] };
            acc += jm.weights[m] * self.driver_g(t, x, u, &bs, m);
        }
        acc
    }

    /// Integrated running cost `sum_m w_m L(..., m)`.
    fn run_cost_integrated(
        &self,
        t: f64,
        x: &ModeVector,
        u: &Control,
        y: f64,
        z: &DVector<f64>,
        r: &DVector<f64>,
        gamma: &DVector<f64>,
    ) -> f64 {
        let jm = self.jump_measure();
        let mut acc = 0.0;
        for m in 0..jm.n_marks() {
            let bs = BsdeArgs { y, z, r, gamma_m: gamma[m] };
            acc += jm.weights[m] * self.run_cost(t, x, u, &bs, m);
        }
        acc
    }
}

/// Clamp a control into the model's box.
pub fn project_control(boxes: &[(f64, f64)], u: &mut Control) {
    for (c, &(lo, hi)) in boxes.iter().enumerate() {
        u[c] = u[c].clamp(lo, hi);
    }
}

/// Worst relative error of every analytic derivative against central finite
/// differences at randomly sampled evaluation points.
pub fn verify_gateaux_derivatives(model: &dyn Model, seed: u64, n_points: usize) -> f64 {
    let dims = model.dims();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let bump = 1e-6;
    let mut worst: f64 = 0.0;

    let rel = |analytic: f64, fd: f64| -> f64 {
        let scale = 1.0 + analytic.abs().max(fd.abs());
        (analytic - fd).abs() / scale
    };

    for _ in 0..n_points {
        let t: f64 = rng.gen_range(0.0..1.0);
        let x = DVector::from_fn(dims.dim_h, |_, _| rng.gen_range(-1.0..1.0));
        let u = DVector::from_fn(dims.n_ctrl, |_, _| rng.gen_range(-0.5..0.5));
        let y: f64 = rng.gen_range(-1.0..1.0);
        let z = DVector::from_fn(dims.n_w, |_, _| rng.gen_range(-1.0..1.0));
        let r = DVector::from_fn(dims.d_obs, |_, _| rng.gen_range(-1.0..1.0));
        let gamma_m: f64 = rng.gen_range(-1.0..1.0);
        let bs = BsdeArgs { y, z: &z, r: &r, gamma_m };

        // Vector-valued maps in x and u.
        let fdx = model.drift_dx(t, &x, &u);
        let fdu = model.drift_du(t, &x, &u);
        for c in 0..dims.dim_h {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += bump;
            xm[c] -= bump;
            let fd = (model.drift(t, &xp, &u) - model.drift(t, &xm, &u)) / (2.0 * bump);
            for row in 0..dims.dim_h {
                worst = worst.max(rel(fdx[(row, c)], fd[row]));
            }
        }
        for c in 0..dims.n_ctrl {
            let mut up = u.clone();
            let mut um = u.clone();
            up[c] += bump;
            um[c] -= bump;
            let fd = (model.drift(t, &x, &up) - model.drift(t, &x, &um)) / (2.0 * bump);
            for row in 0..dims.dim_h {
                worst = worst.max(rel(fdu[(row, c)], fd[row]));
            }
        }

        // Diffusion column derivatives and the control direction.
        for i in 0..dims.n_w.min(3) {
            let kdx = model.g1_dx_mode(t, &x, &u, i);
            let dir = DVector::from_fn(dims.dim_h, |_, _| rng.gen_range(-1.0..1.0));
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.axpy(bump, &dir, 1.0);
            xm.axpy(-bump, &dir, 1.0);
            let col_p = model.g1(t, &xp, &u).column(i).into_owned();
            let col_m = model.g1(t, &xm, &u).column(i).into_owned();
            let fd = (col_p - col_m) / (2.0 * bump);
            let an = &kdx * &dir;
            for row in 0..dims.dim_h {
                worst = worst.max(rel(an[row], fd[row]));
            }
        }
        {
            let w = DVector::from_fn(dims.dim_h, |_, _| rng.gen_range(-1.0..1.0));
            let v = DVector::from_fn(dims.n_ctrl, |_, _| rng.gen_range(-1.0..1.0));
            let mut up = u.clone();
            let mut um = u.clone();
            up.axpy(bump, &v, 1.0);
            um.axpy(-bump, &v, 1.0);
            let fd = (model.g1(t, &x, &up) * &w - model.g1(t, &x, &um) * &w) / (2.0 * bump);
            let an = model.g1_du_dir(t, &x, &u, &w, &v);
            for row in 0..dims.dim_h {
                worst = worst.max(rel(an[row], fd[row]));
            }
        }

        for j in 0..dims.d_obs {
            let gdx = model.g2_dx(t, &x, &u, j);
            let gdu = model.g2_du(t, &x, &u, j);
            for c in 0..dims.dim_h.min(4) {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += bump;
                xm[c] -= bump;
                let fd = (model.g2(t, &xp, &u, j) - model.g2(t, &xm, &u, j)) / (2.0 * bump);
                for row in 0..dims.dim_h {
                    worst = worst.max(rel(gdx[(row, c)], fd[row]));
                }
            }
            for c in 0..dims.n_ctrl {
                let mut up = u.clone();
                let mut um = u.clone();
                up[c] += bump;
                um[c] -= bump;
                let fd = (model.g2(t, &x, &up, j) - model.g2(t, &x, &um, j)) / (2.0 * bump);
                for row in 0..dims.dim_h {
                    worst = worst.max(rel(gdu[(row, c)], fd[row]));
                }
            }
        }

        for m in 0..dims.n_marks {
            let tdx = model.theta_dx(t, &x, &u, m);
            for c in 0..dims.dim_h.min(4) {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += bump;
                xm[c] -= bump;
                let fd =
                    (model.theta(t, &xp, &u, m) - model.theta(t, &xm, &u, m)) / (2.0 * bump);
                for row in 0..dims.dim_h {
                    worst = worst.max(rel(tdx[(row, c)], fd[row]));
                }
            }
        }

        let hdx = model.h_dx(t, &x, &u);
        let hdu = model.h_du(t, &x, &u);
        for c in 0..dims.dim_h.min(4) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += bump;
            xm[c] -= bump;
            let fd = (model.h_obs(t, &xp, &u) - model.h_obs(t, &xm, &u)) / (2.0 * bump);
            for row in 0..dims.d_obs {
                worst = worst.max(rel(hdx[(row, c)], fd[row]));
            }
        }
        for c in 0..dims.n_ctrl {
            let mut up = u.clone();
            let mut um = u.clone();
            up[c] += bump;
            um[c] -= bump;
            let fd = (model.h_obs(t, &x, &up) - model.h_obs(t, &x, &um)) / (2.0 * bump);
            for row in 0..dims.d_obs {
                worst = worst.max(rel(hdu[(row, c)], fd[row]));
            }
        }

        // Scalar maps: driver, running cost, terminal, costs.
        for m in 0..dims.n_marks {
            for (grad, eval) in [
                (
                    model.driver_g_grad(t, &x, &u, &bs, m),
                    &(|x: &ModeVector, u: &Control, b: &BsdeArgs| model.driver_g(t, x, u, b, m))
                        as &dyn Fn(&ModeVector, &Control, &BsdeArgs) -> f64,
                ),
                (
                    model.run_cost_grad(t, &x, &u, &bs, m),
                    &(|x: &ModeVector, u: &Control, b: &BsdeArgs| model.run_cost(t, x, u, b, m))
                        as &dyn Fn(&ModeVector, &Control, &BsdeArgs) -> f64,
                ),
            ] {
                for c in 0..dims.dim_h.min(4) {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += bump;
                    xm[c] -= bump;
                    let fd = (eval(&xp, &u, &bs) - eval(&xm, &u, &bs)) / (2.0 * bump);
                    worst = worst.max(rel(grad.dx[c], fd));
                }
                for c in 0..dims.n_ctrl {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[c] += bump;
                    um[c] -= bump;
                    let fd = (eval(&x, &up, &bs) - eval(&x, &um, &bs)) / (2.0 * bump);
                    worst = worst.max(rel(grad.du[c], fd));
                }
                let fd = {
                    let bp = BsdeArgs { y: y + bump, ..bs };
                    let bm = BsdeArgs { y: y - bump, ..bs };
                    (eval(&x, &u, &bp) - eval(&x, &u, &bm)) / (2.0 * bump)
                };
                worst = worst.max(rel(grad.dy, fd));
                for c in 0..dims.n_w.min(3) {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[c] += bump;
                    zm[c] -= bump;
                    let bp = BsdeArgs { z: &zp, ..bs };
                    let bm = BsdeArgs { z: &zm, ..bs };
                    let fd = (eval(&x, &u, &bp) - eval(&x, &u, &bm)) / (2.0 * bump);
                    worst = worst.max(rel(grad.dz[c], fd));
                }
                for c in 0..dims.d_obs {
                    let mut rp = r.clone();
                    let mut rm = r.clone();
                    rp[c] += bump;
                    rm[c] -= bump;
                    let bp = BsdeArgs { r: &rp, ..bs };
                    let bm = BsdeArgs { r: &rm, ..bs };
                    let fd = (eval(&x, &u, &bp) - eval(&x, &u, &bm)) / (2.0 * bump);
                    worst = worst.max(rel(grad.dr[c], fd));
                }
                let fd = {
                    let bp = BsdeArgs { gamma_m: gamma_m + bump, ..bs };
                    let bm = BsdeArgs { gamma_m: gamma_m - bump, ..bs };
                    (eval(&x, &u, &bp) - eval(&x, &u, &bm)) / (2.0 * bump)
                };
                worst = worst.max(rel(grad.dgamma, fd));
            }
        }

        let fdx = model.terminal_f_dx(&x);
        let pdx = model.phi_dx(&x);
        for c in 0..dims.dim_h {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += bump;
            xm[c] -= bump;
            let fd = (model.terminal_f(&xp) - model.terminal_f(&xm)) / (2.0 * bump);
            worst = worst.max(rel(fdx[c], fd));
            let fd = (model.phi(&xp) - model.phi(&xm)) / (2.0 * bump);
            worst = worst.max(rel(pdx[c], fd));
        }
        let fd = (model.psi(y + bump) - model.psi(y - bump)) / (2.0 * bump);
        worst = worst.max(rel(model.psi_dy(y), fd));
    }
    worst
}
