//! Observation-adapted policy class.
//!
//! A policy is a deterministic function of the observed path only, so
//! adaptedness to the observation filtration holds by construction. The
//! parametric family is piecewise constant over time knots with optional
//! affine dependence on the current observation (and on its running
//! quadratic-variation proxy).

use super::Control;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Observation summary available to a policy at one time: the current value of
/// the observed path and a running quadratic-variation proxy per channel.
#[derive(Debug, Clone)]
pub struct ObsState {
    pub y: DVector<f64>,
    pub qv: DVector<f64>,
}

impl ObsState {
    pub fn start(d: usize) -> Self {
        Self { y: DVector::zeros(d), qv: DVector::zeros(d) }
    }

    pub fn advance(&mut self, dy: &DVector<f64>) {
        self.qv += dy.component_mul(dy);
        self.y += dy;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFeatures {
    /// Piecewise-constant in time.
    Constant,
    /// Intercept plus affine dependence on the current observation.
    AffineY,
    /// Intercept, current observation, and the quadratic-variation proxy.
    AffineYQv,
}

impl PolicyFeatures {
    pub fn per_coord(&self, d_obs: usize) -> usize {
        match self {
            PolicyFeatures::Constant => 1,
            PolicyFeatures::AffineY => 1 + d_obs,
            PolicyFeatures::AffineYQv => 1 + 2 * d_obs,
        }
    }
}

/// Any deterministic map from the observed prefix to a control value.
pub trait ControlLaw: Send + Sync {
    fn control(&self, t: f64, obs: &ObsState) -> Control;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub features: PolicyFeatures,
    pub n_knots: usize,
    pub n_ctrl: usize,
    pub d_obs: usize,
    pub horizon: f64,
    /// Convex per-coordinate bounds; outputs are clamped into this box.
    pub control_box: Vec<(f64, f64)>,
}

impl PolicyParams {
    pub fn zeros(
        features: PolicyFeatures,
        n_knots: usize,
        n_ctrl: usize,
        d_obs: usize,
        horizon: f64,
        control_box: Vec<(f64, f64)>,
    ) -> Self {
        let n = n_knots * n_ctrl * features.per_coord(d_obs);
        Self { theta: vec![0.0; n], features, n_knots, n_ctrl, d_obs, horizon, control_box }
    }

    pub fn n_params(&self) -> usize {
        self.n_knots * self.n_ctrl * self.features.per_coord(self.d_obs)
    }

    pub fn knot_of(&self, t: f64) -> usize {
        let w = self.horizon / self.n_knots as f64;
        ((t / w).floor() as usize).min(self.n_knots - 1)
    }

    fn param(&self, knot: usize, coord: usize, feature: usize) -> f64 {
        let pc = self.features.per_coord(self.d_obs);
        self.theta[(knot * self.n_ctrl + coord) * pc + feature]
    }

    /// Raw (unclamped) policy output.
    pub fn raw_control(&self, t: f64, obs: &ObsState) -> Control {
        let knot = self.knot_of(t);
        let mut u = DVector::zeros(self.n_ctrl);
        for c in 0..self.n_ctrl {
            let mut v = self.param(knot, c, 0);
            match self.features {
                PolicyFeatures::Constant => {}
                PolicyFeatures::AffineY => {
                    for j in 0..self.d_obs {
                        v += self.param(knot, c, 1 + j) * obs.y[j];
                    }
                }
                PolicyFeatures::AffineYQv => {
                    for j in 0..self.d_obs {
                        v += self.param(knot, c, 1 + j) * obs.y[j];
                        v += self.param(knot, c, 1 + self.d_obs + j) * obs.qv[j];
                    }
                }
            }
            u[c] = v;
        }
        u
    }

    /// Derivative of the control output with respect to one parameter. Zero
    /// whenever the clamped output sits strictly on the box boundary.
    pub fn control_jacobian_param(&self, t: f64, obs: &ObsState, param_idx: usize) -> Control {
        let pc = self.features.per_coord(self.d_obs);
        let knot = param_idx / (self.n_ctrl * pc);
        let rem = param_idx % (self.n_ctrl * pc);
        let coord = rem / pc;
        let feature = rem % pc;
        let mut out = DVector::zeros(self.n_ctrl);
        if knot != self.knot_of(t) {
            return out;
        }
        let raw = self.raw_control(t, obs);
        let (lo, hi) = self.control_box[coord];
        if raw[coord] <= lo || raw[coord] >= hi {
            return out;
        }
        out[coord] = match feature {
            0 => 1.0,
            f if f <= self.d_obs => obs.y[f - 1],
            f => obs.qv[f - 1 - self.d_obs],
        };
        out
    }
}

impl ControlLaw for PolicyParams {
    fn control(&self, t: f64, obs: &ObsState) -> Control {
        let mut u = self.raw_control(t, obs);
        super::project_control(&self.control_box, &mut u);
        u
    }
}

/// An adapted perturbation direction with the same feature structure as the
/// policy class but no clamping: directions are tangent vectors, not controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDirection {
    pub theta: Vec<f64>,
    pub features: PolicyFeatures,
    pub n_knots: usize,
    pub n_ctrl: usize,
    pub d_obs: usize,
    pub horizon: f64,
}

impl FeatureDirection {
    pub fn from_policy_shape(policy: &PolicyParams, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), policy.n_params());
        Self {
            theta,
            features: policy.features,
            n_knots: policy.n_knots,
            n_ctrl: policy.n_ctrl,
            d_obs: policy.d_obs,
            horizon: policy.horizon,
        }
    }

    /// Pseudo-random bounded direction, reproducible from the seed.
    pub fn random(policy: &PolicyParams, scale: f64, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0xD1CE_D1CE);
        let theta: Vec<f64> =
            (0..policy.n_params()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        Self::from_policy_shape(policy, theta)
    }

    pub fn value(&self, t: f64, obs: &ObsState) -> Control {
        let shadow = PolicyParams {
            theta: self.theta.clone(),
            features: self.features,
            n_knots: self.n_knots,
            n_ctrl: self.n_ctrl,
            d_obs: self.d_obs,
            horizon: self.horizon,
            control_box: vec![(f64::NEG_INFINITY, f64::INFINITY); self.n_ctrl],
        };
        shadow.raw_control(t, obs)
    }
}

impl ControlLaw for FeatureDirection {
    fn control(&self, t: f64, obs: &ObsState) -> Control {
        self.value(t, obs)
    }
}

/// The perturbed control `u + eps * v`, unclamped; callers keep `eps` small
/// enough that the base policy stays strictly inside the box.
pub struct PerturbedLaw<'a> {
    pub base: &'a PolicyParams,
    pub direction: &'a FeatureDirection,
    pub eps: f64,
}

impl ControlLaw for PerturbedLaw<'_> {
    fn control(&self, t: f64, obs: &ObsState) -> Control {
        self.base.control(t, obs) + self.direction.value(t, obs) * self.eps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn policy() -> PolicyParams {
        let mut p = PolicyParams::zeros(
            PolicyFeatures::AffineY,
            4,
            2,
            1,
            1.0,
            vec![(0.0, 1.2), (-0.4, 0.4)],
        );
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for v in p.theta.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn constant_policy_is_time_knot_constant() {
        let mut p =
            PolicyParams::zeros(PolicyFeatures::Constant, 1, 1, 1, 1.0, vec![(-5.0, 5.0)]);
        p.theta[0] = 0.37;
        let obs = ObsState::start(1);
        for t in [0.0, 0.3, 0.99] {
            assert_relative_eq!(p.control(t, &obs)[0], 0.37);
        }
    }

    #[test]
    fn affine_policy_reduces_to_intercept_on_zero_observation() {
        let p = policy();
        let obs = ObsState::start(1);
        let u = p.raw_control(0.1, &obs);
        assert_relative_eq!(u[0], p.theta[0]);
        assert_relative_eq!(u[1], p.theta[2]);
    }

    #[test]
    fn output_always_inside_box() {
        let p = policy();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let obs = ObsState {
                y: DVector::from_fn(1, |_, _| rng.gen_range(-10.0..10.0)),
                qv: DVector::from_fn(1, |_, _| rng.gen_range(0.0..10.0)),
            };
            let u = p.control(rng.gen_range(0.0..1.0), &obs);
            assert!(u[0] >= 0.0 && u[0] <= 1.2);
            assert!(u[1] >= -0.4 && u[1] <= 0.4);
        }
    }

    #[test]
    fn convex_combination_of_admissible_controls_stays_in_box() {
        let p = policy();
        let q = {
            let mut q = policy();
            q.theta.iter_mut().for_each(|v| *v = -*v);
            q
        };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..100 {
            let obs = ObsState {
                y: DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0)),
                qv: DVector::from_fn(1, |_, _| rng.gen_range(0.0..3.0)),
            };
            let t = rng.gen_range(0.0..1.0);
            let eps: f64 = rng.gen_range(0.0..1.0);
            let mix = p.control(t, &obs) * (1.0 - eps) + q.control(t, &obs) * eps;
            assert!(mix[0] >= 0.0 - 1e-12 && mix[0] <= 1.2 + 1e-12);
            assert!(mix[1] >= -0.4 - 1e-12 && mix[1] <= 0.4 + 1e-12);
        }
    }

    #[test]
    fn parameter_jacobian_matches_finite_difference() {
        let p = policy();
        let obs = ObsState {
            y: DVector::from_vec(vec![0.21]),
            qv: DVector::from_vec(vec![0.05]),
        };
        let t = 0.6;
        let h = 1e-7;
        for a in 0..p.n_params() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.theta[a] += h;
            pm.theta[a] -= h;
            let fd = (pp.control(t, &obs) - pm.control(t, &obs)) / (2.0 * h);
            let an = p.control_jacobian_param(t, &obs, a);
            assert_relative_eq!((an - fd).norm(), 0.0, epsilon = 1e-6);
        }
    }
}
