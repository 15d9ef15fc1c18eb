//! Synthetic randomized linear system for duality stress tests.
//!
//! Coefficient operators are drawn once from a seed, clipped in operator
//! norm, windowed around the mode diagonal, and mildly modulated in time;
//! forcings, the terminal datum, and the drift forcing of the dual equation
//! are adapted functionals of a small noise-state vector. The terminal datum
//! and dual forcing are affine in that state, which keeps the exact backward
//! solution inside an affine regression span, so duality residuals shrink at
//! the Monte Carlo rate.

use crate::backward::BspdeData;
use crate::forward::LinearSpdeCoeffs;
use crate::noise::NoiseGrid;
use crate::spectral::{operator_norm, ModeOperator, ModeVector, SpectralSpace};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressParams {
    pub dim_h: usize,
    pub n_w: usize,
    pub d_obs: usize,
    pub seed: u64,
    pub jump_weights: Vec<f64>,
    /// Operator-norm cap on the drift and observation couplings.
    pub bound: f64,
    /// Scale of the Wiener-column state loadings.
    pub k_scale: f64,
    /// Half-width of the mode window of each Wiener-column loading.
    pub k_window: usize,
    /// Scale of the adapted forcings.
    pub forcing_scale: f64,
}

impl Default for StressParams {
    fn default() -> Self {
        Self {
            dim_h: 16,
            n_w: 16,
            d_obs: 1,
            seed: 4242,
            jump_weights: vec![1.0, 0.6, 0.4],
            bound: 0.8,
            k_scale: 0.9,
            k_window: 2,
            forcing_scale: 0.6,
        }
    }
}

fn bounded_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |i, j| {
        rng.gen_range(-1.0..1.0) / (1.0 + (i as f64 - j as f64).abs())
    });
    let n = operator_norm(&m);
    if n > 0.0 {
        m *= bound / n;
    }
    m
}

/// The randomized instance bound to one noise ensemble.
pub struct StressInstance {
    pub params: StressParams,
    pub space: SpectralSpace,
    q1: ModeOperator,
    k_ops: Vec<ModeOperator>,
    k_phases: Vec<f64>,
    q2: Vec<ModeOperator>,
    q3: Vec<ModeOperator>,
    /// Adapted-forcing loadings.
    r_dag_load: DMatrix<f64>,
    gamma_base: ModeOperator,
    r2_load: Vec<DMatrix<f64>>,
    r3_load: Vec<DMatrix<f64>>,
    chi_load: DMatrix<f64>,
    /// Terminal and dual-forcing affine maps on the noise state.
    eta_const: ModeVector,
    eta_lin: DMatrix<f64>,
    j_const: ModeVector,
    j_lin: DMatrix<f64>,
    y0: ModeVector,
    horizon: f64,
    /// Per path `(n_steps+1) x n_state` noise-state trajectories.
    states: Vec<DMatrix<f64>>,
    n_state: usize,
}

impl StressInstance {
    pub fn new(params: StressParams, noise: &[NoiseGrid]) -> Self {
        let n = params.dim_h;
        let n_marks = params.jump_weights.len();
        let base = SpectralSpace::new_neumann(n, 1.0).expect("valid dims");
        let eigs: Vec<f64> = base.eigenvalues().iter().map(|l| 0.5 * l).collect();
        let space = SpectralSpace::new_abstract(eigs, 1.0).expect("valid spectrum");

        let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
        let q1 = bounded_matrix(&mut rng, n, n, params.bound);
        let mut k_ops = Vec::with_capacity(params.n_w);
        let mut k_phases = Vec::with_capacity(params.n_w);
        for i in 0..params.n_w {
            let mut k = DMatrix::zeros(n, n);
            let lo = i.saturating_sub(params.k_window);
            let hi = (i + params.k_window + 1).min(n);
            for r in lo..hi {
                for c in lo..hi {
                    k[(r, c)] = rng.gen_range(-1.0..1.0);
                }
            }
            let nm = operator_norm(&k);
            if nm > 0.0 {
                k *= params.k_scale / nm;
            }
            k_ops.push(k);
            k_phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        let q2: Vec<_> =
            (0..params.d_obs).map(|_| bounded_matrix(&mut rng, n, n, 0.5 * params.bound)).collect();
        let q3: Vec<_> =
            (0..n_marks).map(|_| bounded_matrix(&mut rng, n, n, 0.5 * params.bound)).collect();

        let n_state = params.n_w.min(8) + params.d_obs + n_marks;
        let fs = params.forcing_scale;
        let r_dag_load = bounded_matrix(&mut rng, n, n_state + 1, fs);
        let gamma_base = bounded_matrix(&mut rng, n, params.n_w, fs);
        let r2_load: Vec<_> =
            (0..params.d_obs).map(|_| bounded_matrix(&mut rng, n, n_state + 1, fs)).collect();
        let r3_load: Vec<_> =
            (0..n_marks).map(|_| bounded_matrix(&mut rng, n, n_state + 1, 0.5 * fs)).collect();
        let chi_load = bounded_matrix(&mut rng, n, n_state + 1, fs);
        let eta_const = DVector::from_fn(n, |i, _| rng.gen_range(-0.6..0.6) / (1.0 + i as f64));
        let eta_lin = bounded_matrix(&mut rng, n, n_state, 1.0);
        let j_const = DVector::from_fn(n, |i, _| rng.gen_range(-0.6..0.6) / (1.0 + i as f64));
        let j_lin = bounded_matrix(&mut rng, n, n_state, 1.0);
        let y0 = DVector::from_fn(n, |i, _| rng.gen_range(-0.8..0.8) / (1.0 + i as f64));

        let horizon = noise[0].grid.horizon;
        let states = noise.iter().map(|ng| Self::state_path(ng, &params, n_state)).collect();

        Self {
            params,
            space,
            q1,
            k_ops,
            k_phases,
            q2,
            q3,
            r_dag_load,
            gamma_base,
            r2_load,
            r3_load,
            chi_load,
            eta_const,
            eta_lin,
            j_const,
            j_lin,
            y0,
            horizon,
            states,
            n_state,
        }
    }

    /// Running noise state: leading Wiener-mode sums, the auxiliary Gaussian
    /// path, and compensated jump counts.
    fn state_path(ng: &NoiseGrid, params: &StressParams, n_state: usize) -> DMatrix<f64> {
        let n_steps = ng.grid.n_steps;
        let dt = ng.grid.dt();
        let n_marks = params.jump_weights.len();
        let nw_keep = params.n_w.min(8);
        let counts = ng.jump_counts(n_marks);
        let mut out = DMatrix::zeros(n_steps + 1, n_state);
        for k in 0..n_steps {
            for i in 0..nw_keep {
                out[(k + 1, i)] = out[(k, i)] + ng.dw[(k, i)];
            }
            for j in 0..params.d_obs {
                out[(k + 1, nw_keep + j)] = out[(k, nw_keep + j)] + ng.du[(k, j)];
            }
            for m in 0..n_marks {
                out[(k + 1, nw_keep + params.d_obs + m)] = out[(k, nw_keep + params.d_obs + m)]
                    + counts[(k, m)] as f64
                    - params.jump_weights[m] * dt;
            }
        }
        out
    }

    fn state(&self, path: usize, k: usize) -> DVector<f64> {
        self.states[path].row(k).transpose()
    }

    /// Feature state for the backward regression.
    pub fn features(&self, path: usize, k: usize) -> DVector<f64> {
        self.state(path, k)
    }

    pub fn initial_value(&self, _path: usize) -> ModeVector {
        self.y0.clone()
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    fn time_mod(&self, k: usize, phase: f64) -> f64 {
        let t = k as f64 * self.horizon / (self.states[0].nrows() - 1) as f64;
        1.0 + 0.25 * (std::f64::consts::TAU * t / self.horizon + phase).cos()
    }

    /// Adapted affine functional of the noise state with a bounded squash on
    /// the state so every forcing stays uniformly bounded.
    fn forcing_from(&self, load: &DMatrix<f64>, path: usize, k: usize) -> ModeVector {
        let s = self.state(path, k);
        let mut arg = DVector::zeros(self.n_state + 1);
        arg[0] = 1.0;
        for i in 0..self.n_state {
            arg[i + 1] = s[i].tanh();
        }
        load * arg
    }
}

impl LinearSpdeCoeffs for StressInstance {
    fn dim_h(&self) -> usize {
        self.params.dim_h
    }
    fn n_w(&self) -> usize {
        self.params.n_w
    }
    fn d_obs(&self) -> usize {
        self.params.d_obs
    }
    fn n_marks(&self) -> usize {
        self.params.jump_weights.len()
    }
    fn trunc_n(&self) -> usize {
        self.params.n_w
    }
    fn trunc_m(&self) -> usize {
        self.params.n_w
    }
    fn jump_weight(&self, m: usize) -> f64 {
        self.params.jump_weights[m]
    }

    fn q1_apply(&self, _p: usize, k: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        acc.axpy(w * self.time_mod(k, 0.0), &(&self.q1 * y), 1.0);
    }
    fn q1_adj_apply(&self, _p: usize, k: usize, z: &ModeVector, w: f64, acc: &mut ModeVector) {
        acc.axpy(w * self.time_mod(k, 0.0), &(self.q1.transpose() * z), 1.0);
    }
    fn k_apply(&self, _p: usize, k: usize, i: usize, y: &ModeVector, w: f64, acc: &mut ModeVector) {
        acc.axpy(w * self.time_mod(k, self.k_phases[i]), &(&self.k_ops[i] * y), 1.0);
    }
    fn k_adj_apply(
        &self,
        _p: usize,
        k: usize,
        i: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    ) {
        acc.axpy(w * self.time_mod(k, self.k_phases[i]), &(self.k_ops[i].transpose() * z), 1.0);
    }
    fn q2_apply(
        &self,
        _p: usize,
        k: usize,
        j: usize,
        y: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    ) {
        acc.axpy(w * self.time_mod(k, 1.0), &(&self.q2[j] * y), 1.0);
    }
    fn q2_adj_apply(
        &self,
        _p: usize,
        k: usize,
        j: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    ) {
        acc.axpy(w * self.time_mod(k, 1.0), &(self.q2[j].transpose() * z), 1.0);
    }
    fn q3_apply(
        &self,
        _p: usize,
        k: usize,
        m: usize,
        y: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    ) {
        acc.axpy(w * self.time_mod(k, 2.0), &(&self.q3[m] * y), 1.0);
    }
    fn q3_adj_apply(
        &self,
        _p: usize,
        k: usize,
        m: usize,
        z: &ModeVector,
        w: f64,
        acc: &mut ModeVector,
    ) {
        acc.axpy(w * self.time_mod(k, 2.0), &(self.q3[m].transpose() * z), 1.0);
    }

    fn r_dag_add(&self, p: usize, k: usize, w: f64, acc: &mut ModeVector) {
        acc.axpy(w, &self.forcing_from(&self.r_dag_load, p, k), 1.0);
    }
    fn k_chi_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut ModeVector) {
        let chi = self.forcing_from(&self.chi_load, p, k);
        self.k_apply(p, k, i, &chi, w, acc);
    }
    fn gamma_col_add(&self, p: usize, k: usize, i: usize, w: f64, acc: &mut ModeVector) {
        // Column scaled by an adapted bounded factor.
        let s = self.state(p, k);
        let factor = 1.0 + 0.5 * s[0].tanh();
        acc.axpy(w * factor, &self.gamma_base.column(i).into_owned(), 1.0);
    }
    fn r2_add(&self, p: usize, k: usize, j: usize, w: f64, acc: &mut ModeVector) {
        acc.axpy(w, &self.forcing_from(&self.r2_load[j], p, k), 1.0);
    }
    fn r3_add(&self, p: usize, k: usize, m: usize, w: f64, acc: &mut ModeVector) {
        acc.axpy(w, &self.forcing_from(&self.r3_load[m], p, k), 1.0);
    }
}

impl BspdeData for StressInstance {
    fn terminal(&self, path: usize) -> ModeVector {
        let n_steps = self.states[path].nrows() - 1;
        &self.eta_const + &self.eta_lin * self.state(path, n_steps)
    }
    fn forcing_add(&self, path: usize, k: usize, w: f64, acc: &mut ModeVector) {
        acc.axpy(w, &(&self.j_const + &self.j_lin * self.state(path, k)), 1.0);
    }
}
