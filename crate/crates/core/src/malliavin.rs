//! Discrete Malliavin derivative operators and the stochastic-flow route to
//! first-order optimality.
//!
//! Gaussian derivatives are central differences with respect to a single
//! grid increment (constant over the owning cell); jump derivatives are exact
//! add-one-jump differences. All resimulations share the base path's noise so
//! difference estimators carry almost no Monte Carlo variance of their own.

use crate::backward::BsdeSolution;
use crate::forward::{flow_transfer_matrices, simulate_forward, MeasureMode, SimulatedPath};
use crate::model::{BsdeArgs, ControlLaw, Model};
use crate::noise::{NoiseGrid, NoisePerturbation};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MalliavinError {
    #[error("resimulation budget exceeded: needed {needed}, cap {cap}")]
    ResimBudget { needed: usize, cap: usize },
}

/// A deterministic map from a noise realization to a value; the carrier of
/// pathwise differentiation.
pub trait PathFunctional: Sync {
    fn eval(&self, ng: &NoiseGrid) -> DVector<f64>;
}

/// Functional of the simulated system: terminal or path statistics of the
/// controlled state under a fixed law.
pub struct SystemFunctional<'a> {
    pub model: &'a dyn Model,
    pub law: &'a dyn ControlLaw,
    pub measure: MeasureMode,
    pub map: &'a (dyn Fn(&SimulatedPath) -> DVector<f64> + Sync),
}

impl PathFunctional for SystemFunctional<'_> {
    fn eval(&self, ng: &NoiseGrid) -> DVector<f64> {
        let path = simulate_forward(
            self.model,
            self.law,
            ng,
            &self.model.initial_state(),
            self.measure,
        )
        .expect("resimulation blew up");
        (self.map)(&path)
    }
}

/// Central difference with respect to one Wiener-mode increment.
pub fn malliavin_w(
    f: &dyn PathFunctional,
    ng: &NoiseGrid,
    step: usize,
    mode: usize,
    bump: f64,
) -> DVector<f64> {
    let up = ng
        .apply_perturbation(NoisePerturbation::GaussianW { step, mode, bump })
        .expect("slot in range");
    let dn = ng
        .apply_perturbation(NoisePerturbation::GaussianW { step, mode, bump: -bump })
        .expect("slot in range");
    (f.eval(&up) - f.eval(&dn)) / (2.0 * bump)
}

/// Central difference with respect to one auxiliary Gaussian increment.
pub fn malliavin_b(
    f: &dyn PathFunctional,
    ng: &NoiseGrid,
    step: usize,
    comp: usize,
    bump: f64,
) -> DVector<f64> {
    let up = ng
        .apply_perturbation(NoisePerturbation::GaussianB { step, comp, bump })
        .expect("slot in range");
    let dn = ng
        .apply_perturbation(NoisePerturbation::GaussianB { step, comp, bump: -bump })
        .expect("slot in range");
    (f.eval(&up) - f.eval(&dn)) / (2.0 * bump)
}

/// Add-one-jump difference at a given time and mark.
pub fn malliavin_n(
    f: &dyn PathFunctional,
    ng: &NoiseGrid,
    time: f64,
    mark_index: usize,
    base: Option<&DVector<f64>>,
) -> DVector<f64> {
    let with = ng
        .apply_perturbation(NoisePerturbation::AddJump { time, mark_index })
        .expect("time in range");
    match base {
        Some(b) => f.eval(&with) - b,
        None => f.eval(&with) - f.eval(ng),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MalliavinDualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
    pub pass: bool,
}

fn summarize(samples: Vec<(f64, f64)>) -> MalliavinDualityReport {
    let d: Vec<f64> = samples.iter().map(|(l, r)| l - r).collect();
    let (residual, se) = crate::stats::mean_se(&d);
    let lhs = samples.iter().map(|(l, _)| l).sum::<f64>() / samples.len() as f64;
    let rhs = samples.iter().map(|(_, r)| r).sum::<f64>() / samples.len() as f64;
    MalliavinDualityReport { lhs, rhs, residual, se, pass: residual.abs() <= 3.0 * se }
}

/// Integration-by-parts check against the Wiener modes: the test process is
/// supported on a sparse set of `(step, mode)` slots with amplitudes that may
/// depend on the strict noise prefix.
pub fn check_w_duality(
    f: &(dyn PathFunctional + Sync),
    noise: &[NoiseGrid],
    slots: &[(usize, usize)],
    amp: &(dyn Fn(usize, &NoiseGrid, usize) -> f64 + Sync),
    bump: f64,
) -> MalliavinDualityReport {
    let dt = noise[0].grid.dt();
    let samples: Vec<(f64, f64)> = noise
        .par_iter()
        .enumerate()
        .map(|(p, ng)| {
            let zeta = f.eval(ng)[0];
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for (s_idx, &(k, i)) in slots.iter().enumerate() {
                let a = amp(p, ng, s_idx);
                lhs += zeta * a * ng.dw[(k, i)];
                let d = malliavin_w(f, ng, k, i, bump)[0];
                rhs += a * d * dt;
            }
            (lhs, rhs)
        })
        .collect();
    summarize(samples)
}

/// Same identity against the auxiliary Gaussian channels.
pub fn check_b_duality(
    f: &(dyn PathFunctional + Sync),
    noise: &[NoiseGrid],
    slots: &[(usize, usize)],
    amp: &(dyn Fn(usize, &NoiseGrid, usize) -> f64 + Sync),
    bump: f64,
) -> MalliavinDualityReport {
    let dt = noise[0].grid.dt();
    let samples: Vec<(f64, f64)> = noise
        .par_iter()
        .enumerate()
        .map(|(p, ng)| {
            let zeta = f.eval(ng)[0];
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for (s_idx, &(k, j)) in slots.iter().enumerate() {
                let a = amp(p, ng, s_idx);
                lhs += zeta * a * ng.du[(k, j)];
                let d = malliavin_b(f, ng, k, j, bump)[0];
                rhs += a * d * dt;
            }
            (lhs, rhs)
        })
        .collect();
    summarize(samples)
}

/// Compensated-jump integration by parts: the integrand is supported on
/// sparse `(step, mark)` slots and the derivative is the add-one-jump
/// difference at the cell midpoint.
pub fn check_n_duality(
    f: &(dyn PathFunctional + Sync),
    noise: &[NoiseGrid],
    jump_weights: &[f64],
    slots: &[(usize, usize)],
    amp: &(dyn Fn(usize, &NoiseGrid, usize) -> f64 + Sync),
) -> MalliavinDualityReport {
    let dt = noise[0].grid.dt();
    let samples: Vec<(f64, f64)> = noise
        .par_iter()
        .enumerate()
        .map(|(p, ng)| {
            let base = f.eval(ng);
            let zeta = base[0];
            let counts = ng.jump_counts(jump_weights.len());
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for (s_idx, &(k, m)) in slots.iter().enumerate() {
                let a = amp(p, ng, s_idx);
                let compensated = counts[(k, m)] as f64 - jump_weights[m] * dt;
                lhs += zeta * a * compensated;
                let mid = (k as f64 + 0.5) * dt;
                let d = malliavin_n(f, ng, mid, m, Some(&base))[0];
                rhs += a * jump_weights[m] * d * dt;
            }
            (lhs, rhs)
        })
        .collect();
    summarize(samples)
}

/// Resimulation core: the controlled state and the recursive adjoint along a
/// (possibly perturbed) noise grid, with the backward-integrand arguments of
/// the coefficient gradients frozen at the base solution. The freeze is exact
/// whenever those gradients do not depend on the backward integrands.
pub struct FrozenCore<'a> {
    pub model: &'a dyn Model,
    pub law: &'a dyn ControlLaw,
    pub bsde: &'a BsdeSolution,
    pub path_idx: usize,
    pub ell0: f64,
}

impl FrozenCore<'_> {
    pub fn simulate(&self, ng: &NoiseGrid) -> (SimulatedPath, DVector<f64>) {
        let model = self.model;
        let path = simulate_forward(
            model,
            self.law,
            ng,
            &model.initial_state(),
            MeasureMode::InnovationBrownian,
        )
        .expect("resimulation blew up");
        let dims = model.dims();
        let jm = model.jump_measure();
        let dt = ng.grid.dt();
        let n = ng.grid.n_steps;
        let counts = ng.jump_counts(dims.n_marks);
        let mut ell = DVector::zeros(n + 1);
        let mut l = self.ell0;
        ell[0] = l;
        for k in 0..n {
            let t = k as f64 * dt;
            let xh = path.x_at(k);
            let uh = path.u_at(k);
            let zv = self.bsde.z_at(self.path_idx, k.min(n - 1));
            let rv = self.bsde.r_at(self.path_idx, k.min(n - 1));
            let gv = self.bsde.gamma_at(self.path_idx, k.min(n - 1));
            let yv = self.bsde.y[(self.path_idx, k)];
            let db = path.db_hat(model, k, dt);
            let h = model.h_obs(t, &xh, &uh);
            let dw = ng.dw.row(k).transpose();
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
            ell[k + 1] = l;
        }
        (path, ell)
    }

    /// Costate transport value at knot `s`: semigroup pullback of the
    /// terminal gradient combination plus the accumulated cost-gradient tail.
    pub fn pi_at(
        &self,
        path: &SimulatedPath,
        ell: &DVector<f64>,
        s: usize,
        dt: f64,
        powers: &[DVector<f64>],
    ) -> DVector<f64> {
        let model = self.model;
        let n = path.n_steps();
        let jm = model.jump_measure();
        let x_t = path.x_at(n);
        let mut pi = model.phi_dx(&x_t) - model.terminal_f_dx(&x_t) * ell[n];
        pi.component_mul_assign(&powers[n - s]);
        for k in s..n {
            let t = k as f64 * dt;
            let xh = path.x_at(k);
            let uh = path.u_at(k);
            let zv = self.bsde.z_at(self.path_idx, k);
            let rv = self.bsde.r_at(self.path_idx, k);
            let gv = self.bsde.gamma_at(self.path_idx, k);
            let mut lsum = DVector::zeros(model.dims().dim_h);
            for mm in 0..jm.n_marks() {
                let bs = BsdeArgs {
                    y: self.bsde.y[(self.path_idx, k)],
                    z: &zv,
                    r: &rv,
                    gamma_m: gv[mm],
                };
                let lg = model.run_cost_grad(t, &xh, &uh, &bs, mm);
                lsum.axpy(jm.weights[mm], &lg.dx, 1.0);
            }
            lsum.component_mul_assign(&powers[k - s]);
            pi.axpy(dt, &lsum, 1.0);
        }
        pi
    }

    /// Terminal cost plus the running-cost tail from knot `s`.
    pub fn aleph_at(&self, path: &SimulatedPath, s: usize, dt: f64) -> f64 {
        let model = self.model;
        let n = path.n_steps();
        let mut a = model.phi(&path.x_at(n));
        for k in s..n {
            let t = k as f64 * dt;
            let zv = self.bsde.z_at(self.path_idx, k);
            let rv = self.bsde.r_at(self.path_idx, k);
            let gv = self.bsde.gamma_at(self.path_idx, k);
            a += dt
                * model.run_cost_integrated(
                    t,
                    &path.x_at(k),
                    &path.u_at(k),
                    self.bsde.y[(self.path_idx, k)],
                    &zv,
                    &rv,
                    &gv,
                );
        }
        a
    }
}

/// Which derivative blocks the bundle assembly must resimulate.
#[derive(Debug, Clone)]
pub struct MalliavinGates {
    pub dw_pi: bool,
    pub db_pi: bool,
    pub dn_pi: bool,
    pub db_aleph: bool,
    pub n1: bool,
}

impl MalliavinGates {
    /// Probe the coefficient derivatives at the initial state; a block is
    /// enabled when its coupling is structurally nonzero there.
    pub fn probe(model: &dyn Model) -> Self {
        let dims = model.dims();
        let x = model.initial_state();
        let u = DVector::zeros(dims.n_ctrl);
        let mut dw = false;
        for i in 0..dims.n_w.min(4) {
            if model.g1_dx_mode(0.0, &x, &u, i).amax() > 1e-14 {
                dw = true;
                break;
            }
        }
        let mut db = false;
        for j in 0..dims.d_obs {
            if model.g2_dx(0.0, &x, &u, j).amax() > 1e-14 {
                db = true;
                break;
            }
        }
        let mut dn = false;
        for m in 0..dims.n_marks {
            if model.theta_dx(0.0, &x, &u, m).amax() > 1e-14 {
                dn = true;
                break;
            }
        }
        let db_aleph = model.h_dx(0.0, &x, &u).amax() > 1e-14;
        let mut e = DVector::zeros(dims.dim_h);
        e[0] = 1.0;
        let ec = DVector::from_element(dims.n_ctrl, 1.0);
        let n1 = model.g1_du_dir(0.0, &x, &u, &e, &ec).amax() > 1e-14;
        Self { dw_pi: dw, db_pi: db, dn_pi: dn, db_aleph, n1 }
    }
}

pub struct MalliavinOptions {
    /// Step indices at which the bundle is assembled.
    pub knots: Vec<usize>,
    /// Relative bump scale; the actual bump is `bump_scale * sqrt(dt)`.
    pub bump_scale: f64,
    pub max_resims: usize,
    pub gates: MalliavinGates,
}

/// Flow-route optimality quantities per knot.
pub struct MalliavinSmpBundle {
    pub knots: Vec<usize>,
    /// Per knot `m x dim_h`.
    pub pi: Vec<DMatrix<f64>>,
    pub psi_int: Vec<DMatrix<f64>>,
    pub m_vec: Vec<DMatrix<f64>>,
    pub grad_h: Vec<DMatrix<f64>>,
    /// Per knot length-`m` vector.
    pub aleph: Vec<DVector<f64>>,
    /// Per knot `m x d`.
    pub db_aleph: Vec<DMatrix<f64>>,
    /// Per knot, per path `dim_h x n_w`; present when the diffusion has
    /// control coupling.
    pub n1: Option<Vec<Vec<DMatrix<f64>>>>,
    /// Per knot, per path `dim_h x d`.
    pub n2: Vec<Vec<DMatrix<f64>>>,
    /// Per knot, per path `dim_h x K`.
    pub n3: Vec<Vec<DMatrix<f64>>>,
}

struct KnotOut {
    pi: DVector<f64>,
    psi_int: DVector<f64>,
    m_vec: DVector<f64>,
    grad_h: DVector<f64>,
    aleph: f64,
    db_aleph: DVector<f64>,
    n1: Option<DMatrix<f64>>,
    n2: DMatrix<f64>,
    n3: DMatrix<f64>,
}

/// Assemble the flow-route bundle over an innovation-Brownian ensemble.
pub fn assemble_malliavin_smp(
    model: &dyn Model,
    law: &dyn ControlLaw,
    noise: &[NoiseGrid],
    bsde: &BsdeSolution,
    ell: &DMatrix<f64>,
    opts: &MalliavinOptions,
) -> Result<MalliavinSmpBundle, MalliavinError> {
    let m = noise.len();
    let dims = model.dims();
    let n_steps = noise[0].grid.n_steps;
    let dt = noise[0].grid.dt();
    let bump = opts.bump_scale * dt.sqrt();

    // Resimulation budget: inner derivative blocks per gradient evaluation,
    // outer blocks for the flow-route derivatives of the transported costate.
    let inner_per_grad = 2
        * (opts.gates.dw_pi as usize * dims.n_w
            + opts.gates.db_pi as usize * dims.d_obs
            + opts.gates.dn_pi as usize * dims.n_marks
            + opts.gates.db_aleph as usize * dims.d_obs);
    let outer_slots = dims.d_obs + dims.n_marks + if opts.gates.n1 { dims.n_w } else { 0 };
    let per_knot = 1 + inner_per_grad + (1 + 2 * outer_slots) * (1 + inner_per_grad);
    let needed = m * opts.knots.len() * per_knot;
    if needed > opts.max_resims {
        return Err(MalliavinError::ResimBudget { needed, cap: opts.max_resims });
    }

    // Semigroup factors for every step offset on the shared grid.
    let powers: Vec<DVector<f64>> = (0..=n_steps)
        .map(|j| model.space().semigroup_factors(j as f64 * dt).expect("t >= 0"))
        .collect();

    let per_path: Vec<Vec<KnotOut>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let core = FrozenCore { model, law, bsde, path_idx: p, ell0: ell[(p, 0)] };
            let ng = &noise[p];
            let (base_path, base_ell) = core.simulate(ng);

            // Transported costate including the flow-pullback tail.
            let m_functional = |grid: &NoiseGrid, s: usize| -> DVector<f64> {
                let (path, ell_r) = core.simulate(grid);
                let pi_s = core.pi_at(&path, &ell_r, s, dt, &powers);
                let gh = grad_h_at(
                    model, &core, grid, &path, &ell_r, s, dt, &powers, bump, &opts.gates,
                );
                let transfers = flow_transfer_matrices(model, &path, grid);
                let mut prod = DMatrix::identity(dims.dim_h, dims.dim_h);
                let mut acc = gh.clone();
                for k in (s + 1)..path.n_steps() {
                    prod = &transfers[k - 1] * prod;
                    acc += prod.transpose() * &gh;
                }
                pi_s + acc * dt
            };

            opts.knots
                .iter()
                .map(|&s| {
                    let pi_s = core.pi_at(&base_path, &base_ell, s, dt, &powers);
                    let aleph_s = core.aleph_at(&base_path, s, dt);
                    let gh = grad_h_at(
                        model, &core, ng, &base_path, &base_ell, s, dt, &powers, bump,
                        &opts.gates,
                    );
                    let transfers = flow_transfer_matrices(model, &base_path, ng);
                    let mut prod = DMatrix::identity(dims.dim_h, dims.dim_h);
                    let mut psi_acc = gh.clone();
                    for k in (s + 1)..base_path.n_steps() {
                        prod = &transfers[k - 1] * prod;
                        psi_acc += prod.transpose() * &gh;
                    }
                    let psi_integral = psi_acc * dt;
                    let m_s = &pi_s + &psi_integral;

                    let mut dba = DVector::zeros(dims.d_obs);
                    if opts.gates.db_aleph {
                        for j in 0..dims.d_obs {
                            dba[j] = central_diff_b(ng, s, j, bump, |g| {
                                let (pth, _el) = core.simulate(g);
                                core.aleph_at(&pth, s, dt)
                            });
                        }
                    }

                    let mut n1_mat = if opts.gates.n1 {
                        Some(DMatrix::zeros(dims.dim_h, dims.n_w))
                    } else {
                        None
                    };
                    if let Some(mat) = n1_mat.as_mut() {
                        for i in 0..dims.n_w {
                            let up = ng
                                .apply_perturbation(NoisePerturbation::GaussianW {
                                    step: s,
                                    mode: i,
                                    bump,
                                })
                                .unwrap();
                            let dn = ng
                                .apply_perturbation(NoisePerturbation::GaussianW {
                                    step: s,
                                    mode: i,
                                    bump: -bump,
                                })
                                .unwrap();
                            let diff =
                                (m_functional(&up, s) - m_functional(&dn, s)) / (2.0 * bump);
                            mat.column_mut(i).copy_from(&diff);
                        }
                    }
                    let mut n2_mat = DMatrix::zeros(dims.dim_h, dims.d_obs);
                    for j in 0..dims.d_obs {
                        let up = ng
                            .apply_perturbation(NoisePerturbation::GaussianB {
                                step: s,
                                comp: j,
                                bump,
                            })
                            .unwrap();
                        let dn = ng
                            .apply_perturbation(NoisePerturbation::GaussianB {
                                step: s,
                                comp: j,
                                bump: -bump,
                            })
                            .unwrap();
                        let diff = (m_functional(&up, s) - m_functional(&dn, s)) / (2.0 * bump);
                        n2_mat.column_mut(j).copy_from(&diff);
                    }
                    let mut n3_mat = DMatrix::zeros(dims.dim_h, dims.n_marks);
                    for mm in 0..dims.n_marks {
                        let mid = (s as f64 + 0.5) * dt;
                        let with = ng
                            .apply_perturbation(NoisePerturbation::AddJump {
                                time: mid,
                                mark_index: mm,
                            })
                            .unwrap();
                        let diff = m_functional(&with, s) - &m_s;
                        n3_mat.column_mut(mm).copy_from(&diff);
                    }

                    KnotOut {
                        pi: pi_s,
                        psi_int: psi_integral,
                        m_vec: m_s,
                        grad_h: gh,
                        aleph: aleph_s,
                        db_aleph: dba,
                        n1: n1_mat,
                        n2: n2_mat,
                        n3: n3_mat,
                    }
                })
                .collect()
        })
        .collect();

    let nk = opts.knots.len();
    let mut pi = vec![DMatrix::zeros(m, dims.dim_h); nk];
    let mut psi_int = vec![DMatrix::zeros(m, dims.dim_h); nk];
    let mut m_vec = vec![DMatrix::zeros(m, dims.dim_h); nk];
    let mut grad_h = vec![DMatrix::zeros(m, dims.dim_h); nk];
    let mut aleph = vec![DVector::zeros(m); nk];
    let mut db_aleph = vec![DMatrix::zeros(m, dims.d_obs); nk];
    let mut n1: Option<Vec<Vec<DMatrix<f64>>>> = if opts.gates.n1 {
        Some(vec![vec![DMatrix::zeros(dims.dim_h, dims.n_w); m]; nk])
    } else {
        None
    };
    let mut n2 = vec![vec![DMatrix::zeros(dims.dim_h, dims.d_obs); m]; nk];
    let mut n3 = vec![vec![DMatrix::zeros(dims.dim_h, dims.n_marks); m]; nk];

    for (p, knot_outs) in per_path.into_iter().enumerate() {
        for (ki, out) in knot_outs.into_iter().enumerate() {
            pi[ki].row_mut(p).copy_from(&out.pi.transpose());
            psi_int[ki].row_mut(p).copy_from(&out.psi_int.transpose());
            m_vec[ki].row_mut(p).copy_from(&out.m_vec.transpose());
            grad_h[ki].row_mut(p).copy_from(&out.grad_h.transpose());
            aleph[ki][p] = out.aleph;
            db_aleph[ki].row_mut(p).copy_from(&out.db_aleph.transpose());
            if let (Some(store), Some(mat)) = (n1.as_mut(), out.n1) {
                store[ki][p] = mat;
            }
            n2[ki][p] = out.n2;
            n3[ki][p] = out.n3;
        }
    }

    Ok(MalliavinSmpBundle {
        knots: opts.knots.clone(),
        pi,
        psi_int,
        m_vec,
        grad_h,
        aleph,
        db_aleph,
        n1,
        n2,
        n3,
    })
}

fn central_diff_b(
    ng: &NoiseGrid,
    step: usize,
    comp: usize,
    bump: f64,
    eval: impl Fn(&NoiseGrid) -> f64,
) -> f64 {
    let up =
        ng.apply_perturbation(NoisePerturbation::GaussianB { step, comp, bump }).unwrap();
    let dn = ng
        .apply_perturbation(NoisePerturbation::GaussianB { step, comp, bump: -bump })
        .unwrap();
    (eval(&up) - eval(&dn)) / (2.0 * bump)
}

/// Hamiltonian-type state gradient at a knot, built from the transported
/// costate, its pathwise derivatives, and the cost couplings.
#[allow(clippy::too_many_arguments)]
fn grad_h_at(
    model: &dyn Model,
    core: &FrozenCore,
    ng: &NoiseGrid,
    path: &SimulatedPath,
    ell: &DVector<f64>,
    s: usize,
    dt: f64,
    powers: &[DVector<f64>],
    bump: f64,
    gates: &MalliavinGates,
) -> DVector<f64> {
    let dims = model.dims();
    let t = s as f64 * dt;
    let xh = path.x_at(s);
    let uh = path.u_at(s);
    let jm = model.jump_measure();

    let pi_s = core.pi_at(path, ell, s, dt, powers);

    // Adjoint drift application.
    let mut g = model.drift_dx(t, &xh, &uh).transpose() * &pi_s;
    let hdx = model.h_dx(t, &xh, &uh);
    for j in 0..dims.d_obs {
        let g2 = model.g2(t, &xh, &uh, j);
        g.axpy(-g2.dot(&pi_s), &hdx.row(j).transpose(), 1.0);
    }

    let pi_fn = |grid: &NoiseGrid| -> DVector<f64> {
        let (pth, el) = core.simulate(grid);
        core.pi_at(&pth, &el, s, dt, powers)
    };

    if gates.dw_pi {
        for i in 0..dims.n_w {
            let up = ng
                .apply_perturbation(NoisePerturbation::GaussianW { step: s, mode: i, bump })
                .unwrap();
            let dn = ng
                .apply_perturbation(NoisePerturbation::GaussianW {
                    step: s,
                    mode: i,
                    bump: -bump,
                })
                .unwrap();
            let dpi = (pi_fn(&up) - pi_fn(&dn)) / (2.0 * bump);
            g += model.g1_dx_mode(t, &xh, &uh, i).transpose() * dpi;
        }
    }
    if gates.db_pi {
        for j in 0..dims.d_obs {
            let up = ng
                .apply_perturbation(NoisePerturbation::GaussianB { step: s, comp: j, bump })
                .unwrap();
            let dn = ng
                .apply_perturbation(NoisePerturbation::GaussianB {
                    step: s,
                    comp: j,
                    bump: -bump,
                })
                .unwrap();
            let dpi = (pi_fn(&up) - pi_fn(&dn)) / (2.0 * bump);
            g += model.g2_dx(t, &xh, &uh, j).transpose() * dpi;
        }
    }
    if gates.dn_pi {
        for mm in 0..dims.n_marks {
            let mid = (s as f64 + 0.5) * dt;
            let with = ng
                .apply_perturbation(NoisePerturbation::AddJump { time: mid, mark_index: mm })
                .unwrap();
            let dpi = pi_fn(&with) - &pi_s;
            g.axpy(
                jm.weights[mm],
                &(model.theta_dx(t, &xh, &uh, mm).transpose() * dpi),
                1.0,
            );
        }
    }
    if gates.db_aleph {
        for j in 0..dims.d_obs {
            let da = central_diff_b(ng, s, j, bump, |grid| {
                let (pth, _el) = core.simulate(grid);
                core.aleph_at(&pth, s, dt)
            });
            g.axpy(da, &hdx.row(j).transpose(), 1.0);
        }
    }

    // Driver coupling through the recursive adjoint.
    let zv = core.bsde.z_at(core.path_idx, s);
    let rv = core.bsde.r_at(core.path_idx, s);
    let gv = core.bsde.gamma_at(core.path_idx, s);
    for mm in 0..dims.n_marks {
        let bs =
            BsdeArgs { y: core.bsde.y[(core.path_idx, s)], z: &zv, r: &rv, gamma_m: gv[mm] };
        let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
        g.axpy(-jm.weights[mm] * ell[s], &gg.dx, 1.0);
    }
    g
}

#[derive(Debug, Clone, Serialize)]
pub struct MalliavinStationarity {
    pub stats: Vec<crate::smp::KnotStat>,
    pub max_abs_over_se: f64,
}

/// Control-space bracket of the flow route at each knot: transported costate
/// and its pathwise derivatives against the direction couplings of every
/// coefficient.
pub fn malliavin_stationarity(
    model: &dyn Model,
    paths: &[SimulatedPath],
    bsde: &BsdeSolution,
    ell: &DMatrix<f64>,
    bundle: &MalliavinSmpBundle,
    dt: f64,
) -> MalliavinStationarity {
    let dims = model.dims();
    let jm = model.jump_measure();
    let m = paths.len();
    let mut stats = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for (ki, &s) in bundle.knots.iter().enumerate() {
        let t = s as f64 * dt;
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(m); dims.n_ctrl];
        for p in 0..m {
            let xh = paths[p].x_at(s);
            let uh = paths[p].u_at(s);
            let m_s = bundle.m_vec[ki].row(p).transpose();
            let mut b = model.drift_du(t, &xh, &uh).transpose() * &m_s;
            let hdu = model.h_du(t, &xh, &uh);
            for j in 0..dims.d_obs {
                let g2 = model.g2(t, &xh, &uh, j);
                b.axpy(-g2.dot(&m_s), &hdu.row(j).transpose(), 1.0);
            }
            if let Some(n1) = &bundle.n1 {
                b += model.g1_du_adjoint(t, &xh, &uh, &n1[ki][p]);
            }
            for j in 0..dims.d_obs {
                let n2col = bundle.n2[ki][p].column(j).into_owned();
                b += model.g2_du(t, &xh, &uh, j).transpose() * n2col;
            }
            for mm in 0..dims.n_marks {
                let n3col = bundle.n3[ki][p].column(mm).into_owned();
                b.axpy(
                    jm.weights[mm],
                    &(model.theta_du(t, &xh, &uh, mm).transpose() * n3col),
                    1.0,
                );
            }
            let dba = bundle.db_aleph[ki].row(p).transpose();
            b += hdu.transpose() * dba;
            let zv = bsde.z_at(p, s);
            let rv = bsde.r_at(p, s);
            let gv = bsde.gamma_at(p, s);
            for mm in 0..dims.n_marks {
                let bs = BsdeArgs { y: bsde.y[(p, s)], z: &zv, r: &rv, gamma_m: gv[mm] };
                let gg = model.driver_g_grad(t, &xh, &uh, &bs, mm);
                b.axpy(-jm.weights[mm] * ell[(p, s)], &gg.du, 1.0);
            }
            for c in 0..dims.n_ctrl {
                per_coord[c].push(b[c]);
            }
        }
        for (c, samples) in per_coord.iter().enumerate() {
            let (mean, se) = crate::stats::mean_se(samples);
            if se > 0.0 {
                max_ratio = max_ratio.max(mean.abs() / se);
            }
            stats.push(crate::smp::KnotStat { knot: ki, coord: c, mean, se });
        }
    }
    MalliavinStationarity { stats, max_abs_over_se: max_ratio }
}
