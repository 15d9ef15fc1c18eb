//! Driving noises on a uniform time grid.
//!
//! Each path carries truncated cylindrical Wiener increments (`n_w` mode
//! Brownian motions), `d` auxiliary Gaussian increment columns (playing the
//! observation or its innovation depending on the simulation measure), and a
//! finite-activity marked jump list. Sampling is a pure function of
//! `(seed, path_index)`: streams are keyed so per-path parallelism and
//! scheduling never change results.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Poisson, StandardNormal};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum NoiseError {
    #[error("grid must have at least one step and positive horizon")]
    InvalidGrid,
    #[error("jump mark weights must be positive and finite")]
    InvalidJumpSpec,
    #[error("perturbation index out of range: {0}")]
    PerturbationOutOfRange(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("binary noise dump is malformed: {0}")]
    MalformedDump(String),
}

/// Uniform grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, NoiseError> {
        if !(horizon > 0.0) || n_steps == 0 {
            return Err(NoiseError::InvalidGrid);
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Index of the cell `[t_k, t_{k+1})` containing `t`, clamped to the last cell at `T`.
    pub fn cell_of(&self, t: f64) -> usize {
        ((t / self.dt()).floor() as usize).min(self.n_steps - 1)
    }
}

/// Finite-support jump measure: mark values with per-mark intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasureSpec {
    pub marks: Vec<f64>,
    pub weights: Vec<f64>,
}

impl JumpMeasureSpec {
    pub fn new(marks: Vec<f64>, weights: Vec<f64>) -> Result<Self, NoiseError> {
        if marks.len() != weights.len() || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite())
        {
            return Err(NoiseError::InvalidJumpSpec);
        }
        Ok(Self { marks, weights })
    }

    pub fn empty() -> Self {
        Self { marks: vec![], weights: vec![] }
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn total_intensity(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// One realized jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub mark_index: usize,
}

/// All driving increments of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    pub grid: TimeGrid,
    /// `n_steps x n_w` cylindrical Wiener increments, each `N(0, dt)`.
    pub dw: DMatrix<f64>,
    /// `n_steps x d` Gaussian increments for the observation/innovation channel.
    pub du: DMatrix<f64>,
    /// Jump times in `(0, T]`, strictly increasing, with mark indices.
    pub jumps: Vec<JumpEvent>,
    pub seed: u64,
    pub path_index: u64,
}

/// A single elementary modification of a noise grid, the discrete carrier of
/// pathwise differentiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoisePerturbation {
    GaussianW { step: usize, mode: usize, bump: f64 },
    GaussianB { step: usize, comp: usize, bump: f64 },
    AddJump { time: f64, mark_index: usize },
}

fn stream_rng(seed: u64, path_index: u64, tag: u64) -> ChaCha12Rng {
    // splitmix64-style mixing so nearby (seed, path, tag) triples decorrelate.
    let mut x = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(path_index.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(tag.wrapping_mul(0x94D049BB133111EB));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    ChaCha12Rng::seed_from_u64(x)
}

const TAG_W: u64 = 1;
const TAG_B: u64 = 2;
const TAG_JUMP: u64 = 3;

/// Draw one path of all driving noises. Identical `(seed, path_index)` yields a
/// bit-identical grid; distinct indices give independent streams.
pub fn sample_noise(
    grid: TimeGrid,
    n_w: usize,
    d: usize,
    jm: &JumpMeasureSpec,
    seed: u64,
    path_index: u64,
) -> NoiseGrid {
    assert!(n_w >= 1 && d >= 1, "need at least one Wiener mode and one observation channel");
    let sd = grid.dt().sqrt();
    let mut rng_w = stream_rng(seed, path_index, TAG_W);
    let dw = DMatrix::from_fn(grid.n_steps, n_w, |_, _| {
        sd * rng_w.sample::<f64, _>(StandardNormal)
    });
    let mut rng_b = stream_rng(seed, path_index, TAG_B);
    let du = DMatrix::from_fn(grid.n_steps, d, |_, _| {
        sd * rng_b.sample::<f64, _>(StandardNormal)
    });

    let mut jumps = Vec::new();
    let lambda = jm.total_intensity();
    if lambda > 0.0 {
        let mut rng_j = stream_rng(seed, path_index, TAG_JUMP);
        let n: u64 = rng_j.sample(Poisson::new(lambda * grid.horizon).unwrap()) as u64;
        // Times uniform on (0, T]; conditional on the count this is exact.
        let mut times: Vec<f64> = (0..n).map(|_| (1.0 - rng_j.gen::<f64>()) * grid.horizon).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for t in times {
            let mark_index = sample_mark(&mut rng_j, jm);
            jumps.push(JumpEvent { time: t, mark_index });
        }
    }
    NoiseGrid { grid, dw, du, jumps, seed, path_index }
}

fn sample_mark<R: Rng>(rng: &mut R, jm: &JumpMeasureSpec) -> usize {
    let total = jm.total_intensity();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (m, &w) in jm.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return m;
        }
    }
    jm.weights.len() - 1
}

impl NoiseGrid {
    pub fn n_w(&self) -> usize {
        self.dw.ncols()
    }

    pub fn d(&self) -> usize {
        self.du.ncols()
    }

    /// Per-cell jump counts, `n_steps x n_marks`.
    pub fn jump_counts(&self, n_marks: usize) -> DMatrix<u32> {
        let mut counts = DMatrix::zeros(self.grid.n_steps, n_marks);
        for j in &self.jumps {
            let k = self.grid.cell_of(j.time);
            counts[(k, j.mark_index)] += 1;
        }
        counts
    }

    /// Copy with exactly one increment bumped or one jump inserted.
    pub fn apply_perturbation(&self, p: NoisePerturbation) -> Result<NoiseGrid, NoiseError> {
        let mut out = self.clone();
        match p {
            NoisePerturbation::GaussianW { step, mode, bump } => {
                if step >= self.dw.nrows() || mode >= self.dw.ncols() {
                    return Err(NoiseError::PerturbationOutOfRange(format!(
                        "W slot ({step}, {mode})"
                    )));
                }
                out.dw[(step, mode)] += bump;
            }
            NoisePerturbation::GaussianB { step, comp, bump } => {
                if step >= self.du.nrows() || comp >= self.du.ncols() {
                    return Err(NoiseError::PerturbationOutOfRange(format!(
                        "B slot ({step}, {comp})"
                    )));
                }
                out.du[(step, comp)] += bump;
            }
            NoisePerturbation::AddJump { time, mark_index } => {
                if !(time > 0.0 && time <= self.grid.horizon) {
                    return Err(NoiseError::PerturbationOutOfRange(format!(
                        "jump time {time}"
                    )));
                }
                let pos = out
                    .jumps
                    .partition_point(|j| j.time < time);
                out.jumps.insert(pos, JumpEvent { time, mark_index });
            }
        }
        Ok(out)
    }

    /// Shift the observation-channel increments by a drift path:
    /// `du'_k = du_k + h_k dt`. Converts innovation increments into observation
    /// increments; the inverse shift uses `-h`.
    pub fn girsanov_shift(&self, h_path: &DMatrix<f64>) -> Result<NoiseGrid, NoiseError> {
        if h_path.nrows() != self.du.nrows() || h_path.ncols() != self.du.ncols() {
            return Err(NoiseError::ShapeMismatch {
                expected: format!("{}x{}", self.du.nrows(), self.du.ncols()),
                got: format!("{}x{}", h_path.nrows(), h_path.ncols()),
            });
        }
        let mut out = self.clone();
        out.du += h_path * self.grid.dt();
        Ok(out)
    }

    /// Versioned binary dump: magic "SPDN", format version, dims, then raw
    /// little-endian doubles and the jump list.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SPDN");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.grid.n_steps as u64).to_le_bytes());
        buf.extend_from_slice(&self.grid.horizon.to_le_bytes());
        buf.extend_from_slice(&(self.n_w() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d() as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.path_index.to_le_bytes());
        for v in self.dw.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.du.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.jumps.len() as u64).to_le_bytes());
        for j in &self.jumps {
            buf.extend_from_slice(&j.time.to_le_bytes());
            buf.extend_from_slice(&(j.mark_index as u64).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NoiseGrid, NoiseError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != b"SPDN" {
            return Err(NoiseError::MalformedDump("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != 1 {
            return Err(NoiseError::MalformedDump(format!("unsupported version {version}")));
        }
        let n_steps = cur.u64()? as usize;
        let horizon = cur.f64()?;
        let n_w = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let seed = cur.u64()?;
        let path_index = cur.u64()?;
        let grid = TimeGrid::new(horizon, n_steps)
            .map_err(|_| NoiseError::MalformedDump("bad grid".into()))?;
        let mut dw = DMatrix::zeros(n_steps, n_w);
        for v in dw.iter_mut() {
            *v = cur.f64()?;
        }
        let mut du = DMatrix::zeros(n_steps, d);
        for v in du.iter_mut() {
            *v = cur.f64()?;
        }
        let n_jumps = cur.u64()? as usize;
        let mut jumps = Vec::with_capacity(n_jumps);
        for _ in 0..n_jumps {
            let time = cur.f64()?;
            let mark_index = cur.u64()? as usize;
            jumps.push(JumpEvent { time, mark_index });
        }
        Ok(NoiseGrid { grid, dw, du, jumps, seed, path_index })
    }

    /// Cumulative sums of the observation-channel columns, `(n_steps+1) x d`.
    pub fn cumulative_u(&self) -> DMatrix<f64> {
        let (n, d) = (self.du.nrows(), self.du.ncols());
        let mut out = DMatrix::zeros(n + 1, d);
        for k in 0..n {
            for j in 0..d {
                out[(k + 1, j)] = out[(k, j)] + self.du[(k, j)];
            }
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NoiseError> {
        if self.pos + n > self.bytes.len() {
            return Err(NoiseError::MalformedDump("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, NoiseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NoiseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NoiseError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Materialize a whole ensemble in deterministic path order.
pub fn sample_ensemble(
    grid: TimeGrid,
    n_w: usize,
    d: usize,
    jm: &JumpMeasureSpec,
    seed: u64,
    n_paths: usize,
) -> Vec<NoiseGrid> {
    use rayon::prelude::*;
    (0..n_paths)
        .into_par_iter()
        .map(|p| sample_noise(grid, n_w, d, jm, seed, p as u64))
        .collect()
}

/// Constant drift applied to every row, convenience for tests.
pub fn constant_h_path(grid: TimeGrid, h: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(grid.n_steps, h.len());
    for k in 0..grid.n_steps {
        m.row_mut(k).copy_from(&h.transpose());
    }
    m
}
