//! Uniform periodic time grid and discrete spectral transforms.
//!
//! Conventions shared by every module:
//!
//! - samples `t_j = -T/2 + j dt`, `dt = T / n`;
//! - angular frequencies `w_k = 2 pi k' / T` with signed index
//!   `k' = k` for `k < n/2` and `k' = k - n` otherwise (transform order);
//! - forward transform `F(w_k) = sum_j U(t_j) exp(-i w_k t_j) dt`, inverse
//!   `U(t_j) = (1/2 pi) sum_k F(w_k) exp(i w_k t_j) dw` with `dw = 2 pi / T`;
//! - a delta function discretizes as `delta(t1 - t2) -> delta_jk / dt`.
//!
//! Multiplying the spectrum by `(i w_k)^2` implements `d^2/dt^2` for
//! band-limited fields.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::C64;

/// Uniform periodic time/frequency grid.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    n_points: usize,
    t_window: f64,
    dt: f64,
    omega: Vec<f64>,
}

impl TimeGrid {
    /// `n_points` must be a power of two >= 16, `t_window` positive.
    pub fn new(n_points: usize, t_window: f64) -> Result<Arc<Self>> {
        if n_points < 16 || !n_points.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_points must be a power of two >= 16, got {n_points}"
            )));
        }
        if !(t_window > 0.0) || !t_window.is_finite() {
            return Err(Error::Config(format!(
                "t_window must be a positive finite real, got {t_window}"
            )));
        }
        let dt = t_window / n_points as f64;
        let omega = (0..n_points)
            .map(|k| {
                let signed = if k < n_points / 2 {
                    k as i64
                } else {
                    k as i64 - n_points as i64
                };
                2.0 * std::f64::consts::PI * signed as f64 / t_window
            })
            .collect();
        Ok(Arc::new(Self {
            n_points,
            t_window,
            dt,
            omega,
        }))
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn t_window(&self) -> f64 {
        self.t_window
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Frequency spacing `dw = 2 pi / T`.
    pub fn d_omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.t_window
    }

    /// `t_j = -T/2 + j dt`.
    pub fn t_at(&self, j: usize) -> f64 {
        -0.5 * self.t_window + j as f64 * self.dt
    }

    pub fn t_samples(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.t_at(j)).collect()
    }

    /// Angular frequencies in transform order.
    pub fn omega_samples(&self) -> &[f64] {
        &self.omega
    }

    /// Transform-order bin holding `-w_k`.
    pub fn negated_bin(&self, k: usize) -> usize {
        (self.n_points - k) % self.n_points
    }

    /// Grid index nearest to time `t` (periodic wrap).
    pub fn index_of(&self, t: f64) -> usize {
        let j = ((t + 0.5 * self.t_window) / self.dt).round() as i64;
        j.rem_euclid(self.n_points as i64) as usize
    }

    pub fn same_grid(&self, other: &TimeGrid) -> bool {
        self.n_points == other.n_points && self.t_window == other.t_window
    }
}

/// Complex field samples on a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<TimeGrid>,
    values: Vec<C64>,
}

impl Field {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::Contract(format!(
                "field length {} does not match grid ({} points)",
                values.len(),
                grid.n_points()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<TimeGrid>) -> Self {
        let n = grid.n_points();
        Self {
            grid,
            values: vec![C64::new(0.0, 0.0); n],
        }
    }

    /// Sample a complex-valued profile `f(t)` on the grid.
    pub fn from_fn(grid: Arc<TimeGrid>, f: impl Fn(f64) -> C64) -> Self {
        let values = (0..grid.n_points()).map(|j| f(grid.t_at(j))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// FFT plans for one grid size plus the normalization bookkeeping.
///
/// Cheap to clone (plans are shared); clones own their scratch, so hot loops
/// and worker threads should each hold one.
pub struct Spectral {
    grid: Arc<TimeGrid>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<C64>,
}

impl Clone for Spectral {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            fwd: self.fwd.clone(),
            inv: self.inv.clone(),
            scratch: vec![C64::new(0.0, 0.0); self.scratch.len()],
        }
    }
}

impl Spectral {
    pub fn new(grid: Arc<TimeGrid>) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n_points());
        let inv = planner.plan_fft_inverse(grid.n_points());
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Self {
            grid,
            fwd,
            inv,
            scratch: vec![C64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.grid.n_points() {
            return Err(Error::Contract(format!(
                "buffer length {} does not match grid ({} points)",
                len,
                self.grid.n_points()
            )));
        }
        Ok(())
    }

    /// Unnormalized DFT in place: `X_k = sum_j x_j exp(-2 pi i j k / n)`.
    pub fn raw_forward(&mut self, buf: &mut [C64]) {
        self.fwd.process_with_scratch(buf, &mut self.scratch);
    }

    /// Unnormalized inverse DFT in place: `x_j = sum_k X_k exp(+2 pi i j k / n)`.
    /// The caller accounts for the missing `1/n`.
    pub fn raw_inverse(&mut self, buf: &mut [C64]) {
        self.inv.process_with_scratch(buf, &mut self.scratch);
    }

    /// `F(w_k) = sum_j U(t_j) exp(-i w_k t_j) dt`.
    ///
    /// The `t = -T/2` origin turns into the alternating sign `(-1)^k` on top
    /// of the plain DFT.
    pub fn to_frequency(&mut self, field: &[C64]) -> Result<Vec<C64>> {
        self.check_len(field.len())?;
        let mut buf = field.to_vec();
        self.raw_forward(&mut buf);
        let dt = self.grid.dt();
        for (k, v) in buf.iter_mut().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *v *= sign * dt;
        }
        Ok(buf)
    }

    /// Exact inverse of [`Spectral::to_frequency`].
    pub fn to_time(&mut self, spectrum: &[C64]) -> Result<Vec<C64>> {
        self.check_len(spectrum.len())?;
        let mut buf = spectrum.to_vec();
        for (k, v) in buf.iter_mut().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *v *= sign;
        }
        self.raw_inverse(&mut buf);
        let scale = 1.0 / self.grid.t_window();
        for v in buf.iter_mut() {
            *v *= scale;
        }
        Ok(buf)
    }

    /// In-place `u <- F^-1 diag(m) F u` (the alternating phases cancel, so the
    /// plain DFT pair is used).
    pub fn apply_multiplier(&mut self, values: &mut [C64], multiplier: &[C64]) {
        debug_assert_eq!(values.len(), multiplier.len());
        self.fwd.process_with_scratch(values, &mut self.scratch);
        let scale = 1.0 / values.len() as f64;
        for (v, m) in values.iter_mut().zip(multiplier) {
            *v *= m * scale;
        }
        self.inv.process_with_scratch(values, &mut self.scratch);
    }

    /// Shift a field by `tau` (`U(t) -> U(t + tau)`) with a spectral phase
    /// ramp; exact for band-limited fields.
    pub fn shift(&mut self, values: &mut [C64], tau: f64) {
        let n = values.len();
        let mult: Vec<C64> = self
            .grid
            .omega_samples()
            .iter()
            .map(|&w| (C64::i() * w * tau).exp())
            .collect();
        debug_assert_eq!(n, mult.len());
        self.apply_multiplier(values, &mult);
    }
}

/// Discrete Parseval pair: `sum |U|^2 dt` and `(1/2 pi) sum |F|^2 dw`.
pub fn parseval_pair(spectral: &mut Spectral, field: &[C64]) -> Result<(f64, f64)> {
    let grid = spectral.grid().clone();
    let spectrum = spectral.to_frequency(field)?;
    let time_side: f64 = field.iter().map(|v| v.norm_sqr()).sum::<f64>() * grid.dt();
    let freq_side: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum::<f64>()
        * grid.d_omega()
        / (2.0 * std::f64::consts::PI);
    Ok((time_side, freq_side))
}
