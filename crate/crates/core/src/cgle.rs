//! Classical propagation of the cubic-quintic complex Ginzburg-Landau field
//! by a symmetric (Strang) split-step spectral scheme.
//!
//! Evolution form used throughout:
//!
//! ```text
//! U_z = i (D/2) U_tt + i |U|^2 U + delta U + epsilon |U|^2 U
//!       + beta U_tt + mu |U|^4 U + i nu |U|^4 U
//! ```
//!
//! One step of size `dz` is: half linear step in frequency (factor
//! `exp[(-i D w^2 / 2 + delta - beta w^2) dz/2]` per mode), full local
//! nonlinear step (`dU/dz = [i|U|^2 + eps|U|^2 + (mu + i nu)|U|^4] U`
//! integrated pointwise with RK4), half linear step. The nonlinear flow is
//! integrated in two halves so the state at the middle of the step is
//! available: that midpoint field is what the linearized quantum pass
//! propagates around, and freezing the linearization there keeps it accurate
//! to the same order as the splitting itself.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Spectral, TimeGrid};
use crate::C64;

/// Maximum |U| before propagation is declared divergent.
pub const BLOWUP_GUARD: f64 = 1e6;

/// Coefficients of the normalized cubic-quintic Ginzburg-Landau equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgleParams {
    /// Dispersion sign/strength: +1 anomalous, -1 normal.
    pub dispersion: f64,
    /// Linear gain (+) or loss (-).
    pub delta: f64,
    /// Cubic gain.
    pub epsilon: f64,
    /// Spectral filtering; must be >= 0.
    pub beta: f64,
    /// Quintic gain (+) or loss (-).
    pub mu: f64,
    /// Quintic conservative Kerr correction.
    pub nu: f64,
}

impl CgleParams {
    /// Conservative Schrodinger limit with anomalous dispersion.
    pub fn nlse() -> Self {
        Self {
            dispersion: 1.0,
            delta: 0.0,
            epsilon: 0.0,
            beta: 0.0,
            mu: 0.0,
            nu: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dispersion,
            self.delta,
            self.epsilon,
            self.beta,
            self.mu,
            self.nu,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite equation coefficient".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!(
                "spectral filtering must be dissipative (beta >= 0), got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// True iff all dissipative coefficients vanish.
    pub fn is_conservative(&self) -> bool {
        self.delta == 0.0 && self.epsilon == 0.0 && self.beta == 0.0 && self.mu == 0.0
    }
}

/// Split-step resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScheme {
    /// Step size along z.
    pub dz: f64,
    /// RK4 sub-steps per half of the local nonlinear flow.
    pub substeps: u32,
}

impl Default for StepScheme {
    fn default() -> Self {
        Self {
            dz: 1e-3,
            substeps: 1,
        }
    }
}

impl StepScheme {
    pub fn validate(&self) -> Result<()> {
        if !(self.dz > 0.0) || !self.dz.is_finite() {
            return Err(Error::Config(format!("dz must be positive, got {}", self.dz)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        Ok(())
    }

    /// Nearest whole step count for `distance` and the distance actually covered.
    pub fn steps_for(&self, distance: f64) -> (usize, f64) {
        let steps = (distance / self.dz).round().max(0.0) as usize;
        (steps, steps as f64 * self.dz)
    }
}

/// Per-mode factors `exp[(-i D w^2/2 + delta - beta w^2) h]`.
///
/// The quantum module applies exactly these factors to keep the linearized
/// transport consistent with the classical scheme.
pub fn linear_multiplier(params: &CgleParams, grid: &TimeGrid, h: f64) -> Vec<C64> {
    grid.omega_samples()
        .iter()
        .map(|&w| {
            let w2 = w * w;
            let exponent = C64::new(
                (params.delta - params.beta * w2) * h,
                -0.5 * params.dispersion * w2 * h,
            );
            exponent.exp()
        })
        .collect()
}

/// `sum_j |U(t_j)|^2 dt`; also the mean photon number over the whole window.
pub fn energy(field: &Field) -> f64 {
    field.values().iter().map(|v| v.norm_sqr()).sum::<f64>() * field.grid().dt()
}

#[inline]
fn nonlinear_rhs(u: C64, eps: f64, mu: f64, nu: f64) -> C64 {
    let intensity = u.norm_sqr();
    let i2 = intensity * intensity;
    C64::new(eps * intensity + mu * i2, intensity + nu * i2) * u
}

#[inline]
pub(crate) fn rk4_nonlinear(mut u: C64, h: f64, n: u32, eps: f64, mu: f64, nu: f64) -> C64 {
    for _ in 0..n {
        let k1 = nonlinear_rhs(u, eps, mu, nu);
        let k2 = nonlinear_rhs(u + 0.5 * h * k1, eps, mu, nu);
        let k3 = nonlinear_rhs(u + 0.5 * h * k2, eps, mu, nu);
        let k4 = nonlinear_rhs(u + h * k3, eps, mu, nu);
        u += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    u
}

/// Result of a (non-recording) propagation run.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub field: Field,
    /// Distance actually covered (`steps * dz`).
    pub distance: f64,
    pub steps: usize,
}

/// Classical trajectory record consumed by the quantum backward pass.
///
/// `midpoints` holds the field at the middle of every step (after the first
/// half linear step and half of the nonlinear flow); `snapshots` holds the
/// field at selected step boundaries (always including step 0 and the final
/// step) for functional construction and segmentation at measurement anchors.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    grid: Arc<TimeGrid>,
    dz: f64,
    n_steps: usize,
    midpoints: Vec<C64>,
    snapshots: BTreeMap<usize, Vec<C64>>,
}

impl TrajectoryStore {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn distance(&self) -> f64 {
        self.n_steps as f64 * self.dz
    }

    /// Field at the middle of step `k` (0-based).
    pub fn midpoint(&self, k: usize) -> &[C64] {
        let n = self.grid.n_points();
        &self.midpoints[k * n..(k + 1) * n]
    }

    /// Field at the step-`k` boundary, if it was snapshotted.
    pub fn snapshot(&self, step: usize) -> Option<&[C64]> {
        self.snapshots.get(&step).map(|v| v.as_slice())
    }

    pub fn snapshot_steps(&self) -> Vec<usize> {
        self.snapshots.keys().copied().collect()
    }

    /// Assemble a store from raw parts (used by the spill-file reader).
    pub fn from_parts(
        grid: Arc<TimeGrid>,
        dz: f64,
        n_steps: usize,
        midpoints: Vec<C64>,
        snapshots: BTreeMap<usize, Vec<C64>>,
    ) -> Result<Self> {
        if midpoints.len() != n_steps * grid.n_points() {
            return Err(Error::Contract(format!(
                "midpoint buffer holds {} samples, expected {} steps x {} points",
                midpoints.len(),
                n_steps,
                grid.n_points()
            )));
        }
        Ok(Self {
            grid,
            dz,
            n_steps,
            midpoints,
            snapshots,
        })
    }

    pub fn raw_midpoints(&self) -> &[C64] {
        &self.midpoints
    }
}

struct Stepper {
    spectral: Spectral,
    half_mult: Vec<C64>,
    eps: f64,
    mu: f64,
    nu: f64,
    half_h: f64,
    substeps: u32,
}

impl Stepper {
    fn new(grid: Arc<TimeGrid>, params: &CgleParams, scheme: &StepScheme) -> Self {
        let half_mult = linear_multiplier(params, &grid, 0.5 * scheme.dz);
        Self {
            spectral: Spectral::new(grid),
            half_mult,
            eps: params.epsilon,
            mu: params.mu,
            nu: params.nu,
            half_h: 0.5 * scheme.dz / scheme.substeps as f64,
            substeps: scheme.substeps,
        }
    }

    /// One full split step; optionally writes the midpoint field.
    fn step(&mut self, values: &mut [C64], mut midpoint_out: Option<&mut [C64]>) {
        self.spectral.apply_multiplier(values, &self.half_mult);
        for (j, v) in values.iter_mut().enumerate() {
            let mid = rk4_nonlinear(*v, self.half_h, self.substeps, self.eps, self.mu, self.nu);
            if let Some(out) = midpoint_out.as_deref_mut() {
                out[j] = mid;
            }
            *v = rk4_nonlinear(mid, self.half_h, self.substeps, self.eps, self.mu, self.nu);
        }
        self.spectral.apply_multiplier(values, &self.half_mult);
    }
}

fn check_finite(values: &[C64], step: usize) -> Result<()> {
    let mut max_abs = 0.0f64;
    for v in values {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::Divergence {
                step,
                max_abs: f64::INFINITY,
            });
        }
        max_abs = max_abs.max(v.norm_sqr());
    }
    let max_abs = max_abs.sqrt();
    if max_abs > BLOWUP_GUARD {
        return Err(Error::Divergence { step, max_abs });
    }
    Ok(())
}

/// Propagate `field` over `distance` (rounded to a whole number of steps).
pub fn propagate(
    field: &Field,
    params: &CgleParams,
    distance: f64,
    scheme: &StepScheme,
) -> Result<Propagated> {
    params.validate()?;
    scheme.validate()?;
    if !field.is_finite() {
        return Err(Error::Contract("input field contains non-finite samples".into()));
    }
    let (n_steps, actual) = scheme.steps_for(distance);
    let mut values = field.values().to_vec();
    let mut stepper = Stepper::new(field.grid().clone(), params, scheme);
    for k in 0..n_steps {
        stepper.step(&mut values, None);
        check_finite(&values, k)?;
    }
    Ok(Propagated {
        field: Field::new(field.grid().clone(), values)?,
        distance: actual,
        steps: n_steps,
    })
}

/// Propagate while recording every step midpoint plus boundary snapshots at
/// `snapshot_steps` (step 0 and the final step are always included).
pub fn propagate_recording(
    field: &Field,
    params: &CgleParams,
    distance: f64,
    scheme: &StepScheme,
    snapshot_steps: &[usize],
) -> Result<(Propagated, TrajectoryStore)> {
    params.validate()?;
    scheme.validate()?;
    if !field.is_finite() {
        return Err(Error::Contract("input field contains non-finite samples".into()));
    }
    let (n_steps, actual) = scheme.steps_for(distance);
    for &s in snapshot_steps {
        if s > n_steps {
            return Err(Error::Contract(format!(
                "snapshot step {s} beyond propagation range ({n_steps} steps)"
            )));
        }
    }
    let grid = field.grid().clone();
    let n = grid.n_points();
    let mut wanted: Vec<usize> = snapshot_steps.to_vec();
    wanted.push(0);
    wanted.push(n_steps);
    wanted.sort_unstable();
    wanted.dedup();

    let mut values = field.values().to_vec();
    let mut midpoints = Vec::new();
    midpoints
        .try_reserve_exact(n_steps * n)
        .map_err(|_| Error::Config(format!("trajectory of {n_steps} x {n} samples does not fit in memory")))?;
    let mut snapshots = BTreeMap::new();
    if wanted.contains(&0) {
        snapshots.insert(0, values.clone());
    }
    let mut stepper = Stepper::new(grid.clone(), params, scheme);
    let mut mid = vec![C64::new(0.0, 0.0); n];
    for k in 0..n_steps {
        stepper.step(&mut values, Some(&mut mid));
        check_finite(&values, k)?;
        midpoints.extend_from_slice(&mid);
        if wanted.binary_search(&(k + 1)).is_ok() {
            snapshots.insert(k + 1, values.clone());
        }
    }
    let store = TrajectoryStore {
        grid: grid.clone(),
        dz: scheme.dz,
        n_steps,
        midpoints,
        snapshots,
    };
    Ok((
        Propagated {
            field: Field::new(grid, values)?,
            distance: actual,
            steps: n_steps,
        },
        store,
    ))
}
