//! Preparation of stationary solitons and bound states: relaxation of a
//! sech guess to the stationary dissipative pulse, composition of shifted
//! phased copies, relaxation of bound pairs/trains, and peak detection with
//! per-soliton segmentation of the time axis.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cgle::{self, CgleParams, StepScheme};
use crate::error::{Error, Result};
use crate::grid::{Field, Spectral, TimeGrid};
use crate::C64;

/// Pulse tails must stay below this fraction of the peak at the window edge.
pub const EDGE_TAIL_LIMIT: f64 = 1e-8;

/// Offsets and phases of a multi-soliton ansatz `U(t) = sum_j U0(t + rho_j) e^{i theta_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundStateSpec {
    pub offsets: Vec<f64>,
    pub phases: Vec<f64>,
}

impl BoundStateSpec {
    pub fn new(offsets: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() || offsets.len() != phases.len() {
            return Err(Error::Config(format!(
                "offsets ({}) and phases ({}) must be equal nonzero lengths",
                offsets.len(),
                phases.len()
            )));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("offsets must be strictly increasing".into()));
        }
        Ok(Self { offsets, phases })
    }

    /// Equally separated in-phase train centred on t = 0.
    pub fn train(n: usize, separation: f64) -> Result<Self> {
        if n == 0 || !(separation > 0.0) {
            return Err(Error::Config("train needs n >= 1 and a positive separation".into()));
        }
        let mid = 0.5 * (n as f64 - 1.0);
        let offsets = (0..n).map(|j| (j as f64 - mid) * separation).collect();
        Self::new(offsets, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Detected pulses and the segment of the window belonging to each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolitonSegmentation {
    /// Refined peak times, left to right.
    pub peak_positions: Vec<f64>,
    /// `n_peaks + 1` grid indices partitioning `0..n_points`.
    pub boundaries: Vec<usize>,
    pub peak_amplitudes: Vec<f64>,
    pub peak_phases: Vec<f64>,
}

impl SolitonSegmentation {
    pub fn n_solitons(&self) -> usize {
        self.peak_positions.len()
    }

    /// Grid-index range of soliton `i`.
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }
}

/// Convergence bookkeeping from a relaxation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Distance propagated before the criterion was met.
    pub distance_used: f64,
    /// Last shape functional `max_t ||U(z)| - |U(z - 1)|| / max_t |U|`.
    pub shape_change: f64,
    pub energy: f64,
    pub converged: bool,
}

/// Measured geometry of a relaxed bound state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundStateReport {
    pub separations: Vec<f64>,
    /// Phase differences between neighbouring pulses, wrapped to (-pi, pi].
    pub relative_phases: Vec<f64>,
    pub peak_positions: Vec<f64>,
    /// Residual change of the outermost peak spread per unit distance.
    pub separation_drift: f64,
    pub convergence: ConvergenceReport,
}

/// Knobs of the relaxation loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelaxOptions {
    pub max_distance: f64,
    /// Initial transient discarded before convergence is tested.
    pub transient_distance: f64,
    /// Distance between shape comparisons.
    pub check_interval: f64,
    pub shape_tolerance: f64,
}

impl RelaxOptions {
    pub fn new(max_distance: f64) -> Self {
        Self {
            max_distance,
            transient_distance: 5.0,
            check_interval: 1.0,
            shape_tolerance: 1e-6,
        }
    }
}

fn shape_change(now: &[C64], before: &[C64]) -> f64 {
    let max_abs = now.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if max_abs == 0.0 {
        return f64::INFINITY;
    }
    now.iter()
        .zip(before)
        .map(|(a, b)| (a.norm() - b.norm()).abs())
        .fold(0.0, f64::max)
        / max_abs
}

fn check_window(field: &Field) -> Result<()> {
    let n = field.grid().n_points();
    let peak = field.max_abs();
    if peak == 0.0 {
        return Ok(());
    }
    let edge = field.values()[0].norm().max(field.values()[n - 1].norm());
    let edge_fraction = edge / peak;
    if edge_fraction > EDGE_TAIL_LIMIT {
        return Err(Error::WindowTooSmall {
            edge_fraction,
            limit: EDGE_TAIL_LIMIT,
        });
    }
    Ok(())
}

/// Shift the field so `t = 0` sits at `reference` (i.e. `U(t) -> U(t + reference)`).
fn recentre(field: &Field, reference: f64) -> Result<Field> {
    let mut values = field.values().to_vec();
    let mut sp = Spectral::new(field.grid().clone());
    sp.shift(&mut values, reference);
    Field::new(field.grid().clone(), values)
}

/// Relax a sech guess `A sech(t/w)` to the stationary single soliton of
/// `params`.
///
/// Convergence: the shape functional falls below `opts.shape_tolerance`
/// after the initial transient. The returned pulse is recentred so its peak
/// sits at `t = 0`.
pub fn relax_single_soliton(
    grid: Arc<TimeGrid>,
    params: &CgleParams,
    guess_amplitude: f64,
    guess_width: f64,
    scheme: &StepScheme,
    opts: &RelaxOptions,
) -> Result<(Field, ConvergenceReport)> {
    if !(guess_amplitude > 0.0) || !(guess_width > 0.0) {
        return Err(Error::Config("sech guess needs positive amplitude and width".into()));
    }
    let guess = Field::from_fn(grid, |t| C64::new(guess_amplitude / (t / guess_width).cosh(), 0.0));
    let initial_peak = guess.max_abs();
    let mut state = guess;
    let mut z = 0.0;
    let mut last_shape = f64::INFINITY;
    while z < opts.max_distance {
        let before = state.clone();
        let step = cgle::propagate(&state, params, opts.check_interval, scheme)?;
        state = step.field;
        z += step.distance;
        last_shape = shape_change(state.values(), before.values());
        if state.max_abs() < 1e-6 * initial_peak {
            // pulse died; no point burning the remaining budget
            return Err(Error::RelaxationFailure {
                distance: z,
                shape_change: last_shape,
                drift: None,
            });
        }
        if z >= opts.transient_distance && last_shape < opts.shape_tolerance {
            let seg = detect_solitons(&state, 0.3)?;
            if seg.n_solitons() != 1 {
                return Err(Error::BoundStateInstability {
                    expected: 1,
                    found: seg.n_solitons(),
                    z,
                });
            }
            let centred = recentre(&state, seg.peak_positions[0])?;
            check_window(&centred)?;
            let report = ConvergenceReport {
                distance_used: z,
                shape_change: last_shape,
                energy: cgle::energy(&centred),
                converged: true,
            };
            return Ok((centred, report));
        }
    }
    Err(Error::RelaxationFailure {
        distance: z,
        shape_change: last_shape,
        drift: None,
    })
}

/// `U(t) = sum_j U0(t + rho_j) e^{i theta_j}` with spectral-phase shifts.
pub fn compose_bound_state(u0: &Field, spec: &BoundStateSpec) -> Result<Field> {
    let grid = u0.grid().clone();
    let mut sp = Spectral::new(grid.clone());
    let mut total = vec![C64::new(0.0, 0.0); grid.n_points()];
    for (&rho, &theta) in spec.offsets.iter().zip(&spec.phases) {
        let mut copy = u0.values().to_vec();
        if rho != 0.0 {
            sp.shift(&mut copy, rho);
        }
        let phase = (C64::i() * theta).exp();
        for (acc, v) in total.iter_mut().zip(&copy) {
            *acc += phase * v;
        }
    }
    let field = Field::new(grid, total)?;
    check_window(&field)?;
    Ok(field)
}

/// Relax a composed bound state, requiring the pulse count to survive.
///
/// On success the state is recentred so the mean peak position is `t = 0`
/// and the measured separations and neighbour phase differences are
/// reported. Peak-count changes abort with
/// [`Error::BoundStateInstability`]; non-convergence reports the residual
/// separation drift per unit distance.
pub fn relax_bound_state(
    params: &CgleParams,
    u_init: &Field,
    scheme: &StepScheme,
    opts: &RelaxOptions,
) -> Result<(Field, BoundStateReport)> {
    let initial_seg = detect_solitons(u_init, 0.3)?;
    let expected = initial_seg.n_solitons();
    let mut state = u_init.clone();
    let mut z = 0.0;
    let mut last_shape = f64::INFINITY;
    let mut last_spread = spread(&initial_seg.peak_positions);
    let mut drift = f64::INFINITY;
    while z < opts.max_distance {
        let before = state.clone();
        let step = cgle::propagate(&state, params, opts.check_interval, scheme)?;
        state = step.field;
        z += step.distance;
        last_shape = shape_change(state.values(), before.values());
        let seg = detect_solitons(&state, 0.3)?;
        if seg.n_solitons() != expected {
            return Err(Error::BoundStateInstability {
                expected,
                found: seg.n_solitons(),
                z,
            });
        }
        let now_spread = spread(&seg.peak_positions);
        drift = (now_spread - last_spread).abs() / step.distance;
        last_spread = now_spread;
        if z >= opts.transient_distance && last_shape < opts.shape_tolerance {
            let mean: f64 =
                seg.peak_positions.iter().sum::<f64>() / seg.n_solitons() as f64;
            let centred = recentre(&state, mean)?;
            check_window(&centred)?;
            let seg = detect_solitons(&centred, 0.3)?;
            let separations: Vec<f64> =
                seg.peak_positions.windows(2).map(|w| w[1] - w[0]).collect();
            let relative_phases: Vec<f64> = seg
                .peak_phases
                .windows(2)
                .map(|w| wrap_angle(w[1] - w[0]))
                .collect();
            let report = BoundStateReport {
                separations,
                relative_phases,
                peak_positions: seg.peak_positions.clone(),
                separation_drift: drift,
                convergence: ConvergenceReport {
                    distance_used: z,
                    shape_change: last_shape,
                    energy: cgle::energy(&centred),
                    converged: true,
                },
            };
            return Ok((centred, report));
        }
    }
    Err(Error::RelaxationFailure {
        distance: z,
        shape_change: last_shape,
        drift: Some(drift),
    })
}

/// Propagate a composed bound state for a fixed settling distance, checking
/// only that the pulse count survives, and report the measured geometry.
///
/// The strict stationarity of [`relax_bound_state`] is unreachable for
/// bound states that keep drifting on very slow scales (the in-phase pairs
/// of this equation separate logarithmically slowly); the pipelines settle
/// for a quasi-stationary state and record the residual drift instead.
pub fn settle_bound_state(
    params: &CgleParams,
    u_init: &Field,
    scheme: &StepScheme,
    settle_distance: f64,
    threshold_fraction: f64,
) -> Result<(Field, BoundStateReport)> {
    let initial_seg = detect_solitons(u_init, threshold_fraction)?;
    let expected = initial_seg.n_solitons();
    let mut state = u_init.clone();
    let mut z = 0.0;
    let mut last_shape = f64::INFINITY;
    let mut last_spread = spread(&initial_seg.peak_positions);
    let mut drift = 0.0;
    let chunk = 1.0f64;
    while z < settle_distance {
        let before = state.clone();
        let step = cgle::propagate(&state, params, chunk.min(settle_distance - z), scheme)?;
        state = step.field;
        z += step.distance;
        last_shape = shape_change(state.values(), before.values());
        let seg = detect_solitons(&state, threshold_fraction)?;
        if seg.n_solitons() != expected {
            return Err(Error::BoundStateInstability {
                expected,
                found: seg.n_solitons(),
                z,
            });
        }
        let now_spread = spread(&seg.peak_positions);
        drift = (now_spread - last_spread).abs() / step.distance.max(1e-12);
        last_spread = now_spread;
    }
    let seg = detect_solitons(&state, threshold_fraction)?;
    let mean: f64 = seg.peak_positions.iter().sum::<f64>() / seg.n_solitons() as f64;
    let centred = recentre(&state, mean)?;
    check_window(&centred)?;
    let seg = detect_solitons(&centred, threshold_fraction)?;
    let report = BoundStateReport {
        separations: seg.peak_positions.windows(2).map(|w| w[1] - w[0]).collect(),
        relative_phases: seg
            .peak_phases
            .windows(2)
            .map(|w| wrap_angle(w[1] - w[0]))
            .collect(),
        peak_positions: seg.peak_positions.clone(),
        separation_drift: drift,
        convergence: ConvergenceReport {
            distance_used: z,
            shape_change: last_shape,
            energy: cgle::energy(&centred),
            converged: last_shape < 1e-6,
        },
    };
    Ok((centred, report))
}

fn spread(positions: &[f64]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    positions[positions.len() - 1] - positions[0]
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Locate pulses as local maxima of |U| above `threshold_fraction` of the
/// global maximum, at least 4 grid points apart; segment boundaries sit at
/// the |U| minimum between neighbouring peaks. Peak positions are refined by
/// 3-point parabolic interpolation.
pub fn detect_solitons(field: &Field, threshold_fraction: f64) -> Result<SolitonSegmentation> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::Config(format!(
            "threshold fraction must lie in (0, 1), got {threshold_fraction}"
        )));
    }
    let grid = field.grid();
    let n = grid.n_points();
    let abs: Vec<f64> = field.values().iter().map(|v| v.norm()).collect();
    let max = abs.iter().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return Err(Error::NoSolitons);
    }
    let threshold = threshold_fraction * max;

    let mut peaks: Vec<usize> = Vec::new();
    for j in 1..n - 1 {
        if abs[j] >= threshold && abs[j] > abs[j - 1] && abs[j] >= abs[j + 1] {
            if let Some(&last) = peaks.last() {
                if j - last < 4 {
                    // keep the taller of the two close maxima
                    if abs[j] > abs[last] {
                        *peaks.last_mut().unwrap() = j;
                    }
                    continue;
                }
            }
            peaks.push(j);
        }
    }
    if peaks.is_empty() {
        return Err(Error::NoSolitons);
    }

    let mut boundaries = Vec::with_capacity(peaks.len() + 1);
    boundaries.push(0);
    for w in peaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let min_at = (lo..=hi)
            .min_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap())
            .unwrap();
        boundaries.push(min_at);
    }
    boundaries.push(n);

    let mut peak_positions = Vec::with_capacity(peaks.len());
    let mut peak_amplitudes = Vec::with_capacity(peaks.len());
    let mut peak_phases = Vec::with_capacity(peaks.len());
    for &j in &peaks {
        let (ym, y0, yp) = (abs[j - 1], abs[j], abs[j + 1]);
        let denom = ym - 2.0 * y0 + yp;
        let offset = if denom.abs() > 0.0 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        peak_positions.push(grid.t_at(j) + offset * grid.dt());
        peak_amplitudes.push(y0 - 0.25 * (ym - yp) * offset);
        peak_phases.push(field.values()[j].arg());
    }

    Ok(SolitonSegmentation {
        peak_positions,
        boundaries,
        peak_amplitudes,
        peak_phases,
    })
}
