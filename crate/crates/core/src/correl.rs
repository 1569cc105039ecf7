//! Photon-number measurement functionals, the slot correlation map, and
//! per-soliton correlation parameters with their evolution along z.
//!
//! The slot photon-number fluctuation is
//! `dn_j = sum_{slot} dt [U0* u + U0 u†]`, so its functional has
//! `a = conj(U0) chi`, `b = U0 chi` (Hermitian by construction). The
//! correlation coefficient divides the normally-ordered covariance (full
//! covariance with shot noise subtracted on the diagonal) by full-variance
//! square roots; normally-ordered variances can be negative below shot
//! noise, which is why the full-variance denominator is the default and the
//! normally-ordered one is opt-in.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cgle::{CgleParams, TrajectoryStore};
use crate::error::{Error, Result};
use crate::grid::{Field, TimeGrid};
use crate::quantum::{measure_covariance, CovarianceResult, DoubledFunctional, NoiseSettings};
use crate::states::{detect_solitons, SolitonSegmentation};
use crate::C64;

/// Slots with mean photon number below this fraction of the largest slot
/// mean are masked out of the correlation map.
pub const SLOT_MASK_FRACTION: f64 = 1e-12;

/// Denominator convention for correlation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Shot-noise-inclusive variances (default; always well defined).
    Full,
    /// Normally-ordered variances; errors out when one is non-positive.
    Normal,
}

impl Default for DenominatorMode {
    fn default() -> Self {
        Self::Full
    }
}

/// Contiguous partition of the grid into measurement slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPartition {
    /// `n_slots + 1` grid indices, starting at 0 and ending at n_points.
    pub boundaries: Vec<usize>,
}

impl SlotPartition {
    /// `n_slots` equal contiguous slots over the whole window.
    pub fn uniform(grid: &TimeGrid, n_slots: usize) -> Result<Self> {
        let n = grid.n_points();
        if n_slots == 0 || n_slots > n {
            return Err(Error::Config(format!(
                "slot count must be in 1..={n}, got {n_slots}"
            )));
        }
        let boundaries = (0..=n_slots).map(|s| s * n / n_slots).collect();
        Ok(Self { boundaries })
    }

    /// One slot per soliton segment.
    pub fn from_segmentation(seg: &SolitonSegmentation) -> Self {
        Self {
            boundaries: seg.boundaries.clone(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn slot(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }

    /// Slot centre times.
    pub fn centres(&self, grid: &TimeGrid) -> Vec<f64> {
        (0..self.n_slots())
            .map(|i| {
                let r = self.slot(i);
                0.5 * (grid.t_at(r.start) + grid.t_at(r.end - 1))
            })
            .collect()
    }
}

/// Photon-number fluctuation functional of one slot, and the slot mean
/// `<n> = sum_slot |U0|^2 dt` (the shot noise of that slot).
pub fn photon_number_functional(
    u0_at_anchor: &Field,
    slot: std::ops::Range<usize>,
    anchor_step: usize,
) -> Result<(DoubledFunctional, f64)> {
    let n = u0_at_anchor.grid().n_points();
    if slot.start >= slot.end || slot.end > n {
        return Err(Error::Contract(format!(
            "empty or out-of-range slot {}..{} (grid {n})",
            slot.start, slot.end
        )));
    }
    let mut a = vec![C64::new(0.0, 0.0); n];
    let mut b = vec![C64::new(0.0, 0.0); n];
    let mut mean = 0.0;
    for j in slot {
        let u = u0_at_anchor.values()[j];
        a[j] = u.conj();
        b[j] = u;
        mean += u.norm_sqr();
    }
    mean *= u0_at_anchor.grid().dt();
    Ok((DoubledFunctional::new(a, b, anchor_step)?, mean))
}

/// Slot-resolved correlation map plus masking flags.
#[derive(Debug, Clone)]
pub struct EtaMatrix {
    pub eta: Array2<f64>,
    pub masked: Vec<bool>,
}

/// Correlation map from a slot covariance matrix.
///
/// Numerator: normally-ordered covariance (shot noise subtracted on the
/// diagonal). Denominator: per `mode`. Slots with negligible mean photon
/// number are masked (eta rows/columns zeroed).
pub fn eta_matrix(
    covariance: &CovarianceResult,
    slot_means: &[f64],
    mode: DenominatorMode,
) -> Result<EtaMatrix> {
    let n = slot_means.len();
    if covariance.matrix.nrows() != n || covariance.matrix.ncols() != n {
        return Err(Error::Contract(format!(
            "covariance is {}x{} but {} slot means were given",
            covariance.matrix.nrows(),
            covariance.matrix.ncols(),
            n
        )));
    }
    let max_mean = slot_means.iter().fold(0.0f64, |a, &b| a.max(b));
    let masked: Vec<bool> = slot_means
        .iter()
        .map(|&m| m < SLOT_MASK_FRACTION * max_mean)
        .collect();
    let normally_ordered =
        |i: usize, j: usize| covariance.re(i, j) - if i == j { slot_means[i] } else { 0.0 };
    let denom_var = |i: usize| -> Result<f64> {
        let v = match mode {
            DenominatorMode::Full => covariance.re(i, i),
            DenominatorMode::Normal => {
                let nv = normally_ordered(i, i);
                if nv <= 0.0 {
                    return Err(Error::OrderingAmbiguity {
                        slot_i: i,
                        slot_j: i,
                    });
                }
                nv
            }
        };
        Ok(v)
    };
    let mut eta = Array2::zeros((n, n));
    for i in 0..n {
        if masked[i] {
            continue;
        }
        for j in 0..n {
            if masked[j] {
                continue;
            }
            let denom = (denom_var(i)? * denom_var(j)?).sqrt();
            if denom > 0.0 {
                eta[(i, j)] = normally_ordered(i, j) / denom;
            }
        }
    }
    Ok(EtaMatrix { eta, masked })
}

/// Per-soliton pair correlation parameters, solitons numbered left to right.
#[derive(Debug, Clone)]
pub struct SolitonCorrelations {
    /// Full matrix of C values.
    pub c: Array2<f64>,
    pub means: Vec<f64>,
}

impl SolitonCorrelations {
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.c[(i, j)]
    }
}

/// Correlation parameters from a per-segment covariance matrix, using the
/// same shot-noise-subtracted numerator and `mode` denominator as the slot
/// map.
pub fn soliton_correlation(
    segmentation: &SolitonSegmentation,
    covariance: &CovarianceResult,
    means: &[f64],
    mode: DenominatorMode,
) -> Result<SolitonCorrelations> {
    let n = segmentation.n_solitons();
    if covariance.matrix.nrows() != n || means.len() != n {
        return Err(Error::Contract(format!(
            "segmentation has {n} solitons but covariance is {}x{} with {} means",
            covariance.matrix.nrows(),
            covariance.matrix.ncols(),
            means.len()
        )));
    }
    let em = eta_matrix(covariance, means, mode)?;
    Ok(SolitonCorrelations {
        c: em.eta,
        means: means.to_vec(),
    })
}

/// Per-checkpoint correlation values along the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub z_values: Vec<f64>,
    /// Soliton index pairs (i < j), left to right numbering.
    pub pairs: Vec<(usize, usize)>,
    /// `values[checkpoint][pair]`.
    pub values: Vec<Vec<f64>>,
}

impl CorrelationTrace {
    /// Trace of one pair across checkpoints.
    pub fn pair_series(&self, pair: (usize, usize)) -> Option<Vec<f64>> {
        let idx = self.pairs.iter().position(|&p| p == pair)?;
        Some(self.values.iter().map(|row| row[idx]).collect())
    }
}

/// Measure soliton pair correlations at each checkpoint step: segmentation
/// is re-detected on the snapshot at that step, per-soliton photon-number
/// functionals are built there, and the covariance is accumulated back to
/// z = 0. Errors out if the pulse count changes between checkpoints.
pub fn correlation_trace(
    trajectory: &TrajectoryStore,
    params: &CgleParams,
    noise: &NoiseSettings,
    checkpoint_steps: &[usize],
    expected_solitons: usize,
    threshold_fraction: f64,
    mode: DenominatorMode,
) -> Result<CorrelationTrace> {
    let grid = trajectory.grid().clone();
    let mut z_values = Vec::with_capacity(checkpoint_steps.len());
    let pairs: Vec<(usize, usize)> = (0..expected_solitons)
        .flat_map(|i| ((i + 1)..expected_solitons).map(move |j| (i, j)))
        .collect();
    let mut values = Vec::with_capacity(checkpoint_steps.len());
    for &step in checkpoint_steps {
        let snapshot = trajectory
            .snapshot(step)
            .ok_or_else(|| Error::Contract(format!("no snapshot recorded at step {step}")))?;
        let field = Field::new(grid.clone(), snapshot.to_vec())?;
        let seg = detect_solitons(&field, threshold_fraction)?;
        if seg.n_solitons() != expected_solitons {
            return Err(Error::BoundStateInstability {
                expected: expected_solitons,
                found: seg.n_solitons(),
                z: step as f64 * trajectory.dz(),
            });
        }
        let mut functionals = Vec::with_capacity(expected_solitons);
        let mut means = Vec::with_capacity(expected_solitons);
        for i in 0..expected_solitons {
            let (f, mean) = photon_number_functional(&field, seg.segment(i), step)?;
            functionals.push(f);
            means.push(mean);
        }
        let cov = measure_covariance(&functionals, trajectory, params, noise)?;
        let corr = soliton_correlation(&seg, &cov, &means, mode)?;
        values.push(pairs.iter().map(|&(i, j)| corr.pair(i, j)).collect());
        z_values.push(step as f64 * trajectory.dz());
    }
    Ok(CorrelationTrace {
        z_values,
        pairs,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgle::{propagate_recording, StepScheme};
    use crate::grid::TimeGrid;

    fn sech_field(grid: &std::sync::Arc<TimeGrid>) -> Field {
        Field::from_fn(grid.clone(), |t| C64::new(1.0 / t.cosh(), 0.0))
    }

    fn cgle_params() -> CgleParams {
        CgleParams {
            dispersion: 1.0,
            delta: -0.01,
            epsilon: 1.8,
            beta: 0.5,
            mu: -0.05,
            nu: 0.0,
        }
    }

    #[test]
    fn functional_examples() {
        let grid = TimeGrid::new(512, 40.0).unwrap();
        let u0 = sech_field(&grid);
        let (f, mean) = photon_number_functional(&u0, 0..512, 0).unwrap();
        assert!((mean - 2.0).abs() < 1e-6);
        assert!(f.components.hermiticity_defect() == 0.0);

        // zero field on the slot -> zero functional
        let zero = Field::zeros(grid.clone());
        let (f, mean) = photon_number_functional(&zero, 10..20, 0).unwrap();
        assert_eq!(mean, 0.0);
        assert!(f.components.a.iter().all(|v| v.norm() == 0.0));

        assert!(photon_number_functional(&u0, 20..20, 0).is_err());
        assert!(photon_number_functional(&u0, 0..1000, 0).is_err());
    }

    #[test]
    fn uniform_partition_covers_grid() {
        let grid = TimeGrid::new(256, 40.0).unwrap();
        let p = SlotPartition::uniform(&grid, 64).unwrap();
        assert_eq!(p.n_slots(), 64);
        assert_eq!(p.boundaries[0], 0);
        assert_eq!(*p.boundaries.last().unwrap(), 256);
        let total: usize = (0..64).map(|i| p.slot(i).len()).sum();
        assert_eq!(total, 256);
        assert!(SlotPartition::uniform(&grid, 0).is_err());
    }

    #[test]
    fn coherent_state_has_zero_eta() {
        let grid = TimeGrid::new(128, 60.0).unwrap();
        let u0 = sech_field(&grid);
        let params = cgle_params();
        let scheme = StepScheme {
            dz: 1e-3,
            substeps: 1,
        };
        let (_, traj) = propagate_recording(&u0, &params, 0.01, &scheme, &[0]).unwrap();
        let field = Field::new(grid.clone(), traj.snapshot(0).unwrap().to_vec()).unwrap();
        let part = SlotPartition::uniform(&grid, 16).unwrap();
        let mut fs = Vec::new();
        let mut means = Vec::new();
        for i in 0..16 {
            let (f, m) = photon_number_functional(&field, part.slot(i), 0).unwrap();
            fs.push(f);
            means.push(m);
        }
        let cov = measure_covariance(&fs, &traj, &params, &NoiseSettings::default()).unwrap();
        let em = eta_matrix(&cov, &means, DenominatorMode::Full).unwrap();
        for v in em.eta.iter() {
            assert!(v.abs() < 1e-10, "eta should vanish at z=0, got {v}");
        }
        // far tail slots are masked
        assert!(em.masked[0] && em.masked[15]);
    }

    #[test]
    fn normal_mode_rejects_nonpositive_variance() {
        let grid = TimeGrid::new(128, 30.0).unwrap();
        let u0 = sech_field(&grid);
        let params = CgleParams::nlse();
        let scheme = StepScheme {
            dz: 1e-3,
            substeps: 1,
        };
        let (_, traj) = propagate_recording(&u0, &params, 0.01, &scheme, &[0]).unwrap();
        let field = Field::new(grid.clone(), traj.snapshot(0).unwrap().to_vec()).unwrap();
        let (f, mean) = photon_number_functional(&field, 32..96, 0).unwrap();
        let cov = measure_covariance(&[f], &traj, &params, &NoiseSettings::default()).unwrap();
        // coherent state: normally-ordered variance is exactly zero
        match eta_matrix(&cov, &[mean], DenominatorMode::Normal) {
            Err(Error::OrderingAmbiguity { .. }) => {}
            other => panic!("expected ordering ambiguity, got {other:?}"),
        }
    }

    #[test]
    fn slot_refinement_is_bilinear() {
        // merging two adjacent slots must reproduce the sum of sub-blocks
        let grid = TimeGrid::new(128, 24.0).unwrap();
        let u0 = sech_field(&grid);
        let params = cgle_params();
        let scheme = StepScheme {
            dz: 1e-3,
            substeps: 1,
        };
        let (_, traj) = propagate_recording(&u0, &params, 0.1, &scheme, &[]).unwrap();
        let anchor = traj.n_steps();
        let field = Field::new(grid.clone(), traj.snapshot(anchor).unwrap().to_vec()).unwrap();
        let (f_ab, _) = photon_number_functional(&field, 32..96, anchor).unwrap();
        let (f_a, _) = photon_number_functional(&field, 32..64, anchor).unwrap();
        let (f_b, _) = photon_number_functional(&field, 64..96, anchor).unwrap();
        let (f_probe, _) = photon_number_functional(&field, 96..128, anchor).unwrap();
        let noise = NoiseSettings::default();
        let cov =
            measure_covariance(&[f_ab, f_a, f_b, f_probe], &traj, &params, &noise).unwrap();
        // variance of the merged slot = sum of the four sub-block covariances
        let merged = cov.re(0, 0);
        let sum = cov.re(1, 1) + cov.re(2, 2) + cov.re(1, 2) + cov.re(2, 1);
        assert!(
            (merged - sum).abs() <= 1e-10 * merged.abs(),
            "bilinearity violated: {merged} vs {sum}"
        );
        // covariance against a third slot is additive too
        let merged_x = cov.re(0, 3);
        let sum_x = cov.re(1, 3) + cov.re(2, 3);
        assert!((merged_x - sum_x).abs() <= 1e-10 * merged.abs());
    }
}
