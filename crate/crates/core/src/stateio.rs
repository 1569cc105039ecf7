//! Binary field/trajectory files and JSON sidecars.
//!
//! Frame file layout (little endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"CGLQFRM\0"
//! 8       4     version (1)
//! 12      4     bytes per complex sample (16)
//! 16      8     n_points
//! 24      8     steps (frame count)
//! 32      8     dz (f64; 0 for single-frame state files)
//! 40      8     t_window (f64)
//! 48      16    reserved (zero)
//! 64      -     frames: steps x n_points complex128 (re, im f64 pairs)
//! ```
//!
//! A saved state is a one-frame file plus a `.json` sidecar carrying the
//! equation parameters and the relaxation record. A spilled trajectory
//! stores the per-step midpoint frames consumed by the quantum pass.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cgle::{CgleParams, TrajectoryStore};
use crate::error::{Error, Result};
use crate::grid::{Field, TimeGrid};
use crate::states::ConvergenceReport;
use crate::C64;

const MAGIC: &[u8; 8] = b"CGLQFRM\0";
const VERSION: u32 = 1;
const SAMPLE_BYTES: u32 = 16;
const HEADER_BYTES: usize = 64;

/// JSON companion of a saved state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSidecar {
    pub kind: String,
    pub params: CgleParams,
    pub n_points: usize,
    pub t_window: f64,
    #[serde(default)]
    pub separations: Vec<f64>,
    #[serde(default)]
    pub relative_phases: Vec<f64>,
    #[serde(default)]
    pub convergence: Option<ConvergenceReport>,
}

pub fn sidecar_path(state_path: &Path) -> PathBuf {
    state_path.with_extension("json")
}

/// Write bytes to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_frames(grid: &TimeGrid, dz: f64, steps: usize, frames: &[C64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + frames.len() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&SAMPLE_BYTES.to_le_bytes());
    out.extend_from_slice(&(grid.n_points() as u64).to_le_bytes());
    out.extend_from_slice(&(steps as u64).to_le_bytes());
    out.extend_from_slice(&dz.to_le_bytes());
    out.extend_from_slice(&grid.t_window().to_le_bytes());
    out.extend_from_slice(&[0u8; 16]);
    for v in frames {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

struct FrameFile {
    grid: Arc<TimeGrid>,
    dz: f64,
    steps: usize,
    frames: Vec<C64>,
}

fn decode_frames(path: &Path) -> Result<FrameFile> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; HEADER_BYTES];
    file.read_exact(&mut header)?;
    if &header[0..8] != MAGIC {
        return Err(Error::Config(format!(
            "{} is not a frame file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Config(format!("unsupported frame file version {version}")));
    }
    let sample = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if sample != SAMPLE_BYTES {
        return Err(Error::Config(format!("unsupported sample width {sample}")));
    }
    let n_points = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let steps = u64::from_le_bytes(header[24..32].try_into().unwrap()) as usize;
    let dz = f64::from_le_bytes(header[32..40].try_into().unwrap());
    let t_window = f64::from_le_bytes(header[40..48].try_into().unwrap());
    let grid = TimeGrid::new(n_points, t_window)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let expected = steps * n_points * 16;
    if data.len() != expected {
        return Err(Error::Config(format!(
            "frame payload is {} bytes, expected {expected}",
            data.len()
        )));
    }
    let frames = data
        .chunks_exact(16)
        .map(|c| {
            C64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect();
    Ok(FrameFile {
        grid,
        dz,
        steps,
        frames,
    })
}

/// Save a field as a one-frame file plus its JSON sidecar.
pub fn save_state(path: &Path, field: &Field, sidecar: &StateSidecar) -> Result<()> {
    let bytes = encode_frames(field.grid(), 0.0, 1, field.values());
    write_atomic(path, &bytes)?;
    let json = serde_json::to_vec_pretty(sidecar)?;
    write_atomic(&sidecar_path(path), &json)?;
    Ok(())
}

/// Load a saved state and its sidecar.
pub fn load_state(path: &Path) -> Result<(Field, StateSidecar)> {
    let decoded = decode_frames(path)?;
    if decoded.steps != 1 {
        return Err(Error::Config(format!(
            "expected a single-frame state file, found {} frames",
            decoded.steps
        )));
    }
    let sidecar: StateSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let field = Field::new(decoded.grid, decoded.frames)?;
    Ok((field, sidecar))
}

/// Spill the midpoint frames of a trajectory to disk.
pub fn save_trajectory(path: &Path, trajectory: &TrajectoryStore) -> Result<()> {
    let bytes = encode_frames(
        trajectory.grid(),
        trajectory.dz(),
        trajectory.n_steps(),
        trajectory.raw_midpoints(),
    );
    write_atomic(path, &bytes)
}

/// Load a spilled trajectory. Only the midpoint frames are stored in the
/// file; boundary snapshots must be re-recorded if measurement anchors
/// other than those supplied here are needed.
pub fn load_trajectory(
    path: &Path,
    snapshots: BTreeMap<usize, Vec<C64>>,
) -> Result<TrajectoryStore> {
    let decoded = decode_frames(path)?;
    TrajectoryStore::from_parts(
        decoded.grid,
        decoded.dz,
        decoded.steps,
        decoded.frames,
        snapshots,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgle::{propagate_recording, StepScheme};

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        let grid = TimeGrid::new(64, 20.0).unwrap();
        let field = Field::from_fn(grid.clone(), |t| C64::new(1.0 / t.cosh(), 0.1 * t));
        let sidecar = StateSidecar {
            kind: "single".into(),
            params: CgleParams::nlse(),
            n_points: 64,
            t_window: 20.0,
            separations: vec![],
            relative_phases: vec![],
            convergence: None,
        };
        save_state(&path, &field, &sidecar).unwrap();
        let (loaded, sc) = load_state(&path).unwrap();
        assert_eq!(loaded.values(), field.values());
        assert!(loaded.grid().same_grid(&grid));
        assert_eq!(sc.kind, "single");
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        let grid = TimeGrid::new(64, 20.0).unwrap();
        let field = Field::from_fn(grid.clone(), |t| C64::new(1.0 / t.cosh(), 0.0));
        let scheme = StepScheme {
            dz: 1e-2,
            substeps: 1,
        };
        let (_, traj) =
            propagate_recording(&field, &CgleParams::nlse(), 0.1, &scheme, &[]).unwrap();
        save_trajectory(&path, &traj).unwrap();
        let loaded = load_trajectory(&path, BTreeMap::new()).unwrap();
        assert_eq!(loaded.n_steps(), traj.n_steps());
        assert_eq!(loaded.dz(), traj.dz());
        assert_eq!(loaded.raw_midpoints(), traj.raw_midpoints());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, vec![0u8; 128]).unwrap();
        assert!(matches!(
            load_state(&path),
            Err(Error::Config(_)) | Err(Error::Json(_))
        ));
    }
}
