//! File formats for experiment inputs and outputs.
//!
//! Trajectories are CSV rows `t, qx, qy, qz, qw, px, py, pz` with the
//! attitude as a unit quaternion (scalar last, non-negative scalar part)
//! encoding the reference-to-body rotation and the position in the
//! reference frame. IMU streams are `t, gx, gy, gz, ax, ay, az`; feature
//! observations are `t, feature_id, u, v, source`. Floats are written in
//! the shortest exact decimal form, so equal data produces equal bytes.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::imu::ImuSample;
use crate::se3::JplQuaternion;
use crate::sim::CameraFrame;

use super::metrics::StampedPose;

/// Writes a trajectory in the standard format.
pub fn write_trajectory_csv(path: &Path, traj: &[StampedPose]) -> Result<()> {
    let mut out = String::from("t,qx,qy,qz,qw,px,py,pz\n");
    for p in traj {
        let q = JplQuaternion::from_rotation(&p.rotation).as_array();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.ts, q[0], q[1], q[2], q[3], p.position.x, p.position.y, p.position.z
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<StampedPose>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format("csv open", e.to_string()))?;
    let mut traj = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("trajectory csv", e.to_string()))?;
        if row.len() != 8 {
            return Err(Error::format(
                "trajectory csv",
                format!("expected 8 columns, got {}", row.len()),
            ));
        }
        let mut f = [0.0f64; 8];
        for (i, cell) in row.iter().enumerate() {
            f[i] = cell
                .parse()
                .map_err(|_| Error::format("trajectory csv", format!("bad number {cell:?}")))?;
        }
        let q = JplQuaternion::new(f[1], f[2], f[3], f[4])?;
        traj.push(StampedPose {
            ts: f[0],
            rotation: q.to_rotation(),
            position: Vector3::new(f[5], f[6], f[7]),
        });
    }
    Ok(traj)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::from("t,gx,gy,gz,ax,ay,az\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.ts, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format("csv open", e.to_string()))?;
    let mut samples = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("imu csv", e.to_string()))?;
        if row.len() != 7 {
            return Err(Error::format(
                "imu csv",
                format!("expected 7 columns, got {}", row.len()),
            ));
        }
        let mut f = [0.0f64; 7];
        for (i, cell) in row.iter().enumerate() {
            f[i] = cell
                .parse()
                .map_err(|_| Error::format("imu csv", format!("bad number {cell:?}")))?;
        }
        samples.push(ImuSample {
            ts: f[0],
            gyro: Vector3::new(f[1], f[2], f[3]),
            accel: Vector3::new(f[4], f[5], f[6]),
        });
    }
    Ok(samples)
}

/// Writes camera frames as one row per observation, tagged with the
/// stream that produced it.
pub fn write_features_csv(path: &Path, frames: &[CameraFrame], source: &str) -> Result<()> {
    let mut out = String::from("t,feature_id,u,v,source\n");
    for frame in frames {
        for &(id, u, v) in &frame.observations {
            out.push_str(&format!("{},{},{},{},{}\n", frame.ts, id, u, v, source));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a feature CSV back into per-timestamp frames, preserving row
/// order within a frame. Rows from all sources are merged.
pub fn read_features_csv(path: &Path) -> Result<Vec<CameraFrame>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format("csv open", e.to_string()))?;
    let mut frames: Vec<CameraFrame> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("feature csv", e.to_string()))?;
        if row.len() != 5 {
            return Err(Error::format(
                "feature csv",
                format!("expected 5 columns, got {}", row.len()),
            ));
        }
        let ts: f64 = row[0]
            .parse()
            .map_err(|_| Error::format("feature csv", format!("bad timestamp {:?}", &row[0])))?;
        let id: u32 = row[1]
            .parse()
            .map_err(|_| Error::format("feature csv", format!("bad id {:?}", &row[1])))?;
        let u: f64 = row[2]
            .parse()
            .map_err(|_| Error::format("feature csv", format!("bad u {:?}", &row[2])))?;
        let v: f64 = row[3]
            .parse()
            .map_err(|_| Error::format("feature csv", format!("bad v {:?}", &row[3])))?;
        match frames.last_mut() {
            Some(f) if f.ts == ts => f.observations.push((id, u, v)),
            _ => frames.push(CameraFrame {
                ts,
                observations: vec![(id, u, v)],
            }),
        }
    }
    Ok(frames)
}

/// One row of the per-update log.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLogRow {
    pub ts: f64,
    /// "captured" or "rendered".
    pub kind: &'static str,
    pub accepted: usize,
    pub rejected_gate: usize,
    pub rejected_geometry: usize,
    pub rows: usize,
    pub correction_norm: f64,
}

pub fn write_update_log_csv(path: &Path, log: &[UpdateLogRow]) -> Result<()> {
    let mut out =
        String::from("t,kind,accepted,rejected_gate,rejected_geometry,rows,correction_norm\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.ts, r.kind, r.accepted, r.rejected_gate, r.rejected_geometry, r.rows,
            r.correction_norm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serializes any JSON-representable report with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format("json", e.to_string()))?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::so3_exp;
    use tempfile::tempdir;

    #[test]
    fn trajectory_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let traj: Vec<StampedPose> = (0..50)
            .map(|k| {
                let t = k as f64 / 30.0;
                StampedPose {
                    ts: t,
                    rotation: so3_exp(&Vector3::new(0.3 * t, -0.2, 0.1 * t)),
                    position: Vector3::new(t, t * t, -t / 3.0),
                }
            })
            .collect();
        write_trajectory_csv(&path, &traj).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.iter().zip(&back) {
            assert_eq!(a.ts, b.ts);
            assert_eq!(a.position, b.position);
            // Rotation survives the quaternion round trip to tight tolerance.
            assert!((a.rotation - b.rotation).norm() < 1e-12);
        }
        // Equal data, equal bytes.
        let path2 = dir.path().join("traj2.csv");
        write_trajectory_csv(&path2, &traj).unwrap();
        let first = std::fs::read(&path).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn imu_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        let samples: Vec<ImuSample> = (0..100)
            .map(|k| ImuSample {
                ts: k as f64 / 200.0,
                gyro: Vector3::new(0.1 * k as f64, -0.3, 1e-17 * k as f64),
                accel: Vector3::new(0.0, 9.81, -0.001 * k as f64),
            })
            .collect();
        write_imu_csv(&path, &samples).unwrap();
        let back = read_imu_csv(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn features_round_trip_and_keep_frame_grouping() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let frames = vec![
            CameraFrame {
                ts: 0.0,
                observations: vec![(3, 11.5, 20.25), (7, 40.0, 41.0)],
            },
            CameraFrame {
                ts: 1.0 / 30.0,
                observations: vec![(3, 12.0, 20.5)],
            },
        ];
        write_features_csv(&path, &frames, "captured").unwrap();
        let back = read_features_csv(&path).unwrap();
        assert_eq!(frames, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",captured"));
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,qx,qy,qz,qw,px,py,pz\n0.0,0,0,0,1,oops,0,0\n").unwrap();
        assert!(read_trajectory_csv(&path).is_err());
        std::fs::write(&path, "t,gx,gy,gz,ax,ay,az\n0.0,1,2\n").unwrap();
        assert!(read_imu_csv(&path).is_err());
    }
}
