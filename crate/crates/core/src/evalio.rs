//! Dataset ingestion in the EuRoC ASL CSV layout, TUM trajectory files,
//! configuration files and the aligned trajectory error metric.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::FeatureObservation;
use crate::geometry::Quat;
use crate::propagation::ImuSample;

/// Largest time difference for associating an estimate with ground truth.
pub const ASSOCIATION_WINDOW: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: Quat,
}

/// Full ground-truth state as stored in `state_groundtruth_estimate0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: Quat,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl GroundTruth {
    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord { t: self.t, p: self.p, q: self.q }
    }
}

/// A frame's feature measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
}

fn ns_to_seconds(ns: i128) -> f64 {
    let whole = ns.div_euclid(1_000_000_000);
    let frac = ns.rem_euclid(1_000_000_000);
    whole as f64 + frac as f64 * 1e-9
}

fn seconds_to_ns(t: f64) -> i128 {
    let whole = t.floor();
    whole as i128 * 1_000_000_000 + ((t - whole) * 1e9).round() as i128
}

/// Splits a CSV file into numeric rows. Blank lines and `#` comments are
/// skipped; a non-numeric first line is taken as a header.
fn read_rows(path: &Path, columns: usize) -> Result<Vec<(usize, i128, Vec<f64>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let Ok(stamp) = fields[0].parse::<i128>() else {
            if rows.is_empty() && line_no == 1 {
                continue;
            }
            return Err(Error::MalformedRow { line: line_no, reason: format!("bad timestamp {:?}", fields[0]) });
        };
        if fields.len() < columns {
            return Err(Error::MalformedRow {
                line: line_no,
                reason: format!("expected {columns} columns, found {}", fields.len()),
            });
        }
        let mut values = Vec::with_capacity(columns - 1);
        for field in &fields[1..columns] {
            let v = field.parse::<f64>().map_err(|_| Error::MalformedRow {
                line: line_no,
                reason: format!("bad number {field:?}"),
            })?;
            values.push(v);
        }
        rows.push((line_no, stamp, values));
    }
    Ok(rows)
}

/// Reads `timestamp[ns],wx,wy,wz,ax,ay,az` rows.
pub fn read_imu_csv(path: impl AsRef<Path>) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    let mut previous: Option<i128> = None;
    for (_, stamp, v) in read_rows(path.as_ref(), 7)? {
        let t = ns_to_seconds(stamp);
        if let Some(p) = previous {
            if stamp <= p {
                return Err(Error::NonMonotonicTime { previous: ns_to_seconds(p), t });
            }
        }
        previous = Some(stamp);
        out.push(ImuSample::new(t, Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])));
    }
    Ok(out)
}

pub fn write_imu_csv(samples: &[ImuSample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            seconds_to_ns(s.t),
            s.gyro.x,
            s.gyro.y,
            s.gyro.z,
            s.accel.x,
            s.accel.y,
            s.accel.z
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `state_groundtruth_estimate0/data.csv`: time, position, quaternion
/// (w, x, y, z), velocity, gyro bias, accelerometer bias.
pub fn read_euroc_groundtruth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let mut out: Vec<GroundTruth> = Vec::new();
    for (line, stamp, v) in read_rows(path.as_ref(), 17)? {
        let t = ns_to_seconds(stamp);
        if let Some(last) = out.last() {
            if t <= last.t {
                return Err(Error::NonMonotonicTime { previous: last.t, t });
            }
        }
        let raw = Quaternion::new(v[3], v[4], v[5], v[6]);
        if !(raw.norm() > 0.0) {
            return Err(Error::MalformedRow { line, reason: "zero quaternion".into() });
        }
        out.push(GroundTruth {
            t,
            p: Vector3::new(v[0], v[1], v[2]),
            q: UnitQuaternion::from_quaternion(raw),
            v: Vector3::new(v[7], v[8], v[9]),
            bg: Vector3::new(v[10], v[11], v[12]),
            ba: Vector3::new(v[13], v[14], v[15]),
        });
    }
    Ok(out)
}

pub fn write_euroc_groundtruth(states: &[GroundTruth], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#timestamp,p_x,p_y,p_z,q_w,q_x,q_y,q_z,v_x,v_y,v_z,bw_x,bw_y,bw_z,ba_x,ba_y,ba_z")?;
    for s in states {
        let q = s.q.quaternion();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            seconds_to_ns(s.t),
            s.p.x,
            s.p.y,
            s.p.z,
            q.w,
            q.i,
            q.j,
            q.k,
            s.v.x,
            s.v.y,
            s.v.z,
            s.bg.x,
            s.bg.y,
            s.bg.z,
            s.ba.x,
            s.ba.y,
            s.ba.z
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `timestamp[ns],landmark_id,camera,x,y` rows in normalized image
/// coordinates, one row per observation.
pub fn write_features_csv(frames: &[FeatureFrame], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#timestamp [ns],landmark_id,camera,x,y")?;
    for frame in frames {
        let stamp = seconds_to_ns(frame.t);
        for o in &frame.observations {
            writeln!(w, "{},{},{},{},{}", stamp, o.landmark_id, o.camera, o.z.x, o.z.y)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file, grouping consecutive rows with the same timestamp.
/// Frames without observations are not represented.
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureFrame>> {
    let mut frames: Vec<(i128, FeatureFrame)> = Vec::new();
    for (line, stamp, v) in read_rows(path.as_ref(), 5)? {
        let id = v[0];
        let cam = v[1];
        if id < 0.0 || id.fract() != 0.0 || cam < 0.0 || cam.fract() != 0.0 {
            return Err(Error::MalformedRow { line, reason: "ids must be non-negative integers".into() });
        }
        let obs = FeatureObservation { landmark_id: id as u64, camera: cam as usize, z: Vector2::new(v[2], v[3]) };
        match frames.last_mut() {
            Some((s, frame)) if *s == stamp => frame.observations.push(obs),
            Some((s, _)) if *s > stamp => {
                return Err(Error::NonMonotonicTime { previous: ns_to_seconds(*s), t: ns_to_seconds(stamp) })
            }
            _ => frames.push((stamp, FeatureFrame { t: ns_to_seconds(stamp), observations: vec![obs] })),
        }
    }
    Ok(frames.into_iter().map(|(_, f)| f).collect())
}

/// Writes `t tx ty tz qx qy qz qw` lines with 9 decimals.
pub fn write_tum(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let q = r.q.quaternion();
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            r.t, r.p.x, r.p.y, r.p.z, q.i, q.j, q.k, q.w
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = trimmed
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedRow { line: index + 1, reason: e.to_string() })?;
        if v.len() != 8 {
            return Err(Error::MalformedRow { line: index + 1, reason: format!("expected 8 fields, found {}", v.len()) });
        }
        out.push(TrajectoryRecord {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            q: UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6])),
        });
    }
    Ok(out)
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn save_toml<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Pairs each estimate with the nearest ground-truth record within
/// [`ASSOCIATION_WINDOW`]. Pairs come out sorted by estimate time.
pub fn associate(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut gt_sorted: Vec<&TrajectoryRecord> = gt.iter().collect();
    gt_sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut est_sorted: Vec<&TrajectoryRecord> = est.iter().collect();
    est_sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut pairs = Vec::new();
    for e in est_sorted {
        let i = gt_sorted.partition_point(|g| g.t < e.t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| gt_sorted.get(j))
            .min_by(|a, b| (a.t - e.t).abs().total_cmp(&(b.t - e.t).abs()));
        if let Some(g) = best {
            if (g.t - e.t).abs() <= ASSOCIATION_WINDOW {
                pairs.push((e.p, g.p));
            }
        }
    }
    pairs
}

/// Least-squares rigid transform `(R, t)` minimizing `Σ |g − (R e + t)|²`.
pub fn align_rigid(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let mu_g = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in pairs {
        h += (e - mu_e) * (g - mu_g).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::IllConditioned(f64::INFINITY));
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok((r, mu_g - r * mu_e))
}

/// Absolute position RMSE after rigid alignment of the estimate onto the
/// ground truth.
pub fn ate_rmse(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<f64> {
    let pairs = associate(est, gt);
    let (r, t) = align_rigid(&pairs)?;
    let sum: f64 = pairs.iter().map(|(e, g)| (g - (r * e + t)).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}
