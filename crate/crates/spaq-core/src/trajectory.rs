//! Camera trajectories, Umeyama alignment, and the absolute trajectory error.
//!
//! Trajectories use the TUM convention: one pose per line, `timestamp tx ty
//! tz qx qy qz qw`, with `#` starting a comment line. The writer emits the
//! shortest decimal form that round-trips, so `from_tum(to_tum(t))` restores
//! every float bit-exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Maximum timestamp gap accepted when pairing samples across trajectories,
/// in seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// One timestamped camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    /// Time in seconds.
    pub timestamp: f64,
    /// Position in meters.
    pub position: [f64; 3],
    /// Orientation as a unit quaternion, stored `[x, y, z, w]`.
    pub orientation: [f64; 4],
}

/// An ordered sequence of camera poses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<PoseSample>,
}

impl Trajectory {
    /// Builds a trajectory and checks its invariants: strictly increasing
    /// timestamps and unit-norm orientations (within `1e-6`).
    pub fn new(samples: Vec<PoseSample>) -> Result<Self> {
        let traj = Trajectory { samples };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            let finite = s.timestamp.is_finite()
                && s.position.iter().all(|v| v.is_finite())
                && s.orientation.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::DegenerateTrajectory(format!(
                    "sample {k} contains a non-finite value"
                )));
            }
            if k > 0 && s.timestamp <= self.samples[k - 1].timestamp {
                return Err(Error::DegenerateTrajectory(format!(
                    "timestamps must be strictly increasing (sample {k})"
                )));
            }
            let norm = s.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateTrajectory(format!(
                    "orientation of sample {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Parses TUM-format text: `timestamp tx ty tz qx qy qz qw` per line,
    /// blank lines and `#` comments ignored.
    pub fn from_tum(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(Error::TrajectoryParse {
                    line,
                    msg: format!("expected 8 fields, found {}", fields.len()),
                });
            }
            let mut values = [0.0f64; 8];
            for (slot, field) in values.iter_mut().zip(&fields) {
                *slot = f64::from_str(field).map_err(|_| Error::TrajectoryParse {
                    line,
                    msg: format!("`{field}` is not a number"),
                })?;
            }
            samples.push(PoseSample {
                timestamp: values[0],
                position: [values[1], values[2], values[3]],
                orientation: [values[4], values[5], values[6], values[7]],
            });
        }
        Trajectory::new(samples)
    }

    /// Formats the trajectory in TUM convention. Floats are printed in the
    /// shortest form that parses back to the same bits.
    pub fn to_tum(&self) -> String {
        let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for s in &self.samples {
            let p = s.position;
            let q = s.orientation;
            writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                s.timestamp, p[0], p[1], p[2], q[0], q[1], q[2], q[3]
            )
            .expect("string writes cannot fail");
        }
        out
    }

    pub fn load_tum(path: impl AsRef<Path>) -> Result<Self> {
        Trajectory::from_tum(&std::fs::read_to_string(path)?)
    }

    pub fn save_tum(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_tum())?)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Alignment family used before computing trajectory error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Rotation and translation only (`s = 1`).
    Rigid,
    /// Rotation, translation, and a global scale — the default, since
    /// monocular estimates carry an arbitrary scale.
    #[default]
    Similarity,
}

impl AlignMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignMode::Rigid => "rigid",
            AlignMode::Similarity => "similarity",
        }
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(AlignMode::Rigid),
            "similarity" => Ok(AlignMode::Similarity),
            other => Err(Error::InvalidConfig(format!(
                "unknown alignment mode `{other}` (expected `rigid` or `similarity`)"
            ))),
        }
    }
}

/// The closed-form transform `p ↦ s·R·p + t` mapping estimate onto ground
/// truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTransform {
    pub scale: f64,
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AlignTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.translation;
        for (i, row) in self.rotation.iter().enumerate() {
            out[i] += self.scale * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
        }
        out
    }
}

/// Pairs samples by nearest timestamp within `tolerance` seconds. Each sample
/// is used at most once; closer pairs win, and unmatched samples are dropped.
/// Returns `(est index, gt index)` pairs in estimate order.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let gt_times: Vec<f64> = gt.samples.iter().map(|s| s.timestamp).collect();
    let mut candidates = Vec::new();
    for (i, s) in est.samples.iter().enumerate() {
        let from = gt_times.partition_point(|&t| t < s.timestamp - tolerance);
        for (j, &t) in gt_times.iter().enumerate().skip(from) {
            if t > s.timestamp + tolerance {
                break;
            }
            candidates.push(((t - s.timestamp).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
    let mut est_used = vec![false; est.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !est_used[i] && !gt_used[j] {
            est_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Umeyama's closed-form least-squares solution to
/// `min Σ‖s·R·p_est + t − p_gt‖²` over the associated sample pairs.
fn umeyama(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignMode) -> Result<AlignTransform> {
    let n = est.len() as f64;
    let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    let mut var_e = 0.0;
    for (p, q) in est.iter().zip(gt) {
        let pc = p - mu_e;
        let qc = q - mu_g;
        cross += qc * pc.transpose();
        var_e += pc.norm_squared();
    }
    cross /= n;
    var_e /= n;

    let svd = cross.svd(true, true);
    let u = svd.u.expect("3x3 SVD always produces U");
    let v_t = svd.v_t.expect("3x3 SVD always produces Vᵀ");
    let d = svd.singular_values;
    // A rank-deficient cross-covariance (collinear or coincident positions)
    // leaves the rotation underdetermined.
    if !(d[1] > d[0] * 1e-12 && d[0] > 0.0) {
        return Err(Error::DegenerateTrajectory(
            "associated positions are collinear or coincident; the alignment is not unique"
                .to_string(),
        ));
    }
    let sign = if u.determinant() * v_t.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let rot = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v_t;
    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::Similarity => (d[0] + d[1] + sign * d[2]) / var_e,
    };
    let t = mu_g - rot * mu_e * scale;
    Ok(AlignTransform {
        scale,
        rotation: [
            [rot[(0, 0)], rot[(0, 1)], rot[(0, 2)]],
            [rot[(1, 0)], rot[(1, 1)], rot[(1, 2)]],
            [rot[(2, 0)], rot[(2, 1)], rot[(2, 2)]],
        ],
        translation: [t[0], t[1], t[2]],
    })
}

fn paired_positions(
    est: &Trajectory,
    gt: &Trajectory,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    est.validate()?;
    gt.validate()?;
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(Error::DegenerateTrajectory(format!(
            "{} associated sample pairs within {} s; at least 3 are required",
            pairs.len(),
            ASSOCIATION_TOLERANCE
        )));
    }
    let pick = |t: &Trajectory, k: usize| Vector3::from(t.samples[k].position);
    let p = pairs.iter().map(|&(i, _)| pick(est, i)).collect();
    let q = pairs.iter().map(|&(_, j)| pick(gt, j)).collect();
    Ok((p, q))
}

/// Aligns `est` onto `gt` and returns the transform together with the fully
/// transformed estimate (positions mapped, orientations rotated).
pub fn align(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<(AlignTransform, Trajectory)> {
    let (p, q) = paired_positions(est, gt)?;
    let transform = umeyama(&p, &q, mode)?;
    let rot = Matrix3::from_fn(|i, j| transform.rotation[i][j]);
    let rot_q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let samples = est
        .samples
        .iter()
        .map(|s| {
            let [x, y, z, w] = s.orientation;
            let q = rot_q * UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
            PoseSample {
                timestamp: s.timestamp,
                position: transform.apply(s.position),
                orientation: [q.i, q.j, q.k, q.w],
            }
        })
        .collect();
    Ok((transform, Trajectory { samples }))
}

/// Root-mean-square position error after alignment, in meters.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<f64> {
    let (p, q) = paired_positions(est, gt)?;
    let transform = umeyama(&p, &q, mode)?;
    let sum: f64 = p
        .iter()
        .zip(&q)
        .map(|(pi, qi)| {
            let mapped = transform.apply([pi.x, pi.y, pi.z]);
            (Vector3::from(mapped) - qi).norm_squared()
        })
        .sum();
    Ok((sum / p.len() as f64).sqrt())
}
