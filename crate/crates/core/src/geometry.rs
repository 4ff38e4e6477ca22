//! Rigid-body pose algebra, trajectory integration and KITTI-style error
//! metrics.
//!
//! Euler angles follow one fixed convention everywhere: `r = (roll, pitch,
//! yaw)` and `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Subsequence lengths (meters) used by the KITTI odometry benchmark.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Frame step between subsequence start points.
pub const KITTI_STEP: usize = 10;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Relative 6-DoF pose: translation in meters and Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub t: Vec3,
    pub r: Vec3,
}

impl Pose6 {
    /// Builds a pose with wrapped angles.
    pub fn new(t: Vec3, r: Vec3) -> Self {
        Self {
            t,
            r: r.map(wrap_angle),
        }
    }

    pub fn zero() -> Self {
        Self {
            t: Vec3::zeros(),
            r: Vec3::zeros(),
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.t.x, self.t.y, self.t.z, self.r.x, self.r.y, self.r.z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_se3(&self) -> Se3 {
        Se3::new(euler_to_matrix(&self.r), self.t)
    }
}

/// Rotation about x, y, z composed as `Rz * Ry * Rx`.
pub fn euler_to_matrix(r: &Vec3) -> Mat3 {
    let (sr, cr) = r.x.sin_cos();
    let (sp, cp) = r.y.sin_cos();
    let (sy, cy) = r.z.sin_cos();
    Mat3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Pitch is within `1e-8` of `±pi/2`; `resolved` holds the roll = 0 solution.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("gimbal lock (pitch = {:.6})", .resolved.y)]
pub struct GimbalLock {
    pub resolved: Vec3,
}

/// Inverse of [`euler_to_matrix`] on the principal branch `|pitch| < pi/2`.
pub fn matrix_to_euler(m: &Mat3) -> Result<Vec3, GimbalLock> {
    let r31 = m[(2, 0)];
    if r31.abs() > 1.0 - 1e-8 {
        let pitch = if r31 < 0.0 { PI / 2.0 } else { -PI / 2.0 };
        let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return Err(GimbalLock {
            resolved: Vec3::new(0.0, pitch, yaw),
        });
    }
    let pitch = (-r31).atan2((m[(0, 0)].powi(2) + m[(1, 0)].powi(2)).sqrt());
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Ok(Vec3::new(roll, pitch, yaw))
}

/// Geodesic angle of a rotation matrix, in radians.
///
/// Same quantity as `acos((trace - 1) / 2)`, evaluated through `atan2` so
/// that small angles keep full precision.
pub fn rotation_angle(m: &Mat3) -> f64 {
    let cos = (m.trace() - 1.0) / 2.0;
    let axis = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    (axis.norm() / 2.0).atan2(cos)
}

/// Rotation vector (axis * angle) of a rotation matrix.
pub fn rotation_log(m: &Mat3) -> Vec3 {
    let angle = rotation_angle(m);
    let axis = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    if angle < 1e-12 {
        return axis / 2.0;
    }
    if angle > PI - 1e-6 {
        // axis from the symmetric part near pi
        let b = (m + Mat3::identity()) / 2.0;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].partial_cmp(&b[(j, j)]).unwrap())
            .unwrap();
        let v: Vec3 = b.column(col).into();
        return v.normalize() * angle;
    }
    axis * (angle / (2.0 * angle.sin()))
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3::new(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn from_homogeneous(h: &Matrix4<f64>) -> Se3 {
        Se3::new(h.fixed_view::<3, 3>(0, 0).into(), h.fixed_view::<3, 1>(0, 3).into())
    }

    /// Euler/translation form. Gimbal-locked rotations use the roll = 0
    /// resolution.
    pub fn to_pose6(&self) -> Pose6 {
        let r = matrix_to_euler(&self.rotation).unwrap_or_else(|g| g.resolved);
        Pose6::new(self.translation, r)
    }

    /// Maximum deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let d = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        d.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Ordered camera-to-world poses with optional timestamps (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Se3>,
    pub timestamps: Option<Vec<f64>>,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            poses: vec![Se3::identity()],
            timestamps: None,
        }
    }
}

impl Trajectory {
    pub fn new(poses: Vec<Se3>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Domain("trajectory needs at least one pose".into()));
        }
        Ok(Self {
            poses,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative path length at each pose.
    pub fn distances(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        d.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation - w[0].translation).norm();
            d.push(acc);
        }
        d
    }

    /// Left-multiplies every pose by `g`.
    pub fn transformed(&self, g: &Se3) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Chains relative frame-to-frame poses into absolute poses starting at
/// `start`: `pose[k+1] = pose[k] * rel[k]`.
pub fn integrate_relative(start: &Se3, rels: &[Pose6]) -> Trajectory {
    let mut poses = Vec::with_capacity(rels.len() + 1);
    poses.push(*start);
    let mut cur = *start;
    for rel in rels {
        cur = cur.compose(&rel.to_se3());
        poses.push(cur);
    }
    Trajectory {
        poses,
        timestamps: None,
    }
}

/// Averages from [`kitti_rel_errors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeErrors {
    /// Translation error in percent of segment length.
    pub t_rel: f64,
    /// Rotation error in degrees per 100 m.
    pub r_rel: f64,
    /// Number of (start, length) segments averaged.
    pub segments: usize,
}

fn last_frame_from_segment_length(dist: &[f64], first: usize, len: f64) -> Option<usize> {
    // The devkit uses a strict '>' here; '>=' only differs when a pose lands
    // exactly on the boundary.
    (first..dist.len()).find(|&i| dist[i] >= dist[first] + len)
}

/// KITTI odometry relative errors over subsequences of 100..800 m, starting
/// every [`KITTI_STEP`] frames.
pub fn kitti_rel_errors(gt: &Trajectory, pred: &Trajectory) -> Result<RelativeErrors> {
    if gt.len() != pred.len() || gt.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "trajectories must have equal length >= 2 (gt {}, pred {})",
            gt.len(),
            pred.len()
        )));
    }
    let dist = gt.distances();
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut n = 0usize;
    for first in (0..gt.len()).step_by(KITTI_STEP) {
        for &len in &KITTI_LENGTHS {
            let last = match last_frame_from_segment_length(&dist, first, len) {
                Some(l) => l,
                None => continue,
            };
            let delta_gt = gt.poses[first].inverse().compose(&gt.poses[last]);
            let delta_pred = pred.poses[first].inverse().compose(&pred.poses[last]);
            let err = delta_pred.inverse().compose(&delta_gt);
            t_sum += err.translation.norm() / len;
            r_sum += rotation_angle(&err.rotation) / len;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::TooShort);
    }
    let n_f = n as f64;
    Ok(RelativeErrors {
        t_rel: t_sum / n_f * 100.0,
        r_rel: (r_sum / n_f).to_degrees() * 100.0,
        segments: n,
    })
}

/// Per-frame RMSE of translation (meters) and rotation angle (degrees).
pub fn rmse_errors(gt: &[Pose6], pred: &[Pose6]) -> Result<(f64, f64)> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "pose lists must have equal non-zero length (gt {}, pred {})",
            gt.len(),
            pred.len()
        )));
    }
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        t_sq += (g.t - p.t).norm_squared();
        let rel = euler_to_matrix(&g.r).transpose() * euler_to_matrix(&p.r);
        r_sq += rotation_angle(&rel).to_degrees().powi(2);
    }
    let n = gt.len() as f64;
    Ok(((t_sq / n).sqrt(), (r_sq / n).sqrt()))
}
