//! Rigid-body poses, the pinhole camera model, rough-pose perturbation and
//! pose-error metrics.
//!
//! Conventions used throughout the workspace:
//!
//! * quaternions are stored and exchanged as `(w, x, y, z)` (Hamilton
//!   product) with canonical sign `w >= 0`;
//! * a [`Pose`] is camera-to-world: `transform_point` maps camera-frame
//!   coordinates into the world, [`Pose::apply`] does the reverse;
//! * the camera frame looks along `+z`, with `+x` right and `+y` down.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MIN_QUAT_NORM: f64 = 1e-12;

/// Normalizes `q = (w, x, y, z)` to unit length and canonical sign.
pub fn quat_normalize(q: [f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > MIN_QUAT_NORM) || !norm.is_finite() {
        return Err(Error::DegenerateQuaternion(norm));
    }
    Ok(canonical_sign(q.map(|v| v / norm)))
}

fn canonical_sign(q: [f64; 4]) -> [f64; 4] {
    let leading = q.iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
    if leading < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = canonical_sign([q.w, q.i, q.j, q.k]);
    UnitQuaternion::new_unchecked(Quaternion::new(c[0], c[1], c[2], c[3]))
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    t: Vector3<f64>,
    q: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            t: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a translation and a (not necessarily unit)
    /// quaternion `(w, x, y, z)`.
    pub fn new(t: Vector3<f64>, q_wxyz: [f64; 4]) -> Result<Self> {
        let q = quat_normalize(q_wxyz)?;
        Ok(Self {
            t,
            q: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
        })
    }

    pub fn from_parts(t: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        let q = UnitQuaternion::new_normalize(*q.quaternion());
        Self { t, q: canonical(q) }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            t,
            q: UnitQuaternion::identity(),
        }
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            t: self.t + self.q * other.t,
            q: canonical(renormalize(self.q * other.q)),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose {
            t: -(qi * self.t),
            q: canonical(qi),
        }
    }

    /// World point to camera frame (the inverse of this pose acting on `x`).
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.q.inverse_transform_vector(&(x - self.t))
    }

    /// Camera-frame point to world frame.
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.q * x + self.t
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = self.q.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Camera pose at `position` looking along the horizontal heading `yaw`
    /// (radians, counter-clockwise from world `+x`) in a z-up world.
    pub fn looking_along(position: Vector3<f64>, yaw: f64) -> Pose {
        let (s, c) = yaw.sin_cos();
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let forward = Vector3::new(c, s, 0.0);
        let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Pose::from_parts(position, UnitQuaternion::from_rotation_matrix(&rot))
    }
}

// Leaves quaternions that are unit to machine precision untouched so that
// composing with the identity is exact.
fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let n = q.norm();
    if (n - 1.0).abs() <= 2.0 * f64::EPSILON {
        q
    } else {
        UnitQuaternion::new_normalize(q.into_inner())
    }
}

/// Pinhole intrinsics for an image of `width × height` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center and
    /// the given horizontal field of view.
    pub fn from_hfov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }
}

/// Bounds of the uniform rough-pose noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Per-axis translation bound in meters.
    pub max_trans: f64,
    /// Per-Euler-axis rotation bound in degrees.
    pub max_rot_deg: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            max_trans: 0.60,
            max_rot_deg: 0.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_trans >= 0.0 && self.max_rot_deg >= 0.0 {
            Ok(())
        } else {
            Err(Error::Manifest(format!("negative perturbation bound: {self:?}")))
        }
    }
}

/// Draws a rough pose around `gt`. The translation offset is added in world
/// axes, the rotation offset is applied in the camera frame. Draws are keyed
/// by `(spec.seed, draw_index)` so any draw can be regenerated on its own.
pub fn perturb_pose(gt: &Pose, spec: &PerturbationSpec, draw_index: u64) -> Pose {
    if spec.max_trans == 0.0 && spec.max_rot_deg == 0.0 {
        return *gt;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(draw_index);
    let mut unit = [0.0f64; 6];
    for v in unit.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    let offset = Vector3::new(unit[0], unit[1], unit[2]) * spec.max_trans;
    let t = gt.t + offset;
    if spec.max_rot_deg == 0.0 {
        return Pose { t, q: gt.q };
    }
    let r = spec.max_rot_deg.to_radians();
    let delta = UnitQuaternion::from_euler_angles(unit[3] * r, unit[4] * r, unit[5] * r);
    Pose::from_parts(t, gt.q * delta)
}

/// Euclidean position error in centimeters.
pub fn translation_error_cm(est: &Pose, gt: &Pose) -> f64 {
    100.0 * (est.t - gt.t).norm()
}

/// Geodesic rotation error in degrees, in `[0, 180]`.
pub fn rotation_error_deg(est: &Pose, gt: &Pose) -> f64 {
    // 2·acos(|<q1, q2>|), evaluated through atan2 for accuracy near zero
    let rel = est.q.inverse() * gt.q;
    2.0 * rel.vector().norm().atan2(rel.w.abs()).to_degrees()
}

/// `%g`-style formatting with nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_fraction(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (8 - exp) as usize;
    trim_fraction(&format!("{v:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Header of the pose CSV files.
pub const POSE_CSV_HEADER: &str = "frame_id,tx,ty,tz,qw,qx,qy,qz";

/// `frame_id,tx,ty,tz,qw,qx,qy,qz` with nine significant digits.
pub fn format_pose_line(frame_id: u64, pose: &Pose) -> String {
    let q = pose.quat_wxyz();
    let t = pose.translation();
    let fields: Vec<String> = [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
        .iter()
        .map(|v| format_sig9(*v))
        .collect();
    format!("{frame_id},{}", fields.join(","))
}

/// Parses one pose CSV data row; `line` is the 1-based line number used in
/// error messages.
pub fn parse_pose_line(text: &str, line: usize) -> Result<(u64, Pose)> {
    let err = |reason: String| Error::PoseRow { line, reason };
    let fields: Vec<&str> = text.trim().split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(err(format!("expected 8 fields, found {}", fields.len())));
    }
    let id: u64 = fields[0]
        .parse()
        .map_err(|_| err(format!("bad frame id {:?}", fields[0])))?;
    let mut v = [0.0f64; 7];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
        if !slot.is_finite() {
            return Err(err(format!("non-finite value {f:?}")));
        }
    }
    let pose = Pose::new(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]])
        .map_err(|e| err(e.to_string()))?;
    Ok((id, pose))
}
