//! Pose and intrinsics math.
//!
//! Conventions: poses are world-to-camera (`p_cam = R·p_world + t`), the
//! camera looks down +z with x right and y down, and pixel centers sit at
//! half-integer coordinates so that `cx = width / 2` is the image center.
//! Fields of view are full angles: `f = size / (2·tan(fov / 2))`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussians whose camera-space depth is at or below this are culled.
pub const Z_NEAR: f64 = 0.01;

/// Low-pass floor added to the diagonal of projected covariances, px².
pub const DEFAULT_LOWPASS: f64 = 0.3;

/// Range fields of view are clamped to after an optimizer update.
pub const FOV_MIN: f64 = 1e-3;
pub const FOV_MAX: f64 = std::f64::consts::PI - 1e-3;

/// Quaternion stored as (w, x, y, z), the COLMAP order.
///
/// The struct tolerates non-unit values (the optimizer steps in raw
/// quaternion space); every consumer normalizes before building a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        UnitQuaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        UnitQuaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n >= 1e-9) || !n.is_finite() {
            return Err(Error::ZeroQuaternion);
        }
        Ok(UnitQuaternion::new(
            self.w / n,
            self.x / n,
            self.y / n,
            self.z / n,
        ))
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return UnitQuaternion::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        UnitQuaternion::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Hamilton product `self ∘ rhs`; the rotation of the product is
    /// `R(self)·R(rhs)`.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let (a, b) = (self, rhs);
        UnitQuaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Shepperd's method. The result has w ≥ 0.
    pub fn from_rotmat(r: &Matrix3<f64>) -> Self {
        let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            UnitQuaternion::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            UnitQuaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            UnitQuaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            UnitQuaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = q.normalize().unwrap_or(UnitQuaternion::IDENTITY);
        if q.w < 0.0 {
            UnitQuaternion::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        UnitQuaternion::IDENTITY
    }
}

/// Rotation matrix of a quaternion. Non-unit inputs are normalized first;
/// a zero quaternion maps to the identity (parsers reject it upstream).
pub fn quat_to_rotmat(q: &UnitQuaternion) -> Matrix3<f64> {
    let q = q.normalize().unwrap_or(UnitQuaternion::IDENTITY);
    unit_rotmat(&q)
}

fn unit_rotmat(q: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the unit-quaternion rotation formula with respect
/// to (w, x, y, z), evaluated at `q` (assumed unit).
pub fn rotmat_partials(q: &UnitQuaternion) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        Matrix3::new(
            0.0,
            -2.0 * z,
            2.0 * y, //
            2.0 * z,
            0.0,
            -2.0 * x, //
            -2.0 * y,
            2.0 * x,
            0.0,
        ),
        Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z, //
            2.0 * y,
            -4.0 * x,
            -2.0 * w, //
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w, //
            2.0 * x,
            0.0,
            2.0 * z, //
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x, //
            2.0 * w,
            -4.0 * z,
            2.0 * y, //
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ]
}

/// Pulls a gradient taken with respect to the normalized quaternion back to
/// the raw (unnormalized) quaternion: `(I − q̂q̂ᵀ)·g / ‖q‖`.
pub fn normalize_pullback(q: &UnitQuaternion, g_unit: [f64; 4]) -> [f64; 4] {
    let n = q.norm();
    let qh = [q.w / n, q.x / n, q.y / n, q.z / n];
    let dot: f64 = qh.iter().zip(&g_unit).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (g_unit[k] - qh[k] * dot) / n;
    }
    out
}

/// World-to-camera pose plus pinhole intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub t: Vector3<f64>,
    pub q: UnitQuaternion,
    pub fov_x: f64,
    pub fov_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at `eye` whose optical axis passes through `target`. The image
    /// y axis follows `down` projected onto the image plane.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        down: Vector3<f64>,
        fov_x: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at: eye coincides with target"))?;
        let right = down
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at: down vector parallel to view direction"))?;
        let cam_down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), cam_down.transpose(), forward.transpose()]);
        let q = UnitQuaternion::from_rotmat(&r);
        let rot = quat_to_rotmat(&q);
        let fov_y = 2.0 * ((0.5 * fov_x).tan() * height as f64 / width as f64).atan();
        let cam = Camera {
            t: -(rot * eye),
            q,
            fov_x,
            fov_y,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotmat(&self.q)
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.t)
    }

    pub fn focal(&self) -> (f64, f64) {
        (
            focal_unchecked(self.fov_x, self.width as f64),
            focal_unchecked(self.fov_y, self.height as f64),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fov_ok = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        if !fov_ok(self.fov_x) || !fov_ok(self.fov_y) {
            return Err(Error::domain(format!(
                "fields of view must lie in (0, π), got ({}, {})",
                self.fov_x, self.fov_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be at least 1×1"));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(Error::domain("principal point outside the image"));
        }
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite translation"));
        }
        if self.q.norm() < 1e-9 {
            return Err(Error::ZeroQuaternion);
        }
        Ok(())
    }
}

fn focal_unchecked(fov: f64, size: f64) -> f64 {
    size / (2.0 * (0.5 * fov).tan())
}

pub fn fov_to_focal(fov: f64, size: f64) -> Result<f64> {
    if !(fov > 0.0 && fov < std::f64::consts::PI) {
        return Err(Error::domain(format!("field of view {fov} outside (0, π)")));
    }
    Ok(focal_unchecked(fov, size))
}

pub fn focal_to_fov(focal: f64, size: f64) -> f64 {
    2.0 * (size / (2.0 * focal)).atan()
}

/// `d f / d fov` for `f = size / (2 tan(fov/2))`.
pub fn focal_derivative(fov: f64, size: f64) -> f64 {
    let s = (0.5 * fov).sin();
    -size / (4.0 * s * s)
}

pub fn world_to_camera(p_world: &Vector3<f64>, camera: &Camera) -> Vector3<f64> {
    camera.rotation() * p_world + camera.t
}

pub fn camera_to_world(p_cam: &Vector3<f64>, camera: &Camera) -> Vector3<f64> {
    camera.rotation().transpose() * (p_cam - camera.t)
}

pub fn project_point(p_cam: &Vector3<f64>, camera: &Camera) -> Result<Vector2<f64>> {
    let (fx, fy) = camera.focal();
    project_with(p_cam, fx, fy, camera.cx, camera.cy)
}

pub(crate) fn project_with(
    p: &Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
) -> Result<Vector2<f64>> {
    if p.z <= Z_NEAR {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Vector2::new(fx * p.x / p.z + cx, fy * p.y / p.z + cy))
}

/// Jacobian of the pinhole projection at `p` (2×3).
pub fn projection_jacobian(p: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2)
}

/// Symmetric 3×3 covariance of a gaussian, scene units².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// `Σ = R·diag(scale²)·Rᵀ`.
pub fn build_covariance(scale: &Vector3<f64>, rot: &UnitQuaternion) -> Result<Covariance3> {
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::domain(format!(
            "scales must be positive, got {scale:?}"
        )));
    }
    let m = quat_to_rotmat(rot) * Matrix3::from_diagonal(scale);
    let sigma = m * m.transpose();
    Ok(Covariance3(0.5 * (sigma + sigma.transpose())))
}

/// Local-affine projection of a 3D covariance into the image:
/// `J·R·Σ·Rᵀ·Jᵀ + λ_lp·I` with the default low-pass floor.
pub fn project_covariance(
    cov3: &Covariance3,
    camera: &Camera,
    p_cam: &Vector3<f64>,
) -> Result<Matrix2<f64>> {
    project_covariance_with(cov3, camera, p_cam, DEFAULT_LOWPASS)
}

pub fn project_covariance_with(
    cov3: &Covariance3,
    camera: &Camera,
    p_cam: &Vector3<f64>,
    lowpass: f64,
) -> Result<Matrix2<f64>> {
    if p_cam.z <= Z_NEAR {
        return Err(Error::BehindCamera { z: p_cam.z });
    }
    let (fx, fy) = camera.focal();
    Ok(project_cov_raw(
        cov3.matrix(),
        &camera.rotation(),
        p_cam,
        fx,
        fy,
        lowpass,
    ))
}

pub(crate) fn project_cov_raw(
    cov: &Matrix3<f64>,
    rot: &Matrix3<f64>,
    p_cam: &Vector3<f64>,
    fx: f64,
    fy: f64,
    lowpass: f64,
) -> Matrix2<f64> {
    let t = projection_jacobian(p_cam, fx, fy) * rot;
    let s = t * cov * t.transpose();
    let s = 0.5 * (s + s.transpose());
    s + Matrix2::identity() * lowpass
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a * b.transpose();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; recover the angle from the skew part
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    (0.5 * skew.norm()).atan2(c)
}
