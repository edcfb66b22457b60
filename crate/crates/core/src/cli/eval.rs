//! Comparing two calibrations: pose errors, optional similarity alignment,
//! and projected-point displacement histograms.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project_point, quat_to_rotmat, rotation_angle_between, world_to_camera, Camera, UnitQuaternion,
};
use crate::io::NamedCamera;
use crate::scene::GaussianScene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Distance between camera centers, scene units.
    pub translation: f64,
    /// Geodesic angle between orientations, degrees.
    pub rotation_deg: f64,
    /// Relative field-of-view error, percent.
    pub fov_x_pct: f64,
    pub fov_y_pct: f64,
}

pub fn pose_error(a: &Camera, b: &Camera) -> PoseError {
    PoseError {
        translation: (a.center() - b.center()).norm(),
        rotation_deg: rotation_angle_between(&a.rotation(), &b.rotation()).to_degrees(),
        fov_x_pct: 100.0 * (a.fov_x / b.fov_x - 1.0).abs(),
        fov_y_pct: 100.0 * (a.fov_y / b.fov_y - 1.0).abs(),
    }
}

/// Pairs cameras by image id; both lists must hold the same ids.
pub fn match_cameras<'a>(
    a: &'a [NamedCamera],
    b: &'a [NamedCamera],
) -> Result<Vec<(&'a NamedCamera, &'a NamedCamera)>> {
    let ids = |v: &[NamedCamera]| v.iter().map(|c| c.image_id).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(Error::CameraIdMismatch(format!(
            "{:?} vs {:?}",
            ids(a),
            ids(b)
        )));
    }
    Ok(a.iter().zip(b).collect())
}

/// `x ↦ s·R·x + t` between world frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    /// The same camera expressed in the target frame.
    pub fn apply_camera(&self, cam: &Camera) -> Camera {
        let rc = cam.rotation() * self.rotation.transpose();
        let mut out = cam.clone();
        out.t = self.scale * cam.t - rc * self.translation;
        out.q = UnitQuaternion::from_rotmat(&rc);
        out
    }
}

/// Least-squares similarity taking the centers of `a` onto those of `b`
/// (closed form via SVD of the cross-covariance). `None` when fewer than
/// three cameras or the centers are degenerate.
pub fn align_centers(a: &[Camera], b: &[Camera]) -> Option<Similarity> {
    if a.len() != b.len() || a.len() < 3 {
        return None;
    }
    let xs: Vec<Vector3<f64>> = a.iter().map(Camera::center).collect();
    let ys: Vec<Vector3<f64>> = b.iter().map(Camera::center).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<Vector3<f64>>() / n;
    let my = ys.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (y - my) * (x - mx).transpose();
        var += (x - mx).norm_squared();
    }
    cov /= n;
    var /= n;
    if !(var > 0.0) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let mut sv = svd.singular_values;
    // second-smallest singular value zero: centers are collinear
    sv.as_mut_slice().sort_by(|p, q| q.total_cmp(p));
    if !(sv[1] > 1e-12 * sv[0]) {
        return None;
    }
    let rotation = u * d * vt;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var;
    let translation = my - scale * rotation * mx;
    Some(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// ‖Δuv‖ in pixels of every gaussian center in front of both cameras and
/// inside the image of `b`.
pub fn displacements(scene: &GaussianScene, a: &Camera, b: &Camera) -> Vec<f64> {
    let (w, h) = (b.width as f64, b.height as f64);
    scene
        .gaussians
        .iter()
        .filter_map(|g| {
            let ub = project_point(&world_to_camera(&g.position, b), b).ok()?;
            if !(0.0..w).contains(&ub.x) || !(0.0..h).contains(&ub.y) {
                return None;
            }
            let ua = project_point(&world_to_camera(&g.position, a), a).ok()?;
            Some((ua - ub).norm())
        })
        .collect()
}

/// Counts per bin `[k·bin, (k+1)·bin)`; the last bin holds the maximum.
pub fn histogram(values: &[f64], bin: f64) -> Vec<usize> {
    let top = values.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut counts = vec![0; (top / bin).floor() as usize + 1];
    for v in values {
        counts[(v / bin).floor() as usize] += 1;
    }
    counts
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEval {
    pub image_id: u32,
    pub name: String,
    pub error: PoseError,
    /// Error after aligning the whole calibration to the reference.
    pub aligned_error: Option<PoseError>,
    pub psnr: Option<f64>,
    pub median_displacement_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub translation: f64,
    pub rotation_deg: f64,
    pub fov_x_pct: f64,
    pub fov_y_pct: f64,
}

impl ErrorSummary {
    pub fn median_of<'a>(errs: impl Iterator<Item = &'a PoseError> + Clone) -> ErrorSummary {
        let col = |f: fn(&PoseError) -> f64| median(&errs.clone().map(f).collect::<Vec<_>>());
        ErrorSummary {
            translation: col(|e| e.translation),
            rotation_deg: col(|e| e.rotation_deg),
            fov_x_pct: col(|e| e.fov_x_pct),
            fov_y_pct: col(|e| e.fov_y_pct),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cameras: Vec<CameraEval>,
    pub median: ErrorSummary,
    pub median_aligned: Option<ErrorSummary>,
    pub alignment: Option<Similarity>,
    pub median_psnr: Option<f64>,
    pub histogram_bin_px: f64,
    pub histogram: Vec<usize>,
}

impl EvalReport {
    /// `bin_start_px,bin_end_px,count`
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start_px,bin_end_px,count\n");
        for (k, c) in self.histogram.iter().enumerate() {
            let lo = k as f64 * self.histogram_bin_px;
            out += &format!("{lo},{},{c}\n", lo + self.histogram_bin_px);
        }
        out
    }
}

/// Compares `cams` against `reference`. With a scene, projected-center
/// displacements are histogrammed; `psnr` gives per-camera PSNR if known.
pub fn evaluate(
    cams: &[NamedCamera],
    reference: &[NamedCamera],
    scene: Option<&GaussianScene>,
    psnr: Option<&[f64]>,
    bin: f64,
) -> Result<EvalReport> {
    let pairs = match_cameras(cams, reference)?;
    let a: Vec<Camera> = cams.iter().map(|c| c.camera.clone()).collect();
    let b: Vec<Camera> = reference.iter().map(|c| c.camera.clone()).collect();
    let alignment = align_centers(&a, &b);
    let mut all = Vec::new();
    let mut out = Vec::new();
    for (k, (ca, cb)) in pairs.into_iter().enumerate() {
        let d = scene.map(|s| displacements(s, &ca.camera, &cb.camera));
        if let Some(d) = &d {
            all.extend_from_slice(d);
        }
        out.push(CameraEval {
            image_id: ca.image_id,
            name: ca.name.clone(),
            error: pose_error(&ca.camera, &cb.camera),
            aligned_error: alignment.map(|s| pose_error(&s.apply_camera(&ca.camera), &cb.camera)),
            psnr: psnr.map(|p| p[k]),
            median_displacement_px: d.map(|d| median(&d)),
        });
    }
    let median_aligned = alignment
        .map(|_| ErrorSummary::median_of(out.iter().filter_map(|c| c.aligned_error.as_ref())));
    Ok(EvalReport {
        median: ErrorSummary::median_of(out.iter().map(|c| &c.error)),
        median_aligned,
        alignment,
        median_psnr: psnr.map(median),
        histogram_bin_px: bin,
        histogram: if scene.is_some() {
            histogram(&all, bin)
        } else {
            Vec::new()
        },
        cameras: out,
    })
}

/// Rotation about the optical axis by `angle`, keeping the center fixed.
pub fn roll_camera(cam: &Camera, angle: f64) -> Camera {
    let dq = UnitQuaternion::from_axis_angle(&Vector3::z(), angle);
    let mut out = cam.clone();
    out.t = quat_to_rotmat(&dq) * cam.t;
    out.q = dq.mul(&cam.q);
    out
}
