//! Camera-parameter gradients of the photometric loss.
//!
//! The gradient flows only through the projected splat centers: each
//! splat's `dL/duv` from the reverse compositing pass is chained through
//! `duv/dp` for p in (t, q, fov), and the projected covariances are treated
//! as constants of the forward pass.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    focal_derivative, normalize_pullback, rotmat_partials, Camera, UnitQuaternion, Z_NEAR,
};
use crate::renderer::{
    self, backward_duv, loss, rasterize, Image, LossKind, RenderSettings, SplatList,
};
use crate::scene::GaussianScene;

/// `dL/dp` for the nine raw camera parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraGrad {
    pub d_t: Vector3<f64>,
    /// Gradient w.r.t. the raw (w, x, y, z) quaternion, before any
    /// renormalization.
    pub d_q: [f64; 4],
    pub d_fov: [f64; 2],
}

impl CameraGrad {
    pub fn zeros() -> Self {
        CameraGrad {
            d_t: Vector3::zeros(),
            d_q: [0.0; 4],
            d_fov: [0.0; 2],
        }
    }

    /// Layout `[tx, ty, tz, qw, qx, qy, qz, fov_x, fov_y]`.
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.d_t.x,
            self.d_t.y,
            self.d_t.z,
            self.d_q[0],
            self.d_q[1],
            self.d_q[2],
            self.d_q[3],
            self.d_fov[0],
            self.d_fov[1],
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        CameraGrad {
            d_t: Vector3::new(a[0], a[1], a[2]),
            d_q: [a[3], a[4], a[5], a[6]],
            d_fov: [a[7], a[8]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Raw camera parameters in the `CameraGrad` layout.
pub fn camera_params(camera: &Camera) -> [f64; 9] {
    [
        camera.t.x,
        camera.t.y,
        camera.t.z,
        camera.q.w,
        camera.q.x,
        camera.q.y,
        camera.q.z,
        camera.fov_x,
        camera.fov_y,
    ]
}

pub fn camera_from_params(template: &Camera, p: &[f64; 9]) -> Camera {
    Camera {
        t: Vector3::new(p[0], p[1], p[2]),
        q: UnitQuaternion::new(p[3], p[4], p[5], p[6]),
        fov_x: p[7],
        fov_y: p[8],
        ..template.clone()
    }
}

/// Chains per-splat `dL/duv` through the projection of each splat center.
/// `list` must have been produced for `camera`.
pub fn chain_uv_gradients(
    scene: &GaussianScene,
    camera: &Camera,
    list: &SplatList,
    d_uv: &[nalgebra::Vector2<f64>],
) -> CameraGrad {
    let (fx, fy) = camera.focal();
    let dfx = focal_derivative(camera.fov_x, camera.width as f64);
    let dfy = focal_derivative(camera.fov_y, camera.height as f64);
    let mut d_t = Vector3::zeros();
    // Σ_i (dL/dp_cam_i) ⊗ p_world_i, contracted with dR/dq afterwards
    let mut outer = Matrix3::zeros();
    let mut d_fov = [0.0; 2];
    for (s, g) in list.splats.iter().zip(d_uv) {
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        let p = &s.p_cam;
        let iz = 1.0 / p.z;
        let xz = p.x * iz;
        let yz = p.y * iz;
        let d_pcam = Vector3::new(
            g.x * fx * iz,
            g.y * fy * iz,
            -(g.x * fx * xz + g.y * fy * yz) * iz,
        );
        d_t += d_pcam;
        outer += d_pcam * scene.gaussians[s.index].position.transpose();
        d_fov[0] += g.x * xz * dfx;
        d_fov[1] += g.y * yz * dfy;
    }
    let q_unit = camera.q.normalize().unwrap_or(UnitQuaternion::IDENTITY);
    let parts = rotmat_partials(&q_unit);
    let mut g_unit = [0.0; 4];
    for k in 0..4 {
        g_unit[k] = parts[k].component_mul(&outer).sum();
    }
    CameraGrad {
        d_t,
        d_q: normalize_pullback(&camera.q, g_unit),
        d_fov,
    }
}

/// Camera gradient reusing an existing forward pass (`list`, `image`).
pub fn grad_camera_with_render(
    scene: &GaussianScene,
    camera: &Camera,
    list: &SplatList,
    image: &Image,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<CameraGrad> {
    if list.is_empty() {
        return Err(Error::EmptyFrustum);
    }
    let d_uv = backward_duv(list, image, target, kind, settings)?;
    Ok(chain_uv_gradients(scene, camera, list, &d_uv))
}

pub fn grad_camera(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<CameraGrad> {
    let (list, image) = renderer::render(scene, camera, settings);
    image.same_dims(target)?;
    grad_camera_with_render(scene, camera, &list, &image, target, kind, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    /// Re-render everything at each probe.
    Full,
    /// Re-project splat centers only; covariances, opacities, colors and
    /// the sort order stay at the nominal camera's values.
    FrozenCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSteps {
    pub t: f64,
    pub q: f64,
    pub fov: f64,
}

impl FdSteps {
    pub fn for_extent(extent: f64) -> Self {
        FdSteps {
            t: 1e-4 * extent,
            q: 1e-5,
            fov: 1e-5,
        }
    }

    fn step(&self, k: usize) -> f64 {
        match k {
            0..=2 => self.t,
            3..=6 => self.q,
            _ => self.fov,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        FdSteps {
            t: self.t * k,
            q: self.q * k,
            fov: self.fov * k,
        }
    }
}

/// Central differences of `f` over the nine camera parameters.
pub fn central_differences<F>(x: &[f64; 9], steps: &FdSteps, mut f: F) -> Result<[f64; 9]>
where
    F: FnMut(&[f64; 9]) -> Result<f64>,
{
    let mut out = [0.0; 9];
    for k in 0..9 {
        let h = steps.step(k);
        if !(h > 0.0) {
            return Err(Error::domain("finite-difference steps must be positive"));
        }
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += h;
        xm[k] -= h;
        out[k] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Ok(out)
}

/// Loss of a camera whose splats keep the nominal list's covariances,
/// opacities, colors and order; only the centers are re-projected.
fn frozen_cov_loss(
    scene: &GaussianScene,
    nominal: &SplatList,
    camera: &Camera,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<f64> {
    let rot = camera.rotation();
    let (fx, fy) = camera.focal();
    let mut list = nominal.clone();
    for s in &mut list.splats {
        let p = rot * scene.gaussians[s.index].position + camera.t;
        if p.z <= Z_NEAR {
            return Err(Error::BehindCamera { z: p.z });
        }
        s.p_cam = p;
        s.depth = p.z;
        s.uv.x = fx * p.x / p.z + camera.cx;
        s.uv.y = fy * p.y / p.z + camera.cy;
    }
    loss(&rasterize(&list, settings), target, kind)
}

pub fn finite_diff_grad(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    kind: LossKind,
    mode: FdMode,
    steps: &FdSteps,
    settings: &RenderSettings,
) -> Result<CameraGrad> {
    let nominal = renderer::cull_and_project(scene, camera, settings);
    if nominal.is_empty() {
        return Err(Error::EmptyFrustum);
    }
    let x = camera_params(camera);
    let g = central_differences(&x, steps, |p| {
        let cam = camera_from_params(camera, p);
        match mode {
            FdMode::Full => loss(&renderer::render_image(scene, &cam, settings), target, kind),
            FdMode::FrozenCov => frozen_cov_loss(scene, &nominal, &cam, target, kind, settings),
        }
    })?;
    Ok(CameraGrad::from_array(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::render_image;
    use crate::scene::{perturb_camera, synth_cameras, synth_scene, Gaussian, Layout, Rig};

    fn setup(seed: u64, n: usize) -> (GaussianScene, Camera, Image) {
        let scene = synth_scene(seed, n, Layout::Cloud).unwrap();
        let cam = synth_cameras(seed, 1, &scene, Rig::Orbit, 48, 40)
            .unwrap()
            .remove(0);
        let (pert, _) = perturb_camera(&cam, seed + 100, 0.02, 0.01, 0.01).unwrap();
        let target = render_image(&scene, &pert, &RenderSettings::default());
        (scene, cam, target)
    }

    #[test]
    fn zero_at_ground_truth() {
        let s = RenderSettings::default();
        for kind in [LossKind::L1, LossKind::L2] {
            let (scene, cam, _) = setup(3, 150);
            let target = render_image(&scene, &cam, &s);
            let g = grad_camera(&scene, &cam, &target, kind, &s).unwrap();
            assert!(g.max_abs() < 1e-10);
        }
    }

    #[test]
    fn matches_frozen_cov_differences() {
        let s = RenderSettings::default();
        let (scene, cam, target) = setup(5, 200);
        let g = grad_camera(&scene, &cam, &target, LossKind::L2, &s)
            .unwrap()
            .to_array();
        let fd = finite_diff_grad(
            &scene,
            &cam,
            &target,
            LossKind::L2,
            FdMode::FrozenCov,
            &FdSteps::for_extent(scene.extent),
            &s,
        )
        .unwrap()
        .to_array();
        let gmax = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..9 {
            if g[k].abs().max(fd[k].abs()) < 1e-8 * gmax {
                continue;
            }
            let rel = (g[k] - fd[k]).abs() / fd[k].abs().max(g[k].abs());
            assert!(rel < 1e-3, "component {k}: {} vs {} ({rel})", g[k], fd[k]);
        }
    }

    #[test]
    fn quadratic_stub_differences() {
        let a: [f64; 9] = [1.0, -2.0, 0.5, 3.0, 0.1, -0.7, 2.2, 4.0, -1.5];
        let x: [f64; 9] = [0.3, 0.1, -0.2, 0.9, 0.05, 0.02, -0.01, 0.8, 0.7];
        let steps = FdSteps {
            t: 1e-3,
            q: 1e-3,
            fov: 1e-3,
        };
        let g = central_differences(&x, &steps, |p| {
            Ok(p.iter().zip(&a).map(|(v, c)| c * v * v).sum())
        })
        .unwrap();
        for k in 0..9 {
            assert!((g[k] - 2.0 * a[k] * x[k]).abs() < 1e-9);
        }
        assert!(central_differences(
            &x,
            &FdSteps {
                t: 0.0,
                q: 1.0,
                fov: 1.0
            },
            |_| Ok(0.0)
        )
        .is_err());
    }

    /// A few wide, overlapping splats: no cutoff or early stop is reached,
    /// so the loss is smooth in the camera.
    fn smooth_setup() -> (GaussianScene, Camera, Image) {
        let g = |x: f64, y: f64, z: f64, c: [f64; 3]| Gaussian {
            position: Vector3::new(x, y, z),
            scale: Vector3::new(0.9, 0.7, 0.8),
            rotation: crate::geometry::UnitQuaternion::new(0.9, 0.1, -0.2, 0.3),
            opacity: 0.35,
            color: c,
        };
        let scene = GaussianScene::new(vec![
            g(-0.3, 0.1, 0.0, [0.9, 0.2, 0.1]),
            g(0.4, -0.2, 0.3, [0.1, 0.8, 0.3]),
            g(0.0, 0.3, -0.4, [0.2, 0.3, 0.9]),
        ]);
        let cam = Camera::look_at(
            Vector3::new(0.2, -0.1, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            0.5,
            32,
            24,
        )
        .unwrap();
        let (pert, _) = perturb_camera(&cam, 9, 0.05, 0.02, 0.02).unwrap();
        let target = render_image(&scene, &pert, &RenderSettings::default());
        (scene, cam, target)
    }

    #[test]
    fn difference_error_shrinks_fourfold_per_halving() {
        let s = RenderSettings::default();
        let (scene, cam, target) = smooth_setup();
        let g = grad_camera(&scene, &cam, &target, LossKind::L2, &s)
            .unwrap()
            .to_array();
        let steps = FdSteps {
            t: 0.02,
            q: 2e-3,
            fov: 2e-3,
        };
        let err = |k: f64| {
            let fd = finite_diff_grad(
                &scene,
                &cam,
                &target,
                LossKind::L2,
                FdMode::FrozenCov,
                &steps.scaled(k),
                &s,
            )
            .unwrap()
            .to_array();
            let mut e = [0.0; 9];
            for i in 0..9 {
                e[i] = (fd[i] - g[i]).abs();
            }
            e
        };
        let (e1, e2) = (err(1.0), err(0.5));
        let mut checked = 0;
        for i in 0..9 {
            if e1[i] < 1e-9 * g[i].abs().max(1e-3) {
                continue;
            }
            let r = e1[i] / e2[i];
            assert!(
                (3.5..4.5).contains(&r),
                "component {i}: ratio {r} ({} -> {})",
                e1[i],
                e2[i]
            );
            checked += 1;
        }
        assert!(checked >= 6, "only {checked} components above roundoff");
    }

    #[test]
    fn small_step_never_increases_loss() {
        let s = RenderSettings::default();
        for seed in 0..50u64 {
            let (scene, cam, target) = setup(1000 + seed, 80);
            let base = loss(&render_image(&scene, &cam, &s), &target, LossKind::L2).unwrap();
            let g = grad_camera(&scene, &cam, &target, LossKind::L2, &s)
                .unwrap()
                .to_array();
            let x = camera_params(&cam);
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut lr = 1e-2 / gmax;
            let mut found = false;
            for _ in 0..40 {
                let mut p = x;
                for k in 0..9 {
                    p[k] -= lr * g[k];
                }
                let l = loss(
                    &render_image(&scene, &camera_from_params(&cam, &p), &s),
                    &target,
                    LossKind::L2,
                )
                .unwrap();
                if l <= base {
                    found = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(found, "seed {seed}: no descent step found");
        }
    }

    #[test]
    fn full_and_frozen_cov_agree_for_small_splats() {
        let s = RenderSettings::default();
        let (mut scene, cam, target) = setup(21, 200);
        let rot = cam.rotation();
        for g in &mut scene.gaussians {
            g.scale = Vector3::repeat(5e-4 * (rot * g.position + cam.t).z.abs());
            g.opacity = 0.9;
        }
        let steps = FdSteps::for_extent(scene.extent);
        let fd = |mode| {
            finite_diff_grad(&scene, &cam, &target, LossKind::L2, mode, &steps, &s)
                .unwrap()
                .to_array()
        };
        let (full, frozen) = (fd(FdMode::Full), fd(FdMode::FrozenCov));
        let gmax = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..9 {
            let rel = (full[k] - frozen[k]).abs() / gmax;
            assert!(
                rel < 0.05,
                "component {k}: {} vs {} ({rel})",
                full[k],
                frozen[k]
            );
        }
    }

    #[test]
    fn empty_frustum() {
        let (scene, mut cam, target) = setup(1, 20);
        cam.t.z -= 100.0;
        let s = RenderSettings::default();
        assert!(matches!(
            grad_camera(&scene, &cam, &target, LossKind::L2, &s),
            Err(Error::EmptyFrustum)
        ));
    }
}
