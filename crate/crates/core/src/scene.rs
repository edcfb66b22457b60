//! Gaussian scene container and synthetic fixtures.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotmat, Camera, UnitQuaternion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::domain(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::domain("gaussian scale must be positive"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("gaussian color outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    /// Radius of the bounding sphere of the positions about their centroid.
    pub extent: f64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let extent = compute_extent(&gaussians);
        GaussianScene { gaussians, extent }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.gaussians)
    }

    pub fn refresh_extent(&mut self) {
        self.extent = compute_extent(&self.gaussians);
    }
}

fn centroid(gs: &[Gaussian]) -> Vector3<f64> {
    if gs.is_empty() {
        return Vector3::zeros();
    }
    gs.iter().map(|g| g.position).sum::<Vector3<f64>>() / gs.len() as f64
}

/// Max distance from the centroid. A scene whose positions all coincide has
/// no spatial spread; it gets extent 1 so scene-relative step sizes stay
/// usable.
fn compute_extent(gs: &[Gaussian]) -> f64 {
    let c = centroid(gs);
    let r = gs
        .iter()
        .map(|g| (g.position - c).norm())
        .fold(0.0, f64::max);
    if r < 1e-9 {
        1.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Cloud,
    Grid,
    TexturedWall,
    /// A textured wall behind a gaussian cloud, half of the budget each.
    WallAndCloud,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloud" => Ok(Layout::Cloud),
            "grid" => Ok(Layout::Grid),
            "textured_wall" => Ok(Layout::TexturedWall),
            "wall_and_cloud" | "textured_wall+cloud" => Ok(Layout::WallAndCloud),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion {
    let axis = random_unit_vector(rng);
    UnitQuaternion::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::PI))
}

fn random_scale(rng: &mut ChaCha8Rng, base: f64) -> Vector3<f64> {
    // ratio between axes stays ≤ e^1.2 ≈ 3.3
    Vector3::new(
        base * rng.gen_range(-0.6f64..0.6).exp(),
        base * rng.gen_range(-0.6f64..0.6).exp(),
        base * rng.gen_range(-0.6f64..0.6).exp(),
    )
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Deterministic synthetic scene of `n` gaussians, recentered at the origin
/// and scaled to extent 1.
pub fn synth_scene(seed: u64, n: usize, layout: Layout) -> Result<GaussianScene> {
    if n == 0 {
        return Err(Error::domain("synth_scene needs at least one gaussian"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = match layout {
        Layout::Cloud => cloud(&mut rng, n),
        Layout::Grid => grid(&mut rng, n),
        Layout::TexturedWall => wall(&mut rng, n),
        Layout::WallAndCloud => {
            let n_wall = n / 2;
            let mut gs = cloud(&mut rng, n - n_wall);
            let mut w = wall(&mut rng, n_wall);
            for g in &mut w {
                g.position *= 1.4;
                g.scale *= 1.4;
                g.position.z += 1.1;
            }
            gs.extend(w);
            gs
        }
    };
    Ok(normalize(gaussians))
}

fn normalize(mut gs: Vec<Gaussian>) -> GaussianScene {
    let c = centroid(&gs);
    let r = gs
        .iter()
        .map(|g| (g.position - c).norm())
        .fold(0.0, f64::max);
    let k = if r < 1e-9 { 1.0 } else { 1.0 / r };
    for g in &mut gs {
        g.position = (g.position - c) * k;
        g.scale *= k;
    }
    GaussianScene::new(gs)
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian> {
    let base = 0.3 * (4.19 / n as f64).cbrt();
    (0..n)
        .map(|_| {
            let position = loop {
                let p = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if p.norm() <= 1.0 {
                    break p;
                }
            };
            Gaussian {
                position,
                scale: random_scale(rng, base),
                rotation: random_rotation(rng),
                opacity: rng.gen_range(0.3..=1.0),
                color: random_color(rng),
            }
        })
        .collect()
}

fn grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian> {
    let k = (n as f64).cbrt().ceil().max(1.0) as usize;
    let spacing = if k > 1 { 2.0 / (k - 1) as f64 } else { 1.0 };
    let base = 0.25 * spacing;
    let coord = |i: usize| {
        if k > 1 {
            -1.0 + spacing * i as f64
        } else {
            0.0
        }
    };
    (0..n)
        .map(|idx| {
            let (i, j, l) = (idx % k, (idx / k) % k, idx / (k * k));
            Gaussian {
                position: Vector3::new(coord(i), coord(j), coord(l)),
                scale: Vector3::repeat(base),
                rotation: UnitQuaternion::IDENTITY,
                opacity: 1.0,
                color: random_color(rng),
            }
        })
        .collect()
}

/// Flattened gaussians on the z = 0 plane with slight relief and a
/// high-frequency color pattern.
fn wall(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian> {
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let side = (n as f64).sqrt().ceil();
    let base = 0.6 * (2.0 * half) / side;
    let phase: [f64; 3] = [
        rng.gen_range(0.0..6.3),
        rng.gen_range(0.0..6.3),
        rng.gen_range(0.0..6.3),
    ];
    (0..n)
        .map(|_| {
            let x = rng.gen_range(-half..half);
            let y = rng.gen_range(-half..half);
            let z = rng.gen_range(-0.04..0.04);
            let mut color = [0.0; 3];
            for (c, ph) in color.iter_mut().zip(&phase) {
                let pattern = (11.0 * x + ph).sin() * (13.0 * y - ph).cos();
                let jitter: f64 = rng.gen_range(-0.15..0.15);
                *c = (0.5 + 0.4 * pattern + jitter).clamp(0.0, 1.0);
            }
            let tilt = UnitQuaternion::from_axis_angle(
                &Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0),
                rng.gen_range(0.0..0.3),
            );
            let s = base * rng.gen_range(0.7..1.3);
            Gaussian {
                position: Vector3::new(x, y, z),
                scale: Vector3::new(s, s * rng.gen_range(0.7..1.3), s / 5.0),
                rotation: tilt,
                opacity: rng.gen_range(0.6..=1.0),
                color,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rig {
    /// Full circle around the vertical axis through the centroid.
    Orbit,
    /// ±50° arc in front of the scene (looking down +z), alternating ±10°
    /// elevation.
    Arc,
}

impl std::str::FromStr for Rig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Rig::Orbit),
            "arc" => Ok(Rig::Arc),
            other => Err(Error::Config(format!("unknown rig `{other}`"))),
        }
    }
}

/// Field of view (radians) that frames a sphere of `radius` seen from
/// `distance` along the smaller image axis, with a 15% margin.
fn framing_fov(radius: f64, distance: f64, width: u32, height: u32) -> f64 {
    let cover = (2.0 * (radius / distance).min(1.0).asin() * 1.15).min(3.0);
    if width >= height {
        2.0 * ((0.5 * cover).tan() * width as f64 / height as f64).atan()
    } else {
        cover
    }
}

/// Cameras looking at the scene centroid from `[2.5, 3.5]·extent`.
pub fn synth_cameras(
    seed: u64,
    k: usize,
    scene: &GaussianScene,
    rig: Rig,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca4e);
    let center = scene.centroid();
    let extent = scene.extent;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..k)
        .map(|j| {
            let dist = extent * rng.gen_range(2.5..3.5);
            let (azimuth, elevation) = match rig {
                Rig::Orbit => (phase + std::f64::consts::TAU * j as f64 / k as f64, 0.0),
                Rig::Arc => {
                    let span = 100f64.to_radians();
                    let a = if k > 1 {
                        -0.5 * span + span * j as f64 / (k - 1) as f64
                    } else {
                        0.0
                    };
                    let e = if j % 2 == 0 { 10f64 } else { -10f64 };
                    (a, e.to_radians())
                }
            };
            let dir = Vector3::new(
                azimuth.sin() * elevation.cos(),
                elevation.sin(),
                -azimuth.cos() * elevation.cos(),
            );
            let eye = center + dir * dist;
            let fov_x = framing_fov(extent, dist, width, height);
            Camera::look_at(eye, center, Vector3::y(), fov_x, width, height)
        })
        .collect()
}

/// A single camera 3·extent in front of the centroid (looking down +z).
pub fn default_camera(scene: &GaussianScene, width: u32, height: u32) -> Result<Camera> {
    let dist = 3.0 * scene.extent;
    let center = scene.centroid();
    Camera::look_at(
        center - Vector3::z() * dist,
        center,
        Vector3::y(),
        framing_fov(scene.extent, dist, width, height),
        width,
        height,
    )
}

/// Record of one applied perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Offset of the camera center, scene units.
    pub center_offset: [f64; 3],
    pub rotation_axis: [f64; 3],
    pub rotation_angle: f64,
    /// Multiplier applied to both fields of view.
    pub fov_factor: f64,
}

/// Mis-calibrates a camera: the center moves by a uniform sample of the ball
/// of radius `dt`, the orientation rotates about the center by a uniform
/// axis and an angle uniform in `[0, dtheta]`, and both fields of view scale
/// by `1 + u` with `u` uniform in `[−dfov, dfov]`.
pub fn perturb_camera(
    camera: &Camera,
    seed: u64,
    dt: f64,
    dtheta: f64,
    dfov: f64,
) -> Result<(Camera, Perturbation)> {
    if dt < 0.0 || dtheta < 0.0 || dfov < 0.0 {
        return Err(Error::domain(
            "perturbation magnitudes must be non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_unit_vector(&mut rng);
    let radius = dt * rng.gen::<f64>().cbrt();
    let axis = random_unit_vector(&mut rng);
    let angle = dtheta * rng.gen::<f64>();
    let u = if dfov > 0.0 {
        rng.gen_range(-dfov..=dfov)
    } else {
        0.0
    };

    let mut out = camera.clone();
    let offset = if radius > 0.0 {
        dir * radius
    } else {
        Vector3::zeros()
    };
    if radius > 0.0 {
        out.t = camera.t - camera.rotation() * offset;
    }
    if angle > 0.0 {
        let dq = UnitQuaternion::from_axis_angle(&axis, angle);
        out.t = quat_to_rotmat(&dq) * out.t;
        out.q = dq.mul(&camera.q).normalize()?;
    }
    if u != 0.0 {
        out.fov_x = camera.fov_x * (1.0 + u);
        out.fov_y = camera.fov_y * (1.0 + u);
    }
    out.validate()?;
    Ok((
        out,
        Perturbation {
            center_offset: offset.into(),
            rotation_axis: axis.into(),
            rotation_angle: angle,
            fov_factor: 1.0 + u,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle_between, world_to_camera};

    #[test]
    fn single_grid_gaussian() {
        let s = synth_scene(1, 1, Layout::Grid).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.gaussians[0].position, Vector3::zeros());
        assert_eq!(s.gaussians[0].opacity, 1.0);
    }

    #[test]
    fn zero_gaussians_rejected() {
        assert!(synth_scene(1, 0, Layout::Cloud).is_err());
    }

    #[test]
    fn deterministic_and_normalized() {
        for layout in [
            Layout::Cloud,
            Layout::Grid,
            Layout::TexturedWall,
            Layout::WallAndCloud,
        ] {
            let a = synth_scene(4, 300, layout).unwrap();
            let b = synth_scene(4, 300, layout).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
            assert!((a.extent - 1.0).abs() < 1e-9, "{layout:?} {}", a.extent);
            assert!(a.centroid().norm() < 1e-9);
            for g in &a.gaussians {
                g.validate().unwrap();
                assert!((0.3..=1.0).contains(&g.opacity));
                let smax = g.scale.max();
                let smin = g.scale.min();
                assert!(smax / smin <= 10.0);
            }
        }
    }

    #[test]
    fn orbit_separation_and_aim() {
        let scene = synth_scene(2, 200, Layout::Cloud).unwrap();
        let cams = synth_cameras(5, 8, &scene, Rig::Orbit, 64, 64).unwrap();
        let c = scene.centroid();
        for cam in &cams {
            let p = world_to_camera(&c, cam);
            assert!((p.x / p.z).atan().abs() < 1e-6 && (p.y / p.z).atan().abs() < 1e-6);
            let d = (cam.center() - c).norm();
            assert!((2.0..=4.0).contains(&d));
        }
        for j in 0..8 {
            let a = (cams[j].center() - c).normalize();
            let b = (cams[(j + 1) % 8].center() - c).normalize();
            let ang = a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((ang - 45.0).abs() < 1e-6, "{ang}");
        }
        let one = synth_cameras(5, 1, &scene, Rig::Orbit, 64, 64).unwrap();
        let p = world_to_camera(&c, &one[0]);
        assert!((p.x.hypot(p.y) / p.z).atan() < 1e-6);
    }

    #[test]
    fn cameras_see_most_centers() {
        for (layout, rig) in [
            (Layout::Cloud, Rig::Orbit),
            (Layout::TexturedWall, Rig::Arc),
            (Layout::WallAndCloud, Rig::Arc),
        ] {
            let scene = synth_scene(9, 400, layout).unwrap();
            for cam in synth_cameras(9, 12, &scene, rig, 96, 64).unwrap() {
                let (fx, fy) = cam.focal();
                let inside = scene
                    .gaussians
                    .iter()
                    .filter(|g| {
                        let p = world_to_camera(&g.position, &cam);
                        if p.z <= 0.01 {
                            return false;
                        }
                        let u = fx * p.x / p.z + cam.cx;
                        let v = fy * p.y / p.z + cam.cy;
                        (0.0..=cam.width as f64).contains(&u)
                            && (0.0..=cam.height as f64).contains(&v)
                    })
                    .count();
                assert!(
                    inside as f64 >= 0.9 * scene.len() as f64,
                    "{layout:?}: {inside}"
                );
            }
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let scene = synth_scene(2, 50, Layout::Cloud).unwrap();
        let cam = default_camera(&scene, 32, 32).unwrap();
        let (p, rec) = perturb_camera(&cam, 77, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(p, cam);
        assert_eq!(rec.fov_factor, 1.0);
    }

    #[test]
    fn translation_only_perturbation() {
        let scene = synth_scene(2, 50, Layout::Cloud).unwrap();
        let cam = default_camera(&scene, 32, 32).unwrap();
        let (p, rec) = perturb_camera(&cam, 3, 0.01 * scene.extent, 0.0, 0.0).unwrap();
        let radius = Vector3::from(rec.center_offset).norm();
        assert!(((p.center() - cam.center()).norm() - radius).abs() < 1e-12);
        assert!(rotation_angle_between(&p.rotation(), &cam.rotation()) < 1e-12);
        assert_eq!(p.fov_x, cam.fov_x);
    }

    #[test]
    fn perturbation_radius_distribution() {
        let scene = synth_scene(2, 50, Layout::Cloud).unwrap();
        let cam = default_camera(&scene, 32, 32).unwrap();
        let dt = 0.05;
        let mut sum = 0.0;
        let n = 10_000;
        for seed in 0..n {
            let (p, _) = perturb_camera(&cam, seed, dt, 0.01, 0.01).unwrap();
            let r = (p.center() - cam.center()).norm();
            assert!(r <= dt * (1.0 + 1e-9));
            sum += r;
        }
        let mean = sum / n as f64;
        // E[r] for a uniform ball is 3/4 of its radius
        assert!((mean / (0.75 * dt) - 1.0).abs() < 0.02, "{mean}");
    }
}
