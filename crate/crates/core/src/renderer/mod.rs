//! Forward splatting rasterizer, photometric losses and PSNR.
//!
//! Splats are depth sorted once per frame and binned into 16×16 pixel tiles
//! in that global order; each pixel composites its tile's list front to
//! back. Per-pixel opacity follows the usual conventions (α clamped to
//! 0.99, contributions below 1/255 dropped, pixel done once transmittance
//! falls under 1e-4) with two smooth tapers so the image is C¹ in the splat
//! means: α fades to zero between 1/255 and 2/255, and the kernel fades to
//! zero between Mahalanobis radius 2.5 and 3 (the culling support).

mod backward;

pub use backward::{backward, backward_duv, render_and_backward, SplatGrads};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_cov_raw, quat_to_rotmat, Camera, DEFAULT_LOWPASS, Z_NEAR};
use crate::scene::GaussianScene;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Squared Mahalanobis radius of the splat support (3σ).
pub const SUPPORT_M2: f64 = 9.0;
const TAPER_M2: f64 = 6.25;
const TILE: usize = 8;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Low-pass floor added to projected covariances, px².
    pub lowpass: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            lowpass: DEFAULT_LOWPASS,
        }
    }
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        let n = width as usize * height as usize * 3;
        if data.len() != n {
            return Err(Error::dims(n, data.len()));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dims(
                format!("{}×{}", self.width, self.height),
                format!("{}×{}", other.width, other.height),
            ));
        }
        Ok(())
    }

    /// Per-channel variance over all pixels.
    pub fn channel_variance(&self) -> [f64; 3] {
        let n = (self.data.len() / 3) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mean = self.data.iter().skip(c).step_by(3).sum::<f64>() / n;
            *o = self
                .data
                .iter()
                .skip(c)
                .step_by(3)
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / n;
        }
        out
    }
}

/// One projected, visible gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    /// Index of the source gaussian in the scene.
    pub index: usize,
    pub uv: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// Inverse covariance as (a, b, c): `m² = a·dx² + 2b·dx·dy + c·dy²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub p_cam: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Visible splats sorted by (depth, source index).
#[derive(Debug, Clone, PartialEq)]
pub struct SplatList {
    pub splats: Vec<Splat>,
    pub width: u32,
    pub height: u32,
}

impl SplatList {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn sort(&mut self) {
        self.splats
            .sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    }
}

pub(crate) fn conic_of(cov: &Matrix2<f64>) -> Option<[f64; 3]> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    Some([cov[(1, 1)] * inv, -cov[(0, 1)] * inv, cov[(0, 0)] * inv])
}

/// Does the `m² ≤ 9` ellipse of a splat touch the rectangle [0,w]×[0,h]?
pub fn ellipse_intersects_rect(uv: &Vector2<f64>, conic: &[f64; 3], w: f64, h: f64) -> bool {
    ellipse_intersects_box(uv, conic, 0.0, 0.0, w, h)
}

/// Does the `m² ≤ 9` ellipse touch the closed box [x0,x1]×[y0,y1]?
pub(crate) fn ellipse_intersects_box(
    uv: &Vector2<f64>,
    conic: &[f64; 3],
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
) -> bool {
    if (x0..=x1).contains(&uv.x) && (y0..=y1).contains(&uv.y) {
        return true;
    }
    let corners = [
        Vector2::new(x0, y0),
        Vector2::new(x1, y0),
        Vector2::new(x1, y1),
        Vector2::new(x0, y1),
    ];
    let quad = |v: &Vector2<f64>, u: &Vector2<f64>| {
        conic[0] * v.x * u.x + conic[1] * (v.x * u.y + v.y * u.x) + conic[2] * v.y * u.y
    };
    // minimum of the quadratic form along each edge, in closed form
    (0..4).any(|k| {
        let p0 = corners[k];
        let d = corners[(k + 1) % 4] - p0;
        let e = p0 - uv;
        let dad = quad(&d, &d);
        let s = if dad > 0.0 {
            (-quad(&d, &e) / dad).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let r = e + d * s;
        quad(&r, &r) <= SUPPORT_M2
    })
}

/// Projects every gaussian, keeps those in front of the near plane whose 3σ
/// ellipse touches the image, and sorts them by depth.
pub fn cull_and_project(
    scene: &GaussianScene,
    camera: &Camera,
    settings: &RenderSettings,
) -> SplatList {
    let rot = camera.rotation();
    let (fx, fy) = camera.focal();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let splats = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let p_cam = rot * g.position + camera.t;
            if p_cam.z <= Z_NEAR {
                return None;
            }
            let uv = Vector2::new(
                fx * p_cam.x / p_cam.z + camera.cx,
                fy * p_cam.y / p_cam.z + camera.cy,
            );
            let m = quat_to_rotmat(&g.rotation) * Matrix3::from_diagonal(&g.scale);
            let cov3 = m * m.transpose();
            let cov = project_cov_raw(&cov3, &rot, &p_cam, fx, fy, settings.lowpass);
            let conic = conic_of(&cov)?;
            if !ellipse_intersects_rect(&uv, &conic, w, h) {
                return None;
            }
            Some(Splat {
                index,
                uv,
                cov,
                conic,
                depth: p_cam.z,
                p_cam,
                opacity: g.opacity,
                color: g.color,
            })
        })
        .collect();
    let mut list = SplatList {
        splats,
        width: camera.width,
        height: camera.height,
    };
    list.sort();
    list
}

#[inline]
fn smoothstep(x: f64) -> (f64, f64) {
    (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
}

/// Opacity of a splat at squared Mahalanobis distance `m2`, with its
/// derivatives in `m2` and in the splat opacity.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AlphaSample {
    pub alpha: f64,
    pub d_m2: f64,
    pub d_opacity: f64,
}

#[inline]
pub(crate) fn eval_alpha(opacity: f64, m2: f64) -> Option<AlphaSample> {
    if m2 >= SUPPORT_M2 {
        return None;
    }
    let g = (-0.5 * m2).exp();
    let raw = opacity * g;
    if raw <= ALPHA_MIN {
        return None;
    }
    let (c, dc) = if raw > ALPHA_MAX {
        (ALPHA_MAX, 0.0)
    } else {
        (raw, 1.0)
    };
    let (wa, dwa) = if raw >= 2.0 * ALPHA_MIN {
        (1.0, 0.0)
    } else {
        let (s, ds) = smoothstep((raw - ALPHA_MIN) / ALPHA_MIN);
        (s, ds / ALPHA_MIN)
    };
    let (ws, dws) = if m2 <= TAPER_M2 {
        (1.0, 0.0)
    } else {
        let span = SUPPORT_M2 - TAPER_M2;
        let (s, ds) = smoothstep((SUPPORT_M2 - m2) / span);
        (s, -ds / span)
    };
    let alpha = c * wa * ws;
    if alpha <= 0.0 {
        return None;
    }
    let d_raw = (dc * wa + c * dwa) * ws;
    Some(AlphaSample {
        alpha,
        d_m2: d_raw * (-0.5 * raw) + c * wa * dws,
        d_opacity: d_raw * g,
    })
}

#[inline]
pub(crate) fn mahalanobis2(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
}

/// The fields of a splat read while compositing, packed for locality.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Packed {
    pub uv: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub index: usize,
}

/// Splats overlapping each 8×8 tile, in list (depth) order.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub bins: Vec<Vec<Packed>>,
}

impl TileBins {
    pub fn build(list: &SplatList) -> Self {
        let (w, h) = (list.width as usize, list.height as usize);
        let tiles_x = w.div_ceil(TILE);
        let tiles_y = h.div_ceil(TILE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in list.splats.iter().enumerate() {
            let rx = 3.0 * s.cov[(0, 0)].sqrt();
            let ry = 3.0 * s.cov[(1, 1)].sqrt();
            // pixel centers sit at (x + 0.5, y + 0.5)
            let x0 = (s.uv.x - rx - 0.5).ceil().max(0.0);
            let x1 = (s.uv.x + rx - 0.5).floor().min(w as f64 - 1.0);
            let y0 = (s.uv.y - ry - 0.5).ceil().max(0.0);
            let y1 = (s.uv.y + ry - 0.5).floor().min(h as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
            let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
            let single = tx0 == tx1 && ty0 == ty1;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    // box of the tile's pixel centers covered by the bbox
                    let bx0 = ((tx * TILE) as f64).max(x0) + 0.5;
                    let bx1 = (((tx + 1) * TILE - 1) as f64).min(x1) + 0.5;
                    let by0 = ((ty * TILE) as f64).max(y0) + 0.5;
                    let by1 = (((ty + 1) * TILE - 1) as f64).min(y1) + 0.5;
                    if single || ellipse_intersects_box(&s.uv, &s.conic, bx0, by0, bx1, by1) {
                        bins[ty * tiles_x + tx].push(Packed {
                            uv: [s.uv.x, s.uv.y],
                            conic: s.conic,
                            opacity: s.opacity,
                            color: s.color,
                            index: i,
                        });
                    }
                }
            }
        }
        TileBins { tiles_x, bins }
    }

    pub fn tile(&self, x: usize, y: usize) -> &[Packed] {
        &self.bins[(y / TILE) * self.tiles_x + x / TILE]
    }

    /// Calls `pixel(x, y, tile)` for every pixel of a `width`-wide band of
    /// rows `y0..y1`.
    pub fn for_each_pixel<'a, F>(&'a self, width: usize, y0: usize, y1: usize, mut pixel: F)
    where
        F: FnMut(usize, usize, &'a [Packed]),
    {
        for y in y0..y1 {
            for tx in 0..self.tiles_x {
                let tile = self.tile(tx * TILE, y);
                for x in tx * TILE..((tx + 1) * TILE).min(width) {
                    pixel(x, y, tile);
                }
            }
        }
    }
}

/// Front-to-back compositing of one pixel. Calls `visit(splat,
/// alpha_sample, transmittance_before, dx, dy)` for each contribution and
/// returns (unclamped color, final transmittance).
#[inline]
pub(crate) fn composite_pixel<'a, F>(
    tile: &'a [Packed],
    px: f64,
    py: f64,
    background: &[f64; 3],
    mut visit: F,
) -> ([f64; 3], f64)
where
    F: FnMut(&'a Packed, AlphaSample, f64, f64, f64),
{
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for s in tile {
        let dx = px - s.uv[0];
        let dy = py - s.uv[1];
        let m2 = mahalanobis2(&s.conic, dx, dy);
        let Some(a) = eval_alpha(s.opacity, m2) else {
            continue;
        };
        let next_t = t * (1.0 - a.alpha);
        if next_t < TRANSMITTANCE_MIN {
            break;
        }
        let w = a.alpha * t;
        c[0] += s.color[0] * w;
        c[1] += s.color[1] * w;
        c[2] += s.color[2] * w;
        visit(s, a, t, dx, dy);
        t = next_t;
    }
    for k in 0..3 {
        c[k] += t * background[k];
    }
    (c, t)
}

/// Rasterizes a sorted splat list. Rows are independent, so bands of rows
/// render in parallel with bit-identical results.
pub fn rasterize(list: &SplatList, settings: &RenderSettings) -> Image {
    let bins = TileBins::build(list);
    let mut img = Image::new(list.width, list.height);
    let w = list.width as usize;
    img.data
        .par_chunks_mut(3 * w * TILE)
        .enumerate()
        .for_each(|(band, rows)| {
            let y0 = band * TILE;
            bins.for_each_pixel(w, y0, y0 + rows.len() / (3 * w), |x, y, tile| {
                let (c, _) = composite_pixel(
                    tile,
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    &settings.background,
                    |_, _, _, _, _| {},
                );
                let at = 3 * ((y - y0) * w + x);
                for k in 0..3 {
                    rows[at + k] = c[k].clamp(0.0, 1.0);
                }
            });
        });
    img
}

/// Final transmittance per pixel (row-major), for diagnostics and tests.
pub fn transmittance(list: &SplatList, settings: &RenderSettings) -> Vec<f64> {
    let bins = TileBins::build(list);
    let (w, h) = (list.width as usize, list.height as usize);
    let mut out = vec![0.0; w * h];
    bins.for_each_pixel(w, 0, h, |x, y, tile| {
        let px = (x as f64 + 0.5, y as f64 + 0.5);
        out[y * w + x] =
            composite_pixel(tile, px.0, px.1, &settings.background, |_, _, _, _, _| {}).1;
    });
    out
}

pub fn render(
    scene: &GaussianScene,
    camera: &Camera,
    settings: &RenderSettings,
) -> (SplatList, Image) {
    let list = cull_and_project(scene, camera, settings);
    let img = rasterize(&list, settings);
    (list, img)
}

pub fn render_image(scene: &GaussianScene, camera: &Camera, settings: &RenderSettings) -> Image {
    render(scene, camera, settings).1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Mean absolute (L1) or squared (L2) difference over all pixel channels.
pub fn loss(image: &Image, target: &Image, kind: LossKind) -> Result<f64> {
    image.same_dims(target)?;
    let n = image.data.len() as f64;
    let sum: f64 = match kind {
        LossKind::L1 => image
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b).abs())
            .sum(),
        LossKind::L2 => image
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    };
    Ok(sum / n)
}

/// PSNR for unit peak; capped at 99 dB.
pub fn psnr(image: &Image, target: &Image) -> Result<f64> {
    let mse = loss(image, target, LossKind::L2)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use crate::scene::{default_camera, synth_scene, Gaussian, Layout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn splat(
        index: usize,
        uv: (f64, f64),
        sigma: f64,
        depth: f64,
        opacity: f64,
        color: [f64; 3],
    ) -> Splat {
        let cov = Matrix2::identity() * sigma * sigma;
        Splat {
            index,
            uv: Vector2::new(uv.0, uv.1),
            cov,
            conic: conic_of(&cov).unwrap(),
            depth,
            p_cam: Vector3::new(0.0, 0.0, depth),
            opacity,
            color,
        }
    }

    fn list(splats: Vec<Splat>, w: u32, h: u32) -> SplatList {
        let mut l = SplatList {
            splats,
            width: w,
            height: h,
        };
        l.sort();
        l
    }

    fn front_camera(w: u32, h: u32) -> Camera {
        Camera {
            t: Vector3::new(0.0, 0.0, 4.0),
            q: UnitQuaternion::IDENTITY,
            fov_x: 0.8,
            fov_y: 0.8,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        }
    }

    fn point_gaussian(p: [f64; 3]) -> Gaussian {
        Gaussian {
            position: Vector3::from(p),
            scale: Vector3::repeat(0.02),
            rotation: UnitQuaternion::IDENTITY,
            opacity: 0.8,
            color: [0.2, 0.5, 0.9],
        }
    }

    #[test]
    fn empty_list_is_background() {
        let s = RenderSettings {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let img = rasterize(&list(vec![], 7, 5), &s);
        assert_eq!(img, Image::filled(7, 5, [0.1, 0.2, 0.3]));
    }

    #[test]
    fn single_opaque_splat_closed_form() {
        let bg = [0.25, 0.5, 0.75];
        let c = [0.9, 0.1, 0.4];
        let s = RenderSettings {
            background: bg,
            ..Default::default()
        };
        let img = rasterize(
            &list(vec![splat(0, (8.5, 6.5), 1.5, 2.0, 1.0, c)], 16, 12),
            &s,
        );
        let px = img.pixel(8, 6);
        for k in 0..3 {
            let expect = (1.0 - ALPHA_MAX) * bg[k] + ALPHA_MAX * c[k];
            assert!((px[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn splat_order_is_canonical() {
        let a = splat(0, (5.0, 5.0), 2.0, 1.0, 0.7, [1.0, 0.0, 0.0]);
        let b = splat(1, (6.0, 5.5), 2.0, 2.0, 0.7, [0.0, 1.0, 0.0]);
        let s = RenderSettings::default();
        let i1 = rasterize(&list(vec![a.clone(), b.clone()], 12, 12), &s);
        let i2 = rasterize(&list(vec![b, a], 12, 12), &s);
        assert_eq!(i1, i2);
    }

    #[test]
    fn cull_examples() {
        let cam = front_camera(32, 32);
        let scene = GaussianScene::new(vec![
            point_gaussian([0.0, 0.0, 0.0]),
            point_gaussian([0.0, 0.0, -5.0]),
        ]);
        let l = cull_and_project(&scene, &cam, &RenderSettings::default());
        assert_eq!(l.len(), 1);
        assert_eq!(l.splats[0].index, 0);
        assert_eq!(l.splats[0].uv, Vector2::new(16.0, 16.0));
    }

    #[test]
    fn cull_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (40.0, 30.0);
        let mut checked = 0;
        for _ in 0..3000 {
            let uv = Vector2::new(rng.gen_range(-30.0..70.0), rng.gen_range(-30.0..60.0));
            let sx: f64 = rng.gen_range(0.5..8.0);
            let sy: f64 = rng.gen_range(0.5..8.0);
            let rho: f64 = rng.gen_range(-0.9..0.9);
            let cov = Matrix2::new(sx * sx, rho * sx * sy, rho * sx * sy, sy * sy);
            let conic = conic_of(&cov).unwrap();
            // brute force: dense samples of the rectangle
            let mut min_m2 = f64::INFINITY;
            let n = 400;
            for i in 0..=n {
                for j in 0..=n {
                    let p = Vector2::new(w * i as f64 / n as f64, h * j as f64 / n as f64);
                    let d = p - uv;
                    min_m2 = min_m2.min(mahalanobis2(&conic, d.x, d.y));
                }
            }
            if (min_m2 - SUPPORT_M2).abs() < 0.05 {
                continue;
            }
            checked += 1;
            assert_eq!(
                ellipse_intersects_rect(&uv, &conic, w, h),
                min_m2 <= SUPPORT_M2,
                "{uv} {cov}"
            );
        }
        assert!(checked > 2500);
    }

    #[test]
    fn transmittance_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let splats: Vec<Splat> = (0..6)
            .map(|i| {
                splat(
                    i,
                    (rng.gen_range(2.0..10.0), rng.gen_range(2.0..10.0)),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..5.0),
                    rng.gen_range(0.2..0.9),
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        let l = list(splats, 12, 12);
        let s = RenderSettings::default();
        let t = transmittance(&l, &s);
        for y in 0..12 {
            for x in 0..12 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut prod = 1.0;
                for sp in &l.splats {
                    let m2 = mahalanobis2(&sp.conic, px - sp.uv.x, py - sp.uv.y);
                    if let Some(a) = eval_alpha(sp.opacity, m2) {
                        if prod * (1.0 - a.alpha) < TRANSMITTANCE_MIN {
                            break;
                        }
                        prod *= 1.0 - a.alpha;
                    }
                }
                let ti = t[y * 12 + x];
                assert!((0.0..=1.0).contains(&ti));
                assert!((ti - prod).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adding_a_splat_never_raises_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = RenderSettings::default();
        for _ in 0..20 {
            let mut splats: Vec<Splat> = (0..5)
                .map(|i| {
                    splat(
                        i,
                        (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)),
                        2.0,
                        rng.gen_range(1.0..4.0),
                        0.5,
                        [0.5; 3],
                    )
                })
                .collect();
            let before = transmittance(&list(splats.clone(), 16, 16), &s);
            splats.push(splat(
                9,
                (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)),
                2.0,
                rng.gen_range(1.0..4.0),
                0.6,
                [0.5; 3],
            ));
            let after = transmittance(&list(splats, 16, 16), &s);
            for (a, b) in after.iter().zip(&before) {
                assert!(*a <= *b + 1e-15);
            }
        }
    }

    #[test]
    fn scene_order_invariance() {
        let scene = synth_scene(3, 200, Layout::Cloud).unwrap();
        let cam = default_camera(&scene, 48, 40).unwrap();
        let s = RenderSettings::default();
        let a = render_image(&scene, &cam, &s);
        let mut shuffled = scene.clone();
        shuffled.gaussians.reverse();
        let b = render_image(&shuffled, &cam, &s);
        assert_eq!(a, b);
    }

    #[test]
    fn fixture_is_not_degenerate() {
        let scene = synth_scene(7, 500, Layout::Cloud).unwrap();
        let cam = default_camera(&scene, 64, 64).unwrap();
        let img = render_image(&scene, &cam, &RenderSettings::default());
        for v in img.channel_variance() {
            assert!(v > 0.005, "{v}");
        }
    }

    #[test]
    fn loss_examples() {
        let a = Image::filled(4, 3, [0.3, 0.5, 0.7]);
        assert_eq!(loss(&a, &a, LossKind::L1).unwrap(), 0.0);
        assert_eq!(loss(&a, &a, LossKind::L2).unwrap(), 0.0);
        let b = Image::filled(4, 3, [0.4, 0.6, 0.8]);
        assert!((loss(&a, &b, LossKind::L1).unwrap() - 0.1).abs() < 1e-12);
        assert!((loss(&a, &b, LossKind::L2).unwrap() - 0.01).abs() < 1e-12);
        assert!(matches!(
            loss(&a, &Image::new(3, 3), LossKind::L1),
            Err(Error::DimensionMismatch { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Image::from_data(5, 5, (0..75).map(|_| rng.gen()).collect()).unwrap();
        let y = Image::from_data(5, 5, (0..75).map(|_| rng.gen()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..75 {
            let d = x.data[i] - y.data[i];
            acc += d * d;
        }
        assert!((loss(&x, &y, LossKind::L2).unwrap() - acc / 75.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(2, 2, [0.5; 3]);
        let b = Image::filled(2, 2, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let mse = loss(&a, &b, LossKind::L2).unwrap();
        assert_eq!(psnr(&a, &b).unwrap(), -10.0 * mse.log10());
    }

    #[test]
    fn alpha_derivatives_match_differences() {
        let h = 1e-7;
        for &(o, m2) in &[
            (0.8, 0.3),
            (0.5, 5.0),
            (0.9, 7.0),
            (0.05, 1.5),
            (1.0, 0.001),
            (0.7, 8.5),
        ] {
            let a = eval_alpha(o, m2).unwrap();
            let fd_m2 = (eval_alpha(o, m2 + h).map_or(0.0, |s| s.alpha)
                - eval_alpha(o, m2 - h).map_or(0.0, |s| s.alpha))
                / (2.0 * h);
            let fd_o = (eval_alpha(o + h, m2).map_or(0.0, |s| s.alpha)
                - eval_alpha(o - h, m2).map_or(0.0, |s| s.alpha))
                / (2.0 * h);
            assert!(
                (a.d_m2 - fd_m2).abs() < 1e-6,
                "{o} {m2}: {} vs {fd_m2}",
                a.d_m2
            );
            assert!(
                (a.d_opacity - fd_o).abs() < 1e-6,
                "{o} {m2}: {} vs {fd_o}",
                a.d_opacity
            );
        }
    }
}
