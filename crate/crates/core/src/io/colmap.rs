//! COLMAP sparse-model text files (`cameras.txt`, `images.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::fmt_g17;
use crate::error::{Error, Result};
use crate::geometry::{focal_to_fov, fov_to_focal, Camera, UnitQuaternion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraModel {
    Pinhole,
    SimplePinhole,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColmapCamera {
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One registered image. The pose maps world to camera coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColmapImage {
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub camera_id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColmapReconstruction {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: BTreeMap<u32, ColmapImage>,
}

fn tokens(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

fn finite(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = num(tok, line, what)?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite {what} `{tok}`")));
    }
    Ok(v)
}

fn content(line: &str) -> Option<&str> {
    let t = line.trim();
    (!t.is_empty() && !t.starts_with('#')).then_some(t)
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let Some(line) = content(raw) else { continue };
        let tok = tokens(line);
        if tok.len() < 4 {
            return Err(Error::parse(
                ln,
                "expected `CAMERA_ID MODEL WIDTH HEIGHT PARAMS...`",
            ));
        }
        let id: u32 = num(tok[0], ln, "camera id")?;
        let model = match tok[1] {
            "PINHOLE" => CameraModel::Pinhole,
            "SIMPLE_PINHOLE" => CameraModel::SimplePinhole,
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        let width: u32 = num(tok[2], ln, "width")?;
        let height: u32 = num(tok[3], ln, "height")?;
        if width == 0 || height == 0 {
            return Err(Error::parse(ln, "image size must be positive"));
        }
        let params = tok[4..]
            .iter()
            .map(|t| finite(t, ln, "camera parameter"))
            .collect::<Result<Vec<f64>>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            (CameraModel::Pinhole, &[fx, fy, cx, cy]) => (fx, fy, cx, cy),
            (CameraModel::SimplePinhole, &[f, cx, cy]) => (f, f, cx, cy),
            _ => {
                let want = if model == CameraModel::Pinhole { 4 } else { 3 };
                return Err(Error::parse(
                    ln,
                    format!(
                        "{} takes {want} parameters, got {}",
                        model.name(),
                        params.len()
                    ),
                ));
            }
        };
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::parse(ln, "focal lengths must be positive"));
        }
        let cam = ColmapCamera {
            model,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        if out.insert(id, cam).is_some() {
            return Err(Error::parse(ln, format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, ColmapImage>> {
    let mut out = BTreeMap::new();
    let mut lines = text.lines().enumerate();
    while let Some((i, raw)) = lines.next() {
        let ln = i + 1;
        let Some(line) = content(raw) else { continue };
        let tok = tokens(line);
        if tok.len() < 10 {
            return Err(Error::parse(
                ln,
                "expected `IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME`",
            ));
        }
        let id: u32 = num(tok[0], ln, "image id")?;
        let mut v = [0.0; 7];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = finite(tok[1 + k], ln, "pose value")?;
        }
        let camera_id: u32 = num(tok[8], ln, "camera id")?;
        let name = tok[9..].join(" ");
        let q = [v[0], v[1], v[2], v[3]];
        if q.iter().map(|x| x * x).sum::<f64>() < 1e-18 {
            return Err(Error::parse(ln, "zero quaternion"));
        }
        let img = ColmapImage {
            q,
            t: [v[4], v[5], v[6]],
            camera_id,
            name,
        };
        if out.insert(id, img).is_some() {
            return Err(Error::parse(ln, format!("duplicate image id {id}")));
        }
        // the line after each image holds its 2D points, possibly empty
        lines.next();
    }
    Ok(out)
}

pub fn parse_colmap_text(cameras_text: &str, images_text: &str) -> Result<ColmapReconstruction> {
    let cameras = parse_cameras(cameras_text)?;
    let images = parse_images(images_text)?;
    for (&id, img) in &images {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::DanglingCameraRef {
                image: id,
                camera: img.camera_id,
            });
        }
    }
    Ok(ColmapReconstruction { cameras, images })
}

pub fn write_colmap_text(recon: &ColmapReconstruction) -> (String, String) {
    let mut cams = String::from(
        "# Camera list with one line of data per camera:\n\
         #   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n",
    );
    let _ = writeln!(cams, "# Number of cameras: {}", recon.cameras.len());
    for (id, c) in &recon.cameras {
        let params = match c.model {
            CameraModel::Pinhole => vec![c.fx, c.fy, c.cx, c.cy],
            CameraModel::SimplePinhole => vec![c.fx, c.cx, c.cy],
        };
        let params: Vec<String> = params.into_iter().map(fmt_g17).collect();
        let _ = writeln!(
            cams,
            "{id} {} {} {} {}",
            c.model.name(),
            c.width,
            c.height,
            params.join(" ")
        );
    }
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n\
         #   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n\
         #   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let _ = writeln!(imgs, "# Number of images: {}", recon.images.len());
    for (id, im) in &recon.images {
        let vals: Vec<String> = im.q.iter().chain(&im.t).map(|v| fmt_g17(*v)).collect();
        let _ = writeln!(imgs, "{id} {} {} {}", vals.join(" "), im.camera_id, im.name);
        imgs.push('\n');
    }
    (cams, imgs)
}

/// A named camera in image-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCamera {
    pub image_id: u32,
    pub name: String,
    pub camera: Camera,
}

impl ColmapReconstruction {
    /// One PINHOLE intrinsics entry per image, ids counting from 1.
    pub fn from_cameras<'a>(cams: impl IntoIterator<Item = (&'a str, &'a Camera)>) -> Result<Self> {
        let mut recon = ColmapReconstruction::default();
        for (k, (name, cam)) in cams.into_iter().enumerate() {
            let id = k as u32 + 1;
            recon
                .cameras
                .insert(id, intrinsics_of(cam, CameraModel::Pinhole)?);
            recon.images.insert(id, pose_of(cam, id, name));
        }
        Ok(recon)
    }

    pub fn cameras(&self) -> Result<Vec<NamedCamera>> {
        self.images
            .iter()
            .map(|(&id, im)| {
                let c = self
                    .cameras
                    .get(&im.camera_id)
                    .ok_or(Error::DanglingCameraRef {
                        image: id,
                        camera: im.camera_id,
                    })?;
                let camera = Camera {
                    t: Vector3::from(im.t),
                    q: UnitQuaternion::from_array(im.q),
                    fov_x: focal_to_fov(c.fx, c.width as f64),
                    fov_y: focal_to_fov(c.fy, c.height as f64),
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                };
                camera.validate()?;
                Ok(NamedCamera {
                    image_id: id,
                    name: im.name.clone(),
                    camera,
                })
            })
            .collect()
    }

    /// Writes refined cameras back in image-id order. Intrinsics shared by
    /// several images are split so each image keeps its own fields of view;
    /// a SIMPLE_PINHOLE entry whose focal lengths diverge becomes PINHOLE.
    pub fn update(&mut self, cams: &[Camera]) -> Result<()> {
        if cams.len() != self.images.len() {
            return Err(Error::dims(self.images.len(), cams.len()));
        }
        let mut users: BTreeMap<u32, usize> = BTreeMap::new();
        for im in self.images.values() {
            *users.entry(im.camera_id).or_default() += 1;
        }
        let mut next_id = self.cameras.keys().next_back().map_or(1, |k| k + 1);
        let ids: Vec<u32> = self.images.keys().copied().collect();
        for (id, cam) in ids.into_iter().zip(cams) {
            let im = self.images.get_mut(&id).expect("id from keys");
            im.q = cam.q.to_array();
            im.t = [cam.t.x, cam.t.y, cam.t.z];
            let old = self.cameras[&im.camera_id].clone();
            let mut intr = intrinsics_of(cam, old.model)?;
            // focal → fov → focal is exact only to rounding
            let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
            if near(intr.fx, old.fx)
                && near(intr.fy, old.fy)
                && intr.cx == old.cx
                && intr.cy == old.cy
            {
                continue;
            }
            if old.model == CameraModel::SimplePinhole {
                if near(intr.fx, intr.fy) {
                    intr.fy = intr.fx;
                } else {
                    intr.model = CameraModel::Pinhole;
                }
            }
            let shared = users.get_mut(&im.camera_id).expect("counted above");
            if *shared > 1 {
                *shared -= 1;
                im.camera_id = next_id;
                next_id += 1;
            }
            self.cameras.insert(im.camera_id, intr);
        }
        Ok(())
    }
}

fn intrinsics_of(cam: &Camera, model: CameraModel) -> Result<ColmapCamera> {
    Ok(ColmapCamera {
        model,
        width: cam.width,
        height: cam.height,
        fx: fov_to_focal(cam.fov_x, cam.width as f64)?,
        fy: fov_to_focal(cam.fov_y, cam.height as f64)?,
        cx: cam.cx,
        cy: cam.cy,
    })
}

fn pose_of(cam: &Camera, camera_id: u32, name: &str) -> ColmapImage {
    ColmapImage {
        q: cam.q.to_array(),
        t: [cam.t.x, cam.t.y, cam.t.z],
        camera_id,
        name: name.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CAMS: &str =
        "# comment\n1 PINHOLE 800 600 400 400 400 300\n\n2 SIMPLE_PINHOLE 64 48 50 32 24\n";
    const IMGS: &str = "# header\n3 1 0 0 0 0.5 -1 2 1 a.png\n1.0 2.0 -1\n7 0.7071067811865476 0 0.7071067811865476 0 0 0 1 2 b c.png\n\n";

    #[test]
    fn parses_reference_lines() {
        let r = parse_colmap_text(CAMS, IMGS).unwrap();
        assert_eq!(r.cameras.len(), 2);
        assert_eq!(r.images.len(), 2);
        assert_eq!(r.images[&3].t, [0.5, -1.0, 2.0]);
        assert_eq!(r.images[&7].name, "b c.png");
        let cams = r.cameras().unwrap();
        assert!((cams[0].camera.fov_x - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(cams[1].camera.width, 64);
        assert_eq!(r.cameras[&2].fx, r.cameras[&2].fy);
    }

    #[test]
    fn rejects_bad_input() {
        let e = parse_colmap_text("1 RADIAL 10 10 5 5 5 0 0\n", "").unwrap_err();
        assert!(matches!(e, Error::UnsupportedCameraModel(ref m) if m == "RADIAL"));
        let e = parse_colmap_text(CAMS, "1 1 0 0 0 0 0 0 9 x\n\n").unwrap_err();
        assert!(matches!(
            e,
            Error::DanglingCameraRef {
                image: 1,
                camera: 9
            }
        ));
        let e = parse_colmap_text("# c\n\n1 PINHOLE 8 8 x 1 1 1\n", "").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_colmap_text("1 PINHOLE 8 8 1 1 1\n", "").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_colmap_text(CAMS, "1 1 0 0 0 0 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e =
            parse_colmap_text("1 PINHOLE 8 8 1 1 1 1\n1 PINHOLE 8 8 1 1 1 1\n", "").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_reconstruction_is_headers_only() {
        let (c, i) = write_colmap_text(&ColmapReconstruction::default());
        assert!(c.lines().all(|l| l.starts_with('#')));
        assert!(i.lines().all(|l| l.starts_with('#')));
        assert_eq!(
            parse_colmap_text(&c, &i).unwrap(),
            ColmapReconstruction::default()
        );
    }

    pub(crate) fn random_recon(rng: &mut ChaCha8Rng) -> ColmapReconstruction {
        let mut r = ColmapReconstruction::default();
        let n_cams = rng.gen_range(1..4);
        let cam_ids: Vec<u32> = (0..n_cams).map(|_| rng.gen_range(1..1000)).collect();
        for &id in &cam_ids {
            let model = if rng.gen_bool(0.5) {
                CameraModel::Pinhole
            } else {
                CameraModel::SimplePinhole
            };
            let fx = rng.gen_range(10.0..2000.0);
            let fy = if model == CameraModel::Pinhole {
                rng.gen_range(10.0..2000.0)
            } else {
                fx
            };
            r.cameras.insert(
                id,
                ColmapCamera {
                    model,
                    width: rng.gen_range(1..4000),
                    height: rng.gen_range(1..4000),
                    fx,
                    fy,
                    cx: rng.gen_range(0.0..2000.0),
                    cy: rng.gen_range(0.0..2000.0),
                },
            );
        }
        for k in 0..rng.gen_range(0..6) {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let t: [f64; 3] = std::array::from_fn(|_| {
                rng.gen_range(-1e3..1e3) * 10f64.powi(rng.gen_range(-8..3))
            });
            r.images.insert(
                rng.gen_range(1..100_000),
                ColmapImage {
                    q,
                    t,
                    camera_id: cam_ids[rng.gen_range(0..cam_ids.len())],
                    name: format!("img_{k}.pfm"),
                },
            );
        }
        r
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let r = random_recon(&mut rng);
            let (c, i) = write_colmap_text(&r);
            assert_eq!(parse_colmap_text(&c, &i).unwrap(), r);
        }
    }

    #[test]
    fn cameras_round_trip_through_recon() {
        let a = Camera::look_at(
            Vector3::new(0.3, -0.2, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            0.9,
            64,
            48,
        )
        .unwrap();
        let r = ColmapReconstruction::from_cameras([("a", &a)]).unwrap();
        let (c, i) = write_colmap_text(&r);
        let back = parse_colmap_text(&c, &i).unwrap().cameras().unwrap();
        let b = &back[0].camera;
        assert_eq!(back[0].name, "a");
        assert_eq!(b.t, a.t);
        assert_eq!(b.q, a.q);
        assert!((b.fov_x - a.fov_x).abs() < 1e-12 && (b.fov_y - a.fov_y).abs() < 1e-12);
    }

    #[test]
    fn update_splits_shared_intrinsics() {
        let mut r = parse_colmap_text(
            "4 SIMPLE_PINHOLE 64 64 50 32 32\n",
            "1 1 0 0 0 0 0 1 4 a\n\n2 1 0 0 0 0 0 1 4 b\n\n",
        )
        .unwrap();
        let mut cams: Vec<Camera> = r.cameras().unwrap().into_iter().map(|n| n.camera).collect();
        cams[1].fov_x *= 1.01;
        cams[1].t.x = 0.25;
        r.update(&cams).unwrap();
        assert_eq!(r.images[&1].camera_id, 4);
        assert_eq!(r.images[&2].camera_id, 5);
        assert_eq!(r.cameras[&4].model, CameraModel::SimplePinhole);
        assert_eq!(r.cameras[&5].model, CameraModel::Pinhole);
        assert_eq!(r.images[&2].t[0], 0.25);
        assert!(r.update(&cams[..1]).is_err());
    }
}
