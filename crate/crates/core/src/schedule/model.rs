//! Simplified model training: photometric gradients pushed through the
//! projection to every gaussian attribute, stepped with Adam.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    normalize_pullback, quat_to_rotmat, rotmat_partials, Camera, UnitQuaternion,
};
use crate::optim::{AdamConfig, AdamState, ModelLr};
use crate::renderer::{
    cull_and_project, loss, render_and_backward, Image, LossKind, RenderSettings, SplatGrads,
    SplatList,
};
use crate::scene::GaussianScene;

/// Loss gradient per gaussian, in the natural (unstored) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    /// With respect to the stored (possibly non-unit) quaternion.
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl GaussianGrads {
    fn zeros(n: usize) -> Self {
        GaussianGrads {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// Chains per-splat gradients (uv, conic, opacity, color) down to the
/// gaussians that produced `list` under `camera`. Gaussians outside the
/// list get zero gradient.
pub fn gaussian_grads(
    scene: &GaussianScene,
    camera: &Camera,
    list: &SplatList,
    g: &SplatGrads,
) -> GaussianGrads {
    let mut out = GaussianGrads::zeros(scene.len());
    let w = camera.rotation();
    let (fx, fy) = camera.focal();
    for (k, s) in list.splats.iter().enumerate() {
        let gi = &scene.gaussians[s.index];
        let i = s.index;
        out.opacity[i] += g.d_opacity[k];
        for c in 0..3 {
            out.color[i][c] += g.d_color[k][c];
        }

        // conic → Σ2D: the conic gradient as a symmetric matrix, with the
        // off-diagonal entry split across both positions
        let [ca, cb, cc] = s.conic;
        let inv = Matrix2::new(ca, cb, cb, cc);
        let [ga, gb, gc] = g.d_conic[k];
        let gcon = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
        let d_cov2 = -(inv * gcon * inv);

        let p = s.p_cam;
        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let j = Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2);
        let t = j * w;
        let rg = quat_to_rotmat(&gi.rotation);
        let m = rg * Matrix3::from_diagonal(&gi.scale);
        let cov3 = m * m.transpose();

        let d_t = 2.0 * d_cov2 * t * cov3;
        let d_j = d_t * w.transpose();
        let d_cov3 = t.transpose() * d_cov2 * t;

        let mut d_p = Vector3::new(
            g.d_uv[k].x * fx * iz - d_j[(0, 2)] * fx * iz2,
            g.d_uv[k].y * fy * iz - d_j[(1, 2)] * fy * iz2,
            -g.d_uv[k].x * fx * p.x * iz2 - g.d_uv[k].y * fy * p.y * iz2,
        );
        let iz3 = iz2 * iz;
        d_p.z += -d_j[(0, 0)] * fx * iz2 + d_j[(0, 2)] * 2.0 * fx * p.x * iz3
            - d_j[(1, 1)] * fy * iz2
            + d_j[(1, 2)] * 2.0 * fy * p.y * iz3;
        out.position[i] += w.transpose() * d_p;

        let d_m = 2.0 * d_cov3 * m;
        let mut d_rg = Matrix3::zeros();
        for c in 0..3 {
            out.scale[i][c] += d_m.column(c).dot(&rg.column(c));
            d_rg.set_column(c, &(d_m.column(c) * gi.scale[c]));
        }
        let q_unit = gi.rotation.normalize().unwrap_or(UnitQuaternion::IDENTITY);
        let parts = rotmat_partials(&q_unit);
        let mut g_unit = [0.0; 4];
        for (gq, part) in g_unit.iter_mut().zip(&parts) {
            *gq = part.component_mul(&d_rg).sum();
        }
        let gq = normalize_pullback(&gi.rotation, g_unit);
        for c in 0..4 {
            out.rotation[i][c] += gq[c];
        }
    }
    out
}

const OPACITY_EPS: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

/// Optimizer state for the gaussian attributes. Scales are stepped in log
/// space and opacities in logit space, so both constraints hold by
/// construction; colors are clamped to `[0, 1]` after each step.
#[derive(Debug, Clone)]
pub struct ModelTrainer {
    position: Vec<f64>,
    log_scale: Vec<f64>,
    rotation: Vec<f64>,
    logit: Vec<f64>,
    color: Vec<f64>,
    adam: [AdamState; 5],
    lr: [f64; 5],
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub steps_taken: u64,
}

impl ModelTrainer {
    pub fn new(scene: &GaussianScene, lr: ModelLr, adam: AdamConfig, seed: u64) -> Self {
        let n = scene.len();
        let mut t = ModelTrainer {
            position: Vec::with_capacity(3 * n),
            log_scale: Vec::with_capacity(3 * n),
            rotation: Vec::with_capacity(4 * n),
            logit: Vec::with_capacity(n),
            color: Vec::with_capacity(3 * n),
            adam: [
                AdamState::new(3 * n, adam),
                AdamState::new(3 * n, adam),
                AdamState::new(4 * n, adam),
                AdamState::new(n, adam),
                AdamState::new(3 * n, adam),
            ],
            lr: [
                lr.position * scene.extent,
                lr.scale,
                lr.rotation,
                lr.opacity,
                lr.color,
            ],
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            steps_taken: 0,
        };
        for g in &scene.gaussians {
            t.position.extend(g.position.iter());
            t.log_scale.extend(g.scale.iter().map(|s| s.ln()));
            t.rotation.extend(g.rotation.to_array());
            t.logit.push(logit(g.opacity));
            t.color.extend(g.color);
        }
        t
    }

    /// Writes the stored parameters into `scene` (extent untouched).
    pub fn write_back(&self, scene: &mut GaussianScene) {
        self.write_changed(scene, &[vec![], vec![], vec![], vec![], vec![]]);
    }

    /// Writes only attributes whose stored values differ from `before`, so
    /// an untouched gaussian keeps its exact original values instead of a
    /// log/exp or logit/sigmoid round trip.
    fn write_changed(&self, scene: &mut GaussianScene, before: &[Vec<f64>; 5]) {
        let changed = |k: usize, cur: &[f64], lo: usize, hi: usize| {
            before[k].get(lo..hi) != Some(&cur[lo..hi])
        };
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            let (i3, i4) = (3 * i, 4 * i);
            if changed(0, &self.position, i3, i3 + 3) {
                g.position = Vector3::new(
                    self.position[i3],
                    self.position[i3 + 1],
                    self.position[i3 + 2],
                );
            }
            if changed(1, &self.log_scale, i3, i3 + 3) {
                g.scale = Vector3::new(
                    self.log_scale[i3].exp(),
                    self.log_scale[i3 + 1].exp(),
                    self.log_scale[i3 + 2].exp(),
                );
            }
            if changed(2, &self.rotation, i4, i4 + 4) {
                g.rotation = UnitQuaternion::from_array([
                    self.rotation[i4],
                    self.rotation[i4 + 1],
                    self.rotation[i4 + 2],
                    self.rotation[i4 + 3],
                ]);
            }
            if changed(3, &self.logit, i, i + 1) {
                g.opacity = sigmoid(self.logit[i]);
            }
            if changed(4, &self.color, i3, i3 + 3) {
                g.color = [self.color[i3], self.color[i3 + 1], self.color[i3 + 2]];
            }
        }
    }

    /// Next camera of a seeded per-epoch shuffle of `pool`.
    fn next_camera(&mut self, pool: &[usize]) -> usize {
        if self.cursor >= self.order.len() || self.order.len() != pool.len() {
            self.order = pool.to_vec();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let c = self.order[self.cursor];
        self.cursor += 1;
        c
    }

    /// One training step against a camera drawn from `pool`; returns the
    /// loss of the pre-step render.
    pub fn step(
        &mut self,
        scene: &mut GaussianScene,
        cameras: &[Camera],
        targets: &[Image],
        pool: &[usize],
        kind: LossKind,
        settings: &RenderSettings,
    ) -> Result<f64> {
        let c = self.next_camera(pool);
        let list = cull_and_project(scene, &cameras[c], settings);
        let (image, sg) = render_and_backward(&list, &targets[c], kind, settings)?;
        let value = loss(&image, &targets[c], kind)?;
        let g = gaussian_grads(scene, &cameras[c], &list, &sg);
        let n = scene.len();

        let mut gp = vec![0.0; 3 * n];
        let mut gs = vec![0.0; 3 * n];
        let mut gr = vec![0.0; 4 * n];
        let mut go = vec![0.0; n];
        let mut gc = vec![0.0; 3 * n];
        for i in 0..n {
            let gi = &scene.gaussians[i];
            for k in 0..3 {
                gp[3 * i + k] = g.position[i][k];
                gs[3 * i + k] = g.scale[i][k] * gi.scale[k];
                gc[3 * i + k] = g.color[i][k];
            }
            gr[4 * i..4 * i + 4].copy_from_slice(&g.rotation[i]);
            go[i] = g.opacity[i] * gi.opacity * (1.0 - gi.opacity);
        }
        let before = [
            self.position.clone(),
            self.log_scale.clone(),
            self.rotation.clone(),
            self.logit.clone(),
            self.color.clone(),
        ];
        let groups: [(&mut Vec<f64>, &Vec<f64>); 5] = [
            (&mut self.position, &gp),
            (&mut self.log_scale, &gs),
            (&mut self.rotation, &gr),
            (&mut self.logit, &go),
            (&mut self.color, &gc),
        ];
        for (k, (params, grad)) in groups.into_iter().enumerate() {
            let lr = vec![self.lr[k]; params.len()];
            match self.adam[k].step(params, grad, &lr) {
                Ok(()) | Err(Error::NonFiniteGradient) => {}
                Err(e) => return Err(e),
            }
        }
        for (q, q0) in self
            .rotation
            .chunks_exact_mut(4)
            .zip(before[2].chunks_exact(4))
        {
            if q != q0 {
                let u = UnitQuaternion::new(q[0], q[1], q[2], q[3])
                    .normalize()
                    .unwrap_or(UnitQuaternion::IDENTITY);
                q.copy_from_slice(&u.to_array());
            }
        }
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
        self.write_changed(scene, &before);
        self.steps_taken += 1;
        Ok(value)
    }
}

/// Runs `m` model steps, drawing cameras from `pool`; returns the loss of
/// each step's pre-update render.
#[allow(clippy::too_many_arguments)]
pub fn model_train_steps(
    scene: &mut GaussianScene,
    cameras: &[Camera],
    targets: &[Image],
    pool: &[usize],
    m: usize,
    trainer: &mut ModelTrainer,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Config("model step count must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Config(
            "model training needs at least one camera".into(),
        ));
    }
    if cameras.len() != targets.len() {
        return Err(Error::dims(cameras.len(), targets.len()));
    }
    (0..m)
        .map(|_| trainer.step(scene, cameras, targets, pool, kind, settings))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{backward, render, render_image};
    use crate::scene::{synth_cameras, synth_scene, Gaussian, Layout, Rig};
    use rand::Rng;

    fn loss_of(scene: &GaussianScene, cam: &Camera, target: &Image, kind: LossKind) -> f64 {
        loss(
            &render_image(scene, cam, &RenderSettings::default()),
            target,
            kind,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_gradients_match_differences() {
        let s = RenderSettings::default();
        let mut scene = synth_scene(11, 12, Layout::Cloud).unwrap();
        for g in &mut scene.gaussians {
            g.scale *= 2.0;
            g.opacity = g.opacity.min(0.8);
        }
        let cam = synth_cameras(11, 1, &scene, Rig::Orbit, 40, 36)
            .unwrap()
            .remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target =
            Image::from_data(40, 36, (0..40 * 36 * 3).map(|_| rng.gen()).collect()).unwrap();
        let kind = LossKind::L2;
        let (list, image) = render(&scene, &cam, &s);
        let g = gaussian_grads(
            &scene,
            &cam,
            &list,
            &backward(&list, &image, &target, kind, &s).unwrap(),
        );
        let h = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() <= 2e-4 * a.abs().max(b.abs()) + 1e-9;
        let mut checked = 0;
        for i in 0..scene.len() {
            if !list.splats.iter().any(|s| s.index == i) {
                continue;
            }
            checked += 1;
            let probe = |f: &dyn Fn(&mut Gaussian, f64)| {
                let mut p = scene.clone();
                let mut m = scene.clone();
                f(&mut p.gaussians[i], h);
                f(&mut m.gaussians[i], -h);
                (loss_of(&p, &cam, &target, kind) - loss_of(&m, &cam, &target, kind)) / (2.0 * h)
            };
            for k in 0..3 {
                let a = probe(&|gs, e| gs.position[k] += e);
                assert!(
                    close(g.position[i][k], a),
                    "pos {i} {k}: {} vs {a}",
                    g.position[i][k]
                );
                let a = probe(&|gs, e| gs.scale[k] += e);
                assert!(
                    close(g.scale[i][k], a),
                    "scale {i} {k}: {} vs {a}",
                    g.scale[i][k]
                );
                let a = probe(&|gs, e| gs.color[k] += e);
                assert!(close(g.color[i][k], a), "color {i} {k}");
            }
            let a = probe(&|gs, e| gs.opacity += e);
            assert!(close(g.opacity[i], a), "opacity {i}");
            let qs = [
                |q: &mut UnitQuaternion, e: f64| q.w += e,
                |q: &mut UnitQuaternion, e: f64| q.x += e,
                |q: &mut UnitQuaternion, e: f64| q.y += e,
                |q: &mut UnitQuaternion, e: f64| q.z += e,
            ];
            for (k, f) in qs.iter().enumerate() {
                let a = probe(&|gs, e| f(&mut gs.rotation, e));
                assert!(
                    close(g.rotation[i][k], a),
                    "rot {i} {k}: {} vs {a}",
                    g.rotation[i][k]
                );
            }
        }
        assert!(checked >= 5);
    }

    #[test]
    fn single_gaussian_color_converges() {
        let s = RenderSettings::default();
        let truth = GaussianScene::new(vec![Gaussian {
            position: Vector3::zeros(),
            scale: Vector3::new(0.3, 0.25, 0.2),
            rotation: UnitQuaternion::IDENTITY,
            opacity: 0.9,
            color: [0.8, 0.3, 0.5],
        }]);
        let cams: Vec<Camera> = (0..4)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_2;
                Camera::look_at(
                    Vector3::new(3.0 * a.sin(), 0.0, -3.0 * a.cos()),
                    Vector3::zeros(),
                    Vector3::y(),
                    0.6,
                    24,
                    24,
                )
                .unwrap()
            })
            .collect();
        let targets: Vec<Image> = cams.iter().map(|c| render_image(&truth, c, &s)).collect();
        let mut scene = truth.clone();
        scene.gaussians[0].color = [0.2, 0.6, 0.1];
        let lr = ModelLr {
            position: 0.0,
            scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            color: 1e-2,
        };
        let mut trainer = ModelTrainer::new(&scene, lr, AdamConfig::default(), 5);
        model_train_steps(
            &mut scene,
            &cams,
            &targets,
            &[0, 1, 2, 3],
            500,
            &mut trainer,
            LossKind::L1,
            &s,
        )
        .unwrap();
        for k in 0..3 {
            assert!(
                (scene.gaussians[0].color[k] - truth.gaussians[0].color[k]).abs() < 1e-2,
                "{:?}",
                scene.gaussians[0].color
            );
        }
    }

    #[test]
    fn step_count_and_determinism() {
        let s = RenderSettings::default();
        let truth = synth_scene(4, 60, Layout::Cloud).unwrap();
        let cams = synth_cameras(4, 3, &truth, Rig::Orbit, 32, 32).unwrap();
        let targets: Vec<Image> = cams.iter().map(|c| render_image(&truth, c, &s)).collect();
        let run = |m: usize| {
            let mut scene = truth.clone();
            for g in &mut scene.gaussians {
                g.position.x += 0.01;
            }
            let mut tr = ModelTrainer::new(&scene, ModelLr::default(), AdamConfig::default(), 9);
            let trace = model_train_steps(
                &mut scene,
                &cams,
                &targets,
                &[0, 1, 2],
                m,
                &mut tr,
                LossKind::L1,
                &s,
            )
            .unwrap();
            (trace, scene, tr.steps_taken)
        };
        let (t1, _, n1) = run(1);
        assert_eq!((t1.len(), n1), (1, 1));
        let (ta, sa, _) = run(20);
        let (tb, sb, _) = run(20);
        assert_eq!(
            ta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            tb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(sa, sb);
        let mut scene = truth.clone();
        let mut tr = ModelTrainer::new(&scene, ModelLr::default(), AdamConfig::default(), 9);
        assert!(model_train_steps(
            &mut scene,
            &cams,
            &targets,
            &[0],
            0,
            &mut tr,
            LossKind::L1,
            &s
        )
        .is_err());
    }
}
