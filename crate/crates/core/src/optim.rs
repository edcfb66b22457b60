//! Adam with per-parameter learning rates, and the camera parameter
//! vectors it steps.

use serde::{Deserialize, Serialize};

use crate::camgrad::CameraGrad;
use crate::error::{Error, Result};
use crate::geometry::{Camera, UnitQuaternion, FOV_MAX, FOV_MIN};
use crate::reparam::ReparamFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Applied steps.
    pub n: u64,
    /// Steps rejected for a non-finite gradient.
    pub skipped: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            n: 0,
            skipped: 0,
            config,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.n = 0;
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// A gradient with any non-finite entry leaves params and moments
    /// untouched, bumps `skipped` and returns `NonFiniteGradient`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) -> Result<()> {
        let d = self.m.len();
        for len in [params.len(), grad.len(), lr.len()] {
            if len != d {
                return Err(Error::dims(d, len));
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!(
                "skipping optimizer step {}: non-finite gradient",
                self.n + 1
            );
            return Err(Error::NonFiniteGradient);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.n += 1;
        let c1 = 1.0 - beta1.powf(self.n as f64);
        let c2 = 1.0 - beta2.powf(self.n as f64);
        for i in 0..d {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr[i] * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Camera learning rates. `translation` is relative to the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraLr {
    pub translation: f64,
    pub quaternion: f64,
    pub fov: f64,
    pub abc: f64,
}

impl Default for CameraLr {
    fn default() -> Self {
        CameraLr {
            translation: 1e-3,
            quaternion: 1e-4,
            fov: 1e-4,
            abc: 1e-3,
        }
    }
}

/// Gaussian learning rates. `position` is relative to the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelLr {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for ModelLr {
    fn default() -> Self {
        ModelLr {
            position: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

/// Flags raised while mapping an optimizer vector back to a camera.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectFlags {
    pub fov_clamped: bool,
}

/// Renormalizes the quaternion and clamps both fields of view of a raw
/// `[tx, ty, tz, qw, qx, qy, qz, φx, φy]` vector.
pub fn project_camera_params(p: [f64; 9]) -> Result<([f64; 9], ProjectFlags)> {
    let q = UnitQuaternion::new(p[3], p[4], p[5], p[6]).normalize()?;
    let mut out = p;
    out[3..7].copy_from_slice(&q.to_array());
    let mut flags = ProjectFlags::default();
    for f in &mut out[7..9] {
        let c = f.clamp(FOV_MIN, FOV_MAX);
        flags.fov_clamped |= c != *f;
        *f = c;
    }
    Ok((out, flags))
}

/// Adam over one camera, in either the raw layout
/// `[tx, ty, tz, q(4), φx, φy]` or, once a frame is set, the
/// reparameterized layout `[tx, ty, q(4), a, b, c]`.
#[derive(Debug, Clone)]
pub struct CameraOptimizer {
    pub adam: AdamState,
    frame: Option<ReparamFrame>,
    x: [f64; 9],
    lr: [f64; 9],
    base_lr: CameraLr,
    extent: f64,
    train_fov: bool,
}

impl CameraOptimizer {
    pub fn new(
        camera: &Camera,
        lr: CameraLr,
        extent: f64,
        train_fov: bool,
        adam: AdamConfig,
    ) -> Self {
        let mut o = CameraOptimizer {
            adam: AdamState::new(9, adam),
            frame: None,
            x: [0.0; 9],
            lr: [0.0; 9],
            base_lr: lr,
            extent,
            train_fov,
        };
        o.rebuild_lr();
        o.resync(camera);
        o
    }

    fn rebuild_lr(&mut self) {
        let l = &self.base_lr;
        let t = l.translation * self.extent;
        self.lr = match self.frame {
            None => {
                let f = if self.train_fov { l.fov } else { 0.0 };
                [
                    t,
                    t,
                    t,
                    l.quaternion,
                    l.quaternion,
                    l.quaternion,
                    l.quaternion,
                    f,
                    f,
                ]
            }
            Some(_) => [
                t,
                t,
                l.quaternion,
                l.quaternion,
                l.quaternion,
                l.quaternion,
                l.abc,
                l.abc,
                l.abc,
            ],
        };
    }

    pub fn frame(&self) -> Option<&ReparamFrame> {
        self.frame.as_ref()
    }

    pub fn learning_rates(&self) -> &[f64; 9] {
        &self.lr
    }

    /// Switches to the reparameterized layout (or back to raw with `None`),
    /// re-reads the optimizer vector from `camera` and resets Adam.
    pub fn set_frame(&mut self, frame: Option<ReparamFrame>, camera: &Camera) {
        self.frame = frame;
        self.rebuild_lr();
        self.adam.reset();
        self.resync(camera);
    }

    /// Re-reads the optimizer vector from `camera` (after an external
    /// change such as a best-state rollback). Adam moments are kept.
    pub fn resync(&mut self, camera: &Camera) {
        let q = camera.q.to_array();
        self.x = match &self.frame {
            None => [
                camera.t.x,
                camera.t.y,
                camera.t.z,
                q[0],
                q[1],
                q[2],
                q[3],
                camera.fov_x,
                camera.fov_y,
            ],
            Some(f) => {
                let abc = f.params_to_abc([camera.t.z, camera.fov_x, camera.fov_y]);
                [
                    camera.t.x, camera.t.y, q[0], q[1], q[2], q[3], abc[0], abc[1], abc[2],
                ]
            }
        };
    }

    pub fn vector(&self) -> &[f64; 9] {
        &self.x
    }

    /// Maps a camera gradient into the optimizer layout.
    pub fn grad_vector(&self, g: &CameraGrad) -> [f64; 9] {
        match &self.frame {
            None => g.to_array(),
            Some(f) => {
                let abc = f.grad_abc(g);
                [
                    g.d_t.x, g.d_t.y, g.d_q[0], g.d_q[1], g.d_q[2], g.d_q[3], abc[0], abc[1],
                    abc[2],
                ]
            }
        }
    }

    /// The raw camera parameters currently encoded by the optimizer vector.
    fn raw_params(&self) -> ([f64; 9], bool) {
        match &self.frame {
            None => (self.x, false),
            Some(f) => {
                let x = &self.x;
                let (p, clamped) = f.abc_to_params([x[6], x[7], x[8]]);
                (
                    [x[0], x[1], p[0], x[2], x[3], x[4], x[5], p[1], p[2]],
                    clamped,
                )
            }
        }
    }

    /// One Adam step followed by projection onto valid cameras; `camera`
    /// is overwritten with the result.
    pub fn step(&mut self, camera: &mut Camera, grad: &CameraGrad) -> Result<ProjectFlags> {
        let g = self.grad_vector(grad);
        let lr = self.lr;
        self.adam.step(&mut self.x, &g, &lr)?;
        let (raw, abc_clamped) = self.raw_params();
        let (p, mut flags) = project_camera_params(raw)?;
        flags.fov_clamped |= abc_clamped;
        // keep the stored quaternion unit so Adam sees the projected state
        let q_off = if self.frame.is_some() { 2 } else { 3 };
        self.x[q_off..q_off + 4].copy_from_slice(&p[3..7]);
        if self.frame.is_none() {
            self.x[7] = p[7];
            self.x[8] = p[8];
        }
        camera.t = nalgebra::Vector3::new(p[0], p[1], p[2]);
        camera.q = UnitQuaternion::new(p[3], p[4], p[5], p[6]);
        camera.fov_x = p[7];
        camera.fov_y = p[8];
        Ok(flags)
    }
}
