//! Interleaved model/camera training with EMA early stopping.
//!
//! Each phase runs a block of model steps and then fine-tunes every camera
//! in turn. A camera stops once it has taken `min_steps` steps and its EMA
//! of per-step PSNR gains falls strictly below the threshold, or when it
//! reaches `max_steps`.

mod model;
mod report;

use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub use model::{gaussian_grads, model_train_steps, GaussianGrads, ModelTrainer};
pub use report::{
    CalibrationReport, CameraPhaseEntry, PhaseEntry, Savings, StopReason, TracePoint,
};

use crate::camgrad::chain_uv_gradients;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::optim::{AdamConfig, CameraLr, CameraOptimizer, ModelLr};
use crate::renderer::{
    cull_and_project, psnr_from_mse, render_and_backward, Image, LossKind, RenderSettings,
    SplatList,
};
use crate::reparam::{entangled_params, estimate_hessian, HessianSteps, ReparamFrame};
use crate::scene::GaussianScene;

/// Exponential moving average of PSNR progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaScore {
    pub s: f64,
    pub beta: f64,
    pub steps_seen: u64,
}

impl EmaScore {
    pub fn new(beta: f64) -> Self {
        EmaScore {
            s: 0.0,
            beta,
            steps_seen: 0,
        }
    }

    pub fn update(&mut self, psnr_prev: f64, psnr_next: f64) -> f64 {
        self.s = self.s * (1.0 - self.beta) + self.beta * (psnr_next - psnr_prev);
        self.steps_seen += 1;
        self.s
    }
}

/// Stop reason after step `n` with score `s`, or `None` to continue.
pub fn stop_rule(n: usize, s: f64, cfg: &ScheduleConfig) -> Option<StopReason> {
    if n >= cfg.min_steps && s < cfg.threshold {
        Some(StopReason::Threshold)
    } else if n >= cfg.max_steps {
        Some(StopReason::MaxSteps)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Model steps before each camera block.
    pub model_steps: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// EMA threshold, dB per step.
    pub threshold: f64,
    pub ema_beta: f64,
    pub n_phases: usize,
    pub camera_loss: LossKind,
    pub model_loss: LossKind,
    /// Phase after which the (z, φx, φy) eigenbasis is installed; 0 never.
    pub reparam_after_phase: usize,
    /// Re-estimate the Hessian every this many phases after the first
    /// estimate; 0 never.
    pub hessian_refresh: usize,
    pub train_fov: bool,
    pub keep_best: bool,
    pub refine_heldout: bool,
    /// PSNR is measured on every `psnr_stride`-th row and column.
    pub psnr_stride: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub camera_lr: CameraLr,
    pub model_lr: ModelLr,
    /// Hessian steps relative to scene extent (z) and in radians (fov).
    pub hessian_eps_z: f64,
    pub hessian_eps_fov: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            model_steps: 3000,
            min_steps: 100,
            max_steps: 1000,
            threshold: 0.0002,
            ema_beta: 1.0 / 50.0,
            n_phases: 5,
            camera_loss: LossKind::L2,
            model_loss: LossKind::L1,
            reparam_after_phase: 1,
            hessian_refresh: 0,
            train_fov: true,
            keep_best: false,
            refine_heldout: false,
            psnr_stride: 1,
            seed: 0,
            adam: AdamConfig::default(),
            camera_lr: CameraLr::default(),
            model_lr: ModelLr::default(),
            hessian_eps_z: 1e-3,
            hessian_eps_fov: 1e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_steps > self.max_steps {
            return bad("min_steps must not exceed max_steps");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.threshold >= 0.0) {
            return bad("threshold must be non-negative");
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return bad("ema_beta must lie in (0, 1)");
        }
        if self.model_steps == 0 {
            return bad("model_steps must be at least 1");
        }
        if self.psnr_stride == 0 {
            return bad("psnr_stride must be at least 1");
        }
        if !(self.hessian_eps_z > 0.0 && self.hessian_eps_fov > 0.0) {
            return bad("hessian steps must be positive");
        }
        Ok(())
    }

    /// Reparameterization is active only when fields of view are trained.
    pub fn reparam_enabled(&self) -> bool {
        self.reparam_after_phase > 0 && self.train_fov
    }
}

/// PSNR over every `stride`-th row and column.
pub fn psnr_strided(image: &Image, target: &Image, stride: usize) -> Result<f64> {
    image.same_dims(target)?;
    let (w, h) = (image.width as usize, image.height as usize);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in (0..h).step_by(stride.max(1)) {
        for x in (0..w).step_by(stride.max(1)) {
            let p = 3 * (y * w + x);
            for k in 0..3 {
                let d = image.data[p + k] - target.data[p + k];
                sum += d * d;
            }
            count += 3;
        }
    }
    Ok(psnr_from_mse(sum / count as f64))
}

/// What a camera phase needs from the thing being optimized.
pub trait PhaseObjective {
    /// PSNR of the current state.
    fn initial_psnr(&mut self) -> Result<f64>;
    /// Takes one optimization step and returns the PSNR of the new state.
    fn step(&mut self) -> Result<f64>;
    /// Remembers the current state as the best so far.
    fn mark_best(&mut self) {}
    /// Returns to the state recorded by `mark_best`.
    fn restore_best(&mut self) -> Result<f64> {
        Err(Error::Config("this objective cannot roll back".into()))
    }
}

/// Outcome of one camera phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRun {
    pub steps: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub stop: StopReason,
    pub final_score: f64,
    pub trace: Vec<TracePoint>,
}

/// The early-stopping loop, generic over the objective.
pub fn run_camera_phase<O: PhaseObjective>(obj: &mut O, cfg: &ScheduleConfig) -> Result<PhaseRun> {
    let psnr0 = obj.initial_psnr()?;
    let mut ema = EmaScore::new(cfg.ema_beta);
    let mut prev = psnr0;
    let mut best = psnr0;
    if cfg.keep_best {
        obj.mark_best();
    }
    let mut trace = Vec::new();
    let mut n = 0;
    let stop = loop {
        n += 1;
        let next = match obj.step() {
            Ok(p) => p,
            Err(Error::EmptyFrustum) if n == 1 => return Err(Error::EmptyFrustum),
            Err(Error::EmptyFrustum) => {
                n -= 1;
                break StopReason::EmptyFrustum;
            }
            Err(e) => return Err(e),
        };
        let s = ema.update(prev, next);
        trace.push(TracePoint {
            step: n,
            psnr: next,
            score: s,
        });
        prev = next;
        if cfg.keep_best && next > best {
            best = next;
            obj.mark_best();
        }
        if let Some(r) = stop_rule(n, s, cfg) {
            break r;
        }
    };
    let mut after = prev;
    if cfg.keep_best && best > prev {
        after = obj.restore_best()?;
    }
    Ok(PhaseRun {
        steps: n,
        psnr_before: psnr0,
        psnr_after: after,
        stop,
        final_score: ema.s,
        trace,
    })
}

/// A real camera being fine-tuned against its target image.
pub struct CameraObjective<'a> {
    pub scene: &'a GaussianScene,
    pub camera: &'a mut Camera,
    pub target: &'a Image,
    pub optimizer: &'a mut CameraOptimizer,
    pub kind: LossKind,
    pub settings: &'a RenderSettings,
    pub stride: usize,
    // splat list and dL/duv of the latest render
    current: Option<(SplatList, Vec<Vector2<f64>>)>,
    best: Option<Camera>,
    pub fov_clamped: bool,
}

impl<'a> CameraObjective<'a> {
    pub fn new(
        scene: &'a GaussianScene,
        camera: &'a mut Camera,
        target: &'a Image,
        optimizer: &'a mut CameraOptimizer,
        kind: LossKind,
        settings: &'a RenderSettings,
        stride: usize,
    ) -> Self {
        CameraObjective {
            scene,
            camera,
            target,
            optimizer,
            kind,
            settings,
            stride,
            current: None,
            best: None,
            fov_clamped: false,
        }
    }

    fn rerender(&mut self) -> Result<f64> {
        let list = cull_and_project(self.scene, self.camera, self.settings);
        let (image, grads) = render_and_backward(&list, self.target, self.kind, self.settings)?;
        let p = psnr_strided(&image, self.target, self.stride)?;
        self.current = Some((list, grads.d_uv));
        Ok(p)
    }
}

impl PhaseObjective for CameraObjective<'_> {
    fn initial_psnr(&mut self) -> Result<f64> {
        self.rerender()
    }

    fn step(&mut self) -> Result<f64> {
        if self.current.is_none() {
            self.rerender()?;
        }
        let (list, d_uv) = self.current.as_ref().expect("rendered above");
        if list.is_empty() {
            return Err(Error::EmptyFrustum);
        }
        let g = chain_uv_gradients(self.scene, self.camera, list, d_uv);
        match self.optimizer.step(self.camera, &g) {
            Ok(flags) => self.fov_clamped |= flags.fov_clamped,
            // a skipped update leaves the camera where it was
            Err(Error::NonFiniteGradient) => {}
            Err(e) => return Err(e),
        }
        self.rerender()
    }

    fn mark_best(&mut self) {
        self.best = Some(self.camera.clone());
    }

    fn restore_best(&mut self) -> Result<f64> {
        if let Some(b) = self.best.clone() {
            *self.camera = b;
            self.optimizer.resync(self.camera);
        }
        self.rerender()
    }
}

/// Fine-tunes one camera until the stop rule fires.
#[allow(clippy::too_many_arguments)]
pub fn camera_phase(
    scene: &GaussianScene,
    camera: &mut Camera,
    target: &Image,
    cfg: &ScheduleConfig,
    optimizer: &mut CameraOptimizer,
    settings: &RenderSettings,
) -> Result<(PhaseRun, bool)> {
    if camera.width != target.width || camera.height != target.height {
        return Err(Error::dims(
            format!("{}×{}", camera.width, camera.height),
            format!("{}×{}", target.width, target.height),
        ));
    }
    let mut obj = CameraObjective::new(
        scene,
        camera,
        target,
        optimizer,
        cfg.camera_loss,
        settings,
        cfg.psnr_stride,
    );
    let run = run_camera_phase(&mut obj, cfg)?;
    Ok((run, obj.fov_clamped))
}

fn phase_entry(
    camera: usize,
    result: Result<(PhaseRun, bool)>,
    skipped_updates: u64,
) -> Result<CameraPhaseEntry> {
    match result {
        Ok((run, fov_clamped)) => Ok(CameraPhaseEntry {
            camera,
            steps: run.steps,
            psnr_before: run.psnr_before,
            psnr_after: run.psnr_after,
            stop: run.stop,
            final_score: run.final_score,
            fov_clamped,
            skipped_updates,
            trace: run.trace,
        }),
        Err(Error::EmptyFrustum) => Ok(CameraPhaseEntry::skipped(camera, StopReason::EmptyFrustum)),
        Err(Error::ZeroQuaternion) | Err(Error::NonFiniteGradient) => Ok(
            CameraPhaseEntry::skipped(camera, StopReason::NumericalFailure),
        ),
        Err(e) => Err(e),
    }
}

/// Installs a fresh Hessian eigenbasis on every camera in `which`.
#[allow(clippy::too_many_arguments)]
fn reparameterize(
    scene: &GaussianScene,
    cameras: &[Camera],
    targets: &[Image],
    which: &[usize],
    optimizers: &mut [CameraOptimizer],
    frames: &mut [Option<ReparamFrame>],
    cfg: &ScheduleConfig,
    settings: &RenderSettings,
) -> Result<()> {
    let steps = HessianSteps {
        z: cfg.hessian_eps_z * scene.extent,
        fov: cfg.hessian_eps_fov,
    };
    for &c in which {
        let anchor = entangled_params(&cameras[c]);
        let frame = match estimate_hessian(
            scene,
            &cameras[c],
            &targets[c],
            cfg.camera_loss,
            &steps,
            settings,
        ) {
            Ok(h) => {
                let (f, degenerate) = ReparamFrame::from_hessian(anchor, &h);
                if degenerate {
                    log::info!("camera {c}: degenerate hessian, keeping the identity basis");
                }
                f
            }
            Err(Error::EmptyFrustum) | Err(Error::BehindCamera { .. }) => {
                ReparamFrame::identity(anchor)
            }
            Err(e) => return Err(e),
        };
        optimizers[c].set_frame(Some(frame), &cameras[c]);
        frames[c] = Some(frame);
    }
    Ok(())
}

/// The full loop: `n_phases` × (model block, then every camera in input
/// order). `heldout[c]` marks cameras that never drive model training; they
/// are refined only with `refine_heldout`, after the last phase, against
/// the frozen model.
pub fn calibrate(
    scene: &mut GaussianScene,
    cameras: &mut [Camera],
    targets: &[Image],
    heldout: &[bool],
    cfg: &ScheduleConfig,
    settings: &RenderSettings,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if cameras.is_empty() {
        return Err(Error::Config(
            "calibration needs at least one camera".into(),
        ));
    }
    if cameras.len() != targets.len() {
        return Err(Error::dims(cameras.len(), targets.len()));
    }
    if heldout.len() != cameras.len() {
        return Err(Error::dims(cameras.len(), heldout.len()));
    }
    for (c, t) in cameras.iter().zip(targets) {
        c.validate()?;
        if c.width != t.width || c.height != t.height {
            return Err(Error::dims(
                format!("{}×{}", c.width, c.height),
                format!("{}×{}", t.width, t.height),
            ));
        }
    }
    let train: Vec<usize> = (0..cameras.len()).filter(|&c| !heldout[c]).collect();
    let held: Vec<usize> = (0..cameras.len()).filter(|&c| heldout[c]).collect();
    if train.is_empty() {
        return Err(Error::Config("every camera is held out".into()));
    }

    let extent = scene.extent;
    let mut optimizers: Vec<CameraOptimizer> = cameras
        .iter()
        .map(|c| CameraOptimizer::new(c, cfg.camera_lr, extent, cfg.train_fov, cfg.adam))
        .collect();
    let mut frames: Vec<Option<ReparamFrame>> = vec![None; cameras.len()];
    let mut trainer = ModelTrainer::new(scene, cfg.model_lr, cfg.adam, cfg.seed);
    let mut report = CalibrationReport::default();

    for phase in 1..=cfg.n_phases {
        let start = Instant::now();
        let model_loss = model_train_steps(
            scene,
            cameras,
            targets,
            &train,
            cfg.model_steps,
            &mut trainer,
            cfg.model_loss,
            settings,
        )?;
        let mut entries = Vec::with_capacity(train.len());
        for &c in &train {
            let before = optimizers[c].adam.skipped;
            let r = camera_phase(
                scene,
                &mut cameras[c],
                &targets[c],
                cfg,
                &mut optimizers[c],
                settings,
            );
            entries.push(phase_entry(c, r, optimizers[c].adam.skipped - before)?);
        }
        let first = cfg.reparam_enabled() && phase == cfg.reparam_after_phase;
        let refresh = cfg.reparam_enabled()
            && cfg.hessian_refresh > 0
            && phase > cfg.reparam_after_phase
            && (phase - cfg.reparam_after_phase) % cfg.hessian_refresh == 0;
        let reparameterized = (first || refresh) && phase < cfg.n_phases;
        if reparameterized {
            reparameterize(
                scene,
                cameras,
                targets,
                &train,
                &mut optimizers,
                &mut frames,
                cfg,
                settings,
            )?;
        }
        report.phases.push(PhaseEntry {
            phase,
            model_loss,
            cameras: entries,
            reparameterized,
        });
        report.wall_times.push(start.elapsed().as_secs_f64());
    }

    if cfg.refine_heldout && !held.is_empty() {
        if cfg.reparam_enabled() {
            reparameterize(
                scene,
                cameras,
                targets,
                &held,
                &mut optimizers,
                &mut frames,
                cfg,
                settings,
            )?;
        }
        let mut entries = Vec::new();
        for &c in &held {
            let before = optimizers[c].adam.skipped;
            let r = camera_phase(
                scene,
                &mut cameras[c],
                &targets[c],
                cfg,
                &mut optimizers[c],
                settings,
            );
            entries.push(phase_entry(c, r, optimizers[c].adam.skipped - before)?);
        }
        report.heldout = Some(entries);
    }

    report.frames = frames;
    report.finish(cfg.max_steps);
    if report.all_cameras_failed() {
        return Err(Error::EmptyFrustum);
    }
    Ok(report)
}
