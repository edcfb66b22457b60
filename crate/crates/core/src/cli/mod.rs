//! Command-line front end: `synth`, `render`, `perturb`, `calibrate`,
//! `eval` and `hessian`.

mod config;
pub mod eval;

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{PerturbConfig, RunConfig, SynthConfig, TargetFormat};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::io::{self, ColmapReconstruction, NamedCamera};
use crate::renderer::{psnr, render_image, Image, LossKind};
use crate::reparam::{
    entangled_params, estimate_hessian, off_diagonal_mass, HessianSteps, ReparamFrame,
};
use crate::scene::{perturb_camera, synth_cameras, synth_scene, GaussianScene, Perturbation};
use crate::schedule::{calibrate, CalibrationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Domain(_)
        | Error::DimensionMismatch { .. }
        | Error::CameraIdMismatch(_)
        | Error::ZeroQuaternion
        | Error::BehindCamera { .. } => EXIT_CONFIG,
        Error::EmptyFrustum | Error::NonFiniteGradient => EXIT_NUMERICAL,
        Error::Io(_)
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::UnsupportedCameraModel(_)
        | Error::DanglingCameraRef { .. }
        | Error::PlyHeader(_)
        | Error::MissingProperty(_)
        | Error::ImageFormat { .. } => EXIT_IO,
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; keys missing from it keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set schedule.n_phases=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory (`out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Gaussian scene PLY (`scene`).
    #[arg(long, global = true)]
    pub scene: Option<PathBuf>,
    /// Directory with cameras.txt and images.txt (`calibration`).
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    /// Directory of target images (`targets`).
    #[arg(long, global = true)]
    pub targets: Option<PathBuf>,
    /// Worker threads (`threads`); SPLATCAL_THREADS also applies.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, cameras and target renders.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Render the scene from every camera of a calibration.
    Render,
    /// Mis-calibrate every camera and record the applied offsets.
    Perturb {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        dtheta_deg: Option<f64>,
        #[arg(long)]
        dfov: Option<f64>,
    },
    /// Refine a calibration and the scene against target images.
    Calibrate {
        /// Keep the raw (z, fov) parameters in every phase.
        #[arg(long)]
        no_reparam: bool,
        /// Hold the fields of view fixed.
        #[arg(long)]
        no_fov: bool,
        /// Camera-phase loss, `l1` or `l2`.
        #[arg(long)]
        camera_loss: Option<LossKind>,
        /// Number of alternating phases (`schedule.n_phases`).
        #[arg(long)]
        phases: Option<usize>,
    },
    /// Compare a calibration with a reference one.
    Eval {
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Loss Hessian over (z, fov_x, fov_y) and its eigenbasis per camera.
    Hessian,
}

impl clap::ValueEnum for LossKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[LossKind::L1, LossKind::L2]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "splatcal",
    version,
    about = "Refine camera calibrations against a gaussian-splat scene"
)]
struct Invocation {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Folds flags into configuration overrides, so every flag is a RunConfig
/// key under another name.
fn overrides(common: &Common, command: &Command) -> Vec<String> {
    let mut o = common.set.clone();
    let path = |k: &str, p: &Option<PathBuf>, o: &mut Vec<String>| {
        if let Some(p) = p {
            o.push(format!(
                "{k}={}",
                serde_json::to_string(p).expect("path serializes")
            ));
        }
    };
    path("out", &common.out, &mut o);
    path("scene", &common.scene, &mut o);
    path("calibration", &common.calibration, &mut o);
    path("targets", &common.targets, &mut o);
    if let Some(t) = common.threads {
        o.push(format!("threads={t}"));
    }
    let mut num = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{k}={v}"));
        }
    };
    match command {
        Command::Synth { seed, n } => {
            num("synth.seed", seed.map(|v| v.to_string()));
            num("synth.n_gaussians", n.map(|v| v.to_string()));
        }
        Command::Perturb {
            seed,
            dt,
            dtheta_deg,
            dfov,
        } => {
            num("perturb.seed", seed.map(|v| v.to_string()));
            num("perturb.dt", dt.map(|v| v.to_string()));
            num("perturb.dtheta_deg", dtheta_deg.map(|v| v.to_string()));
            num("perturb.dfov", dfov.map(|v| v.to_string()));
        }
        Command::Calibrate {
            no_reparam,
            no_fov,
            camera_loss,
            phases,
        } => {
            if *no_reparam {
                num("schedule.reparam_after_phase", Some("0".into()));
            }
            if *no_fov {
                num("schedule.train_fov", Some("false".into()));
            }
            num(
                "schedule.camera_loss",
                camera_loss.map(|l| format!("\"{}\"", if l == LossKind::L1 { "l1" } else { "l2" })),
            );
            num("schedule.n_phases", phases.map(|v| v.to_string()));
        }
        Command::Eval { reference } => path("reference", reference, &mut o),
        Command::Render | Command::Hessian => {}
    }
    o
}

/// Parses arguments, runs one command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match Invocation::try_parse_from(args) {
        Ok(i) => i,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::load(
        inv.common.config.as_deref(),
        &overrides(&inv.common, &inv.command),
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match execute(&inv.command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command with a validated configuration.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    let threads = match std::env::var("SPLATCAL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("SPLATCAL_THREADS=`{v}` is not a count")))?,
        Err(_) => cfg.threads,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cfg.out)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    std::fs::write(cfg.out.join("effective_config.json"), cfg.to_json())?;
    pool.install(|| match command {
        Command::Synth { .. } => cmd_synth(cfg),
        Command::Render => cmd_render(cfg),
        Command::Perturb { .. } => cmd_perturb(cfg),
        Command::Calibrate { .. } => cmd_calibrate(cfg).map(|_| ()),
        Command::Eval { .. } => cmd_eval(cfg).map(|_| ()),
        Command::Hessian => cmd_hessian(cfg),
    })
}

/// Exclusive marker file in the output directory, removed on drop.
struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".splatcal.lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Io(std::io::Error::new(
                        e.kind(),
                        format!(
                            "{} is locked by another run (remove {} if stale)",
                            dir.display(),
                            path.display()
                        ),
                    ))
                } else {
                    Error::Io(e)
                }
            })?;
        Ok(OutputLock { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

fn load_scene(cfg: &RunConfig) -> Result<GaussianScene> {
    io::read_scene_file(required(&cfg.scene, "scene")?)
}

fn load_calibration(cfg: &RunConfig) -> Result<(ColmapReconstruction, Vec<NamedCamera>)> {
    let recon = io::read_colmap_dir(required(&cfg.calibration, "calibration")?)?;
    let cams = recon.cameras()?;
    Ok((recon, cams))
}

fn load_targets(cfg: &RunConfig, cams: &[NamedCamera]) -> Result<Vec<Image>> {
    let dir = required(&cfg.targets, "targets")?;
    cams.iter()
        .map(|c| {
            let img = io::read_image_file(&dir.join(&c.name))?;
            if (img.width, img.height) != (c.camera.width, c.camera.height) {
                return Err(Error::dims(
                    format!("{}×{} for {}", c.camera.width, c.camera.height, c.name),
                    format!("{}×{}", img.width, img.height),
                ));
            }
            Ok(img)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Scene, calibration (`sparse/`) and one rendered target per camera
/// (`images/`). Scene and cameras are passed through their file formats
/// before rendering, so re-rendering from the written files reproduces the
/// targets.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    let raw = synth_scene(s.seed, s.n_gaussians, s.layout)?;
    let ply = io::write_ply_gaussians(&raw)?;
    let scene = io::read_ply_gaussians(&ply)?;
    let cams = synth_cameras(s.seed, s.n_cameras, &scene, s.rig, s.width, s.height)?;
    let names: Vec<String> = (0..cams.len())
        .map(|k| format!("cam_{k:03}.{}", cfg.image_format.extension()))
        .collect();
    let recon = ColmapReconstruction::from_cameras(names.iter().map(String::as_str).zip(&cams))?;
    let (ct, it) = io::write_colmap_text(&recon);
    let cams = io::parse_colmap_text(&ct, &it)?.cameras()?;
    std::fs::write(cfg.out.join("scene.ply"), ply)?;
    io::write_colmap_dir(&cfg.out.join("sparse"), &recon)?;
    write_renders(&cfg.out.join("images"), &scene, &cams, cfg)?;
    log::info!(
        "synth: {} gaussians, {} cameras → {}",
        scene.len(),
        cams.len(),
        cfg.out.display()
    );
    Ok(())
}

fn write_renders(
    dir: &Path,
    scene: &GaussianScene,
    cams: &[NamedCamera],
    cfg: &RunConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in cams {
        let img = render_image(scene, &c.camera, &cfg.render);
        io::write_image_file(&dir.join(&c.name), &img)?;
    }
    Ok(())
}

pub fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let scene = load_scene(cfg)?;
    let (_, cams) = load_calibration(cfg)?;
    write_renders(&cfg.out.join("images"), &scene, &cams, cfg)
}

#[derive(Debug, Clone, Serialize)]
struct PerturbRecord {
    image_id: u32,
    name: String,
    seed: u64,
    perturbation: Perturbation,
}

/// Perturbed `sparse/` plus `perturbation.json` with the exact offsets.
pub fn cmd_perturb(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.perturb;
    let (mut recon, cams) = load_calibration(cfg)?;
    let dt = if p.relative_to_extent {
        let scene = load_scene(cfg).map_err(|e| match e {
            Error::Config(_) => Error::Config("perturb.relative_to_extent needs `scene`".into()),
            e => e,
        })?;
        p.dt * scene.extent
    } else {
        p.dt
    };
    let mut out = Vec::with_capacity(cams.len());
    let mut records = Vec::with_capacity(cams.len());
    for (k, c) in cams.iter().enumerate() {
        let seed = p.seed.wrapping_add(k as u64);
        let (moved, rec) = perturb_camera(&c.camera, seed, dt, p.dtheta_deg.to_radians(), p.dfov)?;
        out.push(moved);
        records.push(PerturbRecord {
            image_id: c.image_id,
            name: c.name.clone(),
            seed,
            perturbation: rec,
        });
    }
    recon.update(&out)?;
    io::write_colmap_dir(&cfg.out.join("sparse"), &recon)?;
    write_json(&cfg.out.join("perturbation.json"), &records)
}

/// Refined `sparse/` and `scene.ply`, `report.json` and `trace.csv`.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrationReport> {
    let mut scene = load_scene(cfg)?;
    let (mut recon, named) = load_calibration(cfg)?;
    let targets = load_targets(cfg, &named)?;
    for h in &cfg.heldout {
        if !named.iter().any(|c| &c.name == h) {
            return Err(Error::Config(format!(
                "held-out image `{h}` is not in the calibration"
            )));
        }
    }
    let heldout: Vec<bool> = named
        .iter()
        .map(|c| cfg.heldout.contains(&c.name))
        .collect();
    let mut cams: Vec<Camera> = named.iter().map(|c| c.camera.clone()).collect();
    let report = calibrate(
        &mut scene,
        &mut cams,
        &targets,
        &heldout,
        &cfg.schedule,
        &cfg.render,
    )?;
    for (k, t) in report.wall_times.iter().enumerate() {
        log::info!("phase {} took {t:.1} s", k + 1);
    }
    recon.update(&cams)?;
    io::write_colmap_dir(&cfg.out.join("sparse"), &recon)?;
    io::write_scene_file(&cfg.out.join("scene.ply"), &scene)?;
    std::fs::write(cfg.out.join("report.json"), report.to_json() + "\n")?;
    std::fs::write(cfg.out.join("trace.csv"), report.trace_csv())?;
    Ok(report)
}

/// `metrics.json` and `displacement_histogram.csv` comparing
/// `calibration` with `reference`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<eval::EvalReport> {
    let (_, cams) = load_calibration(cfg)?;
    let reference = io::read_colmap_dir(required(&cfg.reference, "reference")?)?.cameras()?;
    eval::match_cameras(&cams, &reference)?;
    let scene = cfg.scene.as_deref().map(io::read_scene_file).transpose()?;
    let psnrs = match (&scene, &cfg.targets) {
        (Some(s), Some(_)) => {
            let targets = load_targets(cfg, &cams)?;
            let v = cams
                .iter()
                .zip(&targets)
                .map(|(c, t)| psnr(&render_image(s, &c.camera, &cfg.render), t))
                .collect::<Result<Vec<f64>>>()?;
            Some(v)
        }
        _ => None,
    };
    let report = eval::evaluate(
        &cams,
        &reference,
        scene.as_ref(),
        psnrs.as_deref(),
        cfg.histogram_bin,
    )?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    std::fs::write(
        cfg.out.join("displacement_histogram.csv"),
        report.histogram_csv(),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct HessianRecord {
    image_id: u32,
    name: String,
    /// Parameters (z_c, φx, φy) at which the Hessian was taken.
    at: [f64; 3],
    hessian: [[f64; 3]; 3],
    asymmetry: f64,
    frame: ReparamFrame,
    degenerate: bool,
    off_diagonal_mass: f64,
}

/// `hessian.json`: per camera, the camera-loss Hessian over the entangled
/// parameters and the frame built from it.
pub fn cmd_hessian(cfg: &RunConfig) -> Result<()> {
    let scene = load_scene(cfg)?;
    let (_, cams) = load_calibration(cfg)?;
    let targets = load_targets(cfg, &cams)?;
    let steps = HessianSteps {
        z: cfg.schedule.hessian_eps_z * scene.extent,
        fov: cfg.schedule.hessian_eps_fov,
    };
    let mut out = Vec::new();
    for (c, t) in cams.iter().zip(&targets) {
        let h = estimate_hessian(
            &scene,
            &c.camera,
            t,
            cfg.schedule.camera_loss,
            &steps,
            &cfg.render,
        )?;
        let at = entangled_params(&c.camera);
        let (frame, degenerate) = ReparamFrame::from_hessian(at, &h);
        out.push(HessianRecord {
            image_id: c.image_id,
            name: c.name.clone(),
            at,
            hessian: h.h.transpose().into(),
            asymmetry: h.asymmetry,
            off_diagonal_mass: off_diagonal_mass(&h.h, &frame.basis),
            frame,
            degenerate,
        });
    }
    write_json(&cfg.out.join("hessian.json"), &out)
}
