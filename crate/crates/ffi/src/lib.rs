//! C ABI over `splatcal`.
//!
//! Objects are opaque handles created by `splatcal_*_new`/`load`/`synth`
//! functions and released with the matching `*_free`. Every fallible
//! function returns a [`SplatcalStatus`]; on failure a message is kept per
//! thread and read with [`splatcal_last_error`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use splatcal::camgrad::grad_camera;
use splatcal::cli::{exit_code, RunConfig, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL};
use splatcal::geometry::{Camera, UnitQuaternion};
use splatcal::io::{self, ColmapReconstruction};
use splatcal::renderer::{render_image, Image};
use splatcal::scene::{perturb_camera, synth_cameras, synth_scene, GaussianScene, Layout, Rig};
use splatcal::schedule::calibrate;
use splatcal::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplatcalStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration or argument value.
    Config = 2,
    /// File, parse or format failure.
    Io = 3,
    /// No camera could be optimized (nothing visible) or a non-finite value.
    Numerical = 4,
    /// Index out of range or caller buffer too small.
    OutOfRange = 5,
    /// Internal failure; the library state is unchanged.
    Panic = 6,
}

/// Gaussian scene.
pub struct SplatcalScene {
    scene: GaussianScene,
}

/// Ordered cameras with the reconstruction they were read from.
pub struct SplatcalCameras {
    recon: Option<ColmapReconstruction>,
    names: Vec<String>,
    cameras: Vec<Camera>,
}

/// RGB float image, row-major, 3 values per pixel.
pub struct SplatcalImage {
    image: Image,
}

/// Run configuration (JSON document with defaults).
pub struct SplatcalConfig {
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SplatcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match exit_code(&e) {
            EXIT_CONFIG => SplatcalStatus::Config,
            EXIT_IO => SplatcalStatus::Io,
            EXIT_NUMERICAL => SplatcalStatus::Numerical,
            _ => SplatcalStatus::Panic,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SplatcalStatus::NullArgument, format!("`{what}` is null"))
}

fn range(msg: String) -> Fail {
    Fail(SplatcalStatus::OutOfRange, msg)
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> SplatcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SplatcalStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            SplatcalStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mutable<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SplatcalStatus::Config, format!("`{what}` is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn splatcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn splatcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn splatcal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Synthetic scene. `layout` is `cloud`, `grid`, `textured_wall` or
/// `wall_and_cloud`.
///
/// # Safety
/// `layout` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_synth(
    seed: u64,
    n: usize,
    layout: *const c_char,
    out: *mut *mut SplatcalScene,
) -> SplatcalStatus {
    guard(|| {
        let layout: Layout = text(layout, "layout")?.parse()?;
        put(
            out,
            SplatcalScene {
                scene: synth_scene(seed, n, layout)?,
            },
        )
    })
}

/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_load_ply(
    path: *const c_char,
    out: *mut *mut SplatcalScene,
) -> SplatcalStatus {
    guard(|| {
        let scene = io::read_scene_file(&PathBuf::from(text(path, "path")?))?;
        put(out, SplatcalScene { scene })
    })
}

/// # Safety
/// `scene` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_save_ply(
    scene: *const SplatcalScene,
    path: *const c_char,
) -> SplatcalStatus {
    guard(|| {
        let s = reference(scene, "scene")?;
        io::write_scene_file(&PathBuf::from(text(path, "path")?), &s.scene)?;
        Ok(())
    })
}

/// Number of gaussians; 0 for a null handle.
///
/// # Safety
/// `scene` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_len(scene: *const SplatcalScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene.len())
}

/// Scene radius about the centroid; NaN for a null handle.
///
/// # Safety
/// `scene` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_extent(scene: *const SplatcalScene) -> f64 {
    scene.as_ref().map_or(f64::NAN, |s| s.scene.extent)
}

/// # Safety
/// `scene` must come from this library or be null, and is invalid after.
#[no_mangle]
pub unsafe extern "C" fn splatcal_scene_free(scene: *mut SplatcalScene) {
    release(scene)
}

/// `k` synthetic cameras framing `scene`. `rig` is `orbit` or `arc`.
///
/// # Safety
/// Pointers must be valid; `rig` a C string.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_synth(
    scene: *const SplatcalScene,
    seed: u64,
    k: usize,
    rig: *const c_char,
    width: u32,
    height: u32,
    out: *mut *mut SplatcalCameras,
) -> SplatcalStatus {
    guard(|| {
        let s = reference(scene, "scene")?;
        let rig: Rig = text(rig, "rig")?.parse()?;
        let cameras = synth_cameras(seed, k, &s.scene, rig, width, height)?;
        let names = (0..cameras.len()).map(|i| format!("cam_{i:03}")).collect();
        put(
            out,
            SplatcalCameras {
                recon: None,
                names,
                cameras,
            },
        )
    })
}

/// Reads `cameras.txt` and `images.txt` from `dir`, cameras in image-id
/// order.
///
/// # Safety
/// `dir` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_load_colmap(
    dir: *const c_char,
    out: *mut *mut SplatcalCameras,
) -> SplatcalStatus {
    guard(|| {
        let recon = io::read_colmap_dir(&PathBuf::from(text(dir, "dir")?))?;
        let named = recon.cameras()?;
        put(
            out,
            SplatcalCameras {
                names: named.iter().map(|c| c.name.clone()).collect(),
                cameras: named.into_iter().map(|c| c.camera).collect(),
                recon: Some(recon),
            },
        )
    })
}

/// Writes the cameras as COLMAP text into `dir`, keeping ids and shared
/// intrinsics of a loaded reconstruction.
///
/// # Safety
/// `cams` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_save_colmap(
    cams: *const SplatcalCameras,
    dir: *const c_char,
) -> SplatcalStatus {
    guard(|| {
        let c = reference(cams, "cams")?;
        let recon = match &c.recon {
            Some(r) => {
                let mut r = r.clone();
                r.update(&c.cameras)?;
                r
            }
            None => ColmapReconstruction::from_cameras(
                c.names.iter().map(String::as_str).zip(&c.cameras),
            )?,
        };
        io::write_colmap_dir(&PathBuf::from(text(dir, "dir")?), &recon)?;
        Ok(())
    })
}

/// # Safety
/// `cams` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_len(cams: *const SplatcalCameras) -> usize {
    cams.as_ref().map_or(0, |c| c.cameras.len())
}

fn camera_at(c: &SplatcalCameras, i: usize) -> Result<&Camera, Fail> {
    c.cameras.get(i).ok_or_else(|| {
        range(format!(
            "camera index {i} out of range (0..{})",
            c.cameras.len()
        ))
    })
}

/// World-to-camera pose and fields of view of camera `i`: `q` = (w, x, y,
/// z), `t`, `fov` = (x, y) radians. `size` receives (width, height); any
/// output may be null.
///
/// # Safety
/// Non-null outputs must hold 4, 3, 2 and 2 elements.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_get(
    cams: *const SplatcalCameras,
    i: usize,
    q: *mut f64,
    t: *mut f64,
    fov: *mut f64,
    size: *mut u32,
) -> SplatcalStatus {
    guard(|| {
        let c = camera_at(reference(cams, "cams")?, i)?;
        if !q.is_null() {
            ptr::copy_nonoverlapping(c.q.to_array().as_ptr(), q, 4);
        }
        if !t.is_null() {
            ptr::copy_nonoverlapping([c.t.x, c.t.y, c.t.z].as_ptr(), t, 3);
        }
        if !fov.is_null() {
            ptr::copy_nonoverlapping([c.fov_x, c.fov_y].as_ptr(), fov, 2);
        }
        if !size.is_null() {
            ptr::copy_nonoverlapping([c.width, c.height].as_ptr(), size, 2);
        }
        Ok(())
    })
}

/// Sets pose and fields of view of camera `i`; the camera is validated and
/// left unchanged on failure.
///
/// # Safety
/// `q`, `t` and `fov` must hold 4, 3 and 2 elements.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_set(
    cams: *mut SplatcalCameras,
    i: usize,
    q: *const f64,
    t: *const f64,
    fov: *const f64,
) -> SplatcalStatus {
    guard(|| {
        let c = mutable(cams, "cams")?;
        let (q, t, fov) = (
            reference(q, "q")?,
            reference(t, "t")?,
            reference(fov, "fov")?,
        );
        let q = std::slice::from_raw_parts(q, 4);
        let t = std::slice::from_raw_parts(t, 3);
        let fov = std::slice::from_raw_parts(fov, 2);
        let mut cam = camera_at(c, i)?.clone();
        cam.q = UnitQuaternion::new(q[0], q[1], q[2], q[3]).normalize()?;
        cam.t = [t[0], t[1], t[2]].into();
        cam.fov_x = fov[0];
        cam.fov_y = fov[1];
        cam.validate()?;
        c.cameras[i] = cam;
        Ok(())
    })
}

/// Perturbs every camera; camera `k` uses seed `seed + k`. `dt` in scene
/// units, `dtheta` in radians, `dfov` relative.
///
/// # Safety
/// `cams` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_perturb(
    cams: *mut SplatcalCameras,
    seed: u64,
    dt: f64,
    dtheta: f64,
    dfov: f64,
) -> SplatcalStatus {
    guard(|| {
        let c = mutable(cams, "cams")?;
        let moved = c
            .cameras
            .iter()
            .enumerate()
            .map(|(k, cam)| {
                Ok(perturb_camera(cam, seed.wrapping_add(k as u64), dt, dtheta, dfov)?.0)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        c.cameras = moved;
        Ok(())
    })
}

/// # Safety
/// `cams` must come from this library or be null, and is invalid after.
#[no_mangle]
pub unsafe extern "C" fn splatcal_cameras_free(cams: *mut SplatcalCameras) {
    release(cams)
}

/// Defaults, or the JSON document `json` (null for defaults) overlaid on
/// them. Unknown keys are rejected.
///
/// # Safety
/// `json` must be a valid C string or null; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_config_new(
    json: *const c_char,
    out: *mut *mut SplatcalConfig,
) -> SplatcalStatus {
    guard(|| {
        let config = if json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(text(json, "json")?, &[])?
        };
        put(out, SplatcalConfig { config })
    })
}

/// Applies one `key=value` override (dotted key, JSON value).
///
/// # Safety
/// `config` must be a live handle; `assignment` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn splatcal_config_set(
    config: *mut SplatcalConfig,
    assignment: *const c_char,
) -> SplatcalStatus {
    guard(|| {
        let c = mutable(config, "config")?;
        let a = text(assignment, "assignment")?;
        c.config = RunConfig::from_json(&c.config.to_json(), &[a.to_string()])?;
        Ok(())
    })
}

/// The effective configuration as JSON; free with `splatcal_string_free`.
///
/// # Safety
/// `config` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_config_to_json(
    config: *const SplatcalConfig,
    out: *mut *mut c_char,
) -> SplatcalStatus {
    guard(|| {
        let c = reference(config, "config")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(c.config.to_json())
            .expect("json has no nul")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null, and is invalid after.
#[no_mangle]
pub unsafe extern "C" fn splatcal_config_free(config: *mut SplatcalConfig) {
    release(config)
}

/// Renders camera `i` of `cams` with the render settings of `config`
/// (defaults when null).
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_render(
    scene: *const SplatcalScene,
    cams: *const SplatcalCameras,
    i: usize,
    config: *const SplatcalConfig,
    out: *mut *mut SplatcalImage,
) -> SplatcalStatus {
    guard(|| {
        let s = reference(scene, "scene")?;
        let cam = camera_at(reference(cams, "cams")?, i)?;
        let settings = config
            .as_ref()
            .map(|c| c.config.render.clone())
            .unwrap_or_default();
        put(
            out,
            SplatcalImage {
                image: render_image(&s.scene, cam, &settings),
            },
        )
    })
}

/// Reads a PPM (P6) or PFM image.
///
/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_load(
    path: *const c_char,
    out: *mut *mut SplatcalImage,
) -> SplatcalStatus {
    guard(|| {
        let image = io::read_image_file(&PathBuf::from(text(path, "path")?))?;
        put(out, SplatcalImage { image })
    })
}

/// Writes PPM or PFM, chosen by the extension of `path`.
///
/// # Safety
/// `image` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_save(
    image: *const SplatcalImage,
    path: *const c_char,
) -> SplatcalStatus {
    guard(|| {
        let im = reference(image, "image")?;
        io::write_image_file(&PathBuf::from(text(path, "path")?), &im.image)?;
        Ok(())
    })
}

/// Width and height; either output may be null.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_size(
    image: *const SplatcalImage,
    width: *mut u32,
    height: *mut u32,
) -> SplatcalStatus {
    guard(|| {
        let im = reference(image, "image")?;
        if !width.is_null() {
            *width = im.image.width;
        }
        if !height.is_null() {
            *height = im.image.height;
        }
        Ok(())
    })
}

/// Copies `3·width·height` values into `buf` of capacity `len`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_read_pixels(
    image: *const SplatcalImage,
    buf: *mut f64,
    len: usize,
) -> SplatcalStatus {
    guard(|| {
        let im = reference(image, "image")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let n = im.image.data.len();
        if len < n {
            return Err(range(format!("buffer holds {len} values, image needs {n}")));
        }
        ptr::copy_nonoverlapping(im.image.data.as_ptr(), buf, n);
        Ok(())
    })
}

/// Image from `3·width·height` row-major RGB values.
///
/// # Safety
/// `data` must hold `3·width·height` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_from_pixels(
    width: u32,
    height: u32,
    data: *const f64,
    out: *mut *mut SplatcalImage,
) -> SplatcalStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = 3usize
            .checked_mul(width as usize)
            .and_then(|v| v.checked_mul(height as usize))
            .ok_or_else(|| range("image too large".into()))?;
        let image = Image::from_data(width, height, std::slice::from_raw_parts(data, n).to_vec())?;
        put(out, SplatcalImage { image })
    })
}

/// # Safety
/// `image` must come from this library or be null, and is invalid after.
#[no_mangle]
pub unsafe extern "C" fn splatcal_image_free(image: *mut SplatcalImage) {
    release(image)
}

/// Loss gradient of camera `i` against `target`, using the configured
/// camera loss. `grad` receives 9 values: translation (3), quaternion
/// (w, x, y, z), fields of view (x, y).
///
/// # Safety
/// Handles must be live; `grad` must hold 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn splatcal_grad_camera(
    scene: *const SplatcalScene,
    cams: *const SplatcalCameras,
    i: usize,
    target: *const SplatcalImage,
    config: *const SplatcalConfig,
    grad: *mut f64,
) -> SplatcalStatus {
    guard(|| {
        let s = reference(scene, "scene")?;
        let cam = camera_at(reference(cams, "cams")?, i)?;
        let t = reference(target, "target")?;
        if grad.is_null() {
            return Err(null("grad"));
        }
        let cfg = config
            .as_ref()
            .map(|c| c.config.clone())
            .unwrap_or_default();
        let g = grad_camera(
            &s.scene,
            cam,
            &t.image,
            cfg.schedule.camera_loss,
            &cfg.render,
        )?;
        ptr::copy_nonoverlapping(g.to_array().as_ptr(), grad, 9);
        Ok(())
    })
}

/// Refines `scene` and all cameras against `targets` (one per camera, in
/// camera order) with the schedule of `config` (defaults when null).
/// `heldout` may be null or hold one flag per camera; held-out cameras
/// are not used to train the scene. On success `report_json`, if not
/// null, receives the report; free it with `splatcal_string_free`.
///
/// # Safety
/// Handles must be live; `targets` must hold `n_targets` live images.
#[no_mangle]
pub unsafe extern "C" fn splatcal_calibrate(
    scene: *mut SplatcalScene,
    cams: *mut SplatcalCameras,
    targets: *const *const SplatcalImage,
    n_targets: usize,
    heldout: *const bool,
    config: *const SplatcalConfig,
    report_json: *mut *mut c_char,
) -> SplatcalStatus {
    guard(|| {
        let s = mutable(scene, "scene")?;
        let c = mutable(cams, "cams")?;
        if targets.is_null() {
            return Err(null("targets"));
        }
        if n_targets != c.cameras.len() {
            return Err(range(format!(
                "{n_targets} targets for {} cameras",
                c.cameras.len()
            )));
        }
        let imgs = std::slice::from_raw_parts(targets, n_targets)
            .iter()
            .map(|p| reference(*p, "targets[i]").map(|i| i.image.clone()))
            .collect::<Result<Vec<_>, Fail>>()?;
        let held = if heldout.is_null() {
            vec![false; n_targets]
        } else {
            std::slice::from_raw_parts(heldout, n_targets).to_vec()
        };
        let cfg = config
            .as_ref()
            .map(|c| c.config.clone())
            .unwrap_or_default();
        let mut scene_copy = s.scene.clone();
        let mut cams_copy = c.cameras.clone();
        let report = calibrate(
            &mut scene_copy,
            &mut cams_copy,
            &imgs,
            &held,
            &cfg.schedule,
            &cfg.render,
        )?;
        s.scene = scene_copy;
        c.cameras = cams_copy;
        if !report_json.is_null() {
            *report_json = CString::new(report.to_json())
                .expect("json has no nul")
                .into_raw();
        }
        Ok(())
    })
}
