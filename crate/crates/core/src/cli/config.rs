//! The run configuration: one JSON document with a default for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::renderer::RenderSettings;
use crate::scene::{Layout, Rig};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_gaussians: usize,
    pub layout: Layout,
    pub n_cameras: usize,
    pub rig: Rig,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_gaussians: 2000,
            layout: Layout::WallAndCloud,
            n_cameras: 12,
            rig: Rig::Arc,
            width: 128,
            height: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Camera `k` (in image-id order) uses seed `seed + k`.
    pub seed: u64,
    /// Center offset radius, in scene extents when `relative_to_extent`.
    pub dt: f64,
    pub dtheta_deg: f64,
    /// Relative field-of-view change.
    pub dfov: f64,
    /// Scale `dt` by the scene extent; needs `scene`.
    pub relative_to_extent: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            seed: 1,
            dt: 0.01,
            dtheta_deg: 0.5,
            dfov: 0.01,
            relative_to_extent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFormat {
    Pfm,
    Ppm,
}

impl TargetFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TargetFormat::Pfm => "pfm",
            TargetFormat::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory of the command.
    pub out: PathBuf,
    /// Gaussian scene (PLY).
    pub scene: Option<PathBuf>,
    /// Directory holding `cameras.txt` and `images.txt`.
    pub calibration: Option<PathBuf>,
    /// Directory of target images, looked up by image name.
    pub targets: Option<PathBuf>,
    /// Reference calibration for `eval`.
    pub reference: Option<PathBuf>,
    /// Image names excluded from model training.
    pub heldout: Vec<String>,
    pub image_format: TargetFormat,
    /// Bin width of the displacement histogram, pixels.
    pub histogram_bin: f64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub synth: SynthConfig,
    pub perturb: PerturbConfig,
    pub render: RenderSettings,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            scene: None,
            calibration: None,
            targets: None,
            reference: None,
            heldout: Vec::new(),
            image_format: TargetFormat::Pfm,
            histogram_bin: 0.1,
            threads: 0,
            synth: SynthConfig::default(),
            perturb: PerturbConfig::default(),
            render: RenderSettings::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by the JSON file (if any), overlaid by `key=value`
    /// overrides with dotted keys (`schedule.n_phases=1`). Values parse as
    /// JSON and fall back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Self::layered(Some((&text, &p.display().to_string())), overrides)
            }
            None => Self::layered(None, overrides),
        }
    }

    /// As [`RunConfig::load`] with the file contents given as a string.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<RunConfig> {
        Self::layered(Some((text, "config")), overrides)
    }

    fn layered(file: Option<(&str, &str)>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some((text, origin)) = file {
            let file: Value =
                serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
            merge(&mut doc, file, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.synth.n_gaussians == 0 {
            return bad("synth.n_gaussians must be at least 1");
        }
        if self.synth.n_cameras == 0 {
            return bad("synth.n_cameras must be at least 1");
        }
        if self.synth.width == 0 || self.synth.height == 0 {
            return bad("synth image size must be positive");
        }
        let p = &self.perturb;
        if !(p.dt >= 0.0 && p.dtheta_deg >= 0.0 && p.dfov >= 0.0) {
            return bad("perturbation magnitudes must be non-negative");
        }
        if p.dfov >= 1.0 {
            return bad("perturb.dfov must be below 1");
        }
        if !(self.histogram_bin > 0.0) {
            return bad("histogram_bin must be positive");
        }
        if !(self.render.lowpass >= 0.0)
            || self
                .render
                .background
                .iter()
                .any(|c| !(0.0..=1.0).contains(c))
        {
            return bad("render settings out of range");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlays `src` onto `dst`. Objects merge key by key; unknown keys are
/// rejected here so the message can name the full path.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let full = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &full)?,
                    None => return Err(Error::Config(format!("unknown key `{full}`"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::load(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::load(
            None,
            &[
                "schedule.n_phases=1".into(),
                "schedule.camera_loss=\"l1\"".into(),
                "out=runs/a".into(),
                "heldout=[\"x.pfm\"]".into(),
                "synth.layout=textured_wall".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.schedule.n_phases, 1);
        assert_eq!(cfg.out, PathBuf::from("runs/a"));
        assert_eq!(cfg.heldout, ["x.pfm"]);
        assert_eq!(cfg.synth.layout, Layout::TexturedWall);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in [
            "bogus=1",
            "schedule.bogus=1",
            "schedule.n_phases=\"x\"",
            "synth.n_gaussians=0",
            "noequals",
        ] {
            let e = RunConfig::load(None, &[o.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{o}: {e}");
        }
    }

    #[test]
    fn file_layer_sits_between_defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"schedule": {"n_phases": 2, "max_steps": 500}, "threads": 1}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&p), &["schedule.n_phases=3".into()]).unwrap();
        assert_eq!(
            (cfg.schedule.n_phases, cfg.schedule.max_steps, cfg.threads),
            (3, 500, 1)
        );
        assert_eq!(cfg.schedule.min_steps, 100);
        std::fs::write(&p, r#"{"schedule": {"nphases": 2}}"#).unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(e.to_string().contains("schedule.nphases"), "{e}");
    }
}
