use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::reparam::ReparamFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxSteps,
    /// No splat visible; the camera was skipped or left where it was.
    EmptyFrustum,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub psnr: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPhaseEntry {
    pub camera: usize,
    pub steps: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub stop: StopReason,
    pub final_score: f64,
    pub fov_clamped: bool,
    /// Optimizer updates rejected for a non-finite gradient.
    pub skipped_updates: u64,
    /// Per-step trace; exported as CSV rather than JSON.
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

impl CameraPhaseEntry {
    pub fn skipped(camera: usize, stop: StopReason) -> Self {
        CameraPhaseEntry {
            camera,
            steps: 0,
            psnr_before: f64::NAN,
            psnr_after: f64::NAN,
            stop,
            final_score: 0.0,
            fov_clamped: false,
            skipped_updates: 0,
            trace: Vec::new(),
        }
    }

    pub fn trained(&self) -> bool {
        matches!(self.stop, StopReason::Threshold | StopReason::MaxSteps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: usize,
    pub model_loss: Vec<f64>,
    pub cameras: Vec<CameraPhaseEntry>,
    /// Whether the eigenbasis was (re)installed at the end of this phase.
    pub reparameterized: bool,
}

/// Camera steps against an always-`max_steps` baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub camera_phases: usize,
    pub steps_taken: usize,
    pub baseline_steps: usize,
    pub saved_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub phases: Vec<PhaseEntry>,
    pub heldout: Option<Vec<CameraPhaseEntry>>,
    pub frames: Vec<Option<ReparamFrame>>,
    pub savings: Savings,
    /// Seconds per phase. Kept out of the JSON so reports of identical runs
    /// compare byte for byte.
    #[serde(skip)]
    pub wall_times: Vec<f64>,
}

impl CalibrationReport {
    pub fn entries(&self) -> impl Iterator<Item = &CameraPhaseEntry> {
        self.phases
            .iter()
            .flat_map(|p| p.cameras.iter())
            .chain(self.heldout.iter().flatten())
    }

    pub(crate) fn finish(&mut self, max_steps: usize) {
        let trained: Vec<_> = self.entries().filter(|e| e.trained()).collect();
        let taken: usize = trained.iter().map(|e| e.steps).sum();
        let baseline = trained.len() * max_steps;
        self.savings = Savings {
            camera_phases: trained.len(),
            steps_taken: taken,
            baseline_steps: baseline,
            saved_fraction: if baseline > 0 {
                1.0 - taken as f64 / baseline as f64
            } else {
                0.0
            },
        };
    }

    pub(crate) fn all_cameras_failed(&self) -> bool {
        let mut any = false;
        for e in self.entries() {
            if e.stop != StopReason::EmptyFrustum {
                return false;
            }
            any = true;
        }
        any
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `phase,camera,step,psnr,score`, one row per camera step. Held-out
    /// refinement rows use phase `n_phases + 1`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("phase,camera,step,psnr,score\n");
        let mut rows = |phase: usize, e: &CameraPhaseEntry| {
            for t in &e.trace {
                let _ = writeln!(
                    out,
                    "{phase},{},{},{},{}",
                    e.camera, t.step, t.psnr, t.score
                );
            }
        };
        for p in &self.phases {
            for e in &p.cameras {
                rows(p.phase, e);
            }
        }
        if let Some(h) = &self.heldout {
            for e in h {
                rows(self.phases.len() + 1, e);
            }
        }
        out
    }
}
