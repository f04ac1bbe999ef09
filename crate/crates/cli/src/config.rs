use std::path::PathBuf;

use ddmc::datagen::{DatasetConfig, MotionRange};
use ddmc::objectives::{DomainMode, ImageLoss, LossWeights};
use ddmc::pipeline::{ContrastMode, MaskSettings, NetSettings, StagePlan, TrainSettings};
use serde::{Deserialize, Serialize};

/// Everything a run reads from its config file. Missing keys take the
/// embedded defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// global seed; data and training seeds derive from it unless set
    pub seed: u64,
    pub data: DataSection,
    pub plan: PlanSection,
    pub loss: LossWeights,
    pub net: NetSettings,
    pub mask: MaskSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_structures: usize,
    pub blur_sigma: f64,
    pub rot_deg: f64,
    pub trans_mm: f64,
    /// defaults to a 192 mm field of view
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mm_per_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub domain_mode: DomainMode,
    pub contrast_mode: ContrastMode,
    pub acceleration: u32,
    pub image_loss: ImageLoss,
    pub shared_registration: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub center_lines: usize,
    pub sigma_frac: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub synthesis: TrainSettings,
    pub registration: TrainSettings,
    pub reconstruction: TrainSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            plan: PlanSection::default(),
            loss: LossWeights::default(),
            net: NetSettings::default(),
            mask: MaskSection::default(),
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::desk(0);
        Self {
            size: d.size,
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            n_structures: d.n_structures,
            blur_sigma: d.blur_sigma,
            rot_deg: d.motion.rot_deg,
            trans_mm: d.motion.trans_mm,
            mm_per_px: None,
            seed: None,
        }
    }
}

impl Default for PlanSection {
    fn default() -> Self {
        let p = StagePlan::default();
        Self {
            domain_mode: p.domain_mode,
            contrast_mode: p.contrast_mode,
            acceleration: p.acceleration,
            image_loss: p.image_loss,
            shared_registration: p.shared_registration,
            seed: None,
        }
    }
}

impl Default for MaskSection {
    fn default() -> Self {
        let m = MaskSettings::default();
        Self {
            center_lines: m.center_lines,
            sigma_frac: m.sigma_frac,
            seed: None,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim().replace('\n', " "))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Fill every optional key, so the snapshot alone reproduces the run.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.data.mm_per_px.get_or_insert(192.0 / self.data.size.max(1) as f64);
        r.data.seed.get_or_insert(self.seed);
        r.plan.seed.get_or_insert(self.seed);
        r.mask.seed.get_or_insert(self.seed);
        r
    }

    pub fn dataset(&self) -> DatasetConfig {
        let r = self.resolved();
        DatasetConfig {
            size: r.data.size,
            n_train: r.data.n_train,
            n_val: r.data.n_val,
            n_test: r.data.n_test,
            n_structures: r.data.n_structures,
            blur_sigma: r.data.blur_sigma,
            motion: MotionRange {
                rot_deg: r.data.rot_deg,
                trans_mm: r.data.trans_mm,
                mm_per_px: r.data.mm_per_px.unwrap_or_default(),
            },
            seed: r.data.seed.unwrap_or_default(),
        }
    }

    pub fn plan(&self) -> StagePlan {
        let r = self.resolved();
        StagePlan {
            domain_mode: r.plan.domain_mode,
            contrast_mode: r.plan.contrast_mode,
            acceleration: r.plan.acceleration,
            weights: r.loss,
            image_loss: r.plan.image_loss,
            net: r.net,
            shared_registration: r.plan.shared_registration,
            synthesis: r.train.synthesis,
            registration: r.train.registration,
            reconstruction: r.train.reconstruction,
            mask: MaskSettings {
                center_lines: r.mask.center_lines,
                sigma_frac: r.mask.sigma_frac,
                seed: r.mask.seed.unwrap_or_default(),
            },
            seed: r.plan.seed.unwrap_or_default(),
        }
    }
}
