use std::fmt;

use serde::{Deserialize, Serialize};

use crate::acquisition::{make_mask, SamplingMask, DEFAULT_CENTER_LINES, DEFAULT_SIGMA_FRAC};
use crate::datagen::record_seed;
use crate::diffcore::DEFAULT_LR;
use crate::error::{Error, Result};
use crate::objectives::{DomainMode, ImageLoss, LossWeights, Stage};

/// Which reference information reaches the reconstruction networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// under-sampled target only
    Single,
    /// moved reference concatenated as-is
    Concat,
    /// reference synthesised into the target contrast and registered
    Fused,
}

impl ContrastMode {
    pub fn name(self) -> &'static str {
        match self {
            ContrastMode::Single => "single",
            ContrastMode::Concat => "concat",
            ContrastMode::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "concat" => Ok(Self::Concat),
            "fused" => Ok(Self::Fused),
            _ => Err(Error::invalid(format!("unknown contrast mode `{s}`"))),
        }
    }

    /// Stages trained in this mode, in order.
    pub fn stages(self) -> &'static [Stage] {
        match self {
            ContrastMode::Fused => &Stage::ALL,
            ContrastMode::Single | ContrastMode::Concat => &[Stage::Reconstruction],
        }
    }

    pub fn multi_contrast(self) -> bool {
        self != ContrastMode::Single
    }
}

impl fmt::Display for ContrastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    /// epochs without validation improvement before stopping
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 10,
            batch_size: 8,
            lr: DEFAULT_LR,
        }
    }
}

impl TrainSettings {
    fn validate(&self, what: &str) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "{what}: max_epochs and batch_size must be positive and lr > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSettings {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSettings {
    pub center_lines: usize,
    pub sigma_frac: f64,
    pub seed: u64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            center_lines: DEFAULT_CENTER_LINES,
            sigma_frac: DEFAULT_SIGMA_FRAC,
            seed: 0,
        }
    }
}

/// Everything that determines a staged training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub domain_mode: DomainMode,
    pub contrast_mode: ContrastMode,
    pub acceleration: u32,
    pub weights: LossWeights,
    pub image_loss: ImageLoss,
    pub net: NetSettings,
    /// one registration parameter set for both branches
    pub shared_registration: bool,
    pub synthesis: TrainSettings,
    pub registration: TrainSettings,
    pub reconstruction: TrainSettings,
    pub mask: MaskSettings,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            domain_mode: DomainMode::Dual,
            contrast_mode: ContrastMode::Fused,
            acceleration: 4,
            weights: LossWeights::default(),
            image_loss: ImageLoss::Complex,
            net: NetSettings::default(),
            shared_registration: true,
            synthesis: TrainSettings::default(),
            registration: TrainSettings::default(),
            reconstruction: TrainSettings::default(),
            mask: MaskSettings::default(),
            seed: 0,
        }
    }
}

impl StagePlan {
    pub fn settings(&self, stage: Stage) -> &TrainSettings {
        match stage {
            Stage::Synthesis => &self.synthesis,
            Stage::Registration => &self.registration,
            Stage::Reconstruction => &self.reconstruction,
        }
    }

    pub fn settings_mut(&mut self, stage: Stage) -> &mut TrainSettings {
        match stage {
            Stage::Synthesis => &mut self.synthesis,
            Stage::Registration => &mut self.registration,
            Stage::Reconstruction => &mut self.reconstruction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.acceleration == 0 {
            return Err(Error::invalid("acceleration must be positive"));
        }
        if self.net.depth == 0 || self.net.base_channels == 0 {
            return Err(Error::invalid(format!("degenerate network settings {:?}", self.net)));
        }
        for stage in Stage::ALL {
            self.settings(stage).validate(stage.name())?;
        }
        Ok(())
    }

    pub fn cell_id(&self) -> String {
        format!("{}-{}-{}x", self.domain_mode, self.contrast_mode, self.acceleration)
    }

    pub fn make_mask(&self, size: usize) -> Result<SamplingMask> {
        make_mask(
            size,
            self.acceleration,
            self.mask.center_lines,
            self.mask.sigma_frac,
            self.mask.seed,
        )
    }

    /// Seed for a named network or stream, independent of creation order.
    pub(crate) fn derived_seed(&self, tag: &str) -> u64 {
        let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        record_seed(self.seed ^ h, 0)
    }

    /// Whether a checkpoint trained under `other` can feed this plan: only
    /// per-stage optimisation settings may differ.
    pub fn compatible(&self, other: &StagePlan) -> bool {
        let strip = |p: &StagePlan| StagePlan {
            synthesis: TrainSettings::default(),
            registration: TrainSettings::default(),
            reconstruction: TrainSettings::default(),
            ..p.clone()
        };
        strip(self) == strip(other)
    }
}
