use crate::diffcore::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::models::{
    recon_forward, reg_forward, reg_forward_kspace, synth_forward, Branch, ReconNet, ReconNetConfig, RegBinding,
    RegNet, SynthNet,
};
use crate::objectives::{Stage, StageOutputs};

use super::plan::StagePlan;

/// The networks one stage owns.
#[derive(Clone, Debug, PartialEq)]
pub enum StageNets {
    Synthesis {
        image: Option<SynthNet>,
        kspace: Option<SynthNet>,
    },
    Registration(RegBinding),
    Reconstruction {
        image: Option<ReconNet>,
        kspace: Option<ReconNet>,
    },
}

/// Per-batch inputs. `src_*` is the stage's source in each domain:
/// the reference for synthesis, the synthesised estimate for registration,
/// the prior estimate (if any) for reconstruction.
pub(crate) struct BatchVars {
    pub x_u: Var,
    pub y_u: Var,
    pub src_x: Option<Var>,
    pub src_y: Option<Var>,
}

impl StageNets {
    pub fn init(plan: &StagePlan, stage: Stage, size: usize) -> Result<Self> {
        let dm = plan.domain_mode;
        let (d, b) = (plan.net.depth, plan.net.base_channels);
        Ok(match stage {
            Stage::Synthesis => StageNets::Synthesis {
                image: dm
                    .uses_image()
                    .then(|| SynthNet::new(d, b, plan.derived_seed("f_i")))
                    .transpose()?,
                kspace: dm
                    .uses_kspace()
                    .then(|| SynthNet::new(d, b, plan.derived_seed("f_k")))
                    .transpose()?,
            },
            Stage::Registration => {
                let seed = plan.derived_seed("g");
                if plan.shared_registration || dm != crate::objectives::DomainMode::Dual {
                    StageNets::Registration(RegBinding::shared(size, seed)?)
                } else {
                    StageNets::Registration(RegBinding::independent(size, seed)?)
                }
            }
            Stage::Reconstruction => {
                let cfg = ReconNetConfig {
                    depth: d,
                    base_channels: b,
                    multi_contrast: plan.contrast_mode.multi_contrast(),
                    dc_enabled: true,
                };
                StageNets::Reconstruction {
                    image: dm
                        .uses_image()
                        .then(|| ReconNet::new(cfg, Branch::Image, plan.derived_seed("h_i")))
                        .transpose()?,
                    kspace: dm
                        .uses_kspace()
                        .then(|| ReconNet::new(cfg, Branch::Kspace, plan.derived_seed("h_k")))
                        .transpose()?,
                }
            }
        })
    }

    pub fn stage(&self) -> Stage {
        match self {
            StageNets::Synthesis { .. } => Stage::Synthesis,
            StageNets::Registration(_) => Stage::Registration,
            StageNets::Reconstruction { .. } => Stage::Reconstruction,
        }
    }

    /// Named parameter sets, in a fixed order.
    pub fn named_sets(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut out = Vec::new();
        match self {
            StageNets::Synthesis { image, kspace } => {
                if let Some(n) = image {
                    out.push(("f_i", n.params()));
                }
                if let Some(n) = kspace {
                    out.push(("f_k", n.params()));
                }
            }
            StageNets::Registration(RegBinding::Shared(n)) => out.push(("g", &n.params)),
            StageNets::Registration(RegBinding::Independent { image, kspace }) => {
                out.push(("g_i", &image.params));
                out.push(("g_k", &kspace.params));
            }
            StageNets::Reconstruction { image, kspace } => {
                if let Some(n) = image {
                    out.push(("h_i", n.params()));
                }
                if let Some(n) = kspace {
                    out.push(("h_k", n.params()));
                }
            }
        }
        out
    }

    pub fn named_sets_mut(&mut self) -> Vec<(&'static str, &mut ParamSet)> {
        let mut out = Vec::new();
        match self {
            StageNets::Synthesis { image, kspace } => {
                if let Some(n) = image {
                    out.push(("f_i", n.params_mut()));
                }
                if let Some(n) = kspace {
                    out.push(("f_k", n.params_mut()));
                }
            }
            StageNets::Registration(RegBinding::Shared(n)) => out.push(("g", &mut n.params)),
            StageNets::Registration(RegBinding::Independent { image, kspace }) => {
                out.push(("g_i", &mut image.params));
                out.push(("g_k", &mut kspace.params));
            }
            StageNets::Reconstruction { image, kspace } => {
                if let Some(n) = image {
                    out.push(("h_i", n.params_mut()));
                }
                if let Some(n) = kspace {
                    out.push(("h_k", n.params_mut()));
                }
            }
        }
        out
    }

    /// Rebuild from stored parameter sets.
    pub fn from_sets(plan: &StagePlan, stage: Stage, size: usize, sets: &[(String, ParamSet)]) -> Result<Self> {
        let mut nets = Self::init(plan, stage, size)?;
        let expected: Vec<&str> = nets.named_sets().iter().map(|(n, _)| *n).collect();
        let stored: Vec<&str> = sets.iter().map(|(n, _)| n.as_str()).collect();
        if expected != stored {
            return Err(Error::Integrity(format!(
                "{stage} checkpoint holds {stored:?}, plan expects {expected:?}"
            )));
        }
        for ((_, dst), (_, src)) in nets.named_sets_mut().into_iter().zip(sets) {
            dst.assign_from(src)?;
        }
        Ok(nets)
    }

    /// Forward pass of every active branch.
    pub(crate) fn forward(
        &self,
        g: &mut Graph<f32>,
        inputs: &BatchVars,
        rows: &[bool],
    ) -> Result<StageOutputs> {
        let need = |v: Option<Var>, what: &'static str| v.ok_or(Error::MissingTensor(what));
        let mut out = StageOutputs::default();
        match self {
            StageNets::Synthesis { image, kspace } => {
                if let Some(n) = image {
                    out.image = Some(synth_forward(g, n, need(inputs.src_x, "image-domain reference")?)?);
                }
                if let Some(n) = kspace {
                    out.kspace = Some(synth_forward(g, n, need(inputs.src_y, "k-space reference")?)?);
                }
            }
            StageNets::Registration(binding) => {
                if let Some(src) = inputs.src_x {
                    out.image = Some(reg_forward(g, binding.image(), src, inputs.x_u)?.1);
                }
                if let Some(src) = inputs.src_y {
                    out.kspace = Some(reg_forward_kspace(g, binding.kspace(), src, inputs.y_u)?.1);
                }
            }
            StageNets::Reconstruction { image, kspace } => {
                if let Some(n) = image {
                    out.image = Some(recon_forward(g, n, inputs.src_x, inputs.y_u, inputs.x_u, rows)?);
                }
                if let Some(n) = kspace {
                    out.kspace = Some(recon_forward(g, n, inputs.src_y, inputs.y_u, inputs.x_u, rows)?);
                }
            }
        }
        Ok(out)
    }

    pub fn registration(&self) -> Option<&RegBinding> {
        match self {
            StageNets::Registration(b) => Some(b),
            _ => None,
        }
    }

    pub fn image_registration(&self) -> Option<&RegNet> {
        self.registration().map(|b| b.image())
    }
}
