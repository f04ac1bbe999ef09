use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::evalkit::{compare, fmt_num, metrics_csv, MetricResult, MetricSummary, MetricsRow, RecordPanels};
use crate::fourier::{ifft2c, ComplexImage, KSpaceGrid};
use crate::objectives::Stage;

use super::checkpoint::Checkpoint;
use super::data::Prepared;
use super::plan::{ContrastMode, StagePlan};
use super::train::{apply_stage, check_prepared, check_prior, reference_sources, restore, Sources};

pub const ZERO_FILLED: &str = "zero_filled";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetric {
    pub record_id: u32,
    pub stage: String,
    pub branch: String,
    pub result: MetricResult,
}

/// Metrics of every stage output (and the zero-filled baseline) on one
/// split. Image-domain rows compare the image branch directly; k-space rows
/// compare the inverse transform of the k-space branch.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub plan: StagePlan,
    pub split: Split,
    pub per_record: Vec<RecordMetric>,
    pub rows: Vec<MetricsRow>,
    pub panels: Vec<RecordPanels>,
}

impl EvalReport {
    pub fn summary(&self, stage: &str, branch: &str) -> Option<&MetricSummary> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.branch == branch)
            .map(|r| &r.summary)
    }

    /// Final reconstruction summary of one branch.
    pub fn final_summary(&self, branch: &str) -> Option<&MetricSummary> {
        self.summary(Stage::Reconstruction.name(), branch)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn per_record_csv(&self) -> String {
        let mut out = String::from("record_id,stage,branch,psnr,ssim,n_pixels\n");
        for m in &self.per_record {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.record_id,
                m.stage,
                m.branch,
                fmt_num(m.result.psnr),
                fmt_num(m.result.ssim),
                m.result.n_pixels
            )
            .expect("string write");
        }
        out
    }
}

fn to_image(prep: &Prepared, planes: &[f32], kspace: bool) -> Result<ComplexImage<f32>> {
    let t = Tensor::new(vec![1, 2, prep.size, prep.size], planes.to_vec())?;
    if kspace {
        Ok(ifft2c(&KSpaceGrid::from_tensor(&t, 0)?))
    } else {
        ComplexImage::from_tensor(&t, 0)
    }
}

/// Run the trained chain on `split` and score every stage output against the
/// motion-free target inside the brain mask.
///
/// Synthesis is scored on the aligned reference (it is trained to map the
/// aligned reference to the target); registration and reconstruction are
/// scored along the inference chain that starts from the moved reference.
pub fn evaluate(checkpoints: &[Checkpoint], prep: &Prepared, split: Split) -> Result<EvalReport> {
    let recon = checkpoints
        .iter()
        .find(|c| c.stage == Stage::Reconstruction)
        .ok_or(Error::Ordering {
            requested: "evaluation",
            missing: Stage::Reconstruction.name(),
        })?;
    recon.verify()?;
    let plan = recon.plan.clone();
    let priors = check_prior(Stage::Reconstruction, &plan, checkpoints)?;
    check_prepared(prep, &plan)?;
    let ids = prep.ids(split).to_vec();
    if ids.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }

    let mut outputs: Vec<(&'static str, Sources)> = Vec::new();
    let recon_src = match plan.contrast_mode {
        ContrastMode::Fused => {
            let syn = restore(priors[0], prep)?;
            let reg = restore(priors[1], prep)?;
            outputs.push((
                Stage::Synthesis.name(),
                apply_stage(&syn, prep, &reference_sources(prep, &plan, true), &ids)?,
            ));
            let moved = apply_stage(&syn, prep, &reference_sources(prep, &plan, false), &ids)?;
            let registered = apply_stage(&reg, prep, &moved, &ids)?;
            outputs.push((Stage::Registration.name(), registered.clone()));
            registered
        }
        ContrastMode::Concat => reference_sources(prep, &plan, false),
        ContrastMode::Single => Sources::default(),
    };
    outputs.push((
        Stage::Reconstruction.name(),
        apply_stage(&restore(recon, prep)?, prep, &recon_src, &ids)?,
    ));

    // (stage, branch, per-record estimates in `ids` order)
    let mut estimates: Vec<(&str, &str, Vec<ComplexImage<f32>>)> = vec![(
        ZERO_FILLED,
        "image",
        ids.iter()
            .map(|&id| to_image(prep, &prep.sample(id).x_u, false))
            .collect::<Result<_>>()?,
    )];
    for (stage, src) in &outputs {
        for (branch, planes, kspace) in [("image", &src.x, false), ("kspace", &src.y, true)] {
            if let Some(planes) = planes {
                let imgs = crate::par::map_range(ids.len(), |i| to_image(prep, &planes[ids[i] as usize], kspace))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                estimates.push((stage, branch, imgs));
            }
        }
    }

    let mut per_record = Vec::new();
    let mut rows = Vec::new();
    for (stage, branch, imgs) in &estimates {
        let results = crate::par::map_range(ids.len(), |i| {
            let s = prep.sample(ids[i]);
            compare(&imgs[i], &s.truth, &s.brain_mask)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        rows.push(MetricsRow {
            cell_id: plan.cell_id(),
            domain_mode: plan.domain_mode.name().into(),
            contrast_mode: plan.contrast_mode.name().into(),
            accel: plan.acceleration,
            stage: stage.to_string(),
            branch: branch.to_string(),
            summary: MetricSummary::from_results(&results),
        });
        per_record.extend(ids.iter().zip(results).map(|(&record_id, result)| RecordMetric {
            record_id,
            stage: stage.to_string(),
            branch: branch.to_string(),
            result,
        }));
    }

    let panels = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let s = prep.sample(id);
            RecordPanels {
                record_id: id,
                panels: estimates
                    .iter()
                    .map(|(stage, branch, imgs)| {
                        let name = if *stage == ZERO_FILLED {
                            ZERO_FILLED.to_string()
                        } else {
                            format!("{stage}_{branch}")
                        };
                        (name, imgs[i].clone())
                    })
                    .collect(),
                truth: s.truth.clone(),
                mask: s.brain_mask.clone(),
            }
        })
        .collect();

    Ok(EvalReport {
        plan,
        split,
        per_record,
        rows,
        panels,
    })
}
