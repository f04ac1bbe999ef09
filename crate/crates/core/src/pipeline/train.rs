use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Split;
use crate::diffcore::{adam_step, apply_bn_observations, AdamState, Graph, Mode, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::objectives::{stage_loss, GroundTruth, Stage, StageLossReport};

use super::checkpoint::{hash_sets, Checkpoint, EpochRecord, RunLog, StepRow};
use super::data::Prepared;
use super::nets::{BatchVars, StageNets};
use super::plan::{ContrastMode, StagePlan};

/// Per-record stage sources (indexed by record id) in each domain; `None`
/// when the domain carries no source for this stage.
#[derive(Clone, Debug, Default)]
pub(crate) struct Sources {
    pub x: Option<Vec<Vec<f32>>>,
    pub y: Option<Vec<Vec<f32>>>,
}

pub(crate) fn reference_sources(prep: &Prepared, plan: &StagePlan, aligned: bool) -> Sources {
    let dm = plan.domain_mode;
    let pick = |f: &dyn Fn(&super::data::Sample) -> Vec<f32>| prep.samples.iter().map(f).collect::<Vec<_>>();
    Sources {
        x: dm.uses_image().then(|| {
            pick(&|s| if aligned { s.ref_aligned_x.clone() } else { s.ref_moved_x.clone() })
        }),
        y: dm.uses_kspace().then(|| {
            pick(&|s| if aligned { s.ref_aligned_y.clone() } else { s.ref_moved_y.clone() })
        }),
    }
}

pub(crate) fn batch_vars(g: &mut Graph<f32>, prep: &Prepared, ids: &[u32], src: &Sources) -> BatchVars {
    let gather = |f: &dyn Fn(&super::data::Sample) -> &[f32]| {
        let planes: Vec<&[f32]> = ids.iter().map(|&id| f(prep.sample(id))).collect();
        prep.stack(&planes)
    };
    let x_u = g.input(gather(&|s| &s.x_u));
    let y_u = g.input(gather(&|s| &s.y_u));
    let from = |v: &Option<Vec<Vec<f32>>>| {
        v.as_ref().map(|all| {
            let planes: Vec<&[f32]> = ids.iter().map(|&id| all[id as usize].as_slice()).collect();
            prep.stack(&planes)
        })
    };
    let (sx, sy) = (from(&src.x), from(&src.y));
    BatchVars {
        x_u,
        y_u,
        src_x: sx.map(|t| g.input(t)),
        src_y: sy.map(|t| g.input(t)),
    }
}

pub(crate) fn truth_vars(g: &mut Graph<f32>, prep: &Prepared, ids: &[u32]) -> GroundTruth {
    let x: Vec<&[f32]> = ids.iter().map(|&id| prep.sample(id).x_tc.as_slice()).collect();
    let y: Vec<&[f32]> = ids.iter().map(|&id| prep.sample(id).y_tc.as_slice()).collect();
    GroundTruth {
        image: g.input(prep.stack(&x)),
        kspace: g.input(prep.stack(&y)),
    }
}

const INFER_BATCH: usize = 16;

/// Run frozen networks over the records `ids` in inference mode. Records
/// outside `ids` get empty planes.
pub(crate) fn apply_stage(nets: &StageNets, prep: &Prepared, src: &Sources, ids: &[u32]) -> Result<Sources> {
    let hw2 = 2 * prep.size * prep.size;
    let mut out = Sources::default();
    for chunk in ids.chunks(INFER_BATCH) {
        let mut g = Graph::new(Mode::Eval);
        let vars = batch_vars(&mut g, prep, chunk, src);
        let o = nets.forward(&mut g, &vars, &prep.mask.sampled)?;
        for (dst, v) in [(&mut out.x, o.image), (&mut out.y, o.kspace)] {
            if let Some(v) = v {
                let dst = dst.get_or_insert_with(|| vec![Vec::new(); prep.len()]);
                for (&id, c) in chunk.iter().zip(g.value(v).data().chunks(hw2)) {
                    dst[id as usize] = c.to_vec();
                }
            }
        }
    }
    Ok(out)
}

/// Finalised, hash-checked checkpoints for every stage before `stage` in the
/// plan's contrast mode.
pub(crate) fn check_prior<'a>(
    stage: Stage,
    plan: &StagePlan,
    prior: &'a [Checkpoint],
) -> Result<Vec<&'a Checkpoint>> {
    let stages = plan.contrast_mode.stages();
    if !stages.contains(&stage) {
        return Err(Error::invalid(format!(
            "stage `{stage}` is not part of {} contrast mode",
            plan.contrast_mode
        )));
    }
    let mut found = Vec::new();
    for &s in stages.iter().take_while(|&&s| s != stage) {
        let ck = prior.iter().find(|c| c.stage == s).ok_or(Error::Ordering {
            requested: stage.name(),
            missing: s.name(),
        })?;
        ck.verify()?;
        if !ck.plan.compatible(plan) {
            return Err(Error::invalid(format!(
                "{s} checkpoint was trained for cell {}, not {}",
                ck.plan.cell_id(),
                plan.cell_id()
            )));
        }
        found.push(ck);
    }
    Ok(found)
}

pub(crate) fn restore(ck: &Checkpoint, prep: &Prepared) -> Result<StageNets> {
    StageNets::from_sets(&ck.plan, ck.stage, prep.size, &ck.sets)
}

/// Inputs that reach `stage` for the records `ids`, computed with the
/// frozen earlier stages.
pub(crate) fn stage_sources(
    stage: Stage,
    plan: &StagePlan,
    prep: &Prepared,
    priors: &[&Checkpoint],
    ids: &[u32],
) -> Result<Sources> {
    let moved = || reference_sources(prep, plan, false);
    match (stage, plan.contrast_mode) {
        (Stage::Synthesis, _) => Ok(reference_sources(prep, plan, true)),
        (Stage::Registration, _) => apply_stage(&restore(priors[0], prep)?, prep, &moved(), ids),
        (Stage::Reconstruction, ContrastMode::Fused) => {
            let syn = apply_stage(&restore(priors[0], prep)?, prep, &moved(), ids)?;
            apply_stage(&restore(priors[1], prep)?, prep, &syn, ids)
        }
        (Stage::Reconstruction, ContrastMode::Concat) => Ok(reference_sources(prep, plan, false)),
        (Stage::Reconstruction, ContrastMode::Single) => Ok(Sources::default()),
    }
}

pub(crate) fn check_prepared(prep: &Prepared, plan: &StagePlan) -> Result<()> {
    let mask = plan.make_mask(prep.size)?;
    if mask != prep.mask {
        return Err(Error::invalid(format!(
            "prepared data uses a {}x mask (seed {}), plan asks for {}x (seed {})",
            prep.mask.acceleration, prep.mask.seed, plan.acceleration, plan.mask.seed
        )));
    }
    Ok(())
}

fn validation_loss(nets: &StageNets, stage: Stage, prep: &Prepared, plan: &StagePlan, src: &Sources, ids: &[u32]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in ids.chunks(INFER_BATCH) {
        let mut g = Graph::new(Mode::Eval);
        let vars = batch_vars(&mut g, prep, chunk, src);
        let truth = truth_vars(&mut g, prep, chunk);
        let out = nets.forward(&mut g, &vars, &prep.mask.sampled)?;
        let r = stage_loss(&mut g, stage, out, truth, &plan.weights, plan.domain_mode, plan.image_loss)?.report;
        sum += r.total * chunk.len() as f64;
    }
    Ok(sum / ids.len() as f64)
}

/// Optimise the networks of `stage` with every earlier stage frozen.
/// Stops after `patience` epochs without validation improvement (or at
/// `max_epochs`) and returns the parameters of the best validation epoch.
pub fn train_stage(
    stage: Stage,
    prep: &Prepared,
    plan: &StagePlan,
    prior: &[Checkpoint],
) -> Result<(Checkpoint, RunLog)> {
    plan.validate()?;
    let priors = check_prior(stage, plan, prior)?;
    check_prepared(prep, plan)?;
    let train_ids = prep.ids(Split::Train).to_vec();
    let val_ids = prep.ids(Split::Val).to_vec();
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_ids.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let used: Vec<u32> = train_ids.iter().chain(&val_ids).copied().collect();
    let src = stage_sources(stage, plan, prep, &priors, &used)?;
    let settings = *plan.settings(stage);
    let mut nets = StageNets::init(plan, stage, prep.size)?;
    let mut adam = nets
        .named_sets()
        .iter()
        .map(|(_, s)| AdamState::new(s, settings.lr))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.derived_seed(&format!("shuffle-{}", stage.short())));
    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, StageNets)> = None;
    let mut order = train_ids.clone();
    let mut step = 0usize;
    log::info!(
        "[{}] training {stage}: {} train / {} val records",
        plan.cell_id(),
        train_ids.len(),
        val_ids.len()
    );

    for epoch in 1..=settings.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut g = Graph::new(Mode::Train);
            let vars = batch_vars(&mut g, prep, batch, &src);
            let truth = truth_vars(&mut g, prep, batch);
            let out = nets.forward(&mut g, &vars, &prep.mask.sampled)?;
            let loss = stage_loss(&mut g, stage, out, truth, &plan.weights, plan.domain_mode, plan.image_loss)?;
            let StageLossReport { components, total, .. } = loss.report;
            if !total.is_finite() {
                return Err(Error::invalid(format!("{stage} loss became non-finite at step {step}")));
            }
            let grads = g.backward(loss.total)?;
            let per_set: Vec<_> = nets.named_sets().iter().map(|(_, s)| g.param_grads(&grads, s)).collect();
            let obs = g.take_bn_observations();
            for (((_, set), gr), st) in nets.named_sets_mut().into_iter().zip(&per_set).zip(&mut adam) {
                adam_step(set, gr, st)?;
                apply_bn_observations(set, &obs, BN_MOMENTUM);
            }
            step += 1;
            epoch_sum += total * batch.len() as f64;
            log.steps.push(StepRow {
                step,
                stage,
                mode: plan.domain_mode,
                components,
                total,
            });
        }
        let train_loss = epoch_sum / order.len() as f64;
        let val_loss = validation_loss(&nets, stage, prep, plan, &src, &val_ids)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log.epoch_seconds.push(t0.elapsed().as_secs_f64());
        log::info!(
            "[{}] {stage} epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} ({:.1}s)",
            plan.cell_id(),
            t0.elapsed().as_secs_f64()
        );
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved && val_loss.is_finite() {
            best = Some((val_loss, epoch, nets.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |(_, e, _)| *e);
        if epoch - best_epoch >= settings.patience {
            log::info!("[{}] {stage}: early stop at epoch {epoch} (best {best_epoch})", plan.cell_id());
            break;
        }
    }
    let (best_epoch, nets) = match best {
        Some((_, e, n)) => (e, n),
        None => return Err(Error::invalid(format!("{stage} validation loss was never finite"))),
    };
    let sets: Vec<(String, _)> = nets
        .named_sets()
        .into_iter()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .collect();
    let param_hash = hash_sets(&sets);
    Ok((
        Checkpoint {
            stage,
            plan: plan.clone(),
            seed: plan.seed,
            history: log.epochs.clone(),
            best_epoch,
            finalised: true,
            sets,
            param_hash,
        },
        log,
    ))
}

/// Train every stage the plan's contrast mode needs, in order.
pub fn train_all(prep: &Prepared, plan: &StagePlan) -> Result<Vec<(Checkpoint, RunLog)>> {
    let mut done: Vec<(Checkpoint, RunLog)> = Vec::new();
    for &stage in plan.contrast_mode.stages() {
        let prior: Vec<Checkpoint> = done.iter().map(|(c, _)| c.clone()).collect();
        done.push(train_stage(stage, prep, plan, &prior)?);
    }
    Ok(done)
}
