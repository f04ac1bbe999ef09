use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{record_seed, Dataset, MotionRange, Split};
use crate::diffcore::{adam_step, apply_bn_observations, AdamState, Graph, Mode, Tensor, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::fourier::ComplexImage;
use crate::geometry::{apply_rigid, RigidParams};
use crate::models::{reg_forward, RegNet};
use crate::par;

/// What the oracle trainer minimises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleObjective {
    /// `mse(warp(moving), fixed)`, the loss the registration stage uses
    #[default]
    Image,
    /// mean squared error of `(tx, ty)` in pixels and `theta` in degrees
    /// against the known inverse motion
    Parameters,
}

/// Registration-only task: the moving image is the target warped by a known
/// rigid motion, the fixed image is the target itself, so the ideal output
/// is the inverse motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub motion: MotionRange,
    /// fraction of the epochs over which the translation range ramps up
    /// linearly from zero; rotation always uses its full range
    pub translation_warmup: f64,
    pub objective: OracleObjective,
    pub seed: u64,
}

impl OracleSettings {
    pub fn desk(size: usize, seed: u64) -> Self {
        Self {
            epochs: 400,
            batch_size: 8,
            lr: 1e-3,
            motion: MotionRange::standard(size),
            translation_warmup: 0.5,
            objective: OracleObjective::Image,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n: usize,
    /// mean Euclidean translation error, pixels
    pub mean_translation_error_px: f64,
    /// mean absolute rotation error, degrees
    pub mean_rotation_error_deg: f64,
    /// the same errors on freshly moved train-split pairs
    pub train_translation_error_px: f64,
    pub train_rotation_error_deg: f64,
    pub final_train_loss: f64,
}

struct Pair {
    moving: Vec<f32>,
    fixed: Vec<f32>,
    motion: RigidParams,
}

fn make_pairs(dataset: &Dataset, ids: &[u32], motion: &MotionRange, seed: u64) -> Result<Vec<Pair>> {
    par::map_range(ids.len(), |i| {
        let tgt = &dataset.record(ids[i]).tgt;
        let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, ids[i]));
        let p = motion.sample(&mut rng)?;
        Ok(Pair {
            moving: apply_rigid(tgt, &p)?.to_tensor().into_data(),
            fixed: tgt.to_tensor().into_data(),
            motion: p,
        })
    })
    .into_iter()
    .collect()
}

fn stack(pairs: &[&Pair], size: usize, f: impl Fn(&Pair) -> &[f32]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(pairs.len() * 2 * size * size);
    for p in pairs {
        data.extend_from_slice(f(p));
    }
    Tensor::new(vec![pairs.len(), 2, size, size], data).expect("plane sizes")
}

/// `(n, mean translation error px, mean rotation error deg)` over fresh
/// pairs built from `ids`.
fn score(net: &RegNet, dataset: &Dataset, ids: &[u32], motion: &MotionRange, seed: u64) -> Result<(usize, f64, f64)> {
    let size = net.size;
    let pairs = make_pairs(dataset, ids, motion, seed)?;
    let errors = par::map_range(pairs.len(), |i| {
        let p = &pairs[i];
        let moving = ComplexImage::from_tensor(&stack(&[p], size, |p| &p.moving), 0)?;
        let fixed = ComplexImage::from_tensor(&stack(&[p], size, |p| &p.fixed), 0)?;
        let (pred, _) = net.apply(&moving, &fixed)?;
        let want = p.motion.invert();
        let dt = (pred.tx - want.tx).hypot(pred.ty - want.ty);
        let dr = (pred.theta - want.theta).abs().to_degrees();
        Ok((dt, dr))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = errors.len();
    Ok((
        n,
        errors.iter().map(|e| e.0).sum::<f64>() / n as f64,
        errors.iter().map(|e| e.1).sum::<f64>() / n as f64,
    ))
}

/// Train a registration network on the oracle task over the train split and
/// score its parameter recovery on the test split. Train motions are
/// resampled every epoch; test motions are fixed by the seed.
pub fn registration_oracle(dataset: &Dataset, settings: &OracleSettings) -> Result<(RegNet, OracleReport)> {
    let size = dataset.manifest.config.size;
    let train_ids = dataset.manifest.ids(Split::Train);
    let test_ids = dataset.manifest.ids(Split::Test);
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if test_ids.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    if settings.batch_size == 0 || !(settings.lr > 0.0) || !(0.0..=1.0).contains(&settings.translation_warmup) {
        return Err(Error::invalid(format!("invalid oracle settings {settings:?}")));
    }
    let mut net = RegNet::new(size, settings.seed ^ 0x0AC1_E000)?;
    let mut adam = AdamState::new(&net.params, settings.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut final_train_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        adam.lr = if 4 * epoch >= 3 * settings.epochs {
            settings.lr / 10.0
        } else {
            settings.lr
        };
        let epoch_seed = settings.seed.wrapping_add(1 + epoch as u64);
        let ramp = if settings.translation_warmup > 0.0 {
            ((epoch + 1) as f64 / (settings.translation_warmup * settings.epochs as f64)).min(1.0)
        } else {
            1.0
        };
        let motion = MotionRange {
            trans_mm: settings.motion.trans_mm * ramp,
            ..settings.motion
        };
        let pairs = make_pairs(dataset, train_ids, &motion, epoch_seed)?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let b: Vec<&Pair> = batch.iter().map(|&i| &pairs[i]).collect();
            let mut g = Graph::new(Mode::Train);
            let m = g.input(stack(&b, size, |p| &p.moving));
            let f = g.input(stack(&b, size, |p| &p.fixed));
            let (p, warped) = reg_forward(&mut g, &net, m, f)?;
            let loss = match settings.objective {
                OracleObjective::Image => g.mse(warped, f)?,
                OracleObjective::Parameters => {
                    let want: Vec<f32> = b
                        .iter()
                        .flat_map(|pair| {
                            let q = pair.motion.invert();
                            [q.tx as f32, q.ty as f32, q.theta.to_degrees() as f32]
                        })
                        .collect();
                    let want = g.input(Tensor::new(vec![b.len(), 3], want)?);
                    let deg = g.scale_cols(p, &[1.0, 1.0, 180.0 / std::f32::consts::PI])?;
                    g.mse(deg, want)?
                }
            };
            let l = g.scalar(loss) as f64;
            if !l.is_finite() {
                return Err(Error::invalid(format!("oracle loss became non-finite in epoch {}", epoch + 1)));
            }
            sum += l * b.len() as f64;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &net.params);
            let obs = g.take_bn_observations();
            adam_step(&mut net.params, &pg, &mut adam)?;
            apply_bn_observations(&mut net.params, &obs, BN_MOMENTUM);
        }
        final_train_loss = sum / pairs.len() as f64;
        if (epoch + 1) % 10 == 0 || epoch + 1 == settings.epochs {
            log::info!("oracle epoch {}: train loss {final_train_loss:.6e}", epoch + 1);
        }
    }

    let (n, mean_translation_error_px, mean_rotation_error_deg) =
        score(&net, dataset, test_ids, &settings.motion, settings.seed ^ 0x7E57_7E57)?;
    let (_, train_translation_error_px, train_rotation_error_deg) =
        score(&net, dataset, train_ids, &settings.motion, settings.seed ^ 0x7EA1_7EA1)?;
    let report = OracleReport {
        n,
        mean_translation_error_px,
        mean_rotation_error_deg,
        train_translation_error_px,
        train_rotation_error_deg,
        final_train_loss,
    };
    Ok((net, report))
}
