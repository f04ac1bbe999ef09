//! Per-stage losses: direct image and k-space terms plus the two
//! cross-domain consistency terms, combined as
//! `L_i + α·L_k + β·(L_ik + α·L_ki)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Mode, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1e-2;
pub const DEFAULT_BETA: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weights need alpha > 0 and beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synthesis,
    Registration,
    Reconstruction,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Synthesis, Stage::Registration, Stage::Reconstruction];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthesis => "synthesis",
            Stage::Registration => "registration",
            Stage::Reconstruction => "reconstruction",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Stage::Synthesis => "syn",
            Stage::Registration => "reg",
            Stage::Reconstruction => "rec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.short() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainMode {
    Image,
    Kspace,
    Dual,
}

impl DomainMode {
    pub fn name(self) -> &'static str {
        match self {
            DomainMode::Image => "image",
            DomainMode::Kspace => "kspace",
            DomainMode::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Self::Image),
            "kspace" | "k" => Ok(Self::Kspace),
            "dual" => Ok(Self::Dual),
            _ => Err(Error::invalid(format!("unknown domain mode `{s}`"))),
        }
    }

    pub fn uses_image(self) -> bool {
        self != DomainMode::Kspace
    }

    pub fn uses_kspace(self) -> bool {
        self != DomainMode::Image
    }
}

impl fmt::Display for DomainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How image-domain terms compare complex values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageLoss {
    /// two-plane complex MSE
    #[default]
    Complex,
    /// MSE of magnitudes; k-space terms stay complex
    Magnitude,
}

/// The four loss terms; `None` marks a term that is inactive in the current
/// domain mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_i: Option<f64>,
    pub l_k: Option<f64>,
    pub l_ik: Option<f64>,
    pub l_ki: Option<f64>,
}

impl LossComponents {
    /// `L_i + α·L_k + β·(L_ik + α·L_ki)` over the active terms.
    pub fn total(&self, w: &LossWeights) -> f64 {
        let v = |o: Option<f64>| o.unwrap_or(0.0);
        v(self.l_i) + w.alpha * v(self.l_k) + w.beta * (v(self.l_ik) + w.alpha * v(self.l_ki))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLossReport {
    pub stage: Stage,
    pub domain_mode: DomainMode,
    pub components: LossComponents,
    pub total: f64,
}

/// Branch estimates for one stage: the image-domain estimate and the
/// k-space estimate, each required only when its branch is active.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageOutputs {
    pub image: Option<Var>,
    pub kspace: Option<Var>,
}

/// Motion-free target in both domains.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth {
    pub image: Var,
    pub kspace: Var,
}

/// Differentiable stage total plus its numeric report.
pub struct StageLoss {
    pub total: Var,
    pub report: StageLossReport,
}

fn image_term<T: Real>(g: &mut Graph<T>, est: Var, truth: Var, kind: ImageLoss) -> Result<Var> {
    match kind {
        ImageLoss::Complex => g.mse(est, truth),
        ImageLoss::Magnitude => {
            let (a, b) = (g.magnitude(est)?, g.magnitude(truth)?);
            g.mse(a, b)
        }
    }
}

/// Build the loss for `stage` onto `g`.
pub fn stage_loss<T: Real>(
    g: &mut Graph<T>,
    stage: Stage,
    outputs: StageOutputs,
    truth: GroundTruth,
    w: &LossWeights,
    mode: DomainMode,
    image_loss: ImageLoss,
) -> Result<StageLoss> {
    w.validate()?;
    let need = |v: Option<Var>, what: &'static str| v.ok_or(Error::MissingTensor(what));
    let mut comps = LossComponents::default();
    let mut terms: Vec<(Var, f64)> = Vec::with_capacity(4);
    if mode.uses_image() {
        let x = need(outputs.image, "image-branch estimate")?;
        let l_i = image_term(g, x, truth.image, image_loss)?;
        comps.l_i = Some(g.scalar(l_i).to_f64_real());
        terms.push((l_i, 1.0));
    }
    if mode.uses_kspace() {
        let y = need(outputs.kspace, "k-space-branch estimate")?;
        let l_k = g.mse(y, truth.kspace)?;
        comps.l_k = Some(g.scalar(l_k).to_f64_real());
        terms.push((l_k, w.alpha));
    }
    if mode == DomainMode::Dual {
        let (x, y) = (outputs.image.expect("checked"), outputs.kspace.expect("checked"));
        let x_from_k = g.ifft2c(y)?;
        let l_ik = image_term(g, x_from_k, truth.image, image_loss)?;
        let y_from_i = g.fft2c(x)?;
        let l_ki = g.mse(y_from_i, truth.kspace)?;
        comps.l_ik = Some(g.scalar(l_ik).to_f64_real());
        comps.l_ki = Some(g.scalar(l_ki).to_f64_real());
        terms.push((l_ik, w.beta));
        terms.push((l_ki, w.beta * w.alpha));
    }
    let mut total: Option<Var> = None;
    for (v, weight) in terms {
        let scaled = if weight == 1.0 { v } else { g.scale(v, T::real(weight)) };
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("every mode has at least one term");
    Ok(StageLoss {
        total,
        report: StageLossReport {
            stage,
            domain_mode: mode,
            components: comps,
            total: g.scalar(total).to_f64_real(),
        },
    })
}

/// Relative gaps `|L_ik − L_k|` and `|L_ki − L_i|` for image/k-space
/// estimates `[N, 2, H, W]` against their ground truth. Under the orthonormal
/// transform and complex MSE both gaps vanish up to rounding.
pub fn parseval_collapse_check(
    x_hat: &Tensor<f64>,
    y_hat: &Tensor<f64>,
    x_true: &Tensor<f64>,
    y_true: &Tensor<f64>,
    image_loss: ImageLoss,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(Mode::Eval);
    let outputs = StageOutputs {
        image: Some(g.input(x_hat.clone())),
        kspace: Some(g.input(y_hat.clone())),
    };
    let truth = GroundTruth {
        image: g.input(x_true.clone()),
        kspace: g.input(y_true.clone()),
    };
    let r = stage_loss(
        &mut g,
        Stage::Synthesis,
        outputs,
        truth,
        &LossWeights::default(),
        DomainMode::Dual,
        image_loss,
    )?
    .report
    .components;
    let rel = |a: f64, b: f64| {
        let d = (a - b).abs();
        if d == 0.0 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    };
    Ok((
        rel(r.l_ik.expect("dual"), r.l_k.expect("dual")),
        rel(r.l_ki.expect("dual"), r.l_i.expect("dual")),
    ))
}
