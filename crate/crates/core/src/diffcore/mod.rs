//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Provides the tape ([`Graph`]), layer primitives, named parameter sets
//! with a compact binary format, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use gradcheck::grad_check;
pub use graph::{apply_bn_observations, BnObservation, Grads, Graph, Mode, Var};
pub use params::{
    is_buffer_name, kaiming_uniform, ParamEntry, ParamSet, PARAM_FORMAT_VERSION, PARAM_MAGIC,
};
pub use tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Layer kinds with a fixed shape law.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Relu,
    BatchNorm2d,
    MaxPool2x2,
    Upsample2x,
    FullyConnected,
    ConcatChannels,
}

/// Parameters a [`layer_forward`] call may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerParams {
    /// weight / normalisation scale
    pub weight: Option<Var>,
    /// bias / normalisation shift
    pub bias: Option<Var>,
    /// second operand for concatenation
    pub other: Option<Var>,
}

/// Dispatch one layer by kind. Normalisation always uses batch statistics
/// here; models call the graph methods directly to pick a mode.
pub fn layer_forward<T: Real>(
    g: &mut Graph<T>,
    kind: LayerKind,
    input: Var,
    p: LayerParams,
) -> crate::Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| crate::Error::invalid(format!("{kind:?} needs {what}")))
    };
    match kind {
        LayerKind::Relu => Ok(g.relu(input)),
        LayerKind::BatchNorm2d => {
            let (y, _, _) = g.batch_norm_train(
                input,
                need(p.weight, "a scale")?,
                need(p.bias, "a shift")?,
                T::real(BN_EPS),
            )?;
            Ok(y)
        }
        LayerKind::MaxPool2x2 => g.maxpool2(input),
        LayerKind::Upsample2x => g.upsample2(input),
        LayerKind::FullyConnected => {
            g.linear(input, need(p.weight, "a weight")?, need(p.bias, "a bias")?)
        }
        LayerKind::ConcatChannels => g.concat_channels(input, need(p.other, "a second input")?),
    }
}

#[cfg(test)]
mod tests;
