//! Minimal tensor/autodiff engine and the CNN-FC model.
//!
//! Layers are implemented directly (no computation graph): each layer
//! caches what its backward pass needs during the forward pass. The
//! engine is generic over the float type; training normally runs in
//! `f32`, gradient checks instantiate the same code with `f64`.

mod checkpoint;
mod layers;
mod net;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Layer, Phase};
pub use net::{build_network, Grads, Network};
pub use optim::Adadelta;
pub use train::{evaluate, train_network, EpochRecord, TrainOptions, TrainingHistory};


use crate::error::{Error, Result};

/// Float type the engine is generic over.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + rand::distr::uniform::SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// One entry of the architecture description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerDesc {
    Conv { filters: usize, kernel: usize },
    BatchNorm,
    Relu,
    MaxPool,
    Dropout { p: f64 },
    Flatten,
    Dense { units: usize },
}

/// Ordered layer list plus the input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_len: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerDesc>,
}

/// Shape of the activation between two layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Seq { channels: usize, len: usize },
    Flat { dim: usize },
}

impl NetworkSpec {
    /// The CNN-FC architecture: six conv blocks (32, 64, 64, 128, 256,
    /// 512 filters, kernel 3, same padding, max-pool 2 after each),
    /// dropout 0.2 after the first block, batch-norm in blocks two and
    /// three, then Dense(256)+ReLU and Dense(2)+softmax.
    pub fn cnn_fc() -> NetworkSpec {
        use LayerDesc::*;
        NetworkSpec {
            input_len: 500,
            input_channels: 3,
            layers: vec![
                Conv { filters: 32, kernel: 3 },
                Relu,
                MaxPool,
                Dropout { p: 0.2 },
                Conv { filters: 64, kernel: 3 },
                BatchNorm,
                Relu,
                MaxPool,
                Conv { filters: 64, kernel: 3 },
                BatchNorm,
                Relu,
                MaxPool,
                Conv { filters: 128, kernel: 3 },
                Relu,
                MaxPool,
                Conv { filters: 256, kernel: 3 },
                Relu,
                MaxPool,
                Conv { filters: 512, kernel: 3 },
                Relu,
                MaxPool,
                Flatten,
                Dense { units: 256 },
                Relu,
                Dense { units: 2 },
            ],
        }
    }

    /// Propagate shapes through the layer list; the last entry is the
    /// logit dimension. Errors on inconsistent architectures.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut shape = ActShape::Seq {
            channels: self.input_channels,
            len: self.input_len,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, desc) in self.layers.iter().enumerate() {
            shape = match (desc, shape) {
                (LayerDesc::Conv { filters, kernel }, ActShape::Seq { len, .. }) => {
                    if kernel % 2 == 0 || *kernel == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i}: kernel size {kernel} must be odd"
                        )));
                    }
                    ActShape::Seq {
                        channels: *filters,
                        len,
                    }
                }
                (LayerDesc::BatchNorm, s @ ActShape::Seq { .. }) => s,
                (LayerDesc::Relu, s) => s,
                (LayerDesc::MaxPool, ActShape::Seq { channels, len }) => {
                    if len < 2 {
                        return Err(Error::Parameter(format!(
                            "layer {i}: cannot pool length {len}"
                        )));
                    }
                    ActShape::Seq {
                        channels,
                        len: len / 2,
                    }
                }
                (LayerDesc::Dropout { p }, s) => {
                    if !(0.0..1.0).contains(p) {
                        return Err(Error::Parameter(format!(
                            "layer {i}: dropout probability {p} outside [0,1)"
                        )));
                    }
                    s
                }
                (LayerDesc::Flatten, ActShape::Seq { channels, len }) => ActShape::Flat {
                    dim: channels * len,
                },
                (LayerDesc::Dense { units }, ActShape::Flat { .. }) => {
                    ActShape::Flat { dim: *units }
                }
                (desc, shape) => {
                    return Err(Error::Parameter(format!(
                        "layer {i}: {desc:?} cannot follow activation shape {shape:?}"
                    )))
                }
            };
            out.push(shape);
        }
        match out.last() {
            Some(ActShape::Flat { dim: 2 }) => Ok(out),
            other => Err(Error::Parameter(format!(
                "network must end in a 2-unit dense layer, got {other:?}"
            ))),
        }
    }
}
