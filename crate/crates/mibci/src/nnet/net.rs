//! Network assembly, forward pass and softmax cross-entropy backward.

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Act, Phase};
use super::{ActShape, Layer, LayerDesc, NetworkSpec, Scalar};
use crate::error::{Error, Result};

/// Per-layer parameter gradients, aligned with `Network::layers` and
/// each layer's `params()` order.
pub type Grads<F> = Vec<Vec<ArrayD<F>>>;

#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<F>>,
}

/// Build a network with He-uniform weights, zero biases, batch-norm
/// gain 1 / offset 0. Deterministic given the seed.
pub fn build_network<F: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<F>> {
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_shape = ActShape::Seq {
        channels: spec.input_channels,
        len: spec.input_len,
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (desc, out_shape) in spec.layers.iter().zip(&shapes) {
        let layer = match desc {
            LayerDesc::Conv { filters, kernel } => {
                let cin = match in_shape {
                    ActShape::Seq { channels, .. } => channels,
                    _ => unreachable!(),
                };
                Layer::Conv1d(super::layers::Conv1d::new(cin, *filters, *kernel, &mut rng))
            }
            LayerDesc::BatchNorm => {
                let ch = match in_shape {
                    ActShape::Seq { channels, .. } => channels,
                    _ => unreachable!(),
                };
                Layer::BatchNorm(super::layers::BatchNorm::new(ch))
            }
            LayerDesc::Relu => Layer::Relu(super::layers::Relu::new()),
            LayerDesc::MaxPool => Layer::MaxPool(super::layers::MaxPool::new()),
            LayerDesc::Dropout { p } => Layer::Dropout(super::layers::Dropout::new(*p)),
            LayerDesc::Flatten => Layer::Flatten(super::layers::Flatten::new()),
            LayerDesc::Dense { units } => {
                let in_dim = match in_shape {
                    ActShape::Flat { dim } => dim,
                    _ => unreachable!(),
                };
                Layer::Dense(super::layers::Dense::new(in_dim, *units, &mut rng))
            }
        };
        layers.push(layer);
        in_shape = *out_shape;
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

impl<F: Scalar> Network<F> {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.len())
            .sum()
    }

    fn check_input(&self, batch: &Array3<F>) -> Result<()> {
        let (_, channels, len) = batch.dim();
        if channels != self.spec.input_channels || len != self.spec.input_len {
            return Err(Error::Parameter(format!(
                "batch shape ({channels} ch, {len} pts) does not match network input ({} ch, {} pts)",
                self.spec.input_channels, self.spec.input_len
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in input batch".into()));
        }
        Ok(())
    }

    fn forward_logits(&mut self, batch: &Array3<F>, phase: &mut Phase) -> Result<Array2<F>> {
        self.check_input(batch)?;
        let mut act = Act::Seq(batch.clone());
        for layer in &mut self.layers {
            act = layer.forward(act, phase);
        }
        Ok(act.flat())
    }

    /// Class probabilities, rows summing to 1.
    pub fn forward(&mut self, batch: &Array3<F>, phase: &mut Phase) -> Result<Array2<F>> {
        let logits = self.forward_logits(batch, phase)?;
        Ok(softmax(&logits))
    }

    /// One combined pass: forward in the given phase, mean softmax
    /// cross-entropy against `labels`, and gradients for every
    /// trainable parameter.
    pub fn loss_and_grad(
        &mut self,
        batch: &Array3<F>,
        labels: &[usize],
        phase: &mut Phase,
    ) -> Result<(f64, Grads<F>)> {
        let (batch_size, _, _) = batch.dim();
        if labels.len() != batch_size {
            return Err(Error::Parameter(format!(
                "{} labels for a batch of {batch_size}",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Parameter("labels must be 0 or 1".into()));
        }
        let logits = self.forward_logits(batch, phase)?;
        let probs = softmax(&logits);
        let loss = cross_entropy(&probs, labels);

        // d(mean CE)/d(logits) = (probs - onehot) / batch
        let inv_b = F::from_f64(1.0 / batch_size as f64);
        let mut dlogits = probs;
        for (i, &label) in labels.iter().enumerate() {
            dlogits[(i, label)] = dlogits[(i, label)] - F::one();
        }
        dlogits.mapv_inplace(|v| v * inv_b);

        let mut grads: Grads<F> = vec![Vec::new(); self.layers.len()];
        let mut grad_act = Act::Flat(dlogits);
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let (next, layer_grads) = layer.backward(grad_act);
            grads[idx] = layer_grads;
            grad_act = next;
        }
        Ok((loss, grads))
    }

    /// Predicted class per example; a tie in the 2-way softmax goes to
    /// class 0.
    pub fn predict(&mut self, batch: &Array3<F>) -> Result<Vec<usize>> {
        let probs = self.forward(batch, &mut Phase::Eval)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| if r[1] > r[0] { 1 } else { 0 })
            .collect())
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub fn cross_entropy<F: Scalar>(probs: &Array2<F>, labels: &[usize]) -> f64 {
    let tiny = 1e-12;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        loss -= probs[(i, label)].as_f64().max(tiny).ln();
    }
    loss / labels.len() as f64
}
