//! Mini-batch training loop with validation-based early stopping.

use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Phase;
use super::{Adadelta, Network, Scalar};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// epochs allowed without a validation-loss improvement; 0 means a
    /// single epoch runs
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// epoch index whose parameters were returned
    pub best_epoch: usize,
}

/// Train in place: per-epoch seeded reshuffling, Adadelta updates, and
/// parameter rollback to the best validation loss observed.
pub fn train_network<F: Scalar>(
    network: &mut Network<F>,
    train_x: &Array3<F>,
    train_y: &[usize],
    val_x: &Array3<F>,
    val_y: &[usize],
    options: &TrainOptions,
    seed: u64,
) -> Result<TrainingHistory> {
    let n_train = train_x.len_of(Axis(0));
    if n_train == 0 || val_x.len_of(Axis(0)) == 0 {
        return Err(Error::Parameter(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train_y.len() != n_train || val_y.len() != val_x.len_of(Axis(0)) {
        return Err(Error::Parameter("label count mismatch".into()));
    }
    if options.batch_size == 0 || options.max_epochs == 0 {
        return Err(Error::Parameter(
            "batch_size and max_epochs must be positive".into(),
        ));
    }

    let mut optimizer = Adadelta::new(network);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout"));

    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<ArrayD<F>> = snapshot(network);
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..options.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(options.batch_size) {
            let batch = select_batch(train_x, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) =
                network.loss_and_grad(&batch, &labels, &mut Phase::Train(&mut dropout_rng))?;
            optimizer.step(network, &grads)?;
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen as f64;

        let (val_loss, val_accuracy) = evaluate(network, val_x, val_y)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best_params = snapshot(network);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= options.patience {
            break;
        }
    }

    restore(network, &best_params);
    network.clear_caches();
    Ok(TrainingHistory {
        epochs: history,
        best_epoch,
    })
}

/// Mean cross-entropy loss and accuracy in inference mode.
pub fn evaluate<F: Scalar>(
    network: &mut Network<F>,
    x: &Array3<F>,
    y: &[usize],
) -> Result<(f64, f64)> {
    let n = x.len_of(Axis(0));
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    // bounded batches keep evaluation memory flat
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let batch = select_batch(x, &idx);
        let probs = network.forward(&batch, &mut Phase::Eval)?;
        for (row, &i) in probs.rows().into_iter().zip(&idx) {
            let label = y[i];
            loss_sum -= row[label].as_f64().max(1e-12).ln();
            let pred = if row[1] > row[0] { 1 } else { 0 };
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn select_batch<F: Scalar>(x: &Array3<F>, idx: &[usize]) -> Array3<F> {
    let (_, channels, len) = x.dim();
    let mut out = Array3::zeros((idx.len(), channels, len));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&x.index_axis(Axis(0), i));
    }
    out
}

fn snapshot<F: Scalar>(network: &Network<F>) -> Vec<ArrayD<F>> {
    network
        .layers
        .iter()
        .flat_map(|l| {
            l.params()
                .into_iter()
                .chain(l.state())
                .cloned()
                .collect::<Vec<_>>()
        })
        .collect()
}

fn restore<F: Scalar>(network: &mut Network<F>, params: &[ArrayD<F>]) {
    let mut it = params.iter();
    for layer in &mut network.layers {
        let targets: Vec<&mut ArrayD<F>> = layer
            .params_mut()
            .into_iter()
            .collect();
        for t in targets {
            t.assign(it.next().expect("snapshot length mismatch"));
        }
        for t in layer.state_mut() {
            t.assign(it.next().expect("snapshot length mismatch"));
        }
    }
}
