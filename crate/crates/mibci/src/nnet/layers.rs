//! Layer implementations. Forward passes cache whatever backward needs;
//! backward consumes the cache and returns the input gradient plus the
//! parameter gradients in a fixed order.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;

/// Activation flowing between layers: sequence data (batch, channels,
/// length) before the flatten, flat vectors (batch, dim) after it.
#[derive(Debug, Clone)]
pub enum Act<F> {
    Seq(Array3<F>),
    Flat(Array2<F>),
}

impl<F: Scalar> Act<F> {
    pub fn seq(self) -> Array3<F> {
        match self {
            Act::Seq(a) => a,
            Act::Flat(_) => panic!("expected sequence activation"),
        }
    }
    pub fn flat(self) -> Array2<F> {
        match self {
            Act::Flat(a) => a,
            Act::Seq(_) => panic!("expected flat activation"),
        }
    }
}

/// Forward mode: training (dropout active, batch statistics) or
/// inference (deterministic).
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Phase<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Conv1d(Conv1d<F>),
    BatchNorm(BatchNorm<F>),
    Relu(Relu<F>),
    MaxPool(MaxPool<F>),
    Dropout(Dropout<F>),
    Flatten(Flatten),
    Dense(Dense<F>),
}

impl<F: Scalar> Layer<F> {
    pub fn forward(&mut self, x: Act<F>, phase: &mut Phase) -> Act<F> {
        match self {
            Layer::Conv1d(l) => Act::Seq(l.forward(x.seq())),
            Layer::BatchNorm(l) => Act::Seq(l.forward(x.seq(), phase.is_train())),
            Layer::Relu(l) => l.forward(x),
            Layer::MaxPool(l) => Act::Seq(l.forward(x.seq())),
            Layer::Dropout(l) => l.forward(x, phase),
            Layer::Flatten(l) => Act::Flat(l.forward(x.seq())),
            Layer::Dense(l) => Act::Flat(l.forward(x.flat())),
        }
    }

    /// Returns (input gradient, parameter gradients in `params()` order).
    pub fn backward(&mut self, grad: Act<F>) -> (Act<F>, Vec<ArrayD<F>>) {
        match self {
            Layer::Conv1d(l) => {
                let (dx, dw, db) = l.backward(grad.seq());
                (Act::Seq(dx), vec![dw, db])
            }
            Layer::BatchNorm(l) => {
                let (dx, dg, db) = l.backward(grad.seq());
                (Act::Seq(dx), vec![dg, db])
            }
            Layer::Relu(l) => (l.backward(grad), vec![]),
            Layer::MaxPool(l) => (Act::Seq(l.backward(grad.seq())), vec![]),
            Layer::Dropout(l) => (l.backward(grad), vec![]),
            Layer::Flatten(l) => (Act::Seq(l.backward(grad.flat())), vec![]),
            Layer::Dense(l) => {
                let (dx, dw, db) = l.backward(grad.flat());
                (Act::Flat(dx), vec![dw, db])
            }
        }
    }

    /// Trainable parameter arrays (running statistics excluded).
    pub fn params(&self) -> Vec<&ArrayD<F>> {
        match self {
            Layer::Conv1d(l) => vec![&l.w, &l.b],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.w, &l.b],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<F>> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.w, &mut l.b],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.w, &mut l.b],
            _ => vec![],
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn state(&self) -> Vec<&ArrayD<F>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => vec![],
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut ArrayD<F>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => vec![],
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv1d(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Dropout(l) => l.cache = None,
            Layer::Flatten(_) => {}
            Layer::Dense(l) => l.cache = None,
        }
    }
}

// ---------------------------------------------------------------------
// Conv1d, same padding
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1d<F: Scalar> {
    /// (filters, in_channels * kernel)
    pub w: ArrayD<F>,
    /// (filters,)
    pub b: ArrayD<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    /// im2col matrix (in_channels * kernel, batch * length)
    col: Array2<F>,
    batch: usize,
    len: usize,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel;
        let w = he_uniform(&[out_channels, fan_in], fan_in, rng);
        let b = ArrayD::zeros(ndarray::IxDyn(&[out_channels]));
        Conv1d {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            cache: None,
        }
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (batch, cin, len) = x.dim();
        let k = self.kernel;
        let pad = k / 2;
        let mut col = Array2::zeros((cin * k, batch * len));
        for b in 0..batch {
            for c in 0..cin {
                for kk in 0..k {
                    // source index l + kk - pad in [0, len)
                    let lo = pad.saturating_sub(kk);
                    let hi = (len + pad).saturating_sub(kk).min(len);
                    for l in lo..hi {
                        col[(c * k + kk, b * len + l)] = x[(b, c, l + kk - pad)];
                    }
                }
            }
        }
        col
    }

    pub fn forward(&mut self, x: Array3<F>) -> Array3<F> {
        let (batch, _, len) = x.dim();
        let col = self.im2col(&x);
        let w2 = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let out2 = w2.dot(&col); // (cout, batch*len)
        let bias = self.b.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array3::zeros((batch, self.out_channels, len));
        for b in 0..batch {
            for co in 0..self.out_channels {
                let bias_v = bias[co];
                for l in 0..len {
                    out[(b, co, l)] = out2[(co, b * len + l)] + bias_v;
                }
            }
        }
        self.cache = Some(ConvCache { col, batch, len });
        out
    }

    pub fn backward(&mut self, grad: Array3<F>) -> (Array3<F>, ArrayD<F>, ArrayD<F>) {
        let cache = self.cache.take().expect("conv backward without forward");
        let (batch, len) = (cache.batch, cache.len);
        let k = self.kernel;
        let pad = k / 2;

        let mut grad2 = Array2::zeros((self.out_channels, batch * len));
        for b in 0..batch {
            for co in 0..self.out_channels {
                for l in 0..len {
                    grad2[(co, b * len + l)] = grad[(b, co, l)];
                }
            }
        }

        let dw = grad2.dot(&cache.col.t()).into_dyn();
        let db = grad2.sum_axis(ndarray::Axis(1)).into_dyn();

        let w2 = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let dcol = w2.t().dot(&grad2); // (cin*k, batch*len)

        let mut dx = Array3::zeros((batch, self.in_channels, len));
        for b in 0..batch {
            for c in 0..self.in_channels {
                for kk in 0..k {
                    let lo = pad.saturating_sub(kk);
                    let hi = (len + pad).saturating_sub(kk).min(len);
                    for l in lo..hi {
                        let v = dcol[(c * k + kk, b * len + l)];
                        dx[(b, c, l + kk - pad)] = dx[(b, c, l + kk - pad)] + v;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

// ---------------------------------------------------------------------
// BatchNorm over the channel axis of (batch, channels, length)
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: ArrayD<F>,
    pub beta: ArrayD<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    channels: usize,
    cache: Option<BnCache<F>>,
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    normalized: Array3<F>,
    inv_std: Array1<F>,
    train_mode: bool,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        let dyn1 = |v: F| ArrayD::from_elem(ndarray::IxDyn(&[channels]), v);
        BatchNorm {
            gamma: dyn1(F::one()),
            beta: dyn1(F::zero()),
            running_mean: dyn1(F::zero()),
            running_var: dyn1(F::one()),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array3<F>, train: bool) -> Array3<F> {
        let (batch, channels, len) = x.dim();
        assert_eq!(channels, self.channels);
        let n = F::from_f64((batch * len) as f64);
        let eps = F::from_f64(BN_EPS);

        let mut mean = Array1::zeros(channels);
        let mut var = Array1::zeros(channels);
        if train {
            for c in 0..channels {
                let mut s = F::zero();
                for b in 0..batch {
                    for l in 0..len {
                        s = s + x[(b, c, l)];
                    }
                }
                mean[c] = s / n;
                let mut v = F::zero();
                for b in 0..batch {
                    for l in 0..len {
                        let d = x[(b, c, l)] - mean[c];
                        v = v + d * d;
                    }
                }
                var[c] = v / n;
            }
            let momentum = F::from_f64(BN_MOMENTUM);
            let one_minus = F::one() - momentum;
            for c in 0..channels {
                self.running_mean[c] = momentum * self.running_mean[c] + one_minus * mean[c];
                self.running_var[c] = momentum * self.running_var[c] + one_minus * var[c];
            }
        } else {
            for c in 0..channels {
                mean[c] = self.running_mean[c];
                var[c] = self.running_var[c];
            }
        }

        let mut inv_std = Array1::zeros(channels);
        for c in 0..channels {
            inv_std[c] = F::one() / (var[c] + eps).sqrt();
        }

        let mut normalized = Array3::zeros((batch, channels, len));
        let mut out = Array3::zeros((batch, channels, len));
        for b in 0..batch {
            for c in 0..channels {
                let g = self.gamma[c];
                let bt = self.beta[c];
                for l in 0..len {
                    let xhat = (x[(b, c, l)] - mean[c]) * inv_std[c];
                    normalized[(b, c, l)] = xhat;
                    out[(b, c, l)] = g * xhat + bt;
                }
            }
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            train_mode: train,
        });
        out
    }

    pub fn backward(&mut self, grad: Array3<F>) -> (Array3<F>, ArrayD<F>, ArrayD<F>) {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let (batch, channels, len) = grad.dim();
        let n = F::from_f64((batch * len) as f64);

        let mut dgamma = ArrayD::zeros(ndarray::IxDyn(&[channels]));
        let mut dbeta = ArrayD::zeros(ndarray::IxDyn(&[channels]));
        let mut dx = Array3::zeros((batch, channels, len));

        for c in 0..channels {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for b in 0..batch {
                for l in 0..len {
                    let dy = grad[(b, c, l)];
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * cache.normalized[(b, c, l)];
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;

            let g = self.gamma[c];
            let inv_std = cache.inv_std[c];
            if cache.train_mode {
                // full batch-statistics gradient
                for b in 0..batch {
                    for l in 0..len {
                        let dy = grad[(b, c, l)];
                        let xhat = cache.normalized[(b, c, l)];
                        dx[(b, c, l)] = g * inv_std / n
                            * (n * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            } else {
                // frozen statistics: the layer is affine per channel
                for b in 0..batch {
                    for l in 0..len {
                        dx[(b, c, l)] = g * inv_std * grad[(b, c, l)];
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

// ---------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu<F: Scalar> {
    cache: Option<Act<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: Act<F>) -> Act<F> {
        let out = match &x {
            Act::Seq(a) => Act::Seq(a.mapv(|v| v.max(F::zero()))),
            Act::Flat(a) => Act::Flat(a.mapv(|v| v.max(F::zero()))),
        };
        self.cache = Some(x);
        out
    }

    pub fn backward(&mut self, grad: Act<F>) -> Act<F> {
        let x = self.cache.take().expect("relu backward without forward");
        match (grad, x) {
            (Act::Seq(g), Act::Seq(x)) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(&x).for_each(|gv, &xv| {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                Act::Seq(g)
            }
            (Act::Flat(g), Act::Flat(x)) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(&x).for_each(|gv, &xv| {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                Act::Flat(g)
            }
            _ => panic!("relu gradient shape mismatch"),
        }
    }
}

// ---------------------------------------------------------------------
// MaxPool, size 2, stride 2, floor
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct MaxPool<F: Scalar> {
    cache: Option<PoolCache>,
    _marker: std::marker::PhantomData<F>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    /// offset (0 or 1) of the argmax inside each window
    argmax: Array3<u8>,
    input_len: usize,
}

impl<F: Scalar> MaxPool<F> {
    pub fn new() -> Self {
        MaxPool {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: Array3<F>) -> Array3<F> {
        let (batch, channels, len) = x.dim();
        let out_len = len / 2;
        let mut out = Array3::zeros((batch, channels, out_len));
        let mut argmax = Array3::zeros((batch, channels, out_len));
        for b in 0..batch {
            for c in 0..channels {
                for l in 0..out_len {
                    let a = x[(b, c, 2 * l)];
                    let bb = x[(b, c, 2 * l + 1)];
                    // ties go to the earlier sample
                    if bb > a {
                        out[(b, c, l)] = bb;
                        argmax[(b, c, l)] = 1;
                    } else {
                        out[(b, c, l)] = a;
                    }
                }
            }
        }
        self.cache = Some(PoolCache {
            argmax,
            input_len: len,
        });
        out
    }

    pub fn backward(&mut self, grad: Array3<F>) -> Array3<F> {
        let cache = self.cache.take().expect("maxpool backward without forward");
        let (batch, channels, out_len) = grad.dim();
        let mut dx = Array3::zeros((batch, channels, cache.input_len));
        for b in 0..batch {
            for c in 0..channels {
                for l in 0..out_len {
                    let off = cache.argmax[(b, c, l)] as usize;
                    dx[(b, c, 2 * l + off)] = grad[(b, c, l)];
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------
// Dropout, inverted scaling
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dropout<F: Scalar> {
    pub p: f64,
    cache: Option<Act<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(p: f64) -> Self {
        Dropout { p, cache: None }
    }

    pub fn forward(&mut self, x: Act<F>, phase: &mut Phase) -> Act<F> {
        match phase {
            Phase::Eval => {
                self.cache = None;
                x
            }
            Phase::Train(rng) => {
                let keep = 1.0 - self.p;
                let scale = F::from_f64(1.0 / keep);
                let mut mask_fill = |v: &mut F| {
                    *v = if rng.random::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    };
                };
                let (out, mask) = match x {
                    Act::Seq(a) => {
                        let mut mask = Array3::zeros(a.dim());
                        mask.iter_mut().for_each(&mut mask_fill);
                        (Act::Seq(&a * &mask), Act::Seq(mask))
                    }
                    Act::Flat(a) => {
                        let mut mask = Array2::zeros(a.dim());
                        mask.iter_mut().for_each(&mut mask_fill);
                        (Act::Flat(&a * &mask), Act::Flat(mask))
                    }
                };
                self.cache = Some(mask);
                out
            }
        }
    }

    pub fn backward(&mut self, grad: Act<F>) -> Act<F> {
        match self.cache.take() {
            None => grad,
            Some(mask) => match (grad, mask) {
                (Act::Seq(g), Act::Seq(m)) => Act::Seq(&g * &m),
                (Act::Flat(g), Act::Flat(m)) => Act::Flat(&g * &m),
                _ => panic!("dropout gradient shape mismatch"),
            },
        }
    }
}

// ---------------------------------------------------------------------
// Flatten (batch, channels, length) -> (batch, channels * length)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    shape: Option<(usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { shape: None }
    }

    pub fn forward<F: Scalar>(&mut self, x: Array3<F>) -> Array2<F> {
        let dim = x.dim();
        self.shape = Some(dim);
        let (batch, channels, len) = dim;
        x.into_shape_with_order((batch, channels * len)).unwrap()
    }

    pub fn backward<F: Scalar>(&mut self, grad: Array2<F>) -> Array3<F> {
        let shape = self.shape.expect("flatten backward without forward");
        grad.into_shape_with_order(shape).unwrap()
    }
}

// ---------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    /// (in, out)
    pub w: ArrayD<F>,
    /// (out,)
    pub b: ArrayD<F>,
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: he_uniform(&[in_dim, out_dim], in_dim, rng),
            b: ArrayD::zeros(ndarray::IxDyn(&[out_dim])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array2<F>) -> Array2<F> {
        let w = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = x.dot(&w);
        for mut row in out.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.iter()) {
                *v = *v + bias;
            }
        }
        self.cache = Some(x);
        out
    }

    pub fn backward(&mut self, grad: Array2<F>) -> (Array2<F>, ArrayD<F>, ArrayD<F>) {
        let x = self.cache.take().expect("dense backward without forward");
        let w = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let dw = x.t().dot(&grad).into_dyn();
        let db = grad.sum_axis(ndarray::Axis(0)).into_dyn();
        let dx = grad.dot(&w.t());
        (dx, dw, db)
    }
}

/// He-uniform fan-in initialization.
fn he_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut arr = ArrayD::zeros(ndarray::IxDyn(shape));
    for v in arr.iter_mut() {
        *v = F::from_f64(rng.random_range(-limit..limit));
    }
    arr
}
