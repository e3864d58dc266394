//! Adadelta with accumulator decay rho = 0.95, epsilon = 1e-6, lr = 1.0.

use ndarray::ArrayD;

use super::{Grads, Network, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adadelta<F: Scalar> {
    pub lr: F,
    pub rho: F,
    pub eps: F,
    /// running E[g^2] and E[dx^2], aligned with the network parameters
    acc: Vec<Vec<(ArrayD<F>, ArrayD<F>)>>,
}

impl<F: Scalar> Adadelta<F> {
    pub fn new(network: &Network<F>) -> Self {
        let acc = network
            .layers
            .iter()
            .map(|layer| {
                layer
                    .params()
                    .iter()
                    .map(|p| {
                        (
                            ArrayD::zeros(p.raw_dim()),
                            ArrayD::zeros(p.raw_dim()),
                        )
                    })
                    .collect()
            })
            .collect();
        Adadelta {
            lr: F::one(),
            rho: F::from_f64(0.95),
            eps: F::from_f64(1e-6),
            acc,
        }
    }

    /// One Adadelta update on a single parameter array. `eg2` / `edx2` are the
    /// running squared-gradient and squared-update accumulators for that array.
    pub fn apply(
        param: &mut ArrayD<F>,
        grad: &ArrayD<F>,
        eg2: &mut ArrayD<F>,
        edx2: &mut ArrayD<F>,
        rho: F,
        eps: F,
        lr: F,
    ) {
        let one_minus_rho = F::one() - rho;
        for ((p, &g), (e_g, e_dx)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(eg2.iter_mut().zip(edx2.iter_mut()))
        {
            *e_g = rho * *e_g + one_minus_rho * g * g;
            let update = -((*e_dx + eps).sqrt() / (*e_g + eps).sqrt()) * g;
            *e_dx = rho * *e_dx + one_minus_rho * update * update;
            *p = *p + lr * update;
        }
    }

    pub fn step(&mut self, network: &mut Network<F>, grads: &Grads<F>) -> Result<()> {
        if grads.len() != network.layers.len() {
            return Err(Error::Parameter(
                "gradient list does not match layer count".into(),
            ));
        }
        for ((layer, layer_grads), layer_acc) in network
            .layers
            .iter_mut()
            .zip(grads)
            .zip(self.acc.iter_mut())
        {
            let params = layer.params_mut();
            if params.len() != layer_grads.len() {
                return Err(Error::Parameter(
                    "gradient count does not match parameter count".into(),
                ));
            }
            for ((param, grad), (eg2, edx2)) in
                params.into_iter().zip(layer_grads).zip(layer_acc.iter_mut())
            {
                if param.shape() != grad.shape() {
                    return Err(Error::Parameter(format!(
                        "gradient shape {:?} does not match parameter shape {:?}",
                        grad.shape(),
                        param.shape()
                    )));
                }
                Self::apply(param, grad, eg2, edx2, self.rho, self.eps, self.lr);
            }
        }
        Ok(())
    }
}
