//! Dense -> batch-norm -> ReLU -> dropout block with an exact backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
            eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
    pub dropout: bool,
}

/// Intermediates of one block for one batch.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    /// Normalised pre-activations (train mode with batch norm only).
    pub xhat: Option<Array2<f64>>,
    pub inv_std: Option<Array1<f64>>,
    pub batch_mean: Option<Array1<f64>>,
    pub batch_var: Option<Array1<f64>>,
    /// Input to the ReLU.
    pub activation_in: Array2<f64>,
    /// Output of the ReLU, before dropout.
    pub activation: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)).
    pub mask: Option<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrads {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
            gamma: layer.norm.as_ref().map(|n| Array1::zeros(n.gamma.len())),
            beta: layer.norm.as_ref().map(|n| Array1::zeros(n.beta.len())),
        }
    }
}

impl Dense {
    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }

    pub(crate) fn forward(
        &self,
        input: ArrayView2<f64>,
        train: bool,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> LayerTrace {
        let mut pre = input.dot(&self.weight.t());
        pre += &self.bias;

        let (activation_in, xhat, inv_std, batch_mean, batch_var) = match &self.norm {
            None => (pre.clone(), None, None, None, None),
            Some(bn) if train => {
                let mean = pre.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &pre - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let xhat = &centered * &inv_std;
                let y = &xhat * &bn.gamma + &bn.beta;
                (y, Some(xhat), Some(inv_std), Some(mean), Some(var))
            }
            Some(bn) => {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let y = (&pre - &bn.running_mean) * &inv_std * &bn.gamma + &bn.beta;
                (y, None, None, None, None)
            }
        };

        let activation = activation_in.mapv(|v| v.max(0.0));
        let mask = (train && self.dropout && dropout_rate > 0.0).then(|| {
            let keep = 1.0 - dropout_rate;
            let scale = 1.0 / keep;
            Array2::from_shape_simple_fn(activation.raw_dim(), || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
        });
        let output = match &mask {
            Some(m) => &activation * m,
            None => activation.clone(),
        };

        LayerTrace {
            input: input.to_owned(),
            pre,
            xhat,
            inv_std,
            batch_mean,
            batch_var,
            activation_in,
            activation,
            mask,
            output,
        }
    }

    /// Folds batch statistics into the running estimates.
    pub(crate) fn update_running(&mut self, trace: &LayerTrace) {
        let (Some(bn), Some(mean), Some(var)) = (&mut self.norm, &trace.batch_mean, &trace.batch_var) else {
            return;
        };
        let n = trace.pre.nrows() as f64;
        let unbiased = n / (n - 1.0).max(1.0);
        let m = bn.momentum;
        Zip::from(&mut bn.running_mean)
            .and(mean)
            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
        Zip::from(&mut bn.running_var)
            .and(var)
            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b * unbiased);
    }

    /// Returns parameter gradients and, when requested, the gradient with
    /// respect to the block input.
    pub(crate) fn backward(
        &self,
        trace: &LayerTrace,
        grad_output: ArrayView2<f64>,
        need_input_grad: bool,
    ) -> (DenseGrads, Option<Array2<f64>>) {
        let mut grad = match &trace.mask {
            Some(m) => &grad_output * m,
            None => grad_output.to_owned(),
        };
        Zip::from(&mut grad)
            .and(&trace.activation_in)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });

        let (grad_pre, gamma, beta) = match (&self.norm, &trace.xhat, &trace.inv_std) {
            (Some(bn), Some(xhat), Some(inv_std)) => {
                let dgamma = (&grad * xhat).sum_axis(Axis(0));
                let dbeta = grad.sum_axis(Axis(0));
                let dxhat = &grad * &bn.gamma;
                let n = grad.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                let mut dpre = dxhat * n;
                dpre -= &sum_dxhat;
                dpre -= &(xhat * &sum_dxhat_xhat);
                dpre *= &(inv_std / n);
                (dpre, Some(dgamma), Some(dbeta))
            }
            (Some(_), _, _) => panic!("backward requires a train-mode trace"),
            (None, _, _) => (grad, None, None),
        };

        let weight = grad_pre.t().dot(&trace.input);
        let bias = grad_pre.sum_axis(Axis(0));
        let input_grad = need_input_grad.then(|| grad_pre.dot(&self.weight));
        (
            DenseGrads {
                weight,
                bias,
                gamma,
                beta,
            },
            input_grad,
        )
    }
}
