use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// BatchNorm running-statistics momentum, `r ← (1 − m)·r + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)
    }
}

/// Row-wise affine map `xW + b`.
pub fn dense(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = g.matmul(x, weight)?;
    g.add_row(h, bias)
}

pub fn activation(g: &mut Graph, x: Var, kind: Activation) -> Var {
    match kind {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

pub fn log_softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    g.log_softmax(logits)
}

/// Plain row-wise softmax of an `N×C` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Affine parameters and running moments of one BatchNorm layer.
///
/// Running variance is the biased batch variance, matching the normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            scale: Tensor::full(&[width], 1.0),
            shift: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }

    /// Folds one batch's moments into the running statistics.
    pub fn update_running(&mut self, mean: &Tensor, var: &Tensor) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch moments.
    Train,
    /// Normalize with the running moments.
    Eval,
}

pub struct BnOutput {
    pub y: Var,
    /// Batch mean and biased batch variance of the layer input. Always present
    /// in train mode; in eval mode only when requested.
    pub moments: Option<(Var, Var)>,
}

/// BatchNorm over the rows of an `N×d` input.
///
/// `scale` and `shift` are graph variables so the caller decides whether they
/// are trainable. Running statistics are read from `state` but never written
/// here; call [`BatchNormState::update_running`] with the returned moments.
pub fn batchnorm(
    g: &mut Graph,
    x: Var,
    scale: Var,
    shift: Var,
    state: &BatchNormState,
    mode: BnMode,
    want_moments: bool,
) -> Result<BnOutput> {
    let n = g.value(x).rows();
    let width = g.value(x).cols();
    if width != state.width() {
        return Err(Error::shape(
            "batchnorm",
            format!("input width {width} vs layer width {}", state.width()),
        ));
    }
    let batch_moments = |g: &mut Graph| -> Result<(Var, Var, Var)> {
        let mean = g.col_mean(x)?;
        let centered = g.sub_row(x, mean)?;
        let sq = g.square(centered);
        let var = g.col_mean(sq)?;
        Ok((mean, var, centered))
    };
    match mode {
        BnMode::Train => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm in train mode needs at least 2 rows, got {n}"
                )));
            }
            let (mean, var, centered) = batch_moments(g)?;
            let shifted = g.add_scalar(var, state.epsilon);
            let inv_std = g.powf(shifted, -0.5);
            let normed = g.mul_row(centered, inv_std)?;
            let scaled = g.mul_row(normed, scale)?;
            let y = g.add_row(scaled, shift)?;
            Ok(BnOutput {
                y,
                moments: Some((mean, var)),
            })
        }
        BnMode::Eval => {
            let moments = if want_moments && n > 0 {
                let (mean, var, _) = batch_moments(g)?;
                Some((mean, var))
            } else {
                None
            };
            let rm = g.constant(state.running_mean.clone());
            let inv = state
                .running_var
                .map(|v| 1.0 / (v + state.epsilon).sqrt());
            let inv = g.constant(inv);
            let centered = g.sub_row(x, rm)?;
            let normed = g.mul_row(centered, inv)?;
            let scaled = g.mul_row(normed, scale)?;
            let y = g.add_row(scaled, shift)?;
            Ok(BnOutput { y, moments })
        }
    }
}
