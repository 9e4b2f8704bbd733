//! Teacher/student classifiers, the generator, class embeddings, the EMA
//! generator, and their checkpoint format.

mod checkpoint;
mod classifier;
mod ema;
mod generator;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use classifier::{build_classifier, ClassifierNet, ClassifierOutput};
pub use ema::{ema_init, EmaState};
pub use generator::{
    build_generator, Conditioning, EmbeddingTable, GeneratorNet, GeneratorOutput,
};

use crate::diffcore::{BatchNormState, Graph, RngState, Tensor, Var};

/// Anything that owns trainable tensors and (optionally) running statistics.
///
/// `parameters` and `parameters_mut` must list tensors in the same order;
/// that order is also the order of the variables returned by `bind`.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Non-trainable state that still travels with the model (BatchNorm
    /// running moments).
    fn buffers(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    /// Inserts every parameter into `g`, as trainable leaves or constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Fully connected layer `xW + b`, with `W` stored as `d_in×d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Fan-in scaled uniform initialization, `U(−1/√d_in, 1/√d_in)` for both
    /// weight and bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Dense {
            weight: rng.uniform_tensor(&[d_in, d_out], -bound, bound),
            bias: rng.uniform_tensor(&[d_out], -bound, bound),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `dense → BatchNorm → activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: Dense,
    pub bn: BatchNormState,
}

impl Block {
    fn init(d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        Block {
            dense: Dense::init(d_in, d_out, rng),
            bn: BatchNormState::new(d_out),
        }
    }
}

pub(crate) fn block_parameters(blocks: &[Block]) -> impl Iterator<Item = &Tensor> {
    blocks
        .iter()
        .flat_map(|b| [&b.dense.weight, &b.dense.bias, &b.bn.scale, &b.bn.shift])
}

pub(crate) fn block_parameters_mut(blocks: &mut [Block]) -> impl Iterator<Item = &mut Tensor> {
    blocks.iter_mut().flat_map(|b| {
        [
            &mut b.dense.weight,
            &mut b.dense.bias,
            &mut b.bn.scale,
            &mut b.bn.shift,
        ]
    })
}

pub(crate) fn block_buffers(blocks: &[Block]) -> Vec<&Tensor> {
    blocks
        .iter()
        .flat_map(|b| [&b.bn.running_mean, &b.bn.running_var])
        .collect()
}

pub(crate) fn block_buffers_mut(blocks: &mut [Block]) -> Vec<&mut Tensor> {
    blocks
        .iter_mut()
        .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
        .collect()
}

/// Overwrites every parameter and buffer of `dst` with those of `src`.
pub fn copy_state<P: Parameterized>(dst: &mut P, src: &P) {
    for (d, s) in dst.parameters_mut().into_iter().zip(src.parameters()) {
        d.clone_from(s);
    }
    for (d, s) in dst.buffers_mut().into_iter().zip(src.buffers()) {
        d.clone_from(s);
    }
}
