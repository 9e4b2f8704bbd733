use std::path::Path;

use super::checkpoint::{self, Checkpoint};
use super::{
    block_buffers, block_buffers_mut, block_parameters, block_parameters_mut, Block, Dense,
    Parameterized,
};
use crate::diffcore::{
    activation, batchnorm, dense, Activation, BnMode, Graph, RngState, Tensor, Var,
};
use crate::error::{CheckpointError, Error, Result};

/// MLP classifier: `(dense → BatchNorm → activation)*` followed by a dense
/// head of width `C`. Used for both the teacher and the student.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    pub blocks: Vec<Block>,
    pub head: Dense,
    pub activation: Activation,
}

pub struct ClassifierOutput {
    pub logits: Var,
    /// Per-BatchNorm-layer batch mean and biased variance of the layer input,
    /// when computed.
    pub moments: Vec<(Var, Var)>,
}

pub fn build_classifier(
    d_in: usize,
    hidden: &[usize],
    classes: usize,
    rng: &mut RngState,
) -> Result<ClassifierNet> {
    if hidden.is_empty() {
        return Err(Error::config("classifier needs at least one hidden layer"));
    }
    if classes < 2 {
        return Err(Error::config(format!("classifier needs C >= 2, got {classes}")));
    }
    if d_in == 0 || hidden.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    let mut blocks = Vec::with_capacity(hidden.len());
    let mut width = d_in;
    for &h in hidden {
        blocks.push(Block::init(width, h, rng));
        width = h;
    }
    let head = Dense::init(width, classes, rng);
    Ok(ClassifierNet {
        blocks,
        head,
        activation: Activation::Relu,
    })
}

impl ClassifierNet {
    pub fn d_in(&self) -> usize {
        self.blocks[0].dense.d_in()
    }

    pub fn classes(&self) -> usize {
        self.head.d_out()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Builds the forward pass on `g`. `params` comes from [`Parameterized::bind`].
    ///
    /// In eval mode BatchNorm batch moments are only recorded when
    /// `want_moments` is set (needed for moment matching against this net's
    /// running statistics).
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        mode: BnMode,
        want_moments: bool,
    ) -> Result<ClassifierOutput> {
        let d_in = g.value(x).cols();
        if d_in != self.d_in() {
            return Err(Error::shape(
                "classifier",
                format!("input width {d_in}, expected {}", self.d_in()),
            ));
        }
        let mut h = x;
        let mut moments = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let p = &params[4 * i..4 * i + 4];
            let z = dense(g, h, p[0], p[1])?;
            let out = batchnorm(g, z, p[2], p[3], &block.bn, mode, want_moments)?;
            if let Some(m) = out.moments {
                moments.push(m);
            }
            h = activation(g, out.y, self.activation);
        }
        let k = 4 * self.blocks.len();
        let logits = dense(g, h, params[k], params[k + 1])?;
        Ok(ClassifierOutput { logits, moments })
    }

    /// Folds the batch moments of a train-mode forward pass into the running
    /// statistics.
    pub fn update_running(&mut self, g: &Graph, out: &ClassifierOutput) {
        for (block, &(m, v)) in self.blocks.iter_mut().zip(&out.moments) {
            block.bn.update_running(g.value(m), g.value(v));
        }
    }

    /// Gradient-free logits for a batch.
    pub fn logits(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv, mode, false)?;
        g.check_finite()?;
        Ok(g.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("meta.kind", Tensor::scalar(checkpoint::KIND_CLASSIFIER));
        let (code, slope) = checkpoint::activation_code(self.activation);
        ck.push("meta.activation", Tensor::vector(vec![code, slope]));
        checkpoint::push_blocks(&mut ck, &self.blocks);
        ck.push("head.weight", self.head.weight.clone());
        ck.push("head.bias", self.head.bias.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        checkpoint::expect_kind(ck, checkpoint::KIND_CLASSIFIER)?;
        let activation = checkpoint::read_activation(ck)?;
        let blocks = checkpoint::read_blocks(ck, None)?;
        let last = blocks.last().map_or(0, |b| b.dense.d_out());
        let head = checkpoint::read_dense(ck, "head", last)?;
        if head.d_out() < 2 {
            return Err(CheckpointError::ShapeMismatch("head width must be >= 2".into()));
        }
        Ok(ClassifierNet {
            blocks,
            head,
            activation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        Self::from_checkpoint(&ck).map_err(|kind| Error::Checkpoint {
            path: path.to_path_buf(),
            kind,
        })
    }
}

impl Parameterized for ClassifierNet {
    fn parameters(&self) -> Vec<&Tensor> {
        block_parameters(&self.blocks)
            .chain([&self.head.weight, &self.head.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let head = &mut self.head;
        block_parameters_mut(&mut self.blocks)
            .chain([&mut head.weight, &mut head.bias])
            .collect()
    }

    fn buffers(&self) -> Vec<&Tensor> {
        block_buffers(&self.blocks)
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        block_buffers_mut(&mut self.blocks)
    }
}
