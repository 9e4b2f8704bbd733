use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::checkpoint::{self, Checkpoint};
use super::{
    block_buffers, block_buffers_mut, block_parameters, block_parameters_mut, Block, Dense,
    Parameterized,
};
use crate::diffcore::{
    activation, batchnorm, dense, Activation, BnMode, Graph, RngState, Tensor, Var,
};
use crate::error::{CheckpointError, Error, Result};

/// How the class embedding enters the generator's first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Conditioning {
    /// `h = Wz + b`
    Uncond,
    /// `h = W(z + e_y) + b`
    Sum,
    /// `h = Wz + Ue_y + b`, realized as `[W; U]` applied to `[z; e_y]`
    Cat,
}

impl Conditioning {
    pub fn is_conditional(self) -> bool {
        self != Conditioning::Uncond
    }

    fn code(self) -> f64 {
        match self {
            Conditioning::Uncond => 0.0,
            Conditioning::Sum => 1.0,
            Conditioning::Cat => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Conditioning::Uncond),
            1 => Some(Conditioning::Sum),
            2 => Some(Conditioning::Cat),
            _ => None,
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Uncond => "uncond",
            Conditioning::Sum => "sum",
            Conditioning::Cat => "cat",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(Conditioning::Uncond),
            "sum" => Ok(Conditioning::Sum),
            "cat" => Ok(Conditioning::Cat),
            other => Err(Error::config(format!(
                "unknown conditioning `{other}` (expected uncond, sum or cat)"
            ))),
        }
    }
}

/// Trainable class embeddings `e_1..e_C`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weight: Tensor,
}

impl EmbeddingTable {
    /// Rows drawn from `N(0, I)`.
    pub fn init(classes: usize, d_e: usize, rng: &mut RngState) -> Self {
        EmbeddingTable {
            weight: rng.normal_tensor(&[classes, d_e]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// Rows `e_y` for the given labels as an `N×d_e` tensor.
    pub fn rows_for(&self, labels: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(self.weight.select_rows(labels))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("meta.kind", Tensor::scalar(checkpoint::KIND_EMBEDDINGS));
        ck.push("embeddings", self.weight.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        checkpoint::expect_kind(ck, checkpoint::KIND_EMBEDDINGS)?;
        let weight = ck.require("embeddings")?.clone();
        if weight.rank() != 2 || weight.rows() < 2 {
            return Err(CheckpointError::ShapeMismatch(format!(
                "embedding table shape {:?}",
                weight.shape()
            )));
        }
        Ok(EmbeddingTable { weight })
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

impl Parameterized for EmbeddingTable {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }
}

/// MLP generator producing output logits `u`; samples are `x = sigmoid(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub conditioning: Conditioning,
    pub d_z: usize,
    pub d_e: usize,
    pub blocks: Vec<Block>,
    pub out: Dense,
    pub activation: Activation,
}

pub struct GeneratorOutput {
    pub u: Var,
    pub x: Var,
    pub moments: Vec<(Var, Var)>,
}

/// Builds a generator and, in conditional modes, its embedding table.
pub fn build_generator(
    d_z: usize,
    d_e: usize,
    hidden: &[usize],
    d_out: usize,
    conditioning: Conditioning,
    classes: usize,
    rng: &mut RngState,
) -> Result<(GeneratorNet, Option<EmbeddingTable>)> {
    if hidden.is_empty() {
        return Err(Error::config("generator needs at least one hidden layer"));
    }
    if d_z == 0 || d_out == 0 || hidden.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if conditioning == Conditioning::Sum && d_e != d_z {
        return Err(Error::config(format!(
            "sum conditioning needs d_e == d_z, got d_e={d_e}, d_z={d_z}"
        )));
    }
    if conditioning.is_conditional() && (d_e == 0 || classes < 2) {
        return Err(Error::config("conditional generator needs d_e > 0 and C >= 2"));
    }
    let d_in = match conditioning {
        Conditioning::Uncond | Conditioning::Sum => d_z,
        Conditioning::Cat => d_z + d_e,
    };
    let mut blocks = Vec::with_capacity(hidden.len());
    let mut width = d_in;
    for &h in hidden {
        blocks.push(Block::init(width, h, rng));
        width = h;
    }
    let out = Dense::init(width, d_out, rng);
    let table = conditioning
        .is_conditional()
        .then(|| EmbeddingTable::init(classes, d_e, rng));
    let net = GeneratorNet {
        conditioning,
        d_z,
        d_e: if conditioning.is_conditional() { d_e } else { 0 },
        blocks,
        out,
        activation: Activation::leaky(),
    };
    Ok((net, table))
}

impl GeneratorNet {
    pub fn d_out(&self) -> usize {
        self.out.d_out()
    }

    pub fn input_width(&self) -> usize {
        self.blocks[0].dense.d_in()
    }

    /// Forms the first-layer input from noise and (optionally) embeddings.
    fn input(&self, g: &mut Graph, z: Var, e: Option<Var>) -> Result<Var> {
        let zw = g.value(z).cols();
        if zw != self.d_z {
            return Err(Error::shape("generator", format!("noise width {zw}, expected {}", self.d_z)));
        }
        match (self.conditioning, e) {
            (Conditioning::Uncond, None) => Ok(z),
            (Conditioning::Uncond, Some(_)) => Err(Error::InvalidArgument(
                "unconditional generator does not take embeddings".into(),
            )),
            (_, None) => Err(Error::InvalidArgument(format!(
                "{} generator needs class embeddings",
                self.conditioning
            ))),
            (Conditioning::Sum, Some(e)) => g.add(z, e),
            (Conditioning::Cat, Some(e)) => g.concat_cols(z, e),
        }
    }

    /// Builds `u = G_lg(·)` and `x = sigmoid(u)` on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        z: Var,
        e: Option<Var>,
        mode: BnMode,
    ) -> Result<GeneratorOutput> {
        let mut h = self.input(g, z, e)?;
        let mut moments = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let p = &params[4 * i..4 * i + 4];
            let a = dense(g, h, p[0], p[1])?;
            let bn = batchnorm(g, a, p[2], p[3], &block.bn, mode, false)?;
            if let Some(m) = bn.moments {
                moments.push(m);
            }
            h = activation(g, bn.y, self.activation);
        }
        let k = 4 * self.blocks.len();
        let u = dense(g, h, params[k], params[k + 1])?;
        let x = g.sigmoid(u);
        Ok(GeneratorOutput { u, x, moments })
    }

    pub fn update_running(&mut self, g: &Graph, out: &GeneratorOutput) {
        for (block, &(m, v)) in self.blocks.iter_mut().zip(&out.moments) {
            block.bn.update_running(g.value(m), g.value(v));
        }
    }

    /// Gradient-free synthesis returning `(u, x)`.
    pub fn generate(
        &self,
        table: Option<&EmbeddingTable>,
        z: &Tensor,
        labels: Option<&[usize]>,
        mode: BnMode,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let e = match (table, labels) {
            (Some(t), Some(y)) => Some(g.constant(t.rows_for(y)?)),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "embeddings and labels must be given together".into(),
                ))
            }
        };
        let out = self.forward(&mut g, &params, zv, e, mode)?;
        g.check_finite()?;
        Ok((g.value(out.u).clone(), g.value(out.x).clone()))
    }

    /// First-layer preactivation `h` for the configured conditioning.
    pub fn first_layer_preactivation(&self, z: &Tensor, e: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let ev = e.map(|t| g.constant(t.clone()));
        let input = self.input(&mut g, zv, ev)?;
        let w = g.constant(self.blocks[0].dense.weight.clone());
        let b = g.constant(self.blocks[0].dense.bias.clone());
        let h = dense(&mut g, input, w, b)?;
        Ok(g.value(h).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("meta.kind", Tensor::scalar(checkpoint::KIND_GENERATOR));
        ck.push("meta.conditioning", Tensor::scalar(self.conditioning.code()));
        ck.push("meta.dims", Tensor::vector(vec![self.d_z as f64, self.d_e as f64]));
        let (code, slope) = checkpoint::activation_code(self.activation);
        ck.push("meta.activation", Tensor::vector(vec![code, slope]));
        checkpoint::push_blocks(&mut ck, &self.blocks);
        ck.push("out.weight", self.out.weight.clone());
        ck.push("out.bias", self.out.bias.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        checkpoint::expect_kind(ck, checkpoint::KIND_GENERATOR)?;
        let mismatch = |m: &str| CheckpointError::ShapeMismatch(m.to_string());
        let conditioning = ck
            .require("meta.conditioning")?
            .data()
            .first()
            .and_then(|&c| Conditioning::from_code(c))
            .ok_or_else(|| mismatch("unknown conditioning code"))?;
        let [d_z, d_e] = ck.require("meta.dims")?.data() else {
            return Err(mismatch("`meta.dims` must hold 2 values"));
        };
        let (d_z, d_e) = (*d_z as usize, *d_e as usize);
        let d_in = match conditioning {
            Conditioning::Cat => d_z + d_e,
            _ => d_z,
        };
        let activation = checkpoint::read_activation(ck)?;
        let blocks = checkpoint::read_blocks(ck, Some(d_in))?;
        let last = blocks.last().map_or(0, |b| b.dense.d_out());
        let out = checkpoint::read_dense(ck, "out", last)?;
        Ok(GeneratorNet {
            conditioning,
            d_z,
            d_e,
            blocks,
            out,
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

impl Parameterized for GeneratorNet {
    fn parameters(&self) -> Vec<&Tensor> {
        block_parameters(&self.blocks)
            .chain([&self.out.weight, &self.out.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let out = &mut self.out;
        block_parameters_mut(&mut self.blocks)
            .chain([&mut out.weight, &mut out.bias])
            .collect()
    }

    fn buffers(&self) -> Vec<&Tensor> {
        block_buffers(&self.blocks)
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        block_buffers_mut(&mut self.blocks)
    }
}
