//! Experiment configuration and its flat `key = value` file format.
//!
//! One assignment per line, `#` starts a comment, unknown or repeated keys
//! are errors. A `preset` line, wherever it appears, is applied before all
//! other keys. [`Config::to_resolved`] writes every key back out so that a
//! run directory fully describes its own configuration.
//!
//! Key reference (defaults are the `desk` preset):
//!
//! | key | meaning |
//! |---|---|
//! | `preset` | `desk`, `cifar` (small-image uncond) or `imagenet` (large-image conditional) |
//! | `seed` | teacher init and every distillation random stream |
//! | `data.kind`, `data.classes`, `data.per_class`, `data.d_in`, `data.spread`, `data.test_fraction`, `data.seed` | synthetic dataset |
//! | `teacher.hidden`, `teacher.lr`, `teacher.wd`, `teacher.mo`, `teacher.bs`, `teacher.ld`, `teacher.ldep`, `teacher.ep`, `teacher.wep` | teacher pretraining |
//! | `method` | `abm`, `mem` or `mad` |
//! | `alpha` | EMA momentum |
//! | `lambda0` .. `lambda5` | loss coefficients (student G stream, student EMA/memory stream, adversarial KD, NLL, norm regularization, BatchNorm moment matching) |
//! | `zeta0` .. `zeta2` | clamp coefficients (student logits, teacher logits, generator logits) |
//! | `delta`, `nu`, `gamma` | logit bound, generator logit bound, embedding norm scale |
//! | `n_s`, `n_g` | student and generator steps per stage |
//! | `bs`, `ep`, `spe`, `ld`, `ldep` | batch size, epochs, stages per epoch, LR decay factor and epochs |
//! | `d_z`, `d_e`, `conditioning`, `pgs` | noise width, embedding width, `uncond`/`sum`/`cat`, generator pretraining steps |
//! | `opt_s`, `lr_s`, `wd_s`, `mo_s`, `student.hidden` | student optimizer and architecture |
//! | `opt_g`, `lr_g`, `wd_g`, `mo_g`, `generator.hidden` | generator optimizer and architecture |
//! | `mem.capacity`, `mem.fraction` | memory bank size and replay batch fraction of `bs` |
//! | `ema.bn` | BatchNorm mode of the EMA generator while training the student: `train` or `eval` |
//! | `ckpt_every`, `probe.lag`, `sample_every` | checkpoint cadence (stages), extra lagged student checkpoints, sample dump cadence (epochs) |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::diffcore::BnMode;
use crate::error::{Error, Result};
use crate::losses::{GeneratorLossWeights, StudentLossWeights};
use crate::models::Conditioning;
use crate::optim::{LrSchedule, OptimState, Rule};

/// Distillation algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Adversarial belief matching: student sees only the current generator.
    Abm,
    /// Replays past synthetic samples from a memory bank.
    Mem,
    /// Momentum adversarial distillation: adds an EMA generator stream.
    Mad,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Abm => "abm",
            Method::Mem => "mem",
            Method::Mad => "mad",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abm" => Ok(Method::Abm),
            "mem" => Ok(Method::Mem),
            "mad" => Ok(Method::Mad),
            other => Err(Error::config(format!("unknown method `{other}` (expected abm, mem or mad)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Rings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            classes: 8,
            per_class: 500,
            d_in: 2,
            spread: 0.06,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Optimizer rule, rates and schedule for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSettings {
    pub kind: OptimKind,
    pub lr: f64,
    pub wd: f64,
    /// Momentum, SGD only.
    pub mo: f64,
}

impl OptimSettings {
    pub fn build(&self) -> OptimState {
        match self.kind {
            OptimKind::Sgd => OptimState::sgd(self.lr, self.wd, self.mo),
            OptimKind::Adam => OptimState::new(Rule::adam(), self.lr, self.wd),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub wd: f64,
    pub mo: f64,
    pub bs: usize,
    pub ld: f64,
    pub ldep: Vec<usize>,
    pub ep: usize,
    pub wep: usize,
}

impl TeacherConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            decay: self.ld,
            decay_epochs: self.ldep.clone(),
            warmup_epochs: self.wep,
        }
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![32, 32],
            lr: 0.1,
            wd: 5e-4,
            mo: 0.9,
            bs: 128,
            ld: 0.1,
            ldep: vec![20, 30],
            ep: 40,
            wep: 0,
        }
    }
}

/// Every hyperparameter of a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub alpha: f64,
    pub student_loss: StudentLossWeights,
    pub generator_loss: GeneratorLossWeights,
    pub n_s: usize,
    pub n_g: usize,
    pub bs: usize,
    pub ep: usize,
    pub spe: usize,
    pub ld: f64,
    pub ldep: Vec<usize>,
    pub d_z: usize,
    pub d_e: usize,
    pub conditioning: Conditioning,
    pub pgs: usize,
    pub student_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub student_opt: OptimSettings,
    pub generator_opt: OptimSettings,
    pub mem_capacity: usize,
    pub mem_fraction: f64,
    pub ema_bn: BnMode,
    pub ckpt_every: usize,
    pub probe_lag: usize,
    pub sample_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Mad,
            alpha: 0.95,
            student_loss: StudentLossWeights::default(),
            generator_loss: GeneratorLossWeights::unconditional(),
            n_s: 15,
            n_g: 3,
            bs: 128,
            ep: 60,
            spe: 20,
            ld: 0.1,
            ldep: vec![20, 40],
            d_z: 16,
            d_e: 16,
            conditioning: Conditioning::Uncond,
            pgs: 0,
            student_hidden: vec![16, 16],
            generator_hidden: vec![32, 32],
            student_opt: OptimSettings {
                kind: OptimKind::Sgd,
                lr: 1e-2,
                wd: 5e-4,
                mo: 0.9,
            },
            generator_opt: OptimSettings {
                kind: OptimKind::Adam,
                lr: 1e-3,
                wd: 5e-4,
                mo: 0.0,
            },
            mem_capacity: 8192,
            mem_fraction: 1.0,
            ema_bn: BnMode::Train,
            ckpt_every: 20,
            probe_lag: 5,
            sample_every: 10,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn stages(&self) -> usize {
        self.ep * self.spe
    }

    pub fn schedule(&self, base: f64) -> LrSchedule {
        LrSchedule {
            base,
            decay: self.ld,
            decay_epochs: self.ldep.clone(),
            warmup_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.student_loss;
        let g = &self.generator_loss;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let nonneg = [
            ("lambda0", s.gen),
            ("lambda1", s.second),
            ("lambda2", g.adversarial),
            ("lambda3", g.nll),
            ("lambda4", g.norm_reg),
            ("lambda5", g.bnmm),
            ("zeta0", s.clamp),
            ("zeta1", g.teacher_clamp),
            ("zeta2", g.logit_clamp),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(s.logit_bound > 0.0) || !(g.gen_logit_bound > 0.0) {
            return Err(Error::config("delta and nu must be > 0"));
        }
        if !(g.norm_scale >= 1.0) {
            return Err(Error::config(format!("gamma must be >= 1, got {}", g.norm_scale)));
        }
        if s.logit_bound != g.logit_bound {
            return Err(Error::config("student and teacher logit bounds must agree"));
        }
        if self.n_s == 0 || self.n_g == 0 {
            return Err(Error::config("n_s and n_g must be >= 1"));
        }
        if self.bs < 2 {
            return Err(Error::config("bs must be >= 2 (BatchNorm needs two samples)"));
        }
        if self.ep == 0 || self.spe == 0 {
            return Err(Error::config("ep and spe must be >= 1"));
        }
        if self.d_z == 0 || self.student_hidden.is_empty() || self.generator_hidden.is_empty() {
            return Err(Error::config("d_z and hidden layer lists must be non-empty"));
        }
        if self.method == Method::Mad && s.gen + s.second <= 0.0 {
            return Err(Error::config("mad needs lambda0 + lambda1 > 0"));
        }
        if self.method == Method::Mem && self.mem_capacity == 0 {
            return Err(Error::config("mem needs mem.capacity >= 1"));
        }
        if self.method == Method::Mem && !(self.mem_fraction > 0.0 && self.mem_fraction <= 1.0) {
            return Err(Error::config("mem.fraction must lie in (0, 1]"));
        }
        if self.conditioning == Conditioning::Sum && self.d_e != self.d_z {
            return Err(Error::config(format!(
                "sum conditioning needs d_e = d_z (got d_e = {}, d_z = {})",
                self.d_e, self.d_z
            )));
        }
        if self.conditioning.is_conditional() && self.d_e == 0 {
            return Err(Error::config("conditional generators need d_e >= 1"));
        }
        if !self.conditioning.is_conditional() {
            if g.nll > 0.0 || g.norm_reg > 0.0 {
                return Err(Error::config(
                    "lambda3 and lambda4 need a conditional generator (conditioning = sum or cat)",
                ));
            }
            if self.pgs > 0 {
                return Err(Error::config("generator pretraining (pgs > 0) needs a conditional generator"));
            }
        }
        if self.ckpt_every == 0 {
            return Err(Error::config("ckpt_every must be >= 1"));
        }
        for lr in [self.student_opt.lr, self.generator_opt.lr] {
            self.schedule(lr).validate()?;
        }
        Ok(())
    }
}

/// Dataset, teacher and distillation settings of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: String,
    pub data: DatasetConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            preset: "desk".into(),
            data: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn optim_kind(key: &str, value: &str) -> Result<OptimKind> {
    match value {
        "sgd" => Ok(OptimKind::Sgd),
        "adam" => Ok(OptimKind::Adam),
        _ => Err(Error::config(format!("bad value `{value}` for key `{key}` (expected sgd or adam)"))),
    }
}

fn optim_name(k: OptimKind) -> &'static str {
    match k {
        OptimKind::Sgd => "sgd",
        OptimKind::Adam => "adam",
    }
}

impl Config {
    /// Built-in parameter sets: `desk` (default), `cifar`, `imagenet`.
    pub fn preset(name: &str) -> Result<Config> {
        let mut c = Config {
            preset: name.to_string(),
            ..Config::default()
        };
        let d = &mut c.distill;
        match name {
            "desk" => {}
            "cifar" => {
                d.bs = 256;
                d.ep = 300;
                d.spe = 50;
                d.ldep = vec![100, 200];
                d.n_s = 30;
                d.n_g = 3;
                d.d_z = 256;
                d.d_e = 256;
                d.ckpt_every = 500;
                d.probe_lag = 50;
            }
            "imagenet" => {
                d.bs = 512;
                d.ep = 6000;
                d.spe = 1;
                d.ld = 1.0;
                d.ldep = Vec::new();
                d.n_s = 150;
                d.n_g = 20;
                d.d_z = 256;
                d.d_e = 256;
                d.conditioning = Conditioning::Sum;
                d.pgs = 200;
                d.student_loss.clamp = 0.1;
                d.generator_loss = GeneratorLossWeights::conditional();
                d.student_opt = OptimSettings {
                    kind: OptimKind::Adam,
                    lr: 1e-4,
                    wd: 1e-4,
                    mo: 0.0,
                };
                d.generator_opt.lr = 1e-4;
                d.ckpt_every = 500;
                d.probe_lag = 50;
            }
            other => return Err(Error::config(format!("unknown preset `{other}`"))),
        }
        Ok(c)
    }

    /// Assigns one key; the value is the raw text after `=`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (data, t, d) = (&mut self.data, &mut self.teacher, &mut self.distill);
        match key {
            "preset" => {
                if v != self.preset {
                    return Err(Error::config("`preset` must be applied before other keys"));
                }
            }
            "seed" => d.seed = parse(key, v)?,
            "data.kind" => {
                data.kind = match v {
                    "blobs" => DatasetKind::Blobs,
                    "rings" => DatasetKind::Rings,
                    _ => return Err(Error::config(format!("bad value `{v}` for key `{key}`"))),
                }
            }
            "data.classes" => data.classes = parse(key, v)?,
            "data.per_class" => data.per_class = parse(key, v)?,
            "data.d_in" => data.d_in = parse(key, v)?,
            "data.spread" => data.spread = parse(key, v)?,
            "data.test_fraction" => data.test_fraction = parse(key, v)?,
            "data.seed" => data.seed = parse(key, v)?,
            "teacher.hidden" => t.hidden = parse_list(key, v)?,
            "teacher.lr" => t.lr = parse(key, v)?,
            "teacher.wd" => t.wd = parse(key, v)?,
            "teacher.mo" => t.mo = parse(key, v)?,
            "teacher.bs" => t.bs = parse(key, v)?,
            "teacher.ld" => t.ld = parse(key, v)?,
            "teacher.ldep" => t.ldep = parse_list(key, v)?,
            "teacher.ep" => t.ep = parse(key, v)?,
            "teacher.wep" => t.wep = parse(key, v)?,
            "method" => d.method = v.parse()?,
            "alpha" => d.alpha = parse(key, v)?,
            "lambda0" => d.student_loss.gen = parse(key, v)?,
            "lambda1" => d.student_loss.second = parse(key, v)?,
            "lambda2" => d.generator_loss.adversarial = parse(key, v)?,
            "lambda3" => d.generator_loss.nll = parse(key, v)?,
            "lambda4" => d.generator_loss.norm_reg = parse(key, v)?,
            "lambda5" => d.generator_loss.bnmm = parse(key, v)?,
            "zeta0" => d.student_loss.clamp = parse(key, v)?,
            "zeta1" => d.generator_loss.teacher_clamp = parse(key, v)?,
            "zeta2" => d.generator_loss.logit_clamp = parse(key, v)?,
            "delta" => {
                let x = parse(key, v)?;
                d.student_loss.logit_bound = x;
                d.generator_loss.logit_bound = x;
            }
            "nu" => d.generator_loss.gen_logit_bound = parse(key, v)?,
            "gamma" => d.generator_loss.norm_scale = parse(key, v)?,
            "n_s" => d.n_s = parse(key, v)?,
            "n_g" => d.n_g = parse(key, v)?,
            "bs" => d.bs = parse(key, v)?,
            "ep" => d.ep = parse(key, v)?,
            "spe" => d.spe = parse(key, v)?,
            "ld" => d.ld = parse(key, v)?,
            "ldep" => d.ldep = parse_list(key, v)?,
            "d_z" => d.d_z = parse(key, v)?,
            "d_e" => d.d_e = parse(key, v)?,
            "conditioning" => d.conditioning = v.parse()?,
            "pgs" => d.pgs = parse(key, v)?,
            "opt_s" => d.student_opt.kind = optim_kind(key, v)?,
            "lr_s" => d.student_opt.lr = parse(key, v)?,
            "wd_s" => d.student_opt.wd = parse(key, v)?,
            "mo_s" => d.student_opt.mo = parse(key, v)?,
            "student.hidden" => d.student_hidden = parse_list(key, v)?,
            "opt_g" => d.generator_opt.kind = optim_kind(key, v)?,
            "lr_g" => d.generator_opt.lr = parse(key, v)?,
            "wd_g" => d.generator_opt.wd = parse(key, v)?,
            "mo_g" => d.generator_opt.mo = parse(key, v)?,
            "generator.hidden" => d.generator_hidden = parse_list(key, v)?,
            "mem.capacity" => d.mem_capacity = parse(key, v)?,
            "mem.fraction" => d.mem_fraction = parse(key, v)?,
            "ema.bn" => {
                d.ema_bn = match v {
                    "train" => BnMode::Train,
                    "eval" => BnMode::Eval,
                    _ => return Err(Error::config(format!("bad value `{v}` for key `{key}`"))),
                }
            }
            "ckpt_every" => d.ckpt_every = parse(key, v)?,
            "probe.lag" => d.probe_lag = parse(key, v)?,
            "sample_every" => d.sample_every = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (data, t, d) = (&self.data, &self.teacher, &self.distill);
        let (s, g) = (&d.student_loss, &d.generator_loss);
        vec![
            ("preset", self.preset.clone()),
            ("seed", d.seed.to_string()),
            (
                "data.kind",
                match data.kind {
                    DatasetKind::Blobs => "blobs",
                    DatasetKind::Rings => "rings",
                }
                .into(),
            ),
            ("data.classes", data.classes.to_string()),
            ("data.per_class", data.per_class.to_string()),
            ("data.d_in", data.d_in.to_string()),
            ("data.spread", real(data.spread)),
            ("data.test_fraction", real(data.test_fraction)),
            ("data.seed", data.seed.to_string()),
            ("teacher.hidden", list(&t.hidden)),
            ("teacher.lr", real(t.lr)),
            ("teacher.wd", real(t.wd)),
            ("teacher.mo", real(t.mo)),
            ("teacher.bs", t.bs.to_string()),
            ("teacher.ld", real(t.ld)),
            ("teacher.ldep", list(&t.ldep)),
            ("teacher.ep", t.ep.to_string()),
            ("teacher.wep", t.wep.to_string()),
            ("method", d.method.to_string()),
            ("alpha", real(d.alpha)),
            ("lambda0", real(s.gen)),
            ("lambda1", real(s.second)),
            ("lambda2", real(g.adversarial)),
            ("lambda3", real(g.nll)),
            ("lambda4", real(g.norm_reg)),
            ("lambda5", real(g.bnmm)),
            ("zeta0", real(s.clamp)),
            ("zeta1", real(g.teacher_clamp)),
            ("zeta2", real(g.logit_clamp)),
            ("delta", real(s.logit_bound)),
            ("nu", real(g.gen_logit_bound)),
            ("gamma", real(g.norm_scale)),
            ("n_s", d.n_s.to_string()),
            ("n_g", d.n_g.to_string()),
            ("bs", d.bs.to_string()),
            ("ep", d.ep.to_string()),
            ("spe", d.spe.to_string()),
            ("ld", real(d.ld)),
            ("ldep", list(&d.ldep)),
            ("d_z", d.d_z.to_string()),
            ("d_e", d.d_e.to_string()),
            ("conditioning", d.conditioning.to_string()),
            ("pgs", d.pgs.to_string()),
            ("opt_s", optim_name(d.student_opt.kind).into()),
            ("lr_s", real(d.student_opt.lr)),
            ("wd_s", real(d.student_opt.wd)),
            ("mo_s", real(d.student_opt.mo)),
            ("student.hidden", list(&d.student_hidden)),
            ("opt_g", optim_name(d.generator_opt.kind).into()),
            ("lr_g", real(d.generator_opt.lr)),
            ("wd_g", real(d.generator_opt.wd)),
            ("mo_g", real(d.generator_opt.mo)),
            ("generator.hidden", list(&d.generator_hidden)),
            ("mem.capacity", d.mem_capacity.to_string()),
            ("mem.fraction", real(d.mem_fraction)),
            (
                "ema.bn",
                match d.ema_bn {
                    BnMode::Train => "train",
                    BnMode::Eval => "eval",
                }
                .into(),
            ),
            ("ckpt_every", d.ckpt_every.to_string()),
            ("probe.lag", d.probe_lag.to_string()),
            ("sample_every", d.sample_every.to_string()),
        ]
    }

    /// Parses a configuration document on top of the selected preset.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut assignments: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if let Some(&(first, ..)) = assignments.iter().find(|(_, key, _)| *key == k) {
                return Err(Error::config(format!(
                    "duplicate key `{k}` (lines {} and {})",
                    first + 1,
                    i + 1
                )));
            }
            assignments.push((i, k, v.trim()));
        }
        let preset = assignments
            .iter()
            .find(|(_, k, _)| *k == "preset")
            .map_or("desk", |&(_, _, v)| v);
        let mut cfg = Config::preset(preset)?;
        for (i, k, v) in assignments {
            cfg.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Config::parse_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    /// All keys, one `key = value` line each, preceded by `notes` as comments.
    pub fn to_resolved(&self, notes: &[String]) -> String {
        let mut out = String::new();
        for n in notes {
            out.push_str("# ");
            out.push_str(n);
            out.push('\n');
        }
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let data = &self.data;
        if data.classes < 2 || data.per_class < 2 || data.d_in == 0 {
            return Err(Error::config("data needs classes >= 2, per_class >= 2, d_in >= 1"));
        }
        if data.kind == DatasetKind::Rings && data.d_in != 2 {
            return Err(Error::config("rings are two-dimensional (data.d_in = 2)"));
        }
        if self.teacher.hidden.is_empty() || self.teacher.bs < 2 || self.teacher.ep == 0 {
            return Err(Error::config("teacher needs hidden layers, bs >= 2 and ep >= 1"));
        }
        self.teacher.schedule().validate()?;
        self.distill.validate()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for p in ["desk", "cifar", "imagenet"] {
            Config::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = Config::preset("imagenet").unwrap();
        c.set("alpha", "0.999").unwrap();
        c.set("ldep", "3,7").unwrap();
        c.set("ema.bn", "eval").unwrap();
        let text = c.to_resolved(&["note".into()]);
        assert!(text.starts_with("# note\npreset = imagenet\n"));
        assert_eq!(Config::parse_str(&text).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let c = Config::preset("desk").unwrap();
        let mut d = c.clone();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let e = Config::parse_str("alpha = 0.5\nalpha = 0.6\n").unwrap_err();
        assert!(e.to_string().contains("duplicate key `alpha`"), "{e}");
        let e = Config::parse_str("beta = 1\n").unwrap_err();
        assert!(e.to_string().contains("unknown key `beta`"), "{e}");
        let e = Config::parse_str("n_s = many\n").unwrap_err();
        assert!(e.to_string().contains("n_s"), "{e}");
        assert!(matches!(Config::parse_str("method = foo"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_preset_order() {
        let c = Config::parse_str("# hi\nn_g = 7 # trailing\n\npreset = cifar\n").unwrap();
        assert_eq!(c.distill.n_g, 7);
        assert_eq!(c.distill.d_z, 256);
    }

    #[test]
    fn validation_rules() {
        let check = |k: &str, v: &str| {
            let mut c = Config::default();
            c.set(k, v).unwrap();
            c.validate()
        };
        assert!(check("alpha", "1.5").is_err());
        assert!(check("lambda3", "0.1").is_err());
        assert!(check("conditioning", "sum").is_ok());
        assert!(check("gamma", "0.5").is_err());
        assert!(check("n_s", "0").is_err());
        assert!(check("delta", "0").is_err());
        let mut c = Config::default();
        c.set("method", "mem").unwrap();
        c.set("mem.capacity", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("lambda0", "0").unwrap();
        c.set("lambda1", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("conditioning", "sum").unwrap();
        c.set("d_e", "8").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn large_scale_presets() {
        let c = Config::preset("cifar").unwrap().distill;
        assert_eq!((c.bs, c.ep, c.spe, c.n_s, c.n_g, c.d_z), (256, 300, 50, 30, 3, 256));
        assert_eq!(c.ldep, vec![100, 200]);
        assert_eq!(c.alpha, 0.95);
        assert_eq!((c.student_opt.lr, c.student_opt.wd, c.student_opt.mo), (1e-2, 5e-4, 0.9));
        assert_eq!((c.generator_opt.lr, c.generator_opt.wd), (1e-3, 5e-4));
        let i = Config::preset("imagenet").unwrap().distill;
        assert_eq!((i.pgs, i.n_g, i.generator_opt.lr), (200, 20, 1e-4));
        assert_eq!(i.generator_loss.norm_scale, 1.1);
        assert_eq!((i.student_loss.logit_bound, i.generator_loss.gen_logit_bound), (20.0, 20.0));
    }
}
