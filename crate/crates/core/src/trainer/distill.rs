use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::memory::MemoryBank;
use super::rundir;
use crate::config::{Config, DistillConfig, Method};
use crate::data::{samples_csv, Dataset, Split};
use crate::diag::{evaluate, track_stream_losses, Evaluation, MetricsRecord, StreamLosses, METRICS_HEADER};
use crate::diffcore::{BnMode, Graph, RngState, Stream, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    generator_loss, kd_value, nll_loss, student_loss, GeneratorLossInputs, GeneratorLossWeights,
    LossBreakdown, SecondStream, StreamLogits,
};
use crate::models::{
    build_classifier, build_generator, ema_init, ClassifierNet, EmaState, EmbeddingTable,
    GeneratorNet, Parameterized,
};
use crate::optim::OptimState;

/// Running means of loss components over the steps of one stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentMeans {
    names: Vec<&'static str>,
    sums: Vec<f64>,
    total: f64,
    steps: usize,
}

impl ComponentMeans {
    fn add(&mut self, b: &LossBreakdown) {
        for t in &b.terms {
            match self.names.iter().position(|&n| n == t.name) {
                Some(i) => self.sums[i] += t.value,
                None => {
                    self.names.push(t.name);
                    self.sums.push(t.value);
                }
            }
        }
        self.total += b.total;
        self.steps += 1;
    }

    /// Mean of a component over the steps, `None` if it never appeared.
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|&n| n == name)?;
        Some(self.sums[i] / self.steps as f64)
    }

    pub fn total(&self) -> f64 {
        self.total / self.steps.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStageReport {
    pub means: ComponentMeans,
    /// Sampled class counts (conditional generators only).
    pub label_counts: Vec<usize>,
    /// KD on the generator's own batch at the first and last step.
    pub kd_first: f64,
    pub kd_last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentStageReport {
    pub means: ComponentMeans,
    /// KD on the stage's first generator batch before any student step and
    /// after the last one.
    pub kd_frozen_pre: f64,
    pub kd_frozen_post: f64,
    /// Steps that included the second (EMA or memory) stream.
    pub second_stream_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub t: usize,
    pub epoch: usize,
    pub generator: GeneratorStageReport,
    pub student: StudentStageReport,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    /// Teacher NLL on a fixed noise/label batch before and after pretraining.
    pub nll_before: f64,
    pub nll_after: f64,
}

/// Models, optimizers and random streams of one distillation run.
pub struct Distiller<'a> {
    cfg: DistillConfig,
    teacher: &'a ClassifierNet,
    student: ClassifierNet,
    generator: GeneratorNet,
    embeddings: Option<EmbeddingTable>,
    ema: Option<EmaState>,
    bank: Option<MemoryBank>,
    opt_s: OptimState,
    opt_g: OptimState,
    noise: RngState,
    labels: RngState,
    memory: RngState,
    metrics: RngState,
    metric_labels: RngState,
}

/// Draws `n` synthetic inputs without building gradients.
fn synthesize(
    generator: &GeneratorNet,
    table: Option<&EmbeddingTable>,
    classes: usize,
    n: usize,
    mode: BnMode,
    noise: &mut RngState,
    labels: &mut RngState,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let z = noise.normal_tensor(&[n, generator.d_z]);
    let y = table.map(|_| labels.labels(n, classes));
    let (_, x) = generator.generate(table, &z, y.as_deref(), mode)?;
    Ok((x, y))
}

impl<'a> Distiller<'a> {
    /// Initializes the student, generator (and embeddings), EMA copy or
    /// memory bank, and optimizers from the config's seed.
    pub fn new(teacher: &'a ClassifierNet, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let classes = teacher.classes();
        let mut init = RngState::new(seed, Stream::Init);
        let student = build_classifier(teacher.d_in(), &cfg.student_hidden, classes, &mut init)?;
        let (generator, embeddings) = build_generator(
            cfg.d_z,
            cfg.d_e,
            &cfg.generator_hidden,
            teacher.d_in(),
            cfg.conditioning,
            classes,
            &mut init,
        )?;
        let ema = match cfg.method {
            Method::Mad => Some(ema_init(&generator, embeddings.as_ref(), cfg.alpha)?),
            _ => None,
        };
        let bank = match cfg.method {
            Method::Mem => Some(MemoryBank::new(cfg.mem_capacity, teacher.d_in())?),
            _ => None,
        };
        Ok(Distiller {
            cfg: cfg.clone(),
            teacher,
            student,
            generator,
            embeddings,
            ema,
            bank,
            opt_s: cfg.student_opt.build(),
            opt_g: cfg.generator_opt.build(),
            noise: RngState::new(seed, Stream::Noise),
            labels: RngState::new(seed, Stream::Labels),
            memory: RngState::new(seed, Stream::Memory),
            metrics: RngState::new(seed, Stream::Metrics),
            metric_labels: RngState::new(seed, Stream::Metrics).fork(1),
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn student(&self) -> &ClassifierNet {
        &self.student
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.generator
    }

    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    pub fn ema(&self) -> Option<&EmaState> {
        self.ema.as_ref()
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    /// Sets both learning rates for a 0-based epoch; returns `(student, generator)`.
    pub fn set_epoch(&mut self, epoch: usize) -> (f64, f64) {
        self.opt_s.lr = self.cfg.schedule(self.cfg.student_opt.lr).lr_at(epoch);
        self.opt_g.lr = self.cfg.schedule(self.cfg.generator_opt.lr).lr_at(epoch);
        (self.opt_s.lr, self.opt_g.lr)
    }

    /// Which source feeds the student's second stream, if any contributes.
    fn second_stream(&self) -> Option<SecondStream> {
        if self.cfg.student_loss.second <= 0.0 {
            return None;
        }
        match self.cfg.method {
            Method::Mad => Some(SecondStream::Ema),
            Method::Mem => Some(SecondStream::Memory),
            Method::Abm => None,
        }
    }

    /// One optimizer step on the generator (and embeddings).
    fn generator_step(
        &mut self,
        weights: &GeneratorLossWeights,
        opt: Option<&mut OptimState>,
    ) -> Result<(LossBreakdown, Option<Vec<usize>>)> {
        let bs = self.cfg.bs;
        let classes = self.teacher.classes();
        let z = self.noise.normal_tensor(&[bs, self.generator.d_z]);
        let y = self.embeddings.as_ref().map(|_| self.labels.labels(bs, classes));

        let mut g = Graph::new();
        let gp = self.generator.bind(&mut g, true);
        let table = self.embeddings.as_ref().map(|t| g.param(t.weight.clone()));
        let e = match (table, &y) {
            (Some(tv), Some(y)) => Some(g.gather_rows(tv, y)?),
            _ => None,
        };
        let zv = g.constant(z);
        let out = self.generator.forward(&mut g, &gp, zv, e, BnMode::Train)?;
        let tp = self.teacher.bind(&mut g, false);
        let t_out = self.teacher.forward(&mut g, &tp, out.x, BnMode::Eval, weights.bnmm > 0.0)?;
        let sp = self.student.bind(&mut g, false);
        let s_out = self.student.forward(&mut g, &sp, out.x, BnMode::Eval, false)?;
        let running: Vec<(&Tensor, &Tensor)> = self
            .teacher
            .blocks
            .iter()
            .map(|b| (&b.bn.running_mean, &b.bn.running_var))
            .collect();
        let inputs = GeneratorLossInputs {
            teacher_logits: t_out.logits,
            student_logits: s_out.logits,
            gen_logits: out.u,
            labels: y.as_deref(),
            embeddings: e,
            teacher_moments: &t_out.moments,
            teacher_running: running,
        };
        let (loss, breakdown) = generator_loss(&mut g, &inputs, weights)?;
        g.check_finite()?;
        let grads = g.backward(loss)?;
        let mut grad_list: Vec<Tensor> = gp.iter().map(|&v| grads.get(v)).collect();
        if let Some(tv) = table {
            grad_list.push(grads.get(tv));
        }
        let mut params = self.generator.parameters_mut();
        if let Some(t) = self.embeddings.as_mut() {
            params.push(&mut t.weight);
        }
        opt.unwrap_or(&mut self.opt_g).step(params, &grad_list)?;
        self.generator.update_running(&g, &out);
        Ok((breakdown, y))
    }

    /// Teacher NLL of generator samples on a fixed batch.
    fn probe_nll(&self) -> Result<f64> {
        let table = self
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::config("NLL probe needs a conditional generator"))?;
        let base = RngState::new(self.cfg.seed, Stream::Metrics).fork(u64::MAX);
        let (mut z_rng, mut y_rng) = (base.clone(), base.fork(1));
        let n = 4 * self.cfg.bs;
        let classes = self.teacher.classes();
        let (x, y) = synthesize(
            &self.generator,
            Some(table),
            classes,
            n,
            BnMode::Train,
            &mut z_rng,
            &mut y_rng,
        )?;
        let mut g = Graph::new();
        let t = g.constant(self.teacher.logits(&x, BnMode::Eval)?);
        let l = nll_loss(&mut g, t, &y.expect("conditional batch has labels"))?;
        Ok(g.scalar(l))
    }

    /// `pgs` generator steps with the adversarial term switched off.
    pub fn pretrain_generator(&mut self) -> Result<PretrainReport> {
        if !self.cfg.conditioning.is_conditional() {
            return Err(Error::config("generator pretraining needs a conditional generator"));
        }
        if self.cfg.pgs == 0 {
            return Err(Error::config("generator pretraining needs pgs > 0"));
        }
        let weights = GeneratorLossWeights {
            adversarial: 0.0,
            ..self.cfg.generator_loss.clone()
        };
        let nll_before = self.probe_nll()?;
        let mut opt = self.cfg.generator_opt.build();
        for step in 0..self.cfg.pgs {
            self.generator_step(&weights, Some(&mut opt)).map_err(|e| Error::Aborted {
                context: format!("generator pretraining step {}", step + 1),
                source: Box::new(e),
            })?;
        }
        let nll_after = self.probe_nll()?;
        if let Some(ema) = self.ema.as_mut() {
            *ema = ema_init(&self.generator, self.embeddings.as_ref(), self.cfg.alpha)?;
        }
        Ok(PretrainReport {
            steps: self.cfg.pgs,
            nll_before,
            nll_after,
        })
    }

    /// `n_G` adversarial generator steps against the frozen student.
    pub fn generator_stage(&mut self) -> Result<GeneratorStageReport> {
        let weights = self.cfg.generator_loss.clone();
        let mut means = ComponentMeans::default();
        let mut label_counts = vec![0; self.teacher.classes()];
        let (mut kd_first, mut kd_last) = (0.0, 0.0);
        for step in 0..self.cfg.n_g {
            let (b, y) = self.generator_step(&weights, None).map_err(|e| Error::Aborted {
                context: format!("generator step {}", step + 1),
                source: Box::new(e),
            })?;
            let kd = b.get("kd_gen").unwrap_or(0.0);
            if step == 0 {
                kd_first = kd;
            }
            kd_last = kd;
            for c in y.into_iter().flatten() {
                label_counts[c] += 1;
            }
            means.add(&b);
        }
        if self.embeddings.is_none() {
            label_counts.clear();
        }
        Ok(GeneratorStageReport {
            means,
            label_counts,
            kd_first,
            kd_last,
        })
    }

    /// Folds the current generator into the EMA copy (MAD only).
    pub fn update_ema(&mut self) -> Result<()> {
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&self.generator, self.embeddings.as_ref())?;
        }
        Ok(())
    }

    fn student_kd_train_mode(&self, x: &Tensor, t_logits: &Tensor) -> Result<f64> {
        let s = self.student.logits(x, BnMode::Train)?;
        kd_value(t_logits, &s)
    }

    /// `n_S` student steps on fresh generator samples plus the method's
    /// second stream.
    pub fn student_stage(&mut self) -> Result<StudentStageReport> {
        let mut means = ComponentMeans::default();
        let mut frozen: Option<(Tensor, Tensor, f64)> = None;
        let mut second_steps = 0;
        for step in 0..self.cfg.n_s {
            let (b, used_second, x, t) = self.student_step().map_err(|e| Error::Aborted {
                context: format!("student step {}", step + 1),
                source: Box::new(e),
            })?;
            if frozen.is_none() {
                frozen = Some((x, t, b.get("kd_gen").unwrap_or(f64::NAN)));
            }
            second_steps += used_second as usize;
            means.add(&b);
        }
        let (x0, t0, pre) = frozen.expect("n_s >= 1");
        let post = self.student_kd_train_mode(&x0, &t0)?;
        Ok(StudentStageReport {
            means,
            kd_frozen_pre: pre,
            kd_frozen_post: post,
            second_stream_steps: second_steps,
        })
    }

    /// One student update. Returns the loss breakdown, whether the second
    /// stream took part, and the fresh generator batch with its teacher logits.
    fn student_step(&mut self) -> Result<(LossBreakdown, bool, Tensor, Tensor)> {
        let bs = self.cfg.bs;
        let classes = self.teacher.classes();
        let (x_gen, _) = synthesize(
            &self.generator,
            self.embeddings.as_ref(),
            classes,
            bs,
            BnMode::Train,
            &mut self.noise,
            &mut self.labels,
        )?;
        let t_gen = self.teacher.logits(&x_gen, BnMode::Eval)?;
        let kind = self.second_stream();
        let x_second = match kind {
            Some(SecondStream::Ema) => {
                let ema = self.ema.as_ref().expect("mad keeps an EMA generator");
                let (x, _) = synthesize(
                    &ema.generator,
                    ema.embeddings.as_ref(),
                    classes,
                    bs,
                    self.cfg.ema_bn,
                    &mut self.noise,
                    &mut self.labels,
                )?;
                Some(x)
            }
            Some(SecondStream::Memory) => {
                let bank = self.bank.as_ref().expect("mem keeps a memory bank");
                let want = ((self.cfg.mem_fraction * bs as f64).round() as usize).max(2);
                let n = want.min(bank.len());
                if n >= 2 {
                    Some(bank.sample(n, &mut self.memory)?)
                } else {
                    None
                }
            }
            None => None,
        };

        let mut g = Graph::new();
        let sp = self.student.bind(&mut g, true);
        let xv = g.constant(x_gen.clone());
        let out_gen = self.student.forward(&mut g, &sp, xv, BnMode::Train, false)?;
        let tv = g.constant(t_gen.clone());
        let gen = StreamLogits {
            teacher: tv,
            student: out_gen.logits,
        };
        let mut out_second = None;
        let second = match (kind, &x_second) {
            (Some(k), Some(x)) => {
                let t = self.teacher.logits(x, BnMode::Eval)?;
                let xv = g.constant(x.clone());
                let out = self.student.forward(&mut g, &sp, xv, BnMode::Train, false)?;
                let tv = g.constant(t);
                let logits = out.logits;
                out_second = Some(out);
                Some((
                    k,
                    StreamLogits {
                        teacher: tv,
                        student: logits,
                    },
                ))
            }
            _ => None,
        };
        let used_second = second.is_some();
        let (loss, breakdown) = student_loss(&mut g, gen, second, &self.cfg.student_loss)?;
        g.check_finite()?;
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = sp.iter().map(|&v| grads.get(v)).collect();
        self.opt_s.step(self.student.parameters_mut(), &grads)?;
        self.student.update_running(&g, &out_gen);
        if let Some(out) = &out_second {
            self.student.update_running(&g, out);
        }
        if let Some(bank) = self.bank.as_mut() {
            bank.push(&x_gen)?;
        }
        Ok((breakdown, used_second, x_gen, t_gen))
    }

    /// KD of the current student on one fresh batch per active source.
    pub fn stream_losses(&mut self) -> Result<StreamLosses> {
        let bs = self.cfg.bs;
        let classes = self.teacher.classes();
        let (x_gen, _) = synthesize(
            &self.generator,
            self.embeddings.as_ref(),
            classes,
            bs,
            BnMode::Train,
            &mut self.metrics,
            &mut self.metric_labels,
        )?;
        let kind = self.second_stream();
        let x_ema = match (kind, &self.ema) {
            (Some(SecondStream::Ema), Some(ema)) => Some(
                synthesize(
                    &ema.generator,
                    ema.embeddings.as_ref(),
                    classes,
                    bs,
                    self.cfg.ema_bn,
                    &mut self.metrics,
                    &mut self.metric_labels,
                )?
                .0,
            ),
            _ => None,
        };
        let x_mem = match (kind, &self.bank) {
            (Some(SecondStream::Memory), Some(bank)) if bank.len() >= 2 => {
                Some(bank.sample(bs.min(bank.len()), &mut self.metrics)?)
            }
            _ => None,
        };
        track_stream_losses(
            &self.student,
            self.teacher,
            Some(&x_gen),
            x_ema.as_ref(),
            x_mem.as_ref(),
        )
    }

    /// Writes the current networks under `ckpt/` with stage suffix `t`.
    fn save_checkpoints(&self, run: &Path, t: usize, student_only: bool) -> Result<()> {
        self.student.save(&rundir::ckpt_path(run, "student", t))?;
        if student_only {
            return Ok(());
        }
        self.generator.save(&rundir::ckpt_path(run, "generator", t))?;
        if let Some(e) = &self.embeddings {
            e.save(&rundir::ckpt_path(run, "embeddings", t))?;
        }
        if let Some(ema) = &self.ema {
            ema.generator.save(&rundir::ckpt_path(run, "ema", t))?;
            if let Some(e) = &ema.embeddings {
                e.save(&rundir::ckpt_path(run, "ema_embeddings", t))?;
            }
        }
        Ok(())
    }

    fn dump_samples(&self, dir: &Path, epoch: usize) -> Result<()> {
        let classes = self.teacher.classes();
        let base = RngState::new(self.cfg.seed, Stream::Export).fork(epoch as u64);
        let (mut z, mut y) = (base.clone(), base.fork(1));
        let (x, labels) = synthesize(
            &self.generator,
            self.embeddings.as_ref(),
            classes,
            self.cfg.bs,
            BnMode::Train,
            &mut z,
            &mut y,
        )?;
        fs::write(
            dir.join(format!("epoch{epoch}_generator.csv")),
            samples_csv(&x, labels.as_deref()),
        )?;
        if let Some(ema) = &self.ema {
            let (mut z, mut y) = (base.clone(), base.fork(1));
            let (x, labels) = synthesize(
                &ema.generator,
                ema.embeddings.as_ref(),
                classes,
                self.cfg.bs,
                self.cfg.ema_bn,
                &mut z,
                &mut y,
            )?;
            fs::write(
                dir.join(format!("epoch{epoch}_ema.csv")),
                samples_csv(&x, labels.as_deref()),
            )?;
        }
        Ok(())
    }
}

/// Outcome of a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub teacher: Evaluation,
    pub final_eval: Evaluation,
    pub best_acc: f64,
    pub stages: usize,
    pub ema_updates: u64,
    pub metrics: Vec<MetricsRecord>,
    pub stage_reports: Vec<StageReport>,
    pub pretrain: Option<PretrainReport>,
    pub wall_seconds: f64,
    /// Final student, for callers that keep working in memory.
    pub student: ClassifierNet,
}

const STAGES_HEADER: &str = "t,epoch,student_total,student_kd_gen,student_kd_second,\
generator_total,generator_kd,generator_nll,generator_norm_reg,generator_bnmm,\
kd_frozen_pre,kd_frozen_post";

fn opt_real(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn stage_row(r: &StageReport) -> String {
    let s = &r.student.means;
    let g = &r.generator.means;
    let second = s.get("kd_ema").or_else(|| s.get("kd_mem"));
    format!(
        "{},{},{:?},{},{},{:?},{},{},{},{},{:?},{:?}",
        r.t,
        r.epoch,
        s.total(),
        opt_real(s.get("kd_gen")),
        opt_real(second),
        g.total(),
        opt_real(g.get("kd_gen")),
        opt_real(g.get("nll")),
        opt_real(g.get("norm_reg")),
        opt_real(g.get("bnmm")),
        r.student.kd_frozen_pre,
        r.student.kd_frozen_post
    )
}

struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    stages: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &Config, notes: &[String], teacher: &ClassifierNet) -> Result<Self> {
        fs::create_dir_all(rundir::ckpt_dir(dir))?;
        fs::create_dir_all(rundir::samples_dir(dir))?;
        fs::write(dir.join(rundir::CONFIG_FILE), cfg.to_resolved(notes))?;
        teacher.save(&rundir::teacher_path(dir))?;
        let mut metrics = BufWriter::new(File::create(dir.join(rundir::METRICS_FILE))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut stages = BufWriter::new(File::create(dir.join(rundir::STAGES_FILE))?);
        writeln!(stages, "{STAGES_HEADER}")?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            metrics,
            stages,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.stages.flush()?;
        Ok(())
    }
}

fn write_summary(
    dir: &Path,
    cfg: &DistillConfig,
    status: &str,
    teacher: &Evaluation,
    metrics: &[MetricsRecord],
    stages_done: usize,
    ema_updates: u64,
    pretrain: Option<&PretrainReport>,
    wall_seconds: f64,
) -> Result<()> {
    let last = metrics.last();
    let best = metrics.iter().map(|m| m.test_acc).fold(f64::NAN, f64::max);
    let summary = json!({
        "status": status,
        "method": cfg.method.to_string(),
        "seed": cfg.seed,
        "stages_completed": stages_done,
        "stages_planned": cfg.stages(),
        "ema_updates": ema_updates,
        "teacher_test_acc": teacher.accuracy,
        "teacher_test_xent": teacher.cross_entropy,
        "final_test_acc": last.map(|m| m.test_acc),
        "final_test_xent": last.map(|m| m.test_xent),
        "best_test_acc": if best.is_nan() { None } else { Some(best) },
        "generator_pretraining": pretrain.map(|p| json!({
            "steps": p.steps,
            "nll_before": p.nll_before,
            "nll_after": p.nll_after,
        })),
        "wall_seconds": wall_seconds,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join(rundir::SUMMARY_FILE), text + "\n")?;
    Ok(())
}

/// Loads the teacher checkpoint and distills into `out`.
pub fn run_distillation(
    teacher_ckpt: &Path,
    test: &Dataset,
    cfg: &Config,
    out: &Path,
    notes: &[String],
) -> Result<RunSummary> {
    let teacher = ClassifierNet::load(teacher_ckpt)?;
    run_distillation_with(&teacher, test, cfg, Some(out), notes)
}

/// Full distillation run: optional generator pretraining, then `ep × spe`
/// stages of generator stage → EMA update (MAD) → student stage, with a test
/// evaluation after every epoch.
///
/// Only the held-out split is accepted; it is used for evaluation alone.
/// With `out = None` nothing is written to disk.
pub fn run_distillation_with(
    teacher: &ClassifierNet,
    test: &Dataset,
    cfg: &Config,
    out: Option<&Path>,
    notes: &[String],
) -> Result<RunSummary> {
    if test.split != Split::Test {
        return Err(Error::InvalidArgument(
            "distillation only accepts the held-out test split".into(),
        ));
    }
    if test.d_in() != teacher.d_in() || test.classes != teacher.classes() {
        return Err(Error::shape(
            "run_distillation",
            format!(
                "teacher expects {} features and {} classes, test set has {} and {}",
                teacher.d_in(),
                teacher.classes(),
                test.d_in(),
                test.classes
            ),
        ));
    }
    let d = &cfg.distill;
    let started = Instant::now();
    let teacher_eval = evaluate(teacher, test)?;
    let mut files = out
        .map(|dir| RunFiles::create(dir, cfg, notes, teacher))
        .transpose()?;
    let mut dist = Distiller::new(teacher, d)?;

    let pretrain = if d.pgs > 0 {
        let p = dist.pretrain_generator()?;
        log::info!(
            "generator pretraining: {} steps, nll {:.4} -> {:.4}",
            p.steps,
            p.nll_before,
            p.nll_after
        );
        Some(p)
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(d.ep);
    let mut reports = Vec::with_capacity(d.stages());
    let mut t = 0;
    let result: Result<()> = (|| {
        for epoch in 0..d.ep {
            let (lr_s, lr_g) = dist.set_epoch(epoch);
            for _ in 0..d.spe {
                t += 1;
                let stage_start = Instant::now();
                let generator = dist.generator_stage()?;
                dist.update_ema()?;
                let student = dist.student_stage()?;
                let report = StageReport {
                    t,
                    epoch: epoch + 1,
                    generator,
                    student,
                    wall_seconds: stage_start.elapsed().as_secs_f64(),
                };
                if let Some(f) = files.as_mut() {
                    writeln!(f.stages, "{}", stage_row(&report))?;
                    if t % d.ckpt_every == 0 {
                        dist.save_checkpoints(&f.dir, t, false)?;
                    } else if d.probe_lag > 0 && (t + d.probe_lag) % d.ckpt_every == 0 {
                        dist.save_checkpoints(&f.dir, t, true)?;
                    }
                }
                reports.push(report);
            }
            let eval = evaluate(dist.student(), test)?;
            let losses = dist.stream_losses()?;
            let rec = MetricsRecord {
                epoch: epoch + 1,
                stage: t,
                test_acc: eval.accuracy,
                test_xent: eval.cross_entropy,
                losses,
                lr_student: lr_s,
                lr_generator: lr_g,
            };
            log::info!(
                "epoch {} stage {}: test acc {:.4} xent {:.4} kd_gen {:?}",
                rec.epoch,
                rec.stage,
                rec.test_acc,
                rec.test_xent,
                rec.losses.gen
            );
            if let Some(f) = files.as_mut() {
                writeln!(f.metrics, "{}", rec.csv_row())?;
                f.flush()?;
                if d.sample_every > 0 && (epoch + 1) % d.sample_every == 0 {
                    dist.dump_samples(&rundir::samples_dir(&f.dir), epoch + 1)?;
                }
            }
            metrics.push(rec);
        }
        Ok(())
    })();

    let ema_updates = dist.ema().map_or(0, |e| e.updates());
    let wall_seconds = started.elapsed().as_secs_f64();
    if let Some(f) = files.as_mut() {
        f.flush()?;
        let status = if result.is_ok() { "completed" } else { "aborted" };
        write_summary(
            &f.dir,
            d,
            status,
            &teacher_eval,
            &metrics,
            if result.is_ok() { t } else { t - 1 },
            ema_updates,
            pretrain.as_ref(),
            wall_seconds,
        )?;
    }
    if let Err(e) = result {
        return Err(match e {
            Error::Aborted { context, source } => Error::Aborted {
                context: format!("stage {t}, {context}"),
                source,
            },
            other => Error::Aborted {
                context: format!("stage {t}"),
                source: Box::new(other),
            },
        });
    }
    let final_eval = evaluate(dist.student(), test)?;
    let best_acc = metrics.iter().map(|m| m.test_acc).fold(0.0, f64::max);
    Ok(RunSummary {
        method: d.method,
        seed: d.seed,
        teacher: teacher_eval,
        final_eval,
        best_acc,
        stages: t,
        ema_updates,
        metrics,
        stage_reports: reports,
        pretrain,
        wall_seconds,
        student: dist.student().clone(),
    })
}
