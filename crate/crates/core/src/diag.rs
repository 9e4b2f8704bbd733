//! Test-set evaluation, per-stream distillation losses, and the
//! Jensen-Shannon distribution-shift probe.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::data::Dataset;
use crate::diffcore::{softmax_rows, BnMode, RngState, Stream, Tensor};
use crate::error::{Error, Result};
use crate::losses::{js_divergence, kd_value};
use crate::models::{ClassifierNet, EmbeddingTable, GeneratorNet};
use crate::trainer::rundir;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cross_entropy: f64,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean cross-entropy of logits against 0-based labels.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0usize;
    let mut xent = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if y >= row.len() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        correct += (argmax(row) == y) as usize;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        xent += lse - row[y];
    }
    let n = labels.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        cross_entropy: xent / n,
    })
}

/// Eval-mode accuracy and cross-entropy of `net` on a dataset.
pub fn evaluate(net: &ClassifierNet, data: &Dataset) -> Result<Evaluation> {
    let logits = net.logits(&data.inputs, BnMode::Eval)?;
    score_logits(&logits, &data.labels)
}

/// KD loss of the student against the teacher on one frozen batch per
/// available source. Absent sources stay `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamLosses {
    pub gen: Option<f64>,
    pub ema: Option<f64>,
    pub mem: Option<f64>,
}

pub fn track_stream_losses(
    student: &ClassifierNet,
    teacher: &ClassifierNet,
    gen: Option<&Tensor>,
    ema: Option<&Tensor>,
    mem: Option<&Tensor>,
) -> Result<StreamLosses> {
    let kd = |x: Option<&Tensor>| -> Result<Option<f64>> {
        x.map(|x| {
            let t = teacher.logits(x, BnMode::Eval)?;
            let s = student.logits(x, BnMode::Eval)?;
            kd_value(&t, &s)
        })
        .transpose()
    };
    Ok(StreamLosses {
        gen: kd(gen)?,
        ema: kd(ema)?,
        mem: kd(mem)?,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: usize,
    pub test_acc: f64,
    pub test_xent: f64,
    pub losses: StreamLosses,
    pub lr_student: f64,
    pub lr_generator: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,stage,test_acc,test_xent,kd_gen,kd_ema,kd_mem,lr_student,lr_generator";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{},{},{},{:?},{:?}",
            self.epoch,
            self.stage,
            self.test_acc,
            self.test_xent,
            opt(self.losses.gen),
            opt(self.losses.ema),
            opt(self.losses.mem),
            self.lr_student,
            self.lr_generator
        )
    }
}

/// Stages to probe, the student lag `τ`, and the probe sample budget.
#[derive(Debug, Clone, PartialEq)]
pub struct JsProbeConfig {
    pub stages: Vec<usize>,
    pub tau: usize,
    pub batches: usize,
    pub batch_size: usize,
}

impl JsProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let min = self.stages.iter().min().ok_or_else(|| Error::config("no probe stages given"))?;
        if self.tau >= *min {
            return Err(Error::config(format!(
                "probe lag {} must be smaller than the earliest probed stage {min}",
                self.tau
            )));
        }
        if self.batches == 0 || self.batch_size < 2 {
            return Err(Error::config("probe needs >= 1 batch of >= 2 samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsRow {
    pub t: usize,
    pub js_gen: f64,
    pub js_ema: Option<f64>,
    pub n_samples: usize,
}

/// Generator (and embeddings) used as a probe source, with its BatchNorm mode.
pub struct ProbeSource<'a> {
    pub generator: &'a GeneratorNet,
    pub embeddings: Option<&'a EmbeddingTable>,
    pub mode: BnMode,
}

/// Mean JS divergence between the lagged student's and the teacher's class
/// probabilities on samples from each source. Both sources see the same
/// noise and labels.
pub fn probe_stage(
    teacher: &ClassifierNet,
    lagged_student: &ClassifierNet,
    gen: &ProbeSource<'_>,
    ema: Option<&ProbeSource<'_>>,
    batches: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<(f64, Option<f64>)> {
    let classes = teacher.classes();
    let js_on = |src: &ProbeSource<'_>, z: &Tensor, y: Option<&[usize]>| -> Result<f64> {
        let (_, x) = src.generator.generate(src.embeddings, z, y, src.mode)?;
        let p = softmax_rows(&lagged_student.logits(&x, BnMode::Eval)?);
        let q = softmax_rows(&teacher.logits(&x, BnMode::Eval)?);
        js_divergence(&p, &q)
    };
    let (mut js_gen, mut js_ema) = (0.0, 0.0);
    for _ in 0..batches {
        let z = rng.normal_tensor(&[batch_size, gen.generator.d_z]);
        let y = gen.embeddings.map(|_| rng.labels(batch_size, classes));
        js_gen += js_on(gen, &z, y.as_deref())?;
        if let Some(e) = ema {
            js_ema += js_on(e, &z, y.as_deref())?;
        }
    }
    let b = batches as f64;
    Ok((js_gen / b, ema.map(|_| js_ema / b)))
}

pub const JS_HEADER: &str = "t,js_gen,js_ema,n_samples";

/// Runs the probe over a finished run directory and writes `js_probe.csv`.
pub fn js_probe(run_dir: &Path, probe: &JsProbeConfig) -> Result<Vec<JsRow>> {
    probe.validate()?;
    let cfg = Config::load(&run_dir.join(rundir::CONFIG_FILE))?;
    let d = &cfg.distill;
    let conditional = d.conditioning.is_conditional();
    let has_ema = d.method == crate::config::Method::Mad;

    let mut missing = Vec::new();
    let teacher_path = rundir::teacher_path(run_dir);
    if !teacher_path.exists() {
        missing.push(teacher_path.display().to_string());
    }
    for &t in &probe.stages {
        let mut need = vec![
            rundir::ckpt_path(run_dir, "student", t - probe.tau),
            rundir::ckpt_path(run_dir, "generator", t),
        ];
        if conditional {
            need.push(rundir::ckpt_path(run_dir, "embeddings", t));
        }
        if has_ema {
            need.push(rundir::ckpt_path(run_dir, "ema", t));
            if conditional {
                need.push(rundir::ckpt_path(run_dir, "ema_embeddings", t));
            }
        }
        let absent: Vec<String> = need
            .iter()
            .filter(|p| !p.exists())
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        if !absent.is_empty() {
            missing.push(format!("stage {t} ({})", absent.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(missing.join("; ")));
    }

    let teacher = ClassifierNet::load(&teacher_path)?;
    let base = RngState::new(d.seed, Stream::Probe);
    let mut rows = Vec::with_capacity(probe.stages.len());
    for &t in &probe.stages {
        let student = ClassifierNet::load(&rundir::ckpt_path(run_dir, "student", t - probe.tau))?;
        let generator = GeneratorNet::load(&rundir::ckpt_path(run_dir, "generator", t))?;
        let table = conditional
            .then(|| EmbeddingTable::load(&rundir::ckpt_path(run_dir, "embeddings", t)))
            .transpose()?;
        let ema = has_ema
            .then(|| GeneratorNet::load(&rundir::ckpt_path(run_dir, "ema", t)))
            .transpose()?;
        let ema_table = (has_ema && conditional)
            .then(|| EmbeddingTable::load(&rundir::ckpt_path(run_dir, "ema_embeddings", t)))
            .transpose()?;
        let gen_src = ProbeSource {
            generator: &generator,
            embeddings: table.as_ref(),
            mode: BnMode::Train,
        };
        let ema_src = ema.as_ref().map(|g| ProbeSource {
            generator: g,
            embeddings: ema_table.as_ref(),
            mode: d.ema_bn,
        });
        let mut rng = base.fork(t as u64);
        let (js_gen, js_ema) = probe_stage(
            &teacher,
            &student,
            &gen_src,
            ema_src.as_ref(),
            probe.batches,
            probe.batch_size,
            &mut rng,
        )?;
        rows.push(JsRow {
            t,
            js_gen,
            js_ema,
            n_samples: probe.batches * probe.batch_size,
        });
    }
    let mut csv = String::from(JS_HEADER);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(csv, "{},{:?},{},{}", r.t, r.js_gen, opt(r.js_ema), r.n_samples);
    }
    std::fs::write(run_dir.join("js_probe.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_classifier;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(&[16, 8]);
        let labels: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let e = score_logits(&logits, &labels).unwrap();
        assert!((e.cross_entropy - 8f64.ln()).abs() < 1e-12);
        // every row ties, argmax picks class 0
        assert_eq!(e.accuracy, 2.0 / 16.0);
    }

    #[test]
    fn evaluation_is_partition_independent() {
        let mut rng = RngState::new(3, Stream::Init);
        let net = build_classifier(2, &[8], 3, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[30, 2], 0.0, 1.0);
        let full = net.logits(&x, BnMode::Eval).unwrap();
        let a = net.logits(&x.select_rows(&(0..13).collect::<Vec<_>>()), BnMode::Eval).unwrap();
        let b = net.logits(&x.select_rows(&(13..30).collect::<Vec<_>>()), BnMode::Eval).unwrap();
        assert_eq!(Tensor::vstack(&[&a, &b]).unwrap(), full);
    }

    #[test]
    fn metrics_row_leaves_absent_streams_empty() {
        let r = MetricsRecord {
            epoch: 1,
            stage: 20,
            test_acc: 0.5,
            test_xent: 1.25,
            losses: StreamLosses {
                gen: Some(0.1),
                ema: None,
                mem: None,
            },
            lr_student: 0.01,
            lr_generator: 0.001,
        };
        assert_eq!(r.csv_row(), "1,20,0.5,1.25,0.1,,,0.01,0.001");
        assert_eq!(METRICS_HEADER.split(',').count(), r.csv_row().split(',').count());
    }

    #[test]
    fn probe_config_validation() {
        let p = JsProbeConfig {
            stages: vec![10, 20],
            tau: 10,
            batches: 4,
            batch_size: 8,
        };
        assert!(p.validate().is_err());
        assert!(JsProbeConfig { tau: 9, ..p.clone() }.validate().is_ok());
        assert!(JsProbeConfig { stages: vec![], ..p }.validate().is_err());
    }
}
