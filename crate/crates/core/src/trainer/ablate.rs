use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::distill::run_distillation_with;
use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ClassifierNet, Conditioning};

/// Hyperparameter swept by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// EMA momentum.
    Alpha,
    /// Student stream weights, values written `l0:l1`.
    Lambda01,
    /// Student steps per stage.
    Ns,
    Conditioning,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "lambda01" => Ok(Axis::Lambda01),
            "ns" => Ok(Axis::Ns),
            "conditioning" => Ok(Axis::Conditioning),
            other => Err(Error::config(format!(
                "unknown axis `{other}` (expected alpha, lambda01, ns or conditioning)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Alpha(f64),
    Lambda01(f64, f64),
    Ns(usize),
    Conditioning(Conditioning),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Alpha(a) => write!(f, "{a}"),
            AxisValue::Lambda01(a, b) => write!(f, "{a}:{b}"),
            AxisValue::Ns(n) => write!(f, "{n}"),
            AxisValue::Conditioning(c) => write!(f, "{c}"),
        }
    }
}

impl Axis {
    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let s = s.trim();
        let bad = || Error::config(format!("bad ablation value `{s}`"));
        Ok(match self {
            Axis::Alpha => AxisValue::Alpha(s.parse().map_err(|_| bad())?),
            Axis::Lambda01 => {
                let (a, b) = s.split_once(':').ok_or_else(bad)?;
                AxisValue::Lambda01(
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                )
            }
            Axis::Ns => AxisValue::Ns(s.parse().map_err(|_| bad())?),
            Axis::Conditioning => AxisValue::Conditioning(s.parse()?),
        })
    }

    /// Parses a value list; an empty list is a configuration error.
    pub fn parse_values(self, values: &[String]) -> Result<Vec<AxisValue>> {
        let parsed: Vec<AxisValue> = values
            .iter()
            .flat_map(|v| v.split(','))
            .filter(|v| !v.trim().is_empty())
            .map(|v| self.parse_value(v))
            .collect::<Result<_>>()?;
        if parsed.is_empty() {
            return Err(Error::config("ablation needs at least one value"));
        }
        Ok(parsed)
    }
}

impl AxisValue {
    /// Writes this value into `cfg`. Switching to `uncond` also zeroes the
    /// conditional-only terms and pretraining; `sum` forces `d_e = d_z`.
    pub fn apply(self, cfg: &mut Config) {
        let d = &mut cfg.distill;
        match self {
            AxisValue::Alpha(a) => d.alpha = a,
            AxisValue::Lambda01(a, b) => {
                d.student_loss.gen = a;
                d.student_loss.second = b;
            }
            AxisValue::Ns(n) => d.n_s = n,
            AxisValue::Conditioning(c) => {
                d.conditioning = c;
                match c {
                    Conditioning::Uncond => {
                        d.generator_loss.nll = 0.0;
                        d.generator_loss.norm_reg = 0.0;
                        d.pgs = 0;
                    }
                    Conditioning::Sum => d.d_e = d.d_z,
                    Conditioning::Cat => {}
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: AxisValue,
    pub seed: u64,
    pub final_acc: f64,
}

/// Per-value mean and sample standard deviation of final accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub value: AxisValue,
    pub mean_acc: f64,
    pub sd_acc: f64,
    pub runs: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One distillation per `(value, seed)` pair, run in parallel; results are
/// independent of the thread count. With `out` set, each run writes its own
/// directory `<out>/<value>/seed<seed>` and the tables go to
/// `<out>/ablation_runs.csv` and `<out>/ablation.csv`.
pub fn run_ablation(
    base: &Config,
    teacher: &ClassifierNet,
    test: &Dataset,
    values: &[AxisValue],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(Vec<AblationRow>, Vec<AblationResult>)> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one value and one seed"));
    }
    let jobs: Vec<(AxisValue, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut configs = Vec::with_capacity(jobs.len());
    for &(v, seed) in &jobs {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        cfg.distill.seed = seed;
        cfg.validate()?;
        configs.push(cfg);
    }
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&(value, seed), cfg)| {
            let dir = out.map(|o| o.join(value.to_string().replace(':', "_")).join(format!("seed{seed}")));
            let note = format!("ablation value {value}");
            let summary = run_distillation_with(teacher, test, cfg, dir.as_deref(), &[note])?;
            Ok(AblationRow {
                value,
                seed,
                final_acc: summary.final_eval.accuracy,
            })
        })
        .collect::<Result<_>>()?;
    let results: Vec<AblationResult> = values
        .iter()
        .map(|&v| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.final_acc).collect();
            let (mean_acc, sd_acc) = mean_sd(&accs);
            AblationResult {
                value: v,
                mean_acc,
                sd_acc,
                runs: accs.len(),
            }
        })
        .collect();
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        let mut runs = String::from("value,seed,final_acc\n");
        for r in &rows {
            runs.push_str(&format!("{},{},{:?}\n", r.value, r.seed, r.final_acc));
        }
        fs::write(o.join("ablation_runs.csv"), runs)?;
        let mut table = String::from("value,mean_acc,sd_acc,runs\n");
        for r in &results {
            table.push_str(&format!("{},{:?},{:?},{}\n", r.value, r.mean_acc, r.sd_acc, r.runs));
        }
        fs::write(o.join("ablation.csv"), table)?;
    }
    Ok((rows, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_axis_values() {
        let v = Axis::Lambda01
            .parse_values(&["1:1,0.3:1".into(), "0:1".into()])
            .unwrap();
        assert_eq!(
            v,
            vec![
                AxisValue::Lambda01(1.0, 1.0),
                AxisValue::Lambda01(0.3, 1.0),
                AxisValue::Lambda01(0.0, 1.0)
            ]
        );
        assert!(Axis::Alpha.parse_values(&[]).is_err());
        assert!(Axis::Alpha.parse_values(&["".into()]).is_err());
        assert!("beta".parse::<Axis>().is_err());
        let c = Axis::Conditioning.parse_values(&["uncond,sum,cat".into()]).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn applying_uncond_clears_conditional_terms() {
        let mut cfg = Config::preset("imagenet").unwrap();
        AxisValue::Conditioning(Conditioning::Uncond).apply(&mut cfg);
        assert_eq!(cfg.distill.generator_loss.nll, 0.0);
        assert_eq!(cfg.distill.pgs, 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }
}
