use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mad_core::config::{Config, Method};
use mad_core::data::samples_csv;
use mad_core::diag::{evaluate, js_probe, JsProbeConfig};
use mad_core::diffcore::{BnMode, RngState, Stream};
use mad_core::models::{ClassifierNet, EmbeddingTable, GeneratorNet};
use mad_core::trainer::{self, rundir, Axis};
use mad_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mad", version, about = "Data-free knowledge distillation with an EMA generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Abm,
    Mem,
    Mad,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Abm => Method::Abm,
            MethodArg::Mem => Method::Mem,
            MethodArg::Mad => Method::Mad,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the configured synthetic dataset.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for teacher.ckpt and teacher_log.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the teacher into a fresh student without its training data.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `method` from the config; `abm` also forces lambda1 = 0.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        teacher: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Jensen-Shannon divergence of a lagged student against the teacher on
    /// samples from the generator and its EMA copy.
    JsProbe {
        #[arg(long)]
        rundir: PathBuf,
        /// Student lag in stages.
        #[arg(long)]
        tau: usize,
        /// Comma-separated stages; defaults to every checkpointed stage after `tau`.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        /// Probe batches per stage (each of the run's batch size).
        #[arg(long, default_value_t = 4)]
        batches: usize,
    },
    /// Write synthetic samples from a generator checkpoint as CSV.
    ExportSamples {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        /// 1-based class label (conditional generators only).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One distillation per value of a hyperparameter, over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Values, comma or space separated; `l0:l1` pairs for lambda01.
        #[arg(long, num_args = 0..)]
        values: Vec<String>,
        /// Teacher checkpoint; trained from the config when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Number of seeds, counting up from the config's seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.distill.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_teacher(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (train, test) = trainer::datasets(&cfg.data)?;
    let (net, report) = trainer::pretrain_teacher(
        &train,
        &test,
        &cfg.teacher,
        cfg.distill.student_loss.logit_bound,
        cfg.distill.seed,
    )?;
    std::fs::create_dir_all(out)?;
    net.save(&out.join("teacher.ckpt"))?;
    std::fs::write(out.join("teacher_log.csv"), report.csv())?;
    std::fs::write(out.join(rundir::CONFIG_FILE), cfg.to_resolved(&[]))?;
    println!(
        "teacher test accuracy {:.4} (cross-entropy {:.4})",
        report.test.accuracy, report.test.cross_entropy
    );
    Ok(())
}

fn distill(config: &Path, method: Option<MethodArg>, teacher: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.distill.seed = s;
    }
    let mut notes = Vec::new();
    if let Some(m) = method {
        let m = Method::from(m);
        if m != cfg.distill.method {
            notes.push(format!("override: method = {m} (config had {})", cfg.distill.method));
            cfg.distill.method = m;
        }
    }
    if cfg.distill.method == Method::Abm && cfg.distill.student_loss.second != 0.0 {
        notes.push(format!(
            "override: method = abm forces lambda1 = 0 (config had {})",
            cfg.distill.student_loss.second
        ));
        cfg.distill.student_loss.second = 0.0;
    }
    for n in &notes {
        log::warn!("{n}");
    }
    cfg.validate()?;
    let (_, test) = trainer::datasets(&cfg.data)?;
    let summary = trainer::run_distillation(teacher, &test, &cfg, out, &notes)?;
    println!(
        "{} final student accuracy {:.4} (teacher {:.4}) after {} stages",
        summary.method, summary.final_eval.accuracy, summary.teacher.accuracy, summary.stages
    );
    Ok(())
}

fn probe(run: &Path, tau: usize, stages: Vec<usize>, batches: usize) -> Result<()> {
    let resolved = run.join(rundir::CONFIG_FILE);
    if !resolved.is_file() {
        return Err(Error::Missing(format!("{} (not a run directory)", resolved.display())));
    }
    let cfg = Config::load(&resolved)?;
    let d = &cfg.distill;
    let stages = if stages.is_empty() {
        (1..=d.stages() / d.ckpt_every)
            .map(|k| k * d.ckpt_every)
            .filter(|&t| t > tau)
            .collect()
    } else {
        stages
    };
    let probe = JsProbeConfig {
        stages,
        tau,
        batches,
        batch_size: d.bs,
    };
    let rows = js_probe(run, &probe)?;
    let below = rows
        .iter()
        .filter(|r| r.js_ema.is_some_and(|e| e < r.js_gen))
        .count();
    println!(
        "probed {} stages; js_ema < js_gen at {below}; wrote {}",
        rows.len(),
        run.join("js_probe.csv").display()
    );
    Ok(())
}

fn export_samples(
    generator: &Path,
    embeddings: Option<&Path>,
    n: usize,
    class: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let net = GeneratorNet::load(generator)?;
    let conditional = net.conditioning.is_conditional();
    if !conditional && (class.is_some() || embeddings.is_some()) {
        return Err(Error::Config(
            "--class and --embeddings need a conditional generator".into(),
        ));
    }
    let table = match (conditional, embeddings) {
        (true, Some(p)) => Some(EmbeddingTable::load(p)?),
        (true, None) => {
            return Err(Error::Config("conditional generator needs --embeddings".into()));
        }
        (false, _) => None,
    };
    let mut rng = RngState::new(seed, Stream::Export);
    let labels = match (&table, class) {
        (Some(t), Some(c)) => {
            if c == 0 || c > t.classes() {
                return Err(Error::Config(format!("--class must lie in 1..={}", t.classes())));
            }
            Some(vec![c - 1; n])
        }
        (Some(t), None) => Some(rng.fork(1).labels(n, t.classes())),
        (None, _) => None,
    };
    let text = if n == 0 {
        samples_csv(&mad_core::diffcore::Tensor::zeros(&[0, net.d_out()]), labels.as_deref())
    } else {
        let z = rng.normal_tensor(&[n, net.d_z]);
        let (_, x) = net.generate(table.as_ref(), &z, labels.as_deref(), BnMode::Eval)?;
        samples_csv(&x, labels.as_deref())
    };
    std::fs::write(out, text)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn ablate(
    config: &Path,
    axis: &str,
    values: &[String],
    teacher: Option<&Path>,
    seeds: u64,
    out: &Path,
) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let values = axis.parse_values(values)?;
    let cfg = load_config(config, None)?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let (train, test) = trainer::datasets(&cfg.data)?;
    let teacher = match teacher {
        Some(p) => ClassifierNet::load(p)?,
        None => {
            let (net, report) = trainer::pretrain_teacher(
                &train,
                &test,
                &cfg.teacher,
                cfg.distill.student_loss.logit_bound,
                cfg.distill.seed,
            )?;
            println!("teacher test accuracy {:.4}", report.test.accuracy);
            net
        }
    };
    println!("teacher accuracy on the test split {:.4}", evaluate(&teacher, &test)?.accuracy);
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.distill.seed + k).collect();
    let (_, results) = trainer::run_ablation(&cfg, &teacher, &test, &values, &seed_list, Some(out))?;
    println!("value\tmean_acc\tsd_acc\truns");
    for r in &results {
        println!("{}\t{:.4}\t{:.4}\t{}", r.value, r.mean_acc, r.sd_acc, r.runs);
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("MAD_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainTeacher { config, out, seed } => pretrain_teacher(&config, &out, seed),
        Command::Distill {
            config,
            method,
            teacher,
            out,
            seed,
        } => distill(&config, method, &teacher, &out, seed),
        Command::JsProbe {
            rundir,
            tau,
            stages,
            batches,
        } => probe(&rundir, tau, stages, batches),
        Command::ExportSamples {
            generator,
            embeddings,
            n,
            class,
            seed,
            out,
        } => export_samples(&generator, embeddings.as_deref(), n, class, seed, &out),
        Command::Ablate {
            config,
            axis,
            values,
            teacher,
            seeds,
            out,
        } => ablate(&config, &axis, &values, teacher.as_deref(), seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
