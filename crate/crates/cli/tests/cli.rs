use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
preset = desk
data.per_class = 60
teacher.ep = 6
teacher.ldep = 3,5
ep = 4
spe = 5
ldep = 2,3
n_s = 3
bs = 32
ckpt_every = 5
probe.lag = 2
sample_every = 2
mem.capacity = 64
";

fn mad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let tdir = dir.path().join("teacher");
    let o = mad(&["pretrain-teacher", "--config", path(&cfg), "--out", path(&tdir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tdir.join("teacher.ckpt").is_file());
    let log = fs::read_to_string(tdir.join("teacher_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);

    let run = dir.path().join("run");
    let o = mad(&[
        "distill", "--config", path(&cfg), "--method", "mad", "--teacher",
        path(&tdir.join("teacher.ckpt")), "--out", path(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final student accuracy"));
    let header = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,stage,test_acc,test_xent,kd_gen,kd_ema,kd_mem,lr_student,lr_generator\n"));

    let o = mad(&["js-probe", "--rundir", path(&run), "--tau", "2", "--stages", "5,10,20", "--batches", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let probe = fs::read_to_string(run.join("js_probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 4);

    let o = mad(&["js-probe", "--rundir", path(&run), "--tau", "2", "--stages", "7"]);
    assert_eq!(code(&o), 4);
    let o = mad(&["js-probe", "--rundir", path(&run), "--tau", "5", "--stages", "5,10"]);
    assert_eq!(code(&o), 2);

    let out = dir.path().join("samples.csv");
    let gen = run.join("ckpt").join("generator_t20.ckpt");
    let o = mad(&["export-samples", "--generator", path(&gen), "--n", "10", "--seed", "3", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 11);
    let o = mad(&["export-samples", "--generator", path(&gen), "--n", "10", "--seed", "3", "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), text);

    let o = mad(&["export-samples", "--generator", path(&gen), "--n", "0", "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);

    let o = mad(&["export-samples", "--generator", path(&gen), "--n", "4", "--class", "1", "--out", path(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn abm_records_the_forced_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let tdir = dir.path().join("teacher");
    assert_eq!(code(&mad(&["pretrain-teacher", "--config", path(&cfg), "--out", path(&tdir)])), 0);
    let run = dir.path().join("abm");
    let o = mad(&[
        "distill", "--config", path(&cfg), "--method", "abm", "--teacher",
        path(&tdir.join("teacher.ckpt")), "--out", path(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("# override: method = abm forces lambda1 = 0"));
    assert!(resolved.contains("\nlambda1 = 0.0\n"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "no_such_key = 1\n");
    let o = mad(&["pretrain-teacher", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let cfg = write_config(dir.path(), "mem.capacity = 0\n");
    let o = mad(&[
        "distill", "--config", path(&cfg), "--method", "mem", "--teacher",
        path(&dir.path().join("t.ckpt")), "--out", path(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 2);

    let dup = write_config(dir.path(), "bs = 64\n");
    let o = mad(&["pretrain-teacher", "--config", path(&dup), "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bs"));

    let absent = dir.path().join("absent.cfg");
    let o = mad(&["pretrain-teacher", "--config", path(&absent), "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.cfg"));

    let cfg = write_config(dir.path(), "");
    let o = mad(&["ablate", "--config", path(&cfg), "--axis", "beta", "--values", "1", "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_artifacts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = mad(&[
        "distill", "--config", path(&cfg), "--teacher", path(&dir.path().join("absent.ckpt")),
        "--out", path(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 4);
    let o = mad(&["js-probe", "--rundir", path(&dir.path().join("nowhere")), "--tau", "1"]);
    assert_eq!(code(&o), 4);
}
