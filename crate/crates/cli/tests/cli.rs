use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_confound-guard"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn confound-guard");
    assert!(
        out.status.success(),
        "confound-guard {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--method",
        "pmdn",
        "--batch-size",
        "20",
        "--epochs",
        "1",
        "--seed",
        "7",
        "--n-per-group",
        "40",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn data_row(csv: &str) -> Vec<String> {
    let mut lines = csv.lines();
    lines.next().expect("header");
    lines.next().expect("row").split(',').map(str::to_string).collect()
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS cnn-layernorm-pmdn"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn train_then_eval_reports_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let train_out = small_train(&model, &[]);
    for file in ["model.ckpt", "train_log.csv", "metrics.csv", "run.txt"] {
        assert!(model.join(file).is_file(), "missing {file}");
    }
    let eval_out = run(&["eval", "--model", model.to_str().unwrap()]);
    let eval_csv = String::from_utf8(eval_out.stdout).unwrap();
    assert_eq!(eval_csv, String::from_utf8(train_out.stdout).unwrap());
    assert_eq!(eval_csv, fs::read_to_string(model.join("metrics.csv")).unwrap());
    assert_eq!(
        eval_csv.lines().next().unwrap(),
        "method,batch_size,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,pearson_meta"
    );
    let row = data_row(&eval_csv);
    assert_eq!(row[0], "pmdn");
    assert_eq!(row[1], "20");
    assert_eq!(row[2], "7");
    for v in &row[3..] {
        assert!(v.parse::<f64>().unwrap().is_finite(), "field {v}");
    }
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    small_train(&a, &["--skip-redundant-forward"]);
    small_train(&b, &["--skip-redundant-forward"]);
    for file in ["metrics.csv", "train_log.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn train_on_a_saved_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["synthgen", "--seed", "3", "--n", "30", "--out", data.to_str().unwrap()]);
    let model = dir.path().join("model");
    run(&[
        "train",
        "--method",
        "mdn",
        "--batch-size",
        "16",
        "--epochs",
        "1",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    let eval_out = run(&["eval", "--model", model.to_str().unwrap()]);
    assert_eq!(
        String::from_utf8(eval_out.stdout).unwrap(),
        fs::read_to_string(model.join("metrics.csv")).unwrap()
    );
}

const SWEEP_CONFIG: &str = "\
# tiny sweep
methods: baseline, pmdn
batch_sizes: 16, 40
repeats: 2
seed: 5
epochs: 1
n_per_group: 30
";

fn sweep_flags(out: &Path) -> Vec<String> {
    [
        "sweep",
        "--methods",
        "baseline,pmdn",
        "--batch-sizes",
        "16,40",
        "--repeats",
        "2",
        "--seed",
        "5",
        "--epochs",
        "1",
        "--n-per-group",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec()
}

#[test]
fn sweep_config_file_matches_flags_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    fs::write(&cfg, SWEEP_CONFIG).unwrap();
    let from_file = dir.path().join("file");
    run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", from_file.to_str().unwrap()]);
    let from_flags = dir.path().join("flags");
    let flags = sweep_flags(&from_flags);
    run(&flags.iter().map(String::as_str).collect::<Vec<_>>());

    let a = fs::read(from_file.join("sweep.csv")).unwrap();
    let b = fs::read(from_flags.join("sweep.csv")).unwrap();
    assert_eq!(a, b);

    let threaded = dir.path().join("threaded");
    let out = bin()
        .args(sweep_flags(&threaded))
        .env("CONFOUND_GUARD_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a, fs::read(threaded.join("sweep.csv")).unwrap());

    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "method,batch_size,repeat,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,final_loss,wall_seconds"
    );
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    let keys: Vec<(String, String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            for v in &f[3..] {
                assert!(v.parse::<f64>().unwrap().is_finite());
            }
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect();
    assert_eq!(keys[0], ("baseline".into(), "16".into(), "0".into()));
    assert_eq!(keys[7], ("pmdn".into(), "40".into(), "1".into()));
    assert!(from_file.join("logs").join("pmdn_b40_r1.csv").is_file());
}

#[test]
fn bad_invocations_fail() {
    assert!(!bin().args(["train", "--bogus"]).output().unwrap().status.success());
    assert!(!bin().args(["frobnicate"]).output().unwrap().status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "methods pmdn\n").unwrap();
    let out = bin().args(["sweep", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    fs::write(&cfg, "methods: pmdn\nbatch_sizes: 100\nn_per_group: 10\n").unwrap();
    let out = bin().args(["sweep", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch size"));
}
