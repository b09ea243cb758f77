use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use stabprune::report::parse_jsonl;
use stabprune_cli::commands::EvalSummary;
use stabprune_cli::{run, Cli, Outcome};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn stabprune")
}

fn run_args(args: &[&str]) -> Outcome {
    let cli = Cli::try_parse_from(std::iter::once("stabprune").chain(args.iter().copied())).unwrap();
    run(cli).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small conv net on 12x12 synthetic images so every CLI run takes well under a second.
const TINY: &str = "input c=1 h=12 w=12
conv out=6 k=3 stride=1 pad=1
relu
pool k=2 stride=2
conv out=8 k=3 stride=1 pad=1
relu
pool k=2 stride=2
flatten
linear out=4
";

fn tiny_arch(dir: &Path) -> String {
    let path = dir.join("tiny.arch");
    std::fs::write(&path, TINY).unwrap();
    p(&path).to_string()
}

fn train_tiny(dir: &Path, out: &str) -> std::path::PathBuf {
    train_tiny_for(dir, out, 3)
}

fn train_tiny_for(dir: &Path, out: &str, epochs: usize) -> std::path::PathBuf {
    let arch = tiny_arch(dir);
    let out = dir.join(out);
    let epochs = epochs.to_string();
    run_args(&[
        "train", "--arch", &arch, "--data", "synth:256", "--epochs", &epochs, "--lr", "0.05", "--out", p(&out),
    ]);
    out.join("model.sfpk")
}

#[test]
fn missing_data_dir_exits_3_and_names_it() {
    let out = bin(&["train", "--arch", "lenet5", "--data", "/no/such/mnist", "--out", "/tmp/unused-stabprune"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/mnist"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["train", "--arch", "nosuchnet", "--data", "synth"]).status.code(), Some(2));
    assert_eq!(bin(&["train", "--arch", "lenet5", "--lr", "-1", "--data", "synth"]).status.code(), Some(2));
    assert_eq!(bin(&["eval", "--no-such-flag"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(bin(&["train", "--config", p(&bad)]).status.code(), Some(2));

    let ckpt = train_tiny(dir.path(), "base");
    let prune = |schedule: &str| {
        bin(&["prune", "--checkpoint", p(&ckpt), "--data", "synth:64", "--schedule", schedule, "--out", p(&dir.path().join("x"))])
    };
    assert_eq!(prune("targets:0,8").status.code(), Some(2));
    assert_eq!(prune("counts:6,0").status.code(), Some(2));
    assert_eq!(prune("bogus").status.code(), Some(2));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch(dir.path());
    let out = bin(&["train", "--arch", &arch, "--data", "synth:128", "--epochs", "2", "--lr", "1e12", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_checkpoint_report_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "base");
    let out = ckpt.parent().unwrap();
    assert!(ckpt.exists());
    let (entries, totals) = parse_jsonl(&std::fs::read_to_string(out.join("train_report.jsonl")).unwrap()).unwrap();
    assert_eq!(entries.len(), 3);
    assert!(totals["final_test_accuracy"].as_f64().unwrap() > 0.9);
    let resolved: toml::Table = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap().parse().unwrap();
    assert_eq!(resolved["train"]["epochs"].as_integer(), Some(3));
    assert_eq!(resolved["train"]["lr"].as_float(), Some(0.05));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("seed = 5\narch = {arch:?}\ndata = \"synth:64\"\n[train]\nepochs = 1\nlr = 0.01\n")).unwrap();
    let Outcome::Train { config, report, .. } =
        run_args(&["train", "--config", p(&cfg), "--epochs", "2", "--out", p(&dir.path().join("o"))])
    else {
        panic!()
    };
    assert_eq!(config.seed, 5);
    assert_eq!(config.train.epochs, 2);
    assert_eq!(config.train.lr, 0.01);
    assert_eq!(report.epochs.len(), 2);
}

#[test]
fn rerun_gives_identical_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(train_tiny(dir.path(), "a")).unwrap();
    let b = std::fs::read(train_tiny(dir.path(), "b")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prune_writes_one_importance_report_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "base");
    for criterion in ["stability", "l1"] {
        let out = dir.path().join(criterion);
        let Outcome::Prune { widths, records, .. } = run_args(&[
            "prune", "--checkpoint", p(&ckpt), "--data", "synth:256", "--schedule", "counts:2,2;1,3",
            "--criterion", criterion, "--epochs", "1", "--out", p(&out),
        ]) else {
            panic!()
        };
        assert_eq!(widths, vec![3, 3]);
        assert_eq!(records.len(), 2);
        for t in 0..2 {
            let text = std::fs::read_to_string(out.join(format!("importance_iter{t}.jsonl"))).unwrap();
            let (entries, totals) = parse_jsonl(&text).unwrap();
            assert_eq!(entries.len(), 2);
            assert_eq!(entries[0]["criterion"], criterion);
            assert_eq!(totals["pruned"], 4);
        }
        let phases = if criterion == "stability" { ["aux", "finetune"].as_slice() } else { &["finetune"] };
        for phase in phases {
            assert!(out.join(format!("train_iter1_{phase}.jsonl")).exists());
        }
        let (_, totals) = parse_jsonl(&std::fs::read_to_string(out.join("prune.jsonl")).unwrap()).unwrap();
        assert_eq!(totals["widths"], serde_json::json!([3, 3]));
        assert!(out.join("model.sfpk").exists());
    }
}

#[test]
fn analyze_reports_vgg_totals() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["analyze", "--arch", "vgg16_prun2", "--batch", "1,64,512", "--baseline", "vgg16_cifar", "--out", p(dir.path())]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("flops 52258448"));
    assert_eq!(stdout.matches("vs baseline").count(), 3);
    let mut trm = Vec::new();
    for b in [1u64, 64, 512] {
        let text = std::fs::read_to_string(dir.path().join(format!("cost_b{b}.jsonl"))).unwrap();
        let (entries, totals) = parse_jsonl(&text).unwrap();
        let flops: u64 = entries.iter().map(|e| e["flops"].as_u64().unwrap()).sum();
        assert_eq!(flops, totals["total_flops"].as_u64().unwrap());
        trm.push(totals["trm_bytes"].as_u64().unwrap());
        let ratio = totals["compression"]["flops_ratio"].as_f64().unwrap();
        assert!((ratio - 313_463_808.0 / 52_258_448.0).abs() < 1e-12);
    }
    // equal steps in B give equal steps in TRM
    assert_eq!((trm[1] - trm[0]) * (512 - 64), (trm[2] - trm[1]) * (64 - 1));
}

#[test]
fn analyze_accepts_checkpoints_and_arch_files() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "base");
    let Outcome::Analyze { reports: from_ckpt, .. } = run_args(&["analyze", "--checkpoint", p(&ckpt)]) else {
        panic!()
    };
    let arch = tiny_arch(dir.path());
    let Outcome::Analyze { reports: from_file, .. } = run_args(&["analyze", "--arch", &arch]) else {
        panic!()
    };
    assert_eq!(from_ckpt, from_file);
}

#[test]
fn eval_is_repeatable_and_counts_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny_for(dir.path(), "base", 6);
    let eval = || -> EvalSummary {
        let Outcome::Eval { summary, .. } = run_args(&[
            "eval", "--checkpoint", p(&ckpt), "--data", "synth:256", "--out", p(&dir.path().join("e")),
        ]) else {
            panic!()
        };
        summary
    };
    let test = eval();
    assert_eq!(test, eval());
    assert!(test.accuracy > 0.9);
    let total: u64 = test.confusion.iter().flatten().sum();
    assert_eq!(total as usize, test.samples);
    let (rows, totals) = parse_jsonl(&std::fs::read_to_string(dir.path().join("e/eval.jsonl")).unwrap()).unwrap();
    let correct: u64 = rows.iter().map(|r| r["correct"].as_u64().unwrap()).sum();
    assert_eq!(correct, totals["correct"].as_u64().unwrap());
    assert_eq!(rows.len(), 4);
}

/// Needs MNIST under `<workspace>/data/mnist` or `$STABPRUNE_MNIST`; skipped otherwise.
#[test]
fn eval_train_split_is_no_worse_than_test_on_mnist() {
    let mnist = std::env::var_os("STABPRUNE_MNIST")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if !mnist.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST at {}", mnist.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let common = ["--data", p(&mnist), "--limit", "3000", "--test-limit", "2000"];
    let mut train = vec!["train", "--arch", "lenet5", "--epochs", "2", "--out", p(&out)];
    train.extend(common);
    run_args(&train);
    let ckpt = out.join("model.sfpk");
    let acc = |split: &str| {
        let mut a = vec!["eval", "--checkpoint", p(&ckpt), "--split", split];
        a.extend(common);
        let Outcome::Eval { summary, .. } = run_args(&a) else { panic!() };
        summary.accuracy
    };
    let (tr, te) = (acc("train"), acc("test"));
    assert!(tr >= te, "train {tr} < test {te}");
    assert!(te > 0.9);
}

#[test]
fn ablate_k_zero_matches_baseline_and_rejects_wide_k() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "base");
    let out = dir.path().join("ab");
    let Outcome::Ablate { points, .. } = run_args(&[
        "ablate", "--checkpoint", p(&ckpt), "--data", "synth:128", "--layer", "1", "--k", "0,2", "--seeds", "2,1",
        "--out", p(&out),
    ]) else {
        panic!()
    };
    assert_eq!(points.len(), 6);
    let zero: Vec<f64> = points.iter().filter(|p| p.k == 0).map(|p| p.mean).collect();
    assert!(zero.windows(2).all(|w| w[0] == w[1]));
    let (entries, _) = parse_jsonl(&std::fs::read_to_string(out.join("ablation.jsonl")).unwrap()).unwrap();
    assert_eq!(entries.len(), 6);

    let wide = bin(&["ablate", "--checkpoint", p(&ckpt), "--data", "synth:64", "--layer", "1", "--k", "8", "--out", p(&out)]);
    assert_eq!(wide.status.code(), Some(2));
}
