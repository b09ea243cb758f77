use std::path::{Path, PathBuf};

use serde::Serialize;
use stabprune::analyzer::{compression_summary, memory_report, render_table};
use stabprune::dataio::{load_checkpoint, load_mnist, save_checkpoint, synth_dataset_with_shape};
use stabprune::pruner::{ablation, prune, rank_filters, AblationPoint, IterationRecord};
use stabprune::report::{ablation_jsonl, cost_jsonl, importance_jsonl, to_jsonl, train_jsonl};
use stabprune::trainer::{train, TrainHooks};
use stabprune::{
    zoo, Architecture, CheckpointMeta, CompressionSummary, CostReport, Dataset, LossMode, ModelGraph, TrainReport,
};

use crate::config::{FileConfig, FlagOverrides, Primary, RunConfig};
use crate::error::CliError;
use crate::{Cli, Command, Common};

pub const CHECKPOINT_FILE: &str = "model.sfpk";
const SYNTH_DEFAULT_N: usize = 1024;

/// What a command produced, for callers that run it in-process.
#[derive(Debug, Clone)]
pub enum Outcome {
    Train {
        config: RunConfig,
        checkpoint: PathBuf,
        report: TrainReport,
    },
    Prune {
        config: RunConfig,
        checkpoint: PathBuf,
        records: Vec<IterationRecord>,
        widths: Vec<usize>,
        test_accuracy: f64,
        flops_before: u64,
        flops_after: u64,
    },
    Analyze {
        config: RunConfig,
        reports: Vec<CostReport>,
        compression: Vec<CompressionSummary>,
    },
    Eval {
        config: RunConfig,
        summary: EvalSummary,
    },
    Ablate {
        config: RunConfig,
        points: Vec<AblationPoint>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    pub error_pct: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Train(c) => cmd_train(resolve("train", Primary::Train, &c, FlagOverrides::default())?),
        Command::Prune(c) => cmd_prune(resolve("prune", Primary::Finetune, &c, FlagOverrides::default())?),
        Command::Analyze { common, baseline } => {
            let extra = FlagOverrides {
                baseline,
                ..Default::default()
            };
            cmd_analyze(resolve("analyze", Primary::None, &common, extra)?)
        }
        Command::Eval { common, split } => cmd_eval(resolve("eval", Primary::None, &common, FlagOverrides::default())?, &split),
        Command::Ablate {
            common,
            layer,
            k,
            seeds,
        } => {
            let extra = FlagOverrides {
                layer,
                k,
                seeds,
                ..Default::default()
            };
            cmd_ablate(resolve("ablate", Primary::Aux, &common, extra)?)
        }
    }
}

fn resolve(command: &str, primary: Primary, c: &Common, extra: FlagOverrides) -> Result<RunConfig, CliError> {
    let file = match &c.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = FlagOverrides {
        baseline: extra.baseline,
        layer: extra.layer,
        k: extra.k,
        seeds: extra.seeds,
        ..c.overrides()
    };
    let cfg = RunConfig::resolve(command, primary, file, flags)?;
    log::debug!("resolved config:\n{}", cfg.to_toml()?);
    Ok(cfg)
}

/// A built-in name, an architecture text file, or a checkpoint.
pub fn load_arch(spec: &str) -> Result<Architecture, CliError> {
    if let Some(a) = zoo::by_name(spec) {
        return Ok(a);
    }
    let path = Path::new(spec);
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::config(format!(
            "`{spec}` is neither a built-in architecture ({}) nor a readable file: {e}",
            zoo::NAMES.join(", ")
        ))
    })?;
    if bytes.starts_with(stabprune::dataio::CHECKPOINT_MAGIC) {
        return Ok(load_checkpoint::<f32>(path)?.model.arch().clone());
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::config(format!("{spec}: not UTF-8 text")))?;
    Ok(Architecture::parse(&text)?)
}

fn require_checkpoint(cfg: &RunConfig) -> Result<ModelGraph<f32>, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config(format!("{} needs --checkpoint", cfg.command)))?;
    if !path.exists() {
        return Err(CliError::data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint::<f32>(path)?.model)
}

/// Training and test sets matching `arch`, with the configured limits applied.
pub fn load_data(cfg: &RunConfig, arch: &Architecture) -> Result<(Dataset, Dataset), CliError> {
    let spec = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::config(format!("{} needs --data", cfg.command)))?;
    let classes = arch.num_classes()?;
    let (train, test) = if let Some(rest) = spec.strip_prefix("synth") {
        let n = match rest.strip_prefix(':') {
            Some(n) => n
                .parse()
                .map_err(|_| CliError::config(format!("bad synthetic sample count in `{spec}`")))?,
            None if rest.is_empty() => SYNTH_DEFAULT_N,
            None => return Err(CliError::config(format!("bad data spec `{spec}`"))),
        };
        let test_n = (n / 4).max(classes);
        (
            synth_dataset_with_shape(n, classes, cfg.seed, arch.input)?,
            synth_dataset_with_shape(test_n, classes, cfg.seed.wrapping_add(1), arch.input)?,
        )
    } else {
        let dir = Path::new(spec);
        if !dir.is_dir() {
            return Err(CliError::data(format!("data directory {} does not exist", dir.display())));
        }
        load_mnist(dir)?
    };
    let train = match cfg.limit {
        Some(n) => train.take(n)?,
        None => train,
    };
    let test = match cfg.test_limit {
        Some(n) => test.take(n)?,
        None => test,
    };
    for d in [&train, &test] {
        if d.sample_shape() != arch.input {
            return Err(CliError::data(format!(
                "samples are {:?} but the architecture expects {:?}",
                d.sample_shape(),
                arch.input
            )));
        }
        if d.classes() > classes {
            return Err(CliError::data(format!(
                "dataset has {} classes but the architecture outputs {classes}",
                d.classes()
            )));
        }
    }
    Ok((train, test))
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.command))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn save(model: &ModelGraph<f32>, cfg: &RunConfig, epoch: u64, dir: &Path) -> Result<PathBuf, CliError> {
    let meta = CheckpointMeta {
        epoch,
        seed: cfg.seed,
        config_hash: cfg.hash()?,
    };
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(model, &meta, &path).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(path)
}

fn with_out(mut cfg: RunConfig) -> Result<(RunConfig, PathBuf), CliError> {
    let dir = out_dir(&cfg);
    cfg.out = Some(dir.clone());
    cfg.write_resolved()?;
    Ok((cfg, dir))
}

fn cmd_train(cfg: RunConfig) -> Result<Outcome, CliError> {
    let (cfg, dir) = with_out(cfg)?;
    let model = match (&cfg.checkpoint, &cfg.arch) {
        (Some(_), _) => require_checkpoint(&cfg)?,
        (None, Some(a)) => ModelGraph::<f32>::init(load_arch(a)?, cfg.seed)?,
        (None, None) => return Err(CliError::config("train needs --arch or --checkpoint")),
    };
    let (train_set, test_set) = load_data(&cfg, model.arch())?;
    log::info!(
        "training {} samples for {} epochs (test {} samples)",
        train_set.len(),
        cfg.train.epochs,
        test_set.len()
    );
    let (model, report) = train(model, &train_set, Some(&test_set), &cfg.train, LossMode::Actual)?;
    write(&dir, "train_report.jsonl", &train_jsonl(&report)?)?;
    let checkpoint = save(&model, &cfg, cfg.train.epochs as u64, &dir)?;
    if let Some(acc) = report.epochs.last().and_then(|e| e.test_accuracy) {
        println!("test accuracy {acc:.4} (error {:.2}%)", 100.0 * (1.0 - acc));
    }
    println!("checkpoint {}", checkpoint.display());
    Ok(Outcome::Train {
        config: cfg,
        checkpoint,
        report,
    })
}

#[derive(Serialize)]
struct PruneEntry<'a> {
    iteration: usize,
    widths_before: &'a [usize],
    widths_after: &'a [usize],
    pruned: Vec<usize>,
    flops: u64,
    test_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct PruneTotals<'a> {
    criterion: stabprune::Criterion,
    iterations: usize,
    widths: &'a [usize],
    flops_before: u64,
    flops_after: u64,
    flops_reduction_pct: f64,
    test_accuracy: f64,
    test_error_pct: f64,
}

fn cmd_prune(cfg: RunConfig) -> Result<Outcome, CliError> {
    let (cfg, dir) = with_out(cfg)?;
    let model = require_checkpoint(&cfg)?;
    let widths0 = model.conv_widths();
    let schedule = cfg.prune_schedule(&widths0)?;
    let (train_set, test_set) = load_data(&cfg, model.arch())?;
    let flops_before = memory_report(model.arch(), 1)?.total_flops;

    let mut hooks = TrainHooks::new(&train_set, Some(&test_set), cfg.aux.clone(), cfg.finetune.clone());
    let (model, records) = prune(model, &schedule, cfg.prune.criterion, &mut hooks)?;

    let mut entries = Vec::with_capacity(records.len());
    for rec in &records {
        let t = rec.iteration;
        write(&dir, &format!("importance_iter{t}.jsonl"), &importance_jsonl(t, &rec.importance, Some(rec))?)?;
        let arch = model.arch().with_conv_widths(&rec.widths_after)?;
        let ft = hooks
            .phases
            .iter()
            .rfind(|p| p.iteration == t && p.phase == "finetune");
        entries.push(PruneEntry {
            iteration: t,
            widths_before: &rec.widths_before,
            widths_after: &rec.widths_after,
            pruned: rec.pruned.counts(),
            flops: memory_report(&arch, 1)?.total_flops,
            test_accuracy: ft.and_then(|p| p.report.epochs.last()).and_then(|e| e.test_accuracy),
        });
    }
    for p in &hooks.phases {
        write(
            &dir,
            &format!("train_iter{}_{}.jsonl", p.iteration, p.phase),
            &train_jsonl(&p.report)?,
        )?;
    }
    let widths = model.conv_widths();
    let flops_after = memory_report(model.arch(), 1)?.total_flops;
    let test_accuracy = model.accuracy(&test_set)?;
    let totals = PruneTotals {
        criterion: cfg.prune.criterion,
        iterations: records.len(),
        widths: &widths,
        flops_before,
        flops_after,
        flops_reduction_pct: 100.0 * (1.0 - flops_after as f64 / flops_before as f64),
        test_accuracy,
        test_error_pct: 100.0 * (1.0 - test_accuracy),
    };
    write(&dir, "prune.jsonl", &to_jsonl("prune", &entries, &totals)?)?;
    let checkpoint = save(&model, &cfg, records.len() as u64, &dir)?;
    println!(
        "widths {:?} -> {:?}, FLOPS {} -> {} ({:.2}% fewer), test error {:.2}%",
        widths0, widths, flops_before, flops_after, totals.flops_reduction_pct, totals.test_error_pct
    );
    println!("checkpoint {}", checkpoint.display());
    Ok(Outcome::Prune {
        config: cfg,
        checkpoint,
        records,
        widths,
        test_accuracy,
        flops_before,
        flops_after,
    })
}

fn cmd_analyze(cfg: RunConfig) -> Result<Outcome, CliError> {
    let arch = match (&cfg.arch, &cfg.checkpoint) {
        (Some(a), _) => load_arch(a)?,
        (None, Some(p)) => load_arch(&p.to_string_lossy())?,
        (None, None) => return Err(CliError::config("analyze needs --arch or --checkpoint")),
    };
    let baseline = cfg.analyze.baseline.as_deref().map(load_arch).transpose()?;
    if cfg.out.is_some() {
        cfg.write_resolved()?;
    }
    let mut reports = Vec::new();
    let mut compression = Vec::new();
    for &b in &cfg.analyze.batch {
        let r = memory_report(&arch, b)?;
        print!("{}", render_table(&r));
        let summary = match &baseline {
            Some(base) => {
                let s = compression_summary(&memory_report(base, b)?, &r)?;
                println!(
                    "vs baseline: FLOPS {:.3}x ({:.2}% pruned), params {:.3}x ({:.2}% pruned), TRM {:.3}x ({:.2}% pruned)",
                    s.flops_ratio, s.flops_pruned_pct, s.params_ratio, s.params_pruned_pct, s.trm_ratio, s.trm_pruned_pct
                );
                Some(s)
            }
            None => None,
        };
        if let Some(dir) = &cfg.out {
            write(dir, &format!("cost_b{b}.jsonl"), &cost_jsonl(&r, summary.as_ref())?)?;
        }
        compression.extend(summary);
        reports.push(r);
    }
    if let Some(dir) = &cfg.out {
        #[derive(Serialize)]
        struct Point {
            batch_size: usize,
            trm_bytes: u64,
            featuremap_bytes: u64,
        }
        #[derive(Serialize)]
        struct Totals {
            model_size_bytes: u64,
            points: usize,
        }
        let points: Vec<Point> = reports
            .iter()
            .map(|r| Point {
                batch_size: r.batch_size,
                trm_bytes: r.trm_bytes,
                featuremap_bytes: r.featuremap_bytes,
            })
            .collect();
        let totals = Totals {
            model_size_bytes: reports.first().map_or(0, |r| r.model_size_bytes),
            points: points.len(),
        };
        write(dir, "trm.jsonl", &to_jsonl("trm", &points, &totals)?)?;
    }
    Ok(Outcome::Analyze {
        config: cfg,
        reports,
        compression,
    })
}

fn cmd_eval(cfg: RunConfig, split: &str) -> Result<Outcome, CliError> {
    let model = require_checkpoint(&cfg)?;
    let (train_set, test_set) = load_data(&cfg, model.arch())?;
    let data = if split == "train" { &train_set } else { &test_set };
    let preds = model.predict_dataset(data)?;
    let classes = model.arch().num_classes()?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in data.labels().iter().zip(&preds) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / data.len() as f64;
    let summary = EvalSummary {
        split: split.to_string(),
        samples: data.len(),
        accuracy,
        error_pct: 100.0 * (1.0 - accuracy),
        confusion,
    };
    println!(
        "{} split: accuracy {:.4} (error {:.2}%) on {} samples",
        summary.split, summary.accuracy, summary.error_pct, summary.samples
    );
    if let Some(dir) = &cfg.out {
        cfg.write_resolved()?;
        #[derive(Serialize)]
        struct Row<'a> {
            class: usize,
            count: u64,
            correct: u64,
            predicted: &'a [u64],
        }
        let rows: Vec<Row> = summary
            .confusion
            .iter()
            .enumerate()
            .map(|(c, row)| Row {
                class: c,
                count: row.iter().sum(),
                correct: row[c],
                predicted: row,
            })
            .collect();
        #[derive(Serialize)]
        struct Totals<'a> {
            split: &'a str,
            samples: usize,
            correct: u64,
            accuracy: f64,
            error_pct: f64,
        }
        let totals = Totals {
            split: &summary.split,
            samples: summary.samples,
            correct,
            accuracy,
            error_pct: summary.error_pct,
        };
        write(dir, "eval.jsonl", &to_jsonl("eval", &rows, &totals)?)?;
    }
    Ok(Outcome::Eval { config: cfg, summary })
}

fn cmd_ablate(cfg: RunConfig) -> Result<Outcome, CliError> {
    let (cfg, dir) = with_out(cfg)?;
    let model = require_checkpoint(&cfg)?;
    let conv = cfg
        .ablate
        .layer
        .ok_or_else(|| CliError::config("ablate needs --layer (0-based conv index)"))?;
    let (train_set, test_set) = load_data(&cfg, model.arch())?;
    let aux = cfg.aux.clone();
    if !(aux.lambda > 0.0) {
        return Err(CliError::config("ablate needs lambda > 0 for the perturbation phase"));
    }
    let mut seeds = cfg.ablate.seeds.clone();
    seeds.sort_unstable();
    let points = ablation(
        &model,
        conv,
        &cfg.ablate.k,
        &seeds,
        |seed| {
            let c = stabprune::TrainConfig { seed, ..aux.clone() };
            let (perturbed, _) = train(model.clone(), &train_set, None, &c, LossMode::Total)?;
            rank_filters(&model, &perturbed)
        },
        |m| m.accuracy(&test_set),
    )?;
    write(&dir, "ablation.jsonl", &ablation_jsonl(conv, &points)?)?;
    for p in &points {
        println!("k {:>3} {:<14} mean accuracy {:.4}", p.k, format!("{:?}", p.arm), p.mean);
    }
    Ok(Outcome::Ablate { config: cfg, points })
}
