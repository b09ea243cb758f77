//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stabprune::nn::AuxForm;
use stabprune::pruner::{Criterion, PruneSchedule};
use stabprune::TrainConfig;

use crate::error::CliError;

/// Optional overrides for one training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFile {
    pub lr: Option<f64>,
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub aux_form: Option<AuxForm>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneFile {
    pub schedule: Option<String>,
    pub fraction: Option<f64>,
    pub criterion: Option<Criterion>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFile {
    pub batch: Option<Vec<usize>>,
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateFile {
    pub layer: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub arch: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<String>,
    pub out: Option<PathBuf>,
    pub limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub train: PhaseFile,
    #[serde(default)]
    pub aux: PhaseFile,
    #[serde(default)]
    pub finetune: PhaseFile,
    #[serde(default)]
    pub prune: PruneFile,
    #[serde(default)]
    pub analyze: AnalyzeFile,
    #[serde(default)]
    pub ablate: AblateFile,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSettings {
    /// `targets:W1,W2,...` or `counts:P1,P2;P1,P2;...`.
    pub schedule: Option<String>,
    /// Share of the remaining gap removed per iteration for `targets:` schedules.
    pub fraction: f64,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSettings {
    pub batch: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Fully resolved settings; written as `config.resolved.toml` next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub train: TrainConfig,
    pub aux: TrainConfig,
    pub finetune: TrainConfig,
    pub prune: PruneSettings,
    pub analyze: AnalyzeSettings,
    pub ablate: AblateSettings,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_TRAIN_EPOCHS: usize = 20;

/// Which phase the generic `--epochs` / `--lr` flags address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primary {
    Train,
    Aux,
    Finetune,
    None,
}

/// Flag values shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub arch: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<String>,
    pub out: Option<PathBuf>,
    pub limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub batch: Option<Vec<usize>>,
    pub schedule: Option<String>,
    pub criterion: Option<Criterion>,
    pub aux_form: Option<AuxForm>,
    pub baseline: Option<String>,
    pub layer: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy)]
enum PhaseKind {
    Train,
    Aux,
    Finetune,
}

fn default_phase(kind: PhaseKind, epochs: Option<usize>, seed: u64) -> TrainConfig {
    match kind {
        PhaseKind::Train => TrainConfig::baseline(epochs.unwrap_or(DEFAULT_TRAIN_EPOCHS), seed),
        PhaseKind::Aux => TrainConfig {
            epochs: epochs.unwrap_or(1),
            ..TrainConfig::aux(seed)
        },
        PhaseKind::Finetune => TrainConfig::finetune(epochs.unwrap_or(3), seed),
    }
}

/// Learning-rate breakpoints implied by `lr` and `epochs` when none are given.
fn implied_schedule(kind: PhaseKind, lr: f64, epochs: usize) -> Vec<(usize, f64)> {
    match kind {
        PhaseKind::Train => vec![(epochs / 2, lr * 0.1), (epochs * 3 / 4, lr * 0.01)],
        PhaseKind::Aux => vec![],
        PhaseKind::Finetune => TrainConfig::finetune_schedule(lr, epochs),
    }
}

fn resolve_phase(kind: PhaseKind, file: &PhaseFile, seed: u64, epochs_flag: Option<usize>, lr_flag: Option<f64>) -> TrainConfig {
    let epochs = epochs_flag.or(file.epochs);
    let base = default_phase(kind, epochs, file.seed.unwrap_or(seed));
    let lr = lr_flag.or(file.lr).unwrap_or(base.lr);
    let lr_schedule = match (&file.lr_schedule, lr_flag.or(file.lr), epochs) {
        (Some(s), _, _) => s.clone(),
        (None, None, None) => base.lr_schedule.clone(),
        (None, _, _) => implied_schedule(kind, lr, base.epochs),
    };
    TrainConfig {
        lr,
        lr_schedule,
        momentum: file.momentum.unwrap_or(base.momentum),
        weight_decay: file.weight_decay.unwrap_or(base.weight_decay),
        batch_size: file.batch_size.unwrap_or(base.batch_size),
        lambda: file.lambda.unwrap_or(base.lambda),
        aux_form: file.aux_form.unwrap_or(base.aux_form),
        ..base
    }
}

impl RunConfig {
    pub fn resolve(command: &str, primary: Primary, file: FileConfig, flags: FlagOverrides) -> Result<Self, CliError> {
        let seed = flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let pick = |p: Primary| {
            if p == primary {
                (flags.epochs, flags.lr)
            } else {
                (None, None)
            }
        };
        let (e, l) = pick(Primary::Train);
        let mut train = resolve_phase(PhaseKind::Train, &file.train, seed, e, l);
        let (e, l) = pick(Primary::Aux);
        let mut aux = resolve_phase(PhaseKind::Aux, &file.aux, seed, e, l);
        let (e, l) = pick(Primary::Finetune);
        let mut finetune = resolve_phase(PhaseKind::Finetune, &file.finetune, seed, e, l);

        if let Some(lambda) = flags.lambda {
            aux.lambda = lambda;
        }
        if let Some(form) = flags.aux_form {
            aux.aux_form = form;
        }
        let mut analyze_batch = file.analyze.batch.clone().unwrap_or_else(|| vec![1]);
        if let Some(b) = &flags.batch {
            if command == "analyze" {
                analyze_batch = b.clone();
            } else {
                let [size] = b.as_slice() else {
                    return Err(CliError::config("--batch takes a single batch size for this command"));
                };
                for phase in [&mut train, &mut aux, &mut finetune] {
                    phase.batch_size = *size;
                }
            }
        }

        let cfg = RunConfig {
            command: command.to_string(),
            seed,
            arch: flags.arch.or(file.arch),
            checkpoint: flags.checkpoint.or(file.checkpoint),
            data: flags.data.or(file.data),
            out: flags.out.or(file.out),
            limit: flags.limit.or(file.limit),
            test_limit: flags.test_limit.or(file.test_limit),
            train,
            aux,
            finetune,
            prune: PruneSettings {
                schedule: flags.schedule.or(file.prune.schedule),
                fraction: file.prune.fraction.unwrap_or(0.2),
                criterion: flags.criterion.or(file.prune.criterion).unwrap_or_default(),
            },
            analyze: AnalyzeSettings {
                batch: analyze_batch,
                baseline: flags.baseline.or(file.analyze.baseline),
            },
            ablate: AblateSettings {
                layer: flags.layer.or(file.ablate.layer),
                k: flags.k.or(file.ablate.k).unwrap_or_else(|| vec![0, 4, 8, 16]),
                seeds: flags.seeds.or(file.ablate.seeds).unwrap_or_else(|| vec![1, 2, 3, 4, 5]),
            },
        };
        for (name, phase) in [("train", &cfg.train), ("aux", &cfg.aux), ("finetune", &cfg.finetune)] {
            phase
                .validate()
                .map_err(|e| CliError::config(format!("[{name}] {e}")))?;
        }
        if cfg.analyze.batch.iter().any(|&b| b == 0) {
            return Err(CliError::config("batch sizes must be >= 1"));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot render config: {e}")))
    }

    /// Hash of the settings without the checkpoint and output paths, so
    /// identical runs in different directories produce identical checkpoints.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.out = None;
        c.checkpoint = None;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Writes `config.resolved.toml` into the output directory, if there is one.
    pub fn write_resolved(&self) -> Result<(), CliError> {
        if let Some(out) = &self.out {
            std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            let path = out.join("config.resolved.toml");
            std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn prune_schedule(&self, widths: &[usize]) -> Result<PruneSchedule, CliError> {
        let spec = self
            .prune
            .schedule
            .as_deref()
            .ok_or_else(|| CliError::config("prune needs --schedule (targets:W1,W2,... or counts:P1,P2;...)"))?;
        let mut schedule = parse_schedule(spec, widths, self.prune.fraction)?;
        schedule.aux_epochs = self.aux.epochs;
        schedule.finetune_epochs = self.finetune.epochs;
        schedule.lambda = self.aux.lambda;
        schedule
            .validate(widths)
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(schedule)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad {what} value `{v}`")))
        })
        .collect()
}

/// Parses `targets:4,14` or `counts:6,12;4,10`.
pub fn parse_schedule(spec: &str, widths: &[usize], fraction: f64) -> Result<PruneSchedule, CliError> {
    let (kind, body) = spec
        .split_once(':')
        .ok_or_else(|| CliError::config(format!("schedule `{spec}` must start with targets: or counts:")))?;
    match kind {
        "targets" => {
            let targets: Vec<usize> = parse_list(body, "target width")?;
            PruneSchedule::toward_targets(widths, &targets, fraction).map_err(|e| CliError::config(e.to_string()))
        }
        "counts" => {
            let iterations = body
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|it| parse_list(it, "prune count"))
                .collect::<Result<Vec<Vec<usize>>, _>>()?;
            Ok(PruneSchedule::from_counts(iterations))
        }
        _ => Err(CliError::config(format!("unknown schedule kind `{kind}`"))),
    }
}
