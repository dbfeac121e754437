//! Run configuration. Values are resolved in three layers, later wins:
//! profile defaults, then an optional TOML file, then command-line flags.
//! The fully resolved result is written into the run directory before any
//! work starts, and that snapshot parses back as a config file, so a run
//! can be repeated with `--config <run>/config.toml`.

use clap::Args;
use minitask::encoder::EncoderConfig;
use minitask::gan::GanConfig;
use minitask::heads::{HeadConfig, StsMode};
use minitask::surgery::AdamConfig;
use minitask::train::{TrainConfig, TrainMode};
use minitask::tsne::TsneConfig;
use minitask::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Base defaults a run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Runs in minutes on one core: 32-wide encoder, batch 16, lr 1e-3.
    Desk,
    /// Full-scale reference settings: 768-wide encoder, batch 112, lr 1e-5,
    /// dropout 0.5, weight decay 1e-3. Far too large to train here; kept so
    /// the desk numbers can be read against what they miniaturize.
    Paper,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// config-file field.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file; flags given here override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Default set to start from when a field is given nowhere else.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Root seed; every random stream in the run derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory. Default: $MINITASK_OUT (or ./runs) plus the command name.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Directory holding <task>_<split>.tsv files.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    /// gen-data: training examples per task.
    pub train_per_task: usize,
    /// gen-data: dev examples per task.
    pub dev_per_task: usize,
    /// gen-data: neutral filler-token pool size.
    pub filler_vocab: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub shared_dim: usize,
    pub dense_dim: usize,
    pub dropout_p: f64,
    pub sts_mode: StsMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub halve_paraphrase: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSection {
    pub k: usize,
    pub noise_dim: usize,
    pub hidden_depth: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub conditional: bool,
    pub dropout_p: f64,
    pub epochs: usize,
    /// Fraction of training labels masked before the run.
    pub lambda: f64,
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    /// Worker-thread cap for parallel runs; 0 uses the pool default.
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iters: usize,
    /// Embedding JSONL to project; empty means "must be given on the line".
    pub input: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint to score; empty means "must be given on the line".
    pub checkpoint: PathBuf,
}

/// Everything a run needs, fully resolved. Scalar fields stay ahead of the
/// sections so the struct serializes as valid TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub heads: HeadSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub gan: GanSection,
    pub sweep: SweepSection,
    pub tsne: TsneSection,
    pub eval: EvalSection,
}

fn desk_defaults() -> RunConfig {
    RunConfig {
        command: String::new(),
        profile: Profile::Desk,
        seed: 0,
        out_dir: PathBuf::new(),
        data: DataSection {
            dir: "data".into(),
            train_per_task: 500,
            dev_per_task: 100,
            filler_vocab: minitask::data::SyntheticConfig::default().vocab_size,
        },
        encoder: EncoderSection {
            hidden: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            max_seq_len: 48,
            dropout_p: 0.1,
        },
        heads: HeadSection {
            shared_dim: 32,
            dense_dim: 32,
            dropout_p: 0.1,
            sts_mode: StsMode::SepFused,
        },
        optimizer: OptimizerSection {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
        },
        train: TrainSection {
            mode: TrainMode::PcgradPaired,
            epochs: 50,
            halve_paraphrase: false,
        },
        gan: GanSection {
            k: 5,
            noise_dim: 16,
            hidden_depth: 1,
            hidden_dim: 32,
            lr: 1e-3,
            conditional: true,
            dropout_p: 0.1,
            epochs: 5,
            lambda: 0.0,
            freeze_encoder: false,
        },
        sweep: SweepSection {
            lambdas: vec![0.0, 0.5, 0.9],
            seeds: 3,
            jobs: 0,
        },
        tsne: TsneSection {
            perplexity: 30.0,
            iters: 1000,
            input: PathBuf::new(),
        },
        eval: EvalSection {
            checkpoint: PathBuf::new(),
        },
    }
}

fn paper_defaults() -> RunConfig {
    let desk = desk_defaults();
    RunConfig {
        profile: Profile::Paper,
        encoder: EncoderSection {
            hidden: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            max_seq_len: 128,
            dropout_p: 0.5,
        },
        heads: HeadSection {
            shared_dim: 768,
            dense_dim: 768,
            dropout_p: 0.5,
            sts_mode: StsMode::SepFused,
        },
        optimizer: OptimizerSection {
            lr: 1e-5,
            weight_decay: 1e-3,
            batch_size: 112,
        },
        train: TrainSection {
            mode: TrainMode::PcgradPaired,
            epochs: 10,
            halve_paraphrase: false,
        },
        gan: GanSection {
            noise_dim: 100,
            hidden_dim: 768,
            lr: 5e-5,
            dropout_p: 0.5,
            ..desk.gan
        },
        ..desk
    }
}

impl Profile {
    pub fn defaults(self) -> RunConfig {
        match self {
            Profile::Desk => desk_defaults(),
            Profile::Paper => paper_defaults(),
        }
    }
}

/// Overlays `over` onto `base`, table by table.
fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

fn bad_config(path: &Path, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {why}", path.display()))
}

impl RunConfig {
    /// Profile defaults, overlaid with the file named in `common` (if any),
    /// then the common flags. Command-specific flags are applied by the
    /// caller afterwards, and `finalize` picks the run directory.
    pub fn load(command: &str, common: &CommonArgs) -> Result<RunConfig> {
        let file_value: Option<toml::Value> = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                Some(text.parse().map_err(|e| bad_config(path, e))?)
            }
            None => None,
        };

        // The profile decides the defaults the file merges into, so it has
        // to be read off the raw file before full parsing.
        let file_profile = match &file_value {
            Some(toml::Value::Table(t)) => match t.get("profile") {
                None => None,
                Some(toml::Value::String(s)) => match s.as_str() {
                    "desk" => Some(Profile::Desk),
                    "paper" => Some(Profile::Paper),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown profile {other:?}; expected desk or paper"
                        )))
                    }
                },
                Some(v) => {
                    return Err(Error::Config(format!(
                        "profile must be a string, got {v}"
                    )))
                }
            },
            _ => None,
        };
        let profile = common.profile.or(file_profile).unwrap_or(Profile::Desk);

        let mut merged = toml::Value::try_from(profile.defaults())
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        if let Some(value) = file_value {
            deep_merge(&mut merged, value);
        }
        let mut cfg: RunConfig = merged.try_into().map_err(|e| {
            let path = common.config.as_deref().unwrap_or(Path::new("<defaults>"));
            bad_config(path, e)
        })?;

        cfg.profile = profile;
        cfg.command = command.to_string();
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        if let Some(dir) = &common.data_dir {
            cfg.data.dir = dir.clone();
        }
        Ok(cfg)
    }

    /// Fills in the run directory and checks the fields no later stage
    /// validates. Dimension and rate checks live with the components that
    /// own them and run when the component is built.
    pub fn finalize(&mut self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            let root = std::env::var_os("MINITASK_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            self.out_dir = root.join(&self.command);
        }
        if self.data.train_per_task == 0 || self.data.dev_per_task == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gan.lambda) {
            return Err(Error::Config(format!(
                "gan.lambda must lie in [0, 1], got {}",
                self.gan.lambda
            )));
        }
        self.encoder_cfg(minitask::encoder::RESERVED + 1).validate()?;
        self.head_cfg(false).validate()?;
        self.gan_cfg().validate()?;
        self.train_cfg().validate()?;
        Ok(())
    }

    /// Writes the resolved snapshot into the run directory, creating it.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::io(self.out_dir.display().to_string(), e))?;
        let path = self.out_dir.join("config.toml");
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("unserializable config: {e}")))?;
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn encoder_cfg(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: self.encoder.hidden,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            ff_dim: self.encoder.ff_dim,
            max_seq_len: self.encoder.max_seq_len,
            dropout_p: self.encoder.dropout_p,
        }
    }

    pub fn head_cfg(&self, baseline_mode: bool) -> HeadConfig {
        HeadConfig {
            shared_dim: self.heads.shared_dim,
            dense_dim: self.heads.dense_dim,
            dropout_p: self.heads.dropout_p,
            sts_mode: self.heads.sts_mode,
            baseline_mode,
        }
    }

    pub fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            mode: self.train.mode,
            epochs: self.train.epochs,
            batch_size: self.optimizer.batch_size,
            seed: self.seed,
            optimizer: AdamConfig {
                lr: self.optimizer.lr,
                weight_decay: self.optimizer.weight_decay,
                ..AdamConfig::default()
            },
            halve_paraphrase: self.train.halve_paraphrase,
            stop_at: None,
        }
    }

    pub fn gan_cfg(&self) -> GanConfig {
        GanConfig {
            k: self.gan.k,
            noise_dim: self.gan.noise_dim,
            hidden_depth: self.gan.hidden_depth,
            hidden_dim: self.gan.hidden_dim,
            lr: self.gan.lr,
            conditional: self.gan.conditional,
            dropout_p: self.gan.dropout_p,
            epochs: self.gan.epochs,
        }
    }

    pub fn tsne_cfg(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne.perplexity,
            iters: self.tsne.iters,
            ..TsneConfig::default()
        }
    }
}
