use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nearl_core::adapters::AdapterBank;
use nearl_core::analysis::{ablation_csv, count_trainable, cosine_stats, pca2, run_ablations, Suite};
use nearl_core::checkpoint;
use nearl_core::data::{generate, Dataset, SplitName};
use nearl_core::model::{build_variant, NearlModel};
use nearl_core::train::{evaluate, train};
use nearl_core::AblationMode;

use crate::config::RunConfig;
use crate::ConfigError;

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    GenData,
    Train,
    Eval { checkpoint: Option<PathBuf>, split: SplitName },
    /// `None` runs every suite.
    Ablate { suite: Option<Suite> },
    Params,
    Analyze { checkpoint: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Params => "params",
            Command::Analyze { .. } => "analyze",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub data: u64,
}

/// Everything needed to repeat a command: its name and options plus the
/// fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    pub version: String,
    pub seeds: Seeds,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &Command, config: &RunConfig) -> Self {
        let (checkpoint, split, suite) = match command {
            Command::Eval { checkpoint, split } => (checkpoint.clone(), Some(split.as_str().to_string()), None),
            Command::Ablate { suite } => (None, None, Some(suite.map_or("all", Suite::as_str).to_string())),
            Command::Analyze { checkpoint } => (checkpoint.clone(), None, None),
            _ => (None, None, None),
        };
        Manifest {
            command: command.name().to_string(),
            checkpoint,
            split,
            suite,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: Seeds { model: config.model.seed, train: config.train.seed, data: config.data.seed },
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message().trim())).into())
    }

    pub fn command(&self) -> Result<Command> {
        Ok(match self.command.as_str() {
            "gen-data" => Command::GenData,
            "train" => Command::Train,
            "eval" => Command::Eval {
                checkpoint: self.checkpoint.clone(),
                split: self.split.as_deref().unwrap_or("test").parse()?,
            },
            "ablate" => Command::Ablate {
                suite: match self.suite.as_deref() {
                    None | Some("all") => None,
                    Some(s) => Some(s.parse()?),
                },
            },
            "params" => Command::Params,
            "analyze" => Command::Analyze { checkpoint: self.checkpoint.clone() },
            other => return Err(ConfigError(format!("unknown command {other:?} in manifest")).into()),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    /// Files written, in order.
    pub files: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub summary: String,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Writer { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path);
        Ok(())
    }
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dataset = match &config.data.path {
        Some(path) => Dataset::load(path)?,
        None => generate(&config.data.spec(&config.model))?,
    };
    dataset.check_compatible(&config.model)?;
    Ok(dataset)
}

fn model_with_checkpoint(config: &RunConfig, checkpoint: Option<&Path>) -> Result<NearlModel> {
    let mut model = build_variant(&config.model, &config.prompts)?;
    if let Some(path) = checkpoint {
        checkpoint::load_into(&mut model, path)?;
    }
    Ok(model)
}

fn confusion_text(confusion: &[Vec<usize>]) -> String {
    confusion
        .iter()
        .map(|row| row.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs one command, writing its outputs and a manifest into `output_dir`.
pub fn run(command: &Command, config: &RunConfig) -> Result<Outcome> {
    let mut w = Writer::new(&config.output_dir)?;
    let summary = match command {
        Command::GenData => {
            let dataset = generate(&config.data.spec(&config.model))?;
            let path = w.path("dataset.nrld");
            dataset.save(&path)?;
            w.files.push(path.clone());
            format!(
                "wrote {} ({} train / {} val / {} test samples)",
                path.display(),
                dataset.train.len(),
                dataset.val.len(),
                dataset.test.len()
            )
        }
        Command::Train => {
            let dataset = load_dataset(config)?;
            let mut model = build_variant(&config.model, &config.prompts)?;
            let before = model.backbone.checksum();
            let report = train(&mut model, &dataset, &config.train)?;
            let after = model.backbone.checksum();
            if before != after {
                bail!("backbone checksum changed during training ({before} -> {after})");
            }
            let test = evaluate(&model, &dataset, &dataset.test)?;
            w.text("metrics.csv", &report.metrics_csv())?;
            let ckpt = w.path("checkpoint.nearl");
            checkpoint::save(&model, &ckpt)?;
            w.files.push(ckpt);
            let mut s = String::new();
            let _ = writeln!(s, "mode {}", model.mode());
            let _ = writeln!(s, "trainable_params {}", model.adapters.trainable_count());
            let _ = writeln!(s, "steps {}", report.steps);
            let _ = writeln!(s, "best_epoch {}", report.best_epoch);
            let _ = writeln!(s, "best_val_acc {:.6}", report.best_val_accuracy);
            let _ = writeln!(s, "test_acc {:.6}", test.metrics.accuracy);
            let _ = writeln!(s, "test_f1 {:.6}", test.metrics.macro_f1);
            let _ = writeln!(s, "ortho_checks {}", report.ortho_checks);
            let _ = writeln!(s, "max_ortho_cos {:.3e}", report.max_ortho_cos);
            let _ = writeln!(s, "backbone_sha256 {after}");
            w.text("train_summary.txt", &s)?;
            s
        }
        Command::Eval { checkpoint, split } => {
            let dataset = load_dataset(config)?;
            let model = model_with_checkpoint(config, checkpoint.as_deref())?;
            let r = evaluate(&model, &dataset, dataset.split(*split))?;
            let s = format!(
                "split {}\nsamples {}\nloss {:.6}\nacc {:.6}\nf1 {:.6}\nconfusion (rows: label, cols: prediction)\n{}\n",
                split.as_str(),
                r.predictions.len(),
                r.loss,
                r.metrics.accuracy,
                r.metrics.macro_f1,
                confusion_text(&r.metrics.confusion)
            );
            w.text(&format!("eval_{}.txt", split.as_str()), &s)?;
            s
        }
        Command::Ablate { suite } => {
            let dataset = load_dataset(config)?;
            let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
            let mut s = String::new();
            for suite in suites {
                let rows = run_ablations(&config.model, &config.prompts, &dataset, &config.train, suite)?;
                let csv = ablation_csv(&rows);
                w.text(&format!("ablation_{}.csv", suite.as_str()), &csv)?;
                let _ = write!(s, "[{}]\n{csv}", suite.as_str());
            }
            s
        }
        Command::Params => {
            let audit = count_trainable(&config.model)?;
            let registry = AdapterBank::init(&config.model)?.trainable_count();
            if registry != audit.total {
                bail!("formula total {} disagrees with registry total {registry}", audit.total);
            }
            let s = format!("{}registry_total: {registry}\n", audit.report());
            w.text("params.txt", &s)?;
            s
        }
        Command::Analyze { checkpoint } => {
            let dataset = load_dataset(config)?;
            let adapted = model_with_checkpoint(config, checkpoint.as_deref())?;
            let frozen = build_variant(&config.model.clone().with_mode(AblationMode::Frozen), &config.prompts)?;
            let labels: Vec<usize> = dataset.test.iter().map(|s| s.label).collect();
            let mut s = String::new();
            for (tag, model) in [("adapted", &adapted), ("frozen", &frozen)] {
                let features = evaluate(model, &dataset, &dataset.test)?.image_features;
                let cos = cosine_stats(&features, &labels)?;
                w.text(&format!("cosine_{tag}.txt"), &cos.summary())?;
                w.text(&format!("cosine_hist_{tag}.csv"), &cos.histogram_csv())?;
                let pca = pca2(&features)?;
                w.text(&format!("pca_{tag}.csv"), &pca.to_csv(&labels))?;
                let _ = writeln!(
                    s,
                    "{tag}: gap {:.6} (intra {:.6}, inter {:.6}), pca explained {:.4} / {:.4}",
                    cos.gap, cos.intra_mean, cos.inter_mean, pca.explained[0], pca.explained[1]
                );
            }
            w.text("analysis_summary.txt", &s)?;
            s
        }
    };
    let manifest = Manifest::new(command, config);
    let text = toml::to_string(&manifest).context("serializing manifest")?;
    w.text(&format!("manifest-{}.toml", command.name()), &text)?;
    Ok(Outcome { files: w.files, summary })
}
