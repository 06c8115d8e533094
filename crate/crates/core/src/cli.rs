//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint;
use crate::eval;
use crate::image::Image;
use crate::metrics::MetricsReport;
use crate::pgm;
use crate::synth::{self, SynthConfig};
use crate::train::{self, LabelSource, LossMode, RunConfig, TrainSample};

#[derive(Debug, Parser)]
#[command(name = "spatseg", version, about = "Fiber segmentation from inaccurate labels with a local spatial loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synthgen(SynthgenArgs),
    /// Train a U-net.
    Train(TrainArgs),
    /// Score a model, a directory of masks, or the pseudo labels against truth.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Paired comparison of two metrics reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthgenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON synthesis config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of PGM backgrounds used instead of procedural ones.
    #[arg(long)]
    pub background_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Spatial,
    CeOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelArg {
    Pseudo,
    Truth,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory (overrides `train_dir` in the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub labels: Option<LabelArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the checkpoint and optimizer state in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Write 0 in the log's wall_time column.
    #[arg(long)]
    pub no_wall_time: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with_all = ["pred_dir", "pseudo_labels"])]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.pgm` masks.
    #[arg(long, conflicts_with = "pseudo_labels")]
    pub pred_dir: Option<PathBuf>,
    /// Score the dataset's own pseudo labels.
    #[arg(long)]
    pub pseudo_labels: bool,
    /// Run config, used for `resize`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the foreground probability as an 8-bit PGM.
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn echo<T: Serialize>(what: &str, value: &T) {
    println!("{what}: {}", serde_json::to_string(value).unwrap_or_default());
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synthgen(a) => synthgen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Compare(a) => compare(a),
    }
}

fn read_backgrounds(dir: &Path) -> anyhow::Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm files in {}", dir.display());
    }
    paths.iter().map(|p| Ok(pgm::read_image(p)?)).collect()
}

fn synthgen(a: SynthgenArgs) -> anyhow::Result<()> {
    let mut config: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    echo("synth config", &config);
    let backgrounds = a.background_dir.as_deref().map(read_backgrounds).transpose()?;
    let m = synth::generate_dataset(&config, a.count, &a.out, backgrounds.as_deref())?;
    eprintln!("wrote {} samples to {}", m.count, a.out.display());
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        c.train_dir = Some(d.clone());
    }
    if let Some(l) = a.loss {
        c.loss_mode = match l {
            LossArg::Spatial => LossMode::Spatial,
            LossArg::CeOnly => LossMode::CeOnly,
        };
    }
    if let Some(l) = a.labels {
        c.label_source = match l {
            LabelArg::Pseudo => LabelSource::Pseudo,
            LabelArg::Truth => LabelSource::Truth,
        };
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.lambda {
        c.loss.lambda = v;
    }
    if let Some(v) = a.sigma {
        c.loss.sigma = v;
    }
    if let Some(v) = a.lr {
        c.optimizer.lr = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if a.no_wall_time {
        c.log_wall_time = false;
    }
    c.validate()?;
    Ok(c)
}

/// Loads training pairs according to `config.label_source` and `config.resize`.
pub fn load_training_set(config: &RunConfig) -> anyhow::Result<Vec<TrainSample>> {
    let dir = config.train_dir.as_ref().context("no training data: pass --data or set train_dir")?;
    let samples = synth::load_dataset(dir)?;
    if samples.is_empty() {
        bail!("no images in {}", dir.display());
    }
    samples
        .into_iter()
        .map(|s| {
            let target = match config.label_source {
                LabelSource::Pseudo => s.labels,
                LabelSource::Truth => s.truth,
            }
            .with_context(|| format!("sample {} lacks {:?} labels", s.id, config.label_source))?;
            let (image, target) = match config.resize {
                Some([h, w]) => (s.image.resize_bilinear(h, w), target.resize_nearest(h, w)),
                None => (s.image, target),
            };
            Ok(TrainSample { id: s.id, image, target })
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let config = resolve_run_config(&a)?;
    echo("run config", &config);
    let data = load_training_set(&config)?;
    let t = train::train_to_dir(config, &data, &a.out, a.resume)?;
    eprintln!("trained {} epochs ({} steps); outputs in {}", t.epochs_done, t.global_step, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let config: Option<RunConfig> = a.config.as_deref().map(read_json).transpose()?;
    let resize = config.as_ref().and_then(|c| c.resize);
    let samples = synth::load_dataset(&a.data)?;
    let dataset = a.data.display().to_string();
    let (default_method, per_image) = if let Some(ck) = &a.checkpoint {
        let params = checkpoint::load(ck, config.as_ref().map(|c| &c.model))?;
        echo("model config", &params.config);
        ("model".to_string(), eval::evaluate_model(&params, &samples, resize)?)
    } else if let Some(d) = &a.pred_dir {
        ("masks".to_string(), eval::evaluate_masks(d, &samples)?)
    } else if a.pseudo_labels {
        ("pseudo-labels".to_string(), eval::evaluate_labels(&samples)?)
    } else {
        bail!("one of --checkpoint, --pred-dir or --pseudo-labels is required");
    };
    let report = MetricsReport::new(a.method.unwrap_or(default_method), dataset, per_image)?;
    let g = &report.aggregate;
    eprintln!(
        "{}: DC {:.4} ± {:.4}  P {:.4} ± {:.4}  R {:.4} ± {:.4}  (n={})",
        report.method,
        g.dice.mean,
        g.dice.std,
        g.precision.mean,
        g.precision.std,
        g.recall.mean,
        g.recall.std,
        report.per_image.len()
    );
    write_json(a.out.as_deref(), &report)
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let config: Option<RunConfig> = a.config.as_deref().map(read_json).transpose()?;
    let params = checkpoint::load(&a.checkpoint, config.as_ref().map(|c| &c.model))?;
    echo("model config", &params.config);
    let image = pgm::read_image(&a.input)?;
    let (mask, fg) = eval::predict_mask(&params, &image, config.and_then(|c| c.resize))?;
    pgm::write_mask(&a.out, &mask)?;
    if let Some(p) = &a.prob {
        pgm::write_image(p, &Image::new(image.height, image.width, fg)?)?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let ra: MetricsReport = read_json(&a.report_a)?;
    let rb: MetricsReport = read_json(&a.report_b)?;
    let c = eval::compare(&ra, &rb)?;
    eprintln!(
        "{} vs {}: mean dice difference {:+.4}, W = {}, p = {:.3e} ({:?}, n = {})",
        c.method_a, c.method_b, c.mean_dice_difference, c.dice_test.statistic, c.dice_test.p_value, c.dice_test.method, c.dice_test.n_effective
    );
    write_json(a.out.as_deref(), &c)
}
