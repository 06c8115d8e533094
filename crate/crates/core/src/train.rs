//! Run configuration, Adam, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::{self, put_tensor, put_u32, Reader};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::seed::{derive_seed, streams};
use crate::spatial_loss::{self, LossBreakdown, SpatialLossConfig};
use crate::tensor::Tensor;
use crate::unet::{self, init_params, ModelParams, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Cross entropy plus `lambda` times the pairwise term.
    #[default]
    Spatial,
    /// Cross entropy only; the pairwise term is still computed for the log.
    CeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    #[default]
    Pseudo,
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub loss: SpatialLossConfig,
    pub loss_mode: LossMode,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_source: LabelSource,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Resize inputs to `[height, width]` (bilinear for images, nearest for labels).
    pub resize: Option<[usize; 2]>,
    /// Record elapsed seconds in the log; when off the column is written as 0.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: UNetConfig::default(),
            loss: SpatialLossConfig::default(),
            loss_mode: LossMode::Spatial,
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 1,
            seed: 0,
            label_source: LabelSource::Pseudo,
            train_dir: None,
            test_dir: None,
            resize: None,
            log_wall_time: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(Error::invalid("run config", format!("lr must be > 0, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::invalid("run config", "adam betas must be in [0,1) and eps > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("run config", "epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("run config", "batch_size must be >= 1"));
        }
        if let Some([h, w]) = self.resize {
            self.model.check_input(h, w)?;
        }
        Ok(())
    }

    /// Weight applied to the pairwise term in the optimized objective.
    pub fn effective_lambda(&self) -> f64 {
        match self.loss_mode {
            LossMode::Spatial => self.loss.lambda,
            LossMode::CeOnly => 0.0,
        }
    }
}

// ---- Adam -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments, one slot per parameter (running stats included, never touched).
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. `grads` pairs parameter indices with
/// gradients; all are checked for finiteness before anything changes.
pub fn adam_step(params: &mut ModelParams, grads: &[(usize, Vec<f64>)], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    for (i, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.params[*i].name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, g) in grads {
        let theta = params.params[*i].value.data_mut();
        let (m, v) = (&mut state.m[*i], &mut state.v[*i]);
        for k in 0..g.len() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            theta[k] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

// ---- log ------------------------------------------------------------------

pub const LOG_HEADER: &str = "epoch,step,unary,pairwise,total,wall_time";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub wall_time: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:.3}",
            self.epoch, self.step, self.loss.unary, self.loss.pairwise, self.loss.total, self.wall_time
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Dataset(format!("malformed log row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            loss: LossBreakdown { unary: num(f[2])?, pairwise: num(f[3])?, total: num(f[4])? },
            wall_time: num(f[5])?,
        })
    }
}

// ---- training -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Image,
    pub target: LabelMap,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.model, derive_seed(config.seed, streams::INIT, 0))?;
        let adam = AdamState::new(&params);
        Ok(Trainer { config, params, adam, epochs_done: 0, global_step: 0 })
    }

    /// Forward, loss, backward for one sample; returns the breakdown and
    /// the trainable-parameter gradients.
    pub fn sample_gradients(&mut self, sample: &TrainSample, dropout_seed: u64) -> Result<(LossBreakdown, Vec<(usize, Vec<f64>)>)> {
        let mut tape = Tape::new(dropout_seed);
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(sample.image.to_tensor());
        let out = unet::forward(&self.params, &bound, x, Mode::Train, &mut tape)?;
        let breakdown = match self.config.loss_mode {
            LossMode::Spatial => {
                let lv = spatial_loss::total_loss(&mut tape, out.probs, &sample.target, &sample.image, &self.config.loss)?;
                tape.backward(lv.total)?;
                lv.breakdown
            }
            LossMode::CeOnly => {
                let unary = tape.cross_entropy_mean(out.probs, &sample.target)?;
                tape.backward(unary)?;
                let (_, field) = spatial_loss::pairwise_field(tape.value(out.probs), &sample.image, &self.config.loss)?;
                let pairwise = spatial_loss::reduce(&field.psi, self.config.loss.pairwise_reduction);
                let u = tape.value(unary).item();
                LossBreakdown { unary: u, pairwise, total: u + 0.0 * pairwise }
            }
        };
        let grads = self.params.gradients(&tape, &bound);
        self.params.apply_running_stats(&out.running_updates);
        Ok((breakdown, grads))
    }

    /// One optimizer step over `batch` (gradients averaged).
    pub fn step(&mut self, batch: &[&TrainSample]) -> Result<LossBreakdown> {
        let mut acc: Option<Vec<(usize, Vec<f64>)>> = None;
        let (mut u, mut p) = (0.0, 0.0);
        for (k, sample) in batch.iter().enumerate() {
            let seed = derive_seed(self.config.seed, streams::DROPOUT, self.global_step * self.config.batch_size as u64 + k as u64);
            let (b, g) = self.sample_gradients(sample, seed)?;
            u += b.unary;
            p += b.pairwise;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for ((_, ga), (_, gb)) in a.iter_mut().zip(&g) {
                        ga.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = acc.ok_or_else(|| Error::invalid("train step", "empty batch"))?;
        let n = batch.len() as f64;
        if batch.len() > 1 {
            grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v /= n));
            u /= n;
            p /= n;
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.config.optimizer)?;
        self.global_step += 1;
        Ok(LossBreakdown { unary: u, pairwise: p, total: u + self.config.effective_lambda() * p })
    }

    /// Seeded shuffle of `0..n` for `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, streams::SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// Runs epochs `epochs_done..config.epochs`, calling `on_row` after each
    /// step and `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        data: &[TrainSample],
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        for s in data {
            self.config.model.check_input(s.image.height, s.image.width)?;
        }
        let start = Instant::now();
        while self.epochs_done < self.config.epochs {
            let epoch = self.epochs_done;
            let order = self.epoch_order(epoch, data.len());
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
                let loss = self.step(&batch)?;
                let wall_time = if self.config.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
                on_row(&LogRow { epoch: epoch + 1, step: self.global_step, loss, wall_time })?;
            }
            self.epochs_done += 1;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Fraction of pixels where the eval-mode prediction equals `target`.
pub fn pixel_accuracy(params: &ModelParams, image: &Image, target: &LabelMap) -> Result<f64> {
    let (pred, _) = unet::predict(params, image)?;
    let hits = pred.data.iter().zip(&target.data).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / target.len() as f64)
}

// ---- resume state ---------------------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"SCDS";
const STATE_VERSION: u32 = 1;

pub fn encode_state(trainer: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    put_u32(&mut buf, STATE_VERSION);
    buf.extend_from_slice(&(trainer.epochs_done as u64).to_le_bytes());
    buf.extend_from_slice(&trainer.global_step.to_le_bytes());
    buf.extend_from_slice(&trainer.adam.t.to_le_bytes());
    for (p, (m, v)) in trainer.params.params.iter().zip(trainer.adam.m.iter().zip(&trainer.adam.v)) {
        let shape = p.value.shape().to_vec();
        put_tensor(&mut buf, &format!("m.{}", p.name), &Tensor::new(shape.clone(), m.clone()).expect("moment shape"));
        put_tensor(&mut buf, &format!("v.{}", p.name), &Tensor::new(shape, v.clone()).expect("moment shape"));
    }
    buf
}

/// Restores optimizer moments and counters into `trainer`.
pub fn decode_state(bytes: &[u8], trainer: &mut Trainer) -> Result<()> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != STATE_MAGIC {
        return Err(Error::Checkpoint("bad training-state magic".into()));
    }
    if r.u32()? != STATE_VERSION {
        return Err(Error::Checkpoint("unsupported training-state version".into()));
    }
    let epochs_done = r.u64()? as usize;
    let global_step = r.u64()?;
    let t = r.u64()?;
    let mut adam = AdamState::new(&trainer.params);
    for (i, p) in trainer.params.params.iter().enumerate() {
        for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let (name, tensor) = r.tensor()?;
            if name != format!("{prefix}.{}", p.name) || tensor.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("training state entry `{name}` does not match `{}`", p.name)));
            }
            *slot = tensor.into_data();
        }
    }
    r.finish()?;
    adam.t = t;
    trainer.adam = adam;
    trainer.epochs_done = epochs_done;
    trainer.global_step = global_step;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "train_state.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "run_config.json";

/// Trains on `data`, writing checkpoint, resume state, config echo and CSV
/// log into `out_dir` (checkpoint and state after every epoch). With
/// `resume`, picks up from the state stored in `out_dir`.
pub fn train_to_dir(config: RunConfig, data: &[TrainSample], out_dir: &Path, resume: bool) -> Result<Trainer> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(config)?;
    let log_path = out_dir.join(LOG_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let state_path = out_dir.join(STATE_FILE);
    if resume {
        trainer.params = checkpoint::load(&ckpt_path, Some(&trainer.config.model))?;
        let bytes = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
        decode_state(&bytes, &mut trainer)?;
    }
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(&trainer.config)?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut log = if resume {
        fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        f
    };
    trainer.run(
        data,
        |row| writeln!(log, "{}", row.csv()).map_err(|e| Error::io(&log_path, e)),
        |t| {
            checkpoint::save(&t.params, &ckpt_path)?;
            fs::write(&state_path, encode_state(t)).map_err(|e| Error::io(&state_path, e))
        },
    )?;
    Ok(trainer)
}
