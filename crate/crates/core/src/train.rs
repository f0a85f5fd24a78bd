//! Run configuration and the epoch-based training loop.
//!
//! A run writes into one output directory:
//!
//! * `loss.csv`: one row per optimizer step (`step,epoch,loss,loss_mag,loss_ri`);
//! * `epochs.csv`: one row per finished epoch with its mean loss and wall-clock seconds;
//! * `epoch_NNN.tbse`: a checkpoint after every epoch;
//! * `last.tbse`: the state when the loop stops.
//!
//! Checkpoints carry the full run configuration and the global step next to
//! the Adam moments, so a run resumed from any of them continues exactly as
//! the uninterrupted run would have.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twinspec_nn::{Adam, Checkpoint};

use crate::data::make_batch;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{LossConfig, LossValues, ModelConfig, SpectralBatch, TwoBranchModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    /// Stops the loop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 2, lr: 2e-4, seed: 0, max_steps: None }
    }
}

/// Everything a training run needs besides its data.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

const RUN_KEYS: &[&str] = &[
    "loss.alpha",
    "loss.mask_padding",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.seed",
    "train.max_steps",
];

const STATE_STEP: &str = "state.step";

impl RunConfig {
    /// Reads a flat `key=value` config. Keys take the forms `model.*`,
    /// `stft.*`, `loss.*` and `train.*`; unknown keys are rejected and
    /// missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(RUN_KEYS, &["model.", "stft."])?;
        let d = RunConfig::default();
        let cfg = RunConfig {
            model: ModelConfig::from_meta(kv)?,
            loss: LossConfig {
                alpha: kv.get("loss.alpha")?.unwrap_or(d.loss.alpha),
                mask_padding: kv.get("loss.mask_padding")?.unwrap_or(d.loss.mask_padding),
            },
            train: TrainConfig {
                epochs: kv.get("train.epochs")?.unwrap_or(d.train.epochs),
                batch_size: kv.get("train.batch_size")?.unwrap_or(d.train.batch_size),
                lr: kv.get("train.lr")?.unwrap_or(d.train.lr),
                seed: kv.get("train.seed")?.unwrap_or(d.train.seed),
                max_steps: kv.get("train.max_steps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_meta();
        kv.set("loss.alpha", self.loss.alpha);
        kv.set("loss.mask_padding", self.loss.mask_padding);
        kv.set("train.epochs", self.train.epochs);
        kv.set("train.batch_size", self.train.batch_size);
        kv.set("train.lr", self.train.lr);
        kv.set("train.seed", self.train.seed);
        if let Some(m) = self.train.max_steps {
            kv.set("train.max_steps", m);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.max_steps == Some(0) {
            return Err(Error::Config("train.max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One clean/noisy training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub clean: Vec<f32>,
    pub noisy: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Checkpoint written by an earlier run of the same configuration.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Global step count when the loop stopped.
    pub steps: u64,
    /// Losses of the steps run by this call.
    pub losses: Vec<LossValues>,
    pub last_checkpoint: PathBuf,
}

const LOSS_HEADER: &str = "step,epoch,loss,loss_mag,loss_ri";
const EPOCH_HEADER: &str = "epoch,step,mean_loss,seconds";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{:03}.tbse", epoch + 1)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

fn spectral_pair(cfg: &ModelConfig, items: &[&Example]) -> Result<(SpectralBatch<f32>, SpectralBatch<f32>)> {
    let noisy: Vec<&[f32]> = items.iter().map(|e| e.noisy.as_slice()).collect();
    let clean: Vec<&[f32]> = items.iter().map(|e| e.clean.as_slice()).collect();
    Ok((
        SpectralBatch::from_batch(&make_batch(&noisy, &cfg.stft)?)?,
        SpectralBatch::from_batch(&make_batch(&clean, &cfg.stft)?)?,
    ))
}

/// Keeps the rows of an existing CSV log whose first column is at most
/// `keep_upto`, so a resumed run appends where the checkpoint left off.
fn truncate_log(path: &Path, header: &str, keep_upto: u64) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut kept = Vec::new();
    for line in text.lines().skip(1) {
        let key: u64 = line
            .split(',')
            .next()
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: malformed row '{line}'", path.display())))?;
        if key <= keep_upto {
            kept.push(line.to_string());
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for line in &kept {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(kept)
}

fn open_append(path: &Path) -> Result<File> {
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

fn write_checkpoint(model: &TwoBranchModel<f32>, cfg: &RunConfig, step: u64, path: &Path) -> Result<()> {
    let mut meta = cfg.to_kv();
    meta.set(STATE_STEP, step);
    model.to_checkpoint(Some(&meta)).save(path)?;
    Ok(())
}

/// Loads a training checkpoint and checks that it belongs to a run with
/// the same model, loss, batching, learning rate and shuffling seed.
fn load_resume(path: &Path, cfg: &RunConfig) -> Result<(TwoBranchModel<f32>, u64)> {
    let (model, mut meta) = TwoBranchModel::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
    let step: u64 = meta
        .remove(STATE_STEP)
        .ok_or_else(|| Error::Format(format!("{} is not a training checkpoint", path.display())))?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad {STATE_STEP}", path.display())))?;
    let saved = RunConfig::from_kv(&meta)?;
    let same = saved.model == cfg.model
        && saved.loss == cfg.loss
        && saved.train.batch_size == cfg.train.batch_size
        && saved.train.lr == cfg.train.lr
        && saved.train.seed == cfg.train.seed;
    if !same {
        return Err(Error::Config(format!(
            "{} was written with a different configuration",
            path.display()
        )));
    }
    if model.params().step() != step {
        return Err(Error::Format(format!(
            "{}: optimizer step {} disagrees with {STATE_STEP}={step}",
            path.display(),
            model.params().step()
        )));
    }
    Ok((model, step))
}

/// Trains for `cfg.train.epochs` epochs (or until `max_steps`), shuffling
/// the examples with a per-epoch seeded permutation. The last batch of an
/// epoch may be smaller than `batch_size`.
///
/// A non-finite loss or parameter aborts the run with a numeric error; the
/// offending step and utterance ids are also written to
/// `nonfinite_step<N>.txt` in the output directory.
pub fn train_loop(
    cfg: &RunConfig,
    data: &[Example],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(e) = data.iter().find(|e| e.clean.len() != e.noisy.len()) {
        return Err(Error::Dimension(format!(
            "{}: clean has {} samples, noisy {}",
            e.id,
            e.clean.len(),
            e.noisy.len()
        )));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let loss_path = opts.out_dir.join("loss.csv");
    let epoch_path = opts.out_dir.join("epochs.csv");

    let bs = cfg.train.batch_size;
    let per_epoch = data.len().div_ceil(bs) as u64;
    let mut total = cfg.train.epochs as u64 * per_epoch;
    if let Some(m) = cfg.train.max_steps {
        total = total.min(m);
    }

    let (mut model, mut step) = match &opts.resume {
        Some(path) => load_resume(path, cfg)?,
        None => (TwoBranchModel::<f32>::new(cfg.model)?, 0),
    };
    let kept = truncate_log(&loss_path, LOSS_HEADER, step)?;
    truncate_log(&epoch_path, EPOCH_HEADER, step / per_epoch)?;
    // Steps of a partly finished epoch that precede the resume point.
    let mut epoch_sum: f64 = kept
        .iter()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let s: u64 = f.first()?.parse().ok()?;
            (s > step / per_epoch * per_epoch).then(|| f.get(2)?.parse::<f64>().ok()).flatten()
        })
        .sum();
    let mut loss_log = BufWriter::new(open_append(&loss_path)?);
    let mut epoch_log = open_append(&epoch_path)?;

    let adam = Adam::default();
    let mut losses = Vec::new();
    let mut clock = Instant::now();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while step < total {
        let epoch = (step / per_epoch) as usize;
        if epoch != order_epoch {
            order = epoch_order(data.len(), cfg.train.seed, epoch);
            order_epoch = epoch;
        }
        let pos = (step % per_epoch) as usize * bs;
        let items: Vec<&Example> = order[pos..(pos + bs).min(data.len())].iter().map(|&i| &data[i]).collect();
        let (noisy, clean) = spectral_pair(&cfg.model, &items)?;
        let values = match model.train_step(&noisy, &clean, &cfg.loss, &adam, cfg.train.lr) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                loss_log.flush()?;
                let ids: Vec<&str> = items.iter().map(|e| e.id.as_str()).collect();
                let dump = opts.out_dir.join(format!("nonfinite_step{}.txt", step + 1));
                fs::write(
                    &dump,
                    format!("step={}\nepoch={}\nutterances={}\nerror={e}\n", step + 1, epoch + 1, ids.join(",")),
                )?;
                return Err(Error::Numeric(format!(
                    "step {} on batch [{}]: {e} (details in {})",
                    step + 1,
                    ids.join(", "),
                    dump.display()
                )));
            }
            Err(e) => return Err(e),
        };
        step += 1;
        losses.push(values);
        epoch_sum += values.total;
        writeln!(loss_log, "{step},{},{},{},{}", epoch + 1, values.total, values.mag, values.ri)?;
        if step % per_epoch == 0 {
            loss_log.flush()?;
            let checkpoint = opts.out_dir.join(epoch_checkpoint_name(epoch));
            write_checkpoint(&model, cfg, step, &checkpoint)?;
            let summary = EpochSummary {
                epoch,
                step,
                mean_loss: epoch_sum / per_epoch as f64,
                seconds: clock.elapsed().as_secs_f64(),
                checkpoint,
            };
            writeln!(
                epoch_log,
                "{},{},{},{:.3}",
                epoch + 1,
                step,
                summary.mean_loss,
                summary.seconds
            )?;
            on_epoch(&summary);
            epoch_sum = 0.0;
            clock = Instant::now();
        }
    }
    loss_log.flush()?;
    let last_checkpoint = opts.out_dir.join("last.tbse");
    write_checkpoint(&model, cfg, step, &last_checkpoint)?;
    Ok(TrainReport { steps: step, losses, last_checkpoint })
}
