//! Joint optimisation of both networks, in standard or cooperative mode.
//!
//! Randomness is derived from the seed and the epoch (batch order) or the
//! seed, epoch and sample index (hard examples), so a run resumed from a
//! saved state continues exactly as the unbroken run would have.

mod adam;
mod state;

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_gradients, LossWeights, Pair, COMPONENTS, STANDARD_TERMS};
use crate::masking::{generate_hard_example, HardExample, MaskConfig};
use crate::metrics::{evaluate, Stage};
use crate::networks::{write_checkpoint, ArchConfig, ModelBundle};
use crate::synthdata::Dataset;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use state::{read_state, write_state, STATE_MAGIC, STATE_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Cooperative,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Cooperative => "cooperative",
        }
    }

    pub fn components(self) -> &'static [&'static str] {
        match self {
            Mode::Standard => &COMPONENTS[..STANDARD_TERMS],
            Mode::Cooperative => &COMPONENTS,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "cooperative" => Ok(Mode::Cooperative),
            _ => Err(Error::contract(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub arch: ArchConfig,
    pub adam: AdamConfig,
    /// Clamped to the dataset size; incomplete trailing batches are dropped.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub weights: LossWeights,
    /// Save model and optimiser state every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Score the validation set every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Standard,
            arch: ArchConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 20,
            epochs: 200,
            seed: 0,
            mask: MaskConfig::default(),
            weights: LossWeights::default(),
            checkpoint_every: 50,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.mask.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::contract(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// One optimiser step as it appears in the step log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mode: Mode,
    pub components: Vec<(&'static str, f64)>,
    pub total: f64,
    pub wall_ms: u64,
}

pub fn step_log_header(mode: Mode) -> String {
    let mut h = String::from("step,epoch,mode");
    for c in mode.components() {
        h.push(',');
        h.push_str(c);
    }
    h.push_str(",total,wall_ms");
    h
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.epoch, self.mode.name());
        for (_, v) in &self.components {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{},{}", self.total, self.wall_ms);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestVal {
    pub epoch: usize,
    pub dice: f64,
}

/// Training progress; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best: Option<BestVal>,
}

/// Files written into a training output directory.
pub mod files {
    pub const LAST: &str = "last.ckpt";
    pub const FINAL: &str = "final.ckpt";
    pub const BEST: &str = "best_val.ckpt";
    pub const STATE: &str = "state.bin";
    pub const LOG: &str = "steps.csv";
}

fn epoch_rng(seed: u64, epoch: usize, tag: u8) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16] = tag;
    ChaCha8Rng::from_seed(key)
}

/// Hard-example stream of one sample in one epoch.
pub fn hard_example_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = epoch_rng(seed, epoch, 1);
    rng.set_stream(sample as u64);
    rng
}

/// Batches of sample indices for one epoch.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    let b = batch_size.min(n).max(1);
    order.chunks_exact(b).map(|c| c.to_vec()).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::new(config.arch.clone(), config.seed)?;
        let adam = AdamState::new(&bundle);
        Ok(Trainer {
            config,
            bundle,
            adam,
            epoch: 0,
            step: 0,
            best: None,
        })
    }

    /// One optimiser step on the given samples.
    pub fn train_step(&mut self, pairs: &[Pair], indices: &[usize]) -> Result<StepRecord> {
        let start = Instant::now();
        let batch: Vec<Pair> = indices.iter().map(|&i| pairs[i].clone()).collect();
        let hard: Option<Vec<HardExample>> = match self.config.mode {
            Mode::Standard => None,
            Mode::Cooperative => Some(
                indices
                    .iter()
                    .map(|&i| {
                        let mut rng = hard_example_rng(self.config.seed, self.epoch, i);
                        generate_hard_example(&self.bundle, &pairs[i].x, &pairs[i].y, &self.config.mask, &mut rng)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let bg = batch_gradients(&self.bundle, &batch, hard.as_deref(), &self.config.weights)?;
        if !bg.report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at step {}", bg.report.total, self.step + 1)));
        }
        for (p, g) in self.bundle.params().iter().zip(&bg.grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {} at step {}", p.name, self.step + 1)));
                }
            }
        }
        adam_step(&mut self.bundle, &bg.grads, &mut self.adam, &self.config.adam)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            mode: self.config.mode,
            components: bg.report.components,
            total: bg.report.total,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs the next epoch and returns its step records.
    pub fn train_epoch(&mut self, pairs: &[Pair]) -> Result<Vec<StepRecord>> {
        if pairs.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let batches = epoch_batches(self.config.seed, self.epoch, pairs.len(), self.config.batch_size);
        let mut log = Vec::with_capacity(batches.len());
        for b in batches {
            log.push(self.train_step(pairs, &b)?);
        }
        self.epoch += 1;
        Ok(log)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(&dir.join(files::LAST), &self.bundle)?;
        write_state(&dir.join(files::STATE), self)
    }

    /// Continues from the state saved in `dir`.
    pub fn resume(dir: &Path) -> Result<Self> {
        read_state(&dir.join(files::STATE), &dir.join(files::LAST))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<StepRecord>,
    pub best_bundle: Option<ModelBundle>,
}

/// Trains until `trainer.config.epochs` epochs are complete.
///
/// With an output directory the step log is appended to `steps.csv` and the
/// model and optimiser state are saved every `checkpoint_every` epochs, so a
/// non-finite loss leaves the last good checkpoint in place.
pub fn run(mut trainer: Trainer, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<TrainOutcome> {
    let pairs = train.pairs()?;
    let mut log_file = match out {
        Some(dir) => Some(open_log(dir, trainer.config.mode, trainer.step)?),
        None => None,
    };
    let mut log = Vec::new();
    let mut best_bundle = None;
    let cfg = trainer.config.clone();
    while trainer.epoch < cfg.epochs {
        let records = trainer.train_epoch(&pairs)?;
        if let Some(f) = log_file.as_mut() {
            for r in &records {
                writeln!(f, "{}", r.csv_row())?;
            }
            f.flush()?;
        }
        log.extend(records);
        let e = trainer.epoch;
        if let Some(val) = val {
            if cfg.eval_every > 0 && (e % cfg.eval_every == 0 || e == cfg.epochs) {
                let d = evaluate(&trainer.bundle, val, "val", Stage::FtnStn)?.mean_foreground();
                if trainer.best.as_ref().map_or(true, |b| d > b.dice) {
                    trainer.best = Some(BestVal { epoch: e, dice: d });
                    if let Some(dir) = out {
                        write_checkpoint(&dir.join(files::BEST), &trainer.bundle)?;
                    }
                    best_bundle = Some(trainer.bundle.clone());
                }
            }
        }
        if let Some(dir) = out {
            if (cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0) || e == cfg.epochs {
                trainer.save(dir)?;
            }
        }
    }
    if let Some(dir) = out {
        write_checkpoint(&dir.join(files::FINAL), &trainer.bundle)?;
    }
    Ok(TrainOutcome {
        trainer,
        log,
        best_bundle,
    })
}

/// Opens the step log, truncating rows past `step` so a resumed run does not
/// duplicate steps written after its last checkpoint.
fn open_log(dir: &Path, mode: Mode, step: u64) -> Result<File> {
    fs::create_dir_all(dir)?;
    let path: PathBuf = dir.join(files::LOG);
    let header = step_log_header(mode);
    if step > 0 && path.exists() {
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        if lines.next() != Some(header.as_str()) {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} has a different header", path.display()),
            });
        }
        let mut kept = header.clone();
        kept.push('\n');
        for l in lines.take(step as usize) {
            kept.push_str(l);
            kept.push('\n');
        }
        fs::write(&path, kept)?;
        return Ok(OpenOptions::new().append(true).open(&path)?);
    }
    let mut f = File::create(&path)?;
    writeln!(f, "{header}")?;
    Ok(f)
}
