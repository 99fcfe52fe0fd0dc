//! Training loop, validation, loss logging and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_random_watermark, load_covers, load_watermarks};
use crate::error::{Error, Result};
use crate::net::{ModelConfig, WatermarkingModel, DEFAULT_REDUNDANCY};
use crate::objective::{batch_gradients, evaluate, LossBreakdown, LossWeights};
use crate::tensor::{AdamConfig, AdamState, Tensor};

/// How watermarks are matched with covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every epoch, each cover draws a watermark uniformly at random.
    #[default]
    Random,
    /// Cover i always carries watermark i (modulo the watermark count), and
    /// batches visit the covers in index order every epoch.
    Fixed,
}

fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    4
}
fn default_learning_rate() -> f64 {
    AdamConfig::default().learning_rate
}
fn default_redundancy() -> usize {
    DEFAULT_REDUNDANCY
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub cover_dir: PathBuf,
    /// Without a watermark directory every cover gets a seeded random watermark.
    #[serde(default)]
    pub watermark_dir: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to one pass over the training pairs.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_redundancy")]
    pub redundancy: usize,
    /// `false` trains the ablation model without the invariance layer (N = 3).
    #[serde(default = "default_true")]
    pub invariance: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub validation_fraction: f64,
    #[serde(default)]
    pub pairing: Pairing,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Store ADAM moments in the checkpoint.
    #[serde(default)]
    pub save_optimizer: bool,
    /// Continue from a checkpoint (its parameters, optimizer state and step).
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for everything except the paths.
    pub fn new(cover_dir: impl Into<PathBuf>, checkpoint_path: impl Into<PathBuf>, log_path: impl Into<PathBuf>) -> Self {
        TrainConfig {
            cover_dir: cover_dir.into(),
            watermark_dir: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            steps_per_epoch: None,
            learning_rate: default_learning_rate(),
            weights: LossWeights::default(),
            redundancy: default_redundancy(),
            invariance: true,
            seed: 0,
            validation_fraction: 0.0,
            pairing: Pairing::Random,
            checkpoint_path: checkpoint_path.into(),
            log_path: log_path.into(),
            save_optimizer: false,
            resume: None,
        }
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        if self.invariance {
            ModelConfig {
                redundancy: self.redundancy,
                ..ModelConfig::default()
            }
        } else {
            ModelConfig::without_invariance()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        if !self.invariance && self.redundancy != DEFAULT_REDUNDANCY && self.redundancy != 3 {
            return Err(Error::invalid("a model without invariance layer always uses N = 3"));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    /// Where the best-validation checkpoint goes: `model.ckpt` → `model.best.ckpt`.
    pub fn best_checkpoint_path(&self) -> PathBuf {
        let p = &self.checkpoint_path;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let name = match p.extension().and_then(|e| e.to_str()) {
            Some(ext) => format!("{stem}.best.{ext}"),
            None => format!("{stem}.best"),
        };
        p.with_file_name(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Validation => "validation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub phase: Phase,
}

pub const LOG_HEADER: &str = "step,extraction,fidelity,information,penalty,total,objective,phase";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.loss.csv_fields(), r.phase.name());
    }
    out
}

/// In-memory training state. Datasets are given as tensors; [`train`] wraps
/// this with directory loading and file output.
pub struct Trainer {
    config: TrainConfig,
    model: WatermarkingModel,
    adam: AdamState,
    covers: Vec<Tensor>,
    watermarks: Vec<Tensor>,
    train_idx: Vec<usize>,
    validation: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
    /// Remaining (cover, watermark) pairs of the current epoch schedule.
    schedule: Vec<(usize, usize)>,
    cursor: usize,
    step: u64,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, covers: Vec<Tensor>, watermarks: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if covers.is_empty() {
            return Err(Error::EmptyDataset("no covers".into()));
        }
        if watermarks.is_empty() {
            return Err(Error::EmptyDataset("no watermarks".into()));
        }
        let mc = config.model_config();
        for c in &covers {
            if c.shape() != mc.cover_shape() {
                return Err(Error::shape("Trainer::new cover", c.shape(), &mc.cover_shape()));
            }
        }
        for w in &watermarks {
            if w.shape() != mc.watermark_shape() {
                return Err(Error::shape("Trainer::new watermark", w.shape(), &mc.watermark_shape()));
            }
        }
        let (model, adam, step) = match &config.resume {
            Some(path) => {
                let ckpt = Checkpoint::load(path)?;
                if *ckpt.model.config() != mc {
                    return Err(Error::invalid(format!(
                        "{} holds {:?}, config asks for {mc:?}",
                        path.display(),
                        ckpt.model.config()
                    )));
                }
                let adam = ckpt.adam.clone().unwrap_or_else(|| {
                    AdamState::new(ckpt.model.params(), adam_config(config))
                });
                (ckpt.model, adam, ckpt.step)
            }
            None => {
                let model = WatermarkingModel::new(mc, config.seed)?;
                let adam = AdamState::new(model.params(), adam_config(config));
                (model, adam, 0)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..covers.len()).collect();
        let n_val = (config.validation_fraction * covers.len() as f64).floor() as usize;
        if n_val > 0 {
            order.shuffle(&mut rng);
        }
        if n_val == covers.len() {
            return Err(Error::EmptyDataset("validation split leaves no training covers".into()));
        }
        let validation = order[..n_val]
            .iter()
            .map(|&c| (c, pick_watermark(config.pairing, c, watermarks.len(), &mut rng)))
            .collect();
        let mut train_idx = order[n_val..].to_vec();
        train_idx.sort_unstable();
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            covers,
            watermarks,
            train_idx,
            validation,
            rng,
            schedule: Vec::new(),
            cursor: 0,
            step,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &WatermarkingModel {
        &self.model
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| self.train_idx.len().div_ceil(self.config.batch_size))
    }

    /// (watermark, cover) pairs used for training, in cover order, under
    /// fixed pairing. Random pairing has no fixed pairs.
    pub fn training_pairs(&self) -> Vec<(Tensor, Tensor)> {
        self.train_idx
            .iter()
            .map(|&c| (self.watermarks[c % self.watermarks.len()].clone(), self.covers[c].clone()))
            .collect()
    }

    pub fn validation_pairs(&self) -> Vec<(Tensor, Tensor)> {
        self.validation
            .iter()
            .map(|&(c, w)| (self.watermarks[w].clone(), self.covers[c].clone()))
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let adam = self.config.save_optimizer.then(|| self.adam.clone());
        Checkpoint::new(self.model.clone(), adam, self.step)
    }

    /// A new epoch schedule: training covers with their watermarks, shuffled
    /// unless the pairing is fixed.
    fn start_epoch(&mut self) {
        let mut covers = self.train_idx.clone();
        if self.config.pairing == Pairing::Random {
            covers.shuffle(&mut self.rng);
        }
        let n_marks = self.watermarks.len();
        self.schedule = covers
            .into_iter()
            .map(|c| (c, pick_watermark(self.config.pairing, c, n_marks, &mut self.rng)))
            .collect();
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        if self.schedule.is_empty() {
            self.start_epoch();
        }
        (0..self.config.batch_size)
            .map(|_| {
                let pair = self.schedule[self.cursor % self.schedule.len()];
                self.cursor += 1;
                pair
            })
            .collect()
    }

    /// One ADAM step on the next batch of the schedule.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch();
        let pairs: Vec<(&Tensor, &Tensor)> = batch
            .iter()
            .map(|&(c, w)| (&self.watermarks[w], &self.covers[c]))
            .collect();
        let (grads, loss) = batch_gradients(&self.model, &pairs, &self.config.weights)?;
        let step = self.step + 1;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                breakdown: loss.to_string(),
            });
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step = step;
        self.log.push(LogRow {
            step,
            loss,
            phase: Phase::Train,
        });
        Ok(loss)
    }

    /// Mean loss over the validation pairs, without touching any parameter.
    pub fn validate(&self) -> Result<Option<LossBreakdown>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let parts: Vec<Result<LossBreakdown>> = self
            .validation
            .par_iter()
            .map(|&(c, w)| evaluate(&self.model, &self.watermarks[w], &self.covers[c], &self.config.weights))
            .collect();
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Some(LossBreakdown::mean(&parts, &self.config.weights)))
    }

    /// Runs one epoch and its validation pass; returns the validation loss.
    pub fn run_epoch(&mut self) -> Result<Option<LossBreakdown>> {
        self.start_epoch();
        for _ in 0..self.steps_per_epoch() {
            self.train_step()?;
        }
        self.schedule.clear();
        let val = self.validate()?;
        if let Some(loss) = val {
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step as usize,
                    breakdown: loss.to_string(),
                });
            }
            self.log.push(LogRow {
                step: self.step,
                loss,
                phase: Phase::Validation,
            });
        }
        Ok(val)
    }
}

fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    }
}

fn pick_watermark(pairing: Pairing, cover: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    match pairing {
        Pairing::Fixed => cover % n,
        Pairing::Random => rng.random_range(0..n),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last_train: Option<LossBreakdown>,
    /// Epoch (1-based) and loss of the best validation pass.
    pub best_validation: Option<(usize, LossBreakdown)>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the datasets named by `config` and trains for `config.epochs`
/// epochs. The final checkpoint goes to `checkpoint_path`, the best
/// validation checkpoint (when validating) to [`TrainConfig::best_checkpoint_path`],
/// and the loss log to `log_path` after every epoch.
pub fn train(config: &TrainConfig, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    config.validate()?;
    let covers = load_covers(&config.cover_dir)?;
    let watermarks = match &config.watermark_dir {
        Some(dir) => load_watermarks(dir)?,
        None => (0..covers.len() as u64)
            .map(|i| generate_random_watermark(config.seed.wrapping_add(i)))
            .collect(),
    };
    train_on(config, covers, watermarks, &mut progress)
}

/// [`train`] on in-memory datasets.
pub fn train_on(
    config: &TrainConfig,
    covers: Vec<Tensor>,
    watermarks: Vec<Tensor>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, covers, watermarks)?;
    write_text(&config.log_path, &log_csv(trainer.log()))?;
    let mut best: Option<(usize, LossBreakdown)> = None;
    for epoch in 1..=config.epochs {
        let val = trainer.run_epoch()?;
        let last = trainer.log().iter().rev().find(|r| r.phase == Phase::Train);
        let mut line = format!("epoch {epoch}/{} step {}", config.epochs, trainer.steps_taken());
        if let Some(r) = last {
            let _ = write!(line, " train objective {:.6}", r.loss.objective);
        }
        if let Some(v) = val {
            let _ = write!(line, " validation objective {:.6}", v.objective);
            if best.is_none_or(|(_, b)| v.objective < b.objective) {
                best = Some((epoch, v));
                trainer.checkpoint().save(&config.best_checkpoint_path())?;
                line.push_str(" (best)");
            }
        }
        progress(&line);
        write_text(&config.log_path, &log_csv(trainer.log()))?;
    }
    trainer.checkpoint().save(&config.checkpoint_path)?;
    Ok(TrainOutcome {
        steps: trainer.steps_taken(),
        last_train: trainer
            .log()
            .iter()
            .rev()
            .find(|r| r.phase == Phase::Train)
            .map(|r| r.loss),
        best_validation: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_cover;

    fn tiny(dir: &Path) -> TrainConfig {
        let mut c = TrainConfig::new(dir.join("covers"), dir.join("out/model.ckpt"), dir.join("out/log.csv"));
        c.batch_size = 2;
        c.seed = 5;
        c
    }

    fn data(n: usize) -> (Vec<Tensor>, Vec<Tensor>) {
        (
            (0..n as u64).map(|i| synthetic_cover(i, 128)).collect(),
            (0..n as u64).map(generate_random_watermark).collect(),
        )
    }

    #[test]
    fn config_json_defaults_and_errors() {
        let cfg = TrainConfig::from_json(
            r#"{"cover_dir":"c","checkpoint_path":"m.ckpt","log_path":"l.csv","epochs":3}"#,
            "cfg.json",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.redundancy, 12);
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.best_checkpoint_path(), PathBuf::from("m.best.ckpt"));
        let err = TrainConfig::from_json("{\"cover_dir\": \"c\",\n \"epochs\": }", "cfg.json").unwrap_err();
        assert!(matches!(err, Error::Json { line: 2, .. }), "{err}");
        assert!(err.is_usage());
        let err = TrainConfig::from_json(
            r#"{"cover_dir":"c","checkpoint_path":"m","log_path":"l","batch_size":0}"#,
            "cfg.json",
        )
        .unwrap_err();
        assert!(!err.is_usage());
        assert!(TrainConfig::from_json(r#"{"cover_dir":"c","checkpoint_path":"m","log_path":"l","bogus":1}"#, "x").is_err());
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.epochs = 0;
        let (c, w) = data(2);
        let out = train_on(&cfg, c, w, &mut |_| {}).unwrap();
        assert_eq!(out.steps, 0);
        let saved = std::fs::read(&cfg.checkpoint_path).unwrap();
        let init = Checkpoint::new(WatermarkingModel::new(cfg.model_config(), cfg.seed).unwrap(), None, 0);
        assert_eq!(saved, init.to_bytes());
        assert_eq!(std::fs::read_to_string(&cfg.log_path).unwrap(), format!("{LOG_HEADER}\n"));
    }

    #[test]
    fn validation_leaves_parameters_alone() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.validation_fraction = 0.5;
        let (c, w) = data(4);
        let t = Trainer::new(&cfg, c, w).unwrap();
        let before = t.checkpoint().to_bytes();
        let v = t.validate().unwrap().unwrap();
        assert!(v.is_finite());
        assert_eq!(t.checkpoint().to_bytes(), before);
        assert_eq!(t.validation_pairs().len(), 2);
    }

    #[test]
    fn short_run_is_deterministic_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.epochs = 2;
        cfg.steps_per_epoch = Some(1);
        cfg.validation_fraction = 0.34;
        cfg.save_optimizer = true;
        let (c, w) = data(3);
        let run = |cfg: &TrainConfig| {
            let out = train_on(cfg, c.clone(), w.clone(), &mut |_| {}).unwrap();
            (
                out,
                std::fs::read(&cfg.checkpoint_path).unwrap(),
                std::fs::read_to_string(&cfg.log_path).unwrap(),
            )
        };
        let (out, ckpt_a, log_a) = run(&cfg);
        let (_, ckpt_b, log_b) = run(&cfg);
        assert_eq!(ckpt_a, ckpt_b);
        assert_eq!(log_a, log_b);
        assert_eq!(out.steps, 2);
        assert!(cfg.best_checkpoint_path().exists());
        let lines: Vec<&str> = log_a.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,") && lines[1].ends_with(",train"));
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",validation"));
        // Logged totals equal the recomputed weighted sums.
        let wts = LossWeights::default();
        for line in &lines[1..] {
            let f: Vec<f64> = line.split(',').skip(1).take(6).map(|v| v.parse().unwrap()).collect();
            let total = wts.extraction * f[0] + wts.fidelity * f[1] + wts.information * f[2];
            assert!((total - f[4]).abs() < 1e-6);
            assert!((total + wts.penalty * f[3] - f[5]).abs() < 1e-6);
        }
        let ckpt = Checkpoint::load(&cfg.checkpoint_path).unwrap();
        assert_eq!(ckpt.step, 2);
        assert_eq!(ckpt.adam.as_ref().map(|a| a.step), Some(2));
    }

    #[test]
    fn fixed_batch_objective_decreases() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.batch_size = 4;
        cfg.pairing = Pairing::Fixed;
        let (c, w) = data(4);
        let mut t = Trainer::new(&cfg, c, w).unwrap();
        let losses: Vec<f64> = (0..50).map(|_| t.train_step().unwrap().objective).collect();
        let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        assert!(ma.windows(2).all(|p| p[1] < p[0]), "{ma:?}");
    }

    #[test]
    fn resume_continues_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.steps_per_epoch = Some(1);
        cfg.save_optimizer = true;
        let (c, w) = data(2);
        train_on(&cfg, c.clone(), w.clone(), &mut |_| {}).unwrap();
        let mut next = cfg.clone();
        next.resume = Some(cfg.checkpoint_path.clone());
        next.checkpoint_path = dir.path().join("out/resumed.ckpt");
        let out = train_on(&next, c, w, &mut |_| {}).unwrap();
        assert_eq!(out.steps, 2);
    }
}
