//! Training loop, evaluation and ablation runs.

pub mod ablate;
pub mod checkpoint;
pub mod eval;
pub mod optim;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{mix_seed, DirectoryDataset, EvalSource, RoadSample, SampleSource, Split, SynthSet};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossOutput, LossReport, Targets};
use crate::metrics::MetricReport;
use crate::model::{batch_tensor, Model};
use crate::nn::Mode;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use eval::{evaluate, evaluate_checkpoint, EvalOptions, EvalResult, RoadPredictor};
pub use optim::Adam;

pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Forward pass in training mode, the full objective and its gradients.
pub fn loss_and_grads(model: &Model, samples: &[RoadSample], lambda: f64) -> Result<(LossOutput, GradStore)> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = batch_tensor(&images, model.dtype())?;
    let targets = Targets::from_samples(samples, model.dtype())?;
    let bundle = model.forward(&x, Mode::Train)?;
    let out = total_loss(&bundle, &targets, lambda)?;
    let grads = out.total.backward()?;
    Ok((out, grads))
}

/// Sample visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0x0DE4])));
    order
}

/// Model plus optimiser state for a run.
pub struct Trainer {
    model: Model,
    optimizer: Adam,
    config: RunConfig,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: RunConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        Ok(Self {
            model: Model::build(&config.model, t.seed, dtype)?,
            optimizer: Adam::new(t.learning_rate, t.beta1, t.beta2, t.adam_eps, t.weight_decay),
            config,
        })
    }

    /// Continue from a checkpoint directory.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, manifest) = checkpoint::load_model(dir, None)?;
        let t = &manifest.config.train;
        let mut optimizer = Adam::new(t.learning_rate, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
        optimizer.load(&dir.join(checkpoint::OPTIMIZER_FILE), manifest.step, model.params())?;
        Ok(Self {
            model,
            optimizer,
            config: manifest.config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Optimisation steps completed.
    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// One optimisation step on a batch. The returned report describes the
    /// loss before the update.
    pub fn train_step(&mut self, samples: &[RoadSample]) -> Result<LossReport> {
        let (out, grads) = loss_and_grads(&self.model, samples, self.config.model.lambda).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged {
                step: self.step() + 1,
                detail,
            },
            other => other,
        })?;
        self.optimizer.step(self.model.params(), &grads)?;
        Ok(out.report)
    }

    pub fn save_checkpoint(&self, dir: &Path, metrics: Option<MetricReport>) -> Result<()> {
        checkpoint::save(dir, &self.model, &self.optimizer, &self.config, metrics)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub steps: u64,
    /// Loss reports of the steps run by this call.
    pub history: Vec<LossReport>,
    pub best_metrics: Option<MetricReport>,
}

/// Training-split source described by a configuration.
pub fn training_source(config: &RunConfig) -> Result<Box<dyn SampleSource>> {
    match &config.data.synthetic {
        Some(s) => Ok(Box::new(SynthSet::generate(s.train_count, s.size, s.split_seed(Split::Train))?)),
        None => Ok(Box::new(DirectoryDataset::open(config.data.spec(Split::Train, config.train.seed)?)?)),
    }
}

pub fn eval_source(config: &RunConfig, split: Split) -> Result<Box<dyn EvalSource>> {
    match &config.data.synthetic {
        Some(s) => Ok(Box::new(SynthSet::generate(s.count(split), s.size, s.split_seed(split))?)),
        None => Ok(Box::new(DirectoryDataset::open(config.data.spec(split, config.train.seed)?)?)),
    }
}

fn log_header(levels: &[usize]) -> Vec<String> {
    let mut h = vec!["step".to_string(), "epoch".into(), "l_road".into()];
    h.extend(levels.iter().map(|l| format!("l_border_{l}")));
    h.extend(levels.iter().map(|l| format!("l_cons_{l}")));
    h.push("total".into());
    h
}

fn log_row(step: u64, epoch: u64, r: &LossReport) -> Vec<String> {
    let mut row = vec![step.to_string(), epoch.to_string(), r.l_road.to_string()];
    row.extend(r.l_border.iter().map(|(_, v)| v.to_string()));
    row.extend(r.l_consistency.iter().map(|(_, v)| v.to_string()));
    row.push(r.total.to_string());
    row
}

/// Run (or with `resume`, continue) training as configured. Checkpoints go
/// to `<checkpoint_dir>/last` after every epoch and `<checkpoint_dir>/best`
/// whenever validation F1 improves.
pub fn train(
    config: &RunConfig,
    source: &dyn SampleSource,
    validation: Option<&dyn EvalSource>,
    resume: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let root = config.train.checkpoint_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let last = root.join(LAST_DIR);
    let best = root.join(BEST_DIR);

    let mut trainer = if resume {
        let t = Trainer::resume(&last)?;
        if t.config.model != config.model {
            return Err(Error::Checkpoint("cannot resume: model configuration differs from the checkpoint".into()));
        }
        t
    } else {
        let t = Trainer::new(config.clone())?;
        t.save_checkpoint(&last, None)?;
        t
    };
    trainer.config = config.clone();
    config.save(&root.join(CONFIG_SNAPSHOT))?;

    let levels = trainer.model.config().gnn_levels.clone();
    let log_path = root.join(LOSS_LOG);
    let fresh_log = !resume || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh_log {
        log.write_record(log_header(&levels))?;
    }

    let t = &config.train;
    let steps_per_epoch = source.len().div_ceil(t.batch_size) as u64;
    let mut best_f1 = if resume {
        checkpoint::read_manifest(&best).ok().and_then(|m| m.metrics).map(|m| m.f1)
    } else {
        None
    };
    let mut best_metrics = None;
    let mut history = Vec::new();
    let start_epoch = trainer.step() / steps_per_epoch;
    let mut skip = trainer.step() % steps_per_epoch;

    'epochs: for epoch in start_epoch..t.epochs {
        let order = epoch_order(t.seed, epoch, source.len());
        for chunk in order.chunks(t.batch_size) {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            if t.max_steps.is_some_and(|m| trainer.step() >= m) {
                break 'epochs;
            }
            let samples = chunk.iter().map(|&i| source.sample(i, epoch)).collect::<Result<Vec<_>>>()?;
            let report = trainer.train_step(&samples)?;
            log.write_record(log_row(trainer.step(), epoch, &report))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            history.push(report);
        }
        let mut metrics = None;
        if let Some(val) = validation {
            if t.eval_interval > 0 && (epoch + 1) % t.eval_interval == 0 && !val.is_empty() {
                let opts = EvalOptions {
                    averaging: t.averaging,
                    tile: config.data.tile_stride.map(|s| (config.data.crop_size, s)),
                    overlay_dir: None,
                };
                let result = evaluate(&trainer.model, val, &opts)?;
                if best_f1.is_none_or(|b| result.report.f1 > b) {
                    best_f1 = Some(result.report.f1);
                    trainer.save_checkpoint(&best, Some(result.report.clone()))?;
                    best_metrics = Some(result.report.clone());
                }
                metrics = Some(result.report);
            }
        }
        match (&metrics, history.last()) {
            (Some(m), _) => log::info!("epoch {epoch}: step {} val f1 {:.4} iou {:.4}", trainer.step(), m.f1, m.iou),
            (None, Some(r)) => log::info!("epoch {epoch}: step {} loss {:.5}", trainer.step(), r.total),
            _ => {}
        }
        trainer.save_checkpoint(&last, metrics)?;
    }
    if t.max_steps.is_some() {
        trainer.save_checkpoint(&last, None)?;
    }
    Ok(TrainOutcome {
        last,
        best: best.exists().then_some(best),
        steps: trainer.step(),
        history,
        best_metrics,
    })
}
