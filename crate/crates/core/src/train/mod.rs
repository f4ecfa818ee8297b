//! Training loop: seeded epoch order and augmentation, hybrid loss, Adam,
//! per-step run record, per-epoch validation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest, MANIFEST};
pub use optim::{Adam, AdamConfig, LrSchedule};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment, augment_seed, epoch_order, make_batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, DEFAULT_THRESHOLD};
use crate::loss::{hybrid_loss, LossWeights};
use crate::model::{CadUnet, ModelConfig};
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const RUN_RECORD: &str = "run_record.csv";
pub const VALIDATION_RECORD: &str = "validation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Indexed by 1-based epoch number.
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` trains on the slices as loaded.
    pub augment: Option<AugmentConfig>,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Stop at the end of the first epoch whose validation F1 reaches this.
    pub target_f1: Option<f64>,
    /// Save `last/` every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            loss: LossWeights::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamConfig::default(),
            epochs: 120,
            batch_size: 4,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            max_steps: None,
            target_f1: None,
            checkpoint_every: 10,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} must lie in [0, 1)", self.threshold)));
        }
        if self.target_f1.is_some_and(|t| !(0.0..=100.0).contains(&t)) {
            return Err(Error::Config("target F1 is a percentage in [0, 100]".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_inf: f64,
    pub loss_lung: f64,
    pub loss_edge: f64,
}

/// Pooled validation scores after one epoch, averaged over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub f1: f64,
    pub iou: f64,
    pub recall: f64,
    pub spec: f64,
    pub prec: f64,
}

pub struct TrainOutcome {
    pub model: CadUnet,
    pub store: ParamStore<f32>,
    pub records: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub best: Option<ValidationRecord>,
}

fn validation_record(epoch: usize, step: usize, eval: &crate::eval::Evaluation) -> ValidationRecord {
    let pooled = eval.pooled();
    let mean = |k: usize| pooled.iter().map(|c| c.scores().values()[k]).sum::<f64>() / pooled.len() as f64;
    ValidationRecord {
        epoch,
        step,
        f1: mean(0),
        iou: mean(1),
        recall: mean(2),
        spec: mean(3),
        prec: mean(4),
    }
}

struct Sinks {
    records: csv::Writer<fs::File>,
}

/// One forward/backward pass; returns the record values and every parameter gradient.
fn gradients(
    model: &CadUnet,
    store: &mut ParamStore<f32>,
    x: Tensor<f32>,
    targets: &crate::loss::LossTargets<f32>,
    weights: &LossWeights,
) -> Result<(f64, crate::loss::LossParts, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let mut s = Session::bind(&mut g, store, Mode::Train);
    let input = s.graph.constant(x);
    let out = model.forward(&mut s, input)?;
    let vars = s.param_vars().to_vec();
    let (total, parts) = hybrid_loss(&mut g, &out, targets, weights)?;
    let value = g.value(total).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, parts, Vec::new()));
    }
    let grads = g.backward(total)?;
    Ok((value, parts, vars.iter().map(|&v| grads.wrt(&g, v)).collect()))
}

/// Train from scratch. With `out_dir` set, the run record is streamed to CSV
/// and checkpoints are written under it (`best/`, `last/`, `final/`).
pub fn train(config: &TrainConfig, train_set: &[Sample], val_set: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set.first().ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let (h, w) = first.dims();
    config.model.check_input(&[1, config.model.input_channels, h, w])?;

    let (model, mut store) = CadUnet::init::<f32>(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(config.optimizer, &store);
    log::info!(
        "training {} parameters on {} slices ({} validation)",
        store.num_scalars(),
        train_set.len(),
        val_set.len()
    );

    let mut sinks = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg = dir.join("train_config.json");
            fs::write(&cfg, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg, e))?;
            Some(Sinks {
                records: csv::Writer::from_path(dir.join(RUN_RECORD))?,
            })
        }
        None => None,
    };
    let metadata = |extra: serde_json::Value| {
        serde_json::json!({ "seed": config.seed, "loss": config.loss, "train_slices": train_set.len(), "extra": extra })
    };

    let mut records = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<ValidationRecord> = None;
    let mut step = 0;
    let mut epoch = 0;
    'epochs: for e in 1..=config.epochs {
        epoch = e;
        let mut reached = false;
        let lr = config.schedule.lr(epoch);
        let order = epoch_order(train_set.len(), config.seed, epoch);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| match &config.augment {
                    Some(a) => augment(&train_set[i], a, augment_seed(config.seed, epoch, b * config.batch_size + k)),
                    None => train_set[i].clone(),
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, targets) = make_batch::<f32>(&refs, config.model.num_classes)?;
            let (total, parts, grads) = gradients(&model, &mut store, x, &targets, &config.loss).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step: step + 1,
                    reason: format!("non-finite values in {op}"),
                },
                other => other,
            })?;
            step += 1;
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss_total: total,
                loss_inf: parts.infection,
                loss_lung: parts.lung,
                loss_edge: parts.edge,
            };
            if let Some(s) = &mut sinks {
                s.records.serialize(&record)?;
                s.records.flush().map_err(|e| Error::io(RUN_RECORD, e))?;
            }
            records.push(record);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("loss is {total}"),
                });
            }
            adam.step(&mut store, &grads, lr).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::Diverged {
                    step,
                    reason: format!("non-finite gradient for parameter `{name}`"),
                },
                other => other,
            })?;
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let recent = records.iter().rev().take_while(|r| r.epoch == epoch).map(|r| r.loss_total);
        let (sum, n) = recent.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        log::info!("epoch {epoch}: step {step}, lr {lr:e}, mean loss {:.4}", sum / n.max(1) as f64);

        if !val_set.is_empty() {
            let options = EvalOptions {
                threshold: config.threshold,
                batch_size: config.batch_size,
                num_classes: None,
            };
            let v = validation_record(epoch, step, &evaluate(&model, &mut store, val_set, &options)?);
            log::info!("epoch {epoch}: validation F1 {:.2}, IoU {:.2}", v.f1, v.iou);
            if best.as_ref().is_none_or(|b| v.f1 > b.f1) {
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best"), &config.model, &store, step as u64, epoch, metadata(serde_json::to_value(&v)?))?;
                }
                best = Some(v.clone());
            }
            reached = config.target_f1.is_some_and(|t| v.f1 >= t);
            validation.push(v);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join("last"), &config.model, &store, step as u64, epoch, metadata(serde_json::Value::Null))?;
            }
        }
        if reached {
            log::info!("validation F1 target reached after {step} steps");
            break;
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final"), &config.model, &store, step as u64, epoch, metadata(serde_json::Value::Null))?;
        let path = dir.join(VALIDATION_RECORD);
        let mut w = csv::Writer::from_path(&path)?;
        for v in &validation {
            w.serialize(v)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        store,
        records,
        validation,
        best,
    })
}
