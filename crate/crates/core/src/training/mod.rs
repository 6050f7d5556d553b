//! Stage-1 training of the anomaly expert on frozen features.

mod loss;
mod optim;

pub use loss::{balanced_bce, balanced_bce_value, BceWeights, BCE_EPS};
pub use optim::{adamw_step, lr_schedule, AdamConfig, AdamState, Schedule};

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::eval::{class_auroc, ClassAuroc};
use crate::expert::{bind_bundle, check_compatible, forward, ExpertModel};
use crate::features::{Checkpoint, FeatureBundle};
use crate::selector::pool_matrix;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub eta_min: f64,
    /// Desk-scale default; the full-size setup used 128.
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps between warm restarts; half an epoch when unset.
    pub restart_period: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub train_tau: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            eta_min: 0.0,
            batch_size: 2,
            epochs: 2,
            restart_period: None,
            adam: AdamConfig::default(),
            seed: 0,
            train_tau: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.restart_period == Some(0) {
            return Err(Error::Config("restart_period must be at least 1".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW constants {a:?}")));
        }
        Schedule::new(self.lr0, self.eta_min, 1).map(|_| ())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule, Error> {
        let period = self.restart_period.unwrap_or_else(|| Schedule::half_epoch_period(self.steps_per_epoch(n)));
        Schedule::new(self.lr0, self.eta_min, period)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_auroc: Option<ClassAuroc>,
    pub val_auroc: Option<ClassAuroc>,
    /// Batches that held one class and used plain BCE.
    pub single_class_batches: usize,
    pub last_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Loss of every step taken in this run.
    pub step_losses: Vec<f64>,
    pub steps: u64,
    pub wall_time_s: f64,
    pub precision: Precision,
    pub checkpoint: Option<PathBuf>,
}

/// Permutation of `0..n` for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One forward/backward pass over a batch; returns the loss, the class
/// weights used and per-tensor gradients (`None` for frozen tensors).
pub fn batch_gradients<F: Real>(
    init: &Checkpoint<F>,
    pool: &Tensor<F>,
    batch: &[&FeatureBundle],
    train_tau: bool,
) -> Result<(f64, BceWeights, crate::params::ExpertTensors<Option<Tensor<F>>>), Error> {
    let params = &init.params;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true, train_tau);
    let pool = tape.constant(pool.clone());
    let mut scores = Vec::with_capacity(batch.len());
    for b in batch {
        let input = bind_bundle(&mut tape, b);
        let out = forward(&mut tape, &input, &vars, &params.config, pool)?;
        scores.push(tape.reshape(out.score, &[1])?);
    }
    let scores: Var = if scores.len() == 1 { scores[0] } else { tape.concat(&scores, 0)? };
    let labels: Vec<bool> = batch.iter().map(|b| b.label.is_anomalous()).collect();
    let (loss, weights) = balanced_bce(&mut tape, scores, &labels)?;
    tape.backward(loss)?;
    let grads = vars.map(|_, &v| {
        tape.requires_grad(v)
            .then(|| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
    });
    Ok((tape.value(loss).item().as_f64(), weights, grads))
}

fn check_dataset(config: &crate::ExpertConfig, data: &[FeatureBundle], what: &str) -> Result<(), Error> {
    for b in data {
        check_compatible(config, b)?;
    }
    let pos = data.iter().filter(|b| b.label.is_anomalous()).count();
    if data.is_empty() || pos == 0 || pos == data.len() {
        return Err(Error::Data(format!("{what} set needs both classes ({pos} anomalous of {})", data.len())));
    }
    Ok(())
}

fn auroc_of<F: Real>(model: &ExpertModel<F>, data: &[FeatureBundle]) -> Result<ClassAuroc, Error> {
    let scores = model.score_batch(data)?;
    let labels: Vec<bool> = data.iter().map(|b| b.label.is_anomalous()).collect();
    let classes: Vec<u32> = data.iter().map(|b| b.class_id).collect();
    class_auroc(&scores, &labels, &classes)
}

/// Trains every tensor of `init` (and `tau` only with `train_tau`). When
/// `init` carries optimizer state, training resumes at that step; the
/// result is then identical to an uninterrupted run.
pub fn train_stage1<F: Real>(
    train: &[FeatureBundle],
    val: Option<&[FeatureBundle]>,
    init: Checkpoint<F>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<F>, TrainReport), Error> {
    cfg.validate()?;
    init.params.config.validate()?;
    check_dataset(&init.params.config, train, "training")?;
    if let Some(v) = val {
        check_dataset(&init.params.config, v, "validation")?;
    }
    let started = Instant::now();
    let n = train.len();
    let steps_per_epoch = cfg.steps_per_epoch(n);
    let schedule = cfg.schedule(n)?;
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let config = init.params.config.clone();
    let pool = pool_matrix(config.g, config.pool_h, config.pool_w)?;

    let mut state = init.optimizer.clone().unwrap_or_else(|| AdamState::zeros(&init.params.tensors));
    let mut ckpt = Checkpoint { params: init.params, optimizer: None };
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        steps: state.step,
        wall_time_s: 0.0,
        precision: cfg.precision,
        checkpoint: None,
    };
    log::info!("training on {n} bundles: {steps_per_epoch} steps/epoch, restart period {}", schedule.period);

    let mut order = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut single_class = 0;
    while state.step < total {
        let step = state.step;
        let epoch = (step / steps_per_epoch as u64) as usize;
        let within = (step % steps_per_epoch as u64) as usize;
        if within == 0 || order.is_empty() {
            order = epoch_order(n, cfg.seed, epoch);
        }
        let lo = within * cfg.batch_size;
        let batch: Vec<&FeatureBundle> = order[lo..(lo + cfg.batch_size).min(n)].iter().map(|&i| &train[i]).collect();
        let lr = lr_schedule(step, &schedule);
        let (loss, weights, grads) = batch_gradients(&ckpt, &pool, &batch, cfg.train_tau)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        adamw_step(&mut ckpt.params.tensors, &grads, &mut state, lr, &cfg.adam)?;
        log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.6}");
        report.step_losses.push(loss);
        epoch_losses.push(loss);
        single_class += usize::from(weights.single_class);

        if within + 1 == steps_per_epoch {
            let model = ExpertModel::new(ckpt.params.clone())?;
            let stats = EpochStats {
                epoch,
                mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
                train_auroc: Some(auroc_of(&model, train)?),
                val_auroc: val.map(|v| auroc_of(&model, v)).transpose()?,
                single_class_batches: single_class,
                last_lr: lr,
            };
            log::info!(
                "epoch {epoch}: loss {:.5}, train AUROC {:.4}, val AUROC {}",
                stats.mean_loss,
                stats.train_auroc.as_ref().map_or(f64::NAN, |a| a.mean),
                stats.val_auroc.as_ref().map_or("-".to_string(), |a| format!("{:.4}", a.mean)),
            );
            report.epochs.push(stats);
            epoch_losses.clear();
            single_class = 0;
        }
    }
    if !ckpt.params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    report.steps = state.step;
    report.wall_time_s = started.elapsed().as_secs_f64();
    ckpt.optimizer = Some(state);
    Ok((ckpt, report))
}
