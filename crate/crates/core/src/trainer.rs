//! Noise-prediction training with condition dropout, Adam updates and
//! validation-driven checkpointing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionVector, Dataset, Split, CONDITION_LEN, UNCONDITIONAL};
use crate::denoiser::{Checkpoint, CheckpointMeta, DenoiserModel, Real};
use crate::diffusion::q_sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DiffusionGenerator};
use crate::grid::QuadrantGrid;
use crate::rng::{standard_normals, stream};
use crate::sampler::DEFAULT_GUIDANCE;
use crate::schedule::NoiseSchedule;
use crate::surrogate::ProxyParams;

pub const BEST_CHECKPOINT: &str = "best.mdck";
pub const REPORT_CSV: &str = "report.csv";

const TRAIN_STREAM: u64 = 0x4d44_5452;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a training sample sees the unconditional mask.
    pub cond_dropout_prob: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Also keep `epoch_NNN.mdck` every this many epochs; 0 keeps only the best.
    pub checkpoint_every: usize,
    /// Validation conditions generated after each epoch.
    pub val_cap: usize,
    pub guidance_w: f64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-4,
            cond_dropout_prob: 0.10,
            seed: 0,
            timesteps: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            val_cap: 64,
            guidance_w: DEFAULT_GUIDANCE,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} must be positive and finite")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("adam_eps", self.adam_eps)?;
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::config("cond_dropout_prob", format!("{} is outside [0, 1)", self.cond_dropout_prob)));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} is outside [0, 1)")));
            }
        }
        if self.timesteps < 2 {
            return Err(Error::config("timesteps", "must be at least 2"));
        }
        if self.val_cap == 0 {
            return Err(Error::config("val_cap", "must be at least 1"));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::config("guidance_w", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments; moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<F: Real>(&mut self, params: &mut [F], grads: &[F]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64().unwrap_or(f64::NAN);
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let delta = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = F::lit(p.to_f64().unwrap_or(f64::NAN) - delta);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step: self.step });
        }
        Ok(())
    }
}

/// Random choices for one training sample, drawn in this order.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub t: usize,
    pub masked: bool,
    pub eps: Vec<f64>,
}

pub fn plan_sample(rng: &mut impl Rng, cells: usize, timesteps: usize, dropout: f64) -> SamplePlan {
    let t = rng.gen_range(1..=timesteps);
    let masked = rng.gen::<f64>() < dropout;
    let eps = standard_normals(rng, cells);
    SamplePlan { t, masked, eps }
}

/// One optimizer update on a batch of signed quadrants; returns the batch's
/// mean squared noise-prediction error before the update.
pub fn train_step<F: Real>(
    model: &mut DenoiserModel<F>,
    opt: &mut Adam,
    batch: &[(QuadrantGrid, ConditionVector)],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if model.config().timesteps != sched.len() {
        return Err(Error::ScheduleMismatch {
            model: model.config().timesteps,
            schedule: sched.len(),
        });
    }
    let side = model.config().quadrant_side;
    let cells = side * side;
    let mut x = Vec::with_capacity(batch.len() * cells);
    let mut target = Vec::with_capacity(batch.len() * cells);
    let mut t = Vec::with_capacity(batch.len());
    let mut cond = Vec::with_capacity(batch.len() * CONDITION_LEN);
    for (x0, c) in batch {
        if x0.side() != side {
            return Err(Error::shape(format!("{side}x{side} quadrant"), format!("{0}x{0}", x0.side())));
        }
        let plan = plan_sample(rng, cells, sched.len(), config.cond_dropout_prob);
        let xt = q_sample(x0.values(), plan.t, &plan.eps, sched)?;
        x.extend(xt.into_iter().map(F::lit));
        target.extend(plan.eps.into_iter().map(F::lit));
        t.push(plan.t);
        let values = if plan.masked { &UNCONDITIONAL } else { c.values() };
        cond.extend(values.iter().map(|&v| F::lit(f64::from(v))));
    }
    let (loss, grads) = model.loss_and_grad(&x, &t, &cond, &target)?;
    opt.update(model.params_mut(), &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Validation MAE of the model before any update.
    pub baseline_val_mae: Option<f64>,
}

impl TrainReport {
    /// `epoch,train_loss,val_mae`; timings are kept out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae\n");
        for r in &self.records {
            writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_mae).unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.records {
            writeln!(s, "{},{:.3}", r.epoch, r.seconds).unwrap();
        }
        s
    }

    /// Same comparison as `==` but ignoring wall-clock times.
    pub fn same_results(&self, other: &Self) -> bool {
        self.best_epoch == other.best_epoch
            && self.baseline_val_mae == other.baseline_val_mae
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.epoch == b.epoch && a.train_loss == b.train_loss && a.val_mae == b.val_mae)
    }
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    dataset: &Dataset,
) -> Result<()> {
    let meta = CheckpointMeta {
        grid_side: dataset.manifest.grid_side,
        proxy: Some(dataset.manifest.proxy),
    };
    Checkpoint::new(model.clone(), sched.clone(), meta)?.save(dir.join(name))
}

/// Trains for `config.epochs` epochs and returns the parameters with the best
/// validation MAE (the input model when `epochs` is 0). `on_epoch` sees each
/// record as it is completed.
pub fn fit(
    model: DenoiserModel<f32>,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DenoiserModel<f32>, TrainReport)> {
    config.validate()?;
    if model.config().timesteps != sched.len() || config.timesteps != sched.len() {
        return Err(Error::ScheduleMismatch {
            model: model.config().timesteps,
            schedule: sched.len(),
        });
    }
    if model.config().quadrant_side != dataset.manifest.quadrant_side() {
        return Err(Error::config(
            "quadrant_side",
            format!(
                "model expects {} but the dataset stores {}",
                model.config().quadrant_side,
                dataset.manifest.quadrant_side()
            ),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut report = TrainReport::default();
    let mut model = model;
    let mut best = model.clone();

    if config.epochs > 0 {
        if dataset.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if dataset.val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        let train = dataset.signed_split(Split::Train)?;
        let val = &dataset.val[..config.val_cap.min(dataset.val.len())];
        let proxy = ProxyParams::from_spec(dataset.manifest.proxy)?;
        let validate = |m: &DenoiserModel<f32>| -> Result<f64> {
            let generator = DiffusionGenerator {
                model: m,
                schedule: sched,
                guidance_w: config.guidance_w,
            };
            Ok(evaluate(&generator, val, &proxy, config.eval_seed)?.mean)
        };
        report.baseline_val_mae = Some(validate(&model)?);

        let mut rng = stream(config.seed, &[TRAIN_STREAM]);
        let mut opt = Adam::new(model.num_params(), config);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best_mae = f64::INFINITY;
        for epoch in 1..=config.epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batch = Vec::with_capacity(config.batch_size);
            for idx in order.chunks(config.batch_size) {
                batch.clear();
                batch.extend(idx.iter().map(|&i| train[i].clone()));
                loss_sum += train_step(&mut model, &mut opt, &batch, sched, &mut rng, config)? * idx.len() as f64;
            }
            let val_mae = validate(&model)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                val_mae,
                seconds: start.elapsed().as_secs_f64(),
            };
            if val_mae < best_mae {
                best_mae = val_mae;
                best = model.clone();
                report.best_epoch = Some(epoch);
                if let Some(dir) = out_dir {
                    save_checkpoint(dir, BEST_CHECKPOINT, &best, sched, dataset)?;
                }
            }
            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                    save_checkpoint(dir, &format!("epoch_{epoch:03}.mdck"), &model, sched, dataset)?;
                }
            }
            on_epoch(&record);
            report.records.push(record);
        }
    }
    if let Some(dir) = out_dir {
        if report.best_epoch.is_none() {
            save_checkpoint(dir, BEST_CHECKPOINT, &best, sched, dataset)?;
        }
        std::fs::write(dir.join(REPORT_CSV), report.to_csv())?;
    }
    Ok((best, report))
}
