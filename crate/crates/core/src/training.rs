//! Maximum-likelihood training: minibatch NLL, Adam, step-decay schedule,
//! gradient clipping and resumable checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::{TargetSampler, TargetSpec};
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::so3::{Rotation, SO3Grid};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: usize,
    /// Samples drawn from the target; a `test_fraction` share is held out.
    pub dataset_size: usize,
    pub test_fraction: f64,
    /// Each batch is split into this many tapes. Gradients are summed in
    /// shard order, so results do not depend on the thread count.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            steps: 20_000,
            milestones: Vec::new(),
            decay_factor: 0.1,
            seed: 0,
            grad_clip: Some(10.0),
            checkpoint_interval: 0,
            dataset_size: 100_000,
            test_fraction: 0.1,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.shards == 0 || self.shards > self.batch_size {
            return bad("shards must be between 1 and the batch size");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test fraction must be in [0, 1)");
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay factor must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip threshold must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.milestones.iter().filter(|&&m| m <= step).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        let zeros = || shapes.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape());
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `max` if it is larger; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let n = global_norm(grads);
    if n > max {
        let s = max / n;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    n
}

fn rotations_tensor(xs: &[Rotation]) -> Tensor {
    Tensor::from_vec(xs.len(), 9, xs.iter().flat_map(|r| r.to_column_major()).collect())
}

/// `−mean log p(x)` over a nonempty batch.
pub fn nll_loss(model: &FlowModel, batch: &[Rotation], cond: Option<&Tensor>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let lp = model.log_prob_batch(batch, cond)?;
    Ok(-lp.iter().sum::<f64>() / batch.len() as f64)
}

/// NLL of `batch` and its gradient with respect to [`FlowModel::params`].
pub fn nll_and_grad(
    model: &FlowModel,
    batch: &[Rotation],
    cond: Option<&Tensor>,
    shards: usize,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let b = batch.len();
    let shards = shards.clamp(1, b);
    let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * b / shards, (s + 1) * b / shards)).collect();
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut tape = Tape::new();
            let params = model.register(&mut tape, true);
            let x = tape.constant(rotations_tensor(&batch[lo..hi]));
            let c = cond.map(|c| tape.constant(c.select_rows(&(lo..hi).collect::<Vec<_>>())));
            let lp = model.log_prob_tape(&mut tape, &params, x, c)?;
            let s = tape.sum_all(lp);
            let loss = tape.scale(s, -1.0 / b as f64);
            let value = tape.value(loss).item();
            let mut grads = tape.backward(loss);
            let g = params
                .iter()
                .map(|&p| {
                    let like = tape.value(p).clone();
                    grads.take_or_zeros(p, &like)
                })
                .collect();
            Ok((value, g))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&g) {
                    a.add_assign(g);
                }
            }
        }
    }
    Ok((total, sum.expect("at least one shard")))
}

/// Samples with optional per-sample condition rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<Rotation>,
    pub cond: Option<Tensor>,
}

impl Dataset {
    pub fn new(x: Vec<Rotation>) -> Self {
        Self { x, cond: None }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<Rotation>, Option<Tensor>) {
        (idx.iter().map(|&i| self.x[i]).collect(), self.cond.as_ref().map(|c| c.select_rows(idx)))
    }
}

/// Draws `cfg.dataset_size` samples from `target` and splits off the last
/// `cfg.test_fraction` as a test set. Deterministic in `cfg.seed`.
pub fn generate_split(target: &TargetSpec, grid: &SO3Grid, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let all = TargetSampler::new(target, grid)?.sample(cfg.dataset_size, &mut rng)?;
    let n_test = (cfg.dataset_size as f64 * cfg.test_fraction).round() as usize;
    let split = cfg.dataset_size - n_test;
    if split == 0 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    Ok((Dataset::new(all[..split].to_vec()), Dataset::new(all[split..].to_vec())))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: FlowModel,
    pub optimizer: Adam,
    pub step: usize,
    pub train: TrainConfig,
    /// Position of the minibatch stream, as a decimal `u128`.
    pub rng_word_pos: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        // Write then rename so a crash never leaves a truncated file.
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.config().validate()?;
        if ck.model.params().len() != ck.model.param_names().len() {
            return Err(Error::Checkpoint("parameter list does not match architecture".into()));
        }
        Ok(ck)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub nll: f64,
    pub lr: f64,
    pub wall_time_ms: u128,
}

pub const METRICS_HEADER: &str = "step,nll,lr,wall_time_ms";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.nll, self.lr, self.wall_time_ms)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FlowModel,
    pub cfg: TrainConfig,
    optimizer: Adam,
    step: usize,
    rng: ChaCha8Rng,
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

impl Trainer {
    pub fn new(model: FlowModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Adam::new(&model.params());
        let rng = batch_rng(cfg.seed);
        Ok(Self {
            model,
            cfg,
            optimizer,
            step: 0,
            rng,
        })
    }

    /// Resumes from a checkpoint; `steps` may extend the original run.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let pos: u128 = ck
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", ck.rng_word_pos)))?;
        let mut rng = batch_rng(ck.train.seed);
        rng.set_word_pos(pos);
        if ck.optimizer.m.len() != ck.model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match model".into()));
        }
        Ok(Self {
            model: ck.model,
            cfg: ck.train,
            optimizer: ck.optimizer,
            step: ck.step,
            rng,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            train: self.cfg.clone(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    /// One optimizer step on a minibatch drawn with replacement. Returns the
    /// pre-update batch NLL. On error the model is left untouched.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..data.len())).collect();
        let (xs, cond) = data.gather(&idx);
        let (loss, mut grads) = match nll_and_grad(&self.model, &xs, cond.as_ref(), self.cfg.shards) {
            // A NaN reaching a normalization means the loss itself is NaN.
            Err(Error::DegenerateInput { norm, .. }) if norm.is_nan() => (f64::NAN, Vec::new()),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(self.model.param_names()[i].clone()));
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.cfg.lr_at(self.step);
        self.optimizer.step(&mut self.model.params_mut(), &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

/// Where [`train`] writes its files. Every field is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Runs until `trainer.cfg.steps`. Appends to the metrics CSV (creating it
/// with a header at step 0), writes `checkpoint_{step}.json` at the
/// configured interval and `checkpoint.json` at the end. A non-finite loss
/// writes `crash_checkpoint.json` with the last good state before failing.
pub fn train(trainer: &mut Trainer, data: &Dataset, out: &TrainOutputs) -> Result<Vec<StepRecord>> {
    let mut csv = match &out.metrics_csv {
        Some(p) => {
            let fresh = trainer.step == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    if let Some(d) = &out.checkpoint_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let start = Instant::now();
    let mut log = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let step = trainer.step;
        let lr = trainer.cfg.lr_at(step);
        let nll = match trainer.train_step(data) {
            Ok(l) => l,
            Err(e) => {
                if let Some(d) = &out.checkpoint_dir {
                    trainer.checkpoint().save(&d.join("crash_checkpoint.json"))?;
                }
                if let Some((p, w)) = &mut csv {
                    w.flush().map_err(|e| Error::io(&*p, e))?;
                }
                return Err(e);
            }
        };
        let rec = StepRecord {
            step,
            nll,
            lr,
            wall_time_ms: start.elapsed().as_millis(),
        };
        if let Some((p, w)) = &mut csv {
            writeln!(w, "{}", rec.csv_line()).map_err(|e| Error::io(&*p, e))?;
        }
        log.push(rec);
        if let Some(d) = &out.checkpoint_dir {
            let every = trainer.cfg.checkpoint_interval;
            if every > 0 && trainer.step.is_multiple_of(every) {
                trainer.checkpoint().save(&d.join(format!("checkpoint_{}.json", trainer.step)))?;
            }
        }
    }
    if let Some((p, w)) = &mut csv {
        w.flush().map_err(|e| Error::io(&*p, e))?;
    }
    if let Some(d) = &out.checkpoint_dir {
        trainer.checkpoint().save(&d.join("checkpoint.json"))?;
    }
    Ok(log)
}
