//! Mean Teacher training: schedules, optimizer, EMA teacher, the training
//! loop and prediction.

mod checkpoint;
mod schedule;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    select_label_budget, Batch, BatchSampler, BinaryMask, ImageSample, LabelBudget, Mode,
};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{
    argmax_classes, clone_params, grad_total_loss, init_params, inject_noise, softmax_probs,
    LossInputs, ModelConfig, NoiseConfig, ParamSet, Role, UNet,
};
use crate::rng;
use crate::tensor::{FeatureMap, Scalar};

pub use checkpoint::{bytes_hash, config_hash, Checkpoint, EmaPhase, CHECKPOINT_VERSION};
pub use schedule::{ema_decay, lr_schedule, ramp_up_weight};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub w1: f64,
    /// Ramp-up length `L` in epochs.
    pub ramp_up_length: usize,
    pub ema_beta_rampup: f64,
    pub ema_beta_main: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub label_budget: LabelBudget,
    /// Multiplies the ramp-up weight; 0 switches the consistency term off.
    pub consistency_max: f64,
    /// Perturb the student's labeled inputs too, not only the unlabeled ones.
    pub noise_on_labeled: bool,
    /// Also apply the consistency term to the labeled half of the batch.
    pub consistency_on_labeled: bool,
    pub augment: bool,
    /// Save an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Semi,
            total_iterations: 3000,
            batch_size: 16,
            base_lr: 0.01,
            momentum: 0.9,
            w1: 0.5,
            ramp_up_length: 50,
            ema_beta_rampup: 0.99,
            ema_beta_main: 0.999,
            noise: NoiseConfig::default(),
            seed: 0,
            label_budget: LabelBudget::All,
            consistency_max: 1.0,
            noise_on_labeled: true,
            consistency_on_labeled: false,
            augment: true,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        for (name, b) in [
            ("ema_beta_rampup", self.ema_beta_rampup),
            ("ema_beta_main", self.ema_beta_main),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0,1), got {b}"));
            }
        }
        if self.ramp_up_length == 0 {
            return bad("ramp_up_length must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.mode == Mode::Semi && !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "semi mode needs an even batch_size, got {}",
                self.batch_size
            ));
        }
        if !(self.consistency_max >= 0.0 && self.consistency_max.is_finite()) {
            return bad(format!(
                "consistency_max must be >= 0, got {}",
                self.consistency_max
            ));
        }
        LossWeights::new(self.w1, 0.0).map_err(|e| Error::Config(e.to_string()))?;
        self.noise.validate()
    }

    /// Labeled frames per iteration in the given mode.
    pub fn labeled_per_batch(&self, mode: Mode) -> usize {
        match mode {
            Mode::Fully => self.batch_size,
            Mode::Semi => self.batch_size / 2,
        }
    }

    /// Iterations needed to cycle once through `labeled` annotated frames.
    pub fn iterations_per_epoch(&self, mode: Mode, labeled: usize) -> usize {
        labeled.div_ceil(self.labeled_per_batch(mode)).max(1)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub w2: f64,
    pub beta: f64,
    pub ce: f64,
    pub dice: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LogRow {
    pub const COLUMNS: [&'static str; 9] = [
        "iteration",
        "epoch",
        "lr",
        "w2",
        "beta",
        "ce",
        "dice",
        "consistency",
        "total",
    ];

    /// Tab-separated, in [`LogRow::COLUMNS`] order.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.iteration,
            self.epoch,
            self.lr,
            self.w2,
            self.beta,
            self.ce,
            self.dice,
            self.consistency,
            self.total
        )
    }

    pub fn supervised(&self) -> f64 {
        self.ce + self.dice
    }
}

/// Classical momentum SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
///
/// Rejects non-finite gradients before touching anything.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    lr: f64,
    momentum: f64,
    velocity: &mut ParamSet<T>,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    if let Some((name, _)) = grads
        .iter()
        .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for (((_, p), (_, g)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        for ((p, g), v) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *v = m * *v + *g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// `teacher <- beta * teacher + (1 - beta) * student`, element-wise.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    beta: f64,
) -> Result<()> {
    teacher.check_layout(student)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay must be in [0,1], got {beta}"
        )));
    }
    let (b, a) = (T::lit(beta), T::lit(1.0 - beta));
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (t, s) in t.data.iter_mut().zip(&s.data) {
            *t = b * *t + a * *s;
        }
    }
    Ok(())
}

/// Student, teacher and optimizer state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub velocity: ParamSet<f32>,
    /// Iterations completed so far (`c`).
    pub iteration: usize,
    /// Current epoch `E = floor(c / iterations_per_epoch)`.
    pub epoch: usize,
    pub iterations_per_epoch: usize,
    /// Mode actually trained; semi with no unlabeled frames runs as fully.
    pub mode: Mode,
}

impl TrainState {
    pub fn new(
        model: &ModelConfig,
        config: &TrainConfig,
        mode: Mode,
        labeled: usize,
    ) -> Result<Self> {
        let student = init_params(model, config.seed)?;
        Ok(TrainState {
            teacher: clone_params(&student),
            velocity: student.zeros_like(Role::Gradient),
            student,
            iteration: 0,
            epoch: 0,
            iterations_per_epoch: config.iterations_per_epoch(mode, labeled),
            mode,
        })
    }
}

fn noisy(
    seed: u64,
    purpose: &str,
    step: usize,
    slot: usize,
    x: &FeatureMap<f32>,
    noise: &NoiseConfig,
) -> FeatureMap<f32> {
    let mut r = rng::stream(seed, &[rng::tag(purpose), step as u64, slot as u64]);
    inject_noise(x, noise, &mut r)
}

/// One optimization step on `batch`; returns the log line for it.
pub fn train_step(
    net: &UNet,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LogRow> {
    let c = state.iteration;
    let e = state.epoch;
    let semi = state.mode == Mode::Semi;
    let seed = config.seed;
    let noise = &config.noise;
    let w2 = if semi {
        config.consistency_max * ramp_up_weight(e, config.ramp_up_length)
    } else {
        0.0
    };
    let lr = lr_schedule(c, config.total_iterations, config.base_lr)?;
    let beta = ema_decay(
        e,
        config.ramp_up_length,
        config.ema_beta_rampup,
        config.ema_beta_main,
    );

    let labeled: Vec<(FeatureMap<f32>, BinaryMask)> = batch
        .labeled
        .iter()
        .enumerate()
        .map(|(i, (x, m))| {
            let x = if config.noise_on_labeled {
                noisy(seed, "eta-labeled", c, i, x, noise)
            } else {
                x.clone()
            };
            (x, m.clone())
        })
        .collect();

    // Student input, teacher input for every consistency sample.
    let mut pairs: Vec<(FeatureMap<f32>, FeatureMap<f32>)> = Vec::new();
    if semi {
        for (i, x) in batch.unlabeled.iter().enumerate() {
            pairs.push((
                noisy(seed, "eta-unlabeled", c, i, x, noise),
                noisy(seed, "eta-teacher", c, i, x, noise),
            ));
        }
        if config.consistency_on_labeled {
            for (i, ((xs, _), (x, _))) in labeled.iter().zip(&batch.labeled).enumerate() {
                pairs.push((
                    xs.clone(),
                    noisy(seed, "eta-teacher-labeled", c, i, x, noise),
                ));
            }
        }
    }
    let teacher = &state.teacher;
    let unlabeled = pairs
        .into_par_iter()
        .map(|(xs, xt)| Ok((xs, softmax_probs(&net.forward(teacher, &xt)?))))
        .collect::<Result<Vec<_>>>()?;

    let inputs = LossInputs {
        labeled,
        unlabeled,
        weights: LossWeights::new(config.w1, w2)?,
    };
    let (loss, grads) = grad_total_loss(net, &state.student, &inputs)?;
    sgd_step(
        &mut state.student,
        &grads,
        lr,
        config.momentum,
        &mut state.velocity,
    )?;
    ema_update(&mut state.teacher, &state.student, beta)?;
    state.iteration += 1;
    state.epoch = state.iteration / state.iterations_per_epoch;
    Ok(row(c, e, lr, w2, beta, &loss))
}

fn row(c: usize, e: usize, lr: f64, w2: f64, beta: f64, l: &LossBreakdown) -> LogRow {
    LogRow {
        iteration: c,
        epoch: e,
        lr,
        w2,
        beta,
        ce: l.ce,
        dice: l.dice,
        consistency: l.consistency,
        total: l.total,
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOutput<'a> {
    /// Receives `train.log`, `checkpoint/` and any interval checkpoints.
    pub dir: Option<&'a Path>,
    /// Recorded in the checkpoint so evaluation can spot a data mismatch.
    pub data_hash: Option<&'a str>,
}

fn snapshot(
    model: &ModelConfig,
    config: &TrainConfig,
    state: &TrainState,
    data_hash: Option<&str>,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        train: config.clone(),
        iteration: state.iteration,
        epoch: state.epoch,
        config_hash: config_hash(model, config),
        data_hash: data_hash.map(str::to_string),
        student: state.student.clone(),
        teacher: state.teacher.clone(),
    }
}

/// Trains on `samples`, keeping masks for `config.label_budget` of them.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    samples: &[ImageSample],
    out: RunOutput<'_>,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    let k = config.label_budget.resolve(samples.len());
    let (labeled, unlabeled) = select_label_budget(samples, k, config.seed)?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "label budget leaves no annotated frames".into(),
        ));
    }
    if let Some(s) = samples.first() {
        model.check_input(s.height(), s.width())?;
    }
    let mode = if config.mode == Mode::Semi && unlabeled.is_empty() {
        log::info!("no unlabeled frames left; semi mode runs fully supervised");
        Mode::Fully
    } else {
        config.mode
    };
    let net = UNet::new(model);
    let mut state = TrainState::new(model, config, mode, labeled.len())?;
    let mut sampler = BatchSampler::new(
        mode,
        config.batch_size,
        labeled.len(),
        unlabeled.len(),
        config.seed,
        config.augment,
    )?;
    log::info!(
        "training {mode}: {} labeled, {} unlabeled, {} iterations, {} per epoch",
        labeled.len(),
        unlabeled.len(),
        config.total_iterations,
        state.iterations_per_epoch
    );

    let mut log_file = match out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train.log");
            Some((
                BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?),
                p,
            ))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.total_iterations);
    for _ in 0..config.total_iterations {
        let batch = sampler.next_batch(&labeled, &unlabeled)?;
        let r = train_step(&net, &mut state, &batch, config)?;
        if let Some((w, p)) = log_file.as_mut() {
            writeln!(w, "{}", r.to_tsv()).map_err(|e| Error::io(&*p, e))?;
        }
        if r.iteration % 100 == 0 {
            log::debug!("{}", r.to_tsv());
        }
        log.push(r);
        if let Some(dir) = out.dir {
            let c = state.iteration;
            if config.checkpoint_interval > 0
                && c % config.checkpoint_interval == 0
                && c < config.total_iterations
            {
                snapshot(model, config, &state, out.data_hash)
                    .save(&dir.join(format!("checkpoint-{c:06}")))?;
            }
        }
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let checkpoint = snapshot(model, config, &state, out.data_hash);
    if let Some(dir) = out.dir {
        checkpoint.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Teacher logits for `image`, without noise.
pub fn teacher_logits(checkpoint: &Checkpoint, image: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    UNet::new(&checkpoint.model).forward(&checkpoint.teacher, image)
}

/// Teacher segmentation: per-pixel argmax, exact ties to background.
pub fn predict(checkpoint: &Checkpoint, image: &FeatureMap<f32>) -> Result<BinaryMask> {
    let logits = teacher_logits(checkpoint, image)?;
    BinaryMask::new(image.height, image.width, argmax_classes(&logits))
}
