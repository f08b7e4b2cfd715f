//! Two-stage training.
//!
//! Stage A pretrains the image branch (with the text encoder) on
//! text-to-image, then copies its first blocks into a mini branch and trains
//! that copy on the same task. Stage B wraps both into a [`TideModel`] and
//! fits only the LoRA and TAN tensors with the summed three-branch loss.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, Checkpointable};
use crate::codec::{encode_depth, encode_image, encode_mask};
use crate::error::{Result, TideError};
use crate::model::{BaseModel, Latents, Modality, ModelConfig, TideModel, Toggles};
use crate::nn::{time_embedding, tokenize};
use crate::schedule::{q_sample, NoiseSchedule};
use crate::scenes::{palette, vocabulary, Quadruple};
use crate::seed;
use crate::tape::{Graph, Mat, ParamId, ParamStore, Var};

const TAG_SHUFFLE: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_INIT: u64 = 3;

/// A quadruple in latent space with its caption tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub latents: Latents,
    pub tokens: Vec<u32>,
    pub caption: String,
}

pub fn encode_sample(q: &Quadruple) -> Result<EncodedSample> {
    Ok(EncodedSample {
        latents: Latents {
            image: encode_image(q.image.view()),
            depth: encode_depth(q.depth.view())?,
            mask: encode_mask(q.mask.view(), &palette())?,
        },
        tokens: tokenize(&q.caption, &vocabulary()),
        caption: q.caption.clone(),
    })
}

pub fn encode_dataset(records: &[Quadruple]) -> Result<Vec<EncodedSample>> {
    crate::par::map(records, encode_sample).into_iter().collect()
}

/// Mean squared error between a prediction and its target noise.
pub fn denoising_loss(g: &mut Graph, eps_hat: Var, eps: Var) -> Result<Var> {
    if g.shape(eps_hat) != g.shape(eps) {
        return Err(TideError::shape(format!("prediction {:?} vs target {:?}", g.shape(eps_hat), g.shape(eps))));
    }
    Ok(g.mse(eps_hat, eps))
}

/// Batch-mean branch losses; `total` is their literal sum in image, depth,
/// mask order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub image: f64,
    pub depth: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_branches(image: f64, depth: f64, mask: f64) -> Self {
        Self { image, depth, mask, total: image + depth + mask }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Image => self.image,
            Modality::Depth => self.depth,
            Modality::Mask => self.mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Stage::A),
            "B" | "b" => Ok(Stage::B),
            other => Err(TideError::invalid(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Stage B: optimizer steps. Stage A: steps on the image branch.
    pub iterations: u64,
    /// Stage A only: steps on the mini branch after it is spawned.
    pub mini_iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub toggles: Toggles,
    /// Checkpoint every this many steps; 0 writes only the first and last.
    pub checkpoint_every: u64,
    pub lr_schedule: LrSchedule,
}

/// Learning rate over a training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over each phase.
    Cosine,
    /// Base rate, then a tenth of it over the last sixth of each phase.
    Step,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
            LrSchedule::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            "step" => Ok(LrSchedule::Step),
            other => Err(TideError::invalid(format!("unknown learning-rate schedule {other}"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::B,
            iterations: 2000,
            mini_iterations: 2000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            toggles: Toggles::BOTH,
            checkpoint_every: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(TideError::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(TideError::invalid("learning rate must be positive and weight decay non-negative"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// Rate for the update made at `step` (0-based). Stage A restarts the
    /// schedule when the mini phase begins.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (start, len) = match self.stage {
            Stage::A if step >= self.iterations => (self.iterations, self.mini_iterations),
            Stage::A | Stage::B => (0, self.iterations),
        };
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (step - start) as f64 / len.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
            LrSchedule::Step if 6 * (step - start) >= 5 * len => 0.1 * self.lr,
            LrSchedule::Step => self.lr,
        }
    }

    /// Total optimizer steps of the stage.
    pub fn total_steps(&self) -> u64 {
        match self.stage {
            Stage::A => self.iterations + self.mini_iterations,
            Stage::B => self.iterations,
        }
    }

    pub fn write_to(&self, kv: &mut crate::config::KeyValues) {
        kv.set("train.stage", self.stage.as_str());
        kv.set("train.iterations", self.iterations);
        kv.set("train.mini_iterations", self.mini_iterations);
        kv.set("train.batch", self.batch);
        kv.set("train.lr", format!("{:?}", self.lr));
        kv.set("train.weight_decay", format!("{:?}", self.weight_decay));
        kv.set("train.seed", self.seed);
        kv.set("train.timesteps", self.timesteps);
        kv.set("train.beta_start", format!("{:?}", self.beta_start));
        kv.set("train.beta_end", format!("{:?}", self.beta_end));
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv.set("train.lr_schedule", self.lr_schedule.as_str());
        self.toggles.write_to(kv);
    }

    pub fn read_from(&mut self, kv: &crate::config::KeyValues) -> Result<()> {
        if let Some(s) = kv.get_str("train.stage") {
            self.stage = Stage::parse(s)?;
        }
        kv.apply("train.iterations", &mut self.iterations)?;
        kv.apply("train.mini_iterations", &mut self.mini_iterations)?;
        kv.apply("train.batch", &mut self.batch)?;
        kv.apply("train.lr", &mut self.lr)?;
        kv.apply("train.weight_decay", &mut self.weight_decay)?;
        kv.apply("train.seed", &mut self.seed)?;
        kv.apply("train.timesteps", &mut self.timesteps)?;
        kv.apply("train.beta_start", &mut self.beta_start)?;
        kv.apply("train.beta_end", &mut self.beta_end)?;
        kv.apply("train.checkpoint_every", &mut self.checkpoint_every)?;
        if let Some(s) = kv.get_str("train.lr_schedule") {
            self.lr_schedule = LrSchedule::parse(s)?;
        }
        self.toggles.read_from(kv)
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub(crate) m: Vec<Option<Mat>>,
    pub(crate) v: Vec<Option<Mat>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Mat, &Mat)> {
        match (self.m.get(id.index()), self.v.get(id.index())) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Mat, v: Mat) {
        let i = id.index();
        if self.m.len() <= i {
            self.m.resize(i + 1, None);
            self.v.resize(i + 1, None);
        }
        self.m[i] = Some(m);
        self.v[i] = Some(v);
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            });
        }
    }
}

/// A model that can be trained by [`Session`].
pub trait Objective: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Loss nodes per branch (image, depth, mask) for one noised sample;
    /// branches that are not trained return `None`.
    fn branch_losses(
        &self,
        g: &mut Graph,
        noisy: &Latents,
        noise: &Latents,
        t: usize,
        tokens: &[u32],
        toggles: Toggles,
    ) -> Result<[Option<Var>; 3]>;

    /// Called before every step; returns true when the optimizer state must
    /// be discarded (a new set of tensors starts training).
    fn prepare_step(&mut self, _step: u64, _config: &TrainConfig) -> Result<bool> {
        Ok(false)
    }

    /// Called once the configured number of steps has been reached.
    fn finish(&mut self, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

fn target(g: &mut Graph, model_tokens: Result<Mat>) -> Result<Var> {
    Ok(g.constant(model_tokens?))
}

impl Objective for TideModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn branch_losses(
        &self,
        g: &mut Graph,
        noisy: &Latents,
        noise: &Latents,
        t: usize,
        tokens: &[u32],
        toggles: Toggles,
    ) -> Result<[Option<Var>; 3]> {
        let out = self.forward_joint(g, noisy, t, tokens, toggles, false)?;
        let mut losses = [None; 3];
        for m in Modality::ALL {
            let eps = target(g, self.tokens(noise.get(m), m))?;
            losses[m.index()] = Some(denoising_loss(g, out.eps[m.index()], eps)?);
        }
        Ok(losses)
    }
}

impl Objective for BaseModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Text-to-image loss of the image branch, or of the mini branch once
    /// it exists.
    fn branch_losses(
        &self,
        g: &mut Graph,
        noisy: &Latents,
        noise: &Latents,
        t: usize,
        tokens: &[u32],
        _toggles: Toggles,
    ) -> Result<[Option<Var>; 3]> {
        let branch = self.branch(self.mini.is_some())?;
        let patch = self.config.patch;
        let input = g.constant(crate::codec::patchify(noisy.image.view(), patch)?);
        let text = self.text.forward(g, tokens)?;
        let sinus = g.constant(time_embedding(t as f64, self.config.width));
        let (eps_hat, _) = branch.forward_solo(g, input, sinus, text)?;
        let eps = target(g, crate::codec::patchify(noise.image.view(), patch))?;
        Ok([Some(denoising_loss(g, eps_hat, eps)?), None, None])
    }

    fn prepare_step(&mut self, step: u64, config: &TrainConfig) -> Result<bool> {
        let spawn = step >= config.iterations && self.mini.is_none();
        if spawn {
            self.spawn_mini()?;
        }
        self.set_stage_a_trainable(self.mini.is_some())?;
        Ok(spawn)
    }

    /// A stage-A run always ends with a mini branch, even with zero steps.
    fn finish(&mut self, _config: &TrainConfig) -> Result<()> {
        if self.mini.is_none() {
            self.spawn_mini()?;
            self.set_stage_a_trainable(true)?;
        }
        Ok(())
    }
}

/// Dataset indices of batch `step`: consecutive slices of per-epoch seeded
/// permutations, so any step can be recomputed without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, seed_value: u64, step: u64) -> Vec<usize> {
    let mut current: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let pos = step * batch as u64 + k;
            let epoch = pos / n as u64;
            if current.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut seed::stream(seed_value, &[TAG_SHUFFLE, epoch]));
                current = Some((epoch, perm));
            }
            current.as_ref().unwrap().1[(pos % n as u64) as usize]
        })
        .collect()
}

fn gaussian_like<R: Rng>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Timestep and per-modality noise for slot `k` of batch `step`.
pub fn draw_noise(seed_value: u64, step: u64, k: usize, timesteps: usize, like: &Latents) -> (usize, Latents) {
    let mut rng = seed::stream(seed_value, &[TAG_NOISE, step, k as u64]);
    let t = rng.random_range(1..=timesteps);
    let noise = Latents {
        image: gaussian_like(&mut rng, like.image.dim()),
        depth: gaussian_like(&mut rng, like.depth.dim()),
        mask: gaussian_like(&mut rng, like.mask.dim()),
    };
    (t, noise)
}

struct SampleResult {
    losses: [f64; 3],
    grads: Vec<(ParamId, Mat)>,
}

fn sample_gradients<M: Objective>(
    model: &M,
    sample: &EncodedSample,
    t: usize,
    noise: &Latents,
    schedule: &NoiseSchedule,
    toggles: Toggles,
) -> Result<SampleResult> {
    let noisy = Latents {
        image: q_sample(&sample.latents.image, t, &noise.image, schedule)?,
        depth: q_sample(&sample.latents.depth, t, &noise.depth, schedule)?,
        mask: q_sample(&sample.latents.mask, t, &noise.mask, schedule)?,
    };
    let store = model.store();
    let mut g = Graph::new(store);
    let branch = model.branch_losses(&mut g, &noisy, noise, t, &sample.tokens, toggles)?;
    let mut losses = [0.0; 3];
    let mut total: Option<Var> = None;
    for (i, l) in branch.iter().enumerate() {
        if let Some(l) = *l {
            losses[i] = g.scalar(l);
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
    }
    let total = total.ok_or_else(|| TideError::invalid("objective produced no loss"))?;
    let grads = g
        .backward(total)
        .into_params()
        .into_iter()
        .enumerate()
        .filter_map(|(i, gm)| gm.map(|gm| (ParamId(i), gm)))
        .filter(|(id, _)| store.is_trainable(*id))
        .collect();
    Ok(SampleResult { losses, grads })
}

/// One optimizer step on `batch`: per-sample gradients (in parallel when
/// enabled), reduced in batch order and averaged.
pub fn optimize_step<M: Objective>(
    model: &mut M,
    opt: &mut AdamW,
    batch: &[&EncodedSample],
    schedule: &NoiseSchedule,
    toggles: Toggles,
    seed_value: u64,
    step: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(TideError::invalid("empty batch"));
    }
    let jobs: Vec<(usize, &EncodedSample)> = batch.iter().copied().enumerate().collect();
    let results: Vec<SampleResult> = {
        let model_ref: &M = model;
        crate::par::map(&jobs, |(k, s)| {
            let (t, noise) = draw_noise(seed_value, step, *k, schedule.len(), &s.latents);
            sample_gradients(model_ref, s, t, &noise, schedule, toggles)
        })
        .into_iter()
        .collect::<Result<_>>()?
    };
    let n = results.len() as f64;
    let mut sums = [0.0; 3];
    for r in &results {
        for i in 0..3 {
            sums[i] += r.losses[i];
        }
    }
    let report = LossReport::from_branches(sums[0] / n, sums[1] / n, sums[2] / n);
    if !report.total.is_finite() {
        return Err(TideError::NonFinite(format!(
            "loss at step {step}: image {} depth {} mask {}",
            report.image, report.depth, report.mask
        )));
    }
    let mut acc: Vec<Option<Mat>> = vec![None; model.store().len()];
    for r in results {
        for (id, gm) in r.grads {
            match &mut acc[id.index()] {
                Some(a) => *a += &gm,
                slot => *slot = Some(gm),
            }
        }
    }
    let grads: Vec<(ParamId, Mat)> = acc
        .into_iter()
        .enumerate()
        .filter_map(|(i, gm)| gm.map(|gm| (ParamId(i), gm / n)))
        .collect();
    if let Some((id, _)) = grads.iter().find(|(_, gm)| gm.iter().any(|v| !v.is_finite())) {
        return Err(TideError::NonFinite(format!(
            "gradient of {} at step {step}",
            model.store().name(*id)
        )));
    }
    opt.step(model.store_mut(), &grads);
    Ok(report)
}

/// Stage-B step on an explicit batch (all three branch losses summed).
pub fn joint_step(
    model: &mut TideModel,
    opt: &mut AdamW,
    batch: &[&EncodedSample],
    schedule: &NoiseSchedule,
    toggles: Toggles,
    seed_value: u64,
    step: u64,
) -> Result<LossReport> {
    optimize_step(model, opt, batch, schedule, toggles, seed_value, step)
}

/// A resumable training run.
#[derive(Debug, Clone)]
pub struct Session<M> {
    pub model: M,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub history: Vec<LossReport>,
}

impl<M: Objective + Checkpointable> Session<M> {
    pub fn new(model: M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let opt = AdamW::new(config.lr, config.weight_decay);
        Ok(Self { model, opt, config, schedule, step: 0, history: Vec::new() })
    }

    /// Trains until `until` steps (capped at the configured total), writing
    /// checkpoints into `out` when given.
    pub fn run(&mut self, data: &[EncodedSample], until: u64, out: Option<&Path>) -> Result<()> {
        if data.is_empty() {
            return Err(TideError::invalid("training set is empty"));
        }
        let total = self.config.total_steps();
        let until = until.min(total);
        if self.step == total {
            self.model.finish(&self.config)?;
        }
        if let Some(dir) = out {
            if self.step == 0 && self.history.is_empty() {
                checkpoint::save(self, dir)?;
            }
        }
        while self.step < until {
            self.advance(data)?;
            if self.step == total {
                self.model.finish(&self.config)?;
            }
            let cadence = self.config.checkpoint_every;
            let last = self.step == until;
            if let Some(dir) = out {
                if last || (cadence > 0 && self.step % cadence == 0) {
                    checkpoint::save(self, dir)?;
                }
            }
        }
        Ok(())
    }

    /// Runs exactly one step.
    pub fn advance(&mut self, data: &[EncodedSample]) -> Result<LossReport> {
        if self.model.prepare_step(self.step, &self.config)? {
            self.opt = AdamW::new(self.config.lr, self.config.weight_decay);
        }
        self.opt.lr = self.config.lr_at(self.step);
        let idx = batch_indices(data.len(), self.config.batch, self.config.seed, self.step);
        let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &data[i]).collect();
        let report = optimize_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.schedule,
            self.config.toggles,
            self.config.seed,
            self.step,
        )?;
        self.step += 1;
        self.history.push(report);
        if self.step % 100 == 0 || self.step == 1 {
            log::info!(
                "step {} loss {:.5} (image {:.5} depth {:.5} mask {:.5})",
                self.step,
                report.total,
                report.image,
                report.depth,
                report.mask
            );
        }
        Ok(report)
    }
}

/// Fresh stage-A session.
pub fn pretrain_session(model_config: ModelConfig, config: TrainConfig) -> Result<Session<BaseModel>> {
    let mut rng = seed::stream(config.seed, &[TAG_INIT]);
    let mut model = BaseModel::new(model_config, &mut rng)?;
    model.set_stage_a_trainable(false)?;
    Session::new(model, TrainConfig { stage: Stage::A, ..config })
}

/// Fresh stage-B session built from a stage-A model that has a mini branch.
pub fn finetune_session(base: &BaseModel, model_config: ModelConfig, config: TrainConfig) -> Result<Session<TideModel>> {
    if base.mini.is_none() {
        return Err(TideError::invalid("stage B needs a stage-A checkpoint with a mini branch"));
    }
    if config.toggles.tan && !model_config.tan {
        return Err(TideError::invalid("TAN toggled on but the model config disables TAN layers"));
    }
    let mut rng = seed::stream(config.seed, &[TAG_INIT, 1]);
    let mut model = base.into_tide(model_config, &mut rng)?;
    model.freeze_for_finetune();
    Session::new(model, TrainConfig { stage: Stage::B, ..config })
}

/// Mean of the last `window` total losses.
pub fn trailing_mean(history: &[LossReport], window: usize) -> Option<f64> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let tail = &history[history.len().saturating_sub(window)..];
    Some(tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64)
}
