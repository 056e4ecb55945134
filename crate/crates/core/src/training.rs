//! Pretraining of the image model, one-shot finetuning of the video model's
//! attention layers, and per-step null-text inversion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{add_noise, cfg_combine, ddim_coefficients, NoisePredictor, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::model::{forward, is_attention_param, ModelKind, ParamVars, Weights};
use crate::tensor::Array;
use crate::text::{TextEmbedding, Vocab};

/// Which parameters an optimisation run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFilter {
    All,
    /// Cross, spatio-temporal and temporal attention only.
    Attention,
}

impl ParamFilter {
    pub fn matches(self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::Attention => is_attention_param(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    pub trainable: ParamFilter,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least one".into()));
        }
        Ok(())
    }

    pub fn pretrain_default() -> Self {
        Self {
            steps: 9000,
            learning_rate: 2e-3,
            batch: 16,
            seed: 0,
            trainable: ParamFilter::All,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-3,
            batch: 1,
            seed: 0,
            trainable: ParamFilter::Attention,
        }
    }
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Array>, grads: &BTreeMap<String, Array>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            p.ensure_same_shape(g, name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Final weights and the per-step training loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub losses: Vec<f64>,
}

/// Standard normal entries drawn from `rng`.
pub fn normal_array(rng: &mut impl Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn collect_grads(tape: &Tape, loss: Var, p: &ParamVars, filter: ParamFilter) -> Result<BTreeMap<String, Array>> {
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, v) in p.iter() {
        if filter.matches(name) {
            let g = grads.take(*v).unwrap_or_else(|| Array::zeros(tape.value(*v).shape()));
            out.insert(name.clone(), g);
        }
    }
    Ok(out)
}

/// Text embeddings `[B, L, d]` for a batch of token id rows, built on the tape
/// from the model's token and position tables.
fn embed_batch(tape: &mut Tape, p: &ParamVars, ids: &[Vec<usize>]) -> Result<Var> {
    let (b, l) = (ids.len(), ids[0].len());
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    let tok = tape.embedding(p.get("text.token.w")?, &flat)?;
    let d = tape.value(tok).shape()[1];
    let tok = tape.reshape(tok, &[b, l * d])?;
    let pos = tape.reshape(p.get("text.pos.w")?, &[l * d])?;
    let emb = tape.add_bias(tok, pos)?;
    tape.reshape(emb, &[b, l, d])
}

/// Denoising loss of the image model on a batch; returns the loss and the
/// gradients of the trainable parameters.
pub fn pretrain_loss_and_grad(
    weights: &Weights,
    images: &Array,
    ids: &[Vec<usize>],
    times: &[usize],
    eps: &Array,
    schedule: &NoiseSchedule,
) -> Result<(f64, BTreeMap<String, Array>)> {
    let n = images.shape()[0];
    let mut noisy = Vec::with_capacity(images.len());
    for i in 0..n {
        noisy.extend_from_slice(add_noise(&images.index0(i), &eps.index0(i), times[i], schedule)?.data());
    }
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, weights, |_| true);
    let z = tape.constant(Array::new(images.shape(), noisy)?);
    let text = embed_batch(&mut tape, &p, ids)?;
    let pred = forward(&mut tape, weights, &p, z, times, text, None)?;
    let target = tape.constant(eps.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];
    Ok((value, collect_grads(&tape, loss, &p, ParamFilter::All)?))
}

/// Trains the image model on captioned frames `[C, H, W]`.
///
/// Each step draws `batch` samples, one timestep and one noise per sample;
/// a caption is replaced by the empty prompt with probability
/// `caption_dropout` so the model also learns the unconditional prediction.
pub fn pretrain_2d(
    init: Weights,
    data: &[(String, Array)],
    vocab: &Vocab,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    caption_dropout: f64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if init.kind != ModelKind::Image {
        return Err(Error::Config("pretraining expects image-model weights".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = init;
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let sample_shape = data[0].1.shape().to_vec();
    let empty = vocab.tokenize("", weights.config.max_tokens);
    for step in 0..config.steps {
        let mut images = Vec::with_capacity(config.batch);
        let mut ids = Vec::with_capacity(config.batch);
        let mut times = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let (caption, image) = &data[rng.gen_range(0..data.len())];
            images.push(image.clone());
            ids.push(if rng.gen::<f64>() < caption_dropout {
                empty.clone()
            } else {
                vocab.tokenize(caption, weights.config.max_tokens)
            });
            times.push(rng.gen_range(1..=schedule.train_steps));
        }
        let images = Array::stack(&images)?;
        let mut eps_shape = vec![config.batch];
        eps_shape.extend_from_slice(&sample_shape);
        let eps = normal_array(&mut rng, &eps_shape);
        let (loss, grads) = pretrain_loss_and_grad(&weights, &images, &ids, &times, &eps, schedule)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("pretraining loss at step {step}")));
        }
        losses.push(loss);
        adam.step(&mut weights.params, &grads)?;
    }
    Ok(TrainOutcome { weights, losses })
}

/// Denoising loss of the video model on one `(t, eps)` draw and the gradients
/// of the parameters selected by `filter`.
pub fn finetune_loss_and_grad(
    weights: &Weights,
    video: &Array,
    text: &Array,
    t: usize,
    eps: &Array,
    schedule: &NoiseSchedule,
    filter: ParamFilter,
) -> Result<(f64, BTreeMap<String, Array>)> {
    let z_t = add_noise(video, eps, t, schedule)?;
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, weights, |n| filter.matches(n));
    let z = tape.constant(z_t);
    let text = match text.shape() {
        [l, d] => text.clone().reshape(&[1, *l, *d])?,
        _ => text.clone(),
    };
    let text = tape.constant(text);
    let pred = forward(&mut tape, weights, &p, z, &[t], text, None)?;
    let target = tape.constant(eps.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];
    Ok((value, collect_grads(&tape, loss, &p, filter)?))
}

/// One-shot tuning of the video model on a single `(prompt, video)` pair.
///
/// `video: [F, C, H, W]` latents; `text: [L, d]`. Parameters outside
/// `config.trainable` are never touched.
pub fn finetune_one_shot(
    init: Weights,
    video: &Array,
    text: &Array,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if init.kind != ModelKind::Video {
        return Err(Error::Config("finetuning expects inflated video weights".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = init;
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let t = rng.gen_range(1..=schedule.train_steps);
        let eps = normal_array(&mut rng, video.shape());
        let (loss, grads) = finetune_loss_and_grad(&weights, video, text, t, &eps, schedule, config.trainable)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("finetuning loss at step {step}")));
        }
        losses.push(loss);
        adam.step(&mut weights.params, &grads)?;
    }
    Ok(TrainOutcome { weights, losses })
}

/// Mean denoising loss over a fixed set of `(t, eps)` draws; used to compare
/// a model before and after tuning on equal terms.
pub fn probe_loss(
    weights: &Weights,
    video: &Array,
    text: &Array,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let t = rng.gen_range(1..=schedule.train_steps);
        let eps = normal_array(&mut rng, video.shape());
        let z_t = add_noise(video, &eps, t, schedule)?;
        let pred = weights.predict(&z_t, t, text, None)?;
        total += pred.rms_diff(&eps)?.powi(2);
    }
    Ok(total / draws as f64)
}

/// One optimised null embedding per sampler step, highest timestep first.
#[derive(Debug, Clone, PartialEq)]
pub struct NullEmbeddingSet {
    pub per_step: Vec<TextEmbedding>,
}

impl NullEmbeddingSet {
    pub fn arrays(&self) -> Vec<Array> {
        self.per_step.iter().map(|e| e.embeddings.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtiConfig {
    pub inner_iters: usize,
    pub learning_rate: f64,
    pub guidance: f64,
}

impl Default for NtiConfig {
    fn default() -> Self {
        Self {
            inner_iters: 10,
            learning_rate: 1e-1,
            guidance: 7.5,
        }
    }
}

/// Loss values of every inner iteration, starting with the warm-start value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NtiLog {
    pub per_step: Vec<Vec<f64>>,
    /// Proposals rejected because they would have raised the loss.
    pub halvings: usize,
}

/// Fixed pieces of one null-text objective.
pub struct NtiStep<'a> {
    pub z: &'a Array,
    pub t: usize,
    /// `a z + b w eps_cond`, the part of the guided update that does not
    /// depend on the null embedding.
    pub fixed: &'a Array,
    /// Weight `b (1 - w)` of the unconditional prediction.
    pub null_weight: f64,
    pub target: &'a Array,
}

/// `|| step(z; null) - target ||^2` and its gradient with respect to `null: [L, d]`.
pub fn nti_loss_and_grad(weights: &Weights, step: &NtiStep<'_>, null: &Array) -> Result<(f64, Array)> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, weights, |_| false);
    let z = tape.constant(step.z.clone());
    let leaf = tape.leaf(null.clone(), true);
    let [l, d] = null.shape() else {
        return Err(Error::Shape("null embedding must be [L, d]".into()));
    };
    let text = tape.reshape(leaf, &[1, *l, *d])?;
    let eps_u = forward(&mut tape, weights, &p, z, &[step.t], text, None)?;
    let scaled = tape.scale(eps_u, step.null_weight);
    let fixed = tape.constant(step.fixed.clone());
    let next = tape.add(scaled, fixed)?;
    let target = tape.constant(step.target.clone());
    let mse = tape.mse(next, target)?;
    let loss = tape.scale(mse, step.target.len() as f64);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::non_finite(format!("null-text loss at timestep {}", step.t)));
    }
    let mut grads = tape.backward(loss)?;
    let g = grads.take(leaf).unwrap_or_else(|| Array::zeros(null.shape()));
    Ok((value, g))
}

/// Per-step optimisation of the null embedding so that guided sampling from
/// the inverted noise follows the inversion trajectory.
///
/// Steps run from the highest timestep down; each starts from the previous
/// step's result and takes `inner_iters` fixed-size gradient steps. A step
/// that would raise the loss is halved until it does not, so the recorded
/// loss never increases.
pub fn null_text_invert(
    weights: &Weights,
    schedule: &NoiseSchedule,
    inversion: &Trajectory,
    cond: &Array,
    null_init: &TextEmbedding,
    config: &NtiConfig,
) -> Result<(NullEmbeddingSet, NtiLog)> {
    let steps = schedule.num_sampler_steps();
    if inversion.len() != steps + 1 {
        return Err(Error::Config(format!(
            "inversion trajectory has {} states for {steps} sampler steps",
            inversion.len()
        )));
    }
    let w = config.guidance;
    let mut log = NtiLog::default();
    let mut null = null_init.embeddings.clone();
    let mut per_step = Vec::with_capacity(steps);
    let mut z_bar = inversion.last().z.clone();
    for i in 0..steps {
        let t = schedule.sampler_steps[i];
        let t_prev = schedule.prev_timestep(i);
        let target = &inversion
            .at_timestep(t_prev)
            .ok_or_else(|| Error::Config(format!("inversion has no state at timestep {t_prev}")))?
            .z;
        let eps_c = weights.predict(&z_bar, t, cond, None)?;
        if w == 1.0 {
            // guidance ignores the null branch
            per_step.push(null.clone());
            log.per_step.push(Vec::new());
            z_bar = crate::diffusion::ddim_step(&z_bar, &eps_c, t, t_prev, schedule)?;
            continue;
        }
        let (a, b) = ddim_coefficients(t, t_prev, schedule)?;
        let fixed = z_bar.lincomb(a, &eps_c, b * w)?;
        let step = NtiStep {
            z: &z_bar,
            t,
            fixed: &fixed,
            null_weight: b * (1.0 - w),
            target,
        };
        let (mut loss, mut grad) =
            nti_loss_and_grad(weights, &step, &null).map_err(|e| tag_step(e, i))?;
        let mut losses = vec![loss];
        for _ in 0..config.inner_iters {
            let mut lr = config.learning_rate;
            let mut accepted = false;
            for _ in 0..30 {
                let candidate = null.lincomb(1.0, &grad, -lr)?;
                let (c_loss, c_grad) = nti_loss_and_grad(weights, &step, &candidate).map_err(|e| tag_step(e, i))?;
                if c_loss <= loss {
                    null = candidate;
                    loss = c_loss;
                    grad = c_grad;
                    accepted = true;
                    break;
                }
                log.halvings += 1;
                lr *= 0.5;
            }
            losses.push(loss);
            if !accepted {
                break;
            }
        }
        log.per_step.push(losses);
        per_step.push(null.clone());
        let eps_u = weights.predict(&z_bar, t, &null, None)?;
        let eps = cfg_combine(&eps_u, &eps_c, w)?;
        z_bar = crate::diffusion::ddim_step(&z_bar, &eps, t, t_prev, schedule)?;
        if !z_bar.all_finite() {
            return Err(Error::non_finite(format!("null-text trajectory at sampler step {i}")));
        }
    }
    let per_step = per_step
        .into_iter()
        .map(|embeddings| TextEmbedding {
            token_ids: null_init.token_ids.clone(),
            embeddings,
            null_flag: true,
        })
        .collect();
    Ok((NullEmbeddingSet { per_step }, log))
}

fn tag_step(e: Error, index: usize) -> Error {
    match e {
        Error::NonFinite { location } => Error::non_finite(format!("{location} (sampler step {index})")),
        other => other,
    }
}

/// `step,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{l}", i + 1)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddim_invert, make_schedule, BetaKind};
    use crate::model::{inflate, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            size: 8,
            base_channels: 4,
            coarse_channels: 4,
            text_dim: 4,
            max_tokens: 4,
            time_features: 4,
            time_dim: 4,
            attention_blocks: vec!["mid".into()],
            ..ModelConfig::default()
        }
    }

    fn with_live_head(mut w: Weights, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in w.params.get_mut("conv_out.w").unwrap().data_mut() {
            *x = rng.gen_range(-0.3..0.3);
        }
        w
    }

    fn schedule() -> NoiseSchedule {
        make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear, 5).unwrap()
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let w = Weights::init(&tiny(), 1).unwrap();
        let data = vec![("a red square".to_owned(), Array::full(&[4, 8, 8], 0.5))];
        let cfg = TrainConfig { steps: 0, ..TrainConfig::pretrain_default() };
        let out = pretrain_2d(w.clone(), &data, &Vocab::shipped(), &schedule(), &cfg, 0.1).unwrap();
        assert_eq!(out.weights, w);
        assert!(out.losses.is_empty());

        let w3 = inflate(&w).unwrap();
        let video = Array::zeros(&[2, 4, 8, 8]);
        let text = w3.embed_tokens(&[1, 3, 0, 0]).unwrap();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::finetune_default() };
        assert_eq!(finetune_one_shot(w3.clone(), &video, &text, &schedule(), &cfg).unwrap().weights, w3);
    }

    #[test]
    fn finetune_touches_only_attention() {
        let w3 = inflate(&with_live_head(Weights::init(&tiny(), 2).unwrap(), 3)).unwrap();
        let video = Array::from_fn(&[2, 4, 8, 8], |i| ((i * 13 % 7) as f64 - 3.0) / 3.0);
        let text = w3.embed_tokens(&[1, 3, 6, 0]).unwrap();
        let cfg = TrainConfig { steps: 3, ..TrainConfig::finetune_default() };
        let frozen = |n: &str| !is_attention_param(n);
        let out = finetune_one_shot(w3.clone(), &video, &text, &schedule(), &cfg).unwrap();
        assert_eq!(out.weights.hash(frozen), w3.hash(frozen));
        assert_ne!(out.weights.hash(is_attention_param), w3.hash(is_attention_param));
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = BTreeMap::from([("x".to_owned(), Array::new(&[2], vec![1.0, -1.0]).unwrap())]);
        let grads = BTreeMap::from([("x".to_owned(), Array::new(&[2], vec![0.3, -20.0]).unwrap())]);
        Adam::new(0.1).step(&mut params, &grads).unwrap();
        let x = params["x"].data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn nti_with_unit_guidance_returns_init() {
        let w3 = inflate(&with_live_head(Weights::init(&tiny(), 4).unwrap(), 5)).unwrap();
        let s = schedule();
        let x0 = Array::from_fn(&[2, 4, 8, 8], |i| (i as f64 * 0.37).sin());
        let cond = w3.embed_tokens(&[1, 3, 6, 14]).unwrap();
        let null = TextEmbedding {
            token_ids: vec![1, 0, 0, 0],
            embeddings: w3.embed_tokens(&[1, 0, 0, 0]).unwrap(),
            null_flag: true,
        };
        let inv = ddim_invert(&w3, &s, &x0, &cond).unwrap();
        let cfg = NtiConfig { guidance: 1.0, ..NtiConfig::default() };
        let (set, _) = null_text_invert(&w3, &s, &inv, &cond, &null, &cfg).unwrap();
        assert_eq!(set.per_step.len(), 5);
        assert!(set.per_step.iter().all(|e| e.embeddings == null.embeddings && e.null_flag));
    }

    #[test]
    fn nti_losses_never_increase() {
        let w3 = inflate(&with_live_head(Weights::init(&tiny(), 6).unwrap(), 7)).unwrap();
        let s = schedule();
        let x0 = Array::from_fn(&[2, 4, 8, 8], |i| (i as f64 * 0.21).cos());
        let cond = w3.embed_tokens(&[1, 3, 6, 14]).unwrap();
        let null = TextEmbedding {
            token_ids: vec![1, 0, 0, 0],
            embeddings: w3.embed_tokens(&[1, 0, 0, 0]).unwrap(),
            null_flag: true,
        };
        let inv = ddim_invert(&w3, &s, &x0, &cond).unwrap();
        let cfg = NtiConfig { inner_iters: 4, learning_rate: 0.5, guidance: 7.5 };
        let (set, log) = null_text_invert(&w3, &s, &inv, &cond, &null, &cfg).unwrap();
        assert_eq!(set.per_step.len(), 5);
        for losses in &log.per_step {
            assert!(losses.windows(2).all(|p| p[1] <= p[0]), "{losses:?}");
        }
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.5, 0.25]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss\n1,0.5\n2,0.25\n");
    }
}
