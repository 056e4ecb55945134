//! Noise schedules, forward noising, deterministic DDIM sampling and its
//! inverse, and classifier-free guidance.
//!
//! Timesteps run over `1..=T`. Timestep `0` is the data boundary where the
//! cumulative signal level is exactly one, so the last sampling step lands on
//! the clean-sample prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionHook;
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    ScaledLinear,
}

impl std::str::FromStr for BetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaKind::Linear),
            "scaled_linear" => Ok(BetaKind::ScaledLinear),
            other => Err(Error::Config(format!("unknown beta schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `alpha_bars[t - 1]` is the cumulative product up to timestep `t`.
    pub alpha_bars: Vec<f64>,
    /// Sampler timesteps, largest first.
    pub sampler_steps: Vec<usize>,
}

pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaKind,
    sampler_steps: usize,
) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::Config("diffusion steps must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if sampler_steps == 0 || sampler_steps > train_steps {
        return Err(Error::Config(format!(
            "sampler steps must be in 1..={train_steps}, got {sampler_steps}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if train_steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (train_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| match kind {
            BetaKind::Linear => lerp(beta_start, beta_end, i),
            BetaKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    NoiseSchedule::from_betas(betas, sampler_steps)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, sampler_steps: usize) -> Result<Self> {
        let train_steps = betas.len();
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if sampler_steps == 0 || sampler_steps > train_steps {
            return Err(Error::Config(format!(
                "sampler steps must be in 1..={train_steps}, got {sampler_steps}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        // floor(i * T / S) for i = S..1 is strictly decreasing and ends at >= 1.
        let sampler_steps = (1..=sampler_steps)
            .rev()
            .map(|i| i * train_steps / sampler_steps)
            .collect();
        Ok(Self {
            train_steps,
            betas,
            alphas,
            alpha_bars,
            sampler_steps,
        })
    }

    /// Cumulative signal level at timestep `t`; the boundary `t = 0` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn num_sampler_steps(&self) -> usize {
        self.sampler_steps.len()
    }

    /// Timestep reached after sampler step `index` (0 after the last one).
    pub fn prev_timestep(&self, index: usize) -> usize {
        self.sampler_steps.get(index + 1).copied().unwrap_or(0)
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.train_steps {
            return Err(Error::Config(format!(
                "timestep {t} outside 0..={}",
                self.train_steps
            )));
        }
        Ok(())
    }
}

/// A latent video `[F, C, H, W]` tagged with where it sits on the sampler grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array,
    /// Sampler step index of `t`; the data endpoint has index `S`.
    pub t_index: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<LatentState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &LatentState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn first(&self) -> &LatentState {
        &self.states[0]
    }

    pub fn at_timestep(&self, t: usize) -> Option<&LatentState> {
        self.states.iter().find(|s| s.t == t)
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.t).collect()
    }
}

/// Forward noising `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(x0: &Array, eps: &Array, t: usize, schedule: &NoiseSchedule) -> Result<Array> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Classifier-free guidance `u + w (c - u)`.
pub fn cfg_combine(eps_uncond: &Array, eps_cond: &Array, w: f64) -> Result<Array> {
    eps_uncond.ensure_same_shape(eps_cond, "cfg_combine")?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| u + w * (c - u))
        .collect();
    Array::new(eps_uncond.shape(), data)
}

/// Coefficients `(a, b)` with `ddim_step(z, eps) = a z + b eps`.
pub fn ddim_coefficients(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    schedule.check_timestep(t)?;
    schedule.check_timestep(t_prev)?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if ab_t <= 0.0 {
        return Err(Error::non_finite(format!("alpha_bar({t}) = 0")));
    }
    let a = (ab_p / ab_t).sqrt();
    let b = (1.0 - ab_p).sqrt() - a * (1.0 - ab_t).sqrt();
    Ok((a, b))
}

/// One deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step(z_t: &Array, eps_hat: &Array, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Array> {
    z_t.ensure_same_shape(eps_hat, "ddim_step")?;
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    schedule.check_timestep(t)?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if ab_t <= 0.0 {
        return Err(Error::non_finite(format!("alpha_bar({t}) = 0")));
    }
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| {
            let x0 = (z - n_t * e) / s_t;
            s_p * x0 + n_p * e
        })
        .collect();
    Array::new(z_t.shape(), data)
}

/// Exact algebraic inverse of [`ddim_step`] for the same `eps_hat`.
pub fn ddim_invert_step(
    z_prev: &Array,
    eps_hat: &Array,
    t_prev: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array> {
    z_prev.ensure_same_shape(eps_hat, "ddim_invert_step")?;
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_invert_step needs t_prev < t, got {t_prev} -> {t}")));
    }
    schedule.check_timestep(t)?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if ab_t <= 0.0 || ab_p <= 0.0 {
        return Err(Error::non_finite(format!("alpha_bar vanishes between {t_prev} and {t}")));
    }
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let data = z_prev
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| {
            let x0 = (z - n_p * e) / s_p;
            s_t * x0 + n_t * e
        })
        .collect();
    Array::new(z_prev.shape(), data)
}

/// An ε-prediction network `ε(z_t, t, text)` over whole videos `[F, C, H, W]`.
pub trait NoisePredictor {
    fn predict(&self, z: &Array, t: usize, text: &Array, hook: Option<&mut dyn AttentionHook>) -> Result<Array>;
}

/// Null-text embeddings for the unconditional branch of guidance.
#[derive(Debug, Clone, Copy)]
pub enum NullText<'a> {
    Shared(&'a Array),
    PerStep(&'a [Array]),
}

impl NullText<'_> {
    fn at(&self, index: usize) -> Result<&Array> {
        match self {
            NullText::Shared(a) => Ok(a),
            NullText::PerStep(v) => v
                .get(index)
                .ok_or_else(|| Error::Config(format!("no null embedding for sampler step {index}"))),
        }
    }
}

/// Per-step callbacks of [`ddim_sample`].
///
/// The attention hook is only attached to the conditional pass of guidance.
pub trait SamplerHooks {
    fn begin_step(&mut self, _index: usize, _t: usize) -> Result<()> {
        Ok(())
    }

    fn attention_hook(&mut self) -> Option<&mut dyn AttentionHook> {
        None
    }

    /// Called with the freshly updated latent; may overwrite it (blending).
    fn after_step(&mut self, _index: usize, _z: &mut Array) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl SamplerHooks for NoHooks {}

/// Deterministic guided sampling over the schedule's sampler grid.
///
/// Returns `S + 1` states from `z_T` down to the data endpoint. With `w == 1`
/// the unconditional query is skipped since guidance ignores it.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_t: &Array,
    cond: &Array,
    nulls: NullText<'_>,
    w: f64,
    hooks: &mut dyn SamplerHooks,
) -> Result<Trajectory> {
    ddim_sample_from(model, schedule, z_t, 0, cond, nulls, w, hooks)
}

/// [`ddim_sample`] starting at sampler step `start` rather than at `z_T`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_from(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_start: &Array,
    start: usize,
    cond: &Array,
    nulls: NullText<'_>,
    w: f64,
    hooks: &mut dyn SamplerHooks,
) -> Result<Trajectory> {
    let steps = schedule.num_sampler_steps();
    if start > steps {
        return Err(Error::Config(format!("start step {start} beyond {steps}")));
    }
    if !z_start.all_finite() {
        return Err(Error::non_finite(format!("initial latent at sampler step {start}")));
    }
    let mut z = z_start.clone();
    let mut states = vec![LatentState {
        z: z.clone(),
        t_index: start,
        t: if start == steps { 0 } else { schedule.sampler_steps[start] },
    }];
    for i in start..steps {
        let t = schedule.sampler_steps[i];
        let t_prev = schedule.prev_timestep(i);
        hooks.begin_step(i, t)?;
        let eps_cond = model.predict(&z, t, cond, hooks.attention_hook())?;
        let eps = if w == 1.0 {
            eps_cond
        } else {
            let eps_uncond = model.predict(&z, t, nulls.at(i)?, None)?;
            cfg_combine(&eps_uncond, &eps_cond, w)?
        };
        if eps.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "model output {:?} for latent {:?} at sampler step {i}",
                eps.shape(),
                z.shape()
            )));
        }
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        hooks.after_step(i, &mut z)?;
        if !z.all_finite() {
            return Err(Error::non_finite(format!("latent after sampler step {i}")));
        }
        states.push(LatentState {
            z: z.clone(),
            t_index: i + 1,
            t: t_prev,
        });
    }
    Ok(Trajectory { states })
}

/// DDIM inversion under the conditional prediction (guidance scale 1).
///
/// Returns `S + 1` states from `z_0 = x0` up to `z_T`; the prediction for the
/// step `t_prev -> t` is queried at `(z_{t_prev}, t)`.
pub fn ddim_invert(model: &dyn NoisePredictor, schedule: &NoiseSchedule, x0: &Array, cond: &Array) -> Result<Trajectory> {
    let steps = schedule.num_sampler_steps();
    if !x0.all_finite() {
        return Err(Error::non_finite("inversion input"));
    }
    let mut z = x0.clone();
    let mut states = vec![LatentState {
        z: z.clone(),
        t_index: steps,
        t: 0,
    }];
    for i in (0..steps).rev() {
        let t = schedule.sampler_steps[i];
        let t_prev = schedule.prev_timestep(i);
        let eps = model.predict(&z, t, cond, None)?;
        if eps.shape() != z.shape() {
            return Err(Error::Shape(format!("model output {:?} at inversion step {i}", eps.shape())));
        }
        z = ddim_invert_step(&z, &eps, t_prev, t, schedule)?;
        if !z.all_finite() {
            return Err(Error::non_finite(format!("latent after inversion step {i}")));
        }
        states.push(LatentState {
            z: z.clone(),
            t_index: i,
            t,
        });
    }
    Ok(Trajectory { states })
}
