//! The two-stage editing procedure on latents.
//!
//! Stage one inflates the image model and tunes its attention layers on the
//! source video. Stage two inverts the video with deterministic sampling,
//! optimises per-step null embeddings, resamples the source while recording
//! its attention, and samples the edit with injected maps and blending.

use crate::blending::{blend_latents, compute_blend_mask, BlendInputs, BlendMask};
use crate::control::{align_tokens, InjectionConfig, InjectionController, SourceRecorder, TokenAlignment};
use crate::diffusion::{
    add_noise, ddim_invert, ddim_sample, ddim_sample_from, NoHooks, NoiseSchedule, NullText, SamplerHooks, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{inflate, AttentionHook, AttnType, Weights};
use crate::tensor::Array;
use crate::text::{TextEmbedding, Vocab};
use crate::training::{finetune_one_shot, null_text_invert, NtiConfig, NtiLog, NullEmbeddingSet, TrainConfig};

/// Empty-prompt embedding used to start null-text optimisation.
pub fn null_embedding(weights: &Weights, vocab: &Vocab) -> Result<TextEmbedding> {
    weights.encode_text("", vocab)
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub weights: Weights,
    pub losses: Vec<f64>,
}

/// Inflates the image model and tunes its attention on `(prompt, video)`.
pub fn tune(image: &Weights, video: &Array, prompt: &TextEmbedding, schedule: &NoiseSchedule, config: &TrainConfig) -> Result<Tuned> {
    let video_model = inflate(image)?;
    let out = finetune_one_shot(video_model, video, &prompt.embeddings, schedule, config)?;
    Ok(Tuned {
        weights: out.weights,
        losses: out.losses,
    })
}

#[derive(Debug, Clone)]
pub struct Inversion {
    /// `z_0 .. z_T`, increasing timestep.
    pub trajectory: Trajectory,
    pub nulls: NullEmbeddingSet,
    pub nti_log: NtiLog,
    pub cond: TextEmbedding,
    pub null_init: TextEmbedding,
}

impl Inversion {
    pub fn noise(&self) -> &Array {
        &self.trajectory.last().z
    }
}

/// Deterministic inversion under the source prompt followed by null-text
/// optimisation at the editing guidance scale.
pub fn invert(
    weights: &Weights,
    schedule: &NoiseSchedule,
    video: &Array,
    cond: &TextEmbedding,
    null_init: &TextEmbedding,
    nti: &NtiConfig,
) -> Result<Inversion> {
    let trajectory = ddim_invert(weights, schedule, video, &cond.embeddings).map_err(|e| e.in_phase("invert"))?;
    let (nulls, nti_log) = null_text_invert(weights, schedule, &trajectory, &cond.embeddings, null_init, nti)
        .map_err(|e| e.in_phase("null-text inversion"))?;
    Ok(Inversion {
        trajectory,
        nulls,
        nti_log,
        cond: cond.clone(),
        null_init: null_init.clone(),
    })
}

/// Guided resampling of the source from the inverted noise.
pub struct Reconstruction {
    pub trajectory: Trajectory,
    pub recorder: SourceRecorder,
}

impl Reconstruction {
    pub fn latent(&self) -> &Array {
        &self.trajectory.last().z
    }
}

/// Source branch: samples from `z_T` with the optimised nulls and records the
/// conditional-pass attention of every step.
pub fn reconstruct(weights: &Weights, schedule: &NoiseSchedule, inv: &Inversion, guidance: f64) -> Result<Reconstruction> {
    let nulls = inv.nulls.arrays();
    let mut recorder = SourceRecorder::default();
    let trajectory = ddim_sample(
        weights,
        schedule,
        inv.noise(),
        &inv.cond.embeddings,
        NullText::PerStep(&nulls),
        guidance,
        &mut recorder,
    )?;
    Ok(Reconstruction { trajectory, recorder })
}

/// Reconstruction with the plain empty-prompt null at every step.
pub fn reconstruct_without_nti(weights: &Weights, schedule: &NoiseSchedule, inv: &Inversion, guidance: f64) -> Result<Trajectory> {
    ddim_sample(
        weights,
        schedule,
        inv.noise(),
        &inv.cond.embeddings,
        NullText::Shared(&inv.null_init.embeddings),
        guidance,
        &mut NoHooks,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Off,
    /// Per-frame thresholding of cross-attention only.
    FrameWise,
    /// Cross-attention propagated through spatio-temporal attention.
    Temporal,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub trajectory: Trajectory,
    /// Blending mask of every blended step, keyed by step index.
    pub masks: Vec<(usize, BlendMask)>,
    pub alignment: TokenAlignment,
    /// Attention hook calls made on the edit branch.
    pub hook_calls: usize,
}

impl EditOutput {
    pub fn latent(&self) -> &Array {
        &self.trajectory.last().z
    }

    pub fn final_mask(&self) -> Option<&BlendMask> {
        self.masks.last().map(|(_, m)| m)
    }
}

struct EditHooks<'a> {
    controller: InjectionController<'a>,
    source: &'a Trajectory,
    mode: BlendMode,
    blend_from: usize,
    tau: f64,
    masks: Vec<(usize, BlendMask)>,
}

impl SamplerHooks for EditHooks<'_> {
    fn begin_step(&mut self, index: usize, _t: usize) -> Result<()> {
        self.controller.begin_step(index);
        Ok(())
    }

    fn attention_hook(&mut self) -> Option<&mut dyn AttentionHook> {
        Some(&mut self.controller)
    }

    fn after_step(&mut self, index: usize, z: &mut Array) -> Result<()> {
        if self.mode == BlendMode::Off || index < self.blend_from {
            return Ok(());
        }
        let src_step = self.controller.source().step(index)?;
        let cross_src = src_step.records(AttnType::Cross, index)?;
        let cross_tgt = self.controller.effective.records(AttnType::Cross, index)?;
        let st = self.controller.effective.records(AttnType::SpatioTemporal, index)?;
        let cross_src: Vec<_> = cross_src.iter().collect();
        let cross_tgt: Vec<_> = cross_tgt.iter().collect();
        let st: Vec<_> = st.iter().collect();
        let alignment = self.controller.alignment();
        let inputs = BlendInputs {
            cross_src: &cross_src,
            cross_tgt: &cross_tgt,
            st: &st,
            src_tokens: &alignment.src_edit_indices,
            tgt_tokens: &alignment.tgt_edit_indices,
        };
        let mask = compute_blend_mask(&inputs, self.tau, self.mode == BlendMode::Temporal)?;
        let recon = &self
            .source
            .states
            .get(index + 1)
            .ok_or_else(|| Error::MissingRecord(format!("source latent after step {index}")))?
            .z;
        *z = blend_latents(recon, z, &mask)?;
        self.masks.push((index, mask));
        Ok(())
    }
}

/// Edit branch: samples the target prompt from the inverted noise, injecting
/// the recorded source attention and blending with the source trajectory.
#[allow(clippy::too_many_arguments)]
pub fn edit_branch(
    weights: &Weights,
    schedule: &NoiseSchedule,
    inv: &Inversion,
    recon: &Reconstruction,
    target: &TextEmbedding,
    injection: &InjectionConfig,
    mode: BlendMode,
    guidance: f64,
) -> Result<EditOutput> {
    let steps = schedule.num_sampler_steps();
    let alignment = align_tokens(&inv.cond.token_ids, &target.token_ids);
    let controller = InjectionController::new(&recon.recorder, injection.clone(), alignment.clone(), steps)?;
    let mut hooks = EditHooks {
        controller,
        source: &recon.trajectory,
        mode,
        blend_from: injection.blend_start_step(steps),
        tau: injection.blend_threshold,
        masks: Vec::new(),
    };
    let nulls = inv.nulls.arrays();
    let trajectory = ddim_sample(
        weights,
        schedule,
        inv.noise(),
        &target.embeddings,
        NullText::PerStep(&nulls),
        guidance,
        &mut hooks,
    )?;
    Ok(EditOutput {
        trajectory,
        hook_calls: hooks.controller.invocations,
        masks: hooks.masks,
        alignment,
    })
}

/// Noises the source to sampler step `t0` counted from the clean end and
/// denoises it with the target prompt; `t0 = S` starts from pure noise.
#[allow(clippy::too_many_arguments)]
pub fn sdedit(
    weights: &Weights,
    schedule: &NoiseSchedule,
    source: &Array,
    target: &TextEmbedding,
    null: &TextEmbedding,
    t0: usize,
    noise: &Array,
    guidance: f64,
) -> Result<Array> {
    let steps = schedule.num_sampler_steps();
    if t0 > steps {
        return Err(Error::Config(format!("sdedit start {t0} beyond {steps} steps")));
    }
    if t0 == 0 {
        return Ok(source.clone());
    }
    let start = steps - t0;
    let z = if t0 == steps {
        noise.clone()
    } else {
        add_noise(source, noise, schedule.sampler_steps[start], schedule)?
    };
    let traj = ddim_sample_from(
        weights,
        schedule,
        &z,
        start,
        &target.embeddings,
        NullText::Shared(&null.embeddings),
        guidance,
        &mut NoHooks,
    )?;
    Ok(traj.last().z.clone())
}

/// Samples the target prompt from Gaussian noise with no control.
pub fn generate(
    weights: &Weights,
    schedule: &NoiseSchedule,
    target: &TextEmbedding,
    null: &TextEmbedding,
    noise: &Array,
    guidance: f64,
) -> Result<Array> {
    let traj = ddim_sample(
        weights,
        schedule,
        noise,
        &target.embeddings,
        NullText::Shared(&null.embeddings),
        guidance,
        &mut NoHooks,
    )?;
    Ok(traj.last().z.clone())
}
