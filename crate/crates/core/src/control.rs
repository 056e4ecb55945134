//! Recording source-branch attention and replaying it into the edit branch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::SamplerHooks;
use crate::error::{Error, Result};
use crate::model::{head_average, AttentionHook, AttentionRecord, AttentionSite, AttnType};
use crate::tensor::Array;
use crate::text::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub dur_cross: f64,
    pub dur_st: f64,
    pub dur_temporal: f64,
    pub blend_threshold: f64,
    /// Fraction of the denoising steps that run before blending starts.
    pub blend_start: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            dur_cross: 0.2,
            dur_st: 0.5,
            dur_temporal: 0.8,
            blend_threshold: 0.25,
            blend_start: 0.0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dur_cross", self.dur_cross),
            ("dur_st", self.dur_st),
            ("dur_temporal", self.dur_temporal),
            ("blend_threshold", self.blend_threshold),
            ("blend_start", self.blend_start),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn duration(&self, kind: AttnType) -> f64 {
        match kind {
            AttnType::Cross => self.dur_cross,
            AttnType::SpatioTemporal => self.dur_st,
            AttnType::Temporal => self.dur_temporal,
        }
    }

    /// First denoising step at which blending is applied.
    pub fn blend_start_step(&self, total_steps: usize) -> usize {
        step_count(self.blend_start, total_steps)
    }
}

fn step_count(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

/// Whether maps of `kind` are injected at denoising step `step_index`
/// (step 0 is the noisiest).
pub fn should_inject(kind: AttnType, step_index: usize, total_steps: usize, config: &InjectionConfig) -> Result<bool> {
    if step_index >= total_steps {
        return Err(Error::Config(format!("step {step_index} of {total_steps}")));
    }
    Ok(step_index < step_count(config.duration(kind), total_steps))
}

/// Correspondence between source and target prompt tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenAlignment {
    /// `(source, target)` positions of shared tokens, increasing in both.
    pub pairs: Vec<(usize, usize)>,
    pub src_edit_indices: Vec<usize>,
    pub tgt_edit_indices: Vec<usize>,
}

/// Longest-common-subsequence alignment of the content tokens; trailing
/// padding is paired position by position and never counts as an edit.
pub fn align_tokens(src: &[usize], tgt: &[usize]) -> TokenAlignment {
    let content = |ids: &[usize]| ids.iter().take_while(|&&i| i != PAD).count();
    let (n, m) = (content(src), content(tgt));
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if src[i] == tgt[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut out = TokenAlignment::default();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if src[i] == tgt[j] {
            out.pairs.push((i, j));
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            out.src_edit_indices.push(i);
            i += 1;
        } else {
            out.tgt_edit_indices.push(j);
            j += 1;
        }
    }
    out.src_edit_indices.extend(i..n);
    out.tgt_edit_indices.extend(j..m);
    out.pairs.extend((n..src.len()).zip(m..tgt.len()));
    out
}

/// Target map whose aligned columns are taken from the source map.
///
/// Works on any `[.., L]` layout. When columns from both maps are mixed each
/// row is renormalised so it stays a distribution; a full identity alignment
/// returns the source map unchanged.
pub fn inject_cross(src: &Array, tgt: &Array, alignment: &TokenAlignment) -> Result<Array> {
    src.ensure_same_shape(tgt, "inject_cross")?;
    let l = *tgt.shape().last().ok_or_else(|| Error::Shape("scalar attention map".into()))?;
    if alignment.pairs.iter().any(|&(i, j)| i >= l || j >= l) {
        return Err(Error::Shape(format!("alignment beyond {l} tokens")));
    }
    let identity = alignment.pairs.len() == l && alignment.pairs.iter().all(|&(i, j)| i == j);
    if identity {
        return Ok(src.clone());
    }
    if alignment.pairs.is_empty() {
        return Ok(tgt.clone());
    }
    let mut out = tgt.clone();
    for (row_out, row_src) in out.data_mut().chunks_mut(l).zip(src.data().chunks(l)) {
        for &(i, j) in &alignment.pairs {
            row_out[j] = row_src[i];
        }
        let s: f64 = row_out.iter().sum();
        if s > 0.0 {
            for v in row_out.iter_mut() {
                *v /= s;
            }
        }
    }
    Ok(out)
}

/// Whole-map replacement used for spatio-temporal and temporal attention.
pub fn inject_full(src: &Array, tgt: &Array) -> Result<Array> {
    src.ensure_same_shape(tgt, "inject_full")?;
    Ok(src.clone())
}

/// Per-head attention maps of every denoising step, keyed by layer name.
#[derive(Debug, Clone, Default)]
pub struct StepMaps {
    pub maps: BTreeMap<String, (AttnType, Array)>,
}

impl StepMaps {
    /// Head-averaged records of one kind, in layer order.
    pub fn records(&self, kind: AttnType, step_index: usize) -> Result<Vec<AttentionRecord>> {
        self.maps
            .iter()
            .filter(|(_, (k, _))| *k == kind)
            .map(|(layer, (k, probs))| {
                Ok(AttentionRecord {
                    layer_id: layer.clone(),
                    attn_type: *k,
                    step_index,
                    map: head_average(probs)?,
                })
            })
            .collect()
    }
}

/// Stores the conditional-pass attention of the source branch.
#[derive(Debug, Default)]
pub struct SourceRecorder {
    current: usize,
    pub steps: Vec<StepMaps>,
}

impl SourceRecorder {
    pub fn get(&self, step: usize, layer: &str) -> Result<&Array> {
        self.steps
            .get(step)
            .and_then(|s| s.maps.get(layer))
            .map(|(_, a)| a)
            .ok_or_else(|| Error::MissingRecord(format!("{layer} at step {step}")))
    }

    pub fn step(&self, step: usize) -> Result<&StepMaps> {
        self.steps
            .get(step)
            .ok_or_else(|| Error::MissingRecord(format!("source step {step}")))
    }
}

impl AttentionHook for SourceRecorder {
    fn on_attention(&mut self, site: &AttentionSite<'_>, probs: &Array) -> Result<Option<Array>> {
        if self.steps.len() <= self.current {
            self.steps.resize_with(self.current + 1, StepMaps::default);
        }
        self.steps[self.current]
            .maps
            .insert(site.layer.to_owned(), (site.kind, probs.clone()));
        Ok(None)
    }
}

impl SamplerHooks for SourceRecorder {
    fn begin_step(&mut self, index: usize, _t: usize) -> Result<()> {
        self.current = index;
        Ok(())
    }

    fn attention_hook(&mut self) -> Option<&mut dyn AttentionHook> {
        Some(self)
    }
}

/// Replays source maps into the edit branch according to the injection
/// durations and keeps the effective maps of the current step for blending.
pub struct InjectionController<'a> {
    source: &'a SourceRecorder,
    config: InjectionConfig,
    alignment: TokenAlignment,
    total_steps: usize,
    current: usize,
    /// Maps actually used by the edit branch at the current step.
    pub effective: StepMaps,
    pub invocations: usize,
}

impl<'a> InjectionController<'a> {
    pub fn new(
        source: &'a SourceRecorder,
        config: InjectionConfig,
        alignment: TokenAlignment,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            source,
            config,
            alignment,
            total_steps,
            current: 0,
            effective: StepMaps::default(),
            invocations: 0,
        })
    }

    pub fn begin_step(&mut self, index: usize) {
        self.current = index;
        self.effective.maps.clear();
    }

    pub fn current_step(&self) -> usize {
        self.current
    }

    pub fn alignment(&self) -> &TokenAlignment {
        &self.alignment
    }

    pub fn config(&self) -> &InjectionConfig {
        &self.config
    }

    pub fn source(&self) -> &SourceRecorder {
        self.source
    }
}

impl AttentionHook for InjectionController<'_> {
    fn on_attention(&mut self, site: &AttentionSite<'_>, probs: &Array) -> Result<Option<Array>> {
        self.invocations += 1;
        let replaced = if should_inject(site.kind, self.current, self.total_steps, &self.config)? {
            let src = self.source.get(self.current, site.layer)?;
            Some(match site.kind {
                AttnType::Cross => inject_cross(src, probs, &self.alignment)?,
                AttnType::SpatioTemporal | AttnType::Temporal => inject_full(src, probs)?,
            })
        } else {
            None
        };
        let used = replaced.as_ref().unwrap_or(probs).clone();
        self.effective.maps.insert(site.layer.to_owned(), (site.kind, used));
        Ok(replaced)
    }
}
