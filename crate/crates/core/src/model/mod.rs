//! The toy text-conditioned denoiser and its inflated video variant.
//!
//! The image model is a two-level UNet: 3x3 residual conv blocks at full
//! resolution and transformer blocks (self-attention, cross-attention to the
//! prompt, feed-forward) at the coarse level. Inflation turns every 3x3 kernel
//! into a 1x3x3 kernel, reuses self-attention as sparse spatio-temporal
//! attention over the first and previous frames, and appends a temporal
//! attention whose output projection starts at zero.

mod unet;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub use unet::{forward, forward3d, timestep_features, ParamVars};
pub use weights::{inflate, is_attention_param, ModelKind, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub channels: usize,
    /// Latent height and width.
    pub size: usize,
    /// Feature channels at full resolution.
    pub base_channels: usize,
    /// Feature channels at the coarse (attention) resolution.
    pub coarse_channels: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    pub time_dim: usize,
    /// Names of the transformer blocks at the coarse resolution.
    pub attention_blocks: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            size: 16,
            base_channels: 16,
            coarse_channels: 32,
            heads: 2,
            text_dim: 32,
            max_tokens: 8,
            vocab_size: crate::text::Vocab::shipped().len(),
            time_features: 32,
            time_dim: 64,
            attention_blocks: vec!["down1".into(), "mid".into()],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 != 0 || self.size == 0 {
            return Err(Error::Config("latent size must be even and positive".into()));
        }
        if self.heads == 0 || self.coarse_channels % self.heads != 0 {
            return Err(Error::Config("coarse channels must be divisible by heads".into()));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::Config("time features must be even".into()));
        }
        if self.channels == 0 || self.base_channels == 0 || self.max_tokens == 0 || self.vocab_size < 3 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the coarse attention grid.
    pub fn coarse_size(&self) -> usize {
        self.size / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnType {
    Cross,
    /// Self-attention of the image model, sparse spatio-temporal once inflated.
    #[serde(rename = "st")]
    SpatioTemporal,
    Temporal,
}

impl AttnType {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnType::Cross => "cross",
            AttnType::SpatioTemporal => "st",
            AttnType::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for AttnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(AttnType::Cross),
            "st" => Ok(AttnType::SpatioTemporal),
            "temporal" => Ok(AttnType::Temporal),
            other => Err(Error::Config(format!("unknown attention type `{other}`"))),
        }
    }
}

/// Where an attention map was produced.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite<'a> {
    /// Block-qualified layer name, e.g. `down1.attn2`.
    pub layer: &'a str,
    pub kind: AttnType,
}

/// Observes, and optionally replaces, attention probabilities during a forward pass.
///
/// `probs` has shape `[B, heads, queries, keys]`. Returning `Some` substitutes
/// the map used to weight the values.
pub trait AttentionHook {
    fn on_attention(&mut self, site: &AttentionSite<'_>, probs: &Array) -> Result<Option<Array>>;
}

/// A head-averaged attention map.
///
/// Shapes: cross `[F, HW, L]`, st `[F, HW, 2HW]`, temporal `[HW, F, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: String,
    pub attn_type: AttnType,
    pub step_index: usize,
    pub map: Array,
}

/// Mean over the head axis of `[B, heads, Nq, Nk]`.
pub fn head_average(probs: &Array) -> Result<Array> {
    let [b, h, nq, nk] = probs.shape() else {
        return Err(Error::Shape(format!("attention probs {:?}", probs.shape())));
    };
    let (b, h, block) = (*b, *h, nq * nk);
    let mut out = vec![0.0; b * block];
    for bi in 0..b {
        let dst = &mut out[bi * block..(bi + 1) * block];
        for hh in 0..h {
            let src = &probs.data()[(bi * h + hh) * block..(bi * h + hh + 1) * block];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= h as f64;
        }
    }
    Array::new(&[b, *nq, *nk], out)
}

/// Hook that stores a head-averaged record of every attention map it sees.
#[derive(Debug, Default)]
pub struct Recorder {
    pub step_index: usize,
    pub records: Vec<AttentionRecord>,
}

impl AttentionHook for Recorder {
    fn on_attention(&mut self, site: &AttentionSite<'_>, probs: &Array) -> Result<Option<Array>> {
        self.records.push(AttentionRecord {
            layer_id: site.layer.to_owned(),
            attn_type: site.kind,
            step_index: self.step_index,
            map: head_average(probs)?,
        });
        Ok(None)
    }
}

/// Largest deviation of any row sum from one.
pub fn max_row_sum_error(map: &Array) -> f64 {
    let n = *map.shape().last().unwrap_or(&1);
    map.data()
        .chunks(n)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_average_of_two_heads() {
        let p = Array::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = head_average(&p).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2]);
        assert_eq!(m.data(), &[0.5, 0.5]);
    }

    #[test]
    fn attn_type_round_trip() {
        for t in [AttnType::Cross, AttnType::SpatioTemporal, AttnType::Temporal] {
            assert_eq!(t.as_str().parse::<AttnType>().unwrap(), t);
        }
        assert!("self".parse::<AttnType>().is_err());
    }
}
