//! Temporal-consistent blending masks.
//!
//! Word heatmaps from cross-attention are normalised per frame, then each
//! frame's map is re-estimated as an attention-weighted average of the first
//! and previous frames' maps using that frame's sparse spatio-temporal
//! attention. The result is thresholded relative to the frame maximum, the
//! source-word and target-word masks are united, and the edit latent is
//! composited over the reconstruction inside the mask only.

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, AttnType};
use crate::tensor::Array;

/// Per-frame binary mask `[F, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlendMask {
    frames: usize,
    height: usize,
    width: usize,
    alpha: Vec<bool>,
}

impl BlendMask {
    pub fn new(frames: usize, height: usize, width: usize, alpha: Vec<bool>) -> Result<Self> {
        if alpha.len() != frames * height * width {
            return Err(Error::Shape(format!(
                "mask data {} for {frames}x{height}x{width}",
                alpha.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            alpha,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self::filled(frames, height, width, false)
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        Self {
            frames,
            height,
            width,
            alpha: vec![value; frames * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.alpha[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.alpha[(f * self.height + y) * self.width + x] = v;
    }

    pub fn values(&self) -> &[bool] {
        &self.alpha
    }

    pub fn count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }

    pub fn frame_count(&self, f: usize) -> usize {
        let n = self.height * self.width;
        self.alpha[f * n..(f + 1) * n].iter().filter(|&&a| a).count()
    }

    /// Nearest-neighbour resize to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BlendMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = BlendMask::zeros(self.frames, height, width);
        for f in 0..self.frames {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    let sx = x * self.width / width;
                    out.set(f, y, x, self.get(f, sy, sx));
                }
            }
        }
        out
    }

    /// `[F, H, W]` array of zeros and ones.
    pub fn to_array(&self) -> Array {
        Array::new(
            &[self.frames, self.height, self.width],
            self.alpha.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask buffer matches shape")
    }
}

/// Which side of the edit a heatmap belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordRole {
    SourceWord,
    TargetWord,
}

/// Nonnegative cross-attention mass of one word, `[F, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordHeatmap {
    pub m: Array,
    pub role: WordRole,
}

/// Frame-wise normalisation to unit mass, flattened to `[F, H*W]`.
pub fn normalize_heatmap(m: &Array) -> Result<Array> {
    let [f, h, w] = m.shape() else {
        return Err(Error::Shape(format!("heatmap must be [F, H, W], got {:?}", m.shape())));
    };
    let hw = h * w;
    let mut out = m.clone().reshape(&[*f, hw])?;
    for (i, row) in out.data_mut().chunks_mut(hw).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("heatmap frame {i} has no mass")));
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// Attention-weighted average of the first and previous frame maps.
///
/// `st_map: [HW, 2HW]`, rows over the current frame's queries, columns over
/// the concatenated first-frame and previous-frame keys.
pub fn propagate_mask(first: &[f64], prev: &[f64], st_map: &Array) -> Result<Vec<f64>> {
    let hw = first.len();
    if prev.len() != hw || st_map.shape() != [hw, 2 * hw] {
        return Err(Error::Shape(format!(
            "propagate: maps of {} and {} values with attention {:?}",
            hw,
            prev.len(),
            st_map.shape()
        )));
    }
    Ok(st_map
        .data()
        .chunks(2 * hw)
        .map(|row| {
            row[..hw].iter().zip(first).map(|(a, m)| a * m).sum::<f64>()
                + row[hw..].iter().zip(prev).map(|(a, m)| a * m).sum::<f64>()
        })
        .collect())
}

/// Threshold each frame of `m_hat: [F, H*W]` at `tau` times the frame maximum.
pub fn binarize_mask(m_hat: &Array, tau: f64, height: usize, width: usize) -> Result<BlendMask> {
    let [f, hw] = m_hat.shape() else {
        return Err(Error::Shape("binarize expects [F, HW]".into()));
    };
    if *hw != height * width {
        return Err(Error::Shape(format!("{hw} values for a {height}x{width} mask")));
    }
    let mut alpha = Vec::with_capacity(m_hat.len());
    for row in m_hat.data().chunks(*hw) {
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            alpha.extend(row.iter().map(|&v| v / max >= tau));
        } else {
            alpha.extend(std::iter::repeat(false).take(*hw));
        }
    }
    BlendMask::new(*f, height, width, alpha)
}

pub fn union_masks(a: &BlendMask, b: &BlendMask) -> Result<BlendMask> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("union of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(BlendMask {
        alpha: a.alpha.iter().zip(&b.alpha).map(|(x, y)| *x || *y).collect(),
        ..a.clone()
    })
}

/// `recon * (1 - alpha) + edit * alpha`, with the mask resized to the latent grid
/// and broadcast over channels. Selection is exact, so unmasked values are
/// copied from the reconstruction bit for bit.
pub fn blend_latents(recon: &Array, edit: &Array, mask: &BlendMask) -> Result<Array> {
    recon.ensure_same_shape(edit, "blend_latents")?;
    let [f, c, h, w] = recon.shape() else {
        return Err(Error::Shape("blend expects [F, C, H, W] latents".into()));
    };
    if mask.frames() != *f {
        return Err(Error::Shape(format!("mask has {} frames, latent {f}", mask.frames())));
    }
    let m = mask.resize_nearest(*h, *w);
    let plane = h * w;
    let mut out = recon.clone();
    for fi in 0..*f {
        let mf = &m.alpha[fi * plane..(fi + 1) * plane];
        for ci in 0..*c {
            let base = (fi * c + ci) * plane;
            for (j, &a) in mf.iter().enumerate() {
                if a {
                    out.data_mut()[base + j] = edit.data()[base + j];
                }
            }
        }
    }
    Ok(out)
}

/// Mean over layers of the selected token columns of cross-attention records,
/// giving a `[F, s, s]` heatmap.
pub fn word_heatmap(cross: &[&AttentionRecord], tokens: &[usize], role: WordRole) -> Result<WordHeatmap> {
    let first = cross
        .first()
        .ok_or_else(|| Error::MissingRecord("cross-attention maps for a heatmap".into()))?;
    if tokens.is_empty() {
        return Err(Error::Config("heatmap needs at least one token".into()));
    }
    let [f, hw, l] = first.map.shape() else {
        return Err(Error::Shape("cross map must be [F, HW, L]".into()));
    };
    let (f, hw, l) = (*f, *hw, *l);
    let side = (hw as f64).sqrt().round() as usize;
    if side * side != hw {
        return Err(Error::Shape(format!("{hw} queries is not a square grid")));
    }
    if tokens.iter().any(|&t| t >= l) {
        return Err(Error::Shape("token index beyond prompt length".into()));
    }
    let mut m = vec![0.0; f * hw];
    for rec in cross {
        if rec.attn_type != AttnType::Cross || rec.map.shape() != first.map.shape() {
            return Err(Error::Shape(format!("record {} is not a matching cross map", rec.layer_id)));
        }
        for (q, row) in rec.map.data().chunks(l).enumerate() {
            m[q] += tokens.iter().map(|&t| row[t]).sum::<f64>();
        }
    }
    let k = 1.0 / (cross.len() * tokens.len()) as f64;
    for v in &mut m {
        *v *= k;
    }
    Ok(WordHeatmap {
        m: Array::new(&[f, side, side], m)?,
        role,
    })
}

/// Mean over layers of spatio-temporal maps `[F, HW, 2HW]`.
pub fn mean_st_map(st: &[&AttentionRecord]) -> Result<Array> {
    let first = st
        .first()
        .ok_or_else(|| Error::MissingRecord("spatio-temporal maps for blending".into()))?;
    let mut acc = Array::zeros(first.map.shape());
    for rec in st {
        if rec.attn_type != AttnType::SpatioTemporal {
            return Err(Error::Shape(format!("record {} is not spatio-temporal", rec.layer_id)));
        }
        acc.add_assign_scaled(&rec.map, 1.0 / st.len() as f64)?;
    }
    Ok(acc)
}

/// Temporally propagated maps `m_hat: [F, HW]` from normalised maps `[F, HW]`.
pub fn propagate_all(m_tilde: &Array, st_map: &Array) -> Result<Array> {
    let [f, hw] = m_tilde.shape() else {
        return Err(Error::Shape("normalised maps must be [F, HW]".into()));
    };
    let (f, hw) = (*f, *hw);
    if st_map.shape() != [f, hw, 2 * hw] {
        return Err(Error::Shape(format!(
            "spatio-temporal map {:?} for {f} frames of {hw}",
            st_map.shape()
        )));
    }
    let rows = |i: usize| &m_tilde.data()[i * hw..(i + 1) * hw];
    let mut out = Vec::with_capacity(f * hw);
    out.extend_from_slice(rows(0));
    for fi in 1..f {
        let attn = st_map.index0(fi);
        out.extend(propagate_mask(rows(0), rows(fi - 1), &attn)?);
    }
    Array::new(&[f, hw], out)
}

/// Mask for one word: temporal propagation when `temporal`, else the plain
/// frame-wise cross-attention threshold.
pub fn word_mask(heat: &WordHeatmap, st_map: Option<&Array>, tau: f64) -> Result<BlendMask> {
    let [_, h, w] = heat.m.shape() else {
        return Err(Error::Shape("heatmap must be [F, H, W]".into()));
    };
    let (h, w) = (*h, *w);
    let m_tilde = normalize_heatmap(&heat.m)?;
    let m_hat = match st_map {
        Some(st) => propagate_all(&m_tilde, st)?,
        None => m_tilde,
    };
    binarize_mask(&m_hat, tau, h, w)
}

/// Inputs for [`compute_blend_mask`] at one denoising step.
pub struct BlendInputs<'a> {
    /// Source-branch cross-attention records.
    pub cross_src: &'a [&'a AttentionRecord],
    /// Edit-branch cross-attention records (after injection).
    pub cross_tgt: &'a [&'a AttentionRecord],
    /// Edit-branch spatio-temporal records (after injection).
    pub st: &'a [&'a AttentionRecord],
    /// Token positions of the replaced words in the source prompt.
    pub src_tokens: &'a [usize],
    /// Token positions of the new words in the target prompt.
    pub tgt_tokens: &'a [usize],
}

/// Union of the source-word and target-word masks. With `temporal == false`
/// each frame is thresholded on its own cross-attention map only.
pub fn compute_blend_mask(inputs: &BlendInputs<'_>, tau: f64, temporal: bool) -> Result<BlendMask> {
    let st = if temporal { Some(mean_st_map(inputs.st)?) } else { None };
    let mut masks = Vec::new();
    if !inputs.src_tokens.is_empty() {
        let heat = word_heatmap(inputs.cross_src, inputs.src_tokens, WordRole::SourceWord)?;
        masks.push(word_mask(&heat, st.as_ref(), tau)?);
    }
    if !inputs.tgt_tokens.is_empty() {
        let heat = word_heatmap(inputs.cross_tgt, inputs.tgt_tokens, WordRole::TargetWord)?;
        masks.push(word_mask(&heat, st.as_ref(), tau)?);
    }
    let mut it = masks.into_iter();
    let Some(first) = it.next() else {
        // nothing was edited: keep the reconstruction everywhere
        let shape = inputs
            .cross_src
            .first()
            .or(inputs.cross_tgt.first())
            .ok_or_else(|| Error::MissingRecord("cross-attention maps for blending".into()))?
            .map
            .shape()
            .to_vec();
        let side = ((shape[1] as f64).sqrt().round()) as usize;
        return Ok(BlendMask::zeros(shape[0], side, side));
    };
    it.try_fold(first, |acc, m| union_masks(&acc, &m))
}
