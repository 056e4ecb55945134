//! Video quality metrics and the tabular report.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blending::BlendMask;
use crate::error::{Error, Result};
use crate::scene::{Color, CHANNELS};
use crate::tensor::Array;

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(peak^2 / mse)` over the whole video, capped at [`PSNR_CAP`].
pub fn psnr(a: &Array, b: &Array, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::Config("psnr peak must be positive".into()));
    }
    let mse = a.rms_diff(b)?.powi(2);
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Intersection over union of two masks; 1 when both are empty.
pub fn mask_iou(pred: &BlendMask, truth: &BlendMask) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("iou of {:?} and {:?}", pred.shape(), truth.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.values().iter().zip(truth.values()) {
        inter += (*p && *t) as usize;
        union += (*p || *t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean cosine similarity of adjacent frames of `[F, ..]`.
///
/// Pairs involving an all-zero frame are skipped.
pub fn frame_consistency(video: &Array) -> Result<f64> {
    let f = *video.shape().first().unwrap_or(&0);
    if f < 2 {
        return Err(Error::Config("frame consistency needs two frames".into()));
    }
    let n = video.len() / f;
    let frames: Vec<&[f64]> = video.data().chunks(n).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut pairs = 0;
    for w in frames.windows(2) {
        let (na, nb) = (norm(w[0]), norm(w[1]));
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        total += w[0].iter().zip(w[1]).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::Config("every adjacent frame pair has a zero frame".into()));
    }
    Ok(total / pairs as f64)
}

/// Shared embedding space for prompts and frames.
pub trait TextFrameEmbedder {
    fn embed_text(&self, prompt: &str) -> Vec<f64>;
    /// `frame: [C, H, W]` in `[0, 1]`.
    fn embed_frame(&self, frame: &Array) -> Vec<f64>;
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean prompt-frame cosine over the frames of `[F, C, H, W]`, times 100.
/// Frames or prompts with a zero embedding count as zero similarity.
pub fn text_alignment(video: &Array, prompt: &str, embedder: &dyn TextFrameEmbedder) -> Result<f64> {
    let f = *video.shape().first().ok_or_else(|| Error::Shape("empty video".into()))?;
    let text = embedder.embed_text(prompt);
    let mut total = 0.0;
    for i in 0..f {
        total += cosine(&text, &embedder.embed_frame(&video.index0(i))).unwrap_or(0.0);
    }
    Ok(100.0 * total / f as f64)
}

/// Colour-vocabulary embedder for the procedural videos: a prompt maps to
/// the indicator of its colour words, a frame to the fraction of pixels close
/// to each palette colour.
#[derive(Debug, Clone, Copy)]
pub struct PaletteEmbedder {
    pub radius: f64,
}

impl Default for PaletteEmbedder {
    fn default() -> Self {
        Self { radius: 0.2 }
    }
}

impl TextFrameEmbedder for PaletteEmbedder {
    fn embed_text(&self, prompt: &str) -> Vec<f64> {
        Color::ALL
            .iter()
            .map(|c| prompt.split_whitespace().any(|w| w.eq_ignore_ascii_case(c.word())) as u8 as f64)
            .collect()
    }

    fn embed_frame(&self, frame: &Array) -> Vec<f64> {
        let plane = frame.len() / frame.shape().first().copied().unwrap_or(CHANNELS).max(1);
        let d = frame.data();
        let mut counts = vec![0.0; Color::ALL.len()];
        for j in 0..plane {
            let px = [d[j], d[plane + j], d[2 * plane + j]];
            for (k, c) in Color::ALL.iter().enumerate() {
                let rgb = c.rgb();
                let dist = (0..3).map(|i| (px[i] - rgb[i]).powi(2)).sum::<f64>().sqrt();
                if dist <= self.radius {
                    counts[k] += 1.0 / plane as f64;
                }
            }
        }
        counts
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub text_alignment: Option<f64>,
    pub lpips: Option<f64>,
    pub psnr_db: f64,
    pub mask_iou: Option<f64>,
    pub frame_consistency: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Column order of the CSV report.
pub const REPORT_COLUMNS: [&str; 6] = ["method", "text_alignment", "lpips", "psnr", "mask_iou", "frame_consistency"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report_csv(reports: &[MetricReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Config("report needs at least one row".into()));
    }
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        if r.method.contains(',') || r.method.contains('\n') {
            return Err(Error::Config(format!("method name `{}` cannot go in a CSV cell", r.method)));
        }
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6}\n",
            r.method,
            cell(r.text_alignment),
            cell(r.lpips),
            r.psnr_db,
            cell(r.mask_iou),
            r.frame_consistency
        ));
    }
    Ok(out)
}

pub fn write_report_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let text = report_csv(reports)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
