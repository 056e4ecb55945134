//! Frame and video files: lossless archives, PNG sequences with a manifest,
//! mask images and the methods-by-frames comparison grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::blending::BlendMask;
use crate::error::{Error, Result};
use crate::tensor::Array;

const VIDEO_ENTRY: &str = "frames";
const MANIFEST: &str = "manifest.json";

fn video_dims(frames: &Array) -> Result<[usize; 4]> {
    match frames.shape() {
        &[f, c, h, w] if f > 0 && (1..=4).contains(&c) => Ok([f, c, h, w]),
        s => Err(Error::Shape(format!("video must be [F, C<=4, H, W], got {s:?}"))),
    }
}

/// Single-file archive; `load_video_archive` returns the same bits.
pub fn save_video_archive(path: &Path, frames: &Array) -> Result<()> {
    video_dims(frames)?;
    let mut meta = BTreeMap::new();
    meta.insert("content".to_owned(), "video".to_owned());
    archive::save(path, &[(VIDEO_ENTRY, frames)], meta)
}

pub fn load_video_archive(path: &Path) -> Result<Array> {
    let (mut arrays, _) = archive::load(path)?;
    let frames = arrays
        .remove(VIDEO_ENTRY)
        .ok_or_else(|| Error::Archive(format!("{} has no `{VIDEO_ENTRY}` entry", path.display())))?;
    video_dims(&frames)?;
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub files: Vec<String>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One PNG per frame plus `manifest.json`. Frames are in `[0, 1]`; a fourth
/// channel goes to alpha so nothing is dropped.
pub fn save_video_pngs(dir: &Path, frames: &Array) -> Result<FrameManifest> {
    let [f, c, h, w] = video_dims(frames)?;
    std::fs::create_dir_all(dir)?;
    let plane = h * w;
    let mut files = Vec::with_capacity(f);
    for fi in 0..f {
        let frame = &frames.data()[fi * c * plane..(fi + 1) * c * plane];
        let img: RgbaImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let j = y as usize * w + x as usize;
            let mut px = [0u8, 0, 0, 255];
            for (ch, slot) in px.iter_mut().enumerate().take(c) {
                *slot = quantize(frame[ch * plane + j]);
            }
            if c == 1 {
                px[1] = px[0];
                px[2] = px[0];
            }
            Rgba(px)
        });
        let name = format!("frame_{fi:03}.png");
        img.save(dir.join(&name)).map_err(|e| Error::Image(format!("{name}: {e}")))?;
        files.push(name);
    }
    let manifest = FrameManifest {
        frames: f,
        channels: c,
        height: h,
        width: w,
        files,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_video_pngs(dir: &Path) -> Result<Array> {
    let manifest: FrameManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    let FrameManifest {
        frames: f,
        channels: c,
        height: h,
        width: w,
        ..
    } = manifest;
    if manifest.files.len() != f || f == 0 || !(1..=4).contains(&c) {
        return Err(Error::Image(format!("inconsistent manifest in {}", dir.display())));
    }
    let plane = h * w;
    let mut data = vec![0.0; f * c * plane];
    for (fi, name) in manifest.files.iter().enumerate() {
        let img = image::open(dir.join(name))
            .map_err(|e| Error::Image(format!("{name}: {e}")))?
            .to_rgba8();
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Image(format!("{name} is {:?}, manifest says {w}x{h}", img.dimensions())));
        }
        let dst = &mut data[fi * c * plane..(fi + 1) * c * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let j = y as usize * w + x as usize;
            for ch in 0..c {
                dst[ch * plane + j] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    Array::new(&[f, c, h, w], data)
}

/// Writes every frame of `mask` as a black/white PNG, returning the paths.
pub fn save_mask_pngs(dir: &Path, prefix: &str, mask: &BlendMask) -> Result<Vec<PathBuf>> {
    let [f, h, w] = mask.shape();
    std::fs::create_dir_all(dir)?;
    (0..f)
        .map(|fi| {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([if mask.get(fi, y as usize, x as usize) { 255 } else { 0 }])
            });
            let path = dir.join(format!("{prefix}_{fi:03}.png"));
            img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

/// Comparison grid: one row per video, frames left to right, RGB only, each
/// cell scaled up by `zoom` and separated by a one-pixel white gutter.
pub fn frame_grid(rows: &[&Array], zoom: usize) -> Result<RgbImage> {
    let first = rows.first().ok_or_else(|| Error::Config("grid needs at least one video".into()))?;
    let [f, _, h, w] = video_dims(first)?;
    if zoom == 0 {
        return Err(Error::Config("grid zoom must be positive".into()));
    }
    for r in rows {
        first.ensure_same_shape(r, "grid row")?;
    }
    let (cw, ch) = (w * zoom, h * zoom);
    let width = f * cw + (f + 1);
    let height = rows.len() * ch + (rows.len() + 1);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (ri, video) in rows.iter().enumerate() {
        let c = video.dim(1);
        let plane = h * w;
        for fi in 0..f {
            let frame = &video.data()[fi * c * plane..(fi + 1) * c * plane];
            let (x0, y0) = (1 + fi * (cw + 1), 1 + ri * (ch + 1));
            for y in 0..ch {
                for x in 0..cw {
                    let j = (y / zoom) * w + x / zoom;
                    let rgb = [0, 1, 2].map(|k| quantize(frame[k.min(c - 1) * plane + j]));
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_frame_grid(path: &Path, rows: &[&Array], zoom: usize) -> Result<()> {
    let img = frame_grid(rows, zoom)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
