//! End-to-end runs: synthetic data, pretraining, the two-stage edit, the
//! reconstruction and baseline modes, evaluation and the blending ablation.
//!
//! Every run writes its artifacts as soon as the phase producing them ends,
//! so a failing phase leaves everything before it on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::blending::BlendMask;
use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::edit::{
    edit_branch, generate, invert, null_embedding, reconstruct, reconstruct_without_nti, sdedit, tune, BlendMode,
    EditOutput, Inversion,
};
use crate::error::{Error, Result};
use crate::media::{load_video_archive, load_video_pngs, save_frame_grid, save_mask_pngs, save_video_archive, save_video_pngs};
use crate::metrics::{frame_consistency, mask_iou, psnr, text_alignment, write_report_csv, MetricReport, PaletteEmbedder};
use crate::model::{ModelKind, Weights};
use crate::scene::{caption, from_latent, image_corpus, random_scene, to_latent, Color, Scene, SceneParams};
use crate::tensor::Array;
use crate::text::{TextEmbedding, Vocab};
use crate::training::{normal_array, pretrain_2d, write_loss_csv, TrainOutcome};

const DATASET_ARCHIVE: &str = "video.safetensors";
const DATASET_SCENE: &str = "scene.json";
const MASK_ENTRY: &str = "masks";
const GRID_ZOOM: usize = 4;

/// A source clip with whatever annotation came with it.
#[derive(Debug, Clone)]
pub struct SourceVideo {
    /// `[F, 4, H, W]` in `[0, 1]`.
    pub frames: Array,
    pub caption: Option<String>,
    pub masks: Option<BlendMask>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneFile {
    caption: String,
    params: SceneParams,
}

fn mask_to_array(mask: &BlendMask) -> Array {
    mask.to_array()
}

fn mask_from_array(a: &Array) -> Result<BlendMask> {
    let [f, h, w] = a.shape() else {
        return Err(Error::Archive(format!("mask entry must be [F, H, W], got {:?}", a.shape())));
    };
    BlendMask::new(*f, *h, *w, a.data().iter().map(|&v| v > 0.5).collect())
}

/// Writes a synthetic scene as a dataset directory: lossless archive with
/// frames and sprite masks, PNG frames, PNG masks and the caption.
pub fn write_dataset(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let masks = mask_to_array(&scene.masks);
    let mut meta = BTreeMap::new();
    meta.insert("content".to_owned(), "video".to_owned());
    archive::save(
        &dir.join(DATASET_ARCHIVE),
        &[("frames", &scene.frames), (MASK_ENTRY, &masks)],
        meta,
    )?;
    save_video_pngs(&dir.join("frames"), &scene.frames)?;
    save_mask_pngs(&dir.join("masks"), "mask", &scene.masks)?;
    let file = SceneFile {
        caption: scene.caption.clone(),
        params: scene.params.clone(),
    };
    std::fs::write(dir.join(DATASET_SCENE), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn make_data(dir: &Path, seed: u64, frames: usize, size: usize) -> Result<Scene> {
    let scene = random_scene(seed, frames, size)?;
    write_dataset(dir, &scene)?;
    Ok(scene)
}

/// Reads a dataset directory, a PNG directory with a manifest, or a video
/// archive (with an optional `masks` entry).
pub fn load_source(path: &Path) -> Result<SourceVideo> {
    if path.is_dir() {
        let archive_path = path.join(DATASET_ARCHIVE);
        if archive_path.is_file() {
            let mut source = load_source(&archive_path)?;
            let scene_path = path.join(DATASET_SCENE);
            if scene_path.is_file() {
                let file: SceneFile = serde_json::from_str(&std::fs::read_to_string(scene_path)?)?;
                source.caption = Some(file.caption);
            }
            return Ok(source);
        }
        return Ok(SourceVideo {
            frames: load_video_pngs(path)?,
            caption: None,
            masks: None,
        });
    }
    let frames = load_video_archive(path)?;
    let (arrays, _) = archive::load(path)?;
    let masks = arrays.get(MASK_ENTRY).map(mask_from_array).transpose()?;
    Ok(SourceVideo {
        frames,
        caption: None,
        masks,
    })
}

fn source_for(cfg: &RunConfig) -> Result<SourceVideo> {
    match &cfg.paths.video {
        Some(path) => load_source(path),
        None => {
            let size = cfg.pretrain.model.size;
            let scene = random_scene(cfg.seed, 8, size)?;
            Ok(SourceVideo {
                frames: scene.frames,
                caption: Some(scene.caption),
                masks: Some(scene.masks),
            })
        }
    }
}

/// Trains the image model on the procedural corpus and saves it to
/// `paths.weights`, with the loss curve next to it.
pub fn run_pretrain(cfg: &RunConfig) -> Result<TrainOutcome> {
    let p = &cfg.pretrain;
    let schedule = cfg.schedule.build()?;
    let vocab = Vocab::shipped();
    if p.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match the shipped vocabulary {}",
            p.model.vocab_size,
            vocab.len()
        )));
    }
    let init = Weights::init(&p.model, cfg.seed)?;
    let corpus = image_corpus(p.corpus_size, p.model.size, p.corpus_seed)?;
    let outcome = pretrain_2d(init, &corpus, &vocab, &schedule, &cfg.pretrain_config(), p.caption_dropout)
        .map_err(|e| e.in_phase("pretrain"))?;
    outcome.weights.save(&cfg.paths.weights)?;
    write_loss_csv(&cfg.paths.weights.with_extension("loss.csv"), &outcome.losses)?;
    Ok(outcome)
}

/// Everything the sampling modes share: the tuned video model, the source
/// clip and its prompt.
pub struct Session {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub vocab: Vocab,
    pub weights: Weights,
    pub source: SourceVideo,
    pub source_prompt: String,
    pub src: TextEmbedding,
    pub null: TextEmbedding,
    pub out: PathBuf,
}

impl Session {
    pub fn latent(&self) -> Array {
        to_latent(&self.source.frames)
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        self.weights.encode_text(prompt, &self.vocab)
    }
}

/// Loads inputs, writes the resolved config and tunes the video model (or
/// loads a cached tuning from `paths.tuned`).
pub fn prepare(cfg: &RunConfig) -> Result<Session> {
    cfg.validate()?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let schedule = cfg.schedule.build()?;
    let vocab = Vocab::shipped();
    let source = source_for(cfg).map_err(|e| e.in_phase("load source"))?;
    let source_prompt = if cfg.prompts.source.trim().is_empty() {
        source
            .caption
            .clone()
            .ok_or_else(|| Error::Config("prompts.source is empty and the video has no caption".into()))?
    } else {
        cfg.prompts.source.clone()
    };
    let image = Weights::load(&cfg.paths.weights).map_err(|e| {
        Error::Config(format!(
            "cannot load weights {} ({e}); run `videdit pretrain` first",
            cfg.paths.weights.display()
        ))
    })?;
    if image.kind != ModelKind::Image {
        return Err(Error::Config("paths.weights must hold an image model".into()));
    }
    let x = to_latent(&source.frames);
    let src_image = image.encode_text(&source_prompt, &vocab)?;
    let weights = match &cfg.paths.tuned {
        Some(path) if path.is_file() => {
            let w = Weights::load(path)?;
            if w.kind != ModelKind::Video || w.config != image.config {
                return Err(Error::Config(format!("{} is not a video model of this config", path.display())));
            }
            w
        }
        tuned_path => {
            let tuned = tune(&image, &x, &src_image, &schedule, &cfg.finetune_config()).map_err(|e| e.in_phase("finetune"))?;
            write_loss_csv(&out.join("finetune_loss.csv"), &tuned.losses)?;
            let path = tuned_path.clone().unwrap_or_else(|| out.join("tuned.safetensors"));
            tuned.weights.save(&path)?;
            tuned.weights
        }
    };
    let src = weights.encode_text(&source_prompt, &vocab)?;
    let null = null_embedding(&weights, &vocab)?;
    Ok(Session {
        config: cfg.clone(),
        schedule,
        vocab,
        weights,
        source,
        source_prompt,
        src,
        null,
        out,
    })
}

fn write_nti_log(path: &Path, inv: &Inversion) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,iteration,loss")?;
    for (step, losses) in inv.nti_log.per_step.iter().enumerate() {
        for (i, l) in losses.iter().enumerate() {
            writeln!(f, "{step},{i},{l}")?;
        }
    }
    f.flush()?;
    Ok(())
}

fn run_inversion(s: &Session) -> Result<Inversion> {
    let inv = invert(&s.weights, &s.schedule, &s.latent(), &s.src, &s.null, &s.config.nti_config())?;
    write_nti_log(&s.out.join("nti_loss.csv"), &inv)?;
    let nulls: Vec<(String, Array)> = inv
        .nulls
        .per_step
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("null_{i}"), e.embeddings.clone()))
        .collect();
    archive::save_trajectory(&s.out.join("inversion.safetensors"), &inv.trajectory, &s.schedule, &nulls)?;
    Ok(inv)
}

fn save_frames(dir: &Path, latent: &Array) -> Result<Array> {
    let frames = from_latent(latent);
    save_video_pngs(&dir.join("frames"), &frames)?;
    save_video_archive(&dir.join("latent.safetensors"), latent)?;
    Ok(frames)
}

/// Report row for `frames` against the source clip.
pub fn evaluate_frames(
    method: &str,
    frames: &Array,
    source: &Array,
    prompt: &str,
    mask: Option<(&BlendMask, &BlendMask)>,
    config_hash: &str,
    seed: u64,
) -> Result<MetricReport> {
    let mask_iou = mask.map(|(pred, truth)| mask_iou(pred, truth)).transpose()?;
    Ok(MetricReport {
        method: method.to_owned(),
        text_alignment: Some(text_alignment(frames, prompt, &PaletteEmbedder::default())?),
        lpips: None,
        psnr_db: psnr(frames, source, 1.0)?,
        mask_iou,
        frame_consistency: frame_consistency(frames)?,
        config_hash: config_hash.to_owned(),
        seed,
    })
}

fn finish(s: &Session, reports: &[MetricReport], rows: &[&Array]) -> Result<()> {
    write_report_csv(reports, &s.out.join("report.csv"))?;
    save_frame_grid(&s.out.join("grid.png"), rows, GRID_ZOOM)
}

pub struct EditRun {
    pub inversion: Inversion,
    pub reconstruction: Array,
    pub edit: EditOutput,
    pub edited_frames: Array,
    pub reports: Vec<MetricReport>,
}

/// Stage one (tuning) and stage two (inversion, source branch, edit branch).
pub fn run_edit(cfg: &RunConfig) -> Result<EditRun> {
    cfg.target_prompt()?;
    let s = prepare(cfg)?;
    run_edit_with(&s)
}

pub fn run_edit_with(s: &Session) -> Result<EditRun> {
    let cfg = &s.config;
    let hash = cfg.hash()?;
    let inversion = run_inversion(s)?;
    let recon = reconstruct(&s.weights, &s.schedule, &inversion, cfg.guidance).map_err(|e| e.in_phase("reconstruct"))?;
    let recon_frames = save_frames(&s.out.join("reconstruction"), recon.latent())?;
    let target = s.embed(cfg.target_prompt()?)?;
    let edit = edit_branch(
        &s.weights,
        &s.schedule,
        &inversion,
        &recon,
        &target,
        &cfg.injection,
        cfg.blend,
        cfg.guidance,
    )
    .map_err(|e| e.in_phase("edit"))?;
    let edited_frames = save_frames(&s.out.join("edit"), edit.latent())?;
    let mut extra = Vec::new();
    for (step, mask) in &edit.masks {
        let [f, h, w] = mask.shape();
        let plane = mask.to_array();
        for fi in 0..f {
            extra.push((format!("mask_{step}_{fi}"), Array::new(&[h, w], plane.index0(fi).into_data())?));
        }
    }
    archive::save_trajectory(&s.out.join("trajectory.safetensors"), &edit.trajectory, &s.schedule, &extra)?;
    let [_, _, h, w] = s.source.frames.shape() else {
        return Err(Error::Shape("source video must be [F, C, H, W]".into()));
    };
    let final_mask = edit.final_mask().map(|m| m.resize_nearest(*h, *w));
    if let Some(m) = &final_mask {
        save_mask_pngs(&s.out.join("masks"), "mask", m)?;
    }
    let pair = match (&final_mask, &s.source.masks) {
        (Some(pred), Some(truth)) => Some((pred, truth)),
        _ => None,
    };
    let reports = vec![
        evaluate_frames("reconstruction", &recon_frames, &s.source.frames, &cfg.prompts.target, None, &hash, cfg.seed)?,
        evaluate_frames("edit", &edited_frames, &s.source.frames, &cfg.prompts.target, pair, &hash, cfg.seed)?,
    ];
    finish(s, &reports, &[&s.source.frames, &recon_frames, &edited_frames])?;
    Ok(EditRun {
        inversion,
        reconstruction: recon.latent().clone(),
        edit,
        edited_frames,
        reports,
    })
}

/// Guided resampling of the source with and without the optimised nulls.
pub fn run_reconstruct(cfg: &RunConfig) -> Result<Vec<MetricReport>> {
    let s = prepare(cfg)?;
    let hash = cfg.hash()?;
    let inv = run_inversion(&s)?;
    let recon = reconstruct(&s.weights, &s.schedule, &inv, cfg.guidance).map_err(|e| e.in_phase("reconstruct"))?;
    let plain = reconstruct_without_nti(&s.weights, &s.schedule, &inv, cfg.guidance).map_err(|e| e.in_phase("reconstruct"))?;
    let with = save_frames(&s.out.join("reconstruction"), recon.latent())?;
    let without = save_frames(&s.out.join("reconstruction_without_nti"), &plain.last().z)?;
    let prompt = &s.source_prompt;
    let reports = vec![
        evaluate_frames("reconstruction", &with, &s.source.frames, prompt, None, &hash, cfg.seed)?,
        evaluate_frames("reconstruction_without_nti", &without, &s.source.frames, prompt, None, &hash, cfg.seed)?,
    ];
    finish(&s, &reports, &[&s.source.frames, &with, &without])?;
    Ok(reports)
}

/// Starting noise for the baselines; seeded on its own stream so it does not
/// coincide with the training draws.
pub fn sampling_noise(seed: u64, shape: &[usize]) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    normal_array(&mut rng, shape)
}

pub fn run_baseline_generate(cfg: &RunConfig) -> Result<(Array, MetricReport)> {
    cfg.target_prompt()?;
    let s = prepare(cfg)?;
    let target = s.embed(cfg.target_prompt()?)?;
    let noise = sampling_noise(cfg.seed, s.source.frames.shape());
    let latent = generate(&s.weights, &s.schedule, &target, &s.null, &noise, cfg.guidance).map_err(|e| e.in_phase("generate"))?;
    let frames = save_frames(&s.out.join("generate"), &latent)?;
    let report = evaluate_frames("generate", &frames, &s.source.frames, &cfg.prompts.target, None, &cfg.hash()?, cfg.seed)?;
    finish(&s, std::slice::from_ref(&report), &[&s.source.frames, &frames])?;
    Ok((latent, report))
}

pub fn run_baseline_sdedit(cfg: &RunConfig) -> Result<(Array, MetricReport)> {
    cfg.target_prompt()?;
    let s = prepare(cfg)?;
    let target = s.embed(cfg.target_prompt()?)?;
    let noise = sampling_noise(cfg.seed, s.source.frames.shape());
    let latent = sdedit(
        &s.weights,
        &s.schedule,
        &s.latent(),
        &target,
        &s.null,
        cfg.sdedit.start_step,
        &noise,
        cfg.guidance,
    )
    .map_err(|e| e.in_phase("sdedit"))?;
    let frames = save_frames(&s.out.join("sdedit"), &latent)?;
    let report = evaluate_frames("sdedit", &frames, &s.source.frames, &cfg.prompts.target, None, &cfg.hash()?, cfg.seed)?;
    finish(&s, std::slice::from_ref(&report), &[&s.source.frames, &frames])?;
    Ok((latent, report))
}

/// Scores each `(method, video path)` against a reference clip and writes the
/// CSV and the comparison grid (reference first).
pub fn evaluate_videos(reference: &Path, videos: &[(String, PathBuf)], prompt: &str, out: &Path) -> Result<Vec<MetricReport>> {
    if videos.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let source = load_source(reference)?;
    let loaded = videos
        .iter()
        .map(|(m, p)| Ok((m.clone(), load_source(p)?.frames)))
        .collect::<Result<Vec<_>>>()?;
    let reports = loaded
        .iter()
        .map(|(m, v)| evaluate_frames(m, v, &source.frames, prompt, None, "", 0))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write_report_csv(&reports, &out.join("report.csv"))?;
    let mut rows = vec![&source.frames];
    rows.extend(loaded.iter().map(|(_, v)| v));
    save_frame_grid(&out.join("grid.png"), &rows, GRID_ZOOM)?;
    Ok(reports)
}

/// Per-scene result of the blending ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScene {
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub temporal_iou: f64,
    pub framewise_iou: f64,
    /// Frame consistency of the edited video inside its own blending mask.
    pub temporal_consistency: f64,
    pub framewise_consistency: f64,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub scenes: Vec<AblationScene>,
    /// Mean rows: temporal-consistent blending, then frame-wise masks.
    pub reports: Vec<MetricReport>,
}

/// Edited frames restricted to `mask` (upsampled), zero elsewhere; frame
/// consistency of that sequence. `None` when no two adjacent frames both
/// have mask pixels.
pub fn masked_consistency(frames: &Array, mask: &BlendMask) -> Result<Option<f64>> {
    let [f, c, h, w] = frames.shape() else {
        return Err(Error::Shape("frames must be [F, C, H, W]".into()));
    };
    let (f, c, h, w) = (*f, *c, *h, *w);
    let m = mask.resize_nearest(h, w);
    if m.frames() != f {
        return Err(Error::Shape(format!("{} mask frames for {f} video frames", m.frames())));
    }
    let mut data = frames.data().to_vec();
    for fi in 0..f {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if !m.get(fi, y, x) {
                        data[((fi * c + ch) * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
    }
    if f < 2 {
        return Err(Error::Config("frame consistency needs two frames".into()));
    }
    // with f >= 2 the only failure is that no adjacent pair has two nonzero frames
    Ok(frame_consistency(&Array::new(&[f, c, h, w], data)?).ok())
}

/// The sprite's colour swapped for the next palette colour.
pub fn recolor_target(params: &SceneParams) -> String {
    let i = Color::ALL.iter().position(|c| *c == params.color).unwrap_or(0);
    let next = Color::ALL[(i + 1) % Color::ALL.len()];
    caption(next, params.shape, params.direction)
}

/// Recolouring edits on `count` synthetic scenes, each run with
/// temporal-consistent and with frame-wise blending masks from the same
/// inversion and source branch.
pub fn run_ablation(image: &Weights, cfg: &RunConfig, count: usize) -> Result<Ablation> {
    let schedule = cfg.schedule.build()?;
    let vocab = Vocab::shipped();
    let null_image = null_embedding(image, &vocab)?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let seed = cfg.seed + i;
        let scene = random_scene(seed, 8, image.config.size)?;
        let target_prompt = recolor_target(&scene.params);
        let x = to_latent(&scene.frames);
        let src = image.encode_text(&scene.caption, &vocab)?;
        let tune_cfg = crate::training::TrainConfig {
            seed,
            ..cfg.finetune_config()
        };
        let tuned = tune(image, &x, &src, &schedule, &tune_cfg).map_err(|e| e.in_phase("finetune"))?;
        let w = &tuned.weights;
        let src = w.encode_text(&scene.caption, &vocab)?;
        let tgt = w.encode_text(&target_prompt, &vocab)?;
        let inv = invert(w, &schedule, &x, &src, &null_image, &cfg.nti_config())?;
        let recon = reconstruct(w, &schedule, &inv, cfg.guidance).map_err(|e| e.in_phase("reconstruct"))?;
        let mut result = Vec::new();
        for mode in [BlendMode::Temporal, BlendMode::FrameWise] {
            let out = edit_branch(w, &schedule, &inv, &recon, &tgt, &cfg.injection, mode, cfg.guidance)
                .map_err(|e| e.in_phase("edit"))?;
            let mask = out
                .final_mask()
                .ok_or_else(|| Error::Config("ablation needs blending on at least one step".into()))?
                .resize_nearest(scene.params.size, scene.params.size);
            let frames = from_latent(out.latent());
            let iou = mask_iou(&mask, &scene.masks)?;
            let consistency = masked_consistency(&frames, &mask)?.unwrap_or(0.0);
            result.push((iou, consistency));
        }
        scenes.push(AblationScene {
            seed,
            source: scene.caption.clone(),
            target: target_prompt,
            temporal_iou: result[0].0,
            framewise_iou: result[1].0,
            temporal_consistency: result[0].1,
            framewise_consistency: result[1].1,
        });
    }
    let n = scenes.len().max(1) as f64;
    let mean = |f: fn(&AblationScene) -> f64| scenes.iter().map(f).sum::<f64>() / n;
    let hash = cfg.hash()?;
    let row = |method: &str, iou: f64, fc: f64| MetricReport {
        method: method.to_owned(),
        text_alignment: None,
        lpips: None,
        psnr_db: 0.0,
        mask_iou: Some(iou),
        frame_consistency: fc,
        config_hash: hash.clone(),
        seed: cfg.seed,
    };
    let reports = vec![
        row("temporal_blending", mean(|s| s.temporal_iou), mean(|s| s.temporal_consistency)),
        row("framewise_blending", mean(|s| s.framewise_iou), mean(|s| s.framewise_consistency)),
    ];
    Ok(Ablation { scenes, reports })
}
