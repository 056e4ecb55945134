//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and always exits 0 so that the
//! report is printed in full; failures are read off the report, not the
//! exit status. The pretrained image model is cached under the cargo target
//! directory, keyed by the pretraining settings.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use videdit::blending::{binarize_mask, normalize_heatmap, propagate_mask, BlendMask};
use videdit::config::RunConfig;
use videdit::control::InjectionConfig;
use videdit::diffusion::{ddim_invert, ddim_invert_step, ddim_sample, ddim_step, NoHooks, NoiseSchedule, NullText};
use videdit::edit::{edit_branch, invert, null_embedding, reconstruct, reconstruct_without_nti, tune, BlendMode, Inversion, Reconstruction};
use videdit::error::Result;
use videdit::media::load_video_archive;
use videdit::metrics::psnr;
use videdit::model::{forward3d, inflate, AttnType, ModelConfig, Weights};
use videdit::pipeline::{make_data, recolor_target, run_ablation, run_baseline_generate, run_baseline_sdedit, run_edit, run_pretrain};
use videdit::scene::{from_latent, random_scene, to_latent, Scene};
use videdit::tensor::Array;
use videdit::text::Vocab;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn image_model() -> Result<(Weights, PathBuf)> {
    let mut cfg = RunConfig::default();
    let key = format!(
        "{}{}",
        toml::to_string(&cfg.schedule).expect("schedule serializes"),
        toml::to_string(&cfg.pretrain).expect("pretrain settings serialize")
    );
    let digest = Sha256::digest(key.as_bytes());
    let tag: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance/image_{tag}.safetensors"));
    if !path.is_file() {
        eprintln!("pretraining the image model ({} steps) into {}", cfg.pretrain.steps, path.display());
        let t0 = Instant::now();
        std::fs::create_dir_all(path.parent().unwrap())?;
        cfg.paths.weights = path.clone();
        run_pretrain(&cfg)?;
        eprintln!("pretraining took {:.0} s", t0.elapsed().as_secs_f64());
    }
    Ok((Weights::load(&path)?, path))
}

/// A tuned model on one synthetic scene, its inversion and source branch.
struct Toy {
    scene: Scene,
    schedule: NoiseSchedule,
    vocab: Vocab,
    weights: Weights,
    inv: Inversion,
    recon: Reconstruction,
    null: Array,
}

fn toy(image: &Weights) -> Result<Toy> {
    let cfg = RunConfig::default();
    let schedule = cfg.schedule.build()?;
    let vocab = Vocab::shipped();
    let scene = random_scene(0, 8, image.config.size)?;
    let x = to_latent(&scene.frames);
    let src = image.encode_text(&scene.caption, &vocab)?;
    let weights = tune(image, &x, &src, &schedule, &cfg.finetune_config())?.weights;
    let src = weights.encode_text(&scene.caption, &vocab)?;
    let null = null_embedding(&weights, &vocab)?;
    let inv = invert(&weights, &schedule, &x, &src, &null, &cfg.nti_config())?;
    let recon = reconstruct(&weights, &schedule, &inv, cfg.guidance)?;
    Ok(Toy {
        scene,
        schedule,
        vocab,
        weights,
        inv,
        recon,
        null: null.embeddings,
    })
}

fn round_trip(toy: &Toy) -> Result<Outcome> {
    let x = to_latent(&toy.scene.frames);
    let t0 = Instant::now();
    let up = ddim_invert(&toy.weights, &toy.schedule, &x, &toy.inv.cond.embeddings)?;
    let down = ddim_sample(
        &toy.weights,
        &toy.schedule,
        &up.last().z,
        &toy.inv.cond.embeddings,
        NullText::Shared(&toy.null),
        1.0,
        &mut NoHooks,
    )?;
    let secs = t0.elapsed().as_secs_f64();
    let db = psnr(&from_latent(&down.last().z), &toy.scene.frames, 1.0)?;
    outcome(db >= 40.0 && secs < 60.0, format!("PSNR {db:.2} dB (need >= 40), {secs:.1} s (need < 60)"))
}

fn algebraic_inverse() -> Result<Outcome> {
    let s = schedule(50);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.gen_range(0..50);
        let (t, t_prev) = (s.sampler_steps[i], s.prev_timestep(i));
        let z = normal(&mut rng, &[8, 4, 16, 16], 1.0);
        let eps = normal(&mut rng, &[8, 4, 16, 16], 1.0);
        let back = ddim_invert_step(&ddim_step(&z, &eps, t, t_prev, &s)?, &eps, t_prev, t, &s)?;
        worst = worst.max(back.max_abs_diff(&z)?);
    }
    outcome(worst <= 1e-10, format!("max error {worst:.2e} over 100 cases"))
}

/// Per-frame equality only holds where sparse attention sees the frame's own
/// keys: single frames and clips of one repeated frame.
fn inflation_identity() -> Result<Outcome> {
    let cfg = ModelConfig::default();
    let mut image = Weights::init(&cfg, 7)?;
    perturb(&mut image, 8, 0.05, |_| true);
    let video = inflate(&image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let frames = [1, 2, 4, 8][i % 4];
        let text = normal(&mut rng, &[cfg.max_tokens, cfg.text_dim], 0.5);
        let frame = normal(&mut rng, &[cfg.channels, cfg.size, cfg.size], 1.0);
        let t = rng.gen_range(1..1000);
        let (out, _) = forward3d(&video, &Array::stack(&vec![frame.clone(); frames])?, t, &text, false)?;
        let single = image.forward2d(&frame, t, &text)?;
        for f in 0..frames {
            worst = worst.max(out.index0(f).max_abs_diff(&single)?);
        }
    }
    outcome(worst <= 1e-6, format!("max error {worst:.2e} over 20 videos"))
}

fn st_attention_oracle() -> Result<Outcome> {
    let cfg = ModelConfig::default();
    let mut image = Weights::init(&cfg, 5)?;
    perturb(&mut image, 6, 0.1, |_| true);
    let video = inflate(&image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let text = normal(&mut rng, &[cfg.max_tokens, cfg.text_dim], 0.5);
    let first = format!("{}.attn1", cfg.attention_blocks[0]);
    let (mut direct, mut model): (f64, f64) = (0.0, 0.0);
    for f in [1, 2, 4, 8] {
        let q = normal(&mut rng, &[f, 16, 8], 1.0);
        let k = normal(&mut rng, &[f, 16, 8], 1.0);
        direct = direct.max(sparse_attention(&q, &k, 2)?.max_abs_diff(&restricted_full_attention(&q, &k, 2))?);

        let z = normal(&mut rng, &[f, cfg.channels, cfg.size, cfg.size], 1.0);
        let (_, recs) = forward3d(&video, &z, 600, &text, true)?;
        let rec = recs
            .iter()
            .find(|r| r.attn_type == AttnType::SpatioTemporal && r.layer_id == first)
            .expect("first block records its sparse map");
        let (q, k) = first_block_qk(&video, &z, 600)?;
        model = model.max(rec.map.max_abs_diff(&restricted_full_attention(&q, &k, cfg.heads))?);
    }
    let worst = direct.max(model);
    outcome(
        worst <= 1e-6,
        format!("F in {{1,2,4,8}}: max error {direct:.2e} on random q/k, {model:.2e} on recorded model maps"),
    )
}

fn nti_efficacy(toy: &Toy) -> Result<Outcome> {
    let plain = reconstruct_without_nti(&toy.weights, &toy.schedule, &toy.inv, 7.5)?;
    let with = psnr(&from_latent(toy.recon.latent()), &toy.scene.frames, 1.0)?;
    let without = psnr(&from_latent(&plain.last().z), &toy.scene.frames, 1.0)?;
    let increases = toy
        .inv
        .nti_log
        .per_step
        .iter()
        .filter(|l| l.windows(2).any(|w| w[1] > w[0]))
        .count();
    outcome(
        with - without >= 3.0 && increases == 0,
        format!("PSNR {with:.2} dB with NTI vs {without:.2} dB without; {increases} steps with a loss increase"),
    )
}

fn gradient_checks() -> Result<Outcome> {
    let (nti, n_nti) = nti_gradient_error(11)?;
    let (ft, n_ft) = finetune_gradient_error(12, 200)?;
    outcome(
        nti < 1e-3 && ft < 1e-3 && n_nti + n_ft <= 500,
        format!("NTI {nti:.2e} over {n_nti} entries, finetune {ft:.2e} over {n_ft} parameters"),
    )
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|v| *v = (*v - m).exp());
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
}

fn blending_math() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut sum_err: f64 = 0.0;
    let mut bound_violations = 0;
    let mut identity_exact = true;
    let mut monotone = true;
    for _ in 0..1000 {
        let (f, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let hw = h * w;
        let heat = Array::from_fn(&[f, h, w], |_| rng.gen_range(1e-6..1.0) * 10f64.powi(rng.gen_range(-3..3)));
        let normed = normalize_heatmap(&heat)?;
        for row in normed.data().chunks(hw) {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let first: Vec<f64> = (0..hw).map(|_| rng.gen::<f64>()).collect();
        let prev: Vec<f64> = (0..hw).map(|_| rng.gen::<f64>()).collect();
        let mut map = Array::from_fn(&[hw, 2 * hw], |_| 4.0 * rng.gen::<f64>() - 2.0);
        map.data_mut().chunks_mut(2 * hw).for_each(softmax);
        let out = propagate_mask(&first, &prev, &map)?;
        let lo = first.iter().chain(&prev).cloned().fold(f64::INFINITY, f64::min);
        let hi = first.iter().chain(&prev).cloned().fold(f64::NEG_INFINITY, f64::max);
        bound_violations += out.iter().filter(|&&v| v < lo - 1e-12 || v > hi + 1e-12).count();

        let eye = Array::from_fn(&[hw, 2 * hw], |i| if i % (2 * hw) == i / (2 * hw) { 1.0 } else { 0.0 });
        identity_exact &= propagate_mask(&first, &prev, &eye)? == first;

        let mut taus = [rng.gen::<f64>(), rng.gen::<f64>()];
        taus.sort_by(f64::total_cmp);
        let loose = binarize_mask(&normed, taus[0], h, w)?;
        let strict = binarize_mask(&normed, taus[1], h, w)?;
        monotone &= subset(&strict, &loose);
    }
    outcome(
        sum_err <= 1e-8 && bound_violations == 0 && identity_exact && monotone,
        format!(
            "row sums within {sum_err:.1e}; {bound_violations} bound violations in 1000 propagations; \
             identity exact: {identity_exact}; monotone in tau: {monotone}"
        ),
    )
}

fn subset(a: &BlendMask, b: &BlendMask) -> bool {
    a.values().iter().zip(b.values()).all(|(x, y)| !x || *y)
}

fn background_preservation(toy: &Toy) -> Result<Outcome> {
    let target = toy.weights.encode_text(&recolor_target(&toy.scene.params), &toy.vocab)?;
    let mut differing = 0;
    let mut outside_total = 0;
    let mut report = Vec::new();
    for mode in [BlendMode::Temporal, BlendMode::FrameWise] {
        let out = edit_branch(&toy.weights, &toy.schedule, &toy.inv, &toy.recon, &target, &InjectionConfig::default(), mode, 7.5)?;
        let [f, c, h, w] = out.latent().shape().to_vec()[..] else { unreachable!() };
        let mask = out.final_mask().expect("blending is on").resize_nearest(h, w);
        let (edit, recon) = (out.latent().data(), toy.recon.latent().data());
        let mut outside = 0;
        for fi in 0..f {
            for ch in 0..c {
                for j in 0..h * w {
                    if !mask.get(fi, j / w, j % w) {
                        let k = (fi * c + ch) * h * w + j;
                        differing += usize::from(edit[k].to_bits() != recon[k].to_bits());
                        outside += 1;
                    }
                }
            }
        }
        outside_total += outside;
        report.push(format!("{mode:?}: {outside} values outside the mask"));
    }
    outcome(
        differing == 0 && outside_total > 0,
        format!("{}; {differing} differ from the reconstruction", report.join(", ")),
    )
}

fn ablation(image: &Weights) -> Result<Outcome> {
    let t0 = Instant::now();
    let result = run_ablation(image, &RunConfig::default(), 10)?;
    let secs = t0.elapsed().as_secs_f64();
    let (tc, fw) = (&result.reports[0], &result.reports[1]);
    let (tc_iou, fw_iou) = (tc.mask_iou.unwrap_or(0.0), fw.mask_iou.unwrap_or(0.0));
    for s in &result.scenes {
        eprintln!(
            "  scene {}: IoU {:.3} vs {:.3}, consistency {:.4} vs {:.4}",
            s.seed, s.temporal_iou, s.framewise_iou, s.temporal_consistency, s.framewise_consistency
        );
    }
    outcome(
        tc_iou > fw_iou && tc.frame_consistency >= fw.frame_consistency && secs < 1800.0,
        format!(
            "mean IoU {tc_iou:.3} with TC vs {fw_iou:.3} frame-wise; masked consistency {:.4} vs {:.4}; {secs:.0} s",
            tc.frame_consistency, fw.frame_consistency
        ),
    )
}

fn self_edit_identity(toy: &Toy) -> Result<Outcome> {
    let full = InjectionConfig {
        dur_cross: 1.0,
        dur_st: 1.0,
        dur_temporal: 1.0,
        ..InjectionConfig::default()
    };
    let out = edit_branch(&toy.weights, &toy.schedule, &toy.inv, &toy.recon, &toy.inv.cond, &full, BlendMode::Off, 7.5)?;
    let rms = out.latent().rms_diff(toy.recon.latent())?;
    outcome(rms <= 1e-6, format!("RMS {rms:.2e} from the reconstruction"))
}

fn edit_config(dir: &Path, weights: &Path) -> Result<RunConfig> {
    let scene = make_data(&dir.join("data"), 3, 8, 16)?;
    let mut cfg = RunConfig::default();
    cfg.paths.weights = weights.to_path_buf();
    cfg.paths.video = Some(dir.join("data"));
    cfg.paths.output = dir.join("out");
    cfg.prompts.target = recolor_target(&scene.params);
    Ok(cfg)
}

fn determinism(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.output_dir();
    run_edit(cfg)?;
    let csv = std::fs::read(out.join("report.csv"))?;
    let latent = load_video_archive(&out.join("edit/latent.safetensors"))?;
    run_edit(cfg)?;
    let same_csv = std::fs::read(out.join("report.csv"))? == csv;
    let again = load_video_archive(&out.join("edit/latent.safetensors"))?;
    let same_latent = latent.shape() == again.shape() && latent.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(same_csv && same_latent, format!("identical CSV: {same_csv}, identical latent: {same_latent}"))
}

fn stats(a: &Array) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    (mean, (a.sum_sq() / n - mean * mean).sqrt())
}

fn baseline_contracts(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    // the tuned model from the determinism runs, so both baselines share it
    cfg.paths.tuned = Some(cfg.output_dir().join("tuned.safetensors"));
    cfg.paths.output = cfg.paths.output.join("baselines");
    cfg.sdedit.start_step = 0;
    let (untouched, _) = run_baseline_sdedit(&cfg)?;
    let source = to_latent(&videdit::pipeline::load_source(cfg.paths.video.as_ref().unwrap())?.frames);
    let zero_ok = untouched.data().iter().zip(source.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    cfg.sdedit.start_step = cfg.schedule.sampler_steps;
    let (from_noise, _) = run_baseline_sdedit(&cfg)?;
    let (generated, _) = run_baseline_generate(&cfg)?;
    let full_ok = from_noise == generated;
    let ((m1, s1), (m2, s2)) = (stats(&from_noise), stats(&generated));
    outcome(
        zero_ok && full_ok,
        format!(
            "t0=0 returns the source bitwise: {zero_ok}; t0=S equals generate: {full_ok} \
             (mean {m1:.4}/{m2:.4}, std {s1:.4}/{s2:.4})"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Result<Outcome>| {
        let t0 = Instant::now();
        let r = f();
        eprintln!("criterion {id} ({name}) done in {:.1} s", t0.elapsed().as_secs_f64());
        results.push((id, name, r));
    };
    run(2, "algebraic inverse", &mut algebraic_inverse);
    run(3, "inflation identity", &mut inflation_identity);
    run(4, "sparse attention oracle", &mut st_attention_oracle);
    run(6, "gradient checks", &mut gradient_checks);
    run(7, "blending math", &mut blending_math);

    match image_model() {
        Ok((image, weights)) => {
            match toy(&image) {
                Ok(t) => {
                    run(1, "round trip at w=1", &mut || round_trip(&t));
                    run(5, "null-text inversion efficacy", &mut || nti_efficacy(&t));
                    run(8, "background preservation", &mut || background_preservation(&t));
                    run(10, "self-edit identity", &mut || self_edit_identity(&t));
                }
                Err(e) => {
                    let msg = format!("toy pipeline failed: {e}");
                    for (id, name) in [(1, "round trip at w=1"), (5, "null-text inversion efficacy"), (8, "background preservation"), (10, "self-edit identity")] {
                        run(id, name, &mut || Err(videdit::error::Error::Config(msg.clone())));
                    }
                }
            }
            let dir = tempfile::tempdir().expect("temporary directory");
            match edit_config(dir.path(), &weights) {
                Ok(cfg) => {
                    run(11, "determinism", &mut || determinism(&cfg));
                    run(12, "baseline contracts", &mut || baseline_contracts(&cfg));
                }
                Err(e) => {
                    let msg = format!("dataset setup failed: {e}");
                    run(11, "determinism", &mut || Err(videdit::error::Error::Config(msg.clone())));
                    run(12, "baseline contracts", &mut || Err(videdit::error::Error::Config(msg.clone())));
                }
            }
            run(9, "blending ablation", &mut || ablation(&image));
        }
        Err(e) => {
            let msg = format!("no pretrained image model: {e}");
            for (id, name) in [
                (1, "round trip at w=1"),
                (5, "null-text inversion efficacy"),
                (8, "background preservation"),
                (9, "blending ablation"),
                (10, "self-edit identity"),
                (11, "determinism"),
                (12, "baseline contracts"),
            ] {
                run(id, name, &mut || Err(videdit::error::Error::Config(msg.clone())));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let mut passed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        passed += usize::from(pass);
        println!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{passed}/{} criteria passed", results.len());
}
