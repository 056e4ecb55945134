//! Oracles shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use videdit::autodiff::Tape;
use videdit::diffusion::{make_schedule, BetaKind, NoiseSchedule};
use videdit::error::Result;
use videdit::model::{timestep_features, ModelConfig, ParamVars, Weights};
use videdit::tensor::Array;
use videdit::training::{finetune_loss_and_grad, nti_loss_and_grad, NtiStep, ParamFilter};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        size: 8,
        base_channels: 8,
        coarse_channels: 8,
        text_dim: 8,
        max_tokens: 4,
        time_features: 8,
        time_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn schedule(sampler_steps: usize) -> NoiseSchedule {
    make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear, sampler_steps).unwrap()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array {
    Array::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Adds N(0, std) noise to every parameter accepted by `which`, so that no
/// layer (zero-initialised heads included) is trivially inactive.
pub fn perturb(w: &mut Weights, seed: u64, std: f64, which: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, a) in w.params.iter_mut() {
        if which(name) {
            for x in a.data_mut() {
                *x += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Queries and keys of the first transformer block's self-attention,
/// recomputed layer by layer from the parameters: `[F, HW, D]` each.
pub fn first_block_qk(w: &Weights, z: &Array, t: usize) -> Result<(Array, Array)> {
    let cfg = &w.config;
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, w, |_| false);
    let linear = |tape: &mut Tape, x, name: &str, bias: bool| -> Result<_> {
        let y = tape.matmul(x, p.get(&format!("{name}.w"))?)?;
        if bias {
            tape.add_bias(y, p.get(&format!("{name}.b"))?)
        } else {
            Ok(y)
        }
    };
    let feats = tape.constant(timestep_features(&[t], cfg.time_features));
    let temb = linear(&mut tape, feats, "time.l1", true)?;
    let temb = tape.silu(temb);
    let temb = linear(&mut tape, temb, "time.l2", true)?;
    let temb = tape.silu(temb);
    let conv = |tape: &mut Tape, x, name: &str, stride| -> Result<_> {
        tape.conv3x3(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?, stride)
    };
    let res = |tape: &mut Tape, x, name: &str| -> Result<_> {
        let h = tape.silu(x);
        let h = conv(tape, h, &format!("{name}.conv1"), 1)?;
        let tv = tape.matmul(temb, p.get(&format!("{name}.temb.w"))?)?;
        let tv = tape.add_bias(tv, p.get(&format!("{name}.temb.b"))?)?;
        let h = tape.add_channel(h, tv)?;
        let h = tape.silu(h);
        let h = conv(tape, h, &format!("{name}.conv2"), 1)?;
        tape.add(x, h)
    };
    let zv = tape.constant(z.clone());
    let h = conv(&mut tape, zv, "conv_in", 1)?;
    let h = res(&mut tape, h, "res0")?;
    let h = conv(&mut tape, h, "down", 2)?;
    let h = res(&mut tape, h, "res1")?;
    let [n, c, s, s2] = tape.value(h).shape().to_vec()[..] else {
        unreachable!("conv output is NCHW")
    };
    let tokens = tape.permute(h, &[0, 2, 3, 1]);
    let tokens = tape.reshape(tokens, &[n, s * s2, c])?;
    let normed = tape.layer_norm(tokens, 1e-5);
    let block = &cfg.attention_blocks[0];
    let q = linear(&mut tape, normed, &format!("{block}.attn1.q"), false)?;
    let k = linear(&mut tape, normed, &format!("{block}.attn1.k"), false)?;
    Ok((tape.value(q).clone(), tape.value(k).clone()))
}

/// Full attention of every query against every key of every frame, then
/// restricted to the columns of frames `0` and `f - 1` and renormalised;
/// head-averaged `[F, N, 2N]`.
pub fn restricted_full_attention(q: &Array, k: &Array, heads: usize) -> Array {
    let [f, n, d] = q.shape().to_vec()[..] else { panic!("q must be rank 3") };
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; f * n * 2 * n];
    for fi in 0..f {
        let prev = fi.saturating_sub(1);
        for h in 0..heads {
            for j in 0..n {
                let qrow = &q.data()[(fi * n + j) * d + h * dh..(fi * n + j) * d + (h + 1) * dh];
                // logits against all F * N keys
                let all: Vec<f64> = (0..f * n)
                    .map(|key| {
                        let krow = &k.data()[key * d + h * dh..key * d + (h + 1) * dh];
                        scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let cols: Vec<f64> = (0..n).map(|i| all[i]).chain((0..n).map(|i| all[prev * n + i])).collect();
                let m = cols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cols.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (i, v) in e.iter().enumerate() {
                    out[(fi * n + j) * 2 * n + i] += v / z / heads as f64;
                }
            }
        }
    }
    Array::new(&[f, n, 2 * n], out).unwrap()
}

/// Sparse maps as the model computes them: keys paired per frame, then
/// multi-head softmax, head-averaged.
pub fn sparse_attention(q: &Array, k: &Array, heads: usize) -> Result<Array> {
    let f = q.shape()[0];
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let paired = tape.pair_frames(kv, vec![0; f], (0..f).map(|i| i.saturating_sub(1)).collect())?;
    let probs = tape.attn_probs(qv, paired, heads)?;
    videdit::model::head_average(tape.value(probs))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest relative error between analytic and central-difference gradients
/// of the null-text objective, over every null entry.
pub fn nti_gradient_error(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = videdit::model::inflate(&Weights::init(&small_config(), seed)?)?;
    perturb(&mut w, seed + 1, 0.1, |_| true);
    let cfg = w.config.clone();
    let shape = [2, cfg.channels, cfg.size, cfg.size];
    let z = normal(&mut rng, &shape, 1.0);
    let fixed = normal(&mut rng, &shape, 1.0);
    let target = normal(&mut rng, &shape, 1.0);
    let null = normal(&mut rng, &[cfg.max_tokens, cfg.text_dim], 0.5);
    let step = NtiStep {
        z: &z,
        t: 401,
        fixed: &fixed,
        null_weight: -0.35,
        target: &target,
    };
    let (_, grad) = nti_loss_and_grad(&w, &step, &null)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..null.len() {
        let mut plus = null.clone();
        plus.data_mut()[i] += h;
        let mut minus = null.clone();
        minus.data_mut()[i] -= h;
        let fd = (nti_loss_and_grad(&w, &step, &plus)?.0 - nti_loss_and_grad(&w, &step, &minus)?.0) / (2.0 * h);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    Ok((worst, null.len()))
}

/// Same check for the finetuning loss over at most `budget` attention
/// parameters spread across every tuned tensor.
pub fn finetune_gradient_error(seed: u64, budget: usize) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = videdit::model::inflate(&Weights::init(&small_config(), seed)?)?;
    perturb(&mut w, seed + 1, 0.1, |_| true);
    let cfg = w.config.clone();
    let sched = schedule(10);
    let video = normal(&mut rng, &[3, cfg.channels, cfg.size, cfg.size], 0.5);
    let eps = normal(&mut rng, video.shape(), 1.0);
    let text = normal(&mut rng, &[cfg.max_tokens, cfg.text_dim], 0.5);
    let t = 333;
    let filter = ParamFilter::Attention;
    let (_, grads) = finetune_loss_and_grad(&w, &video, &text, t, &eps, &sched, filter)?;
    let names: Vec<String> = grads.keys().cloned().collect();
    let per = (budget / names.len().max(1)).max(1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in &names {
        let len = w.params[name].len();
        let picks: Vec<usize> = (0..per.min(len)).map(|_| rng.gen_range(0..len)).collect();
        for i in picks {
            if checked == budget {
                break;
            }
            let loss_at = |delta: f64| -> Result<f64> {
                let mut wp = w.clone();
                wp.params.get_mut(name).unwrap().data_mut()[i] += delta;
                Ok(finetune_loss_and_grad(&wp, &video, &text, t, &eps, &sched, filter)?.0)
            };
            let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(grads[name].data()[i], fd));
            checked += 1;
        }
    }
    Ok((worst, checked))
}
