use std::collections::BTreeMap;

use super::{AttentionHook, AttentionRecord, AttentionSite, AttnType, ModelKind, Recorder, Weights};
use crate::autodiff::{Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::tensor::Array;

const LN_EPS: f64 = 1e-5;

/// Parameters bound as tape leaves.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, weights: &Weights, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = weights
            .params
            .iter()
            .map(|(name, a)| (name.clone(), tape.leaf(a.clone(), trainable(name))))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Sinusoidal timestep features `[sin(t f_i), cos(t f_i)]`, one row per time.
pub fn timestep_features(times: &[usize], width: usize) -> Array {
    let half = width / 2;
    let mut out = Vec::with_capacity(times.len() * width);
    for &t in times {
        let t = t as f64;
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t * f).sin());
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t * f).cos());
        }
    }
    Array::new(&[times.len(), width], out).expect("feature buffer matches shape")
}

struct Ctx<'a, 'h> {
    tape: &'a mut Tape,
    weights: &'a Weights,
    p: &'a ParamVars,
    hook: Option<&'h mut dyn AttentionHook>,
}

impl Ctx<'_, '_> {
    fn video(&self) -> bool {
        self.weights.kind == ModelKind::Video
    }

    fn check(&self, v: Var, layer: &str) -> Result<()> {
        if self.tape.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(format!("output of layer {layer}")))
        }
    }

    fn linear(&mut self, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.p.get(&format!("{name}.b"))?;
            self.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        self.tape.conv3x3(x, w, b, stride)
    }

    fn resblock(&mut self, x: Var, name: &str, temb: Var) -> Result<Var> {
        let h = self.tape.silu(x);
        let h = self.conv(h, &format!("{name}.conv1"), 1)?;
        let t = self.linear(temb, &format!("{name}.temb"), true)?;
        let h = self.tape.add_channel(h, t)?;
        let h = self.tape.silu(h);
        let h = self.conv(h, &format!("{name}.conv2"), 1)?;
        let out = self.tape.add(x, h)?;
        self.check(out, name)?;
        Ok(out)
    }

    fn attend(&mut self, q: Var, k: Var, v: Var, layer: &str, kind: AttnType) -> Result<Var> {
        let heads = self.weights.config.heads;
        let probs = self.tape.attn_probs(q, k, heads)?;
        let probs = match self.hook.as_deref_mut() {
            Some(hook) => {
                let site = AttentionSite { layer, kind };
                match hook.on_attention(&site, self.tape.value(probs))? {
                    Some(replaced) => {
                        self.tape.value(probs).ensure_same_shape(&replaced, layer)?;
                        self.tape.constant(replaced)
                    }
                    None => probs,
                }
            }
            None => probs,
        };
        self.tape.attn_apply(probs, v)
    }

    /// Transformer block on `x: [N, C, s, s]`.
    fn attention_block(&mut self, x: Var, block: &str, text: Var) -> Result<Var> {
        let [n, c, s, s2] = self.tape.value(x).shape().to_vec()[..] else {
            return Err(Error::Shape("attention block expects NCHW".into()));
        };
        let hw = s * s2;
        let tokens = self.tape.permute(x, &[0, 2, 3, 1]);
        let mut tokens = self.tape.reshape(tokens, &[n, hw, c])?;

        // self / sparse spatio-temporal attention
        let name = format!("{block}.attn1");
        let normed = self.tape.layer_norm(tokens, LN_EPS);
        let q = self.linear(normed, &format!("{name}.q"), false)?;
        let mut k = self.linear(normed, &format!("{name}.k"), false)?;
        let mut v = self.linear(normed, &format!("{name}.v"), false)?;
        if self.video() {
            let first = vec![0; n];
            let prev: Vec<usize> = (0..n).map(|f| f.saturating_sub(1)).collect();
            k = self.tape.pair_frames(k, first.clone(), prev.clone())?;
            v = self.tape.pair_frames(v, first, prev)?;
        }
        let out = self.attend(q, k, v, &name, AttnType::SpatioTemporal)?;
        let out = self.linear(out, &format!("{name}.o"), true)?;
        tokens = self.tape.add(tokens, out)?;

        // cross-attention to the prompt
        let name = format!("{block}.attn2");
        let normed = self.tape.layer_norm(tokens, LN_EPS);
        let q = self.linear(normed, &format!("{name}.q"), false)?;
        let k = self.linear(text, &format!("{name}.k"), false)?;
        let v = self.linear(text, &format!("{name}.v"), false)?;
        let out = self.attend(q, k, v, &name, AttnType::Cross)?;
        let out = self.linear(out, &format!("{name}.o"), true)?;
        tokens = self.tape.add(tokens, out)?;

        let normed = self.tape.layer_norm(tokens, LN_EPS);
        let h = self.linear(normed, &format!("{block}.ff1"), true)?;
        let h = self.tape.silu(h);
        let h = self.linear(h, &format!("{block}.ff2"), true)?;
        tokens = self.tape.add(tokens, h)?;

        if self.video() {
            let name = format!("{block}.attn_temp");
            let per_pixel = self.tape.permute(tokens, &[1, 0, 2]);
            let normed = self.tape.layer_norm(per_pixel, LN_EPS);
            let q = self.linear(normed, &format!("{name}.q"), false)?;
            let k = self.linear(normed, &format!("{name}.k"), false)?;
            let v = self.linear(normed, &format!("{name}.v"), false)?;
            let out = self.attend(q, k, v, &name, AttnType::Temporal)?;
            let out = self.linear(out, &format!("{name}.o"), true)?;
            let out = self.tape.permute(out, &[1, 0, 2]);
            tokens = self.tape.add(tokens, out)?;
        }

        let grid = self.tape.reshape(tokens, &[n, s, s2, c])?;
        let out = self.tape.permute(grid, &[0, 3, 1, 2]);
        self.check(out, block)?;
        Ok(out)
    }
}

/// Noise prediction on the tape.
///
/// `z: [N, C, H, W]` is a batch of independent images for the image model and
/// the frames of one video for the video model. `times` holds one timestep per
/// sample or a single shared one; `text: [N or 1, L, d]`.
pub fn forward(
    tape: &mut Tape,
    weights: &Weights,
    p: &ParamVars,
    z: Var,
    times: &[usize],
    text: Var,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<Var> {
    let cfg = &weights.config;
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 4 || zs[1] != cfg.channels || zs[2] != cfg.size || zs[3] != cfg.size || zs[0] == 0 {
        return Err(Error::Shape(format!(
            "latent {zs:?} for a {}x{}x{} model",
            cfg.channels, cfg.size, cfg.size
        )));
    }
    if times.len() != 1 && times.len() != zs[0] {
        return Err(Error::Shape(format!("{} timesteps for {} samples", times.len(), zs[0])));
    }
    let ts = tape.value(text).shape().to_vec();
    if ts.len() != 3 || (ts[0] != 1 && ts[0] != zs[0]) || ts[1] != cfg.max_tokens || ts[2] != cfg.text_dim {
        return Err(Error::Shape(format!("text embedding {ts:?}")));
    }
    if cfg.attention_blocks.is_empty() {
        return Err(Error::Config("model needs at least one attention block".into()));
    }
    let mut cx = Ctx { tape, weights, p, hook };

    let feats = cx.tape.constant(timestep_features(times, cfg.time_features));
    let temb = cx.linear(feats, "time.l1", true)?;
    let temb = cx.tape.silu(temb);
    let temb = cx.linear(temb, "time.l2", true)?;
    let temb = cx.tape.silu(temb);

    let h = cx.conv(z, "conv_in", 1)?;
    let skip = cx.resblock(h, "res0", temb)?;
    let h = cx.conv(skip, "down", 2)?;
    let mut h = cx.resblock(h, "res1", temb)?;
    h = cx.attention_block(h, &cfg.attention_blocks[0], text)?;
    h = cx.resblock(h, "res_mid", temb)?;
    for block in &cfg.attention_blocks[1..] {
        h = cx.attention_block(h, block, text)?;
    }
    let h = cx.tape.upsample2x(h)?;
    let h = cx.conv(h, "up", 1)?;
    let h = cx.tape.add(h, skip)?;
    let h = cx.resblock(h, "res2", temb)?;
    let h = cx.tape.silu(h);
    let out = cx.conv(h, "conv_out", 1)?;
    cx.check(out, "conv_out")?;
    Ok(out)
}

impl Weights {
    /// Inference forward with all parameters constant.
    pub fn predict_with(
        &self,
        z: &Array,
        times: &[usize],
        text: &Array,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Array> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, self, |_| false);
        let zv = tape.constant(z.clone());
        let text = match text.shape() {
            [l, d] => text.clone().reshape(&[1, *l, *d])?,
            _ => text.clone(),
        };
        let tv = tape.constant(text);
        let out = forward(&mut tape, self, &p, zv, times, tv, hook)?;
        Ok(tape.value(out).clone())
    }

    /// Noise prediction for a single image `[C, H, W]`.
    pub fn forward2d(&self, z: &Array, t: usize, text: &Array) -> Result<Array> {
        let shape = z.shape().to_vec();
        let batched = z.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
        self.predict_with(&batched, &[t], text, None)?.reshape(&shape)
    }
}

impl NoisePredictor for Weights {
    fn predict(&self, z: &Array, t: usize, text: &Array, hook: Option<&mut dyn AttentionHook>) -> Result<Array> {
        self.predict_with(z, &[t], text, hook)
    }
}

/// Video forward returning the noise prediction and, when `record` is set,
/// one head-averaged record per attention module.
pub fn forward3d(
    weights: &Weights,
    z: &Array,
    t: usize,
    text: &Array,
    record: bool,
) -> Result<(Array, Vec<AttentionRecord>)> {
    if !record {
        return Ok((weights.predict_with(z, &[t], text, None)?, Vec::new()));
    }
    let mut rec = Recorder::default();
    let out = weights.predict_with(z, &[t], text, Some(&mut rec))?;
    Ok((out, rec.records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{inflate, max_row_sum_error, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
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

    fn randomize_head(w: &mut Weights, rng: &mut ChaCha8Rng) {
        for name in ["conv_out.w", "conv_out.b"] {
            for x in w.params.get_mut(name).unwrap().data_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let w = Weights::init(&small(), 1).unwrap();
        let z = Array::from_fn(&[4, 8, 8], |i| (i as f64).sin());
        let text = w.embed_tokens(&[1, 3, 0, 0]).unwrap();
        let out = w.forward2d(&z, 500, &text).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = Weights::init(&small(), 2).unwrap();
        randomize_head(&mut w, &mut rng);
        let z = Array::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let text = w.embed_tokens(&[1, 3, 6, 0]).unwrap();
        let a = w.forward2d(&z, 321, &text).unwrap();
        let b = w.forward2d(&z, 321, &text).unwrap();
        assert_eq!(a.shape(), &[4, 8, 8]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn video_records_cover_every_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w3 = inflate(&Weights::init(&small(), 3).unwrap()).unwrap();
        let z = Array::from_fn(&[3, 4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let text = w3.embed_tokens(&[1, 3, 6, 0]).unwrap();
        let (_, none) = forward3d(&w3, &z, 10, &text, false).unwrap();
        assert!(none.is_empty());
        let (_, recs) = forward3d(&w3, &z, 10, &text, true).unwrap();
        assert_eq!(recs.len(), 3 * w3.config.attention_blocks.len());
        for r in &recs {
            assert!(max_row_sum_error(&r.map) < 1e-5, "{}", r.layer_id);
            let expect: Vec<usize> = match r.attn_type {
                AttnType::Cross => vec![3, 16, 4],
                AttnType::SpatioTemporal => vec![3, 16, 32],
                AttnType::Temporal => vec![16, 3, 3],
            };
            assert_eq!(r.map.shape(), expect.as_slice());
        }
    }

    #[test]
    fn rejects_wrong_latent_shape() {
        let w = Weights::init(&small(), 1).unwrap();
        let text = w.embed_tokens(&[1, 0, 0, 0]).unwrap();
        assert!(w.predict(&Array::zeros(&[1, 3, 8, 8]), 1, &text, None).is_err());
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut w = Weights::init(&small(), 1).unwrap();
        w.params.get_mut("res0.conv1.b").unwrap().data_mut()[0] = f64::INFINITY;
        let text = w.embed_tokens(&[1, 0, 0, 0]).unwrap();
        let err = w.predict(&Array::zeros(&[1, 4, 8, 8]), 1, &text, None).unwrap_err();
        assert!(err.to_string().contains("res0"), "{err}");
    }
}
