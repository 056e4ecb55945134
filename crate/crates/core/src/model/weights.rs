use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::archive;
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Image,
    Video,
}

/// Named parameters of either the image model or its inflated video model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Array>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    config: ModelConfig,
    config_hash: String,
    layers: BTreeMap<String, Vec<usize>>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Array>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let rng = &mut self.rng;
        let a = Array::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.params.insert(name, a);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, Array::zeros(shape));
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, gain: f64) {
        self.normal(format!("{name}.w"), &[cout, cin, 3, 3], gain / ((cin * 9) as f64).sqrt());
        self.zeros(format!("{name}.b"), &[cout]);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) {
        self.normal(format!("{name}.w"), &[din, dout], 1.0 / (din as f64).sqrt());
        if bias {
            self.zeros(format!("{name}.b"), &[dout]);
        }
    }

    fn resblock(&mut self, name: &str, ch: usize, time_dim: usize) {
        self.conv(&format!("{name}.conv1"), ch, ch, 1.0);
        self.linear(&format!("{name}.temb"), time_dim, ch, true);
        self.conv(&format!("{name}.conv2"), ch, ch, 0.5);
    }

    fn attention(&mut self, name: &str, dim: usize, kv_dim: usize) {
        self.linear(&format!("{name}.q"), dim, dim, false);
        self.linear(&format!("{name}.k"), kv_dim, dim, false);
        self.linear(&format!("{name}.v"), kv_dim, dim, false);
        self.linear(&format!("{name}.o"), dim, dim, true);
    }
}

impl Weights {
    /// Fresh image-model parameters; the output convolution starts at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
        };
        let (c, c0, c1, td) = (config.channels, config.base_channels, config.coarse_channels, config.time_dim);
        init.linear("time.l1", config.time_features, td, true);
        init.linear("time.l2", td, td, true);
        init.normal("text.token.w".into(), &[config.vocab_size, config.text_dim], 1.0);
        init.normal("text.pos.w".into(), &[config.max_tokens, config.text_dim], 0.1);
        init.conv("conv_in", c0, c, 1.0);
        init.resblock("res0", c0, td);
        init.conv("down", c1, c0, 1.0);
        init.resblock("res1", c1, td);
        for block in &config.attention_blocks {
            init.attention(&format!("{block}.attn1"), c1, c1);
            init.attention(&format!("{block}.attn2"), c1, config.text_dim);
            init.linear(&format!("{block}.ff1"), c1, 2 * c1, true);
            init.linear(&format!("{block}.ff2"), 2 * c1, c1, true);
        }
        init.resblock("res_mid", c1, td);
        init.conv("up", c0, c1, 1.0);
        init.resblock("res2", c0, td);
        init.zeros("conv_out.w".into(), &[c, c0, 3, 3]);
        init.zeros("conv_out.b".into(), &[c]);
        Ok(Self {
            kind: ModelKind::Image,
            config: config.clone(),
            params,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.params.get(name).ok_or_else(|| Error::UnknownLayer(name.to_owned()))
    }

    pub fn num_params(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(k, _)| filter(k)).map(|(_, v)| v.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected parameters.
    pub fn hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.params.iter().filter(|(k, _)| filter(k)) {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in a.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.kind).expect("kind serializes"));
        hex(&h.finalize())[..16].to_owned()
    }

    /// The text embedding `[L, d]` for token ids under this model's tables.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Array> {
        crate::text::embed_ids(ids, self.get("text.token.w")?, self.get("text.pos.w")?)
    }

    pub fn encode_text(&self, prompt: &str, vocab: &crate::text::Vocab) -> Result<crate::text::TextEmbedding> {
        let token_ids = vocab.tokenize(prompt, self.config.max_tokens);
        let embeddings = self.embed_tokens(&token_ids)?;
        Ok(crate::text::TextEmbedding {
            null_flag: prompt.split_whitespace().next().is_none(),
            token_ids,
            embeddings,
        })
    }

    /// Writes `<stem>.safetensors` plus a JSON manifest `<stem>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            kind: self.kind,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            layers: self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        let manifest_json = serde_json::to_string_pretty(&manifest)?;
        let named: Vec<(&str, &Array)> = self.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut meta = BTreeMap::new();
        meta.insert("manifest".to_owned(), manifest_json.clone());
        archive::save(path, &named, meta)?;
        std::fs::write(path.with_extension("json"), manifest_json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (arrays, meta) = archive::load(path)?;
        let manifest: Manifest = serde_json::from_str(
            meta.get("manifest")
                .ok_or_else(|| Error::Archive("weights archive has no manifest".into()))?,
        )?;
        for (name, shape) in &manifest.layers {
            let a = arrays
                .get(name)
                .ok_or_else(|| Error::Archive(format!("missing parameter {name}")))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Archive(format!("parameter {name} has shape {:?}, manifest says {shape:?}", a.shape())));
            }
        }
        let w = Self {
            kind: manifest.kind,
            config: manifest.config,
            params: arrays,
        };
        if w.config_hash() != manifest.config_hash {
            return Err(Error::Archive("config hash mismatch".into()));
        }
        Ok(w)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Image model to video model.
///
/// 3x3 kernels gain a unit temporal axis with identical values, self-attention
/// projections are kept as the sparse spatio-temporal projections, and every
/// transformer block gets a temporal attention with zero output projection.
pub fn inflate(image: &Weights) -> Result<Weights> {
    if image.kind != ModelKind::Image {
        return Err(Error::Config("inflate expects image-model weights".into()));
    }
    let cfg = &image.config;
    let mut params = BTreeMap::new();
    for (name, a) in &image.params {
        let known = name.starts_with("time.")
            || name.starts_with("text.")
            || name.ends_with(".b")
            || name.ends_with(".w");
        if !known {
            return Err(Error::UnknownLayer(name.clone()));
        }
        let inflated = match a.shape() {
            [co, ci, 3, 3] => a.clone().reshape(&[*co, *ci, 1, 3, 3])?,
            _ => a.clone(),
        };
        params.insert(name.clone(), inflated);
    }
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(0x7e3a_11f0),
        params: &mut params,
    };
    let c1 = cfg.coarse_channels;
    for block in &cfg.attention_blocks {
        let name = format!("{block}.attn_temp");
        init.linear(&format!("{name}.q"), c1, c1, false);
        init.linear(&format!("{name}.k"), c1, c1, false);
        init.linear(&format!("{name}.v"), c1, c1, false);
        init.zeros(format!("{name}.o.w"), &[c1, c1]);
        init.zeros(format!("{name}.o.b"), &[c1]);
    }
    Ok(Weights {
        kind: ModelKind::Video,
        config: cfg.clone(),
        params,
    })
}

/// Cross, spatio-temporal and temporal attention parameters.
pub fn is_attention_param(name: &str) -> bool {
    name.contains(".attn1.") || name.contains(".attn2.") || name.contains(".attn_temp.")
}
