//! Frozen toy transformer towers: a patch-based image encoder whose attention
//! projections accept LoRA adapters, and a bag-of-words text encoder.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{lora_linear, AdapterSet, AdapterTarget, ProjLayer};
use crate::tensor::{checksum, SeededRng, Tensor};

const LN_EPS: f64 = 1e-5;

/// Words understood by the default text encoder.
pub const DEFAULT_VOCAB: [&str; 32] = [
    "a", "an", "image", "photo", "taken", "during", "the", "day", "at", "on", "in", "night", "nighttime", "rainy",
    "rain", "snowy", "snow", "clear", "sunny", "dark", "wet", "road", "street", "scene", "of", "with", "and",
    "heavy", "light", "evening", "weather", "cloudy",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
    pub vocab: Vec<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            patch: 4,
            channels: 3,
            seed: 0,
            vocab: DEFAULT_VOCAB.iter().map(|w| w.to_string()).collect(),
        }
    }
}

fn uniform_matrix(rng: &mut SeededRng, rows: usize, cols: usize, bound: f64) -> Result<Tensor> {
    Tensor::from_vec(rng.uniform_vec(rows * cols, -bound, bound), &[rows, cols])
}

/// Pre-norm single-head self-attention plus a `d → 4d → d` ReLU MLP.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    dim: usize,
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_proj: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

impl AttentionBlock {
    pub fn new(rng: &mut SeededRng, dim: usize) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let ones = || Tensor::from_vec(vec![1.0; dim], &[dim]);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        Ok(Self {
            dim,
            ln1_gain: ones()?,
            ln1_bias: zeros(dim),
            w_q: uniform_matrix(rng, dim, dim, bound)?,
            w_k: uniform_matrix(rng, dim, dim, bound)?,
            w_v: uniform_matrix(rng, dim, dim, bound)?,
            w_proj: uniform_matrix(rng, dim, dim, bound)?,
            ln2_gain: ones()?,
            ln2_bias: zeros(dim),
            mlp_w1: uniform_matrix(rng, 4 * dim, dim, bound)?,
            mlp_b1: zeros(4 * dim),
            mlp_w2: uniform_matrix(rng, dim, 4 * dim, bound)?,
            mlp_b2: zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self, layer: ProjLayer) -> &Tensor {
        match layer {
            ProjLayer::Q => &self.w_q,
            ProjLayer::K => &self.w_k,
            ProjLayer::V => &self.w_v,
            ProjLayer::Proj => &self.w_proj,
        }
    }

    fn projection_mut(&mut self, layer: ProjLayer) -> &mut Tensor {
        match layer {
            ProjLayer::Q => &mut self.w_q,
            ProjLayer::K => &mut self.w_k,
            ProjLayer::V => &mut self.w_v,
            ProjLayer::Proj => &mut self.w_proj,
        }
    }

    pub fn weights(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_proj,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    /// `x` holds `groups` independent sequences of `x.rows / groups` tokens.
    /// Attention never mixes tokens across groups.
    pub fn forward(&self, x: &Tensor, groups: usize, index: usize, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let &[rows, d] = x.shape() else {
            return Err(Error::Dimension {
                op: "attention_block",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim],
            });
        };
        if d != self.dim || groups == 0 || rows % groups != 0 {
            return Err(Error::Dimension {
                op: "attention_block",
                lhs: x.shape().to_vec(),
                rhs: vec![groups, self.dim],
            });
        }
        let tokens = rows / groups;
        let adapter = |layer| adapters.and_then(|s| s.get(AdapterTarget { block: index, layer }));

        let h = x.layer_norm(&self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let q = lora_linear(&self.w_q, adapter(ProjLayer::Q), &h)?.reshape(&[groups, tokens, d])?;
        let k = lora_linear(&self.w_k, adapter(ProjLayer::K), &h)?.reshape(&[groups, tokens, d])?;
        let v = lora_linear(&self.w_v, adapter(ProjLayer::V), &h)?.reshape(&[groups, tokens, d])?;
        let attn = q.bmm_t(&k)?.scalar_mul(1.0 / (d as f64).sqrt()).softmax_rows();
        let ctx = attn.bmm(&v)?.reshape(&[rows, d])?;
        let x = x.add(&lora_linear(&self.w_proj, adapter(ProjLayer::Proj), &ctx)?)?;

        let h2 = x.layer_norm(&self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        let mlp = h2
            .matmul_t(&self.mlp_w1)?
            .add_bias(&self.mlp_b1)?
            .relu()
            .matmul_t(&self.mlp_w2)?
            .add_bias(&self.mlp_b2)?;
        x.add(&mlp)
    }
}

/// `V(·)`: non-overlapping `p×p` patches, linear embedding, `L` blocks, mean pool.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch: usize,
    channels: usize,
    dim: usize,
    patch_embed: Tensor,
    blocks: Vec<AttentionBlock>,
}

impl ImageEncoder {
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        std::iter::once(&self.patch_embed)
            .chain(self.blocks.iter().flat_map(|b| b.weights()))
            .collect()
    }

    pub fn checksum(&self) -> String {
        checksum(self.weights())
    }

    /// Tokens per crop of the given extent.
    pub fn tokens_per_crop(&self, height: usize, width: usize) -> usize {
        (height / self.patch) * (width / self.patch)
    }

    /// `[N, H, W, C]` crops to `[N·T, p·p·C]` patch rows, raster order within
    /// each crop.
    pub fn patchify(&self, crops: &Tensor) -> Result<Tensor> {
        let &[n, h, w, c] = crops.shape() else {
            return Err(Error::Dimension {
                op: "patchify",
                lhs: crops.shape().to_vec(),
                rhs: vec![self.patch, self.patch, self.channels],
            });
        };
        let p = self.patch;
        if h % p != 0 || w % p != 0 || c != self.channels {
            return Err(Error::Dimension {
                op: "patchify",
                lhs: crops.shape().to_vec(),
                rhs: vec![p, p, self.channels],
            });
        }
        let src = crops.data();
        let row_len = p * p * c;
        let mut out = Vec::with_capacity(n * h * w * c);
        for ni in 0..n {
            for py in 0..h / p {
                for px in 0..w / p {
                    for y in 0..p {
                        let base = ((ni * h + py * p + y) * w + px * p) * c;
                        out.extend_from_slice(&src[base..base + p * c]);
                    }
                }
            }
        }
        drop(src);
        Tensor::from_vec(out, &[n * (h / p) * (w / p), row_len])
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        for ad in adapters.adapters() {
            let t = ad.target();
            if t.block >= self.blocks.len() || ad.out_dim() != self.dim || ad.in_dim() != self.dim {
                return Err(Error::config(
                    "lora",
                    format!(
                        "adapter for block {} layer {} ({}×{}) does not fit a {}-block encoder of width {}",
                        t.block,
                        t.layer,
                        ad.out_dim(),
                        ad.in_dim(),
                        self.blocks.len(),
                        self.dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Final-block token states, `[N·T, d]`.
    pub fn token_states(&self, crops: &Tensor, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        if let Some(set) = adapters {
            self.check_adapters(set)?;
        }
        let groups = crops.shape()[0];
        let mut x = self.patchify(crops)?.matmul_t(&self.patch_embed)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, groups, i, adapters)?;
        }
        Ok(x)
    }

    /// Pooled unit-norm embedding per crop, `[N, d]`.
    pub fn encode(&self, crops: &Tensor, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let groups = crops.shape().first().copied().unwrap_or(0);
        let states = self.token_states(crops, adapters)?;
        let tokens = states.shape()[0] / groups;
        Ok(states
            .reshape(&[groups, tokens, self.dim])?
            .mean_axis(1)?
            .normalize_rows())
    }

    /// Copy with dense deltas added to the targeted projections.
    pub fn with_deltas(&self, deltas: &BTreeMap<AdapterTarget, Vec<f64>>) -> Result<ImageEncoder> {
        let mut out = self.clone();
        for (t, delta) in deltas {
            let block = out
                .blocks
                .get_mut(t.block)
                .ok_or_else(|| Error::config("lora", format!("no block {}", t.block)))?;
            let w = block.projection_mut(t.layer);
            if delta.len() != w.numel() {
                return Err(Error::config(
                    "lora",
                    format!("delta for block {} layer {} has {} entries", t.block, t.layer, delta.len()),
                ));
            }
            let merged = w.data().iter().zip(delta).map(|(a, b)| a + b).collect();
            *w = Tensor::from_vec(merged, &[self.dim, self.dim])?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: &[String]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let w = w.to_lowercase();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::config("encoder.vocab", format!("invalid word '{w}'")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::config("encoder.vocab", format!("duplicate word '{w}'")));
            }
        }
        Ok(Self {
            words: words.iter().map(|w| w.to_lowercase()).collect(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lowercase, whitespace split, every word must be known.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().ok_or_else(|| Error::Tokenize {
                    word: w,
                    prompt: prompt.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Tokenize {
                word: String::new(),
                prompt: prompt.to_string(),
            });
        }
        Ok(ids)
    }
}

/// `T(·)`: token embeddings, `L` blocks, mean pool, unit norm.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab: Vocabulary,
    dim: usize,
    token_embed: Tensor,
    blocks: Vec<AttentionBlock>,
}

impl TextEncoder {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        std::iter::once(&self.token_embed)
            .chain(self.blocks.iter().flat_map(|b| b.weights()))
            .collect()
    }

    pub fn checksum(&self) -> String {
        checksum(self.weights())
    }

    pub fn encode(&self, prompt: &str) -> Result<Tensor> {
        let ids = self.vocab.tokenize(prompt)?;
        let table = self.token_embed.data();
        let mut rows = Vec::with_capacity(ids.len() * self.dim);
        for &id in &ids {
            rows.extend_from_slice(&table[id * self.dim..(id + 1) * self.dim]);
        }
        drop(table);
        let mut x = Tensor::from_vec(rows, &[ids.len(), self.dim])?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, 1, i, None)?;
        }
        x.mean_axis(0)?.normalize_rows().reshape(&[self.dim])
    }
}

/// Source prompt `P_s` and ordered target prompts `P_t^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub source: String,
    pub targets: Vec<String>,
}

impl PromptSet {
    pub fn new(source: impl Into<String>, targets: Vec<String>, vocab: &Vocabulary) -> Result<Self> {
        let source = source.into();
        if targets.is_empty() {
            return Err(Error::config("prompts.targets", "at least one target prompt is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for p in std::iter::once(&source).chain(&targets) {
            vocab.tokenize(p)?;
            if !seen.insert(p.to_lowercase()) {
                return Err(Error::config("prompts", format!("duplicate prompt \"{p}\"")));
            }
        }
        Ok(Self { source, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Draws both frozen towers from one seeded stream: image tower first, then text.
pub fn init_frozen(cfg: &EncoderConfig) -> Result<(ImageEncoder, TextEncoder)> {
    if cfg.dim == 0 || cfg.blocks == 0 || cfg.patch == 0 || cfg.channels == 0 {
        return Err(Error::config("encoder", "dim, blocks, patch and channels must be positive"));
    }
    let vocab = Vocabulary::new(&cfg.vocab)?;
    if vocab.is_empty() {
        return Err(Error::config("encoder.vocab", "vocabulary is empty"));
    }
    let mut rng = SeededRng::child(cfg.seed, "encoders", 0);
    let d = cfg.dim;
    let bound = 1.0 / (d as f64).sqrt();

    let patch_embed = uniform_matrix(&mut rng, d, cfg.patch * cfg.patch * cfg.channels, bound)?;
    let blocks = (0..cfg.blocks).map(|_| AttentionBlock::new(&mut rng, d)).collect::<Result<_>>()?;
    let image = ImageEncoder {
        patch: cfg.patch,
        channels: cfg.channels,
        dim: d,
        patch_embed,
        blocks,
    };

    let token_embed = uniform_matrix(&mut rng, vocab.len(), d, bound)?;
    let blocks = (0..cfg.blocks).map(|_| AttentionBlock::new(&mut rng, d)).collect::<Result<_>>()?;
    let text = TextEncoder {
        vocab,
        dim: d,
        token_embed,
        blocks,
    };
    Ok((image, text))
}
