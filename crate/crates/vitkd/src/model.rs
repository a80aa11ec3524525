//! Patch-token encoder with per-layer feature and attention taps.
//!
//! The architecture is a pre-norm encoder stack over flattened image
//! patches plus a learnable classification token. Every forward pass
//! exposes, per layer, the post-residual state after the attention
//! sublayer (MHA-out) and after the feed-forward sublayer (FFN-out),
//! with the classification token stripped, plus every head's attention
//! matrix. Logits come from the classification token after the final
//! norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNormParams, LinearParams, TransformerLayerParams, INIT_STD};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub num_classes: usize,
    pub seed: u64,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Number of patch tokens (classification token excluded).
    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.dim as f32) * self.mlp_ratio).round() as usize
    }

    /// Flattened patch length: channels x patch x patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Where a feature tap was taken inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSource {
    MhaOut,
    FfnOut,
}

/// Patch-token features from one layer of one sample.
#[derive(Clone)]
pub struct FeatureMap {
    pub layer_index: usize,
    pub source: TapSource,
    /// N x D patch-token matrix, classification token excluded.
    pub tokens: Tensor,
}

/// One head's attention matrix, classification token included.
#[derive(Clone)]
pub struct AttentionMap {
    pub layer_index: usize,
    pub head_index: usize,
    /// (N+1) x (N+1), rows sum to one.
    pub matrix: Tensor,
}

/// Everything a single-sample forward pass exposes.
pub struct SampleForward {
    /// 1 x num_classes.
    pub logits: Tensor,
    pub features: Vec<FeatureMap>,
    pub attention: Vec<AttentionMap>,
    /// Hidden state entering each layer, (N+1) x D; index 0 is the
    /// embedded input. The FFN-out state of layer i is bitwise the entry
    /// at i+1 (pre-norm residual identity).
    pub layer_inputs: Vec<Tensor>,
    /// Patch tokens after the final norm, N x D (post-norm deep tap).
    pub post_norm_tokens: Tensor,
}

impl SampleForward {
    pub fn feature(&self, layer_index: usize, source: TapSource) -> Option<&FeatureMap> {
        self.features
            .iter()
            .find(|f| f.layer_index == layer_index && f.source == source)
    }
}

/// Split an image into raster-order patches, each flattened channel-major
/// then row-major. Pure data movement; the result carries no gradient.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let s = image.shape();
    if s != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::shape(
            "patchify",
            format!(
                "expected [3, {}, {}], got {:?}",
                cfg.image_size, cfg.image_size, s
            ),
        ));
    }
    let p = cfg.patch_size;
    let grid = cfg.image_size / p;
    let n = grid * grid;
    let pd = cfg.patch_dim();
    let data = image.data();
    let side = cfg.image_size;
    let mut out = vec![0.0f32; n * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            let mut k = 0usize;
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out[token * pd + k] = data[c * side * side + y * side + x];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, pd], out)
}

pub struct VitModel {
    pub cfg: ViTConfig,
    pub patch_embed: LinearParams,
    pub cls_token: Tensor,
    /// (N+1) x D learned positional table, classification slot first.
    pub pos_embed: Tensor,
    pub layers: Vec<TransformerLayerParams>,
    pub final_norm: LayerNormParams,
    pub head: LinearParams,
}

impl VitModel {
    pub fn new(cfg: &ViTConfig) -> Result<VitModel> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, "model");
        let n = cfg.num_tokens();
        let patch_embed = LinearParams::new(cfg.patch_dim(), cfg.dim, &mut rng);
        let cls_token = Tensor::randn_param(&[1, cfg.dim], INIT_STD, &mut rng);
        let pos_embed = Tensor::randn_param(&[n + 1, cfg.dim], INIT_STD, &mut rng);
        let mut layers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            layers.push(TransformerLayerParams::new(cfg.dim, cfg.heads, cfg.mlp_dim(), &mut rng)?);
        }
        let final_norm = LayerNormParams::new(cfg.dim);
        let head = LinearParams::new(cfg.dim, cfg.num_classes, &mut rng);
        Ok(VitModel {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_norm,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.patch_embed.named("embed", &mut out);
        out.push(("cls".into(), self.cls_token.clone()));
        out.push(("pos".into(), self.pos_embed.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layer{i}"), &mut out);
        }
        self.final_norm.named("final_norm", &mut out);
        self.head.named("head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Freeze or unfreeze every parameter.
    pub fn set_trainable(&self, trainable: bool) {
        for p in self.params() {
            p.set_requires_grad(trainable);
        }
    }

    /// CRC32 over all parameter bytes in declaration order.
    pub fn param_checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            for v in t.data().iter() {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }

    pub fn forward(&self, tape: &Tape, image: &Tensor) -> Result<SampleForward> {
        let patches = patchify(image, &self.cfg)?;
        let embedded = self.patch_embed.forward(tape, &patches)?;
        let with_cls = tape.concat_rows(&self.cls_token, &embedded)?;
        let mut hidden = tape.add(&with_cls, &self.pos_embed)?;

        let n = self.cfg.num_tokens();
        let mut features = Vec::with_capacity(2 * self.cfg.depth);
        let mut attention = Vec::with_capacity(self.cfg.depth * self.cfg.heads);
        let mut layer_inputs = Vec::with_capacity(self.cfg.depth + 1);
        for (li, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(hidden.clone());
            let fwd = layer.forward(tape, &hidden)?;
            features.push(FeatureMap {
                layer_index: li,
                source: TapSource::MhaOut,
                tokens: tape.slice_rows(&fwd.mha_out, 1, n + 1)?,
            });
            features.push(FeatureMap {
                layer_index: li,
                source: TapSource::FfnOut,
                tokens: tape.slice_rows(&fwd.output, 1, n + 1)?,
            });
            for (hi, matrix) in fwd.attention.into_iter().enumerate() {
                attention.push(AttentionMap {
                    layer_index: li,
                    head_index: hi,
                    matrix,
                });
            }
            hidden = fwd.output;
        }
        layer_inputs.push(hidden.clone());

        let normed = self.final_norm.forward(tape, &hidden)?;
        let cls = tape.slice_rows(&normed, 0, 1)?;
        let logits = self.head.forward(tape, &cls)?;
        let post_norm_tokens = tape.slice_rows(&normed, 1, n + 1)?;
        Ok(SampleForward {
            logits,
            features,
            attention,
            layer_inputs,
            post_norm_tokens,
        })
    }

    pub fn forward_batch(&self, tape: &Tape, images: &[Tensor]) -> Result<Vec<SampleForward>> {
        if images.is_empty() {
            return Err(Error::Config("forward_batch: empty batch".into()));
        }
        images.iter().map(|img| self.forward(tape, img)).collect()
    }
}

/// Mean attention matrix over all heads and samples for one layer.
pub fn attention_average(maps: &[AttentionMap], layer_index: usize) -> Result<Tensor> {
    let selected: Vec<&AttentionMap> = maps.iter().filter(|m| m.layer_index == layer_index).collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "attention_average: no attention maps for layer {layer_index}"
        )));
    }
    let shape = selected[0].matrix.shape().to_vec();
    let numel: usize = shape.iter().product();
    let mut acc = vec![0.0f64; numel];
    for m in &selected {
        if m.matrix.shape() != shape.as_slice() {
            return Err(Error::shape(
                "attention_average",
                format!("mixed shapes {:?} vs {:?}", m.matrix.shape(), shape),
            ));
        }
        for (a, v) in acc.iter_mut().zip(m.matrix.data().iter()) {
            *a += f64::from(*v);
        }
    }
    let inv = 1.0 / selected.len() as f64;
    Tensor::from_vec(&shape, acc.into_iter().map(|v| (v * inv) as f32).collect())
}

/// Mean of the diagonal of a square matrix.
pub fn diagonal_mass(matrix: &Tensor) -> Result<f32> {
    let s = matrix.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(
            "diagonal_mass",
            format!("expected a square matrix, got {s:?}"),
        ));
    }
    let n = s[0];
    let d = matrix.data();
    let sum: f64 = (0..n).map(|i| f64::from(d[i * n + i])).sum();
    Ok((sum / n as f64) as f32)
}
