//! Generative blocks that reconstruct teacher features from a masked
//! student feature: a two-layer convolutional projector over the token
//! grid, a self-attention stack over all tokens, and a cross-attention
//! stack that queries only the masked positions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttentionParams, LayerNormParams, LinearParams, TransformerLayerParams, INIT_STD};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenBlockKind {
    Conv,
    SelfAttn,
    CrossAttn,
}

#[derive(Clone)]
pub struct Conv3x3Params {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv3x3Params {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Conv3x3Params {
        Conv3x3Params {
            kernel: Tensor::randn_param(&[channels, channels, 3, 3], INIT_STD, rng),
            bias: Tensor::zeros_param(&[channels]),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// One cross-attention layer: masked-position queries attend over the
/// unmasked key/value set, with an optional feed-forward sublayer.
#[derive(Clone)]
pub struct CrossLayerParams {
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
}

impl CrossLayerParams {
    fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<CrossLayerParams> {
        Ok(CrossLayerParams {
            ln_q: LayerNormParams::new(dim),
            ln_kv: LayerNormParams::new(dim),
            attn: AttentionParams::new(dim, heads, rng)?,
            ln_ffn: LayerNormParams::new(dim),
            ffn1: LinearParams::new(dim, 4 * dim, rng),
            ffn2: LinearParams::new(4 * dim, dim, rng),
        })
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln_q.named(&format!("{prefix}.ln_q"), out);
        self.ln_kv.named(&format!("{prefix}.ln_kv"), out);
        self.attn.named(&format!("{prefix}.attn"), out);
        self.ln_ffn.named(&format!("{prefix}.ln_ffn"), out);
        self.ffn1.named(&format!("{prefix}.ffn1"), out);
        self.ffn2.named(&format!("{prefix}.ffn2"), out);
    }
}

#[derive(Clone)]
enum BlockBody {
    Conv {
        conv1: Conv3x3Params,
        conv2: Conv3x3Params,
    },
    SelfAttn {
        pos: Tensor,
        layers: Vec<TransformerLayerParams>,
    },
    CrossAttn {
        pos: Tensor,
        layers: Vec<CrossLayerParams>,
        with_ffn: bool,
    },
}

/// A generative block over N x D token features, plus the learnable
/// vector substituted at masked positions before the block runs.
pub struct GenerativeBlock {
    pub kind: GenBlockKind,
    pub masked_token: Tensor,
    n_tokens: usize,
    dim: usize,
    body: BlockBody,
}

impl GenerativeBlock {
    pub fn new(
        kind: GenBlockKind,
        n_tokens: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        with_ffn: bool,
        seed: u64,
    ) -> Result<GenerativeBlock> {
        if depth == 0 {
            return Err(Error::Config("generative block depth must be >= 1".into()));
        }
        let mut rng = stream(seed, "gen-block");
        let masked_token = Tensor::randn_param(&[dim], INIT_STD, &mut rng);
        let body = match kind {
            GenBlockKind::Conv => {
                let grid = (n_tokens as f64).sqrt().round() as usize;
                if grid * grid != n_tokens {
                    return Err(Error::Config(format!(
                        "conv projector needs a square token grid; {n_tokens} tokens do not form one"
                    )));
                }
                BlockBody::Conv {
                    conv1: Conv3x3Params::new(dim, &mut rng),
                    conv2: Conv3x3Params::new(dim, &mut rng),
                }
            }
            GenBlockKind::SelfAttn => {
                let pos = Tensor::randn_param(&[n_tokens, dim], INIT_STD, &mut rng);
                let mut layers = Vec::with_capacity(depth);
                for _ in 0..depth {
                    layers.push(TransformerLayerParams::new(dim, heads, 4 * dim, &mut rng)?);
                }
                BlockBody::SelfAttn { pos, layers }
            }
            GenBlockKind::CrossAttn => {
                let pos = Tensor::randn_param(&[n_tokens, dim], INIT_STD, &mut rng);
                let mut layers = Vec::with_capacity(depth);
                for _ in 0..depth {
                    layers.push(CrossLayerParams::new(dim, heads, &mut rng)?);
                }
                BlockBody::CrossAttn { pos, layers, with_ffn }
            }
        };
        Ok(GenerativeBlock {
            kind,
            masked_token,
            n_tokens,
            dim,
            body,
        })
    }

    /// Reconstruct an N x D feature. `mask` marks the replaced rows; only
    /// the cross-attention body consults it.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        if x.shape() != [self.n_tokens, self.dim] {
            return Err(Error::shape(
                "generative block",
                format!(
                    "expected [{}, {}], got {:?}",
                    self.n_tokens,
                    self.dim,
                    x.shape()
                ),
            ));
        }
        match &self.body {
            BlockBody::Conv { conv1, conv2 } => {
                let grid = (self.n_tokens as f64).sqrt().round() as usize;
                let planar = tape.reshape(&tape.transpose(x)?, &[self.dim, grid, grid])?;
                let mid = tape.relu(&tape.conv3x3(&planar, &conv1.kernel, &conv1.bias)?)?;
                let back = tape.conv3x3(&mid, &conv2.kernel, &conv2.bias)?;
                tape.transpose(&tape.reshape(&back, &[self.dim, self.n_tokens])?)
            }
            BlockBody::SelfAttn { pos, layers } => {
                let mut hidden = tape.add(x, pos)?;
                for layer in layers {
                    hidden = layer.forward(tape, &hidden)?.output;
                }
                Ok(hidden)
            }
            BlockBody::CrossAttn { pos, layers, with_ffn } => {
                if mask.len() != self.n_tokens {
                    return Err(Error::shape(
                        "cross-attention block",
                        format!("mask length {} vs {} tokens", mask.len(), self.n_tokens),
                    ));
                }
                let masked: Vec<usize> = (0..self.n_tokens).filter(|&i| mask[i]).collect();
                let unmasked: Vec<usize> = (0..self.n_tokens).filter(|&i| !mask[i]).collect();
                if masked.is_empty() {
                    // no queries: every row passes through
                    return Ok(x.clone());
                }
                if unmasked.is_empty() {
                    return Err(Error::Numeric(
                        "cross-attention block: every token is masked, the key set is empty".into(),
                    ));
                }
                let positioned = tape.add(x, pos)?;
                let mut queries = tape.select_rows(&positioned, &masked)?;
                let keys = tape.select_rows(&positioned, &unmasked)?;
                for layer in layers {
                    let q_normed = layer.ln_q.forward(tape, &queries)?;
                    let kv_normed = layer.ln_kv.forward(tape, &keys)?;
                    let (attended, _) = layer.attn.cross_forward(tape, &q_normed, &kv_normed)?;
                    queries = tape.add(&queries, &attended)?;
                    if *with_ffn {
                        let normed = layer.ln_ffn.forward(tape, &queries)?;
                        let hidden = tape.gelu(&layer.ffn1.forward(tape, &normed)?)?;
                        let ffn_out = layer.ffn2.forward(tape, &hidden)?;
                        queries = tape.add(&queries, &ffn_out)?;
                    }
                }
                // scatter onto the original input so unmasked rows are
                // bitwise untouched
                tape.scatter_rows(x, &masked, &queries)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("gen.masked_token".to_string(), self.masked_token.clone())];
        match &self.body {
            BlockBody::Conv { conv1, conv2 } => {
                conv1.named("gen.conv1", &mut out);
                conv2.named("gen.conv2", &mut out);
            }
            BlockBody::SelfAttn { pos, layers } => {
                out.push(("gen.pos".into(), pos.clone()));
                for (i, layer) in layers.iter().enumerate() {
                    layer.named(&format!("gen.layer{i}"), &mut out);
                }
            }
            BlockBody::CrossAttn { pos, layers, .. } => {
                out.push(("gen.pos".into(), pos.clone()));
                for (i, layer) in layers.iter().enumerate() {
                    layer.named(&format!("gen.layer{i}"), &mut out);
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Direct handles for tests and the audit suite.
    pub fn body_conv(&self) -> Option<(&Conv3x3Params, &Conv3x3Params)> {
        match &self.body {
            BlockBody::Conv { conv1, conv2 } => Some((conv1, conv2)),
            _ => None,
        }
    }

    pub fn body_pos(&self) -> Option<&Tensor> {
        match &self.body {
            BlockBody::SelfAttn { pos, .. } | BlockBody::CrossAttn { pos, .. } => Some(pos),
            _ => None,
        }
    }

    pub fn body_self_layers(&self) -> Option<&[TransformerLayerParams]> {
        match &self.body {
            BlockBody::SelfAttn { layers, .. } => Some(layers),
            _ => None,
        }
    }

    pub fn body_cross_layers(&self) -> Option<&[CrossLayerParams]> {
        match &self.body {
            BlockBody::CrossAttn { layers, .. } => Some(layers),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tokens(n: usize, d: usize, seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = stream(seed, "gen-tokens");
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn conv_projector_shape_and_zero_kernels() {
        let block = GenerativeBlock::new(GenBlockKind::Conv, 64, 8, 2, 2, true, 1).unwrap();
        let tape = Tape::new();
        let x = rand_tokens(64, 8, 2, -1.0, 1.0);
        let y = block.forward(&tape, &x, &vec![false; 64]).unwrap();
        assert_eq!(y.shape(), &[64, 8]);

        let (c1, c2) = block.body_conv().unwrap();
        c1.kernel.set_data(&vec![0.0; 8 * 8 * 9]).unwrap();
        c1.bias.set_data(&vec![0.0; 8]).unwrap();
        c2.kernel.set_data(&vec![0.0; 8 * 8 * 9]).unwrap();
        c2.bias.set_data(&vec![0.0; 8]).unwrap();
        let y0 = block.forward(&tape, &x, &vec![false; 64]).unwrap();
        assert!(y0.data_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_projector_identity_composition() {
        let d = 4;
        let block = GenerativeBlock::new(GenBlockKind::Conv, 16, d, 2, 2, true, 3).unwrap();
        let (c1, c2) = block.body_conv().unwrap();
        // center-identity kernels per channel
        let mut ident = vec![0.0f32; d * d * 9];
        for c in 0..d {
            ident[(c * d + c) * 9 + 4] = 1.0;
        }
        c1.kernel.set_data(&ident).unwrap();
        c1.bias.set_data(&vec![0.0; d]).unwrap();
        c2.kernel.set_data(&ident).unwrap();
        c2.bias.set_data(&vec![0.0; d]).unwrap();
        // nonnegative input so the relu between the convolutions is inert
        let x = rand_tokens(16, d, 4, 0.0, 1.0);
        let tape = Tape::new();
        let y = block.forward(&tape, &x, &vec![false; 16]).unwrap();
        for (a, b) in y.data_vec().iter().zip(x.data_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_projector_rejects_non_square_grid() {
        match GenerativeBlock::new(GenBlockKind::Conv, 12, 8, 2, 2, true, 1) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected a config error, got {other}"),
            Ok(_) => panic!("non-square grid must be rejected"),
        }
    }

    #[test]
    fn self_attn_shape_determinism_and_residual_identity() {
        for depth in [1, 2, 3] {
            let block = GenerativeBlock::new(GenBlockKind::SelfAttn, 9, 8, depth, 2, true, 5).unwrap();
            let tape = Tape::new();
            let x = rand_tokens(9, 8, 6, -1.0, 1.0);
            let y = block.forward(&tape, &x, &vec![false; 9]).unwrap();
            assert_eq!(y.shape(), &[9, 8]);
            let y2 = block.forward(&Tape::new(), &x, &vec![false; 9]).unwrap();
            assert_eq!(y.data_vec(), y2.data_vec(), "same params and input are bitwise stable");
        }

        // zeroed output projections and zeroed positions pass tokens through
        let block = GenerativeBlock::new(GenBlockKind::SelfAttn, 9, 8, 2, 2, true, 7).unwrap();
        block.body_pos().unwrap().set_data(&vec![0.0; 72]).unwrap();
        for layer in block.body_self_layers().unwrap() {
            layer.attn.output.w.set_data(&vec![0.0; 64]).unwrap();
            layer.attn.output.b.set_data(&vec![0.0; 8]).unwrap();
            layer.ffn2.w.set_data(&vec![0.0; 32 * 8]).unwrap();
            layer.ffn2.b.set_data(&vec![0.0; 8]).unwrap();
        }
        let x = rand_tokens(9, 8, 8, -1.0, 1.0);
        let y = block.forward(&Tape::new(), &x, &vec![false; 9]).unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
    }

    #[test]
    fn cross_attn_identity_on_empty_mask_and_error_on_full_mask() {
        let block = GenerativeBlock::new(GenBlockKind::CrossAttn, 6, 8, 2, 2, true, 9).unwrap();
        let tape = Tape::new();
        let x = rand_tokens(6, 8, 10, -1.0, 1.0);
        let y = block.forward(&tape, &x, &vec![false; 6]).unwrap();
        assert!(y.same_storage(&x), "no queries leaves the input untouched");

        let err = block.forward(&tape, &x, &vec![true; 6]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "empty key set must error");
    }

    #[test]
    fn cross_attn_unmasked_rows_pass_through_exactly() {
        let block = GenerativeBlock::new(GenBlockKind::CrossAttn, 8, 8, 2, 2, true, 11).unwrap();
        let tape = Tape::new();
        let x = rand_tokens(8, 8, 12, -1.0, 1.0);
        let mask = [true, false, false, true, false, true, false, false];
        let y = block.forward(&tape, &x, &mask).unwrap();
        let xd = x.data_vec();
        let yd = y.data_vec();
        for (i, &bit) in mask.iter().enumerate() {
            if !bit {
                assert_eq!(&yd[i * 8..(i + 1) * 8], &xd[i * 8..(i + 1) * 8]);
            } else {
                assert_ne!(&yd[i * 8..(i + 1) * 8], &xd[i * 8..(i + 1) * 8]);
            }
        }
    }

    #[test]
    fn cross_attn_single_key_yields_its_value_vector() {
        // one masked token (a zero row), one unmasked token, one layer,
        // no FFN: softmax over the single key is 1, so the masked output
        // row is the key token's value vector. With an identity value
        // and output projection that is the normed key row itself.
        let d = 4;
        let block = GenerativeBlock::new(GenBlockKind::CrossAttn, 2, d, 1, 1, false, 13).unwrap();
        block.body_pos().unwrap().set_data(&vec![0.0; 2 * d]).unwrap();
        let layer = &block.body_cross_layers().unwrap()[0];
        let mut ident = vec![0.0f32; d * d];
        for i in 0..d {
            ident[i * d + i] = 1.0;
        }
        layer.attn.value.w.set_data(&ident).unwrap();
        layer.attn.value.b.set_data(&vec![0.0; d]).unwrap();
        layer.attn.output.w.set_data(&ident).unwrap();
        layer.attn.output.b.set_data(&vec![0.0; d]).unwrap();

        let key_row = [0.9f32, -0.3, 0.1, 0.5];
        let mut x = vec![0.0f32; 2 * d];
        x[d..].copy_from_slice(&key_row);
        let x = Tensor::from_vec(&[2, d], x).unwrap();
        let y = block.forward(&Tape::new(), &x, &[true, false]).unwrap();

        // value vector: layer-norm of the key row (f64 oracle)
        let mean: f64 = key_row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var: f64 = key_row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(crate::layers::LN_EPS)).sqrt();
        let want: Vec<f32> = key_row.iter().map(|&v| ((f64::from(v) - mean) * inv) as f32).collect();
        let got = &y.data_vec()[..d];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w}");
        }
    }

    #[test]
    fn all_blocks_pass_gradient_checks() {
        for (kind, seed) in [
            (GenBlockKind::Conv, 21u64),
            (GenBlockKind::SelfAttn, 22),
            (GenBlockKind::CrossAttn, 23),
        ] {
            let block = GenerativeBlock::new(kind, 4, 8, 2, 2, true, seed).unwrap();
            let x = rand_tokens(4, 8, seed + 100, -1.0, 1.0);
            x.set_requires_grad(true);
            let mask = vec![true, false, true, false];
            let mut inputs = vec![x.clone()];
            inputs.extend(block.params());
            let name = format!("{kind:?}-block");
            // composite blocks difference at a coarser step so the f32
            // oracle's own quantization stays well under the tolerance
            let report = crate::gradcheck::grad_check(
                &name,
                move |tape| block.forward(tape, &x, &mask),
                &inputs,
                3e-3,
                1e-3,
            )
            .unwrap();
            assert!(report.pass, "{}", report.line());
        }
    }
}
