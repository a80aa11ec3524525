//! Shared parameter bundles and transformer sublayers, used by both the
//! encoder backbone and the attention-style generative blocks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Layer-norm epsilon used everywhere in the crate.
pub const LN_EPS: f32 = 1e-6;

/// Init scale for all weight matrices and learned embeddings.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> LinearParams {
        LinearParams {
            w: Tensor::randn_param(&[din, dout], INIT_STD, rng),
            b: Tensor::zeros_param(&[dout]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.linear(x, &self.w, &self.b)
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: Tensor::full_param(&[dim], 1.0),
            beta: Tensor::zeros_param(&[dim]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Query/key/value/output projections for one attention module.
#[derive(Clone)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<AttentionParams> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention: dim {dim} must divide evenly into {heads} heads"
            )));
        }
        Ok(AttentionParams {
            query: LinearParams::new(dim, dim, rng),
            key: LinearParams::new(dim, dim, rng),
            value: LinearParams::new(dim, dim, rng),
            output: LinearParams::new(dim, dim, rng),
            heads,
        })
    }

    /// Self-attention over token rows. Returns the projected output and
    /// one row-stochastic attention matrix per head.
    pub fn self_forward(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.attend(tape, x, x)
    }

    /// Cross-attention: queries from `q_in` rows, keys/values from
    /// `kv_in` rows.
    pub fn cross_forward(&self, tape: &Tape, q_in: &Tensor, kv_in: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.attend(tape, q_in, kv_in)
    }

    fn attend(&self, tape: &Tape, q_in: &Tensor, kv_in: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let dim = self.query.w.shape()[0];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.query.forward(tape, q_in)?;
        let k = self.key.forward(tape, kv_in)?;
        let v = self.value.forward(tape, kv_in)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(&q, c0, c1)?;
            let kh = tape.slice_cols(&k, c0, c1)?;
            let vh = tape.slice_cols(&v, c0, c1)?;
            let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
            let attn = tape.softmax_rows(&scores)?;
            head_outs.push(tape.matmul(&attn, &vh)?);
            maps.push(attn);
        }
        let merged = tape.concat_cols(&head_outs)?;
        Ok((self.output.forward(tape, &merged)?, maps))
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.query.named(&format!("{prefix}.wq"), out);
        self.key.named(&format!("{prefix}.wk"), out);
        self.value.named(&format!("{prefix}.wv"), out);
        self.output.named(&format!("{prefix}.wo"), out);
    }
}

/// One pre-norm encoder layer: attention sublayer then feed-forward
/// sublayer, both residual.
#[derive(Clone)]
pub struct TransformerLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
}

pub struct LayerForward {
    /// Layer output (post-residual state after the FFN sublayer).
    pub output: Tensor,
    /// Post-residual state after the attention sublayer.
    pub mha_out: Tensor,
    /// Row-stochastic attention matrix per head.
    pub attention: Vec<Tensor>,
}

impl TransformerLayerParams {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut ChaCha8Rng) -> Result<TransformerLayerParams> {
        Ok(TransformerLayerParams {
            ln1: LayerNormParams::new(dim),
            attn: AttentionParams::new(dim, heads, rng)?,
            ln2: LayerNormParams::new(dim),
            ffn1: LinearParams::new(dim, mlp_dim, rng),
            ffn2: LinearParams::new(mlp_dim, dim, rng),
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<LayerForward> {
        let normed = self.ln1.forward(tape, x)?;
        let (attn_out, attention) = self.attn.self_forward(tape, &normed)?;
        let mha_out = tape.add(x, &attn_out)?;
        let normed2 = self.ln2.forward(tape, &mha_out)?;
        let hidden = tape.gelu(&self.ffn1.forward(tape, &normed2)?)?;
        let ffn_out = self.ffn2.forward(tape, &hidden)?;
        let output = tape.add(&mha_out, &ffn_out)?;
        Ok(LayerForward {
            output,
            mha_out,
            attention,
        })
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.named(&format!("{prefix}.ln1"), out);
        self.attn.named(&format!("{prefix}.attn"), out);
        self.ln2.named(&format!("{prefix}.ln2"), out);
        self.ffn1.named(&format!("{prefix}.ffn1"), out);
        self.ffn2.named(&format!("{prefix}.ffn2"), out);
    }
}
