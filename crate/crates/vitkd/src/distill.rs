//! Distillation losses and their configuration: shallow-layer feature
//! mimicking (direct or through correlation maps), masked deep-layer
//! feature generation, softened-logit distillation, and the weighted
//! combination the student trains against.
//!
//! All per-sample losses are plain sums over tokens and dims (no
//! normalization), then averaged over the batch, so the loss weights
//! keep their published magnitudes. Teacher features are detached inside
//! every loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genblocks::{GenBlockKind, GenerativeBlock};
use crate::layers::INIT_STD;
use crate::model::{FeatureMap, SampleForward, TapSource};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicMethod {
    Linear,
    Correlation,
}

/// Which hidden state feeds the deep-layer generation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepTap {
    /// Layer output before the final norm (default).
    PreNorm,
    /// Patch tokens after the final norm.
    PostNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdConfig {
    pub enabled: bool,
    pub temperature: f32,
    pub weight: f32,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            enabled: false,
            temperature: 1.0,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the shallow-layer mimicking loss.
    pub alpha: f32,
    /// Weight of the deep-layer generation loss.
    pub beta: f32,
    /// Mask ratio for generation.
    pub lambda: f32,
    pub shallow_layers: Vec<usize>,
    /// Defaults to the student's last layer when absent.
    pub deep_layer: Option<usize>,
    pub mimic: MimicMethod,
    pub gen_block: GenBlockKind,
    pub tap_source: TapSource,
    pub deep_tap: DeepTap,
    pub kd: KdConfig,
    /// Layer count inside the attention-style generative blocks.
    pub gen_depth: usize,
    pub gen_heads: usize,
    /// Feed-forward sublayers inside the cross-attention block.
    pub gen_ffn: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 3e-5,
            beta: 3e-6,
            lambda: 0.5,
            shallow_layers: vec![0, 1],
            deep_layer: None,
            mimic: MimicMethod::Linear,
            gen_block: GenBlockKind::Conv,
            tap_source: TapSource::FfnOut,
            deep_tap: DeepTap::PreNorm,
            kd: KdConfig::default(),
            gen_depth: 2,
            gen_heads: 2,
            gen_ffn: true,
        }
    }
}

impl DistillConfig {
    pub fn resolved_deep_layer(&self, student_depth: usize) -> usize {
        self.deep_layer.unwrap_or(student_depth - 1)
    }

    pub fn validate(&self, student_depth: usize, teacher_depth: usize) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        let deep = self.resolved_deep_layer(student_depth);
        if deep >= student_depth {
            return Err(Error::Config(format!(
                "deep_layer {deep} out of range for student depth {student_depth}"
            )));
        }
        for &l in &self.shallow_layers {
            if l >= student_depth || l >= teacher_depth {
                return Err(Error::Config(format!(
                    "shallow layer {l} out of range (student depth {student_depth}, teacher depth {teacher_depth})"
                )));
            }
            if l == deep {
                return Err(Error::Config(format!(
                    "layer {l} appears in both the shallow set and the deep slot"
                )));
            }
        }
        if self.deep_tap == DeepTap::PostNorm && deep != student_depth - 1 {
            return Err(Error::Config(
                "post-norm deep tap is only defined for the last layer".into(),
            ));
        }
        if self.kd.enabled && self.kd.temperature <= 0.0 {
            return Err(Error::Config("kd temperature must be positive".into()));
        }
        if self.gen_depth == 0 || self.gen_heads == 0 {
            return Err(Error::Config("gen_depth and gen_heads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learnable affine map from student to teacher embedding width.
pub struct LinearAdapter {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearAdapter {
    pub fn new(d_student: usize, d_teacher: usize, rng: &mut ChaCha8Rng) -> LinearAdapter {
        LinearAdapter {
            weight: Tensor::randn_param(&[d_student, d_teacher], INIT_STD, rng),
            bias: Tensor::zeros_param(&[d_teacher]),
        }
    }

    pub fn forward(&self, tape: &Tape, tokens: &Tensor) -> Result<Tensor> {
        tape.linear(tokens, &self.weight, &self.bias)
    }
}

/// Realized binary masks, one vector per sample of the batch.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub lambda: f32,
    masks: Vec<Vec<bool>>,
}

impl MaskSpec {
    /// Draw fresh i.i.d. masks: token i is replaced iff r_i < lambda
    /// with r_i uniform on [0, 1).
    pub fn draw(n_tokens: usize, batch: usize, lambda: f32, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {lambda}")));
        }
        let masks = (0..batch)
            .map(|_| (0..n_tokens).map(|_| rng.gen::<f32>() < lambda).collect())
            .collect();
        Ok(MaskSpec { lambda, masks })
    }

    /// Wrap externally chosen masks (audits and tests).
    pub fn fixed(lambda: f32, masks: Vec<Vec<bool>>) -> MaskSpec {
        MaskSpec { lambda, masks }
    }

    pub fn sample(&self, b: usize) -> &[bool] {
        &self.masks[b]
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn masked_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(|m| m.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let set: usize = self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        set as f64 / total as f64
    }
}

fn detached(t: &Tensor) -> Tensor {
    if t.requires_grad() {
        t.detach()
    } else {
        t.clone()
    }
}

fn check_same_tokens(op: &str, fs: &Tensor, ft: &Tensor) -> Result<()> {
    if fs.shape()[0] != ft.shape()[0] {
        return Err(Error::shape(
            op,
            format!(
                "student and teacher patch grids differ: {} vs {} tokens",
                fs.shape()[0],
                ft.shape()[0]
            ),
        ));
    }
    Ok(())
}

fn batch_mean(tape: &Tape, per_sample: Vec<Tensor>) -> Result<Tensor> {
    let batch = per_sample.len();
    let mut acc = per_sample[0].clone();
    for item in per_sample.iter().skip(1) {
        acc = tape.add(&acc, item)?;
    }
    tape.scale(&acc, 1.0 / batch as f32)
}

/// Shallow-layer mimicking: squared distance between the teacher feature
/// and the adapter-projected student feature, summed per sample and
/// averaged over the batch.
pub fn loss_mimic_linear(
    tape: &Tape,
    fs: &[&FeatureMap],
    ft: &[&FeatureMap],
    adapter: &LinearAdapter,
) -> Result<Tensor> {
    if fs.is_empty() || fs.len() != ft.len() {
        return Err(Error::Config("mimic loss: empty or mismatched batches".into()));
    }
    let mut per_sample = Vec::with_capacity(fs.len());
    for (s, t) in fs.iter().zip(ft) {
        check_same_tokens("mimic loss", &s.tokens, &t.tokens)?;
        let target = detached(&t.tokens);
        let projected = adapter.forward(tape, &s.tokens)?;
        let diff = tape.sub(&target, &projected)?;
        per_sample.push(tape.sum_all(&tape.square(&diff)?)?);
    }
    batch_mean(tape, per_sample)
}

/// Token correlation map: F F^t / sqrt(D).
pub fn correlation_matrix(tape: &Tape, tokens: &Tensor) -> Result<Tensor> {
    let d = tokens.shape()[1];
    let outer = tape.matmul(tokens, &tape.transpose(tokens)?)?;
    tape.scale(&outer, 1.0 / (d as f32).sqrt())
}

/// Correlation mimicking: squared distance between the two correlation
/// maps; embedding widths may differ, no adapter involved.
pub fn loss_mimic_corr(tape: &Tape, fs: &[&FeatureMap], ft: &[&FeatureMap]) -> Result<Tensor> {
    if fs.is_empty() || fs.len() != ft.len() {
        return Err(Error::Config("correlation loss: empty or mismatched batches".into()));
    }
    let mut per_sample = Vec::with_capacity(fs.len());
    for (s, t) in fs.iter().zip(ft) {
        check_same_tokens("correlation loss", &s.tokens, &t.tokens)?;
        let ms = correlation_matrix(tape, &s.tokens)?;
        let mt = correlation_matrix(tape, &detached(&t.tokens))?;
        let diff = tape.sub(&mt, &ms)?;
        per_sample.push(tape.sum_all(&tape.square(&diff)?)?);
    }
    batch_mean(tape, per_sample)
}

/// Replace masked rows of an aligned student feature by the learnable
/// masked token.
pub fn apply_mask(tape: &Tape, aligned: &Tensor, mask: &[bool], masked_token: &Tensor) -> Result<Tensor> {
    tape.mask_rows(aligned, mask, masked_token)
}

/// Generation loss: squared distance between the teacher feature and the
/// generator output on masked rows only, summed per sample and averaged
/// over the batch. Unmasked rows contribute exactly zero.
pub fn loss_generation(
    tape: &Tape,
    gen_out: &[Tensor],
    ft: &[&FeatureMap],
    mask: &MaskSpec,
) -> Result<Tensor> {
    if gen_out.is_empty() || gen_out.len() != ft.len() || gen_out.len() != mask.batch() {
        return Err(Error::Config("generation loss: empty or mismatched batches".into()));
    }
    let mut per_sample = Vec::with_capacity(gen_out.len());
    for (b, (g, t)) in gen_out.iter().zip(ft).enumerate() {
        check_same_tokens("generation loss", g, &t.tokens)?;
        let (n, d) = (g.shape()[0], g.shape()[1]);
        let bits = mask.sample(b);
        let mut weights = vec![0.0f32; n * d];
        for (i, &bit) in bits.iter().enumerate() {
            if bit {
                weights[i * d..(i + 1) * d].fill(1.0);
            }
        }
        let weights = Tensor::from_vec(&[n, d], weights)?;
        let diff = tape.sub(&detached(&t.tokens), g)?;
        let masked_sq = tape.mul(&weights, &tape.square(&diff)?)?;
        per_sample.push(tape.sum_all(&masked_sq)?);
    }
    batch_mean(tape, per_sample)
}

/// Softened-logit distillation: T^2 * KL(teacher || student) at
/// temperature T, averaged over the batch. Teacher probabilities are
/// constants.
pub fn loss_kd_logit(
    tape: &Tape,
    student_logits: &[&Tensor],
    teacher_logits: &[&Tensor],
    temperature: f32,
) -> Result<Tensor> {
    if student_logits.is_empty() || student_logits.len() != teacher_logits.len() {
        return Err(Error::Config("kd loss: empty or mismatched batches".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("kd loss: temperature must be positive".into()));
    }
    let mut per_sample = Vec::with_capacity(student_logits.len());
    for (zs, zt) in student_logits.iter().zip(teacher_logits) {
        if zs.shape() != zt.shape() {
            return Err(Error::shape(
                "kd loss",
                format!("class counts differ: {:?} vs {:?}", zs.shape(), zt.shape()),
            ));
        }
        // teacher side in f64, outside the graph
        let zt_data = zt.data_vec();
        let scaled: Vec<f64> = zt_data.iter().map(|&v| f64::from(v) / f64::from(temperature)).collect();
        let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
        let self_entropy: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();

        let scaled_s = tape.scale(zs, 1.0 / temperature)?;
        let logp_s = tape.log_softmax_rows(&scaled_s)?;
        let p_const = Tensor::from_vec(zs.shape(), probs.iter().map(|&p| p as f32).collect())?;
        let cross = tape.sum_all(&tape.mul(&p_const, &logp_s)?)?;
        let kl = tape.sub(&Tensor::scalar(self_entropy as f32), &cross)?;
        per_sample.push(tape.scale(&kl, temperature * temperature)?);
    }
    batch_mean(tape, per_sample)
}

/// Scalar record of one step's loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ori: f32,
    pub l_mimic: f32,
    pub l_gen: f32,
    pub l_kd: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// Recompute the weighted total from the logged components.
    pub fn recompose(&self, cfg: &DistillConfig) -> f64 {
        let mut total = f64::from(self.l_ori)
            + f64::from(cfg.alpha) * f64::from(self.l_mimic)
            + f64::from(cfg.beta) * f64::from(self.l_gen);
        if cfg.kd.enabled {
            total += f64::from(cfg.kd.weight) * f64::from(self.l_kd);
        }
        total
    }
}

/// Optional loss terms produced by one distillation step.
pub struct DistillTerms {
    pub l_mimic: Option<Tensor>,
    pub l_gen: Option<Tensor>,
    pub l_kd: Option<Tensor>,
    pub mask: Option<MaskSpec>,
}

impl DistillTerms {
    pub fn none() -> DistillTerms {
        DistillTerms {
            l_mimic: None,
            l_gen: None,
            l_kd: None,
            mask: None,
        }
    }
}

/// Combine task loss and distillation terms into the training total.
/// With every term absent the task loss tensor itself is returned, so a
/// fully disabled configuration reduces bitwise to baseline training.
pub fn loss_total(
    tape: &Tape,
    l_ori: &Tensor,
    terms: &DistillTerms,
    cfg: &DistillConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let mut total = l_ori.clone();
    if let Some(lm) = &terms.l_mimic {
        total = tape.add(&total, &tape.scale(lm, cfg.alpha)?)?;
    }
    if let Some(lg) = &terms.l_gen {
        total = tape.add(&total, &tape.scale(lg, cfg.beta)?)?;
    }
    if let Some(lk) = &terms.l_kd {
        total = tape.add(&total, &tape.scale(lk, cfg.kd.weight)?)?;
    }
    let breakdown = LossBreakdown {
        l_ori: l_ori.item(),
        l_mimic: terms.l_mimic.as_ref().map_or(0.0, Tensor::item),
        l_gen: terms.l_gen.as_ref().map_or(0.0, Tensor::item),
        l_kd: terms.l_kd.as_ref().map_or(0.0, Tensor::item),
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Teacher-side inputs for one sample's distillation step: features for
/// the configured shallow layers, the deep feature, and the logits. All
/// tensors are detached.
pub struct TeacherTaps {
    pub shallow: Vec<Tensor>,
    pub deep: Tensor,
    pub logits: Tensor,
}

/// Owns the trainable distillation machinery: one adapter per shallow
/// layer, the deep alignment layer, and the generative block with its
/// masked token.
pub struct Distiller {
    pub cfg: DistillConfig,
    pub deep_layer: usize,
    adapters: Vec<LinearAdapter>,
    deep_align: Option<LinearAdapter>,
    gen_block: Option<GenerativeBlock>,
    mask_rng: ChaCha8Rng,
    n_tokens: usize,
}

impl Distiller {
    /// Components are only created for active loss terms, so a disabled
    /// term draws no init randomness and adds no optimizer state.
    pub fn new(
        cfg: &DistillConfig,
        d_student: usize,
        d_teacher: usize,
        n_tokens: usize,
        student_depth: usize,
        teacher_depth: usize,
        seed: u64,
    ) -> Result<Distiller> {
        cfg.validate(student_depth, teacher_depth)?;
        let deep_layer = cfg.resolved_deep_layer(student_depth);
        let mut adapters = Vec::new();
        if cfg.alpha > 0.0 && cfg.mimic == MimicMethod::Linear {
            for &layer in &cfg.shallow_layers {
                let mut rng = stream(seed, &format!("adapter{layer}"));
                adapters.push(LinearAdapter::new(d_student, d_teacher, &mut rng));
            }
        }
        let (deep_align, gen_block) = if cfg.beta > 0.0 {
            let mut rng = stream(seed, "deep-align");
            let align = LinearAdapter::new(d_student, d_teacher, &mut rng);
            let block = GenerativeBlock::new(
                cfg.gen_block,
                n_tokens,
                d_teacher,
                cfg.gen_depth,
                cfg.gen_heads,
                cfg.gen_ffn,
                crate::rng::derive_seed(seed, "gen-block"),
            )?;
            (Some(align), Some(block))
        } else {
            (None, None)
        };
        Ok(Distiller {
            cfg: cfg.clone(),
            deep_layer,
            adapters,
            deep_align,
            gen_block,
            mask_rng: stream(seed, "mask"),
            n_tokens,
        })
    }

    pub fn gen_block(&self) -> Option<&GenerativeBlock> {
        self.gen_block.as_ref()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (adapter, &layer) in self.adapters.iter().zip(&self.cfg.shallow_layers) {
            out.push((format!("adapter{layer}.w"), adapter.weight.clone()));
            out.push((format!("adapter{layer}.b"), adapter.bias.clone()));
        }
        if let Some(align) = &self.deep_align {
            out.push(("deep_align.w".into(), align.weight.clone()));
            out.push(("deep_align.b".into(), align.bias.clone()));
        }
        if let Some(block) = &self.gen_block {
            out.extend(block.named_params());
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Student-side deep feature per the configured tap.
    pub fn student_deep_feature<'a>(&self, fwd: &'a SampleForward) -> Result<&'a Tensor> {
        match self.cfg.deep_tap {
            DeepTap::PreNorm => fwd
                .feature(self.deep_layer, TapSource::FfnOut)
                .map(|f| &f.tokens)
                .ok_or_else(|| Error::Config(format!("no FFN-out tap for layer {}", self.deep_layer))),
            DeepTap::PostNorm => Ok(&fwd.post_norm_tokens),
        }
    }

    /// Build the active loss terms for one batch. The mask is redrawn on
    /// every call; disabled terms consume no randomness.
    pub fn step_losses(
        &mut self,
        tape: &Tape,
        student: &[SampleForward],
        teacher: &[TeacherTaps],
    ) -> Result<DistillTerms> {
        if student.len() != teacher.len() || student.is_empty() {
            return Err(Error::Config("distill step: empty or mismatched batches".into()));
        }
        let batch = student.len();
        let mut terms = DistillTerms::none();

        if self.cfg.alpha > 0.0 {
            let mut layer_losses = Vec::with_capacity(self.cfg.shallow_layers.len());
            for (k, &layer) in self.cfg.shallow_layers.iter().enumerate() {
                let mut fs = Vec::with_capacity(batch);
                let mut ft_maps = Vec::with_capacity(batch);
                for (s, t) in student.iter().zip(teacher) {
                    let tap = s.feature(layer, self.cfg.tap_source).ok_or_else(|| {
                        Error::Config(format!("student forward lacks layer {layer} tap"))
                    })?;
                    fs.push(tap);
                    ft_maps.push(FeatureMap {
                        layer_index: layer,
                        source: self.cfg.tap_source,
                        tokens: t.shallow[k].clone(),
                    });
                }
                let ft_refs: Vec<&FeatureMap> = ft_maps.iter().collect();
                let loss = match self.cfg.mimic {
                    MimicMethod::Linear => loss_mimic_linear(tape, &fs, &ft_refs, &self.adapters[k])?,
                    MimicMethod::Correlation => loss_mimic_corr(tape, &fs, &ft_refs)?,
                };
                layer_losses.push(loss);
            }
            let mut acc = layer_losses[0].clone();
            for l in layer_losses.iter().skip(1) {
                acc = tape.add(&acc, l)?;
            }
            terms.l_mimic = Some(acc);
        }

        if self.cfg.beta > 0.0 {
            let align = self.deep_align.as_ref().expect("beta > 0 implies alignment layer");
            let block = self.gen_block.as_ref().expect("beta > 0 implies generative block");
            let mask = MaskSpec::draw(self.n_tokens, batch, self.cfg.lambda, &mut self.mask_rng)?;
            let mut gen_outs = Vec::with_capacity(batch);
            let mut ft_maps = Vec::with_capacity(batch);
            for (b, (s, t)) in student.iter().zip(teacher).enumerate() {
                let deep = self.student_deep_feature(s)?;
                let aligned = align.forward(tape, deep)?;
                let masked = apply_mask(tape, &aligned, mask.sample(b), &block.masked_token)?;
                gen_outs.push(block.forward(tape, &masked, mask.sample(b))?);
                ft_maps.push(FeatureMap {
                    layer_index: self.deep_layer,
                    source: TapSource::FfnOut,
                    tokens: t.deep.clone(),
                });
            }
            let ft_refs: Vec<&FeatureMap> = ft_maps.iter().collect();
            terms.l_gen = Some(loss_generation(tape, &gen_outs, &ft_refs, &mask)?);
            terms.mask = Some(mask);
        }

        if self.cfg.kd.enabled {
            let zs: Vec<&Tensor> = student.iter().map(|s| &s.logits).collect();
            let zt: Vec<&Tensor> = teacher.iter().map(|t| &t.logits).collect();
            terms.l_kd = Some(loss_kd_logit(tape, &zs, &zt, self.cfg.kd.temperature)?);
        }

        Ok(terms)
    }
}
