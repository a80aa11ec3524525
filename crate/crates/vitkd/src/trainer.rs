//! Training loops: teacher pretraining, student distillation, and
//! evaluation. One generic loop serves both paths so a distillation run
//! with every loss term disabled is instruction-for-instruction the
//! baseline run.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{
    loss_total, DistillConfig, DistillTerms, Distiller, LossBreakdown, TeacherTaps,
};
use crate::error::{Error, Result};
use crate::model::{SampleForward, TapSource, ViTConfig, VitModel};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f32,
    pub lr_min: f32,
    /// Defaults to 5% of total steps when absent.
    pub warmup_steps: Option<u64>,
    pub weight_decay: f32,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub label_smoothing: f32,
    pub augment_flip: bool,
    /// Also track and report the best checkpoint by eval top-1.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_steps: None,
            weight_decay: 0.05,
            seed: 0,
            eval_every: 0,
            label_smoothing: 0.1,
            augment_flip: false,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub lr: f32,
    pub train_acc: f32,
    pub top1: Option<f32>,
    pub top5: Option<f32>,
}

/// Wire format of one metrics line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsLine {
    pub step: u64,
    pub epoch: usize,
    pub l_ori: f32,
    pub l_mimic: f32,
    pub l_gen: f32,
    pub l_kd: f32,
    pub total: f32,
    pub lr: f32,
    pub top1: Option<f32>,
    pub top5: Option<f32>,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        let line = MetricsLine {
            step: self.step,
            epoch: self.epoch,
            l_ori: self.breakdown.l_ori,
            l_mimic: self.breakdown.l_mimic,
            l_gen: self.breakdown.l_gen,
            l_kd: self.breakdown.l_kd,
            total: self.breakdown.total,
            lr: self.lr,
            top1: self.top1,
            top5: self.top5,
        };
        serde_json::to_string(&line).expect("metrics line serializes")
    }

    pub fn parse_line(s: &str) -> Result<MetricsLine> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("bad metrics line: {e}")))
    }
}

/// Cross-entropy over per-sample logits with label smoothing, averaged
/// over the batch.
pub fn loss_cross_entropy(
    tape: &Tape,
    logits: &[&Tensor],
    labels: &[u8],
    num_classes: usize,
    smoothing: f32,
) -> Result<Tensor> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Config("cross entropy: empty or mismatched batch".into()));
    }
    let mut per_sample = Vec::with_capacity(logits.len());
    for (z, &label) in logits.iter().zip(labels) {
        if z.shape() != [1, num_classes] {
            return Err(Error::shape(
                "cross entropy",
                format!("logits {:?}, expected [1, {num_classes}]", z.shape()),
            ));
        }
        if usize::from(label) >= num_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let logp = tape.log_softmax_rows(z)?;
        let mut q = vec![smoothing / num_classes as f32; num_classes];
        q[usize::from(label)] += 1.0 - smoothing;
        let q = Tensor::from_vec(&[1, num_classes], q)?;
        let ce = tape.scale(&tape.sum_all(&tape.mul(&q, &logp)?)?, -1.0)?;
        per_sample.push(ce);
    }
    let mut acc = per_sample[0].clone();
    for l in per_sample.iter().skip(1) {
        acc = tape.add(&acc, l)?;
    }
    tape.scale(&acc, 1.0 / logits.len() as f32)
}

fn batch_accuracy(forwards: &[SampleForward], labels: &[u8]) -> f32 {
    let mut hits = 0usize;
    for (f, &label) in forwards.iter().zip(labels) {
        let data = f.logits.data_vec();
        let pred = argmax(&data);
        if pred == usize::from(label) {
            hits += 1;
        }
    }
    hits as f32 / labels.len() as f32
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Deterministic top-1 / top-5 accuracy over a dataset.
pub fn evaluate(model: &VitModel, ds: &Dataset, batch_size: usize) -> Result<(f32, f32)> {
    if ds.n == 0 {
        return Err(Error::Config("evaluate: empty dataset".into()));
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let indices: Vec<usize> = (0..ds.n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let tape = Tape::inference();
        let images = ds.batch(chunk, None);
        let fwd = model.forward_batch(&tape, &images)?;
        for (f, &idx) in fwd.iter().zip(chunk) {
            let label = usize::from(ds.labels[idx]);
            let logits = f.logits.data_vec();
            if argmax(&logits) == label {
                top1 += 1;
            }
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
            if order.iter().take(5).any(|&c| c == label) {
                top5 += 1;
            }
        }
    }
    Ok((top1 as f32 / ds.n as f32, top5 as f32 / ds.n as f32))
}

/// Frozen-teacher features for every sample of a dataset, computed once
/// and shared across steps and runs. The cache holds taps for a superset
/// of layers so several distillation configs (an ablation grid) can draw
/// from one build. Valid only while augmentation is off, since taps are
/// keyed by sample index.
pub struct TeacherCache {
    layer_set: Vec<usize>,
    tap_source: TapSource,
    deep_tap: crate::distill::DeepTap,
    /// Per sample: one tensor per layer_set entry, then deep, then logits.
    entries: Vec<(Vec<Tensor>, Tensor, Tensor)>,
}

impl TeacherCache {
    pub fn build(
        teacher: &VitModel,
        layer_set: &[usize],
        tap_source: TapSource,
        deep_tap: crate::distill::DeepTap,
        ds: &Dataset,
        batch_size: usize,
    ) -> Result<TeacherCache> {
        teacher.set_trainable(false);
        let depth = teacher.cfg.depth;
        if let Some(&bad) = layer_set.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!(
                "teacher cache: layer {bad} out of range for depth {depth}"
            )));
        }
        let mut entries = Vec::with_capacity(ds.n);
        let indices: Vec<usize> = (0..ds.n).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let tape = Tape::inference();
            let images = ds.batch(chunk, None);
            let fwd = teacher.forward_batch(&tape, &images)?;
            for f in &fwd {
                let mut shallow = Vec::with_capacity(layer_set.len());
                for &layer in layer_set {
                    let tap = f.feature(layer, tap_source).ok_or_else(|| {
                        Error::Config(format!("teacher forward lacks layer {layer} tap"))
                    })?;
                    shallow.push(tap.tokens.clone());
                }
                let deep = match deep_tap {
                    crate::distill::DeepTap::PreNorm => f
                        .feature(depth - 1, TapSource::FfnOut)
                        .ok_or_else(|| Error::Config("teacher forward lacks the deep tap".into()))?
                        .tokens
                        .clone(),
                    crate::distill::DeepTap::PostNorm => f.post_norm_tokens.clone(),
                };
                entries.push((shallow, deep, f.logits.clone()));
            }
        }
        Ok(TeacherCache {
            layer_set: layer_set.to_vec(),
            tap_source,
            deep_tap,
            entries,
        })
    }

    /// Assemble per-sample taps for one distillation config; every layer
    /// the config asks for must be in the cached set.
    pub fn taps_for(&self, indices: &[usize], dc: &DistillConfig) -> Result<Vec<TeacherTaps>> {
        if dc.tap_source != self.tap_source || dc.deep_tap != self.deep_tap {
            return Err(Error::Config(
                "teacher cache was built for a different tap configuration".into(),
            ));
        }
        let positions: Vec<usize> = dc
            .shallow_layers
            .iter()
            .map(|l| {
                self.layer_set.iter().position(|c| c == l).ok_or_else(|| {
                    Error::Config(format!("teacher cache does not hold layer {l}"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(indices
            .iter()
            .map(|&i| {
                let (shallow, deep, logits) = &self.entries[i];
                TeacherTaps {
                    shallow: positions.iter().map(|&p| shallow[p].clone()).collect(),
                    deep: deep.clone(),
                    logits: logits.clone(),
                }
            })
            .collect())
    }
}

impl Clone for TeacherTaps {
    fn clone(&self) -> Self {
        TeacherTaps {
            shallow: self.shallow.clone(),
            deep: self.deep.clone(),
            logits: self.logits.clone(),
        }
    }
}

/// Pull the teacher-side tensors one distillation step needs out of a
/// teacher forward pass. Shallow layers map index-to-index; the deep
/// feature comes from the teacher's own last layer.
pub fn extract_teacher_taps(
    fwd: &SampleForward,
    dc: &DistillConfig,
    teacher_depth: usize,
    _student_depth: usize,
) -> Result<TeacherTaps> {
    let mut shallow = Vec::with_capacity(dc.shallow_layers.len());
    for &layer in &dc.shallow_layers {
        let tap = fwd
            .feature(layer, dc.tap_source)
            .ok_or_else(|| Error::Config(format!("teacher forward lacks layer {layer} tap")))?;
        shallow.push(tap.tokens.clone());
    }
    let deep = match dc.deep_tap {
        crate::distill::DeepTap::PreNorm => fwd
            .feature(teacher_depth - 1, TapSource::FfnOut)
            .ok_or_else(|| Error::Config("teacher forward lacks the deep tap".into()))?
            .tokens
            .clone(),
        crate::distill::DeepTap::PostNorm => fwd.post_norm_tokens.clone(),
    };
    Ok(TeacherTaps {
        shallow,
        deep,
        logits: fwd.logits.clone(),
    })
}

pub struct DistillCtx<'a> {
    pub teacher: &'a VitModel,
    pub distiller: &'a mut Distiller,
    pub cache: Option<&'a TeacherCache>,
}

pub struct FitOutcome {
    pub records: Vec<TrainRecord>,
    pub final_top1: f32,
    pub final_top5: f32,
    pub best_top1: f32,
    pub best_step: u64,
    pub total_steps: u64,
    /// Snapshot of the model at its best eval, when `keep_best` is set.
    pub best_params: Option<Vec<(String, Vec<f32>)>>,
}

/// Shared training loop. `distill` adds the active distillation terms;
/// with it absent (or every term disabled) this is plain supervised
/// training.
pub fn fit(
    model: &VitModel,
    train: &Dataset,
    test: &Dataset,
    tc: &TrainConfig,
    mut distill: Option<DistillCtx<'_>>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    tc.validate()?;
    if train.classes != model.cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train.classes, model.cfg.num_classes
        )));
    }
    if train.size != model.cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, model expects {}px",
            train.size, model.cfg.image_size
        )));
    }

    let steps_per_epoch = train.n.div_ceil(tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let warmup = tc.warmup_steps.unwrap_or(total_steps / 20);

    let mut params = model.params();
    let needs_teacher = if let Some(ctx) = &distill {
        params.extend(ctx.distiller.params());
        let c = &ctx.distiller.cfg;
        c.alpha > 0.0 || c.beta > 0.0 || c.kd.enabled
    } else {
        false
    };
    let mut opt = AdamW::new(params, (0.9, 0.999), 1e-8, tc.weight_decay);

    let mut shuffle_rng = stream(tc.seed, "shuffle");
    let mut flip_rng = stream(tc.seed, "flip");
    let default_cfg = DistillConfig::default();

    let mut records: Vec<TrainRecord> = Vec::new();
    let mut best_top1 = f32::NEG_INFINITY;
    let mut best_step = 0u64;
    let mut best_params: Option<Vec<(String, Vec<f32>)>> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.n).collect();

    for epoch in 0..tc.epochs {
        // Fisher-Yates from the dedicated stream
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let lr = cosine_lr(step, total_steps, warmup, tc.lr_max, tc.lr_min);

            let flips: Option<Vec<bool>> = if tc.augment_flip {
                Some(chunk.iter().map(|_| flip_rng.gen_bool(0.5)).collect())
            } else {
                None
            };
            let images = train.batch(chunk, flips.as_deref());
            let labels = train.labels_for(chunk);

            let tape = Tape::new();
            let student_fwd = model.forward_batch(&tape, &images)?;
            let logit_refs: Vec<&Tensor> = student_fwd.iter().map(|f| &f.logits).collect();
            let l_ori = loss_cross_entropy(
                &tape,
                &logit_refs,
                &labels,
                model.cfg.num_classes,
                tc.label_smoothing,
            )?;

            let (terms, dcfg) = if let Some(ctx) = &mut distill {
                if needs_teacher {
                    let teacher_taps: Vec<TeacherTaps> = match (ctx.cache, tc.augment_flip) {
                        (Some(cache), false) => cache.taps_for(chunk, &ctx.distiller.cfg)?,
                        _ => {
                            let teacher_tape = Tape::inference();
                            let fwd = ctx.teacher.forward_batch(&teacher_tape, &images)?;
                            fwd.iter()
                                .map(|f| {
                                    extract_teacher_taps(
                                        f,
                                        &ctx.distiller.cfg,
                                        ctx.teacher.cfg.depth,
                                        model.cfg.depth,
                                    )
                                })
                                .collect::<Result<_>>()?
                        }
                    };
                    let terms = ctx.distiller.step_losses(&tape, &student_fwd, &teacher_taps)?;
                    (terms, &ctx.distiller.cfg)
                } else {
                    (DistillTerms::none(), &ctx.distiller.cfg)
                }
            } else {
                (DistillTerms::none(), &default_cfg)
            };
            let dcfg = dcfg.clone();

            let (total_loss, breakdown) = loss_total(&tape, &l_ori, &terms, &dcfg)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at step {step}",
                    breakdown.total
                )));
            }
            tape.backward(&total_loss)?;
            opt.step(lr);
            opt.zero_grad();

            let train_acc = batch_accuracy(&student_fwd, &labels);
            let is_last = step == total_steps;
            let do_eval = is_last || (tc.eval_every > 0 && step % tc.eval_every == 0);
            let (top1, top5) = if do_eval {
                let (t1, t5) = evaluate(model, test, tc.batch_size)?;
                if t1 > best_top1 {
                    best_top1 = t1;
                    best_step = step;
                    if tc.keep_best {
                        best_params = Some(
                            model
                                .named_params()
                                .into_iter()
                                .map(|(n, t)| (n, t.data_vec()))
                                .collect(),
                        );
                    }
                }
                (Some(t1), Some(t5))
            } else {
                (None, None)
            };

            let record = TrainRecord {
                step,
                epoch,
                breakdown,
                lr,
                train_acc,
                top1,
                top5,
            };
            if let Some(sink) = metrics.as_mut() {
                writeln!(sink, "{}", record.to_line())
                    .map_err(|e| Error::Io(format!("metrics sink: {e}")))?;
            }
            records.push(record);
        }
    }

    let last = records.last().expect("at least one step ran");
    let final_top1 = last.top1.expect("last step evaluates");
    let final_top5 = last.top5.expect("last step evaluates");
    Ok(FitOutcome {
        records,
        final_top1,
        final_top5,
        best_top1,
        best_step,
        total_steps,
        best_params,
    })
}

/// Supervised pretraining for the teacher (or any standalone model).
pub fn train_teacher(
    train: &Dataset,
    test: &Dataset,
    cfg: &ViTConfig,
    tc: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<(VitModel, FitOutcome)> {
    let model = VitModel::new(cfg)?;
    let outcome = fit(&model, train, test, tc, None, metrics)?;
    Ok((model, outcome))
}

/// Distill a fresh student against a frozen teacher.
pub fn distill_student(
    train: &Dataset,
    test: &Dataset,
    teacher: &VitModel,
    student_cfg: &ViTConfig,
    dc: &DistillConfig,
    tc: &TrainConfig,
    cache: Option<&TeacherCache>,
    metrics: Option<&mut dyn Write>,
) -> Result<(VitModel, Distiller, FitOutcome)> {
    if teacher.cfg.num_tokens() != {
        student_cfg.validate()?;
        student_cfg.num_tokens()
    } || teacher.cfg.image_size != student_cfg.image_size
    {
        return Err(Error::Config(format!(
            "teacher and student patch grids differ ({}x{}/{} vs {}x{}/{}); the token-level losses need equal grids",
            teacher.cfg.image_size,
            teacher.cfg.image_size,
            teacher.cfg.patch_size,
            student_cfg.image_size,
            student_cfg.image_size,
            student_cfg.patch_size
        )));
    }
    teacher.set_trainable(false);
    let student = VitModel::new(student_cfg)?;
    let mut distiller = Distiller::new(
        dc,
        student_cfg.dim,
        teacher.cfg.dim,
        student_cfg.num_tokens(),
        student_cfg.depth,
        teacher.cfg.depth,
        crate::rng::derive_seed(student_cfg.seed, "distiller"),
    )?;
    let ctx = DistillCtx {
        teacher,
        distiller: &mut distiller,
        cache,
    };
    let outcome = fit(&student, train, test, tc, Some(ctx), metrics)?;
    Ok((student, distiller, outcome))
}
