//! Command implementations behind the CLI: teacher training, student
//! distillation, evaluation, the ablation harness, attention export, and
//! the gradient audit. Each returns structured results so tests drive
//! them directly; process exit codes live in the binary.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::distill::{DistillConfig, LinearAdapter, MaskSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_against_oracle, GradCheckReport};
use crate::genblocks::{GenBlockKind, GenerativeBlock};
use crate::layers::TransformerLayerParams;
use crate::model::{attention_average, diagonal_mass, FeatureMap, TapSource, ViTConfig, VitModel};
use crate::reference;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::trainer::{distill_student, evaluate, train_teacher, FitOutcome, TeacherCache};

#[derive(Debug, Serialize, Deserialize)]
struct CkptMeta {
    kind: String,
    vit: ViTConfig,
}

/// Save a model (plus any extra named tensors) with its config embedded.
pub fn save_model(model: &VitModel, kind: &str, extra: &[(String, Tensor)], path: &Path) -> Result<()> {
    let meta = CkptMeta {
        kind: kind.to_string(),
        vit: model.cfg.clone(),
    };
    let mut named = model.named_params();
    named.extend(extra.iter().cloned());
    let ck = Checkpoint::from_named(&named, Some(serde_json::to_string(&meta).expect("meta")));
    ck.save(path)
}

/// Rebuild a model from a checkpoint's embedded config and tensors.
pub fn load_model(path: &Path) -> Result<(VitModel, String)> {
    let ck = Checkpoint::load(path)?;
    let meta: CkptMeta = match &ck.config_json {
        Some(json) => serde_json::from_str(json)
            .map_err(|e| Error::Format(format!("{}: bad embedded config: {e}", path.display())))?,
        None => {
            return Err(Error::Format(format!(
                "{}: checkpoint carries no embedded config",
                path.display()
            )))
        }
    };
    let model = VitModel::new(&meta.vit)?;
    ck.load_into(&model.named_params())?;
    Ok((model, meta.kind))
}

pub struct TeacherArtifacts {
    pub ckpt: PathBuf,
    pub metrics: PathBuf,
    pub outcome: FitOutcome,
}

pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TeacherArtifacts> {
    cfg.echo("teacher_config.json")?;
    let (train, test) = cfg.load_datasets()?;
    let tc = cfg.teacher_train_cfg();
    let metrics_path = cfg.out_dir.join("teacher_metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let (model, outcome) = train_teacher(&train, &test, &cfg.teacher, &tc, Some(&mut metrics))?;
    let ckpt = cfg.teacher_ckpt_path();
    save_model(&model, "teacher", &[], &ckpt)?;
    println!(
        "teacher: {} steps, top1 {:.4}, top5 {:.4}, checkpoint {}",
        outcome.total_steps,
        outcome.final_top1,
        outcome.final_top5,
        ckpt.display()
    );
    Ok(TeacherArtifacts {
        ckpt,
        metrics: metrics_path,
        outcome,
    })
}

pub struct DistillArtifacts {
    pub student_ckpt: PathBuf,
    pub metrics: PathBuf,
    pub eval_report: PathBuf,
    pub outcome: FitOutcome,
}

#[derive(Serialize)]
struct EvalReport {
    top1: f32,
    top5: f32,
    best_top1: f32,
    best_step: u64,
    total_steps: u64,
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<DistillArtifacts> {
    cfg.echo("distill_config.json")?;
    let teacher_path = cfg.teacher_ckpt_path();
    if !teacher_path.exists() {
        return Err(Error::Io(format!(
            "teacher checkpoint {} does not exist; run train-teacher first",
            teacher_path.display()
        )));
    }
    let (teacher, kind) = load_model(&teacher_path)?;
    if kind != "teacher" {
        return Err(Error::Config(format!(
            "{} is a {kind:?} checkpoint, expected a teacher",
            teacher_path.display()
        )));
    }
    let (train, test) = cfg.load_datasets()?;

    let dc = &cfg.distill;
    let needs_teacher = dc.alpha > 0.0 || dc.beta > 0.0 || dc.kd.enabled;
    let cache = if needs_teacher && !cfg.train.augment_flip {
        Some(TeacherCache::build(
            &teacher,
            &dc.shallow_layers,
            dc.tap_source,
            dc.deep_tap,
            &train,
            cfg.train.batch_size,
        )?)
    } else {
        None
    };

    let metrics_path = cfg.out_dir.join("student_metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let (student, distiller, outcome) = distill_student(
        &train,
        &test,
        &teacher,
        &cfg.student,
        dc,
        &cfg.train,
        cache.as_ref(),
        Some(&mut metrics),
    )?;

    let student_ckpt = cfg.out_dir.join("student.vkd1");
    let extra: Vec<(String, Tensor)> = distiller
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("distill/{n}"), t))
        .collect();
    save_model(&student, "student", &extra, &student_ckpt)?;

    if let Some(best) = &outcome.best_params {
        let snapshot = VitModel::new(&cfg.student)?;
        let named = snapshot.named_params();
        for ((_, live), (_, data)) in named.iter().zip(best) {
            live.set_data(data)?;
        }
        save_model(&snapshot, "student", &[], &cfg.out_dir.join("student_best.vkd1"))?;
    }

    let eval_report = cfg.out_dir.join("eval.json");
    let report = EvalReport {
        top1: outcome.final_top1,
        top5: outcome.final_top5,
        best_top1: outcome.best_top1,
        best_step: outcome.best_step,
        total_steps: outcome.total_steps,
    };
    std::fs::write(&eval_report, serde_json::to_string_pretty(&report).expect("report"))
        .map_err(|e| Error::io(&eval_report, e))?;

    println!(
        "student: {} steps, top1 {:.4}, top5 {:.4}, checkpoint {}",
        outcome.total_steps,
        outcome.final_top1,
        outcome.final_top5,
        student_ckpt.display()
    );
    Ok(DistillArtifacts {
        student_ckpt,
        metrics: metrics_path,
        eval_report,
        outcome,
    })
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(f32, f32)> {
    let (model, _) = load_model(ckpt)?;
    let (_, test) = cfg.load_datasets()?;
    let (top1, top5) = evaluate(&model, &test, cfg.train.batch_size)?;
    println!("eval {}: top1 {top1:.4}, top5 {top5:.4}", ckpt.display());
    Ok((top1, top5))
}

// ── attention dump ──────────────────────────────────────────────────

pub struct AttnLayerDump {
    pub layer: usize,
    pub diagonal_mass: f32,
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Average attention over heads and samples per requested layer, export
/// CSV and PGM renderings, and report per-layer diagonal mass.
pub fn cmd_attn_dump(
    cfg: &RunConfig,
    ckpt: &Path,
    layers: Option<&[usize]>,
    samples: usize,
) -> Result<Vec<AttnLayerDump>> {
    let (model, _) = load_model(ckpt)?;
    let depth = model.cfg.depth;
    let selected: Vec<usize> = match layers {
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&l| l >= depth) {
                return Err(Error::Config(format!(
                    "layer {bad} out of range for depth {depth}"
                )));
            }
            list.to_vec()
        }
        None => (0..depth).collect(),
    };
    let (_, test) = cfg.load_datasets()?;
    let take = samples.min(test.n).max(1);
    let indices: Vec<usize> = (0..take).collect();

    let mut maps = Vec::new();
    for chunk in indices.chunks(cfg.train.batch_size.max(1)) {
        let tape = crate::tape::Tape::inference();
        let images = test.batch(chunk, None);
        for fwd in model.forward_batch(&tape, &images)? {
            maps.extend(fwd.attention);
        }
    }

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut dumps = Vec::with_capacity(selected.len());
    for &layer in &selected {
        let avg = attention_average(&maps, layer)?;
        let mass = diagonal_mass(&avg)?;
        let prefix = cfg.out_dir.join(format!("attn_layer{layer}"));
        let (csv, pgm) = crate::export::attn_export(&avg, &prefix)?;
        println!("layer {layer}: mean diagonal mass {mass:.5}");
        dumps.push(AttnLayerDump {
            layer,
            diagonal_mass: mass,
            csv,
            pgm,
        });
    }
    Ok(dumps)
}

// ── gradient audit ──────────────────────────────────────────────────

const AUDIT_TOL: f32 = 1e-3;
/// Scalar losses difference against f64 oracles at the engine step.
const LOSS_STEP: f32 = 1e-3;
/// Composite blocks difference their own f32 forward; the coarser step
/// keeps the oracle's quantization noise well under the tolerance.
const BLOCK_STEP: f32 = 3e-3;

fn rand_grad_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "audit");
    use rand::Rng;
    let n: usize = shape.iter().product();
    let t = Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    t.set_requires_grad(true);
    t
}

fn fmap(tokens: Tensor) -> FeatureMap {
    FeatureMap {
        layer_index: 0,
        source: TapSource::FfnOut,
        tokens,
    }
}

/// The full audit: every distillation loss against its independent f64
/// oracle, all three generative blocks, and one full encoder layer.
pub fn cmd_grad_check() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();

    // mimicking loss through its adapter
    {
        let fs = rand_grad_tensor(&[4, 8], 1);
        let ft = rand_grad_tensor(&[4, 8], 2);
        ft.set_requires_grad(false);
        let adapter = LinearAdapter::new(8, 8, &mut stream(3, "audit-adapter"));
        let inputs = vec![fs.clone(), adapter.weight.clone(), adapter.bias.clone()];
        let (fs_c, ft_c, w_c, b_c) = (fs.clone(), ft.clone(), adapter.weight.clone(), adapter.bias.clone());
        let (fs_o, ft_o, w_o, b_o) = (fs, ft, adapter.weight.clone(), adapter.bias.clone());
        reports.push(grad_check_against_oracle(
            "loss_mimic_linear",
            move |tape| {
                let a = LinearAdapter {
                    weight: w_c.clone(),
                    bias: b_c.clone(),
                };
                crate::distill::loss_mimic_linear(tape, &[&fmap(fs_c.clone())], &[&fmap(ft_c.clone())], &a)
            },
            move || {
                reference::mimic_linear_ref(
                    &fs_o.data_vec(),
                    &ft_o.data_vec(),
                    &w_o.data_vec(),
                    &b_o.data_vec(),
                    4,
                    8,
                    8,
                )
            },
            &inputs,
            LOSS_STEP,
            AUDIT_TOL,
        )?);
    }

    // correlation-map mimicking
    {
        let fs = rand_grad_tensor(&[4, 8], 4);
        let ft = rand_grad_tensor(&[4, 6], 5);
        ft.set_requires_grad(false);
        let (fs_c, ft_c) = (fs.clone(), ft.clone());
        let (fs_o, ft_o) = (fs.clone(), ft);
        reports.push(grad_check_against_oracle(
            "loss_mimic_corr",
            move |tape| crate::distill::loss_mimic_corr(tape, &[&fmap(fs_c.clone())], &[&fmap(ft_c.clone())]),
            move || reference::mimic_corr_ref(&fs_o.data_vec(), &ft_o.data_vec(), 4, 8, 6),
            &[fs],
            LOSS_STEP,
            AUDIT_TOL,
        )?);
    }

    // generation loss on masked rows
    {
        let gen = rand_grad_tensor(&[4, 8], 6);
        let ft = rand_grad_tensor(&[4, 8], 7);
        ft.set_requires_grad(false);
        let bits = vec![true, false, true, true];
        let spec = MaskSpec::fixed(0.5, vec![bits.clone()]);
        let (g_c, ft_c) = (gen.clone(), ft.clone());
        let (g_o, ft_o, bits_o) = (gen.clone(), ft, bits);
        reports.push(grad_check_against_oracle(
            "loss_generation",
            move |tape| crate::distill::loss_generation(tape, &[g_c.clone()], &[&fmap(ft_c.clone())], &spec),
            move || reference::generation_ref(&g_o.data_vec(), &ft_o.data_vec(), &bits_o, 4, 8),
            &[gen],
            LOSS_STEP,
            AUDIT_TOL,
        )?);
    }

    // softened-logit distillation
    {
        let zs = rand_grad_tensor(&[1, 8], 8);
        let zt = rand_grad_tensor(&[1, 8], 9);
        zt.set_requires_grad(false);
        let (zs_c, zt_c) = (zs.clone(), zt.clone());
        let (zs_o, zt_o) = (zs.clone(), zt);
        reports.push(grad_check_against_oracle(
            "loss_kd_logit",
            move |tape| crate::distill::loss_kd_logit(tape, &[&zs_c], &[&zt_c], 2.0),
            move || reference::kd_logit_ref(&zs_o.data_vec(), &zt_o.data_vec(), 2.0),
            &[zs],
            LOSS_STEP,
            AUDIT_TOL,
        )?);
    }

    // the three generative blocks
    for (kind, name, seed) in [
        (GenBlockKind::Conv, "gen_block_conv", 10u64),
        (GenBlockKind::SelfAttn, "gen_block_self_attn", 11),
        (GenBlockKind::CrossAttn, "gen_block_cross_attn", 12),
    ] {
        let block = GenerativeBlock::new(kind, 4, 8, 2, 2, true, seed)?;
        let x = rand_grad_tensor(&[4, 8], seed + 100);
        let mask = vec![true, false, true, false];
        let mut inputs = vec![x.clone()];
        inputs.extend(block.params());
        reports.push(grad_check(
            name,
            move |tape| block.forward(tape, &x, &mask),
            &inputs,
            BLOCK_STEP,
            AUDIT_TOL,
        )?);
    }

    // one full encoder layer
    {
        let layer = TransformerLayerParams::new(8, 2, 16, &mut stream(13, "audit-layer"))?;
        let x = rand_grad_tensor(&[4, 8], 14);
        let mut inputs = vec![x.clone()];
        let mut named = Vec::new();
        layer.named("layer", &mut named);
        inputs.extend(named.into_iter().map(|(_, t)| t));
        reports.push(grad_check(
            "encoder_layer",
            move |tape| Ok(layer.forward(tape, &x)?.output),
            &inputs,
            BLOCK_STEP,
            AUDIT_TOL,
        )?);
    }

    for r in &reports {
        println!("{}", r.line());
    }
    Ok(reports)
}

// ── ablation harness ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Losses,
    Layers,
    Alpha,
    Beta,
}

impl std::str::FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<GridKind> {
        match s {
            "losses" => Ok(GridKind::Losses),
            "layers" => Ok(GridKind::Layers),
            "alpha" => Ok(GridKind::Alpha),
            "beta" => Ok(GridKind::Beta),
            other => Err(Error::Config(format!(
                "unknown grid {other:?}; expected losses|layers|alpha|beta"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub cell: String,
    pub alpha: f32,
    pub beta: f32,
    pub seed: u64,
    pub top1: f32,
    pub top5: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMean {
    pub cell: String,
    pub mean_top1: f32,
    pub mean_top5: f32,
}

#[derive(Debug)]
pub struct AblateReport {
    pub rows: Vec<AblateRow>,
    pub means: Vec<CellMean>,
    pub flags: Vec<String>,
    pub table: String,
    pub csv_path: PathBuf,
    pub txt_path: PathBuf,
}

impl AblateReport {
    pub fn mean_of(&self, cell: &str) -> Option<f32> {
        self.means.iter().find(|m| m.cell == cell).map(|m| m.mean_top1)
    }
}

fn grid_cells(cfg: &RunConfig, grid: GridKind) -> Vec<(String, DistillConfig)> {
    let base = cfg.distill.clone();
    let mut cells = Vec::new();
    match grid {
        GridKind::Losses => {
            let mut c = base.clone();
            c.alpha = 0.0;
            c.beta = 0.0;
            cells.push(("baseline".to_string(), c));
            let mut c = base.clone();
            c.beta = 0.0;
            cells.push(("mimic_only".to_string(), c));
            let mut c = base.clone();
            c.alpha = 0.0;
            cells.push(("gen_only".to_string(), c));
            cells.push(("mimic_gen".to_string(), base));
        }
        GridKind::Layers => {
            // mimicking-only comparison across layer choices, including
            // the middle layer
            let middle = cfg.student.depth / 2;
            let mut c = base.clone();
            c.alpha = 0.0;
            c.beta = 0.0;
            cells.push(("baseline".to_string(), c));
            let sets: Vec<(String, Vec<usize>)> = vec![
                ("layer0".into(), vec![0]),
                ("layer1".into(), vec![1]),
                (format!("layer{middle}"), vec![middle]),
                ("layers01".into(), vec![0, 1]),
                (format!("layers01_{middle}"), vec![0, 1, middle]),
            ];
            for (name, set) in sets {
                let mut c = base.clone();
                c.beta = 0.0;
                c.shallow_layers = set;
                cells.push((name, c));
            }
        }
        GridKind::Alpha => {
            for k in [2.0f32, 3.0, 4.0, 5.0, 6.0] {
                let mut c = base.clone();
                c.alpha = k * 1e-5;
                cells.push((format!("alpha_{k}e-5"), c));
            }
        }
        GridKind::Beta => {
            for k in [2.0f32, 3.0, 4.0, 5.0, 6.0] {
                let mut c = base.clone();
                c.beta = k * 1e-6;
                cells.push((format!("beta_{k}e-6"), c));
            }
        }
    }
    // drop duplicate layer names when depth/2 collides with 0 or 1
    let mut seen = std::collections::HashSet::new();
    cells.retain(|(name, _)| seen.insert(name.clone()));
    cells
}

fn union_layer_set(cells: &[(String, DistillConfig)]) -> Vec<usize> {
    let mut set: Vec<usize> = cells
        .iter()
        .flat_map(|(_, dc)| dc.shallow_layers.iter().copied())
        .collect();
    set.sort_unstable();
    set.dedup();
    set
}

fn run_cell(
    cfg: &RunConfig,
    teacher: &VitModel,
    cache: Option<&TeacherCache>,
    train: &Dataset,
    test: &Dataset,
    name: &str,
    dc: &DistillConfig,
    seed: u64,
) -> Result<AblateRow> {
    let mut student_cfg = cfg.student.clone();
    student_cfg.seed = seed;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let (_, _, outcome) = distill_student(train, test, teacher, &student_cfg, dc, &tc, cache, None)?;
    Ok(AblateRow {
        cell: name.to_string(),
        alpha: dc.alpha,
        beta: dc.beta,
        seed,
        top1: outcome.final_top1,
        top5: outcome.final_top5,
    })
}

fn ablate_threads() -> usize {
    std::env::var("VITKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run a grid of distillation configurations over several seeds and
/// report per-cell results and means. Cells run sequentially by default;
/// VITKD_THREADS >= 2 runs them on that many workers, each with its own
/// teacher and feature cache (no shared state).
pub fn cmd_ablate(cfg: &RunConfig, grid: GridKind, seeds: &[u64]) -> Result<AblateReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    cfg.echo("ablate_config.json")?;
    let (train, test) = cfg.load_datasets()?;

    // make sure a teacher exists; train one if not
    let teacher_path = cfg.teacher_ckpt_path();
    if !teacher_path.exists() {
        println!("no teacher at {}; training one", teacher_path.display());
        cmd_train_teacher(cfg)?;
    }

    let cells = grid_cells(cfg, grid);
    let layer_set = union_layer_set(&cells);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();

    let threads = ablate_threads().min(jobs.len().max(1));
    let mut rows: Vec<Option<AblateRow>> = (0..jobs.len()).map(|_| None).collect();

    let needs_cache = cells
        .iter()
        .any(|(_, dc)| dc.alpha > 0.0 || dc.beta > 0.0 || dc.kd.enabled)
        && !cfg.train.augment_flip;

    if threads <= 1 {
        let (teacher, _) = load_model(&teacher_path)?;
        teacher.set_trainable(false);
        let cache = if needs_cache {
            Some(TeacherCache::build(
                &teacher,
                &layer_set,
                cfg.distill.tap_source,
                cfg.distill.deep_tap,
                &train,
                cfg.train.batch_size,
            )?)
        } else {
            None
        };
        for (slot, &(ci, seed)) in jobs.iter().enumerate() {
            let (name, dc) = &cells[ci];
            let row = run_cell(cfg, &teacher, cache.as_ref(), &train, &test, name, dc, seed)?;
            println!(
                "cell {:<14} seed {}: top1 {:.4}, top5 {:.4}",
                row.cell, row.seed, row.top1, row.top5
            );
            rows[slot] = Some(row);
        }
    } else {
        // worker threads own their teacher, datasets, and cache; results
        // land in indexed slots so output order stays deterministic
        let queue = Mutex::new(0usize);
        let results: Vec<Mutex<Option<Result<AblateRow>>>> =
            (0..jobs.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| {
                    let worker = || -> Result<(VitModel, Option<TeacherCache>, Dataset, Dataset)> {
                        let (teacher, _) = load_model(&teacher_path)?;
                        teacher.set_trainable(false);
                        let (train, test) = cfg.load_datasets()?;
                        let cache = if needs_cache {
                            Some(TeacherCache::build(
                                &teacher,
                                &layer_set,
                                cfg.distill.tap_source,
                                cfg.distill.deep_tap,
                                &train,
                                cfg.train.batch_size,
                            )?)
                        } else {
                            None
                        };
                        Ok((teacher, cache, train, test))
                    };
                    let setup = worker();
                    loop {
                        let slot = {
                            let mut q = queue.lock().expect("queue lock");
                            if *q >= jobs.len() {
                                break;
                            }
                            let s = *q;
                            *q += 1;
                            s
                        };
                        let outcome = match &setup {
                            Ok((teacher, cache, train, test)) => {
                                let (ci, seed) = jobs[slot];
                                let (name, dc) = &cells[ci];
                                run_cell(cfg, teacher, cache.as_ref(), train, test, name, dc, seed)
                            }
                            Err(e) => Err(Error::Config(format!("worker setup failed: {e}"))),
                        };
                        *results[slot].lock().expect("slot lock") = Some(outcome);
                    }
                });
            }
        });
        for (slot, cell) in results.into_iter().enumerate() {
            let row = cell
                .into_inner()
                .expect("slot lock")
                .unwrap_or_else(|| Err(Error::Config("ablation job never ran".into())))?;
            println!(
                "cell {:<14} seed {}: top1 {:.4}, top5 {:.4}",
                row.cell, row.seed, row.top1, row.top5
            );
            rows[slot] = Some(row);
        }
    }

    let rows: Vec<AblateRow> = rows.into_iter().map(|r| r.expect("all jobs ran")).collect();

    let mut means = Vec::new();
    for (name, _) in &cells {
        let cell_rows: Vec<&AblateRow> = rows.iter().filter(|r| &r.cell == name).collect();
        let n = cell_rows.len() as f32;
        means.push(CellMean {
            cell: name.clone(),
            mean_top1: cell_rows.iter().map(|r| r.top1).sum::<f32>() / n,
            mean_top5: cell_rows.iter().map(|r| r.top5).sum::<f32>() / n,
        });
    }

    let mut flags = Vec::new();
    if grid == GridKind::Losses {
        let get = |name: &str| means.iter().find(|m| m.cell == name).map(|m| m.mean_top1);
        if let (Some(base), Some(mimic), Some(gen), Some(both)) =
            (get("baseline"), get("mimic_only"), get("gen_only"), get("mimic_gen"))
        {
            if both < mimic || both < gen {
                flags.push(format!(
                    "ordering violated: mimic_gen {both:.4} vs mimic_only {mimic:.4}, gen_only {gen:.4}"
                ));
            }
            if both < base - 0.005 {
                flags.push(format!(
                    "combined distillation fell more than 0.5 points below baseline ({both:.4} vs {base:.4})"
                ));
            }
        }
    }

    // plain-text table, one row per cell with the per-seed values
    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>10} {:>10} {:>24} {:>10} {:>10}\n",
        "cell", "alpha", "beta", "top1 per seed", "mean_top1", "mean_top5"
    ));
    for (name, dc) in &cells {
        let cell_rows: Vec<&AblateRow> = rows.iter().filter(|r| &r.cell == name).collect();
        let per_seed: Vec<String> = cell_rows.iter().map(|r| format!("{:.4}", r.top1)).collect();
        let mean = means.iter().find(|m| &m.cell == name).expect("mean exists");
        table.push_str(&format!(
            "{:<16} {:>10.1e} {:>10.1e} {:>24} {:>10.4} {:>10.4}\n",
            name,
            dc.alpha,
            dc.beta,
            per_seed.join(" "),
            mean.mean_top1,
            mean.mean_top5
        ));
    }
    for flag in &flags {
        table.push_str(&format!("FLAG: {flag}\n"));
    }
    print!("{table}");

    let csv_path = cfg.out_dir.join("ablation.csv");
    let mut csv = String::from("cell,alpha,beta,seed,top1,top5\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.cell, r.alpha, r.beta, r.seed, r.top1, r.top5
        ));
    }
    for m in &means {
        csv.push_str(&format!("{},,,mean,{},{}\n", m.cell, m.mean_top1, m.mean_top5));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = cfg.out_dir.join("ablation.txt");
    std::fs::write(&txt_path, &table).map_err(|e| Error::io(&txt_path, e))?;

    Ok(AblateReport {
        rows,
        means,
        flags,
        table,
        csv_path,
        txt_path,
    })
}
