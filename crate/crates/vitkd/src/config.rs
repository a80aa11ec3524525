//! Run configuration: a JSON file merged with `--set dotted.key=value`
//! overrides, fully resolved before a run starts and echoed verbatim
//! into the output directory so every run re-executes from its echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{idx_load, synth_generate, Dataset};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ViTConfig;
use crate::rng::derive_seed;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub size: usize,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synth,
            seed: 7,
            n_per_class: 500,
            test_per_class: 100,
            classes: 10,
            size: 32,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
        }
    }
}

fn default_teacher() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 4,
        depth: 6,
        dim: 64,
        heads: 4,
        mlp_ratio: 4.0,
        num_classes: 10,
        seed: 1,
    }
}

fn default_student() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 4,
        depth: 4,
        dim: 32,
        heads: 2,
        mlp_ratio: 4.0,
        num_classes: 10,
        seed: 0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub teacher: ViTConfig,
    pub student: ViTConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Separate recipe for teacher pretraining; falls back to `train`.
    pub teacher_train: Option<TrainConfig>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/teacher.vkd1`.
    pub teacher_ckpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            teacher: default_teacher(),
            student: default_student(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            teacher_train: None,
            out_dir: PathBuf::from("runs/default"),
            teacher_ckpt: None,
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, then apply `--set` overrides and
    /// the `--out` / `--seed` shorthands. `--seed` sets both the student
    /// init seed and the training seed, giving one knob for a full
    /// independent replica.
    pub fn resolve(
        config_path: Option<&Path>,
        sets: &[(String, String)],
        out_override: Option<&Path>,
        seed_override: Option<u64>,
    ) -> Result<RunConfig> {
        let mut value: serde_json::Value = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config file {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("config file {} is not valid JSON: {e}", path.display()))
                })?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default serializes"),
        };
        for (key, raw) in sets {
            set_path(&mut value, key, raw)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
        if let Some(out) = out_override {
            cfg.out_dir = out.to_path_buf();
        }
        if let Some(seed) = seed_override {
            cfg.train.seed = seed;
            cfg.student.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.train.validate()?;
        if let Some(tt) = &self.teacher_train {
            tt.validate()?;
        }
        self.distill.validate(self.student.depth, self.teacher.depth)?;
        if self.dataset.kind == DatasetKind::Idx {
            for (name, path) in [
                ("idx_train_images", &self.dataset.idx_train_images),
                ("idx_train_labels", &self.dataset.idx_train_labels),
                ("idx_test_images", &self.dataset.idx_test_images),
                ("idx_test_labels", &self.dataset.idx_test_labels),
            ] {
                if path.is_none() {
                    return Err(Error::Config(format!("idx dataset requires {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn teacher_ckpt_path(&self) -> PathBuf {
        self.teacher_ckpt
            .clone()
            .unwrap_or_else(|| self.out_dir.join("teacher.vkd1"))
    }

    pub fn teacher_train_cfg(&self) -> TrainConfig {
        self.teacher_train.clone().unwrap_or_else(|| self.train.clone())
    }

    /// Write the resolved config next to the run artifacts.
    pub fn echo(&self, file_name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(file_name);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.kind {
            DatasetKind::Synth => {
                let train = synth_generate(
                    derive_seed(self.dataset.seed, "train"),
                    self.dataset.n_per_class,
                    self.dataset.classes,
                    self.dataset.size,
                    "train",
                )?;
                let test = synth_generate(
                    derive_seed(self.dataset.seed, "test"),
                    self.dataset.test_per_class,
                    self.dataset.classes,
                    self.dataset.size,
                    "test",
                )?;
                Ok((train, test))
            }
            DatasetKind::Idx => {
                let train = idx_load(
                    self.dataset.idx_train_images.as_ref().expect("validated"),
                    self.dataset.idx_train_labels.as_ref().expect("validated"),
                    self.dataset.size,
                )?;
                let test = idx_load(
                    self.dataset.idx_test_images.as_ref().expect("validated"),
                    self.dataset.idx_test_labels.as_ref().expect("validated"),
                    self.dataset.size,
                )?;
                Ok((train, test))
            }
        }
    }
}

/// Apply one dotted-path override. The value parses as JSON when it can
/// (numbers, booleans, arrays, null) and falls back to a string.
fn set_path(root: &mut serde_json::Value, dotted: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {dotted:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {dotted:?}: {} is not an object",
                parts[..i].join(".")
            ))
        })?;
        if last {
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop returns on the last part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::resolve(None, &[], None, None).unwrap();
        assert_eq!(cfg.teacher.depth, 6);
        assert_eq!(cfg.student.dim, 32);
        assert_eq!(cfg.distill.alpha, 3e-5);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let sets = vec![
            ("train.seed".to_string(), "9".to_string()),
            ("distill.alpha".to_string(), "0.001".to_string()),
            ("distill.shallow_layers".to_string(), "[0]".to_string()),
            ("distill.gen_block".to_string(), "self_attn".to_string()),
        ];
        let cfg = RunConfig::resolve(None, &sets, None, None).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert!((cfg.distill.alpha - 0.001).abs() < 1e-9);
        assert_eq!(cfg.distill.shallow_layers, vec![0]);
        assert_eq!(cfg.distill.gen_block, crate::genblocks::GenBlockKind::SelfAttn);
    }

    #[test]
    fn seed_shorthand_sets_both_seeds() {
        let cfg = RunConfig::resolve(None, &[], None, Some(42)).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.student.seed, 42);
    }

    #[test]
    fn missing_config_file_is_a_config_error_naming_the_path() {
        let err = RunConfig::resolve(Some(Path::new("/nonexistent/cfg.json")), &[], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn echo_round_trips_through_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.train.seed = 31;
        let echo = cfg.echo("config.json").unwrap();
        let back = RunConfig::resolve(Some(&echo), &[], None, None).unwrap();
        assert_eq!(back.train.seed, 31);
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&cfg).unwrap(),
            "echo must reproduce the resolved config exactly"
        );
    }

    #[test]
    fn invalid_override_values_are_rejected() {
        let sets = vec![("train.epochs".to_string(), "0".to_string())];
        assert!(RunConfig::resolve(None, &sets, None, None).is_err());
        let sets = vec![("distill.lambda".to_string(), "1.5".to_string())];
        assert!(RunConfig::resolve(None, &sets, None, None).is_err());
    }
}
