//! Declarative experiment configuration.
//!
//! One JSON file describes a run; `--set a.b=value` flags patch it before it
//! is validated. The resolved configuration (minus the output directory,
//! which cannot influence results) is embedded in every artifact together
//! with its SHA-256 hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use archlearn_core::arch::ArchSpec;
use archlearn_core::data::{filter_classes, synth_blobs, BlobSpec, Dataset, Split};
use archlearn_core::learn::{
    suggest_lambdas_with_ratio, RegConfig, TrainConfig, DEFAULT_STEP_CLIP, WIDTH_BINARIZE_RATIO,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::idx::{default_mnist_dir, load_mnist, MNIST_VAL_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Architecture string, e.g. `conv:20x5x5 pool:2 fc:500 out:10`.
    pub arch: String,
    /// Values for named repetition counts in `arch`, e.g. `{"n": 3}`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arch_vars: BTreeMap<String, usize>,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reg: RegSpec,
    #[serde(default)]
    pub surgery: SurgeryConfig,
    /// Output directory; commands may override it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Copy weights from this checkpoint instead of initialising them.
    /// Gates are still initialised from `train.init`.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// MNIST IDX files; `dir` falls back to `$ARCHLEARN_DATA_DIR`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only digits below this value.
        #[serde(default)]
        classes: Option<usize>,
        /// Validation images taken from the end of the training file.
        #[serde(default = "default_val_size")]
        val_size: usize,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs; one draw is split into train, val and test.
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        train_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
    },
}

fn default_val_size() -> usize {
    MNIST_VAL_SIZE
}

/// How the regularization weights are chosen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegSpec {
    /// Plain training.
    #[default]
    None,
    /// Heuristic weights from the initial architecture. `lambda3_scale`
    /// multiplies `λ₃` only, after the other weights have been derived.
    Suggest {
        #[serde(default = "default_reference_width")]
        reference_width: usize,
        #[serde(default = "default_base_lambda3")]
        base_lambda3: f64,
        #[serde(default = "default_ratio")]
        ratio: f64,
        #[serde(default = "one")]
        lambda3_scale: f64,
        #[serde(default)]
        lambda4: Option<f64>,
        #[serde(default = "default_step_clip")]
        step_clip: f64,
    },
    Explicit {
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        lambda4: f64,
        #[serde(default = "default_step_clip")]
        step_clip: f64,
    },
}

fn default_reference_width() -> usize {
    500
}
fn default_base_lambda3() -> f64 {
    1e-5
}
fn default_ratio() -> f64 {
    WIDTH_BINARIZE_RATIO
}
fn one() -> f64 {
    1.0
}
fn default_step_clip() -> f64 {
    DEFAULT_STEP_CLIP
}

/// Post-training surgery. Pruning always runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurgeryConfig {
    /// Layer indices to fold into their successor.
    pub collapse_layers: Vec<usize>,
    /// Fold every layer whose binarized depth gate is linear.
    pub collapse_all_eligible: bool,
}

/// Train, validation and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl ExperimentConfig {
    pub fn arch_spec(&self) -> AppResult<ArchSpec> {
        let vars: Vec<(&str, usize)> = self.arch_vars.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        Ok(ArchSpec::parse_with(&self.arch, &vars)?)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.arch_spec()?;
        self.train.validate().map_err(|e| AppError::Config(format!("train: {e}")))?;
        let reg = self.resolve_reg()?;
        if !reg.is_valid() {
            return Err(AppError::Config(format!("reg: invalid weights {reg:?}")));
        }
        match &self.data {
            DataConfig::Mnist { classes: Some(k), .. } if !(2..=10).contains(k) => {
                Err(AppError::Config(format!("data.classes must lie in 2..=10, got {k}")))
            }
            DataConfig::Blobs { train_per_class: 0, .. } => {
                Err(AppError::Config("data.train_per_class must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Concrete regularization weights for this architecture.
    pub fn resolve_reg(&self) -> AppResult<RegConfig> {
        Ok(match self.reg {
            RegSpec::None => RegConfig::none(),
            RegSpec::Suggest { reference_width, base_lambda3, ratio, lambda3_scale, lambda4, step_clip } => {
                let phi = self.arch_spec()?.phi();
                let mut r = suggest_lambdas_with_ratio(&phi, reference_width, base_lambda3, ratio);
                r.lambda3 *= lambda3_scale;
                if let Some(l4) = lambda4 {
                    r.lambda4 = l4;
                }
                r.step_clip = step_clip;
                r
            }
            RegSpec::Explicit { lambda1, lambda2, lambda3, lambda4, step_clip } => {
                RegConfig { lambda1, lambda2, lambda3, lambda4, step_clip }
            }
        })
    }

    /// The configuration as embedded in artifacts: everything except the
    /// output directory, plus the resolved regularization weights.
    pub fn provenance(&self) -> AppResult<Value> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("output");
        obj.insert("resolved_reg".into(), serde_json::to_value(self.resolve_reg()?).expect("reg serializes"));
        Ok(v)
    }

    pub fn hash(&self) -> AppResult<String> {
        Ok(config_hash(&self.provenance()?))
    }

    pub fn load_data(&self) -> AppResult<Splits> {
        match &self.data {
            DataConfig::Mnist { dir, classes, val_size, train_limit, test_limit } => {
                let dir = dir.clone().unwrap_or_else(default_mnist_dir);
                let full = load_mnist(&dir, false)?;
                let n = full.len();
                if *val_size >= n {
                    return Err(AppError::Config(format!("data.val_size {val_size} leaves no training data")));
                }
                let mut train = full.slice(0, n - val_size, Split::Train)?;
                let mut val = (*val_size > 0).then(|| full.slice(n - val_size, n, Split::Val)).transpose()?;
                let mut test = load_mnist(&dir, true)?;
                if let Some(k) = *classes {
                    train = filter_classes(&train, k)?;
                    val = val.map(|v| filter_classes(&v, k)).transpose()?;
                    test = filter_classes(&test, k)?;
                }
                if let Some(l) = *train_limit {
                    train = train.slice(0, l.min(train.len()), Split::Train)?;
                }
                if let Some(l) = *test_limit {
                    test = test.slice(0, l.min(test.len()), Split::Test)?;
                }
                Ok(Splits { train, val, test: Some(test) })
            }
            &DataConfig::Blobs { classes, dim, separation, seed, train_per_class, val_per_class, test_per_class } => {
                let per = train_per_class + val_per_class + test_per_class;
                let all = synth_blobs(&BlobSpec { n_per_class: per, classes, dim, separation, seed }, Split::Train)?;
                // samples come out in shuffled order, so contiguous slices are
                // class-balanced in expectation
                let a = train_per_class * classes;
                let b = a + val_per_class * classes;
                let train = all.slice(0, a, Split::Train)?;
                let val = (val_per_class > 0).then(|| all.slice(a, b, Split::Val)).transpose()?;
                let test = (test_per_class > 0).then(|| all.slice(b, all.len(), Split::Test)).transpose()?;
                Ok(Splits { train, val, test })
            }
        }
    }
}

pub fn config_hash(provenance: &Value) -> String {
    // serde_json objects are key-sorted, so this is canonical
    hex::encode(Sha256::digest(provenance.to_string().as_bytes()))
}

/// Applies `a.b.c=value` overrides. The value is parsed as JSON and falls
/// back to a plain string; intermediate objects are created as needed.
pub fn apply_overrides(v: &mut Value, overrides: &[String]) -> AppResult<()> {
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("override `{o}` is not of the form key.path=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *v;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            if key.is_empty() {
                return Err(AppError::Config(format!("override `{o}` has an empty key")));
            }
            if !cur.is_object() {
                if cur.is_null() {
                    *cur = Value::Object(Default::default());
                } else {
                    return Err(AppError::Config(format!(
                        "override `{o}`: `{}` is not an object",
                        keys[..i].join(".")
                    )));
                }
            }
            let obj = cur.as_object_mut().expect("checked above");
            if i + 1 == keys.len() {
                obj.insert(key.to_string(), value.clone());
                break;
            }
            cur = obj.entry(key.to_string()).or_insert(Value::Null);
        }
    }
    Ok(())
}

/// Parses a config document, applies overrides and validates it.
/// `origin` names the source in diagnostics.
pub fn parse_config(text: &str, origin: &str, overrides: &[String]) -> AppResult<ExperimentConfig> {
    let cfg = parse_template(text, origin, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// As [`parse_config`] without validation, for sweep templates whose
/// architecture still has unbound repetition counts.
pub fn parse_template(text: &str, origin: &str, overrides: &[String]) -> AppResult<ExperimentConfig> {
    let cfg: ExperimentConfig = if overrides.is_empty() {
        // straight from the text so errors carry line and column
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            AppError::Config(format!("{origin}: field `{path}`: {inner}"))
        })?
    } else {
        let mut v: Value = serde_json::from_str(text).map_err(|e| AppError::Config(format!("{origin}: {e}")))?;
        apply_overrides(&mut v, overrides)?;
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            AppError::Config(format!("{origin} (after overrides): field `{path}`: {}", e.into_inner()))
        })?
    };
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> AppResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_config(&text, &path.display().to_string(), overrides)
}

pub fn load_template(path: &Path, overrides: &[String]) -> AppResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_template(&text, &path.display().to_string(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"{
        "arch": "fc:8 out:3",
        "data": {"source": "blobs", "classes": 3, "dim": 4, "separation": 8.0, "seed": 1, "train_per_class": 20}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(BLOBS, "t", &[]).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.reg, RegSpec::None);
        assert_eq!(cfg.resolve_reg().unwrap(), RegConfig::none());
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let text =
            "{\n  \"arch\": \"fc:8 out:3\",\n  \"data\": {\"source\": \"blobs\"},\n  \"train\": {\"lr\": \"fast\"}\n}";
        let e = parse_config(text, "cfg.json", &[]).unwrap_err().to_string();
        assert!(e.contains("cfg.json") && e.contains("line 3") && e.contains("data"), "{e}");
        let text = BLOBS.replace("\"arch\"", "\"train\": {\"lr\": \"fast\"}, \"arch\"");
        let e = parse_config(&text, "cfg.json", &[]).unwrap_err().to_string();
        assert!(e.contains("train.lr") && e.contains("line"), "{e}");
        let e = parse_config(&BLOBS.replace("\"arch\"", "\"arhc\": 1, \"arch\""), "c", &[]).unwrap_err().to_string();
        assert!(e.contains("arhc"), "{e}");
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let cfg = parse_config(
            BLOBS,
            "t",
            &[
                "train.lr=0.5".into(),
                "train.init.gate_w0=0.9".into(),
                "reg.mode=suggest".into(),
                "arch=fc:4 out:3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.init.gate_w0, 0.9);
        assert_eq!(cfg.arch, "fc:4 out:3");
        assert!(matches!(cfg.reg, RegSpec::Suggest { reference_width: 500, .. }));
        assert!(parse_config(BLOBS, "t", &["train.lr".into()]).is_err());
        assert!(parse_config(BLOBS, "t", &["arch.x=1".into()]).is_err());
    }

    #[test]
    fn invalid_arch_is_a_config_class_error() {
        let e = parse_config(&BLOBS.replace("fc:8 out:3", "fc:8"), "t", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = parse_config(BLOBS, "t", &["train.lr=-1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn suggest_scales_only_lambda3() {
        let base = parse_config(BLOBS, "t", &["reg={\"mode\":\"suggest\"}".into()]).unwrap().resolve_reg().unwrap();
        let scaled = parse_config(BLOBS, "t", &["reg={\"mode\":\"suggest\",\"lambda3_scale\":2}".into()])
            .unwrap()
            .resolve_reg()
            .unwrap();
        assert_eq!(scaled.lambda1, base.lambda1);
        assert_eq!(scaled.lambda3, 2.0 * base.lambda3);
    }

    #[test]
    fn hash_ignores_output_and_tracks_everything_else() {
        let a = parse_config(BLOBS, "t", &[]).unwrap();
        let b = parse_config(BLOBS, "t", &["output=/tmp/x".into()]).unwrap();
        let c = parse_config(BLOBS, "t", &["train.seed=3".into()]).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn blob_splits_have_requested_sizes() {
        let cfg = parse_config(BLOBS, "t", &["data.val_per_class=5".into(), "data.test_per_class=4".into()]).unwrap();
        let s = cfg.load_data().unwrap();
        assert_eq!((s.train.len(), s.val.unwrap().len(), s.test.unwrap().len()), (60, 15, 12));
    }
}
