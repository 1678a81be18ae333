//! Run configuration files.
//!
//! A run config is a JSON object whose keys are the `TrainConfig` fields
//! (any subset) plus four reserved keys:
//!
//! | key       | meaning                                                    |
//! |-----------|------------------------------------------------------------|
//! | `preset`  | `"paper"` (default) or `"desk"`; fills every unset field    |
//! | `dataset` | `{"kind": "blobs" \| "idx" \| "csv", "params": {...}}`       |
//! | `out_dir` | output directory, overridden by `--out`                    |
//! | `edits`   | list of `{"specialize": [ids]}` / `{"unlearn": id}` edits  |
//!
//! Nested objects (`reg`, `optimizer`) are merged key by key into the
//! preset. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use taskvec::data::{gen_blobs, load_csv, load_idx, BlobSpec, TaskStream};
use taskvec::trainer::{Algo, TrainConfig};
use taskvec::Variant;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Paper hyperparameters.
    #[default]
    Paper,
    /// Hyperparameters tuned for the built-in blob benchmark.
    Desk,
}

impl Preset {
    pub fn config(self, algo: Algo, variant: Variant) -> TrainConfig {
        match self {
            Preset::Paper => {
                let mut c = TrainConfig {
                    algo,
                    variant,
                    ..TrainConfig::default()
                };
                if variant.is_peft() {
                    c.lr = 3e-4;
                }
                c
            }
            Preset::Desk => TrainConfig::desk(algo, variant),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxParams {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvParams {
    pub path: PathBuf,
    pub label_column: usize,
    #[serde(default)]
    pub header: bool,
    pub tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx(IdxParams),
    Csv(CsvParams),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobSpec::default())
    }
}

impl DatasetSpec {
    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Blobs(_) => {}
            DatasetSpec::Idx(p) => {
                fix(&mut p.images);
                fix(&mut p.labels);
                if let Some(x) = p.test_images.as_mut() {
                    fix(x);
                }
                if let Some(x) = p.test_labels.as_mut() {
                    fix(x);
                }
            }
            DatasetSpec::Csv(p) => fix(&mut p.path),
        }
    }

    pub fn load(&self) -> Result<TaskStream, CliError> {
        let stream = match self {
            DatasetSpec::Blobs(b) => gen_blobs(b)?,
            DatasetSpec::Idx(p) => {
                let test = match (&p.test_images, &p.test_labels) {
                    (Some(i), Some(l)) => Some((i.as_path(), l.as_path())),
                    (None, None) => None,
                    _ => return Err(CliError::usage("test_images and test_labels must be given together")),
                };
                load_idx(&p.images, &p.labels, test, p.tasks, p.seed)?
            }
            DatasetSpec::Csv(p) => load_csv(&p.path, p.label_column, p.header, p.tasks, p.seed)?,
        };
        Ok(stream)
    }

    /// Reads a dataset spec from a file holding either a bare spec or a
    /// whole run config (its `dataset` entry, or the default benchmark).
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if v.get("kind").is_none() {
            return RunConfigFile::parse(&text, base).map(|c| c.dataset);
        }
        let mut spec: DatasetSpec =
            serde_json::from_value(v).map_err(|e| CliError::usage(format!("{}: dataset: {e}", path.display())))?;
        spec.resolve_paths(base);
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum EditSpec {
    Specialize {
        specialize: Vec<usize>,
    },
    Unlearn {
        unlearn: usize,
        #[serde(default)]
        raw: bool,
    },
}

/// A parsed, validated run config.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfigFile {
    pub preset: Preset,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub out_dir: Option<PathBuf>,
    pub edits: Vec<EditSpec>,
}

const RESERVED: [&str; 4] = ["preset", "dataset", "out_dir", "edits"];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn take<T: for<'de> Deserialize<'de>>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    match obj.remove(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| CliError::usage(format!("config key {key:?}: {e}"))),
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
        let Value::Object(mut obj) = v else {
            return Err(CliError::usage("config must be a JSON object"));
        };
        let preset: Preset = take(&mut obj, "preset")?.unwrap_or_default();
        let mut dataset: DatasetSpec = take(&mut obj, "dataset")?.unwrap_or_default();
        dataset.resolve_paths(base_dir);
        let out_dir: Option<PathBuf> = take::<PathBuf>(&mut obj, "out_dir")?.map(|p| if p.is_relative() { base_dir.join(p) } else { p });
        let edits: Vec<EditSpec> = take(&mut obj, "edits")?.unwrap_or_default();
        debug_assert!(RESERVED.iter().all(|k| !obj.contains_key(*k)));

        // algo and variant pick the preset, so read them first.
        let algo: Algo = match obj.get("algo") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::usage(format!("config key \"algo\": {e}")))?,
            None => Algo::Ita,
        };
        let variant: Variant = match obj.get("variant") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::usage(format!("config key \"variant\": {e}")))?,
            None => Variant::Fft,
        };
        let mut merged = serde_json::to_value(preset.config(algo, variant)).expect("config serializes");
        merge(&mut merged, Value::Object(obj));
        let train: TrainConfig = serde_json::from_value(merged).map_err(|e| CliError::usage(format!("config: {e}")))?;
        train.validate()?;
        for e in &edits {
            if let EditSpec::Specialize { specialize } = e {
                if specialize.is_empty() {
                    return Err(CliError::usage("specialize edit needs at least one task id"));
                }
            }
        }
        Ok(Self {
            preset,
            train,
            dataset,
            out_dir,
            edits,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
