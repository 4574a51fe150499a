//! Run configuration: one JSON document, layered as
//! defaults < file < `UAPFORGE_*` environment < `--set key=value` flags.
//!
//! Environment keys use `__` between path segments, so
//! `UAPFORGE_ATTACK__BATCH_SIZE=64` sets `attack.batch_size`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attack::{default_radius, AttackConfig, Order};
use crate::data::{load_idx, synth_blobs, synth_glyphs, Dataset, GlyphParams};
use crate::error::{Error, Result};
use crate::eval::ReportFormat;
use crate::model::TrainConfig;
use crate::real::{DType, Real};
use crate::sub_seed;

pub const ENV_PREFIX: &str = "UAPFORGE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Glyphs,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub classes: usize,
    pub n: usize,
    pub shape: Vec<usize>,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            classes: 4,
            n: 2000,
            shape: vec![1, 8, 8],
            spread: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// IDX training files.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// IDX held-out files; synthetic sources hold out the last `holdout` samples instead.
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub holdout: usize,
    pub glyphs: GlyphParams,
    pub blobs: BlobParams,
    /// Samples drawn from the training split for crafting; `None` uses all of it.
    pub subset_size: Option<usize>,
    /// Subset seed; defaults to a sub-seed of the top-level seed.
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DataSource::Glyphs,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            holdout: 1000,
            glyphs: GlyphParams::default(),
            blobs: BlobParams::default(),
            subset_size: Some(500),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: String,
    pub train: TrainConfig,
    /// Checkpoint to craft against; defaults to the newest one in the output tree.
    pub checkpoint: Option<PathBuf>,
    /// Extra checkpoints whose losses are averaged with `checkpoint` during crafting.
    pub ensemble: Vec<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "cnn-small".into(),
            train: TrainConfig::default(),
            checkpoint: None,
            ensemble: Vec::new(),
        }
    }
}

/// Attack section as written in the file: every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub model_steps: Option<usize>,
    pub data_steps: Option<usize>,
    pub rho: Option<f64>,
    /// Data radius; `None` rescales the default to the input size.
    pub radius: Option<f64>,
    pub gamma: Option<f64>,
    pub order: Option<Order>,
    pub curriculum: Option<bool>,
    pub clamp_data_box: Option<bool>,
    pub variant: Option<String>,
    pub adam: Option<crate::optim::AdamConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Target checkpoints; defaults to the crafting surrogate(s).
    pub targets: Vec<PathBuf>,
    /// δ artifacts; defaults to the newest one in the output tree.
    pub deltas: Vec<PathBuf>,
    /// Threads for evaluation; 1 is serial.
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv],
        }
    }
}

/// One swept axis. Exactly one list may be non-empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub order: Vec<Order>,
    pub rho: Vec<f64>,
    pub radius: Vec<f64>,
    pub curriculum: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Order(Vec<Order>),
    Rho(Vec<f64>),
    Radius(Vec<f64>),
    Curriculum(Vec<bool>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Order(_) => "order",
            SweepAxis::Rho(_) => "rho",
            SweepAxis::Radius(_) => "radius",
            SweepAxis::Curriculum(_) => "curriculum",
        }
    }

    /// `(label, config)` for each sweep point.
    pub fn points(&self, base: &AttackConfig) -> Vec<(String, AttackConfig)> {
        let with = |f: &dyn Fn(&mut AttackConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            SweepAxis::Order(v) => v.iter().map(|&o| (o.as_str().to_string(), with(&|c| c.order = o))).collect(),
            SweepAxis::Rho(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.rho = x))).collect(),
            SweepAxis::Radius(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.radius = x))).collect(),
            SweepAxis::Curriculum(v) => v.iter().map(|&b| (b.to_string(), with(&|c| c.curriculum = b))).collect(),
        }
    }
}

impl AblateSection {
    pub fn axis(&self) -> Result<SweepAxis> {
        let mut set = Vec::new();
        if !self.order.is_empty() {
            set.push(SweepAxis::Order(self.order.clone()));
        }
        if !self.rho.is_empty() {
            set.push(SweepAxis::Rho(self.rho.clone()));
        }
        if !self.radius.is_empty() {
            set.push(SweepAxis::Radius(self.radius.clone()));
        }
        if !self.curriculum.is_empty() {
            set.push(SweepAxis::Curriculum(self.curriculum.clone()));
        }
        match set.len() {
            1 => Ok(set.pop().expect("one axis")),
            0 => Err(Error::config("ablate", "no sweep axis given (order, rho, radius or curriculum)")),
            _ => Err(Error::config(
                "ablate",
                format!(
                    "exactly one sweep axis allowed, got {}",
                    set.iter().map(SweepAxis::name).collect::<Vec<_>>().join(", ")
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: DType,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub output: OutputSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: DType::F32,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection {
                width: 1,
                ..Default::default()
            },
            output: OutputSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Parses a flag or environment value: JSON when it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::config(key, "parent is not a section"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `(key, value)` overrides found in `vars`, keys lower-cased with `__` mapped to `.`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Parses `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

fn path_key(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "config".into()
    } else {
        s
    }
}

impl RunConfig {
    /// Layers `file`, `env` and `flags` over the defaults, in increasing priority.
    pub fn resolve(file: Option<&Path>, env: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            if !doc.is_object() {
                return Err(Error::config("config", "top level must be a JSON object"));
            }
            merge(&mut tree, doc);
        }
        for (k, v) in env.iter().chain(flags) {
            set_path(&mut tree, k, parse_value(v))?;
        }
        Self::from_value(tree)
    }

    pub fn from_value(tree: Value) -> Result<Self> {
        serde_path_to_error::deserialize::<_, RunConfig>(tree).map_err(|e| {
            let key = path_key(e.path());
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// The attack configuration for inputs of `input_dim` values.
    pub fn attack_config(&self, input_dim: usize) -> Result<AttackConfig> {
        let s = &self.attack;
        let d = AttackConfig::default();
        let mut c = AttackConfig {
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            model_steps: s.model_steps.unwrap_or(d.model_steps),
            data_steps: s.data_steps.unwrap_or(d.data_steps),
            rho: s.rho.unwrap_or(d.rho),
            radius: s.radius.unwrap_or_else(|| default_radius(input_dim)),
            gamma: s.gamma.unwrap_or(d.gamma),
            order: s.order.unwrap_or(d.order),
            curriculum: s.curriculum.unwrap_or(d.curriculum),
            clamp_data_box: s.clamp_data_box.unwrap_or(d.clamp_data_box),
            seed: self.seed,
            variant: d.variant.clone(),
            adam: s.adam.unwrap_or(d.adam),
        };
        c = c.with_variant(s.variant.as_deref().unwrap_or("dm-uap"))?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "train"),
            ..self.model.train.clone()
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        if ds.source == DataSource::Idx {
            for (key, p) in [("dataset.images", &ds.images), ("dataset.labels", &ds.labels)] {
                match p {
                    None => return Err(Error::config(key, "required for source idx")),
                    Some(p) if !p.is_file() => {
                        return Err(Error::config(key, format!("{} does not exist", p.display())))
                    }
                    _ => {}
                }
            }
            match (&ds.test_images, &ds.test_labels) {
                (None, None) => {}
                (Some(i), Some(l)) => {
                    for (key, p) in [("dataset.test_images", i), ("dataset.test_labels", l)] {
                        if !p.is_file() {
                            return Err(Error::config(key, format!("{} does not exist", p.display())));
                        }
                    }
                }
                _ => return Err(Error::config("dataset.test_images", "test images and labels go together")),
            }
        }
        if ds.subset_size == Some(0) {
            return Err(Error::config("dataset.subset_size", "must be >= 1"));
        }
        let t = &self.model.train;
        if t.epochs == 0 || t.batch == 0 {
            return Err(Error::config("model.train", "epochs and batch must be >= 1"));
        }
        if !(t.lr > 0.0) {
            return Err(Error::config("model.train.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("model.train.momentum", "must lie in [0, 1)"));
        }
        if self.eval.width == 0 {
            return Err(Error::config("eval.width", "must be >= 1"));
        }
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats", "at least one format required"));
        }
        // Attack ranges do not depend on the input size.
        self.attack_config(1)?;
        Ok(())
    }

    /// Training split and optional held-out split.
    pub fn load_splits<F: Real>(&self) -> Result<(Dataset<F>, Option<Dataset<F>>)> {
        let ds = &self.dataset;
        let full = match ds.source {
            DataSource::Idx => {
                let (i, l) = (ds.images.as_ref(), ds.labels.as_ref());
                let train = load_idx(
                    i.ok_or_else(|| Error::config("dataset.images", "required for source idx"))?,
                    l.ok_or_else(|| Error::config("dataset.labels", "required for source idx"))?,
                )?;
                let test = match (&ds.test_images, &ds.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    _ => None,
                };
                return Ok((train, test));
            }
            DataSource::Glyphs => synth_glyphs::<F>(&ds.glyphs)?,
            DataSource::Blobs => {
                let b = &ds.blobs;
                synth_blobs::<F>(b.classes, b.n, &b.shape, b.spread, b.seed)?
            }
        };
        if ds.holdout == 0 {
            return Ok((full, None));
        }
        if ds.holdout >= full.len() {
            return Err(Error::config("dataset.holdout", format!("must be below the {} generated samples", full.len())));
        }
        let (train, test) = full.split_at(full.len() - ds.holdout)?;
        Ok((train, Some(test)))
    }

    /// The crafting subset of `train`.
    pub fn crafting_subset<F: Real>(&self, train: &Dataset<F>) -> Result<Dataset<F>> {
        match self.dataset.subset_size {
            None => Ok(train.clone()),
            Some(n) if n > train.len() => Err(Error::config(
                "dataset.subset_size",
                format!("{n} exceeds the {} training samples", train.len()),
            )),
            Some(n) => train.subset(n, self.dataset.seed.unwrap_or_else(|| sub_seed(self.seed, "subset"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"attack": {"rho": 2.0, "epochs": 5}, "seed": 3}"#).unwrap();
        let env = vec![kv("attack.rho", "4")];
        let flags = vec![kv("attack.rho", "8")];
        let c = RunConfig::resolve(Some(&file), &env, &flags).unwrap();
        assert_eq!(c.attack.rho, Some(8.0));
        assert_eq!(c.attack.epochs, Some(5));
        assert_eq!(c.seed, 3);
        let c = RunConfig::resolve(Some(&file), &env, &[]).unwrap();
        assert_eq!(c.attack.rho, Some(4.0));
        let c = RunConfig::resolve(None, &[], &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn env_keys_map_to_paths() {
        let vars = vec![kv("UAPFORGE_ATTACK__BATCH_SIZE", "64"), kv("HOME", "/root")];
        assert_eq!(env_overrides(vars), vec![kv("attack.batch_size", "64")]);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::resolve(None, &[], &[kv("attack.rho", "\"lots\"")]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "attack.rho"), "{err}");
        let err = RunConfig::resolve(None, &[], &[kv("attack.bogus", "1")]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let c = RunConfig::resolve(None, &[], &[kv("attack.gamma", "0")]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "attack.gamma"));
        let c = RunConfig::resolve(None, &[], &[kv("dataset.source", "idx"), kv("dataset.images", "/nope")]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "dataset.images"));
    }

    #[test]
    fn attack_defaults_and_variants() {
        let c = RunConfig::default();
        let a = c.attack_config(crate::attack::REFERENCE_INPUT_DIM).unwrap();
        assert_eq!((a.epochs, a.batch_size, a.model_steps, a.data_steps), (20, 125, 10, 10));
        assert_eq!((a.epsilon, a.rho, a.radius), (10.0 / 255.0, 1.0, 32.0));
        let mut c = RunConfig::default();
        c.attack.variant = Some("spgd".into());
        let a = c.attack_config(256).unwrap();
        assert_eq!((a.rho, a.radius, a.variant.as_str()), (0.0, 0.0, "spgd"));
    }

    #[test]
    fn ablate_needs_one_axis() {
        let mut a = AblateSection::default();
        assert!(a.axis().is_err());
        a.rho = vec![1.0, 2.0];
        assert_eq!(a.axis().unwrap().points(&AttackConfig::default()).len(), 2);
        a.order = vec![Order::None];
        assert!(matches!(a.axis(), Err(Error::Config { .. })));
    }
}
