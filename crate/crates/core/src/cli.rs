//! The `uapforge` command line: train, craft, eval, ablate, verify.
//!
//! Artifacts land in `<output>/{checkpoints,deltas,reports}` under
//! content-hashed names; each kind directory keeps a `LATEST` pointer that
//! later stages fall back on when the config names no explicit path.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attack::{craft, AttackConfig, CraftOutput, RunLog};
use crate::config::{env_overrides, parse_assignment, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{fooling_ratio_parallel, report_write, round4, transfer_matrix, EvalReport, ReportFormat, TaggedDelta};
use crate::model::{accuracy, build_model, load_checkpoint, save_checkpoint, sidecar_path, train_erm, CheckpointMeta, ModelSpec, ModelState};
use crate::real::{DType, Real};
use crate::sub_seed;
use crate::tensor::{sha256_hex, AnyTensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CRAFT: i32 = 4;
pub const EXIT_MISSING: i32 = 5;

/// Stable process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::NonFinite(_) => EXIT_CRAFT,
        Error::Craft { source, .. } if source.is_numerical() => EXIT_CRAFT,
        Error::Craft { source, .. } => exit_code(source),
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "uapforge", version, about = "Craft and evaluate universal adversarial perturbations")]
pub struct Cli {
    /// JSON run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set attack.rho=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set output.directory=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the dataset (ERM) and write a checkpoint.
    Train,
    /// Craft a perturbation against the configured checkpoint(s).
    Craft {
        /// Objective preset: dm-uap, spgd, data or model.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate perturbations against target checkpoints.
    Eval,
    /// Sweep one attack setting and report the fooling ratio per value.
    Ablate,
    /// Check an artifact's content hash, optionally re-deriving it.
    Verify {
        artifact: PathBuf,
        /// Re-run the pipeline recorded in the metadata and compare hashes.
        #[arg(long)]
        recompute: bool,
    },
}

impl Cli {
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(d) = &self.out {
            out.push(("output.directory".to_string(), Value::String(d.display().to_string()).to_string()));
        }
        if let Some(s) = self.seed {
            out.push(("seed".to_string(), s.to_string()));
        }
        if let Command::Craft { variant: Some(v) } = &self.command {
            out.push(("attack.variant".to_string(), Value::String(v.clone()).to_string()));
        }
        for s in &self.set {
            out.push(parse_assignment(s)?);
        }
        Ok(out)
    }

    pub fn resolve_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::resolve(self.config.as_deref(), &env_overrides(std::env::vars()), &self.overrides()?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Verify { artifact, recompute } = &cli.command {
        return verify(artifact, *recompute);
    }
    let cfg = cli.resolve_config()?;
    match (&cli.command, cfg.precision) {
        (Command::Train, DType::F32) => train::<f32>(&cfg).map(drop),
        (Command::Train, DType::F64) => train::<f64>(&cfg).map(drop),
        (Command::Craft { .. }, DType::F32) => craft_cmd::<f32>(&cfg).map(drop),
        (Command::Craft { .. }, DType::F64) => craft_cmd::<f64>(&cfg).map(drop),
        (Command::Eval, DType::F32) => eval_cmd::<f32>(&cfg).map(drop),
        (Command::Eval, DType::F64) => eval_cmd::<f64>(&cfg).map(drop),
        (Command::Ablate, DType::F32) => ablate::<f32>(&cfg).map(drop),
        (Command::Ablate, DType::F64) => ablate::<f64>(&cfg).map(drop),
        (Command::Verify { .. }, _) => unreachable!("handled above"),
    }
}

/// The `<output>/{checkpoints,deltas,reports}` tree.
#[derive(Debug, Clone)]
pub struct OutTree {
    root: PathBuf,
}

pub const CHECKPOINTS: &str = "checkpoints";
pub const DELTAS: &str = "deltas";
pub const REPORTS: &str = "reports";
const LATEST: &str = "LATEST";

impl OutTree {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutTree { root: root.into() }
    }

    pub fn dir(&self, kind: &str) -> Result<PathBuf> {
        let d = self.root.join(kind);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn set_latest(&self, kind: &str, file: &Path) -> Result<()> {
        let name = file
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", file.display())))?;
        fs::write(self.dir(kind)?.join(LATEST), name.to_string_lossy().as_bytes())?;
        Ok(())
    }

    pub fn latest(&self, kind: &str) -> Result<PathBuf> {
        let pointer = self.root.join(kind).join(LATEST);
        let name = fs::read_to_string(&pointer).map_err(|_| Error::MissingArtifact(pointer.clone()))?;
        Ok(self.root.join(kind).join(name.trim()))
    }
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

fn load_model<F: Real>(path: &Path) -> Result<(ModelState<F>, CheckpointMeta)> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    load_checkpoint(path)
}

/// Trains per the model section; returns the checkpoint path.
pub fn train<F: Real>(cfg: &RunConfig) -> Result<PathBuf> {
    let (train_set, test_set) = cfg.load_splits::<F>()?;
    let classes = train_set
        .num_classes()
        .ok_or_else(|| Error::config("dataset", "training data must be labeled"))?;
    let spec = ModelSpec::named(&cfg.model.arch, train_set.sample_shape(), classes)
        .map_err(|e| Error::config("model.arch", e.to_string()))?;
    let tc = cfg.train_config();
    let init = build_model::<F>(&spec, tc.seed)?;
    let (model, history) = train_erm(&init, &train_set, &tc)?;

    let hash = sha256_hex(&model.params().to_bytes());
    let tree = OutTree::new(&cfg.output.directory);
    let path = tree.dir(CHECKPOINTS)?.join(format!("{}-{}.uapt", spec.name, short(&hash)));
    let meta = CheckpointMeta {
        spec: spec.clone(),
        dtype: F::DTYPE,
        init_seed: tc.seed,
        train: Some(tc),
        dataset_fingerprint: Some(train_set.fingerprint_hex()),
        history: Some(history),
        params_hash: String::new(),
        config: Some(cfg.to_value()),
    };
    save_checkpoint(&model, &path, meta)?;
    tree.set_latest(CHECKPOINTS, &path)?;

    let train_acc = accuracy(&model, &train_set)?;
    println!("checkpoint {}", path.display());
    println!("model {} ({} parameters)", model.model_id(), spec.param_count());
    print!("train accuracy {train_acc:.4}");
    if let Some(t) = &test_set {
        print!("  test accuracy {:.4}", accuracy(&model, t)?);
    }
    println!();
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRef {
    pub path: PathBuf,
    pub model_id: String,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogSummary {
    pub epochs: usize,
    pub batches: usize,
    pub final_loss: Option<f64>,
    pub budget_violations: usize,
}

impl From<&RunLog> for RunLogSummary {
    fn from(log: &RunLog) -> Self {
        RunLogSummary {
            epochs: log.epochs.len(),
            batches: log.batches,
            final_loss: log.final_loss(),
            budget_violations: log.budget_violations,
        }
    }
}

/// Sidecar of a δ artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMeta {
    pub kind: String,
    /// SHA-256 of the δ tensor file.
    pub content_hash: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub attack: AttackConfig,
    pub surrogates: Vec<SurrogateRef>,
    pub dataset_name: String,
    pub dataset_fp: String,
    pub n_craft: usize,
    pub delta_linf: f64,
    pub runlog: RunLogSummary,
    pub config: Value,
}

impl DeltaMeta {
    pub fn surrogate_tag(&self) -> String {
        self.surrogates.iter().map(|s| s.model_id.as_str()).collect::<Vec<_>>().join("+")
    }
}

pub fn read_delta_meta(delta: &Path) -> Result<DeltaMeta> {
    let side = sidecar_path(delta);
    let bytes = fs::read(&side).map_err(|_| Error::MissingArtifact(side.clone()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Checkpoint paths to craft against: the configured one (or the latest) plus the ensemble.
fn surrogate_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let first = match &cfg.model.checkpoint {
        Some(p) => p.clone(),
        None => OutTree::new(&cfg.output.directory).latest(CHECKPOINTS)?,
    };
    Ok(std::iter::once(first).chain(cfg.model.ensemble.iter().cloned()).collect())
}

fn load_surrogates<F: Real>(paths: &[PathBuf]) -> Result<(Vec<ModelState<F>>, Vec<SurrogateRef>)> {
    let mut models = Vec::new();
    let mut refs = Vec::new();
    for p in paths {
        let (m, meta) = load_model::<F>(p)?;
        refs.push(SurrogateRef {
            path: p.clone(),
            model_id: m.model_id(),
            params_hash: meta.params_hash,
        });
        models.push(m);
    }
    Ok((models, refs))
}

/// Writes δ, its sidecar and its RunLog CSV; returns the δ path.
fn write_delta<F: Real>(
    tree: &OutTree,
    attack: &AttackConfig,
    refs: &[SurrogateRef],
    subset: &Dataset<F>,
    out: &CraftOutput<F>,
    config: Value,
) -> Result<PathBuf> {
    let bytes = out.delta.to_bytes();
    let hash = sha256_hex(&bytes);
    let path = tree.dir(DELTAS)?.join(format!("{}-{}.uapt", attack.variant, short(&hash)));
    fs::write(&path, &bytes)?;
    let meta = DeltaMeta {
        kind: "delta".into(),
        content_hash: hash,
        dtype: F::DTYPE,
        shape: out.delta.shape().to_vec(),
        attack: attack.clone(),
        surrogates: refs.to_vec(),
        dataset_name: subset.name().to_string(),
        dataset_fp: subset.fingerprint_hex(),
        n_craft: subset.len(),
        delta_linf: out.delta.norm_linf(),
        runlog: RunLogSummary::from(&out.log),
        config,
    };
    let mut js = serde_json::to_vec_pretty(&meta)?;
    js.push(b'\n');
    fs::write(sidecar_path(&path), js)?;
    out.log.write_csv(path.with_extension("runlog.csv"))?;
    tree.set_latest(DELTAS, &path)?;
    Ok(path)
}

fn run_craft<F: Real>(
    cfg: &RunConfig,
    attack: &AttackConfig,
) -> Result<(Vec<ModelState<F>>, Vec<SurrogateRef>, Dataset<F>, CraftOutput<F>)> {
    let (models, refs) = load_surrogates::<F>(&surrogate_paths(cfg)?)?;
    let (train_set, _) = cfg.load_splits::<F>()?;
    let subset = cfg.crafting_subset(&train_set)?;
    let out = craft(attack, &models, &subset)?;
    Ok((models, refs, subset, out))
}

fn input_len(cfg: &RunConfig) -> Result<usize> {
    let paths = surrogate_paths(cfg)?;
    let side = sidecar_path(&paths[0]);
    let bytes = fs::read(&side).map_err(|_| Error::MissingArtifact(side.clone()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    Ok(meta.spec.input_len())
}

/// Crafts one δ artifact; returns its path.
pub fn craft_cmd<F: Real>(cfg: &RunConfig) -> Result<PathBuf> {
    let attack = cfg.attack_config(input_len(cfg)?)?;
    let (_, refs, subset, out) = run_craft::<F>(cfg, &attack)?;
    let tree = OutTree::new(&cfg.output.directory);
    let path = write_delta(&tree, &attack, &refs, &subset, &out, cfg.to_value())?;
    println!("delta {}", path.display());
    println!(
        "variant {}  epsilon {:.6}  rho {}  radius {:.6}  order {}  curriculum {}",
        attack.variant,
        attack.epsilon,
        attack.rho,
        attack.radius,
        attack.order.as_str(),
        attack.curriculum
    );
    if let Some(l) = out.log.final_loss() {
        println!("final epoch loss {l:.6}  linf {:.6}", out.delta.norm_linf());
    }
    Ok(path)
}

/// Evaluation data: the held-out split when there is one.
fn eval_set<F: Real>(cfg: &RunConfig) -> Result<Dataset<F>> {
    let (train_set, test_set) = cfg.load_splits::<F>()?;
    Ok(test_set.unwrap_or(train_set))
}

fn write_report(tree: &OutTree, stem: &str, report: &EvalReport, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let hash = sha256_hex(&report.to_bytes(ReportFormat::Json)?);
    let dir = tree.dir(REPORTS)?;
    let mut paths = Vec::new();
    for &f in formats {
        let p = dir.join(format!("{stem}-{}.{}", short(&hash), f.extension()));
        report_write(report, &p, f)?;
        paths.push(p);
    }
    if let Some(first) = paths.first() {
        tree.set_latest(REPORTS, first)?;
    }
    Ok(paths)
}

/// Evaluates every configured δ against every target; returns the report paths.
pub fn eval_cmd<F: Real>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tree = OutTree::new(&cfg.output.directory);
    let delta_paths = if cfg.eval.deltas.is_empty() {
        vec![tree.latest(DELTAS)?]
    } else {
        cfg.eval.deltas.clone()
    };
    let mut deltas = Vec::new();
    let mut metas = Vec::new();
    for p in &delta_paths {
        if !p.is_file() {
            return Err(Error::MissingArtifact(p.clone()));
        }
        let meta = read_delta_meta(p)?;
        let delta = AnyTensor::load(p)?.into_real::<F>();
        if delta.norm_linf() > meta.attack.epsilon {
            eprintln!(
                "warning: {} exceeds its recorded budget ({} > {})",
                p.display(),
                delta.norm_linf(),
                meta.attack.epsilon
            );
        }
        deltas.push(TaggedDelta {
            surrogate: meta.surrogate_tag(),
            delta,
        });
        metas.push(meta);
    }
    let target_paths: Vec<PathBuf> = if cfg.eval.targets.is_empty() {
        metas[0].surrogates.iter().map(|s| s.path.clone()).collect()
    } else {
        cfg.eval.targets.clone()
    };
    let mut targets = Vec::new();
    for p in &target_paths {
        let (m, _) = load_model::<F>(p)?;
        targets.push((m.model_id(), m));
    }
    let data = eval_set::<F>(cfg)?;
    let matrix = transfer_matrix(&targets, &deltas, &data, cfg.eval.width)?;
    let averages = matrix.row_averages();
    for (i, s) in matrix.surrogates.iter().enumerate() {
        let cells: Vec<String> = (0..matrix.targets.len()).map(|j| format!("{:.4}", matrix.ratio(i, j))).collect();
        println!("{s}: {}  avg {:.4}", cells.join(" "), averages[i]);
    }
    let report = EvalReport {
        matrix,
        config: cfg.to_value(),
    };
    let paths = write_report(&tree, "eval", &report, &cfg.output.formats)?;
    for p in &paths {
        println!("report {}", p.display());
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub fooling_ratio: f64,
    pub n: usize,
    pub final_loss: Option<f64>,
    pub delta_hash: String,
}

/// Crafts and evaluates (white-box, held-out data) one δ per sweep point;
/// returns the aggregated report paths.
pub fn ablate<F: Real>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let axis = cfg.ablate.axis()?;
    let base = cfg.attack_config(input_len(cfg)?)?;
    let tree = OutTree::new(&cfg.output.directory);
    let (models, refs) = load_surrogates::<F>(&surrogate_paths(cfg)?)?;
    let (train_set, test_set) = cfg.load_splits::<F>()?;
    let subset = cfg.crafting_subset(&train_set)?;
    let data = test_set.unwrap_or(train_set);

    let mut rows = Vec::new();
    for (label, attack) in axis.points(&base) {
        attack.validate()?;
        let out = craft(&attack, &models, &subset)?;
        let mut echo = cfg.to_value();
        echo["attack"] = serde_json::to_value(&attack)?;
        let path = write_delta(&tree, &attack, &refs, &subset, &out, echo)?;
        let mut changed = 0;
        for m in &models {
            changed += fooling_ratio_parallel(m, &data, &out.delta, cfg.eval.width)?.n_changed;
        }
        let n = data.len() * models.len();
        let row = AblationRow {
            axis: axis.name().into(),
            value: label,
            fooling_ratio: changed as f64 / n as f64,
            n,
            final_loss: out.log.final_loss(),
            delta_hash: sha256_hex(&out.delta.to_bytes()),
        };
        println!("{} = {}: fooling ratio {:.4}  ({})", row.axis, row.value, row.fooling_ratio, path.display());
        rows.push(row);
    }

    let dir = tree.dir(REPORTS)?;
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out.write_record(["axis", "value", "fooling_ratio", "n", "final_loss", "delta_hash"])?;
    for r in &rows {
        csv_out.write_record([
            r.axis.as_str(),
            r.value.as_str(),
            &format!("{:.4}", r.fooling_ratio),
            &r.n.to_string(),
            &r.final_loss.map(|l| format!("{l:.4}")).unwrap_or_default(),
            r.delta_hash.as_str(),
        ])?;
    }
    let csv_bytes = csv_out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let json_doc = json!({
        "axis": axis.name(),
        "config": cfg.to_value(),
        "rows": rows.iter().map(|r| json!({
            "value": r.value,
            "fooling_ratio": round4(r.fooling_ratio),
            "n": r.n,
            "final_loss": r.final_loss.map(round4),
            "delta_hash": r.delta_hash,
        })).collect::<Vec<_>>(),
    });
    let mut json_bytes = serde_json::to_vec_pretty(&json_doc)?;
    json_bytes.push(b'\n');
    let hash = sha256_hex(&json_bytes);
    let mut paths = Vec::new();
    for f in &cfg.output.formats {
        let p = dir.join(format!("ablate-{}-{}.{}", axis.name(), short(&hash), f.extension()));
        fs::write(
            &p,
            match f {
                ReportFormat::Csv => &csv_bytes,
                ReportFormat::Json => &json_bytes,
            },
        )?;
        println!("report {}", p.display());
        paths.push(p);
    }
    if let Some(first) = paths.first() {
        tree.set_latest(REPORTS, first)?;
    }
    Ok(paths)
}

fn recompute_checkpoint<F: Real>(meta: &CheckpointMeta) -> Result<String> {
    let cfg_value = meta
        .config
        .clone()
        .ok_or_else(|| Error::Verify("checkpoint metadata carries no config echo".into()))?;
    let cfg = RunConfig::from_value(cfg_value)?;
    let (train_set, _) = cfg.load_splits::<F>()?;
    let tc = meta
        .train
        .clone()
        .ok_or_else(|| Error::Verify("checkpoint metadata carries no training config".into()))?;
    let init = build_model::<F>(&meta.spec, meta.init_seed)?;
    let (model, _) = train_erm(&init, &train_set, &tc)?;
    Ok(sha256_hex(&model.params().to_bytes()))
}

fn recompute_delta<F: Real>(meta: &DeltaMeta) -> Result<String> {
    let cfg = RunConfig::from_value(meta.config.clone())?;
    let paths: Vec<PathBuf> = meta.surrogates.iter().map(|s| s.path.clone()).collect();
    let (models, refs) = load_surrogates::<F>(&paths)?;
    for (r, m) in refs.iter().zip(&meta.surrogates) {
        if r.params_hash != m.params_hash {
            return Err(Error::Verify(format!("surrogate {} changed since crafting", r.path.display())));
        }
    }
    let (train_set, _) = cfg.load_splits::<F>()?;
    let subset = cfg.crafting_subset(&train_set)?;
    if subset.fingerprint_hex() != meta.dataset_fp {
        return Err(Error::Verify("crafting data fingerprint differs".into()));
    }
    let out = craft(&meta.attack, &models, &subset)?;
    Ok(sha256_hex(&out.delta.to_bytes()))
}

/// Verifies a checkpoint or δ artifact against its sidecar.
pub fn verify(path: &Path, recompute: bool) -> Result<()> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let actual = sha256_hex(&bytes);
    let side = sidecar_path(path);
    let side_bytes = fs::read(&side).map_err(|_| Error::MissingArtifact(side.clone()))?;
    let doc: Value = serde_json::from_slice(&side_bytes)?;
    let is_delta = doc.get("kind").and_then(Value::as_str) == Some("delta");

    let (recorded, dtype) = if is_delta {
        let m: DeltaMeta = serde_json::from_value(doc.clone())?;
        (m.content_hash.clone(), m.dtype)
    } else {
        let m: CheckpointMeta = serde_json::from_value(doc.clone())?;
        (m.params_hash.clone(), m.dtype)
    };
    if recorded != actual {
        return Err(Error::Verify(format!(
            "{}: content hash {actual} does not match recorded {recorded}",
            path.display()
        )));
    }
    println!("hash ok {actual}");
    if !recompute {
        return Ok(());
    }
    let again = match (is_delta, dtype) {
        (true, DType::F32) => recompute_delta::<f32>(&serde_json::from_value(doc)?)?,
        (true, DType::F64) => recompute_delta::<f64>(&serde_json::from_value(doc)?)?,
        (false, DType::F32) => recompute_checkpoint::<f32>(&serde_json::from_value(doc)?)?,
        (false, DType::F64) => recompute_checkpoint::<f64>(&serde_json::from_value(doc)?)?,
    };
    if again != actual {
        return Err(Error::Verify(format!(
            "{}: recomputed hash {again} differs from {actual}",
            path.display()
        )));
    }
    println!("recompute ok");
    Ok(())
}

/// Seeds used by a run, for logging.
pub fn seed_table(seed: u64) -> Vec<(&'static str, u64)> {
    ["train", "init-delta", "shuffle", "subset"]
        .into_iter()
        .map(|n| (n, sub_seed(seed, n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::config("k", "m")), 2);
        assert_eq!(exit_code(&Error::Divergence { epoch: 1, loss: f64::NAN }), 3);
        let numeric = Error::Craft {
            epoch: 1,
            batch: 0,
            source: Box::new(Error::NonFinite("loss".into())),
        };
        assert_eq!(exit_code(&numeric), 4);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 5);
        assert_eq!(exit_code(&Error::Verify("x".into())), 1);
    }

    #[test]
    fn latest_pointer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tree = OutTree::new(dir.path());
        assert!(matches!(tree.latest(DELTAS), Err(Error::MissingArtifact(_))));
        let f = tree.dir(DELTAS).unwrap().join("a.uapt");
        tree.set_latest(DELTAS, &f).unwrap();
        assert_eq!(tree.latest(DELTAS).unwrap(), f);
    }

    #[test]
    fn cli_parses_globals_after_subcommand() {
        let cli = Cli::try_parse_from(["uapforge", "craft", "--variant", "spgd", "--set", "attack.epochs=2"]).unwrap();
        let o = cli.overrides().unwrap();
        assert!(o.contains(&("attack.variant".into(), "\"spgd\"".into())));
        assert!(o.contains(&("attack.epochs".into(), "2".into())));
    }
}
