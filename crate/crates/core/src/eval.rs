//! Fooling ratio, transfer matrices and report serialization.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict, ModelState};
use crate::real::Real;
use crate::tensor::Tensor;

/// Samples per evaluation work unit. Fixed so counts never depend on thread count.
pub const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingReport {
    pub model_id: String,
    pub dataset_fp: String,
    pub delta_hash: String,
    pub n_evaluated: usize,
    pub n_changed: usize,
    pub fooling_ratio: f64,
    pub delta_linf: f64,
    /// Present only when the dataset carries labels.
    pub clean_accuracy: Option<f64>,
    pub perturbed_accuracy: Option<f64>,
    /// Samples that were classified correctly before and wrongly after.
    pub n_correct_to_wrong: Option<usize>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    changed: usize,
    clean_correct: usize,
    pert_correct: usize,
    flipped: usize,
}

impl Counts {
    fn merge(self, o: Counts) -> Counts {
        Counts {
            changed: self.changed + o.changed,
            clean_correct: self.clean_correct + o.clean_correct,
            pert_correct: self.pert_correct + o.pert_correct,
            flipped: self.flipped + o.flipped,
        }
    }
}

/// `clamp(x + δ, 0, 1)` for every sample of `x`.
pub fn apply_perturbation<F: Real>(x: &Tensor<F>, delta: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape().len() < 2 || x.shape()[1..] != *delta.shape() {
        return Err(Error::Shape(format!(
            "perturbation {:?} does not fit batch {:?}",
            delta.shape(),
            x.shape()
        )));
    }
    let d = delta.data();
    let data = x
        .data()
        .chunks_exact(d.len())
        .flat_map(|row| row.iter().zip(d).map(|(&a, &b)| (a + b).max(F::zero()).min(F::one())))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn chunk_counts<F: Real>(model: &ModelState<F>, dataset: &Dataset<F>, delta: &Tensor<F>, idx: &[usize]) -> Result<Counts> {
    let x = dataset.images().gather_outer(idx)?;
    let clean = predict(model, &x)?;
    let pert = predict(model, &apply_perturbation(&x, delta)?)?;
    let mut c = Counts::default();
    for (k, (&a, &b)) in clean.iter().zip(&pert).enumerate() {
        c.changed += usize::from(a != b);
        if let Some(labels) = dataset.labels() {
            let y = labels[idx[k]];
            c.clean_correct += usize::from(a == y);
            c.pert_correct += usize::from(b == y);
            c.flipped += usize::from(a == y && b != y);
        }
    }
    Ok(c)
}

/// Fraction of samples whose predicted class changes under `delta` (serial).
pub fn fooling_ratio<F: Real>(model: &ModelState<F>, dataset: &Dataset<F>, delta: &Tensor<F>) -> Result<FoolingReport> {
    fooling_ratio_parallel(model, dataset, delta, 1)
}

/// [`fooling_ratio`] spread over `width` threads. Counts are identical for every width.
pub fn fooling_ratio_parallel<F: Real>(
    model: &ModelState<F>,
    dataset: &Dataset<F>,
    delta: &Tensor<F>,
    width: usize,
) -> Result<FoolingReport> {
    if delta.shape() != model.input_shape() || dataset.sample_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "delta {:?}, samples {:?} and model input {:?} must agree",
            delta.shape(),
            dataset.sample_shape(),
            model.input_shape()
        )));
    }
    let n = dataset.len();
    let indices: Vec<usize> = (0..n).collect();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_CHUNK).collect();
    let counts = if width <= 1 {
        chunks
            .iter()
            .map(|c| chunk_counts(model, dataset, delta, c))
            .try_fold(Counts::default(), |acc, c| c.map(|c| acc.merge(c)))?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(width)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let per_chunk: Vec<Result<Counts>> =
            pool.install(|| chunks.par_iter().map(|c| chunk_counts(model, dataset, delta, c)).collect());
        per_chunk
            .into_iter()
            .try_fold(Counts::default(), |acc, c| c.map(|c| acc.merge(c)))?
    };
    let labeled = dataset.labels().is_some();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(FoolingReport {
        model_id: model.model_id(),
        dataset_fp: dataset.fingerprint_hex(),
        delta_hash: delta.content_hash(),
        n_evaluated: n,
        n_changed: counts.changed,
        fooling_ratio: frac(counts.changed),
        delta_linf: delta.norm_linf(),
        clean_accuracy: labeled.then(|| frac(counts.clean_correct)),
        perturbed_accuracy: labeled.then(|| frac(counts.pert_correct)),
        n_correct_to_wrong: labeled.then_some(counts.flipped),
    })
}

/// A perturbation tagged with the surrogate it was crafted on.
#[derive(Debug, Clone)]
pub struct TaggedDelta<F> {
    pub surrogate: String,
    pub delta: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub surrogates: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[i][j]`: δ of surrogate `i` against target `j`.
    pub cells: Vec<Vec<FoolingReport>>,
}

impl TransferMatrix {
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        self.cells[i][j].fooling_ratio
    }

    pub fn row_averages(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|c| c.fooling_ratio).sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }
}

/// Evaluates every δ against every target model.
pub fn transfer_matrix<F: Real>(
    targets: &[(String, ModelState<F>)],
    deltas: &[TaggedDelta<F>],
    dataset: &Dataset<F>,
    width: usize,
) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(deltas.len());
    for d in deltas {
        let mut row = Vec::with_capacity(targets.len());
        for (_, m) in targets {
            row.push(fooling_ratio_parallel(m, dataset, &d.delta, width)?);
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        surrogates: deltas.iter().map(|d| d.surrogate.clone()).collect(),
        targets: targets.iter().map(|(id, _)| id.clone()).collect(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config("output.formats", format!("unknown format `{other}`"))),
        }
    }
}

/// Rounds to the fixed 4 report decimals.
pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// A transfer matrix plus the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub matrix: TransferMatrix,
    pub config: Value,
}

fn rounded(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => json!(round4(n.as_f64().unwrap_or(f64::NAN))),
        Value::Array(a) => Value::Array(a.into_iter().map(rounded).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, rounded(v))).collect()),
        other => other,
    }
}

impl EvalReport {
    /// JSON form: keys sorted, floats rounded to 4 decimals.
    pub fn to_json(&self) -> Result<Value> {
        let m = &self.matrix;
        let mut doc = BTreeMap::new();
        doc.insert("config", self.config.clone());
        doc.insert("surrogates", json!(m.surrogates));
        doc.insert("targets", json!(m.targets));
        doc.insert("cells", serde_json::to_value(&m.cells)?);
        doc.insert("row_averages", json!(m.row_averages()));
        Ok(rounded(serde_json::to_value(doc)?))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["surrogate", "target", "fooling_ratio", "n", "dataset_fp", "delta_hash"])?;
        for (i, row) in self.matrix.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                w.write_record([
                    self.matrix.surrogates[i].as_str(),
                    self.matrix.targets[j].as_str(),
                    &format!("{:.4}", c.fooling_ratio),
                    &c.n_evaluated.to_string(),
                    &c.dataset_fp,
                    &c.delta_hash,
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_bytes(&self, format: ReportFormat) -> Result<Vec<u8>> {
        match format {
            ReportFormat::Json => {
                let mut out = serde_json::to_vec_pretty(&self.to_json()?)?;
                out.push(b'\n');
                Ok(out)
            }
            ReportFormat::Csv => self.to_csv(),
        }
    }
}

pub fn report_write(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    std::fs::write(path, report.to_bytes(format)?)?;
    Ok(())
}
