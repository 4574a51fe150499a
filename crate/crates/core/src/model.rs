//! Layered classifiers over a flat parameter vector: construction, forward and
//! backward passes, ERM training, ensembles and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Reduction};
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::tensor::{fnv1a64, sha256_hex, AnyTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    Maxpool2,
    Flatten,
    Normalize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

impl LayerSpec {
    /// Convolution with "same" zero padding for odd kernels.
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding: kernel / 2,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    /// (weight count, bias count)
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Err(Error::Shape(format!("{self:?} on input {input:?}: {why}")));
        match self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [d] if d == inputs => Ok(vec![*outputs]),
                _ => bad("dense expects a flat input of matching width"),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => match input {
                [c, h, w] if c == in_channels => {
                    if *kernel == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return bad("kernel does not fit");
                    }
                    Ok(vec![
                        *out_channels,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    ])
                }
                _ => bad("conv2d expects [channels, height, width]"),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => bad("maxpool2 expects [channels, height>=2, width>=2]"),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Normalize { mean, std } => {
                if mean.len() != input[0] || std.len() != mean.len() {
                    return bad("one mean/std pair per channel required");
                }
                if std.iter().any(|&s| !(s > 0.0)) {
                    return bad("std must be > 0");
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Checks that layer shapes compose and end in `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Shape("a classifier needs at least 2 classes".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [self.num_classes] {
            return Err(Error::Shape(format!(
                "network ends in {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.param_counts();
                w + b
            })
            .sum()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            name: "linear".into(),
            input_shape: vec![input_dim],
            num_classes,
            layers: vec![LayerSpec::dense(input_dim, num_classes)],
        }
    }

    pub fn mlp(input_shape: &[usize], hidden: usize, num_classes: usize) -> Self {
        let d: usize = input_shape.iter().product();
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(LayerSpec::Flatten);
        }
        layers.extend([
            LayerSpec::dense(d, hidden),
            LayerSpec::Relu,
            LayerSpec::dense(hidden, num_classes),
        ]);
        ModelSpec {
            name: "mlp".into(),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
        }
    }

    /// Two conv/relu/pool stages followed by two dense layers, with input
    /// normalization folded into the network.
    pub fn cnn(name: &str, input_shape: &[usize], widths: [usize; 3], num_classes: usize) -> Self {
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let [c1, c2, hidden] = widths;
        ModelSpec {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers: vec![
                LayerSpec::Normalize {
                    mean: vec![0.5; c],
                    std: vec![0.5; c],
                },
                LayerSpec::conv2d(c, c1, 3),
                LayerSpec::Relu,
                LayerSpec::Maxpool2,
                LayerSpec::conv2d(c1, c2, 3),
                LayerSpec::Relu,
                LayerSpec::Maxpool2,
                LayerSpec::Flatten,
                LayerSpec::dense(c2 * (h / 4) * (w / 4), hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, num_classes),
            ],
        }
    }

    /// Built-in architectures addressable by name from config files.
    pub fn named(name: &str, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let image = input_shape.len() == 3;
        let spec = match name {
            "linear" => ModelSpec::linear(input_shape.iter().product(), num_classes),
            "mlp" => ModelSpec::mlp(input_shape, 64, num_classes),
            "cnn-small" if image => ModelSpec::cnn(name, input_shape, [8, 16, 32], num_classes),
            "cnn-wide" if image => ModelSpec::cnn(name, input_shape, [12, 24, 48], num_classes),
            "cnn-tiny" if image => ModelSpec::cnn(name, input_shape, [4, 8, 16], num_classes),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown architecture `{name}` for input {input_shape:?}"
                )))
            }
        };
        let mut spec = spec;
        if input_shape.len() > 1 && name == "linear" {
            spec.input_shape = input_shape.to_vec();
            spec.layers.insert(0, LayerSpec::Flatten);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// A network specification together with its flat parameter vector θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    spec: ModelSpec,
    params: Tensor<F>,
}

impl<F: Real> ModelState<F> {
    pub fn from_params(spec: ModelSpec, params: Tensor<F>) -> Result<Self> {
        spec.validate()?;
        if params.rank() != 1 || params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector {:?} does not match spec `{}` ({} parameters)",
                params.shape(),
                spec.name,
                spec.param_count()
            )));
        }
        params.check_finite("model parameters")?;
        Ok(ModelState { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Tensor<F> {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Same architecture, replacement parameters.
    pub fn with_params(&self, params: Tensor<F>) -> Result<Self> {
        if params.shape() != self.params.shape() {
            return Err(Error::Shape("replacement parameters differ in length".into()));
        }
        params.check_finite("model parameters")?;
        Ok(ModelState {
            spec: self.spec.clone(),
            params,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    /// FNV-1a over the spec JSON followed by the serialized parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = serde_json::to_vec(&self.spec).expect("spec serializes");
        bytes.extend_from_slice(&self.params.to_bytes());
        fnv1a64(&bytes)
    }

    pub fn model_id(&self) -> String {
        format!("{}-{:016x}", self.spec.name, self.fingerprint())
    }

    fn check_batch(&self, x: &Tensor<F>) -> Result<usize> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(x.shape()[0])
    }

    /// Appends the network to `graph` after node `x`; returns the logits node
    /// and the parameter leaves in layer order (weight, bias) with their offsets.
    pub fn build_forward(
        &self,
        graph: &mut Graph<F>,
        x: NodeId,
        track_params: bool,
    ) -> Result<(NodeId, Vec<(NodeId, usize)>)> {
        let mut h = x;
        let mut offset = 0;
        let mut leaves = Vec::new();
        let theta = self.params.data();
        let mut param = |graph: &mut Graph<F>, shape: Vec<usize>, leaves: &mut Vec<(NodeId, usize)>| {
            let n: usize = shape.iter().product();
            let t = Tensor::from_parts(shape, theta[offset..offset + n].to_vec());
            let id = graph.leaf(t, track_params);
            leaves.push((id, offset));
            offset += n;
            id
        };
        for layer in &self.spec.layers {
            h = match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let w = param(graph, vec![*outputs, *inputs], &mut leaves);
                    let b = param(graph, vec![*outputs], &mut leaves);
                    let z = graph.matmul(h, w)?;
                    graph.bias_add(z, b)?
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let w = param(
                        graph,
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        &mut leaves,
                    );
                    let b = param(graph, vec![*out_channels], &mut leaves);
                    let z = graph.conv2d(h, w, *padding)?;
                    graph.bias_add(z, b)?
                }
                LayerSpec::Relu => graph.relu(h)?,
                LayerSpec::Maxpool2 => graph.max_pool2(h)?,
                LayerSpec::Flatten => graph.flatten(h)?,
                LayerSpec::Normalize { mean, std } => {
                    let mean: Vec<F> = mean.iter().map(|&v| F::of(v)).collect();
                    let std: Vec<F> = std.iter().map(|&v| F::of(v)).collect();
                    graph.normalize(h, &mean, &std)?
                }
            };
        }
        Ok((h, leaves))
    }
}

/// Seeded initialization: every weight and bias of a layer is drawn from
/// `U(-1/√fan_in, 1/√fan_in)`.
pub fn build_model<F: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelState<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.param_count());
    for layer in &spec.layers {
        let (w, b) = layer.param_counts();
        if w + b == 0 {
            continue;
        }
        let bound = 1.0 / (layer.fan_in() as f64).sqrt();
        params.extend((0..w + b).map(|_| F::of(rng.random_range(-bound..bound))));
    }
    ModelState::from_params(spec.clone(), Tensor::vector(params))
}

/// Which quantity a gradient is taken against.
#[derive(Debug, Clone, Copy)]
pub enum Wrt<'a, F> {
    Parameters,
    Input,
    /// A perturbation shared by every sample of the batch; the loss is evaluated at `x + δ`.
    Perturbation(&'a Tensor<F>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrtKind {
    Parameters,
    Input,
    Perturbation,
}

impl<F> Wrt<'_, F> {
    pub fn kind(&self) -> WrtKind {
        match self {
            Wrt::Parameters => WrtKind::Parameters,
            Wrt::Input => WrtKind::Input,
            Wrt::Perturbation(_) => WrtKind::Perturbation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradResult<F> {
    pub wrt: WrtKind,
    pub loss: F,
    pub grad: Tensor<F>,
}

fn check_labels<F: Real>(model: &ModelState<F>, batch: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{batch} samples but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of the batch.
pub fn forward_cross_entropy<F: Real>(model: &ModelState<F>, x: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let b = model.check_batch(x)?;
    check_labels(model, b, labels)?;
    x.check_finite("model input")?;
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let (z, _) = model.build_forward(&mut g, xi, false)?;
    let l = g.softmax_cross_entropy(z, labels, Reduction::Mean)?;
    Ok(g.value(l).data()[0])
}

/// Gradient of the mean batch loss.
pub fn backward<F: Real>(model: &ModelState<F>, x: &Tensor<F>, labels: &[usize], wrt: Wrt<'_, F>) -> Result<GradResult<F>> {
    backward_with(model, x, labels, wrt, Reduction::Mean)
}

/// Like [`backward`] with a choice of loss reduction. With `Reduction::Sum`
/// the input gradient of each sample is independent of the batch it sits in.
pub fn backward_with<F: Real>(
    model: &ModelState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    wrt: Wrt<'_, F>,
    reduction: Reduction,
) -> Result<GradResult<F>> {
    let b = model.check_batch(x)?;
    check_labels(model, b, labels)?;
    x.check_finite("model input")?;
    let mut g = Graph::new();
    let track_input = matches!(wrt, Wrt::Input);
    let xi = g.leaf(x.clone(), track_input);
    let (target, input) = match wrt {
        Wrt::Perturbation(delta) => {
            if delta.shape() != model.input_shape() {
                return Err(Error::Shape(format!(
                    "perturbation {:?} does not match model input {:?}",
                    delta.shape(),
                    model.input_shape()
                )));
            }
            delta.check_finite("perturbation")?;
            let d = g.leaf(delta.clone(), true);
            (Some(d), g.add_broadcast(xi, d)?)
        }
        _ => (None, xi),
    };
    let track_params = matches!(wrt, Wrt::Parameters);
    let (z, leaves) = model.build_forward(&mut g, input, track_params)?;
    let l = g.softmax_cross_entropy(z, labels, reduction)?;
    let loss = g.value(l).data()[0];
    let mut grads = g.backward(l)?;
    let grad = match wrt {
        Wrt::Parameters => {
            let mut flat = vec![F::zero(); model.params.len()];
            for (id, offset) in leaves {
                let t = grads.take(id).expect("tracked parameter has a gradient");
                flat[offset..offset + t.len()].copy_from_slice(t.data());
            }
            Tensor::vector(flat)
        }
        Wrt::Input => grads.take(xi).expect("tracked input has a gradient"),
        Wrt::Perturbation(_) => grads
            .take(target.expect("perturbation leaf"))
            .expect("tracked perturbation has a gradient"),
    };
    Ok(GradResult {
        wrt: wrt.kind(),
        loss,
        grad,
    })
}

pub fn logits<F: Real>(model: &ModelState<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    model.check_batch(x)?;
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let (z, _) = model.build_forward(&mut g, xi, false)?;
    Ok(g.value(z).clone())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const PREDICT_CHUNK: usize = 256;

/// Per-sample argmax of the logits.
pub fn predict<F: Real>(model: &ModelState<F>, x: &Tensor<F>) -> Result<Vec<usize>> {
    let n = model.check_batch(x)?;
    let k = model.num_classes();
    let mut out = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let xb = x.gather_outer(chunk)?;
        let z = logits(model, &xb)?;
        out.extend(z.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

/// Euclidean distance between the parameter vectors of two same-spec models.
pub fn param_distance<F: Real>(a: &ModelState<F>, b: &ModelState<F>) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::InvalidArgument(format!(
            "param_distance between different specs `{}` and `{}`",
            a.spec.name, b.spec.name
        )));
    }
    Ok(a.params
        .data()
        .iter()
        .zip(b.params.data())
        .map(|(&p, &q)| {
            let d = p.as_f64() - q.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn check_ensemble<F: Real>(models: &[&ModelState<F>]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty model ensemble".into()))?;
    for m in &models[1..] {
        if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
            return Err(Error::Shape(format!(
                "ensemble members `{}` and `{}` disagree on input/classes",
                first.spec.name, m.spec.name
            )));
        }
    }
    Ok(())
}

/// Arithmetic mean of the member cross-entropy losses.
pub fn ensemble_loss<F: Real>(models: &[&ModelState<F>], x: &Tensor<F>, labels: &[usize]) -> Result<F> {
    check_ensemble(models)?;
    let mut total = F::zero();
    for m in models {
        total = total + forward_cross_entropy(m, x, labels)?;
    }
    Ok(total / F::of(models.len() as f64))
}

/// Gradient of [`ensemble_loss`] (or its sum-reduced variant) with respect to
/// the input or a shared perturbation.
pub fn ensemble_backward<F: Real>(
    models: &[&ModelState<F>],
    x: &Tensor<F>,
    labels: &[usize],
    wrt: Wrt<'_, F>,
    reduction: Reduction,
) -> Result<GradResult<F>> {
    check_ensemble(models)?;
    if matches!(wrt, Wrt::Parameters) {
        return Err(Error::InvalidArgument(
            "unsupported wrt target: ensemble parameters are not a single vector".into(),
        ));
    }
    if models.len() == 1 {
        return backward_with(models[0], x, labels, wrt, reduction);
    }
    let mut loss = F::zero();
    let mut acc: Option<Tensor<F>> = None;
    for m in models {
        let r = backward_with(m, x, labels, wrt, reduction)?;
        loss = loss + r.loss;
        acc = Some(match acc {
            None => r.grad,
            Some(a) => a.add(&r.grad)?,
        });
    }
    let k = F::of(models.len() as f64);
    let grad = acc.expect("non-empty ensemble").map(|v| v / k);
    Ok(GradResult {
        wrt: wrt.kind(),
        loss: loss / k,
        grad,
    })
}

/// Labels agreed by an ensemble: argmax of the summed member logits.
pub fn ensemble_predict<F: Real>(models: &[&ModelState<F>], x: &Tensor<F>) -> Result<Vec<usize>> {
    check_ensemble(models)?;
    if models.len() == 1 {
        return predict(models[0], x);
    }
    let n = models[0].check_batch(x)?;
    let k = models[0].num_classes();
    let mut out = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let xb = x.gather_outer(chunk)?;
        let mut sum: Option<Tensor<F>> = None;
        for m in models {
            let z = logits(m, &xb)?;
            sum = Some(match sum {
                None => z,
                Some(s) => s.add(&z)?,
            });
        }
        out.extend(sum.expect("non-empty").data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            batch: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch gradient descent (heavy-ball momentum) on the mean cross-entropy.
/// Epoch `t` shuffles with seed `config.seed ^ t`.
pub fn train_erm<F: Real>(
    model: &ModelState<F>,
    dataset: &Dataset<F>,
    config: &TrainConfig,
) -> Result<(ModelState<F>, TrainHistory)> {
    if !(config.lr > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be > 0".into()));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training needs a labeled dataset".into()))?;
    check_labels(model, dataset.len(), labels)?;
    model.check_batch(dataset.images())?;

    let lr = F::of(config.lr);
    let mu = F::of(config.momentum);
    let mut theta = model.params.clone();
    let mut velocity = Tensor::<F>::zeros(theta.shape());
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let mut current = model.with_params(theta.clone())?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in minibatches(dataset, config.batch, config.seed ^ epoch as u64)? {
            let r = match backward(&current, &batch.images, &batch.labels, Wrt::Parameters) {
                Err(e) if e.is_numerical() => {
                    return Err(Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            };
            let loss = r.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            let preds = predict(&current, &batch.images)?;
            correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            for ((v, t), &g) in velocity
                .data_mut()
                .iter_mut()
                .zip(theta.data_mut().iter_mut())
                .zip(r.grad.data())
            {
                *v = mu * *v + g;
                *t = *t - lr * *v;
            }
            if theta.check_finite("parameters").is_err() {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
            current = model.with_params(theta.clone())?;
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok((model.with_params(theta)?, history))
}

pub fn accuracy<F: Real>(model: &ModelState<F>, dataset: &Dataset<F>) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::InvalidArgument("accuracy needs a labeled dataset".into()))?;
    let preds = predict(model, dataset.images())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// JSON sidecar written next to a checkpoint's parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub dtype: DType,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub dataset_fingerprint: Option<String>,
    pub history: Option<TrainHistory>,
    /// SHA-256 of the parameter tensor file.
    pub params_hash: String,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (parameter tensor) and its `.json` sidecar; fills in `params_hash`.
pub fn save_checkpoint<F: Real>(model: &ModelState<F>, path: impl AsRef<Path>, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = model.params.to_bytes();
    meta.spec = model.spec.clone();
    meta.dtype = F::DTYPE;
    meta.params_hash = sha256_hex(&bytes);
    fs::write(path, &bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Loads a checkpoint, converting parameters to `F` if it was stored in the other precision.
pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<(ModelState<F>, CheckpointMeta)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let meta_bytes = fs::read(&side).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(side.clone()),
        _ => Error::Io(e),
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    let params = AnyTensor::load(path)?.into_real::<F>();
    let model = ModelState::from_params(meta.spec.clone(), params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn parameter_counting() {
        let s = ModelSpec::linear(4, 3);
        assert_eq!(s.param_count(), 15);
        assert_eq!(LayerSpec::conv2d(1, 8, 3).param_counts(), (72, 8));
    }

    #[test]
    fn rejects_non_composing_specs() {
        let mut s = ModelSpec::linear(4, 3);
        s.layers.push(LayerSpec::Maxpool2);
        assert!(build_model::<f64>(&s, 0).is_err());
        let s = ModelSpec {
            name: "bad".into(),
            input_shape: vec![1, 4, 4],
            num_classes: 2,
            layers: vec![LayerSpec::dense(16, 2)],
        };
        assert!(s.validate().is_err());
        let s = ModelSpec {
            name: "bad-std".into(),
            input_shape: vec![2],
            num_classes: 2,
            layers: vec![
                LayerSpec::Normalize { mean: vec![0.0], std: vec![0.0] },
                LayerSpec::dense(2, 2),
            ],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = ModelSpec::cnn("c", &[1, 8, 8], [2, 3, 4], 3);
        let a = build_model::<f32>(&s, 5).unwrap();
        let b = build_model::<f32>(&s, 5).unwrap();
        assert_eq!(a.params().to_bytes(), b.params().to_bytes());
        assert_ne!(a.params(), build_model::<f32>(&s, 6).unwrap().params());
        // first conv has fan-in 9
        assert!(a.params().data()[..20].iter().all(|v| v.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let row = [0.2f64, -1.0, 0.7, 0.7];
        let shifted: Vec<f64> = row.iter().map(|v| v + 3.0).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
    }

    #[test]
    fn distance_basics() {
        let s = ModelSpec::linear(2, 2);
        let a = build_model::<f64>(&s, 1).unwrap();
        assert_eq!(param_distance(&a, &a).unwrap(), 0.0);
        let mut p = a.params().clone();
        p.data_mut()[3] += 3.0;
        let b = a.with_params(p).unwrap();
        assert!((param_distance(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        let c = build_model::<f64>(&ModelSpec::linear(3, 2), 1).unwrap();
        assert!(param_distance(&a, &c).is_err());
    }

    #[test]
    fn zero_epochs_is_identity_and_training_is_deterministic() {
        let d = synth_blobs::<f64>(2, 40, &[3], 0.05, 3).unwrap();
        let m = build_model::<f64>(&ModelSpec::mlp(&[3], 8, 2), 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (same, hist) = train_erm(&m, &d, &cfg).unwrap();
        assert_eq!(same, m);
        assert!(hist.epochs.is_empty());
        let cfg = TrainConfig { epochs: 3, batch: 8, ..Default::default() };
        let a = train_erm(&m, &d, &cfg).unwrap().0;
        let b = train_erm(&m, &d, &cfg).unwrap().0;
        assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let d = synth_blobs::<f32>(2, 40, &[3], 0.05, 3).unwrap();
        let m = build_model::<f32>(&ModelSpec::mlp(&[3], 8, 2), 1).unwrap();
        let cfg = TrainConfig { epochs: 50, lr: 1e30, batch: 8, ..Default::default() };
        match train_erm(&m, &d, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model::<f32>(&ModelSpec::mlp(&[3], 4, 2), 1).unwrap();
        let path = dir.path().join("m.uapt");
        let meta = CheckpointMeta {
            spec: m.spec().clone(),
            dtype: DType::F32,
            init_seed: 1,
            train: None,
            dataset_fingerprint: None,
            history: None,
            params_hash: String::new(),
            config: None,
        };
        let written = save_checkpoint(&m, &path, meta).unwrap();
        let (back, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.params_hash, written.params_hash);
        let (wide, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }
}
