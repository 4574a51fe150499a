//! Eager reverse-mode differentiation over a fixed set of classifier primitives.
//!
//! A [`Graph`] records every primitive application in the order it was
//! built, which is also a topological order. Forward values are computed on
//! insertion and cached on the node; [`Graph::backward`] walks the nodes once
//! in reverse. All reductions run in a fixed index order so that identical
//! inputs give bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// How the fused softmax-cross-entropy reduces per-sample losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    AddBroadcast {
        x: NodeId,
        delta: NodeId,
    },
    MatMul {
        x: NodeId,
        w: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        pad: usize,
    },
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    Relu {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Flatten {
        x: NodeId,
    },
    Normalize {
        x: NodeId,
        std: Vec<F>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<F>,
        reduction: Reduction,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar node with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("unknown node {id}")))
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// `x + delta` with `delta` broadcast over the leading (batch) axis.
    pub fn add_broadcast(&mut self, x: NodeId, delta: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(delta)?;
        let (xv, dv) = (&self.nodes[x].value, &self.nodes[delta].value);
        if xv.shape()[1..] != *dv.shape() {
            return Err(Error::Shape(format!(
                "broadcast add: {:?} vs per-sample {:?}",
                xv.shape(),
                dv.shape()
            )));
        }
        let inner = dv.len();
        let d = dv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + d[i % inner])
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(delta);
        Ok(self.push(Op::AddBroadcast { x, delta }, value, rg))
    }

    /// `x[b, in] · w[out, in]ᵀ`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(w)?;
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "matmul: input {:?}, weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (b, n_in, n_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![F::zero(); b * n_out];
        for s in 0..b {
            let row = &xd[s * n_in..(s + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                out[s * n_out + o] = dot(row, wr);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::from_parts(vec![b, n_out], out);
        Ok(self.push(Op::MatMul { x, w }, value, rg))
    }

    /// Stride-1 convolution with `pad` zeros on each spatial border.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(w)?;
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), pad)?;
        let mut out = vec![F::zero(); geo.b * geo.co * geo.ho * geo.wo];
        geo.for_each_tap(|xi, wi, oi, len| {
            let wgt = wv.data()[wi];
            let src = &xv.data()[xi..xi + len];
            for (o, &s) in out[oi..oi + len].iter_mut().zip(src) {
                *o = *o + wgt * s;
            }
        });
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::from_parts(vec![geo.b, geo.co, geo.ho, geo.wo], out);
        Ok(self.push(Op::Conv2d { x, w, pad }, value, rg))
    }

    /// Adds `bias[c]` along axis 1 (features for rank 2, channels for rank 4).
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(bias)?;
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[bias].value);
        if xv.rank() < 2 || bv.rank() != 1 || xv.shape()[1] != bv.len() {
            return Err(Error::Shape(format!(
                "bias add: input {:?}, bias {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let c = bv.len();
        let spatial: usize = xv.shape()[2..].iter().product();
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / spatial) % c])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(Op::BiasAdd { x, bias }, value, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let value = self.nodes[x]
            .value
            .map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        Ok(self.push(Op::Relu { x }, value, rg))
    }

    /// 2×2 max-pool with stride 2; odd trailing rows/columns are dropped.
    /// Ties go to the first element in row-major window order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let xv = &self.nodes[x].value;
        if xv.rank() != 4 || xv.shape()[2] < 2 || xv.shape()[3] < 2 {
            return Err(Error::Shape(format!("max_pool2: input {:?}", xv.shape())));
        }
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value, rg))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let xv = &self.nodes[x].value;
        let b = xv.shape()[0];
        let inner = xv.len() / b;
        let value = xv.clone().reshape(&[b, inner])?;
        let rg = self.rg(x);
        Ok(self.push(Op::Flatten { x }, value, rg))
    }

    /// Per-channel `(x - mean[c]) / std[c]` along axis 1.
    pub fn normalize(&mut self, x: NodeId, mean: &[F], std: &[F]) -> Result<NodeId> {
        self.check_id(x)?;
        let xv = &self.nodes[x].value;
        if xv.rank() < 2 || xv.shape()[1] != mean.len() || mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "normalize: input {:?} with {} channel constants",
                xv.shape(),
                mean.len()
            )));
        }
        if std.iter().any(|&s| !(s > F::zero())) {
            return Err(Error::InvalidArgument("normalize std must be > 0".into()));
        }
        let c = mean.len();
        let spatial: usize = xv.shape()[2..].iter().product();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                (v - mean[ch]) / std[ch]
            })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(
            Op::Normalize { x, std: std.to_vec() },
            value,
            rg,
        ))
    }

    /// Fused, max-shifted softmax cross-entropy. Produces a one-element tensor.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        self.check_id(logits)?;
        let lv = &self.nodes[logits].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross-entropy: logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![F::zero(); b * k];
        let mut total = F::zero();
        for (s, &y) in labels.iter().enumerate() {
            let row = &lv.data()[s * k..(s + 1) * k];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (p, &v) in probs[s * k..(s + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z = z + *p;
            }
            for p in &mut probs[s * k..(s + 1) * k] {
                *p = *p / z;
            }
            total = total + (z.ln() + (m - row[y]));
        }
        let loss = match reduction {
            Reduction::Mean => total / F::of(b as f64),
            Reduction::Sum => total,
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<F>> {
        self.check_id(root)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::filled(self.nodes[root].value.shape(), F::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::AddBroadcast { x, delta } => {
                    if self.rg(*delta) {
                        let inner = self.nodes[*delta].value.len();
                        let mut acc = vec![F::zero(); inner];
                        for chunk in g.data().chunks_exact(inner) {
                            for (a, &v) in acc.iter_mut().zip(chunk) {
                                *a = *a + v;
                            }
                        }
                        let shape = self.nodes[*delta].value.shape().to_vec();
                        accumulate(&mut grads, *delta, Tensor::from_parts(shape, acc));
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MatMul { x, w } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (b, n_in, n_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    let gd = g.data();
                    if self.rg(*w) {
                        let mut dw = vec![F::zero(); n_out * n_in];
                        for s in 0..b {
                            let row = &xv.data()[s * n_in..(s + 1) * n_in];
                            for o in 0..n_out {
                                let go = gd[s * n_out + o];
                                for (d, &xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(row) {
                                    *d = *d + go * xi;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::from_parts(vec![n_out, n_in], dw));
                    }
                    if self.rg(*x) {
                        let mut dx = vec![F::zero(); b * n_in];
                        for s in 0..b {
                            let drow = &mut dx[s * n_in..(s + 1) * n_in];
                            for o in 0..n_out {
                                let go = gd[s * n_out + o];
                                let wr = &wv.data()[o * n_in..(o + 1) * n_in];
                                for (d, &wi) in drow.iter_mut().zip(wr) {
                                    *d = *d + go * wi;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts(vec![b, n_in], dx));
                    }
                }
                Op::Conv2d { x, w, pad } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let geo = ConvGeometry::new(xv.shape(), wv.shape(), *pad)?;
                    let gd = g.data();
                    if self.rg(*w) {
                        let mut dw = vec![F::zero(); wv.len()];
                        geo.for_each_tap(|xi, wi, oi, len| {
                            dw[wi] = dw[wi] + dot(&gd[oi..oi + len], &xv.data()[xi..xi + len]);
                        });
                        accumulate(
                            &mut grads,
                            *w,
                            Tensor::from_parts(wv.shape().to_vec(), dw),
                        );
                    }
                    if self.rg(*x) {
                        let mut dx = vec![F::zero(); xv.len()];
                        geo.for_each_tap(|xi, wi, oi, len| {
                            let wgt = wv.data()[wi];
                            for (d, &go) in dx[xi..xi + len].iter_mut().zip(&gd[oi..oi + len]) {
                                *d = *d + wgt * go;
                            }
                        });
                        accumulate(
                            &mut grads,
                            *x,
                            Tensor::from_parts(xv.shape().to_vec(), dx),
                        );
                    }
                }
                Op::BiasAdd { x, bias } => {
                    if self.rg(*bias) {
                        let xv = &self.nodes[*x].value;
                        let c = xv.shape()[1];
                        let spatial: usize = xv.shape()[2..].iter().product();
                        let mut db = vec![F::zero(); c];
                        for (i, &v) in g.data().iter().enumerate() {
                            let ch = (i / spatial) % c;
                            db[ch] = db[ch] + v;
                        }
                        accumulate(&mut grads, *bias, Tensor::from_parts(vec![c], db));
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let xv = &self.nodes[*x].value;
                        let dx = g.zip_map(xv, |go, v| if v > F::zero() { go } else { F::zero() })?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.rg(*x) {
                        let xv = &self.nodes[*x].value;
                        let mut dx = vec![F::zero(); xv.len()];
                        for (&src, &go) in argmax.iter().zip(g.data()) {
                            dx[src] = dx[src] + go;
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    }
                }
                Op::Flatten { x } => {
                    if self.rg(*x) {
                        let shape = self.nodes[*x].value.shape().to_vec();
                        accumulate(&mut grads, *x, g.reshape(&shape)?);
                    }
                }
                Op::Normalize { x, std } => {
                    if self.rg(*x) {
                        let c = std.len();
                        let xv = &self.nodes[*x].value;
                        let spatial: usize = xv.shape()[2..].iter().product();
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &go)| go / std[(i / spatial) % c])
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    if self.rg(*logits) {
                        let k = self.nodes[*logits].value.shape()[1];
                        let b = labels.len();
                        let scale = match reduction {
                            Reduction::Mean => g.data()[0] / F::of(b as f64),
                            Reduction::Sum => g.data()[0],
                        };
                        let mut dz = probs.clone();
                        for (s, &y) in labels.iter().enumerate() {
                            dz[s * k + y] = dz[s * k + y] - F::one();
                        }
                        for v in &mut dz {
                            *v = *v * scale;
                        }
                        accumulate(&mut grads, *logits, Tensor::from_parts(vec![b, k], dz));
                    }
                }
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.check_finite(&format!("gradient of node {id}"))?;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Index bookkeeping shared by the convolution forward and backward passes.
struct ConvGeometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        let (b, ci, h, wd) = (x[0], x[1], x[2], x[3]);
        let (co, k) = (w[0], w[2]);
        if w[3] != k {
            return Err(Error::Shape(format!("conv2d: non-square kernel {w:?}")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} larger than padded input {h}x{wd}"
            )));
        }
        Ok(ConvGeometry {
            b,
            ci,
            h,
            w: wd,
            co,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: wd + 2 * pad - k + 1,
        })
    }

    /// Calls `f(input_offset, weight_index, output_offset, run_length)` for
    /// every contiguous row segment where a kernel tap overlaps the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (k, pad) = (self.k, self.pad);
        for s in 0..self.b {
            for o in 0..self.co {
                let out_plane = (s * self.co + o) * self.ho * self.wo;
                for c in 0..self.ci {
                    let in_plane = (s * self.ci + c) * self.h * self.w;
                    for ky in 0..k {
                        let y0 = pad.saturating_sub(ky);
                        let y1 = self.ho.min((self.h + pad).saturating_sub(ky));
                        for kx in 0..k {
                            let x0 = pad.saturating_sub(kx);
                            let x1 = self.wo.min((self.w + pad).saturating_sub(kx));
                            if x0 >= x1 {
                                continue;
                            }
                            let wi = ((o * self.ci + c) * k + ky) * k + kx;
                            for y in y0..y1 {
                                let iy = y + ky - pad;
                                let xi = in_plane + iy * self.w + x0 + kx - pad;
                                let oi = out_plane + y * self.wo + x0;
                                f(xi, wi, oi, x1 - x0);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference estimate of the gradient of `loss_fn` at `x`.
pub fn finite_difference_gradient<F: Real>(
    mut loss_fn: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    h: F,
) -> Result<Tensor<F>> {
    if !(h > F::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss_fn(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = loss_fn(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite-difference probe {i}")));
        }
        out.push((up - down) / (h + h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let scale = a.norm_linf().max(b.norm_linf()).max(1e-12);
        a.sub(b).unwrap().norm_linf() / scale
    }

    #[test]
    fn fd_closed_forms() {
        let x = Tensor::vector(vec![3.0f64]);
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let x = Tensor::vector(vec![0.0, std::f64::consts::FRAC_PI_2]);
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v.sin()).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!(g.data()[1].abs() < 1e-8);

        let g = finite_difference_gradient(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_rejects_bad_step_and_nan() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(matches!(
            finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_symmetry_and_saturation() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::zeros(&[3, 10]), false);
        let l = g.softmax_cross_entropy(z, &[0, 4, 9], Reduction::Mean).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-15);

        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[3] = 50.0;
        let z = g.leaf(logits, false);
        let l = g.softmax_cross_entropy(z, &[3], Reduction::Mean).unwrap();
        assert!(g.value(l).data()[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.softmax_cross_entropy(z, &[0, 3], Reduction::Mean).is_err());
        assert!(g.softmax_cross_entropy(z, &[0], Reduction::Mean).is_err());
    }

    /// Loss of a primitive chain `ce(flatten(op(x)) · w)` so every primitive can
    /// be checked in isolation against finite differences.
    fn check_primitive(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        input_shape: &[usize],
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(input_shape, &mut rng);
        let mut probe = Graph::new();
        let p = probe.leaf(x0.clone(), false);
        let out = build(&mut probe, p);
        let out = probe.flatten(out).unwrap();
        let feat = probe.value(out).shape()[1];
        let head = random(&[3, feat], &mut rng);
        let labels: Vec<usize> = (0..input_shape[0]).map(|i| i % 3).collect();

        let loss = |x: &Tensor<f64>, track: bool| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone(), track);
            let y = build(&mut g, xi);
            let y = g.flatten(y).unwrap();
            let w = g.leaf(head.clone(), false);
            let z = g.matmul(y, w).unwrap();
            let l = g.softmax_cross_entropy(z, &labels, Reduction::Mean).unwrap();
            (g, xi, l)
        };
        let (g, xi, l) = loss(&x0, true);
        let analytic = g.backward(l).unwrap().take(xi).unwrap();
        let numeric = finite_difference_gradient(
            |x| {
                let (g, _, l) = loss(x, false);
                Ok(g.value(l).data()[0])
            },
            &x0,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "seed {seed}: rel err {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_primitive(|g, x| g.relu(x).unwrap(), &[2, 5], seed);
            check_primitive(|g, x| g.max_pool2(x).unwrap(), &[2, 2, 4, 4], seed);
            check_primitive(|g, x| g.flatten(x).unwrap(), &[2, 2, 3, 3], seed);
            check_primitive(
                |g, x| g.normalize(x, &[0.5, -0.1], &[0.25, 2.0]).unwrap(),
                &[2, 2, 3, 3],
                seed,
            );
            check_primitive(
                move |g, x| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                    let w = g.leaf(random(&[3, 2, 3, 3], &mut rng), false);
                    g.conv2d(x, w, 1).unwrap()
                },
                &[2, 2, 5, 5],
                seed,
            );
            check_primitive(
                move |g, x| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
                    let b = g.leaf(random(&[2], &mut rng), false);
                    g.bias_add(x, b).unwrap()
                },
                &[3, 2, 2, 2],
                seed,
            );
        }
    }

    #[test]
    fn weight_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let delta = random(&[2, 5, 5], &mut rng);
        let head = random(&[4, 3 * 5 * 5], &mut rng);
        let labels = [0, 1, 2, 3];
        let loss = |w: &Tensor<f64>, d: &Tensor<f64>, track_w: bool, track_d: bool| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone(), false);
            let di = g.leaf(d.clone(), track_d);
            let xd = g.add_broadcast(xi, di).unwrap();
            let wi = g.leaf(w.clone(), track_w);
            let c = g.conv2d(xd, wi, 1).unwrap();
            let f = g.flatten(c).unwrap();
            let hi = g.leaf(head.clone(), false);
            let z = g.matmul(f, hi).unwrap();
            let l = g.softmax_cross_entropy(z, &labels, Reduction::Mean).unwrap();
            (g, wi, di, l)
        };
        let (g, wi, di, l) = loss(&w, &delta, true, true);
        let mut grads = g.backward(l).unwrap();
        let gw = grads.take(wi).unwrap();
        let gd = grads.take(di).unwrap();
        let nw = finite_difference_gradient(
            |w| {
                let (g, _, _, l) = loss(w, &delta, false, false);
                Ok(g.value(l).data()[0])
            },
            &w,
            1e-5,
        )
        .unwrap();
        let nd = finite_difference_gradient(
            |d| {
                let (g, _, _, l) = loss(&w, d, false, false);
                Ok(g.value(l).data()[0])
            },
            &delta,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&gw, &nw) < 1e-6);
        assert!(max_rel_err(&gd, &nd) < 1e-6);
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[1, 2], 1.0), false);
        let w = g.leaf(Tensor::filled(&[2, 2], 0.5), true);
        let z = g.matmul(x, w).unwrap();
        let l = g.softmax_cross_entropy(z, &[1], Reduction::Mean).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().shape(), &[2, 2]);
        assert!(g.backward(z).is_err());
    }

    #[test]
    fn max_pool_ties_go_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[1, 1, 2, 2], 1.0), true);
        let p = g.max_pool2(x).unwrap();
        let f = g.flatten(p).unwrap();
        let w = g.leaf(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(), false);
        let z = g.matmul(f, w).unwrap();
        let l = g.softmax_cross_entropy(z, &[0], Reduction::Sum).unwrap();
        let gx = g.backward(l).unwrap().take(x).unwrap();
        assert!(gx.data()[0] != 0.0);
        assert!(gx.data()[1..].iter().all(|&v| v == 0.0));
    }
}
