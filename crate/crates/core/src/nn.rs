//! A small twice-differentiable feed-forward classifier.
//!
//! The architecture is read from the parameter layout: backbone layers are
//! `hiddenN.weight` / `hiddenN.bias` pairs applied in order with a smooth
//! activation, and every task owns an affine head on top of the last hidden
//! activation (or on the raw input when there are no hidden layers). Logits of
//! all heads are concatenated in task order, so a head's classes occupy a
//! contiguous global class range.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Matrix};
use crate::params::{EntryKind, LayoutEntry, ParamLayout, ParamVector};

/// Largest parameter count accepted by [`Network::exact_hessian`].
pub const HESSIAN_MAX_PARAMS: usize = 2_500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// tanh-approximated GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

/// Half-open range of global class indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub start: usize,
    pub end: usize,
}

impl ClassRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::validation(format!("empty class range [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, c: usize) -> bool {
        (self.start..self.end).contains(&c)
    }
}

/// Inputs (one row per sample) with global class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows != labels.len() {
            return Err(Error::validation(format!(
                "{} input rows but {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[&Batch]) -> Batch {
        let cols = parts.first().map_or(0, |b| b.inputs.cols);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in parts {
            assert_eq!(b.inputs.cols, cols);
            data.extend_from_slice(&b.inputs.data);
            labels.extend_from_slice(&b.labels);
        }
        Batch {
            inputs: Matrix::from_vec(labels.len(), cols, data),
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head_dims: Vec<usize>,
}

impl NetSpec {
    pub fn layout(&self) -> Result<ParamLayout> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.head_dims.contains(&0) {
            return Err(Error::validation("network dimensions must be at least 1"));
        }
        let mut entries = Vec::new();
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            entries.push(LayoutEntry::new(format!("hidden{i}.weight"), vec![h, prev], EntryKind::BackboneWeight));
            entries.push(LayoutEntry::new(format!("hidden{i}.bias"), vec![h], EntryKind::BackboneBias));
            prev = h;
        }
        for (t, &c) in self.head_dims.iter().enumerate() {
            entries.push(LayoutEntry::new(format!("head{}.weight", t + 1), vec![c, prev], EntryKind::HeadWeight(t + 1)));
            entries.push(LayoutEntry::new(format!("head{}.bias", t + 1), vec![c], EntryKind::HeadBias(t + 1)));
        }
        ParamLayout::new(entries)
    }

    /// Seeded initial weights: backbone weights `N(0, 1/fan_in)`, backbone
    /// biases `N(0, 0.1²)`, heads zero.
    pub fn init(&self, seed: u64) -> Result<(Network, ParamVector)> {
        let layout = Arc::new(self.layout()?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total_len()];
        for (i, e) in layout.entries().iter().enumerate() {
            let r = layout.range(i);
            match e.kind {
                EntryKind::BackboneWeight => {
                    let fan_in = e.matrix_dims().1 as f64;
                    let n = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("valid std");
                    values[r].iter_mut().for_each(|v| *v = n.sample(&mut rng));
                }
                EntryKind::BackboneBias => {
                    let n = Normal::new(0.0, 0.1).expect("valid std");
                    values[r].iter_mut().for_each(|v| *v = n.sample(&mut rng));
                }
                _ => {}
            }
        }
        Ok((
            Network::new(self.input_dim, self.activation),
            ParamVector::new(layout, values)?,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    w: usize,
    b: usize,
    classes: usize,
    class_start: usize,
}

/// Offsets of every layer, derived from a layout.
#[derive(Clone, Debug)]
pub struct Arch {
    layers: Vec<Layer>,
    heads: Vec<Head>,
    feat_dim: usize,
    input_dim: usize,
    total_len: usize,
}

impl Arch {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes).sum()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Global class range of head `h` (0-based head index).
    pub fn head_range(&self, h: usize) -> ClassRange {
        let hd = self.heads[h];
        ClassRange {
            start: hd.class_start,
            end: hd.class_start + hd.classes,
        }
    }

    /// Flat index ranges of head `h`'s weight and bias.
    pub fn head_param_ranges(&self, h: usize) -> [std::ops::Range<usize>; 2] {
        let hd = self.heads[h];
        [hd.w..hd.w + hd.classes * self.feat_dim, hd.b..hd.b + hd.classes]
    }
}

/// Per-sample forward cache: pre-activations and activations of every layer.
struct Trace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub activation: Activation,
}

impl Network {
    pub fn new(input_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            activation,
        }
    }

    pub fn arch(&self, layout: &ParamLayout) -> Result<Arch> {
        let entries = layout.entries();
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        let mut prev = self.input_dim;
        let mut class_start = 0;
        let mut i = 0;
        while i < entries.len() {
            let e = &entries[i];
            let next = entries.get(i + 1);
            match e.kind {
                EntryKind::BackboneWeight => {
                    let (out, inp) = e.matrix_dims();
                    let bias_ok = next.is_some_and(|b| b.kind == EntryKind::BackboneBias && b.shape == vec![out]);
                    if e.shape.len() != 2 || inp != prev || !bias_ok {
                        return Err(Error::layout(format!(
                            "backbone entry {} does not chain from width {prev}",
                            e.name
                        )));
                    }
                    layers.push(Layer {
                        w: layout.offset(i),
                        b: layout.offset(i + 1),
                        out,
                        inp,
                    });
                    prev = out;
                }
                EntryKind::HeadWeight(t) => {
                    let (classes, inp) = e.matrix_dims();
                    let bias_ok = next.is_some_and(|b| b.kind == EntryKind::HeadBias(t) && b.shape == vec![classes]);
                    if e.shape.len() != 2 || inp != prev || !bias_ok {
                        return Err(Error::layout(format!(
                            "head entry {} does not match feature width {prev}",
                            e.name
                        )));
                    }
                    heads.push(Head {
                        w: layout.offset(i),
                        b: layout.offset(i + 1),
                        classes,
                        class_start,
                    });
                    class_start += classes;
                }
                _ => {
                    return Err(Error::layout(format!("unpaired entry {}", e.name)));
                }
            }
            i += 2;
        }
        Ok(Arch {
            layers,
            heads,
            feat_dim: prev,
            input_dim: self.input_dim,
            total_len: layout.total_len(),
        })
    }

    fn check_inputs(&self, arch: &Arch, x: &Matrix) -> Result<()> {
        if x.cols != arch.input_dim {
            return Err(Error::layout(format!(
                "input has {} columns, network expects {}",
                x.cols, arch.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, arch: &Arch, theta: &[f64], x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(arch.layers.len());
        let mut act = Vec::with_capacity(arch.layers.len() + 1);
        act.push(x.to_vec());
        for l in &arch.layers {
            let a = act.last().expect("input activation");
            let w = &theta[l.w..l.w + l.out * l.inp];
            let z: Vec<f64> = (0..l.out)
                .map(|o| theta[l.b + o] + crate::linalg::dot(&w[o * l.inp..(o + 1) * l.inp], a))
                .collect();
            act.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            pre.push(z);
        }
        Trace { pre, act }
    }

    fn head_logits(arch: &Arch, theta: &[f64], feat: &[f64], range: ClassRange, out: &mut Vec<f64>) {
        out.clear();
        for h in &arch.heads {
            let lo = h.class_start.max(range.start);
            let hi = (h.class_start + h.classes).min(range.end);
            for c in lo..hi {
                let r = c - h.class_start;
                let w = &theta[h.w + r * arch.feat_dim..h.w + (r + 1) * arch.feat_dim];
                out.push(theta[h.b + r] + crate::linalg::dot(w, feat));
            }
        }
    }

    /// Backpropagates `dlogit` (indexed over `range`) scaled by `scale`.
    fn backward(
        &self,
        arch: &Arch,
        theta: &[f64],
        trace: &Trace,
        range: ClassRange,
        dlogit: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let fd = arch.feat_dim;
        let feat = trace.act.last().expect("features");
        let mut delta = vec![0.0; fd];
        for h in &arch.heads {
            let lo = h.class_start.max(range.start);
            let hi = (h.class_start + h.classes).min(range.end);
            for c in lo..hi {
                let d = scale * dlogit[c - range.start];
                if d == 0.0 {
                    continue;
                }
                let r = c - h.class_start;
                let wo = h.w + r * fd;
                grad[h.b + r] += d;
                for j in 0..fd {
                    grad[wo + j] += d * feat[j];
                    delta[j] += d * theta[wo + j];
                }
            }
        }
        for (li, l) in arch.layers.iter().enumerate().rev() {
            let z = &trace.pre[li];
            let a_prev = &trace.act[li];
            let dz: Vec<f64> = delta
                .iter()
                .zip(z)
                .map(|(d, &zv)| d * self.activation.derivative(zv))
                .collect();
            let mut next = vec![0.0; l.inp];
            for o in 0..l.out {
                let d = dz[o];
                if d == 0.0 {
                    continue;
                }
                grad[l.b + o] += d;
                let wo = l.w + o * l.inp;
                for j in 0..l.inp {
                    grad[wo + j] += d * a_prev[j];
                    next[j] += d * theta[wo + j];
                }
            }
            delta = next;
        }
    }

    /// Logits over the concatenation of all heads.
    pub fn forward(&self, theta: &ParamVector, x: &Matrix) -> Result<Matrix> {
        let arch = self.arch(theta.layout())?;
        self.check_inputs(&arch, x)?;
        let total = arch.total_classes();
        let all = ClassRange { start: 0, end: total };
        let mut out = Matrix::zeros(x.rows, total);
        let mut buf = Vec::with_capacity(total);
        for i in 0..x.rows {
            let tr = self.trace(&arch, theta.values(), x.row(i));
            Self::head_logits(&arch, theta.values(), tr.act.last().expect("features"), all, &mut buf);
            out.row_mut(i).copy_from_slice(&buf);
        }
        Ok(out)
    }

    /// Last hidden activation (the input itself when there are no hidden
    /// layers).
    pub fn features(&self, theta: &ParamVector, x: &Matrix) -> Result<Matrix> {
        let arch = self.arch(theta.layout())?;
        self.check_inputs(&arch, x)?;
        let mut out = Matrix::zeros(x.rows, arch.feat_dim);
        for i in 0..x.rows {
            let tr = self.trace(&arch, theta.values(), x.row(i));
            out.row_mut(i).copy_from_slice(tr.act.last().expect("features"));
        }
        Ok(out)
    }

    fn check_batch(&self, arch: &Arch, batch: &Batch, range: ClassRange) -> Result<()> {
        self.check_inputs(arch, &batch.inputs)?;
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        if range.is_empty() || range.end > arch.total_classes() {
            return Err(Error::validation(format!(
                "class range [{}, {}) outside the {} classes of the network",
                range.start,
                range.end,
                arch.total_classes()
            )));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| !range.contains(y)) {
            return Err(Error::validation(format!(
                "label {y} outside class range [{}, {})",
                range.start, range.end
            )));
        }
        Ok(())
    }

    /// Mean local cross-entropy over the batch.
    pub fn loss(&self, theta: &ParamVector, batch: &Batch, range: ClassRange) -> Result<f64> {
        let arch = self.arch(theta.layout())?;
        self.check_batch(&arch, batch, range)?;
        let mut buf = Vec::with_capacity(range.len());
        let mut total = 0.0;
        for i in 0..batch.len() {
            let tr = self.trace(&arch, theta.values(), batch.inputs.row(i));
            Self::head_logits(&arch, theta.values(), tr.act.last().expect("features"), range, &mut buf);
            total += log_sum_exp(&buf) - buf[batch.labels[i] - range.start];
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                msg: "non-finite loss".into(),
                param_norm: theta.norm(),
            });
        }
        Ok(loss)
    }

    /// Mean local cross-entropy and its exact gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, theta: &ParamVector, batch: &Batch, range: ClassRange) -> Result<(f64, Vec<f64>)> {
        let arch = self.arch(theta.layout())?;
        self.check_batch(&arch, batch, range)?;
        let mut grad = vec![0.0; arch.total_len];
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut buf = Vec::with_capacity(range.len());
        for i in 0..batch.len() {
            let tr = self.trace(&arch, theta.values(), batch.inputs.row(i));
            Self::head_logits(&arch, theta.values(), tr.act.last().expect("features"), range, &mut buf);
            let lse = log_sum_exp(&buf);
            let y = batch.labels[i] - range.start;
            total += lse - buf[y];
            for v in buf.iter_mut() {
                *v = (*v - lse).exp();
            }
            buf[y] -= 1.0;
            self.backward(&arch, theta.values(), &tr, range, &buf, scale, &mut grad);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                msg: "non-finite loss".into(),
                param_norm: theta.norm(),
            });
        }
        Ok((loss, grad))
    }

    /// Per-sample visitor over `(p, ∇ log p(y|x) for every y in range)`,
    /// used for true-Fisher estimation. The gradient buffer is reused.
    pub(crate) fn for_each_label_grad(
        &self,
        theta: &ParamVector,
        batch: &Batch,
        range: ClassRange,
        mut visit: impl FnMut(usize, f64, &[f64]),
    ) -> Result<()> {
        let arch = self.arch(theta.layout())?;
        self.check_inputs(&arch, &batch.inputs)?;
        if range.is_empty() || range.end > arch.total_classes() {
            return Err(Error::validation("class range outside the network's classes"));
        }
        let mut logits = Vec::with_capacity(range.len());
        let mut grad = vec![0.0; arch.total_len];
        let mut dlogit = vec![0.0; range.len()];
        for i in 0..batch.len() {
            let tr = self.trace(&arch, theta.values(), batch.inputs.row(i));
            Self::head_logits(&arch, theta.values(), tr.act.last().expect("features"), range, &mut logits);
            crate::linalg::softmax_in_place(&mut logits);
            for y in 0..range.len() {
                // ∇ log p_y = (e_y - p) through the logits.
                for (k, d) in dlogit.iter_mut().enumerate() {
                    *d = -logits[k];
                }
                dlogit[y] += 1.0;
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.backward(&arch, theta.values(), &tr, range, &dlogit, 1.0, &mut grad);
                visit(i, logits[y], &grad);
            }
        }
        Ok(())
    }

    /// Appends a zero-initialized head with `num_classes` outputs.
    pub fn add_head(&self, theta0: &ParamVector, num_classes: usize) -> Result<ParamVector> {
        if num_classes == 0 {
            return Err(Error::validation("a head needs at least one class"));
        }
        let arch = self.arch(theta0.layout())?;
        let task = theta0.layout().head_tasks().last().copied().unwrap_or(0) + 1;
        let mut layout = (**theta0.layout()).clone();
        layout.push(LayoutEntry::new(format!("head{task}.weight"), vec![num_classes, arch.feat_dim], EntryKind::HeadWeight(task)))?;
        layout.push(LayoutEntry::new(format!("head{task}.bias"), vec![num_classes], EntryKind::HeadBias(task)))?;
        theta0.extended_to(&Arc::new(layout))
    }

    /// Dense Hessian of the mean local cross-entropy by central differences
    /// of the analytic gradient.
    pub fn exact_hessian(&self, theta: &ParamVector, batch: &Batch, range: ClassRange) -> Result<Matrix> {
        if theta.len() > HESSIAN_MAX_PARAMS {
            return Err(Error::Capacity {
                len: theta.len(),
                limit: HESSIAN_MAX_PARAMS,
            });
        }
        let layout = theta.layout().clone();
        hessian_from_gradient(theta.values(), |v| {
            let p = ParamVector::from_raw(layout.clone(), v.to_vec());
            self.loss_and_grad(&p, batch, range).map(|(_, g)| g)
        })
    }

    /// Predicted global class per row (argmax over all heads).
    pub fn predict(&self, theta: &ParamVector, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(theta, x)?;
        Ok((0..logits.rows)
            .map(|i| {
                let r = logits.row(i);
                (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            })
            .collect())
    }

    /// Accuracy with a global softmax over every head.
    pub fn accuracy(&self, theta: &ParamVector, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let pred = self.predict(theta, &batch.inputs)?;
        let hits = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Mean cross-entropy with a global softmax over every head.
    pub fn global_risk(&self, theta: &ParamVector, batch: &Batch) -> Result<f64> {
        let arch = self.arch(theta.layout())?;
        let all = ClassRange {
            start: 0,
            end: arch.total_classes(),
        };
        self.loss(theta, batch, all)
    }

    /// SGD on head parameters only, from precomputed backbone features.
    /// `heads` are 0-based head indices; the softmax spans `range`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_heads_on_features<R: Rng + ?Sized>(
        &self,
        theta: &mut ParamVector,
        features: &Matrix,
        labels: &[usize],
        heads: &[usize],
        range: ClassRange,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<()> {
        let arch = self.arch(theta.layout())?;
        if features.cols != arch.feat_dim || features.rows != labels.len() {
            return Err(Error::layout("feature matrix does not match the network"));
        }
        if range.end > arch.total_classes() || labels.iter().any(|&y| !range.contains(y)) {
            return Err(Error::validation("labels outside the head training range"));
        }
        let trainable: Vec<bool> = (0..arch.heads.len()).map(|h| heads.contains(&h)).collect();
        let n = labels.len();
        let bs = batch_size.max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut logits = Vec::with_capacity(range.len());
        let mut grad = vec![0.0; arch.total_len];
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(bs) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let f = features.row(i);
                    Self::head_logits(&arch, theta.values(), f, range, &mut logits);
                    crate::linalg::softmax_in_place(&mut logits);
                    logits[labels[i] - range.start] -= 1.0;
                    for (hi, h) in arch.heads.iter().enumerate() {
                        if !trainable[hi] {
                            continue;
                        }
                        let lo = h.class_start.max(range.start);
                        let up = (h.class_start + h.classes).min(range.end);
                        for c in lo..up {
                            let d = scale * logits[c - range.start];
                            let r = c - h.class_start;
                            grad[h.b + r] += d;
                            let wo = h.w + r * arch.feat_dim;
                            for j in 0..arch.feat_dim {
                                grad[wo + j] += d * f[j];
                            }
                        }
                    }
                }
                let vals = theta.values_mut();
                for (hi, _) in arch.heads.iter().enumerate().filter(|(hi, _)| trainable[*hi]) {
                    for r in arch.head_param_ranges(hi) {
                        for k in r {
                            vals[k] -= lr * grad[k];
                        }
                    }
                }
            }
        }
        if !theta.is_finite() {
            return Err(Error::Numeric {
                msg: "head training diverged".into(),
                param_norm: f64::NAN,
            });
        }
        Ok(())
    }

    /// Linear probing: trains only head `head_task` (1-based) with SGD on the
    /// local cross-entropy of its classes, backbone frozen.
    #[allow(clippy::too_many_arguments)]
    pub fn linear_probe(
        &self,
        theta0: &ParamVector,
        data: &Batch,
        head_task: usize,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<ParamVector> {
        let arch = self.arch(theta0.layout())?;
        let h = theta0
            .layout()
            .head_tasks()
            .iter()
            .position(|&t| t == head_task)
            .ok_or_else(|| Error::validation(format!("no head for task {head_task}")))?;
        let mut theta = theta0.clone();
        if epochs == 0 {
            return Ok(theta);
        }
        let feats = self.features(theta0, &data.inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.train_heads_on_features(
            &mut theta,
            &feats,
            &data.labels,
            &[h],
            arch.head_range(h),
            epochs,
            lr,
            batch_size,
            &mut rng,
        )?;
        Ok(theta)
    }
}

/// `−log softmax(logits[range])[label]`; logits outside the range are ignored.
pub fn local_cross_entropy(logits: &[f64], label: usize, range: ClassRange) -> Result<f64> {
    if range.is_empty() || range.end > logits.len() {
        return Err(Error::validation("class range outside the logits"));
    }
    if !range.contains(label) {
        return Err(Error::validation(format!(
            "label {label} outside class range [{}, {})",
            range.start, range.end
        )));
    }
    let s = &logits[range.start..range.end];
    Ok(log_sum_exp(s) - s[label - range.start])
}

/// Central-difference Jacobian of `grad`, symmetrized. Steps are
/// `1e-5 · max(1, |θ_i|)`.
pub fn hessian_from_gradient<F>(theta: &[f64], mut grad: F) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta.len();
    let mut h = Matrix::zeros(n, n);
    let mut x = theta.to_vec();
    for i in 0..n {
        let step = 1e-5 * theta[i].abs().max(1.0);
        x[i] = theta[i] + step;
        let gp = grad(&x)?;
        x[i] = theta[i] - step;
        let gm = grad(&x)?;
        x[i] = theta[i];
        for j in 0..n {
            h.data[j * n + i] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (h.data[i * n + j] + h.data[j * n + i]);
            h.data[i * n + j] = m;
            h.data[j * n + i] = m;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_identity() -> (Network, ParamVector) {
        let spec = NetSpec {
            input_dim: 3,
            hidden: vec![],
            activation: Activation::Tanh,
            head_dims: vec![3],
        };
        let (net, mut theta) = spec.init(0).unwrap();
        theta.entry_mut("head1.weight").unwrap().copy_from_slice(&Matrix::identity(3).data);
        (net, theta)
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = NetSpec {
            input_dim: 4,
            hidden: vec![5],
            activation: Activation::Gelu,
            head_dims: vec![2, 3],
        };
        let (net, theta) = spec.init(1).unwrap();
        let zero = ParamVector::zeros(theta.layout().clone());
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 3.0], vec![0.0; 4]]);
        let out = net.forward(&zero, &x).unwrap();
        assert_eq!((out.rows, out.cols), (2, 5));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let (net, theta) = linear_identity();
        let out = net.forward(&theta, &Matrix::from_rows(&[vec![1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hidden_unit_by_hand() {
        let spec = NetSpec {
            input_dim: 1,
            hidden: vec![1],
            activation: Activation::Tanh,
            head_dims: vec![1],
        };
        let (net, _) = spec.init(0).unwrap();
        let layout = Arc::new(spec.layout().unwrap());
        // w1 = 0.5, b1 = 0.25, w2 = 2, b2 = -1  ->  2 tanh(0.75) - 1
        let theta = ParamVector::new(layout, vec![0.5, 0.25, 2.0, -1.0]).unwrap();
        let out = net.forward(&theta, &Matrix::from_rows(&[vec![1.0]])).unwrap();
        assert!((out.data[0] - 0.270_297_904_774_574_6).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_a_layout_error() {
        let (net, theta) = linear_identity();
        let err = net.forward(&theta, &Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn local_ce_examples() {
        let r = ClassRange::new(0, 2).unwrap();
        assert!((local_cross_entropy(&[0.3, 0.3], 1, r).unwrap() - 2f64.ln()).abs() < 1e-15);
        let l = local_cross_entropy(&[1.0, 0.0], 0, r).unwrap();
        assert!((l - (1.0 + 1f64.exp()).ln() + 1.0).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 5e-5);
        let r2 = ClassRange::new(1, 3).unwrap();
        let a = local_cross_entropy(&[0.0, 0.4, -0.2, 1.0], 2, r2).unwrap();
        let b = local_cross_entropy(&[100.0, 0.4, -0.2, 101.0], 2, r2).unwrap();
        assert_eq!(a, b);
        assert!(local_cross_entropy(&[0.0, 0.0, 0.0], 0, r2).is_err());
    }

    #[test]
    fn add_head_preserves_existing_logits() {
        let spec = NetSpec {
            input_dim: 2,
            hidden: vec![3],
            activation: Activation::Tanh,
            head_dims: vec![],
        };
        let (net, theta) = spec.init(5).unwrap();
        let t1 = net.add_head(&theta, 2).unwrap();
        assert_eq!(net.arch(t1.layout()).unwrap().total_classes(), 2);
        let mut t1 = t1;
        t1.entry_mut("head1.weight").unwrap().iter_mut().for_each(|v| *v = 0.7);
        let t2 = net.add_head(&t1, 3).unwrap();
        assert_eq!(t2.layout().head_tasks(), vec![1, 2]);
        let x = Matrix::from_rows(&[vec![0.3, -1.0]]);
        let before = net.forward(&t1, &x).unwrap();
        let after = net.forward(&t2, &x).unwrap();
        assert_eq!(&after.data[..2], &before.data[..]);
        assert!(after.data[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hessian_of_quadratic_is_exact() {
        let a = Matrix::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 4.0]]);
        let h = hessian_from_gradient(&[0.1, -2.0, 3.0], |t| Ok(a.matvec(t))).unwrap();
        for (x, y) in h.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(h.asymmetry() <= 1e-7);
    }

    #[test]
    fn hessian_guard() {
        let spec = NetSpec {
            input_dim: 60,
            hidden: vec![50],
            activation: Activation::Tanh,
            head_dims: vec![2],
        };
        let (net, theta) = spec.init(0).unwrap();
        let b = Batch::new(Matrix::zeros(1, 60), vec![0]).unwrap();
        let r = ClassRange::new(0, 2).unwrap();
        assert!(matches!(net.exact_hessian(&theta, &b, r), Err(Error::Capacity { .. })));
    }
}
