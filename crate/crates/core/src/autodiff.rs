//! Reverse-mode differentiation over dense `f64` matrices, specialised to
//! the kernel network: a batch of shading points is laid out as one
//! `rows x channels` matrix with segment offsets marking each point's
//! photons. Also holds the mu-law loss and the Adam optimiser.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::math::{Rgb, Vec3};
use crate::neural_kernel::{DirectNet, KernelNet, Model, NetInput, FEATURE_CHANNELS, INPUT_CHANNELS};

/// Compression constant of the loss mapping.
pub const MU: f64 = 5000.0;
/// Samples per independently differentiated chunk; fixes the reduction order.
pub const CHUNK: usize = 16;

/// `ln(1 + mu v) / ln(1 + mu)`; negative values are clamped to zero.
pub fn mu_law(v: f64, mu: f64) -> f64 {
    (1.0 + mu * v.max(0.0)).ln() / (1.0 + mu).ln()
}

/// The mu-law continued below zero by its tangent line at zero. Training
/// uses this form: with a hard clamp, negative predictions receive no
/// gradient and a network whose outputs start negative never recovers.
pub fn mu_law_extended(v: f64, mu: f64) -> f64 {
    if v < 0.0 {
        mu * v / (1.0 + mu).ln()
    } else {
        mu_law(v, mu)
    }
}

pub fn mu_law_rgb(v: Rgb, mu: f64) -> Rgb {
    if v.x < 0.0 || v.y < 0.0 || v.z < 0.0 {
        log::trace!("negative radiance {v:?} clamped before mu-law");
    }
    Vec3::new(mu_law(v.x, mu), mu_law(v.y, mu), mu_law(v.z, mu))
}

/// Mean over channels of the squared difference of mu-law mapped values.
pub fn loss(pred: Rgb, gt: Rgb) -> f64 {
    let d = mu_law_rgb(pred, MU) - mu_law_rgb(gt, MU);
    d.length_squared() / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    SliceRows(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    /// Per-segment channelwise max, with the first arg-max row per channel.
    SegMax(Var, Vec<usize>),
    SegMean(Var),
    /// Repeats row `s` of an `S x C` matrix over segment `s`'s rows.
    Expand(Var),
    /// `scale_s * sum_{i in s} w_i flux_i`, `w` a column.
    SegWeightedSum { w: Var, flux: Array2<f64>, scale: Array2<f64> },
    MulConst(Var, Array2<f64>),
    MuLaw(Var),
    /// `sum (a - target)^2 / denom`, a `1 x 1` result.
    SquaredError { a: Var, target: Array2<f64>, denom: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward pass; [`Tape::backward`] replays it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    /// Segment boundaries, `S + 1` entries.
    offsets: Vec<usize>,
}

impl Tape {
    pub fn new(offsets: Vec<usize>) -> Tape {
        assert!(!offsets.is_empty());
        Tape { nodes: Vec::new(), offsets }
    }

    fn segments(&self) -> usize {
        self.offsets.len() - 1
    }

    fn seg(&self, s: usize) -> Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1);
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Var {
        let v = self.value(a).slice(s![rows.clone(), ..]).to_owned();
        self.push(v, Op::SliceRows(a, rows))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn seg_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.ncols();
        let mut out = Array2::zeros((self.segments(), c));
        let mut arg = vec![usize::MAX; self.segments() * c];
        for s in 0..self.segments() {
            for row in self.seg(s) {
                for j in 0..c {
                    let v = x[[row, j]];
                    let slot = s * c + j;
                    if arg[slot] == usize::MAX || v > out[[s, j]] {
                        out[[s, j]] = v;
                        arg[slot] = row;
                    }
                }
            }
        }
        self.push(out, Op::SegMax(a, arg))
    }

    pub fn seg_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((self.segments(), x.ncols()));
        for s in 0..self.segments() {
            let r = self.seg(s);
            if !r.is_empty() {
                let n = r.len() as f64;
                out.row_mut(s).assign(&(x.slice(s![r, ..]).sum_axis(Axis(0)) / n));
            }
        }
        self.push(out, Op::SegMean(a))
    }

    pub fn expand(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let rows = *self.offsets.last().unwrap();
        let mut out = Array2::zeros((rows, x.ncols()));
        for s in 0..self.segments() {
            for row in self.seg(s) {
                out.row_mut(row).assign(&x.row(s));
            }
        }
        self.push(out, Op::Expand(a))
    }

    pub fn seg_weighted_sum(&mut self, w: Var, flux: Array2<f64>, scale: Array2<f64>) -> Var {
        let wv = self.value(w);
        let mut out = Array2::zeros((self.segments(), flux.ncols()));
        for s in 0..self.segments() {
            for row in self.seg(s) {
                for j in 0..flux.ncols() {
                    out[[s, j]] += wv[[row, 0]] * flux[[row, j]];
                }
            }
        }
        out *= &scale;
        self.push(out, Op::SegWeightedSum { w, flux, scale })
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn mu_law(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| mu_law_extended(x, MU));
        self.push(v, Op::MuLaw(a))
    }

    pub fn squared_error(&mut self, a: Var, target: Array2<f64>, denom: f64) -> Var {
        let d = self.value(a) - &target;
        let v = Array2::from_elem((1, 1), d.mapv(|x| x * x).sum() / denom);
        self.push(v, Op::SquaredError { a, target, denom })
    }

    /// Signature of every piecewise branch taken in the forward pass:
    /// ReLU signs, max-pool winners and the mu-law's linear branch.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) | Op::MuLaw(a) => {
                    let mut word = 0u64;
                    for (i, &x) in self.value(*a).iter().enumerate() {
                        word = word.rotate_left(1) ^ u64::from(x > 0.0) ^ (i as u64) << 1;
                        if i % 64 == 63 {
                            out.push(word);
                            word = 0;
                        }
                    }
                    out.push(word);
                }
                Op::SegMax(_, arg) => out.extend(arg.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        out
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Array2<f64>>>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass".into()));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::State("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot => *slot = Some(d),
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::SliceRows(a, rows) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![rows.clone(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., col..col + c]).to_owned());
                        col += c;
                    }
                }
                Op::SegMax(a, arg) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    let c = g.ncols();
                    for s in 0..self.segments() {
                        for j in 0..c {
                            let row = arg[s * c + j];
                            if row != usize::MAX {
                                d[[row, j]] += g[[s, j]];
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::SegMean(a) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for s in 0..self.segments() {
                        let r = self.seg(s);
                        let n = r.len() as f64;
                        for row in r {
                            d.row_mut(row).assign(&(&g.row(s) / n));
                        }
                    }
                    acc(*a, d);
                }
                Op::Expand(a) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for s in 0..self.segments() {
                        let r = self.seg(s);
                        d.row_mut(s).assign(&g.slice(s![r, ..]).sum_axis(Axis(0)));
                    }
                    acc(*a, d);
                }
                Op::SegWeightedSum { w, flux, scale } => {
                    let gs = &g * scale;
                    let mut d = Array2::zeros(self.value(*w).dim());
                    for s in 0..self.segments() {
                        for row in self.seg(s) {
                            d[[row, 0]] = (0..flux.ncols()).map(|j| gs[[s, j]] * flux[[row, j]]).sum();
                        }
                    }
                    acc(*w, d);
                }
                Op::MulConst(a, c) => acc(*a, &g * c),
                Op::MuLaw(a) => {
                    let norm = (1.0 + MU).ln();
                    let mut d = g.clone();
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        *d *= MU / ((1.0 + MU * x.max(0.0)) * norm);
                    });
                    acc(*a, d);
                }
                Op::SquaredError { a, target, denom } => {
                    let d = (self.value(*a) - target) * (2.0 * g[[0, 0]] / denom);
                    acc(*a, d);
                }
            }
        }
        Ok(grads)
    }
}

/// One training example: network input, the factor turning the weighted
/// flux sum into radiance, and the reference radiance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: NetInput,
    pub scale: Rgb,
    pub target: Rgb,
}

/// A model that can be laid out on a tape.
pub trait Trainable: Model + Clone + Send + Sync {
    /// Records the forward pass for `samples`, returning the predicted
    /// radiance (`S x 3`) and the parameter leaves in layer order
    /// (weight, bias, weight, bias, ...).
    fn record(&self, tape: &mut Tape, samples: &[&Sample]) -> (Var, Vec<Var>);
}

fn param_leaves(model: &impl Model, tape: &mut Tape) -> Vec<Var> {
    let mut out = Vec::new();
    for l in model.layers() {
        out.push(tape.leaf(l.w.clone()));
        out.push(tape.leaf(l.b.clone().insert_axis(Axis(0))));
    }
    out
}

/// Records extractor and pooling, returning per-photon features and the
/// context with the count channel appended.
fn record_context(tape: &mut Tape, p: &[Var], samples: &[&Sample]) -> (Var, Var) {
    let rows: usize = samples.iter().map(|s| s.input.k()).sum();
    let mut x = Array2::zeros((rows, INPUT_CHANNELS));
    let mut at = 0;
    for s in samples {
        x.slice_mut(s![at..at + s.input.k(), ..]).assign(&s.input.rows);
        at += s.input.k();
    }
    let x = tape.leaf(x);
    let mut h = x;
    for l in 0..3 {
        let z = tape.matmul(h, p[2 * l]);
        let z = tape.add_row(z, p[2 * l + 1]);
        h = tape.relu(z);
    }
    let mx = tape.seg_max(h);
    let mn = tape.seg_mean(h);
    let count = Array2::from_shape_fn((samples.len(), 1), |(i, _)| samples[i].input.count_channel());
    let count = tape.leaf(count);
    let ctx = tape.concat_cols(&[mx, mn, count]);
    (h, ctx)
}

fn offsets(samples: &[&Sample]) -> Vec<usize> {
    let mut o = vec![0];
    for s in samples {
        o.push(o.last().unwrap() + s.input.k());
    }
    o
}

fn scales(samples: &[&Sample]) -> Array2<f64> {
    Array2::from_shape_fn((samples.len(), 3), |(i, j)| samples[i].scale[j])
}

impl Trainable for KernelNet {
    fn record(&self, tape: &mut Tape, samples: &[&Sample]) -> (Var, Vec<Var>) {
        let p = param_leaves(self, tape);
        let (f, ctx) = record_context(tape, &p, samples);
        let total_in = self.layers[3].w.nrows();
        let w_photon = tape.slice_rows(p[6], 0..FEATURE_CHANNELS);
        let w_context = tape.slice_rows(p[6], FEATURE_CHANNELS..total_in);
        let local = tape.matmul(f, w_photon);
        let shared = tape.matmul(ctx, w_context);
        let shared = tape.add_row(shared, p[7]);
        let shared = tape.expand(shared);
        let z = tape.add(local, shared);
        let mut h = tape.relu(z);
        let z = tape.matmul(h, p[8]);
        let z = tape.add_row(z, p[9]);
        h = tape.relu(z);
        let z = tape.matmul(h, p[10]);
        let w = tape.add_row(z, p[11]);
        let mut flux = Array2::zeros((*tape.offsets.last().unwrap(), 3));
        let mut at = 0;
        for s in samples {
            for phi in &s.input.flux {
                flux.row_mut(at).assign(&ndarray::arr1(&phi.to_array()));
                at += 1;
            }
        }
        let pred = tape.seg_weighted_sum(w, flux, scales(samples));
        (pred, p)
    }
}

impl Trainable for DirectNet {
    fn record(&self, tape: &mut Tape, samples: &[&Sample]) -> (Var, Vec<Var>) {
        let p = param_leaves(self, tape);
        let (_, mut h) = record_context(tape, &p, samples);
        for l in 3..6 {
            let z = tape.matmul(h, p[2 * l]);
            let z = tape.add_row(z, p[2 * l + 1]);
            h = if l < 5 { tape.relu(z) } else { z };
        }
        let pred = tape.mul_const(h, scales(samples));
        (pred, p)
    }
}

/// Records prediction and loss for `chunk`, normalised by `denom` samples.
pub fn record_loss<M: Trainable>(model: &M, chunk: &[&Sample], denom: usize) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new(offsets(chunk));
    let (pred, params) = model.record(&mut tape, chunk);
    let mapped = tape.mu_law(pred);
    let target = Array2::from_shape_fn((chunk.len(), 3), |(i, j)| mu_law(chunk[i].target[j], MU));
    let loss = tape.squared_error(mapped, target, 3.0 * denom as f64);
    (tape, loss, params)
}

/// Mean batch loss and its gradient, flattened like [`Model::flat_params`].
/// Chunks are differentiated independently and summed in chunk order, so
/// the result does not depend on the number of threads.
pub fn loss_and_grad<M: Trainable>(model: &M, batch: &[&Sample], exec: Exec) -> Result<(f64, Vec<f64>)> {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    let parts = exec.map(chunks.len(), |c| -> Result<(f64, Vec<f64>)> {
        let (tape, loss, params) = record_loss(model, chunks[c], batch.len());
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(model.param_count());
        for p in params {
            match &grads[p.0] {
                Some(g) => flat.extend(g.iter()),
                None => flat.extend(std::iter::repeat_n(0.0, tape.value(p).len())),
            }
        }
        Ok((tape.value(loss)[[0, 0]], flat))
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

/// Mean batch loss without gradients.
pub fn batch_loss<M: Trainable>(model: &M, batch: &[&Sample], exec: Exec) -> f64 {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    exec.map(chunks.len(), |c| {
        let (tape, loss, _) = record_loss(model, chunks[c], batch.len());
        tape.value(loss)[[0, 0]]
    })
    .into_iter()
    .sum()
}

/// Forward branch signature of a whole batch (see [`Tape::branch_pattern`]).
pub fn branch_pattern<M: Trainable>(model: &M, batch: &[&Sample]) -> Vec<u64> {
    batch
        .chunks(CHUNK)
        .flat_map(|c| record_loss(model, c, batch.len()).0.branch_pattern())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error `|fd - g| / max(|fd|, |g|, 1e-8)`.
    pub worst: f64,
    pub checked: usize,
    /// Draws rejected because `+-h` crossed a ReLU, max-pool or clamp branch.
    pub skipped: usize,
}

/// Compares the tape gradient with central differences of step `h` on
/// `picks` randomly drawn parameters. Parameters whose perturbation
/// switches a piecewise branch are redrawn, since the loss is not
/// differentiable across the switch.
pub fn gradient_check<M: Trainable>(mut model: M, batch: &[&Sample], picks: usize, h: f64, rng: &mut impl rand::Rng) -> Result<GradientCheck> {
    let (_, grad) = loss_and_grad(&model, batch, Exec::Sequential)?;
    let base = model.flat_params();
    let pattern = branch_pattern(&model, batch);
    let mut out = GradientCheck { worst: 0.0, checked: 0, skipped: 0 };
    let eval = |model: &mut M, i: usize, v: f64| {
        let mut p = base.clone();
        p[i] = v;
        model.set_flat_params(&p);
        (batch_loss(model, batch, Exec::Sequential), branch_pattern(model, batch) == pattern)
    };
    while out.checked < picks {
        if out.skipped > 100 * picks {
            return Err(Error::Degenerate("too many parameters sit on a branch switch".into()));
        }
        let i = rng.gen_range(0..base.len());
        let (lp, same_p) = eval(&mut model, i, base[i] + h);
        let (lm, same_m) = eval(&mut model, i, base[i] - h);
        if !(same_p && same_m) {
            out.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-8);
        out.worst = out.worst.max((fd - grad[i]).abs() / denom);
        out.checked += 1;
    }
    model.set_flat_params(&base);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; params], v: vec![0.0; params] }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
