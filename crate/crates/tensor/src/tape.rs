//! Wengert tape: records ops during the forward pass, replays them in
//! reverse for gradients.
//!
//! The tape owns every tensor it sees (leaves are moved in, op outputs are
//! appended), so nodes are in topological order by construction. A
//! [`TapeMark`] lets a training loop keep parameter leaves resident across
//! batches: mark after registering parameters, then `rewind` after each
//! optimizer step to drop batch inputs, activations and gradients.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-statistics epsilon for batchnorm2d.
pub const BN_EPS: f64 = 1e-5;
/// Retention factor for batchnorm running statistics:
/// `running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Conv/dense dims travel with the node so backward needs no re-derivation.
type ConvDims = (usize, usize, usize, usize, usize); // (n, c, h, w, f)
type DenseDims = (usize, usize, usize); // (n, d, k)

enum Rule<T: Scalar> {
    Conv2d { x: u32, w: u32, b: u32, dims: ConvDims },
    BatchNorm { x: u32, gamma: u32, beta: u32, mean: Vec<T>, inv_std: Vec<T>, dims: (usize, usize, usize), batch_stats: bool },
    MaxPool { x: u32, arg: Vec<u32>, planes: usize, h: usize, w: usize },
    Dense { x: u32, w: u32, b: u32, dims: DenseDims },
    Relu { x: u32 },
    Dropout { x: u32, mask: Vec<T> },
    Flatten { x: u32 },
    Concat { parts: Vec<(u32, usize)>, outer: usize, inner: usize },
    Mul { a: u32, b: u32 },
    RowSum { x: u32, k: usize },
    Sum { x: u32 },
    Mse { pred: u32, target: u32 },
    /// Negative control for gradient checking: correct forward, backward
    /// scaled by a wrong constant.
    #[cfg(any(test, feature = "oracles"))]
    ReluBad { x: u32 },
}

struct Node<T: Scalar> {
    out: u32,
    rule: Rule<T>,
}

/// Snapshot of the tape length; see [`Tape::rewind`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    vals: usize,
    nodes: usize,
}

pub struct Tape<T: Scalar> {
    id: u32,
    vals: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    is_leaf: Vec<bool>,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            is_leaf: Vec::new(),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Moves a tensor onto the tape as a leaf. Gradient tracking follows
    /// `tensor.track_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.track_grad;
        self.push(tensor, needs, true)
    }

    fn push(&mut self, tensor: Tensor<T>, needs: bool, leaf: bool) -> Var {
        let idx = self.vals.len() as u32;
        self.vals.push(tensor);
        self.grads.push(None);
        self.needs.push(needs);
        self.is_leaf.push(leaf);
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || (v.idx as usize) >= self.vals.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx as usize)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.idx as usize]
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.vals[v.idx as usize].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.idx as usize].shape()
    }

    /// Gradient of a variable, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.idx as usize].as_deref()
    }

    /// Clone of the stored tensor with its gradient attached.
    pub fn extract(&self, v: Var) -> Tensor<T> {
        let i = v.idx as usize;
        let mut t = self.vals[i].clone();
        t.grad = self.grads[i].clone();
        t
    }

    /// Parameter payload and its gradient, for in-place optimizer updates.
    pub fn param_and_grad_mut(&mut self, v: Var) -> Result<(&mut [T], &[T])> {
        let i = self.check(v)?;
        let Tape { vals, grads, .. } = self;
        let grad = grads[i]
            .as_deref()
            .ok_or(TensorError::Invalid { op: "adam_step", detail: format!("variable {i} has no gradient") })?;
        Ok((vals[i].data_mut(), grad))
    }

    /// Overwrites a leaf's payload (e.g. loading a checkpoint into a
    /// resident parameter).
    pub fn set_leaf_data(&mut self, v: Var, data: Vec<T>) -> Result<()> {
        let i = self.check(v)?;
        if data.len() != self.vals[i].numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_leaf_data",
                detail: format!("{} values for {}-element leaf", data.len(), self.vals[i].numel()),
            });
        }
        self.vals[i].set_data(data);
        Ok(())
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark { vals: self.vals.len(), nodes: self.nodes.len() }
    }

    /// Drops everything recorded after `mark` and clears all gradients,
    /// making the tape ready for another forward/backward pass.
    pub fn rewind(&mut self, mark: TapeMark) {
        self.vals.truncate(mark.vals);
        self.grads.truncate(mark.vals);
        self.needs.truncate(mark.vals);
        self.is_leaf.truncate(mark.vals);
        self.nodes.truncate(mark.nodes);
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn out_of(&mut self, tensor: Tensor<T>, needs: bool, rule: Rule<T>) -> Var {
        let v = self.push(tensor, needs, false);
        self.nodes.push(Node { out: v.idx, rule });
        v
    }

    // -- ops ---------------------------------------------------------------

    /// 3x3 cross-correlation, stride 1, zero padding, plus per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.vals[xi].shape(), self.vals[wi].shape(), self.vals[bi].shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected x[N,C,H,W], w[F,C,3,3], b[F]; got {xs:?}, {ws:?}, {bs:?}"),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if (kh, kw) != (3, 3) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be 3x3, got {kh}x{kw}"),
            });
        }
        if wc != c || bs[0] != f {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels, weight expects {wc}; bias {} for {f} filters", bs[0]),
            });
        }
        let dims = (n, c, h, wd, f);
        let mut out = Tensor::zeros(vec![n, f, h, wd]);
        kernels::conv2d_fwd(self.vals[xi].data(), self.vals[wi].data(), self.vals[bi].data(), dims, out.data_mut());
        let needs = self.needs[xi] || self.needs[wi] || self.needs[bi];
        Ok(self.out_of(out, needs, Rule::Conv2d { x: x.idx, w: w.idx, b: b.idx, dims }))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// Train mode normalizes by batch statistics and, when `update_stats`,
    /// folds them into the running buffers in place. Train mode with
    /// `update_stats == false` (a frozen feature extractor) and eval mode
    /// both normalize by the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: Var,
        run_var: Var,
        mode: Mode,
        update_stats: bool,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        let (gi, bi) = (self.check(gamma)?, self.check(beta)?);
        let (rmi, rvi) = (self.check(run_mean)?, self.check(run_var)?);
        let xs = self.vals[xi].shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!("expected x[N,F,H,W], got {xs:?}"),
            });
        }
        let (n, f, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, i) in [("gamma", gi), ("beta", bi), ("running mean", rmi), ("running var", rvi)] {
            if self.vals[i].shape() != [f] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    detail: format!("{name} must have shape [{f}], got {:?}", self.vals[i].shape()),
                });
            }
        }
        let batch_stats = matches!(mode, Mode::Train) && update_stats;
        if matches!(mode, Mode::Train) && update_stats && n < 2 {
            return Err(TensorError::Invalid {
                op: "batchnorm2d",
                detail: "train mode needs a batch of at least 2 (batch variance undefined)".into(),
            });
        }
        let hw = h * wd;
        let eps = T::from_f64(BN_EPS);

        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let mut mean = vec![T::ZERO; f];
            let mut var = vec![T::ZERO; f];
            kernels::bn_stats(self.vals[xi].data(), n, f, hw, &mut mean, &mut var);
            (mean, var)
        } else {
            (self.vals[rmi].data().to_vec(), self.vals[rvi].data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

        if batch_stats {
            let keep = T::from_f64(BN_MOMENTUM);
            let take = T::ONE - keep;
            for (r, &b) in self.vals[rmi].data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in self.vals[rvi].data_mut().iter_mut().zip(&var) {
                *r = keep * *r + take * b;
            }
        }

        let mut out = Tensor::zeros(xs);
        kernels::bn_apply(
            self.vals[xi].data(),
            &mean,
            &inv_std,
            self.vals[gi].data(),
            self.vals[bi].data(),
            f,
            hw,
            out.data_mut(),
        );
        let needs = self.needs[xi] || self.needs[gi] || self.needs[bi];
        Ok(self.out_of(
            out,
            needs,
            Rule::BatchNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                mean,
                inv_std,
                dims: (n, f, hw),
                batch_stats,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; gradient routes to the first
    /// (row-major) maximum of each window.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.vals[xi].shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2",
                detail: format!("expected x[N,F,H,W], got {xs:?}"),
            });
        }
        let (n, f, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "maxpool2",
                detail: format!("spatial dims must be even, got {h}x{wd}"),
            });
        }
        let planes = n * f;
        let mut out = Tensor::zeros(vec![n, f, h / 2, wd / 2]);
        let mut arg = vec![0u32; planes * (h / 2) * (wd / 2)];
        kernels::maxpool_fwd(self.vals[xi].data(), planes, h, wd, out.data_mut(), &mut arg);
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::MaxPool { x: x.idx, arg, planes, h, w: wd }))
    }

    /// x[N,D] @ w[D,K] + b[K].
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.vals[xi].shape(), self.vals[wi].shape(), self.vals[bi].shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("expected x[N,D] w[D,K] b[K]; got {xs:?}, {ws:?}, {bs:?}"),
            });
        }
        let dims = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(vec![dims.0, dims.2]);
        kernels::dense_fwd(self.vals[xi].data(), self.vals[wi].data(), self.vals[bi].data(), dims, out.data_mut());
        let needs = self.needs[xi] || self.needs[wi] || self.needs[bi];
        Ok(self.out_of(out, needs, Rule::Dense { x: x.idx, w: w.idx, b: b.idx, dims }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let mut out = self.vals[xi].clone();
        out.grad = None;
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::Relu { x: x.idx }))
    }

    /// Inverted dropout: train mode zeroes each unit with probability `rate`
    /// and scales survivors by 1/(1-rate); eval mode is the identity. The
    /// caller owns the RNG stream.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut DetRng) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("rate must be in [0,1), got {rate}"),
            });
        }
        if rate == 0.0 || matches!(mode, Mode::Eval) {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.vals[xi].numel())
            .map(|_| if rng.uniform() >= rate { scale } else { T::ZERO })
            .collect();
        let mut out = self.vals[xi].clone();
        out.grad = None;
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::Dropout { x: x.idx, mask }))
    }

    /// Collapses all non-batch axes: [N, ...] -> [N, prod].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.vals[xi].shape();
        if xs.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                detail: format!("need at least 2 axes, got {xs:?}"),
            });
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let mut out = self.vals[xi].clone();
        out.grad = None;
        let out = Tensor::new(vec![n, rest], out.into_data()).expect("flatten preserves numel");
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::Flatten { x: x.idx }))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", detail: "no inputs".into() });
        }
        let first = self.check(parts[0])?;
        let base = self.vals[first].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut axis_total = 0usize;
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            let i = self.check(*p)?;
            let s = self.vals[i].shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != base[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} incompatible with {base:?} along axis {axis}"),
                });
            }
            meta.push((p.idx, s[axis]));
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base;
        shape[axis] = axis_total;
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.data_mut();
            let row = axis_total * inner;
            for o in 0..outer {
                let mut off = 0usize;
                for &(pi, alen) in &meta {
                    let block = alen * inner;
                    let src = &self.vals[pi as usize].data()[o * block..][..block];
                    dst[o * row + off..][..block].copy_from_slice(src);
                    off += block;
                }
            }
        }
        let needs = meta.iter().any(|&(pi, _)| self.needs[pi as usize]);
        Ok(self.out_of(out, needs, Rule::Concat { parts: meta, outer, inner }))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.vals[ai].shape() != self.vals[bi].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.vals[ai].shape(), self.vals[bi].shape()),
            });
        }
        let mut out = self.vals[ai].clone();
        out.grad = None;
        for (o, v) in out.data_mut().iter_mut().zip(self.vals[bi].data()) {
            *o *= *v;
        }
        let needs = self.needs[ai] || self.needs[bi];
        Ok(self.out_of(out, needs, Rule::Mul { a: a.idx, b: b.idx }))
    }

    /// Row-wise sum: [N,K] -> [N,1].
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.vals[xi].shape();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_sum",
                detail: format!("expected [N,K], got {xs:?}"),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        let data: Vec<T> = self.vals[xi]
            .data()
            .chunks(k)
            .map(|row| {
                let mut s = T::ZERO;
                for v in row {
                    s += *v;
                }
                s
            })
            .collect();
        let out = Tensor::new(vec![n, 1], data).expect("row_sum shape");
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::RowSum { x: x.idx, k }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let mut s = T::ZERO;
        for v in self.vals[xi].data() {
            s += *v;
        }
        let needs = self.needs[xi];
        Ok(self.out_of(Tensor::scalar(s), needs, Rule::Sum { x: x.idx }))
    }

    /// Mean squared error over all elements of equally-shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.check(pred)?, self.check(target)?);
        if self.vals[pi].shape() != self.vals[ti].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                detail: format!("{:?} vs {:?}", self.vals[pi].shape(), self.vals[ti].shape()),
            });
        }
        let n = self.vals[pi].numel();
        let mut s = T::ZERO;
        for (p, t) in self.vals[pi].data().iter().zip(self.vals[ti].data()) {
            let d = *p - *t;
            s += d * d;
        }
        let loss = s / T::from_f64(n as f64);
        let needs = self.needs[pi] || self.needs[ti];
        Ok(self.out_of(Tensor::scalar(loss), needs, Rule::Mse { pred: pred.idx, target: target.idx }))
    }

    /// Relu with a deliberately corrupted backward rule. Exists so tests
    /// can prove the gradient checker flags a broken rule.
    #[cfg(any(test, feature = "oracles"))]
    pub fn relu_with_corrupted_backward(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let mut out = self.vals[xi].clone();
        out.grad = None;
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let needs = self.needs[xi];
        Ok(self.out_of(out, needs, Rule::ReluBad { x: x.idx }))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// tracked leaf (zeros if the leaf does not influence the loss).
    /// A second call without `rewind` is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.vals[li].numel() != 1 {
            return Err(TensorError::NotScalar { op: "backward", shape: self.vals[li].shape().to_vec() });
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;

        self.grads[li] = Some(vec![T::ONE]);
        let Tape { vals, grads, needs, nodes, .. } = self;
        for node in nodes.iter().rev() {
            let oi = node.out as usize;
            if !needs[oi] {
                continue;
            }
            let Some(dy) = grads[oi].take() else { continue };
            backprop(vals, grads, needs, &node.rule, &dy);
        }

        // unused tracked leaves still get a (zero) gradient
        for i in 0..self.vals.len() {
            if self.is_leaf[i] && self.needs[i] && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::ZERO; self.vals[i].numel()]);
            }
        }
        Ok(())
    }
}

/// Adds `contrib` into the gradient slot of `idx` (moving when empty).
fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], needs: &[bool], idx: u32, contrib: Vec<T>) {
    let i = idx as usize;
    if !needs[i] {
        return;
    }
    match &mut grads[i] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop<T: Scalar>(
    vals: &[Tensor<T>],
    grads: &mut [Option<Vec<T>>],
    needs: &[bool],
    rule: &Rule<T>,
    dy: &[T],
) {
    match rule {
        Rule::Conv2d { x, w, b, dims } => {
            let (xi, wi, bi) = (*x as usize, *w as usize, *b as usize);
            if needs[xi] {
                let mut dx = vec![T::ZERO; vals[xi].numel()];
                kernels::conv2d_bwd_input(dy, vals[wi].data(), *dims, &mut dx);
                accum(grads, needs, *x, dx);
            }
            if needs[wi] || needs[bi] {
                let mut dw = vec![T::ZERO; vals[wi].numel()];
                let mut db = vec![T::ZERO; vals[bi].numel()];
                kernels::conv2d_bwd_filter(vals[xi].data(), dy, *dims, &mut dw, &mut db);
                accum(grads, needs, *w, dw);
                accum(grads, needs, *b, db);
            }
        }
        Rule::BatchNorm { x, gamma, beta, mean, inv_std, dims, batch_stats } => {
            let (n, f, hw) = *dims;
            let (xi, gi) = (*x as usize, *gamma as usize);
            let xd = vals[xi].data();
            let gd = vals[gi].data();
            let m = T::from_f64((n * hw) as f64);
            // per-channel reductions of dy and dy*xhat
            let mut s1 = vec![T::ZERO; f];
            let mut s2 = vec![T::ZERO; f];
            for ni in 0..n {
                for c in 0..f {
                    let base = (ni * f + c) * hw;
                    let (mu, is) = (mean[c], inv_std[c]);
                    let mut a1 = T::ZERO;
                    let mut a2 = T::ZERO;
                    for j in 0..hw {
                        let g = dy[base + j];
                        a1 += g;
                        a2 += g * (xd[base + j] - mu) * is;
                    }
                    s1[c] += a1;
                    s2[c] += a2;
                }
            }
            if needs[xi] {
                let mut dx = vec![T::ZERO; xd.len()];
                if *batch_stats {
                    for ni in 0..n {
                        for c in 0..f {
                            let base = (ni * f + c) * hw;
                            let (mu, is) = (mean[c], inv_std[c]);
                            let scale = gd[c] * is;
                            let m1 = s1[c] / m;
                            let m2 = s2[c] / m;
                            for j in 0..hw {
                                let xhat = (xd[base + j] - mu) * is;
                                dx[base + j] = scale * (dy[base + j] - m1 - xhat * m2);
                            }
                        }
                    }
                } else {
                    // running stats are constants w.r.t. the input
                    for ni in 0..n {
                        for c in 0..f {
                            let base = (ni * f + c) * hw;
                            let scale = gd[c] * inv_std[c];
                            for j in 0..hw {
                                dx[base + j] = scale * dy[base + j];
                            }
                        }
                    }
                }
                accum(grads, needs, *x, dx);
            }
            accum(grads, needs, *gamma, s2);
            accum(grads, needs, *beta, s1);
        }
        Rule::MaxPool { x, arg, planes, h, w } => {
            let xi = *x as usize;
            if needs[xi] {
                let mut dx = vec![T::ZERO; vals[xi].numel()];
                kernels::maxpool_bwd(dy, arg, *planes, *h, *w, &mut dx);
                accum(grads, needs, *x, dx);
            }
        }
        Rule::Dense { x, w, b, dims } => {
            let (xi, wi, bi) = (*x as usize, *w as usize, *b as usize);
            if needs[xi] {
                let mut dx = vec![T::ZERO; vals[xi].numel()];
                kernels::dense_bwd_input(dy, vals[wi].data(), *dims, &mut dx);
                accum(grads, needs, *x, dx);
            }
            if needs[wi] || needs[bi] {
                let mut dw = vec![T::ZERO; vals[wi].numel()];
                let mut db = vec![T::ZERO; vals[bi].numel()];
                kernels::dense_bwd_weight(vals[xi].data(), dy, *dims, &mut dw, &mut db);
                accum(grads, needs, *w, dw);
                accum(grads, needs, *b, db);
            }
        }
        Rule::Relu { x } => {
            let xi = *x as usize;
            let dx: Vec<T> = vals[xi]
                .data()
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                .collect();
            accum(grads, needs, *x, dx);
        }
        Rule::Dropout { x, mask } => {
            let dx: Vec<T> = mask.iter().zip(dy).map(|(&m, &g)| m * g).collect();
            accum(grads, needs, *x, dx);
        }
        Rule::Flatten { x } => {
            accum(grads, needs, *x, dy.to_vec());
        }
        Rule::Concat { parts, outer, inner } => {
            let row: usize = parts.iter().map(|&(_, a)| a * inner).sum();
            for (slot, &(pi, alen)) in parts.iter().enumerate() {
                let i = pi as usize;
                if !needs[i] {
                    continue;
                }
                let off: usize = parts[..slot].iter().map(|&(_, a)| a * inner).sum();
                let block = alen * inner;
                let mut dp = vec![T::ZERO; vals[i].numel()];
                for o in 0..*outer {
                    dp[o * block..][..block].copy_from_slice(&dy[o * row + off..][..block]);
                }
                accum(grads, needs, pi, dp);
            }
        }
        Rule::Mul { a, b } => {
            let (ai, bi) = (*a as usize, *b as usize);
            if needs[ai] {
                let da: Vec<T> = vals[bi].data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                accum(grads, needs, *a, da);
            }
            if needs[bi] {
                let db: Vec<T> = vals[ai].data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                accum(grads, needs, *b, db);
            }
        }
        Rule::RowSum { x, k } => {
            let xi = *x as usize;
            let mut dx = vec![T::ZERO; vals[xi].numel()];
            for (row, &g) in dx.chunks_mut(*k).zip(dy) {
                row.fill(g);
            }
            accum(grads, needs, *x, dx);
        }
        Rule::Sum { x } => {
            let xi = *x as usize;
            accum(grads, needs, *x, vec![dy[0]; vals[xi].numel()]);
        }
        #[cfg(any(test, feature = "oracles"))]
        Rule::ReluBad { x } => {
            let xi = *x as usize;
            let wrong = T::from_f64(1.05);
            let dx: Vec<T> = vals[xi]
                .data()
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > T::ZERO { wrong * g } else { T::ZERO })
                .collect();
            accum(grads, needs, *x, dx);
        }
        Rule::Mse { pred, target } => {
            let (pi, ti) = (*pred as usize, *target as usize);
            let n = T::from_f64(vals[pi].numel() as f64);
            let two = T::from_f64(2.0);
            let scale = two / n * dy[0];
            if needs[pi] {
                let dp: Vec<T> = vals[pi]
                    .data()
                    .iter()
                    .zip(vals[ti].data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                accum(grads, needs, *pred, dp);
            }
            if needs[ti] {
                let dt: Vec<T> = vals[pi]
                    .data()
                    .iter()
                    .zip(vals[ti].data())
                    .map(|(&p, &t)| scale * (t - p))
                    .collect();
                accum(grads, needs, *target, dt);
            }
        }
    }
}
