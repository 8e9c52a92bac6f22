//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] owns one forward computation: every primitive appends a node
//! holding its output value, op tag, and parent ids. Creation order is a
//! topological order of the DAG, so [`Tape::backward`] replays nodes once in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. The tape is single-threaded and lives for one training step;
//! individual kernels may fan out internally (see [`crate::kernels`]).
//!
//! Conventions baked into the primitives:
//! - `log_clamped(x) = ln(max(x, 1e-7))`, so probabilities at saturation
//!   never produce `-inf`.
//! - `max_all` routes its subgradient to the first row-major argmax.
//! - `relu` and `abs` take subgradient 0 at their kinks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, PairPattern};
use crate::tensor::{el, Element, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp floor used by `log_clamped`.
pub const LOG_EPS: f64 = 1e-7;

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    /// `mul * x + add`
    Affine(Var, T, T),
    Exp(Var),
    Abs(Var),
    LogClamped(Var),
    Recip(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Bilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    SoftmaxChannels(Var),
    ConcatChannels(Vec<Var>),
    MaxAll {
        x: Var,
        argmax: usize,
    },
    Gather {
        x: Var,
        indices: Arc<Vec<usize>>,
    },
    WeightedSum {
        x: Var,
        weights: Arc<Vec<T>>,
    },
    SumAll(Var),
    PairL1 {
        features: Var,
        pat: Arc<PairPattern>,
    },
    PairRowSums {
        weights: Var,
        pat: Arc<PairPattern>,
    },
    SpmvPairs {
        weights: Var,
        x: Var,
        pat: Arc<PairPattern>,
    },
    RowScale {
        x: Var,
        scale: Var,
    },
    CropSpatial {
        x: Var,
        h: usize,
        w: usize,
    },
}

struct Node<T: Element> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    /// True when any ancestor is a grad-requiring leaf; backward skips the rest.
    requires: bool,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    named: Vec<(String, Var)>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), named: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape/value consistent")
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Gradient buffer of `v`, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    /// Named leaves (bound parameters) whose gradient is populated.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.named
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].as_deref().map(|g| (name.as_str(), g)))
    }

    /// Clears gradients so another backward pass may run on the same tape.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Binds a tensor as a leaf; it participates in backward iff it was
    /// marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.needs_grad())
    }

    /// Binds a constant leaf regardless of the tensor's flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Binds a named, grad-requiring leaf (a parameter).
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.named.push((name.to_string(), v));
        v
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.push(vec![], vec![x], Op::Leaf, false)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b), req))
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| mul * v + add).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Affine(x, mul, add), req)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| v.exp()).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Exp(x), req)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| v.abs()).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Abs(x), req)
    }

    /// `ln(max(x, 1e-7))`.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let eps: T = el(LOG_EPS);
        let value: Vec<T> = self.value(x).iter().map(|&v| v.max(eps).ln()).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::LogClamped(x), req)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| T::one() / v).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Recip(x), req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let req = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Relu(x), req)
    }

    // ── Structured ops ───────────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let ishape = self.shape(input);
        let kshape = self.shape(kernel);
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,kh,kw] kernel, got {ishape:?} / {kshape:?}"
            )));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if cin != kcin {
            return Err(Error::dim(format!(
                "conv2d input channels {cin} vs kernel channels {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1".to_string()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = kernels::conv_out_len(h, kh, stride, pad);
        let ow = kernels::conv_out_len(w, kw, stride, pad);
        let mut out = vec![T::zero(); cout * oh * ow];
        kernels::conv2d_forward(
            self.value(input),
            (cin, h, w),
            self.value(kernel),
            (cout, cin, kh, kw),
            stride,
            pad,
            &mut out,
        );
        let req = self.requires(input) || self.requires(kernel);
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { input, kernel, stride, pad }, req))
    }

    /// Adds a per-channel bias to a `[C,H,W]` map.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || self.shape(bias) != [xs[0]] {
            return Err(Error::dim(format!(
                "bias_add: map {:?} with bias {:?}",
                xs,
                self.shape(bias)
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut value = self.value(x).to_vec();
        for ci in 0..c {
            let b = self.value(bias)[ci];
            for v in &mut value[ci * hw..(ci + 1) * hw] {
                *v += b;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(xs.to_vec(), value, Op::BiasAdd { x, bias }, req))
    }

    /// Bilinear upsample of `[C,H,W]` to `[C,out_h,out_w]` (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::dim(format!("bilinear_upsample expects [C,H,W], got {xs:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("bilinear_upsample: zero-sized target".to_string()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if out_h < h || out_w < w {
            return Err(Error::contract(format!(
                "bilinear_upsample target {out_h}x{out_w} smaller than source {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); c * out_h * out_w];
        kernels::bilinear_forward(self.value(x), (c, h, w), (out_h, out_w), &mut out);
        let req = self.requires(x);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Bilinear { x, out_h, out_w }, req))
    }

    /// Per-pixel softmax over the channel axis of `[K,H,W]`, max-subtracted.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::dim(format!("softmax_channels expects [K,H,W], got {xs:?}")));
        }
        let (k, hw) = (xs[0], xs[1] * xs[2]);
        if k < 2 {
            return Err(Error::contract("softmax_channels needs K >= 2".to_string()));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); k * hw];
        for p in 0..hw {
            let mut m = xv[p];
            for c in 1..k {
                m = m.max(xv[c * hw + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (xv[c * hw + p] - m).exp();
                out[c * hw + p] = e;
                z += e;
            }
            for c in 0..k {
                out[c * hw + p] = out[c * hw + p] / z;
            }
        }
        let req = self.requires(x);
        Ok(self.push(xs.to_vec(), out, Op::SoftmaxChannels(x), req))
    }

    /// Concatenates `[Ci,H,W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_channels: empty input list".to_string()));
        }
        let (h, w) = {
            let s = self.shape(parts[0]);
            if s.len() != 3 {
                return Err(Error::dim(format!("concat_channels expects [C,H,W], got {s:?}")));
            }
            (s[1], s[2])
        };
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::dim(format!(
                    "concat_channels: grid mismatch {:?} vs {}x{}",
                    s, h, w
                )));
            }
            c_total += s[0];
        }
        let mut value = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![c_total, h, w], value, Op::ConcatChannels(parts.to_vec()), req))
    }

    /// Maximum over all elements; subgradient goes to the first row-major argmax.
    pub fn max_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        debug_assert!(!xv.is_empty());
        let mut argmax = 0;
        let mut best = xv[0];
        for (i, &v) in xv.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let req = self.requires(x);
        self.push(vec![], vec![best], Op::MaxAll { x, argmax }, req)
    }

    /// Picks flat indices out of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let n = self.numel(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather index {bad} out of bounds ({n} elements)")));
        }
        let xv = self.value(x);
        let value: Vec<T> = indices.iter().map(|&i| xv[i]).collect();
        let req = self.requires(x);
        let m = indices.len();
        self.push(vec![m], value, Op::Gather { x, indices: Arc::new(indices) }, req);
        Ok(Var(self.nodes.len() - 1))
    }

    /// `sum_i w_i * x_i` with constant weights; returns a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.numel(x) {
            return Err(Error::dim(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.numel(x)
            )));
        }
        let acc: T = self.value(x).iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        let req = self.requires(x);
        self.push(vec![], vec![acc], Op::WeightedSum { x, weights: Arc::new(weights) }, req);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let acc: T = self.value(x).iter().copied().sum();
        let req = self.requires(x);
        self.push(vec![], vec![acc], Op::SumAll(x), req)
    }

    /// L1 feature distances over a neighborhood pattern (`[C,h,w]` -> `[P]`).
    pub fn pair_l1(&mut self, features: Var, pat: Arc<PairPattern>) -> Result<Var> {
        let fs = self.shape(features);
        if fs.len() != 3 || fs[1] != pat.h || fs[2] != pat.w {
            return Err(Error::dim(format!(
                "pair_l1: features {:?} vs pattern grid {}x{}",
                fs, pat.h, pat.w
            )));
        }
        let channels = fs[0];
        let value = kernels::pair_l1_forward(self.value(features), channels, &pat);
        let req = self.requires(features);
        let p = pat.n_pairs();
        self.push(vec![p], value, Op::PairL1 { features, pat }, req);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Per-pixel sum of incident pair weights (`[P]` -> `[n]`).
    pub fn pair_row_sums(&mut self, weights: Var, pat: Arc<PairPattern>) -> Result<Var> {
        if self.shape(weights) != [pat.n_pairs()] {
            return Err(Error::dim(format!(
                "pair_row_sums: weights {:?} vs {} pairs",
                self.shape(weights),
                pat.n_pairs()
            )));
        }
        let value = kernels::pair_row_sums(self.value(weights), &pat);
        let req = self.requires(weights);
        let n = pat.n_pixels();
        self.push(vec![n], value, Op::PairRowSums { weights, pat }, req);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Symmetric off-diagonal sparse mat-vec over stacked maps
    /// (`weights [P]`, `x [K,n]` -> `[K,n]`).
    pub fn spmv_pairs(&mut self, weights: Var, x: Var, pat: Arc<PairPattern>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != pat.n_pixels() {
            return Err(Error::dim(format!(
                "spmv_pairs: x {:?} vs {} pixels",
                xs,
                pat.n_pixels()
            )));
        }
        if self.shape(weights) != [pat.n_pairs()] {
            return Err(Error::dim(format!(
                "spmv_pairs: weights {:?} vs {} pairs",
                self.shape(weights),
                pat.n_pairs()
            )));
        }
        let k = xs[0];
        let mut out = vec![T::zero(); k * pat.n_pixels()];
        kernels::spmv_pairs(self.value(weights), &pat, self.value(x), k, &mut out);
        let req = self.requires(weights) || self.requires(x);
        Ok(self.push(xs.to_vec(), out, Op::SpmvPairs { weights, x, pat }, req))
    }

    /// Scales each column `i` of `x [K,n]` by `scale[i]`.
    pub fn row_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(scale) != [xs[1]] {
            return Err(Error::dim(format!(
                "row_scale: x {:?} with scale {:?}",
                xs,
                self.shape(scale)
            )));
        }
        let (k, n) = (xs[0], xs[1]);
        let sv = self.value(scale);
        let mut value = self.value(x).to_vec();
        for ki in 0..k {
            for i in 0..n {
                value[ki * n + i] = value[ki * n + i] * sv[i];
            }
        }
        let req = self.requires(x) || self.requires(scale);
        Ok(self.push(xs.to_vec(), value, Op::RowScale { x, scale }, req))
    }

    /// Top-left spatial crop of `[C,H,W]` to `[C,h,w]`.
    pub fn crop_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || h > xs[1] || w > xs[2] || h == 0 || w == 0 {
            return Err(Error::dim(format!("crop_spatial: {:?} to {h}x{w}", xs)));
        }
        let (c, full_h, full_w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                let base = (ci * full_h + y) * full_w;
                value.extend_from_slice(&xv[base..base + w]);
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![c, h, w], value, Op::CropSpatial { x, h, w }, req))
    }

    /// Reinterprets a var's shape without touching data (numel must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::dim(format!(
                "reshape: {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let value = self.value(x).to_vec();
        let req = self.requires(x);
        // Modeled as an affine identity so backward passes straight through.
        Ok(self.push(shape, value, Op::Affine(x, T::one(), T::zero()), req))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients on every
    /// grad-requiring ancestor. Calling it again without
    /// [`Tape::reset_grads`] is an accumulation error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice without reset_grads (gradients would accumulate)"
                    .to_string(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            let Some(d_out) = self.grads[idx].take() else { continue };
            self.propagate(idx, &d_out);
            self.grads[idx] = Some(d_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.requires(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_at(&mut self, v: Var, index: usize, delta: T) {
        if !self.requires(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        slot[index] += delta;
    }

    fn propagate(&mut self, idx: usize, d_out: &[T]) {
        // Ops are matched by value where they only hold Copy metadata; Arc'd
        // payloads are cloned cheaply up front to release the borrow.
        enum Step<T: Element> {
            Into(Var, Vec<T>),
            At(Var, usize, T),
        }
        let mut steps: Vec<Step<T>> = Vec::new();

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                steps.push(Step::Into(*a, d_out.to_vec()));
                steps.push(Step::Into(*b, d_out.to_vec()));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<T> =
                    d_out.iter().zip(self.value(b)).map(|(&d, &y)| d * y).collect();
                let db: Vec<T> =
                    d_out.iter().zip(self.value(a)).map(|(&d, &x)| d * x).collect();
                steps.push(Step::Into(a, da));
                steps.push(Step::Into(b, db));
            }
            Op::Affine(x, mul, _) => {
                let (x, mul) = (*x, *mul);
                let dx: Vec<T> = d_out.iter().map(|&d| d * mul).collect();
                steps.push(Step::Into(x, dx));
            }
            Op::Exp(x) => {
                let x = *x;
                let out = &self.nodes[idx].value;
                let dx: Vec<T> = d_out.iter().zip(out).map(|(&d, &o)| d * o).collect();
                steps.push(Step::Into(x, dx));
            }
            Op::Abs(x) => {
                let x = *x;
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(self.value(x))
                    .map(|(&d, &v)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                steps.push(Step::Into(x, dx));
            }
            Op::LogClamped(x) => {
                let x = *x;
                let eps: T = el(LOG_EPS);
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(self.value(x))
                    .map(|(&d, &v)| if v >= eps { d / v } else { T::zero() })
                    .collect();
                steps.push(Step::Into(x, dx));
            }
            Op::Recip(x) => {
                let x = *x;
                let out = &self.nodes[idx].value;
                let dx: Vec<T> = d_out.iter().zip(out).map(|(&d, &o)| -d * o * o).collect();
                steps.push(Step::Into(x, dx));
            }
            Op::Relu(x) => {
                let x = *x;
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(self.value(x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                steps.push(Step::Into(x, dx));
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                let ishape = {
                    let s = self.shape(input);
                    (s[0], s[1], s[2])
                };
                let kshape = {
                    let s = self.shape(kernel);
                    (s[0], s[1], s[2], s[3])
                };
                if self.requires(input) {
                    let mut din = vec![T::zero(); self.numel(input)];
                    kernels::conv2d_backward_input(
                        self.value(kernel),
                        kshape,
                        d_out,
                        ishape,
                        stride,
                        pad,
                        &mut din,
                    );
                    steps.push(Step::Into(input, din));
                }
                if self.requires(kernel) {
                    let mut dk = vec![T::zero(); self.numel(kernel)];
                    kernels::conv2d_backward_kernel(
                        self.value(input),
                        ishape,
                        d_out,
                        kshape,
                        stride,
                        pad,
                        &mut dk,
                    );
                    steps.push(Step::Into(kernel, dk));
                }
            }
            Op::BiasAdd { x, bias } => {
                let (x, bias) = (*x, *bias);
                let s = self.shape(x);
                let (c, hw) = (s[0], s[1] * s[2]);
                steps.push(Step::Into(x, d_out.to_vec()));
                let db: Vec<T> = (0..c)
                    .map(|ci| d_out[ci * hw..(ci + 1) * hw].iter().copied().sum())
                    .collect();
                steps.push(Step::Into(bias, db));
            }
            Op::Bilinear { x, out_h, out_w } => {
                let (x, out_h, out_w) = (*x, *out_h, *out_w);
                let s = self.shape(x);
                let shape = (s[0], s[1], s[2]);
                let mut din = vec![T::zero(); self.numel(x)];
                kernels::bilinear_backward(d_out, shape, (out_h, out_w), &mut din);
                steps.push(Step::Into(x, din));
            }
            Op::SoftmaxChannels(x) => {
                let x = *x;
                let s = &self.nodes[idx].value;
                let sh = &self.nodes[idx].shape;
                let (k, hw) = (sh[0], sh[1] * sh[2]);
                let mut dx = vec![T::zero(); k * hw];
                for p in 0..hw {
                    let mut dot = T::zero();
                    for c in 0..k {
                        dot += d_out[c * hw + p] * s[c * hw + p];
                    }
                    for c in 0..k {
                        dx[c * hw + p] = s[c * hw + p] * (d_out[c * hw + p] - dot);
                    }
                }
                steps.push(Step::Into(x, dx));
            }
            Op::ConcatChannels(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.numel(p);
                    steps.push(Step::Into(p, d_out[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::MaxAll { x, argmax } => {
                steps.push(Step::At(*x, *argmax, d_out[0]));
            }
            Op::Gather { x, indices } => {
                let (x, indices) = (*x, Arc::clone(indices));
                let mut dx = vec![T::zero(); self.numel(x)];
                for (&i, &d) in indices.iter().zip(d_out) {
                    dx[i] += d;
                }
                steps.push(Step::Into(x, dx));
            }
            Op::WeightedSum { x, weights } => {
                let (x, weights) = (*x, Arc::clone(weights));
                let d = d_out[0];
                let dx: Vec<T> = weights.iter().map(|&w| w * d).collect();
                steps.push(Step::Into(x, dx));
            }
            Op::SumAll(x) => {
                let x = *x;
                let dx = vec![d_out[0]; self.numel(x)];
                steps.push(Step::Into(x, dx));
            }
            Op::PairL1 { features, pat } => {
                let (features, pat) = (*features, Arc::clone(pat));
                let channels = self.shape(features)[0];
                let mut dfeat = vec![T::zero(); self.numel(features)];
                kernels::pair_l1_backward(self.value(features), channels, &pat, d_out, &mut dfeat);
                steps.push(Step::Into(features, dfeat));
            }
            Op::PairRowSums { weights, pat } => {
                let (weights, pat) = (*weights, Arc::clone(pat));
                let mut dw = vec![T::zero(); pat.n_pairs()];
                for (p, &(i, j)) in pat.pairs.iter().enumerate() {
                    dw[p] = d_out[i as usize] + d_out[j as usize];
                }
                steps.push(Step::Into(weights, dw));
            }
            Op::SpmvPairs { weights, x, pat } => {
                let (weights, x, pat) = (*weights, *x, Arc::clone(pat));
                let k = self.shape(x)[0];
                if self.requires(x) {
                    // Pattern is symmetric, so the transpose mat-vec reuses it.
                    let mut dx = vec![T::zero(); self.numel(x)];
                    kernels::spmv_pairs(self.value(weights), &pat, d_out, k, &mut dx);
                    steps.push(Step::Into(x, dx));
                }
                if self.requires(weights) {
                    let mut dw = vec![T::zero(); pat.n_pairs()];
                    kernels::spmv_pairs_backward_weights(&pat, self.value(x), d_out, k, &mut dw);
                    steps.push(Step::Into(weights, dw));
                }
            }
            Op::RowScale { x, scale } => {
                let (x, scale) = (*x, *scale);
                let sh = self.shape(x);
                let (k, n) = (sh[0], sh[1]);
                let sv = self.value(scale).to_vec();
                if self.requires(x) {
                    let mut dx = vec![T::zero(); k * n];
                    for ki in 0..k {
                        for i in 0..n {
                            dx[ki * n + i] = d_out[ki * n + i] * sv[i];
                        }
                    }
                    steps.push(Step::Into(x, dx));
                }
                if self.requires(scale) {
                    let xv = self.value(x);
                    let mut ds = vec![T::zero(); n];
                    for ki in 0..k {
                        for i in 0..n {
                            ds[i] += d_out[ki * n + i] * xv[ki * n + i];
                        }
                    }
                    steps.push(Step::Into(scale, ds));
                }
            }
            Op::CropSpatial { x, h, w } => {
                let (x, h, w) = (*x, *h, *w);
                let xs = self.shape(x);
                let (c, full_h, full_w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * full_h * full_w];
                for ci in 0..c {
                    for y in 0..h {
                        let src = (ci * h + y) * w;
                        let dst = (ci * full_h + y) * full_w;
                        dx[dst..dst + w].copy_from_slice(&d_out[src..src + w]);
                    }
                }
                steps.push(Step::Into(x, dx));
            }
        }

        for step in steps {
            match step {
                Step::Into(v, delta) => self.accumulate(v, &delta),
                Step::At(v, i, d) => self.accumulate_at(v, i, d),
            }
        }
    }
}
