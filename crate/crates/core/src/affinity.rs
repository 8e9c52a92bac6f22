//! Pairwise pixel affinity, its row-stochastic transition matrix, and the
//! random-walk refinement of activation maps.
//!
//! Affinity between two in-radius pixels is `exp(-||f_i - f_j||_1)` over the
//! affinity features. Raising the weights to the Hadamard power `beta` and
//! normalizing each row (including the implicit unit self-weight) yields a
//! transition matrix whose rows are convex weights; applying it `t` times to
//! each flattened activation channel diffuses scores within regions of
//! similar features.
//!
//! Two routes are provided: plain value-level ops on [`Tensor`]s for
//! inference, and tape builders ([`tape_affinity_graph`], [`tape_random_walk`])
//! for the differentiable training path. Both compute the same function.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::PairPattern;
use crate::tape::{Tape, Var};
use crate::tensor::{el, Element, Tensor};

/// Which pixel pairs participate in the affinity graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborhoodSpec {
    /// Pairs with Euclidean grid distance <= radius (in feature-grid pixels).
    pub radius: usize,
    /// Whether the implicit unit self-weight enters the transition rows.
    pub include_self: bool,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec { radius: 5, include_self: true }
    }
}

impl NeighborhoodSpec {
    /// Validating constructor; negative radii are a contract error.
    pub fn new(radius: i64, include_self: bool) -> Result<Self> {
        if radius < 0 {
            return Err(Error::contract(format!("neighborhood radius must be >= 0, got {radius}")));
        }
        Ok(NeighborhoodSpec { radius: radius as usize, include_self })
    }

    pub fn pattern(&self, h: usize, w: usize) -> Arc<PairPattern> {
        Arc::new(PairPattern::build(h, w, self.radius))
    }
}

/// Sparse symmetric affinity graph: unordered in-radius pairs with weights in
/// `(0, 1]`. Self-weights are implicitly 1 and not stored.
#[derive(Clone, Debug)]
pub struct SparseAffinity<T: Element> {
    pattern: Arc<PairPattern>,
    weights: Vec<T>,
    include_self: bool,
}

impl<T: Element> SparseAffinity<T> {
    /// Builds from explicit parts; weights must lie in `(0, 1]`.
    pub fn from_parts(
        h: usize,
        w: usize,
        pairs: Vec<(u32, u32)>,
        weights: Vec<T>,
        include_self: bool,
    ) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(Error::dim(format!(
                "{} pairs with {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = weights.iter().find(|&&x| !(x > T::zero() && x <= T::one())) {
            return Err(Error::contract(format!("affinity weight {bad} outside (0, 1]")));
        }
        Ok(SparseAffinity {
            pattern: Arc::new(PairPattern::from_pairs(h, w, pairs)),
            weights,
            include_self,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.n_pixels()
    }

    pub fn pattern(&self) -> &Arc<PairPattern> {
        &self.pattern
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pattern.pairs
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Stored weight of the unordered pair `{i, j}`, if it is in the pattern.
    pub fn weight(&self, i: usize, j: usize) -> Option<T> {
        let key = (i.min(j) as u32, i.max(j) as u32);
        self.pattern.pairs.binary_search(&key).ok().map(|p| self.weights[p])
    }
}

/// Row-stochastic transition matrix `T = D^-1 W^beta` over an affinity
/// pattern plus its diagonal.
#[derive(Clone, Debug)]
pub struct TransitionMatrix<T: Element> {
    pattern: Arc<PairPattern>,
    /// `W_ij^beta` per stored pair.
    powered: Vec<T>,
    /// `1 / D_i` per pixel.
    dinv: Vec<T>,
    /// 1 when the unit self-weight participates, else 0.
    self_weight: T,
    pub beta: f64,
}

impl<T: Element> TransitionMatrix<T> {
    pub fn n(&self) -> usize {
        self.pattern.n_pixels()
    }

    /// Dense entry `T[i][j]` (zero off the pattern).
    pub fn entry(&self, i: usize, j: usize) -> T {
        if i == j {
            return self.self_weight * self.dinv[i];
        }
        let key = (i.min(j) as u32, i.max(j) as u32);
        match self.pattern.pairs.binary_search(&key) {
            Ok(p) => self.powered[p] * self.dinv[i],
            Err(_) => T::zero(),
        }
    }

    pub fn row_sum(&self, i: usize) -> T {
        let mut acc = self.self_weight;
        for &(p, _) in &self.pattern.incident
            [self.pattern.row_ptr[i] as usize..self.pattern.row_ptr[i + 1] as usize]
        {
            acc += self.powered[p as usize];
        }
        acc * self.dinv[i]
    }
}

/// Eq. 1: `W_ij = exp(-||f(x_i) - f(x_j)||_1)` for every in-radius pair.
pub fn affinity_weights<T: Element>(
    features: &Tensor<T>,
    spec: &NeighborhoodSpec,
) -> Result<SparseAffinity<T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("affinity features must be [C,h,w], got {s:?}")));
    }
    let pattern = spec.pattern(s[1], s[2]);
    affinity_weights_with_pattern(features, pattern, spec.include_self)
}

/// [`affinity_weights`] with a prebuilt (cached) pattern.
pub fn affinity_weights_with_pattern<T: Element>(
    features: &Tensor<T>,
    pattern: Arc<PairPattern>,
    include_self: bool,
) -> Result<SparseAffinity<T>> {
    let s = features.shape();
    if s.len() != 3 || s[1] != pattern.h || s[2] != pattern.w {
        return Err(Error::dim(format!(
            "features {s:?} do not match pattern grid {}x{}",
            pattern.h, pattern.w
        )));
    }
    let dists = crate::kernels::pair_l1_forward(features.data(), s[0], &pattern);
    let weights: Vec<T> = dists.iter().map(|&d| (-d).exp()).collect();
    Ok(SparseAffinity { pattern, weights, include_self })
}

/// Eq. 2: `T = D^-1 W^beta` with `D_ii = sum_j W_ij^beta` over the symmetric
/// closure including the self-weight.
pub fn transition_matrix<T: Element>(
    w: &SparseAffinity<T>,
    beta: f64,
) -> Result<TransitionMatrix<T>> {
    if beta < 1.0 {
        return Err(Error::contract(format!("beta must be >= 1, got {beta}")));
    }
    let b: T = el(beta);
    let powered: Vec<T> = w.weights.iter().map(|&x| x.powf(b)).collect();
    let row_off = crate::kernels::pair_row_sums(&powered, &w.pattern);
    let self_weight = if w.include_self { T::one() } else { T::zero() };
    let mut dinv = Vec::with_capacity(row_off.len());
    for (i, &off) in row_off.iter().enumerate() {
        let d = off + self_weight;
        if d <= T::zero() {
            return Err(Error::contract(format!(
                "pixel {i} has an empty transition row; include_self=false requires every pixel to have a neighbor"
            )));
        }
        dinv.push(T::one() / d);
    }
    Ok(TransitionMatrix { pattern: Arc::clone(&w.pattern), powered, dinv, self_weight, beta })
}

/// Applies `T` to each flattened activation channel `t` times.
pub fn random_walk_refine<T: Element>(
    act: &Tensor<T>,
    tm: &TransitionMatrix<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    let s = act.shape();
    if s.len() != 3 || s[1] != tm.pattern.h || s[2] != tm.pattern.w {
        return Err(Error::dim(format!(
            "activations {s:?} do not match transition grid {}x{}",
            tm.pattern.h, tm.pattern.w
        )));
    }
    let (k, n) = (s[0], tm.n());
    let mut x = act.data().to_vec();
    let mut buf = vec![T::zero(); k * n];
    for _ in 0..steps {
        crate::kernels::spmv_pairs(&tm.powered, &tm.pattern, &x, k, &mut buf);
        for ki in 0..k {
            for i in 0..n {
                let idx = ki * n + i;
                x[idx] = (tm.self_weight * x[idx] + buf[idx]) * tm.dinv[i];
            }
        }
    }
    Tensor::new(s.to_vec(), x)
}

/// Tape-side handles for the differentiable affinity graph.
pub struct AffinityGraphVars {
    /// `||f_i - f_j||_1` per pair.
    pub distances: Var,
    /// `W_ij^beta = exp(-beta * d)` per pair.
    pub powered: Var,
    /// `1 / D_i` per pixel.
    pub dinv: Var,
}

/// Builds Eq. 1 + Eq. 2 on the tape, differentiable w.r.t. `features`.
pub fn tape_affinity_graph<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    pattern: &Arc<PairPattern>,
    beta: f64,
    include_self: bool,
) -> Result<AffinityGraphVars> {
    if beta < 1.0 {
        return Err(Error::contract(format!("beta must be >= 1, got {beta}")));
    }
    if !include_self {
        let n = pattern.n_pixels();
        for i in 0..n {
            if pattern.row_ptr[i] == pattern.row_ptr[i + 1] {
                return Err(Error::contract(format!(
                    "pixel {i} has an empty transition row; include_self=false requires every pixel to have a neighbor"
                )));
            }
        }
    }
    let distances = tape.pair_l1(features, Arc::clone(pattern))?;
    let scaled = tape.affine(distances, el(-beta), T::zero());
    let powered = tape.exp(scaled);
    let row_off = tape.pair_row_sums(powered, Arc::clone(pattern))?;
    let self_w = if include_self { T::one() } else { T::zero() };
    let denom = tape.affine(row_off, T::one(), self_w);
    let dinv = tape.recip(denom);
    Ok(AffinityGraphVars { distances, powered, dinv })
}

/// Runs `steps` random-walk iterations on the tape: per step,
/// `x <- dinv .* (self_w * x + W^beta x)` channel-wise.
pub fn tape_random_walk<T: Element>(
    tape: &mut Tape<T>,
    act: Var,
    graph: &AffinityGraphVars,
    pattern: &Arc<PairPattern>,
    steps: usize,
    include_self: bool,
) -> Result<Var> {
    let shape = tape.shape(act).to_vec();
    if shape.len() != 3 || shape[1] != pattern.h || shape[2] != pattern.w {
        return Err(Error::dim(format!(
            "activations {shape:?} do not match transition grid {}x{}",
            pattern.h, pattern.w
        )));
    }
    let (k, n) = (shape[0], pattern.n_pixels());
    let mut x = tape.reshape(act, vec![k, n])?;
    for _ in 0..steps {
        let neigh = tape.spmv_pairs(graph.powered, x, Arc::clone(pattern))?;
        let mixed = if include_self { tape.add(x, neigh)? } else { neigh };
        x = tape.row_scale(mixed, graph.dinv)?;
    }
    tape.reshape(x, shape)
}
