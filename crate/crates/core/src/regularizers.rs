//! The group-separable regularizer, its strongly convex elastic-net
//! envelope, proximal operators, Bregman divergences, and subgradient
//! bookkeeping.
//!
//! With envelope parameter `delta`, the envelope is
//! `J_delta(x) = ||x||^2 / (2 delta) + J(x)` and the mirror map is
//! `x -> prox_{delta J}(delta x)`. A pair `(theta, v)` is feasible when
//! `theta = prox_{delta J}(delta v)`, which characterizes
//! `v \in \partial J_delta(theta)`.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::param_space::{GroupLayout, GroupRole, ParamVector};

/// Componentwise tolerance for the feasibility check `prox(delta v) = theta`.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RegError {
    #[error("vector length {got} does not match layout dimension {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("regularizer needs one term per group: {terms} terms for {groups} groups")]
    TermCountMismatch { terms: usize, groups: usize },
    #[error("{what} must be strictly positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

/// Per-group regularizer term.
///
/// `GroupL2` uses the block weight `sqrt(n)` where `n` is the block size:
/// the whole group for ordinary groups, each k-by-k kernel slice for
/// convolutional kernel groups (the norm that zeroes entire kernels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegTerm {
    Zero,
    L1 { lambda: f64 },
    GroupL2 { lambda: f64 },
}

/// A regularizer: one term per layout group plus the envelope parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    layout: Arc<GroupLayout>,
    terms: Vec<RegTerm>,
    delta: f64,
}

impl RegularizerSpec {
    pub fn new(
        layout: Arc<GroupLayout>,
        terms: Vec<RegTerm>,
        delta: f64,
    ) -> Result<Self, RegError> {
        if terms.len() != layout.num_groups() {
            return Err(RegError::TermCountMismatch {
                terms: terms.len(),
                groups: layout.num_groups(),
            });
        }
        if !(delta > 0.0) {
            return Err(RegError::NonPositive { what: "delta", value: delta });
        }
        for t in &terms {
            if let RegTerm::L1 { lambda } | RegTerm::GroupL2 { lambda } = t {
                if !(*lambda > 0.0) {
                    return Err(RegError::NonPositive { what: "lambda", value: *lambda });
                }
            }
        }
        Ok(RegularizerSpec { layout, terms, delta })
    }

    /// Same term on every group.
    pub fn uniform(
        layout: Arc<GroupLayout>,
        term: RegTerm,
        delta: f64,
    ) -> Result<Self, RegError> {
        let terms = vec![term; layout.num_groups()];
        RegularizerSpec::new(layout, terms, delta)
    }

    /// `term` on weight and conv-kernel groups, `Zero` on bias groups.
    pub fn on_weights(
        layout: Arc<GroupLayout>,
        term: RegTerm,
        delta: f64,
    ) -> Result<Self, RegError> {
        let terms = layout
            .groups()
            .iter()
            .map(|g| match g.role {
                GroupRole::Bias => RegTerm::Zero,
                GroupRole::Weight | GroupRole::ConvKernel => term,
            })
            .collect();
        RegularizerSpec::new(layout, terms, delta)
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn terms(&self) -> &[RegTerm] {
        &self.terms
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn check_dim(&self, len: usize) -> Result<(), RegError> {
        if len == self.layout.total_dim() {
            Ok(())
        } else {
            Err(RegError::LayoutMismatch { got: len, expected: self.layout.total_dim() })
        }
    }

    /// Visits the prox blocks of group `g`: the whole group, or each kernel
    /// slice for conv groups under `GroupL2`.
    fn for_each_block(&self, g: usize, mut f: impl FnMut(Range<usize>)) {
        let spec = self.layout.group(g);
        let range = self.layout.range(g);
        match (self.terms[g], spec.conv) {
            (RegTerm::GroupL2 { .. }, Some(shape)) => {
                for i in 0..shape.c_in {
                    for j in 0..shape.c_out {
                        let rel = shape.slice_range(i, j);
                        f(range.start + rel.start..range.start + rel.end);
                    }
                }
            }
            _ => f(range),
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Evaluates `J(theta)`, the sum of the per-group terms.
pub fn eval_j(spec: &RegularizerSpec, theta: &[f64]) -> Result<f64, RegError> {
    spec.check_dim(theta.len())?;
    let mut total = 0.0;
    for g in 0..spec.layout.num_groups() {
        match spec.terms[g] {
            RegTerm::Zero => {}
            RegTerm::L1 { lambda } => {
                let r = spec.layout.range(g);
                total += lambda * theta[r].iter().map(|v| v.abs()).sum::<f64>();
            }
            RegTerm::GroupL2 { lambda } => {
                spec.for_each_block(g, |b| {
                    let n = (b.end - b.start) as f64;
                    total += lambda * n.sqrt() * norm2(&theta[b]);
                });
            }
        }
    }
    Ok(total)
}

/// Evaluates the elastic-net envelope `J_delta(theta) = ||theta||^2/(2 delta) + J(theta)`.
pub fn eval_j_delta(spec: &RegularizerSpec, theta: &[f64]) -> Result<f64, RegError> {
    let j = eval_j(spec, theta)?;
    let sq: f64 = theta.iter().map(|v| v * v).sum();
    Ok(sq / (2.0 * spec.delta) + j)
}

/// Computes `prox_{delta J}(x)`. Callers evaluating the mirror map pass
/// `x = delta * v`.
///
/// Thresholded components come out as exact zeros; a component sitting
/// exactly on the threshold maps to zero.
pub fn prox(spec: &RegularizerSpec, x: &[f64]) -> Result<ParamVector, RegError> {
    spec.check_dim(x.len())?;
    let delta = spec.delta;
    let mut out = x.to_vec();
    for g in 0..spec.layout.num_groups() {
        match spec.terms[g] {
            RegTerm::Zero => {}
            RegTerm::L1 { lambda } => {
                let thr = delta * lambda;
                for v in &mut out[spec.layout.range(g)] {
                    let mag = v.abs() - thr;
                    *v = if mag > 0.0 { v.signum() * mag } else { 0.0 };
                }
            }
            RegTerm::GroupL2 { lambda } => {
                spec.for_each_block(g, |b| {
                    let n = (b.end - b.start) as f64;
                    let thr = delta * lambda * n.sqrt();
                    let norm = norm2(&x[b.clone()]);
                    if norm > thr {
                        let factor = 1.0 - thr / norm;
                        for v in &mut out[b] {
                            *v *= factor;
                        }
                    } else {
                        out[b].fill(0.0);
                    }
                });
            }
        }
    }
    Ok(ParamVector::new(spec.layout.clone(), out).expect("prox preserves dimension"))
}

/// True iff `prox_{delta J}(delta v) = theta` within [`FEASIBILITY_TOL`] per
/// component, i.e. `v` is a subgradient of `J_delta` at `theta`.
pub fn contains_subgradient(spec: &RegularizerSpec, theta: &[f64], v: &[f64]) -> bool {
    feasibility_error(spec, theta, v).is_some_and(|e| e <= FEASIBILITY_TOL)
}

/// Max componentwise deviation `|prox(delta v) - theta|`, or `None` on a
/// dimension mismatch.
pub fn feasibility_error(spec: &RegularizerSpec, theta: &[f64], v: &[f64]) -> Option<f64> {
    if theta.len() != v.len() {
        return None;
    }
    let scaled: Vec<f64> = v.iter().map(|vi| spec.delta * vi).collect();
    let mapped = prox(spec, &scaled).ok()?;
    Some(
        mapped
            .as_slice()
            .iter()
            .zip(theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    )
}

/// The canonical `v = theta/delta + p` with the minimal-norm subgradient
/// `p` of `J` at `theta` (zero on zero components and zero blocks).
pub fn initial_subgradient(spec: &RegularizerSpec, theta: &[f64]) -> Result<Vec<f64>, RegError> {
    spec.check_dim(theta.len())?;
    let delta = spec.delta;
    let mut v: Vec<f64> = theta.iter().map(|t| t / delta).collect();
    for g in 0..spec.layout.num_groups() {
        match spec.terms[g] {
            RegTerm::Zero => {}
            RegTerm::L1 { lambda } => {
                for i in spec.layout.range(g) {
                    if theta[i] != 0.0 {
                        v[i] += lambda * theta[i].signum();
                    }
                }
            }
            RegTerm::GroupL2 { lambda } => {
                spec.for_each_block(g, |b| {
                    let norm = norm2(&theta[b.clone()]);
                    if norm > 0.0 {
                        let n = (b.end - b.start) as f64;
                        let scale = lambda * n.sqrt() / norm;
                        for i in b {
                            v[i] += scale * theta[i];
                        }
                    }
                });
            }
        }
    }
    Ok(v)
}

/// The Bregman divergence of the envelope,
/// `D^p(theta_tilde, theta) = J_delta(theta_tilde) - J_delta(theta) - <p, theta_tilde - theta>`,
/// for `p` a subgradient of `J_delta` at `theta`.
pub fn bregman_div(
    spec: &RegularizerSpec,
    theta_tilde: &[f64],
    theta: &[f64],
    p: &[f64],
) -> Result<f64, RegError> {
    debug_assert!(
        contains_subgradient(spec, theta, p),
        "bregman_div called with p not in the subdifferential at theta"
    );
    let lhs = eval_j_delta(spec, theta_tilde)?;
    let rhs = eval_j_delta(spec, theta)?;
    let inner: f64 = p
        .iter()
        .zip(theta_tilde.iter().zip(theta))
        .map(|(pi, (a, b))| pi * (a - b))
        .sum();
    Ok(lhs - rhs - inner)
}

/// The symmetrized Bregman divergence `<v - v_tilde, theta - theta_tilde>`,
/// equal to the sum of the two one-sided divergences.
pub fn sym_bregman(theta: &[f64], theta_tilde: &[f64], v: &[f64], v_tilde: &[f64]) -> f64 {
    v.iter()
        .zip(v_tilde)
        .zip(theta.iter().zip(theta_tilde))
        .map(|((vi, vti), (ti, tti))| (vi - vti) * (ti - tti))
        .sum()
}

/// The primal/subgradient pair evolved by the Bregman iterations.
///
/// Invariant: `theta = prox_{delta J}(delta v)`.
#[derive(Debug, Clone)]
pub struct BregmanState {
    theta: ParamVector,
    v: Vec<f64>,
    spec: Arc<RegularizerSpec>,
}

impl BregmanState {
    /// Wraps a pair, asserting feasibility in debug builds.
    pub fn new(theta: ParamVector, v: Vec<f64>, spec: Arc<RegularizerSpec>) -> Result<Self, RegError> {
        spec.check_dim(theta.len())?;
        spec.check_dim(v.len())?;
        let state = BregmanState { theta, v, spec };
        debug_assert!(
            state.is_feasible(),
            "BregmanState constructed from an infeasible (theta, v) pair"
        );
        Ok(state)
    }

    /// Starts from `theta` with the canonical initial subgradient.
    pub fn from_theta(theta: ParamVector, spec: Arc<RegularizerSpec>) -> Result<Self, RegError> {
        let v = initial_subgradient(&spec, theta.as_slice())?;
        BregmanState::new(theta, v, spec)
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn spec(&self) -> &Arc<RegularizerSpec> {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_feasible(&self) -> bool {
        contains_subgradient(&self.spec, self.theta.as_slice(), &self.v)
    }

    pub fn feasibility_error(&self) -> f64 {
        feasibility_error(&self.spec, self.theta.as_slice(), &self.v)
            .expect("state dimensions agree")
    }

    pub fn into_parts(self) -> (ParamVector, Vec<f64>) {
        (self.theta, self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_space::GroupSpec;
    use proptest::prelude::*;

    fn l1_spec(d: usize, lambda: f64, delta: f64) -> RegularizerSpec {
        RegularizerSpec::uniform(GroupLayout::scalar_weights(d), RegTerm::L1 { lambda }, delta)
            .unwrap()
    }

    fn group_spec(d: usize, lambda: f64, delta: f64) -> RegularizerSpec {
        RegularizerSpec::uniform(GroupLayout::single(d), RegTerm::GroupL2 { lambda }, delta)
            .unwrap()
    }

    fn zero_spec(d: usize, delta: f64) -> RegularizerSpec {
        RegularizerSpec::uniform(GroupLayout::scalar_weights(d), RegTerm::Zero, delta).unwrap()
    }

    #[test]
    fn eval_j_l1() {
        let spec = l1_spec(2, 0.5, 1.0);
        assert_eq!(eval_j(&spec, &[2.0, -1.0]).unwrap(), 1.5);
    }

    #[test]
    fn eval_j_group_l2_uses_sqrt_block_size() {
        let spec = group_spec(4, 1.0, 1.0);
        assert_eq!(eval_j(&spec, &[3.0, 0.0, 0.0, 0.0]).unwrap(), 6.0);
    }

    #[test]
    fn eval_j_zero_terms() {
        let spec = zero_spec(3, 1.0);
        assert_eq!(eval_j(&spec, &[5.0, -2.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn prox_l1_soft_thresholds() {
        let spec = l1_spec(3, 0.5, 1.0);
        let out = prox(&spec, &[2.0, 0.3, -1.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 0.0, -0.5]);
    }

    #[test]
    fn prox_identity_without_regularization() {
        let spec = zero_spec(3, 1.0);
        let x = [2.0, -0.1, 0.0];
        assert_eq!(prox(&spec, &x).unwrap().as_slice(), &x);
    }

    #[test]
    fn prox_group_l2_block_shrinkage() {
        let spec = group_spec(4, 1.0, 1.0);
        let out = prox(&spec, &[3.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = [3.0 * (1.0 - 2.0 / 3.0), 0.0, 0.0, 0.0];
        for (a, b) in out.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn prox_group_l2_zero_block_is_zero() {
        let spec = group_spec(3, 2.0, 0.7);
        assert_eq!(prox(&spec, &[0.0, 0.0, 0.0]).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn prox_exact_zero_at_threshold() {
        // |x| == delta*lambda must produce literal 0.0.
        let spec = l1_spec(1, 0.25, 2.0);
        assert_eq!(prox(&spec, &[0.5]).unwrap().as_slice(), &[0.0]);
        assert_eq!(prox(&spec, &[-0.5]).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn prox_conv_group_l2_acts_per_kernel_slice() {
        use crate::param_space::ConvShape;
        let shape = ConvShape { c_in: 1, c_out: 2, k: 1 };
        let layout =
            Arc::new(GroupLayout::new(vec![GroupSpec::conv_kernel("c", shape)]).unwrap());
        let spec =
            RegularizerSpec::uniform(layout, RegTerm::GroupL2 { lambda: 1.0 }, 1.0).unwrap();
        // Two 1x1 slices: thresholds are 1 each, not a joint norm.
        let out = prox(&spec, &[3.0, 0.5]).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn subgradient_membership_examples() {
        let spec = l1_spec(1, 1.0, 1.0);
        assert!(contains_subgradient(&spec, &[1.0], &[2.0]));
        assert!(contains_subgradient(&spec, &[0.0], &[0.5]));
        assert!(!contains_subgradient(&spec, &[1.0], &[1.0]));
    }

    #[test]
    fn initial_subgradient_l1() {
        let spec = l1_spec(2, 1.0, 1.0);
        assert_eq!(initial_subgradient(&spec, &[2.0, 0.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn initial_subgradient_zero_vector() {
        let spec = l1_spec(3, 0.7, 2.0);
        assert_eq!(initial_subgradient(&spec, &[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn initial_subgradient_group_l2() {
        let spec = group_spec(1, 1.0, 2.0);
        assert_eq!(initial_subgradient(&spec, &[4.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn initial_subgradient_is_feasible() {
        let spec = group_spec(4, 0.3, 1.7);
        let theta = [1.0, -2.0, 0.5, 3.0];
        let v = initial_subgradient(&spec, &theta).unwrap();
        assert!(contains_subgradient(&spec, &theta, &v));
    }

    #[test]
    fn bregman_div_at_same_point_is_zero() {
        let spec = l1_spec(2, 1.0, 1.0);
        let theta = [1.0, -0.5];
        let p = initial_subgradient(&spec, &theta).unwrap();
        assert_eq!(bregman_div(&spec, &theta, &theta, &p).unwrap(), 0.0);
    }

    #[test]
    fn bregman_div_quadratic_case() {
        // J = 0, delta = 1: D = ||theta_tilde - theta||^2 / 2 with p = theta.
        let spec = zero_spec(2, 1.0);
        let d = bregman_div(&spec, &[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, 0.5);
    }

    #[test]
    fn bregman_div_l1_example() {
        let spec = l1_spec(1, 1.0, 1.0);
        let d = bregman_div(&spec, &[0.0], &[1.0], &[2.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sym_bregman_examples() {
        assert_eq!(sym_bregman(&[1.0], &[1.0], &[2.0], &[2.0]), 0.0);
        // J = 0, delta = 1: equals ||theta - theta_tilde||^2.
        assert_eq!(sym_bregman(&[1.0], &[0.0], &[1.0], &[0.0]), 1.0);
    }

    #[test]
    fn sym_bregman_is_sum_of_one_sided_divergences() {
        let spec = Arc::new(l1_spec(4, 0.8, 1.3));
        let mut rng = crate::rng::stream_rng(7, 0);
        use rand::Rng;
        for _ in 0..100 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let vt: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * spec.delta()).collect();
            let scaled_t: Vec<f64> = vt.iter().map(|x| x * spec.delta()).collect();
            let theta = prox(&spec, &scaled).unwrap();
            let theta_t = prox(&spec, &scaled_t).unwrap();
            let s = sym_bregman(theta.as_slice(), theta_t.as_slice(), &v, &vt);
            let d1 = bregman_div(&spec, theta_t.as_slice(), theta.as_slice(), &v).unwrap();
            let d2 = bregman_div(&spec, theta.as_slice(), theta_t.as_slice(), &vt).unwrap();
            assert!((s - (d1 + d2)).abs() <= 1e-12 * s.abs().max(1.0), "{s} vs {}", d1 + d2);
            // Strong convexity lower bound.
            let sq: f64 =
                theta.as_slice().iter().zip(theta_t.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(s >= sq / spec.delta() - 1e-12);
        }
    }

    #[test]
    fn state_from_theta_is_feasible() {
        let spec = Arc::new(l1_spec(3, 0.5, 2.0));
        let theta =
            ParamVector::new(spec.layout().clone(), vec![1.0, 0.0, -4.0]).unwrap();
        let state = BregmanState::from_theta(theta, spec).unwrap();
        assert!(state.is_feasible());
        assert_eq!(state.feasibility_error(), 0.0);
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(
            x in proptest::collection::vec(-5.0_f64..5.0, 6),
            y in proptest::collection::vec(-5.0_f64..5.0, 6),
            lambda in 0.05_f64..2.0,
            delta in 0.1_f64..3.0,
        ) {
            for spec in [l1_spec(6, lambda, delta), group_spec(6, lambda, delta)] {
                let px = prox(&spec, &x).unwrap();
                let py = prox(&spec, &y).unwrap();
                let dist_p: f64 = px.as_slice().iter().zip(py.as_slice())
                    .map(|(a, b)| (a - b).powi(2)).sum();
                let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(dist_p.sqrt() <= dist.sqrt() + 1e-12);
            }
        }

        #[test]
        fn soft_shrinkage_forms_agree(
            v in proptest::collection::vec(-4.0_f64..4.0, 5),
            lambda in 0.05_f64..2.0,
            delta in 0.1_f64..3.0,
        ) {
            // prox_{delta J}(delta v) = delta * sign(v) * max(|v| - lambda, 0)
            let spec = l1_spec(5, lambda, delta);
            let scaled: Vec<f64> = v.iter().map(|x| delta * x).collect();
            let lhs = prox(&spec, &scaled).unwrap();
            for (l, vi) in lhs.as_slice().iter().zip(&v) {
                let m = vi.abs() - lambda;
                let rhs = if m > 0.0 { delta * vi.signum() * m } else { 0.0 };
                prop_assert!((l - rhs).abs() <= 1e-12 * l.abs().max(1.0));
            }
        }

        #[test]
        fn bregman_div_strong_convexity(
            v in proptest::collection::vec(-3.0_f64..3.0, 4),
            t in proptest::collection::vec(-3.0_f64..3.0, 4),
            lambda in 0.05_f64..1.5,
            delta in 0.2_f64..2.5,
        ) {
            let spec = l1_spec(4, lambda, delta);
            let scaled: Vec<f64> = v.iter().map(|x| delta * x).collect();
            let theta = prox(&spec, &scaled).unwrap();
            let d = bregman_div(&spec, &t, theta.as_slice(), &v).unwrap();
            let sq: f64 = t.iter().zip(theta.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(d >= sq / (2.0 * delta) - 1e-10);
            prop_assert!(d >= -1e-12);
        }
    }
}
