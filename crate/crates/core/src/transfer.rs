//! Restriction and prolongation between the fine parameter space and the
//! coarse space of selected groups, the coarse objective, subgradient
//! transfer, and the coarse-invocation criterion.
//!
//! The restriction keeps whole groups: its rows are standard unit vectors,
//! the prolongation is its transpose, and `restrict . prolong` is the
//! identity on the coarse space.

use std::sync::Arc;

use thiserror::Error;

use crate::models::{FiniteSumProblem, SampleBatch};
use crate::param_space::{nonzero_groups, GroupLayout, ParamVector};
use crate::regularizers::{contains_subgradient, BregmanState, RegularizerSpec};

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error("vector length {got} does not match expected {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("selected group index {index} out of range for {groups} groups")]
    BadGroupIndex { index: usize, groups: usize },
    #[error("selected group indices must be strictly increasing and nonempty")]
    BadSelection,
    #[error("{context}: (theta, v) is not a feasible subgradient pair")]
    InfeasibleInput { context: &'static str },
    #[error("restriction and state layouts disagree")]
    LayoutDisagreement,
}

/// How the restriction chooses groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RestrictionPolicy {
    /// Keep the groups that are nonzero in the current iterate.
    NonzeroGroups,
    /// Keep everything (the restriction is the identity).
    AllGroups,
    /// Keep an explicit, strictly increasing list of group indices.
    Explicit(Vec<usize>),
}

/// The iteration-k restriction: an ordered selection of fine groups.
/// Prolongation is its transpose.
#[derive(Debug, Clone)]
pub struct RestrictionMap {
    selected: Vec<usize>,
    fine_layout: Arc<GroupLayout>,
    coarse_layout: Arc<GroupLayout>,
}

impl RestrictionMap {
    pub fn new(fine_layout: Arc<GroupLayout>, selected: Vec<usize>) -> Result<Self, TransferError> {
        if selected.is_empty() || selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TransferError::BadSelection);
        }
        if let Some(&bad) = selected.iter().find(|&&g| g >= fine_layout.num_groups()) {
            return Err(TransferError::BadGroupIndex {
                index: bad,
                groups: fine_layout.num_groups(),
            });
        }
        let coarse_groups = selected.iter().map(|&g| fine_layout.group(g).clone()).collect();
        let coarse_layout =
            Arc::new(GroupLayout::new(coarse_groups).expect("selection of a valid layout"));
        Ok(RestrictionMap { selected, fine_layout, coarse_layout })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn num_selected(&self) -> usize {
        self.selected.len()
    }

    pub fn fine_layout(&self) -> &Arc<GroupLayout> {
        &self.fine_layout
    }

    pub fn coarse_layout(&self) -> &Arc<GroupLayout> {
        &self.coarse_layout
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_layout.total_dim()
    }

    pub fn fine_dim(&self) -> usize {
        self.fine_layout.total_dim()
    }

    /// True when every fine group is selected.
    pub fn is_identity(&self) -> bool {
        self.selected.len() == self.fine_layout.num_groups()
    }

    /// Fine group indices not selected, in increasing order.
    pub fn unselected(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut it = self.selected.iter().peekable();
        for g in 0..self.fine_layout.num_groups() {
            if it.peek() == Some(&&g) {
                it.next();
            } else {
                out.push(g);
            }
        }
        out
    }
}

/// Builds the restriction for `theta` under `policy`. Returns `Ok(None)`
/// when the policy selects nothing (all groups zero); the caller falls back
/// to a fine step.
pub fn build_restriction(
    theta: &ParamVector,
    policy: &RestrictionPolicy,
) -> Result<Option<RestrictionMap>, TransferError> {
    let layout = theta.layout().clone();
    let selected = match policy {
        RestrictionPolicy::NonzeroGroups => nonzero_groups(theta, 0.0).active_groups(),
        RestrictionPolicy::AllGroups => (0..layout.num_groups()).collect(),
        RestrictionPolicy::Explicit(list) => list.clone(),
    };
    if selected.is_empty() {
        return Ok(None);
    }
    RestrictionMap::new(layout, selected).map(Some)
}

/// `R x`: concatenation of the selected group slices, in order.
pub fn restrict(map: &RestrictionMap, x: &[f64]) -> Result<Vec<f64>, TransferError> {
    if x.len() != map.fine_dim() {
        return Err(TransferError::LayoutMismatch { got: x.len(), expected: map.fine_dim() });
    }
    let mut out = Vec::with_capacity(map.coarse_dim());
    for &g in &map.selected {
        out.extend_from_slice(&x[map.fine_layout.range(g)]);
    }
    Ok(out)
}

/// `P x_hat = R^T x_hat`: selected groups are filled from the coarse
/// vector, every other component is exactly zero.
pub fn prolong(map: &RestrictionMap, x_hat: &[f64]) -> Result<Vec<f64>, TransferError> {
    if x_hat.len() != map.coarse_dim() {
        return Err(TransferError::LayoutMismatch {
            got: x_hat.len(),
            expected: map.coarse_dim(),
        });
    }
    let mut out = vec![0.0; map.fine_dim()];
    scatter(map, x_hat, &mut out);
    Ok(out)
}

/// Overwrites the selected group slices of `fine` with the coarse values.
fn scatter(map: &RestrictionMap, x_hat: &[f64], fine: &mut [f64]) {
    let mut pos = 0usize;
    for &g in &map.selected {
        let range = map.fine_layout.range(g);
        let len = range.end - range.start;
        fine[range].copy_from_slice(&x_hat[pos..pos + len]);
        pos += len;
    }
}

/// The coarse regularizer: the selected groups' terms re-indexed to the
/// coarse layout, with the same envelope parameter.
pub fn coarse_regularizer(spec: &RegularizerSpec, map: &RestrictionMap) -> Arc<RegularizerSpec> {
    let terms = map.selected.iter().map(|&g| spec.terms()[g]).collect();
    Arc::new(
        RegularizerSpec::new(map.coarse_layout().clone(), terms, spec.delta())
            .expect("selection of a valid regularizer"),
    )
}

/// The coarse objective
/// `L_hat(theta_hat) = L(anchor + P(theta_hat - R anchor))`.
///
/// The anchor is captured by value; the fine iterate may move on
/// independently. Lifting overwrites the selected slices, so
/// `lift(R anchor)` reproduces the anchor bitwise and first-order coherence
/// `grad L_hat(R anchor) = R grad L(anchor)` holds exactly, by the same
/// gradient code path.
#[derive(Debug, Clone)]
pub struct CoarseProblem {
    problem: FiniteSumProblem,
    anchor: Vec<f64>,
    anchor_restricted: Vec<f64>,
    map: RestrictionMap,
}

impl CoarseProblem {
    pub fn new(
        problem: &FiniteSumProblem,
        anchor: &ParamVector,
        map: &RestrictionMap,
    ) -> Result<Self, TransferError> {
        if anchor.len() != map.fine_dim() || problem.dim() != map.fine_dim() {
            return Err(TransferError::LayoutMismatch {
                got: anchor.len(),
                expected: map.fine_dim(),
            });
        }
        let anchor_restricted = restrict(map, anchor.as_slice())?;
        Ok(CoarseProblem {
            problem: problem.clone(),
            anchor: anchor.as_slice().to_vec(),
            anchor_restricted,
            map: map.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.map.coarse_dim()
    }

    pub fn map(&self) -> &RestrictionMap {
        &self.map
    }

    pub fn num_terms(&self) -> usize {
        self.problem.num_terms()
    }

    /// `R anchor`, the coarse starting point.
    pub fn anchor_restricted(&self) -> &[f64] {
        &self.anchor_restricted
    }

    /// `anchor + P(theta_hat - R anchor)` as a fine vector.
    pub fn lift(&self, theta_hat: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta_hat.len(), self.dim());
        let mut fine = self.anchor.clone();
        scatter(&self.map, theta_hat, &mut fine);
        fine
    }

    pub fn loss(&self, theta_hat: &[f64]) -> f64 {
        self.problem.loss(&self.lift(theta_hat))
    }

    /// Exact coarse gradient `R grad L(lift(theta_hat))`.
    pub fn gradient(&self, theta_hat: &[f64]) -> Vec<f64> {
        let fine = self.problem.full_gradient(&self.lift(theta_hat));
        restrict(&self.map, &fine).expect("gradient has fine dimension")
    }

    /// Minibatch coarse gradient `R grad L_batch(lift(theta_hat))`.
    pub fn minibatch_gradient(&self, theta_hat: &[f64], batch: &SampleBatch) -> Vec<f64> {
        let fine = self.problem.minibatch_gradient(&self.lift(theta_hat), batch);
        restrict(&self.map, &fine).expect("gradient has fine dimension")
    }
}

#[cfg(debug_assertions)]
fn check_feasible(
    spec: &RegularizerSpec,
    theta: &[f64],
    v: &[f64],
    context: &'static str,
) -> Result<(), TransferError> {
    if contains_subgradient(spec, theta, v) {
        Ok(())
    } else {
        Err(TransferError::InfeasibleInput { context })
    }
}

#[cfg(not(debug_assertions))]
fn check_feasible(
    _spec: &RegularizerSpec,
    _theta: &[f64],
    _v: &[f64],
    _context: &'static str,
) -> Result<(), TransferError> {
    Ok(())
}

/// Restricts a feasible fine pair to the coarse level: `(R theta, R v)` is
/// feasible for the coarse regularizer.
pub fn restrict_state(
    state: &BregmanState,
    map: &RestrictionMap,
) -> Result<BregmanState, TransferError> {
    if !Arc::ptr_eq(state.spec().layout(), map.fine_layout())
        && state.spec().layout().groups() != map.fine_layout().groups()
    {
        return Err(TransferError::LayoutDisagreement);
    }
    check_feasible(state.spec(), state.theta().as_slice(), state.v(), "restrict_state input")?;
    let theta_hat = restrict(map, state.theta().as_slice())?;
    let v_hat = restrict(map, state.v())?;
    let spec_hat = coarse_regularizer(state.spec(), map);
    let theta_hat = ParamVector::new(map.coarse_layout().clone(), theta_hat)
        .expect("restricted vector matches coarse layout");
    check_feasible(&spec_hat, theta_hat.as_slice(), &v_hat, "restrict_state output")?;
    BregmanState::new(theta_hat, v_hat, spec_hat)
        .map_err(|_| TransferError::InfeasibleInput { context: "restrict_state output" })
}

/// Merges a finished coarse pair back into the fine state:
/// `theta + P(theta_hat - R theta)` and `v + P(v_hat - R v)`, i.e. the
/// selected slices are overwritten and everything else is left bitwise
/// untouched. The result is feasible.
pub fn merge_state(
    fine: &BregmanState,
    map: &RestrictionMap,
    coarse_final: &BregmanState,
) -> Result<BregmanState, TransferError> {
    if coarse_final.dim() != map.coarse_dim() {
        return Err(TransferError::LayoutMismatch {
            got: coarse_final.dim(),
            expected: map.coarse_dim(),
        });
    }
    check_feasible(
        coarse_final.spec(),
        coarse_final.theta().as_slice(),
        coarse_final.v(),
        "merge_state coarse input",
    )?;
    let mut theta = fine.theta().as_slice().to_vec();
    let mut v = fine.v().to_vec();
    scatter(map, coarse_final.theta().as_slice(), &mut theta);
    scatter(map, coarse_final.v(), &mut v);
    let theta = ParamVector::new(fine.theta().layout().clone(), theta)
        .expect("merge preserves dimension");
    check_feasible(fine.spec(), theta.as_slice(), &v, "merge_state output")?;
    BregmanState::new(theta, v, fine.spec().clone())
        .map_err(|_| TransferError::InfeasibleInput { context: "merge_state output" })
}

/// The coarse-invocation test: `||R g|| >= kappa ||g||` and `||R g|| > eps`
/// in Euclidean norms.
pub fn coarse_criterion(
    grad_fine: &[f64],
    map: &RestrictionMap,
    kappa: f64,
    epsilon: f64,
) -> Result<bool, TransferError> {
    let restricted = restrict(map, grad_fine)?;
    let norm_r: f64 = restricted.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm: f64 = grad_fine.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(norm_r >= kappa * norm && norm_r > epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticFamily;
    use crate::param_space::{GroupRole, GroupSpec};
    use crate::regularizers::{initial_subgradient, prox, RegTerm};
    use rand::Rng;

    fn layout_2_1_2() -> Arc<GroupLayout> {
        Arc::new(
            GroupLayout::new(vec![
                GroupSpec::new("a", 2, GroupRole::Weight),
                GroupSpec::new("b", 1, GroupRole::Weight),
                GroupSpec::new("c", 2, GroupRole::Weight),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn nonzero_policy_selects_active_groups() {
        let theta = ParamVector::new(layout_2_1_2(), vec![0.0, 0.0, 7.0, 0.0, 0.0]).unwrap();
        let map = build_restriction(&theta, &RestrictionPolicy::NonzeroGroups)
            .unwrap()
            .unwrap();
        assert_eq!(map.selected(), &[1]);
        assert_eq!(map.coarse_dim(), 1);
        assert_eq!(restrict(&map, theta.as_slice()).unwrap(), vec![7.0]);
    }

    #[test]
    fn all_groups_policy_is_identity() {
        let theta = ParamVector::new(layout_2_1_2(), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let map = build_restriction(&theta, &RestrictionPolicy::AllGroups).unwrap().unwrap();
        assert!(map.is_identity());
        assert_eq!(restrict(&map, theta.as_slice()).unwrap(), theta.as_slice());
        assert_eq!(
            prolong(&map, theta.as_slice()).unwrap(),
            theta.as_slice()
        );
    }

    #[test]
    fn zero_vector_yields_empty_restriction() {
        let theta = ParamVector::zeros(layout_2_1_2());
        assert!(build_restriction(&theta, &RestrictionPolicy::NonzeroGroups)
            .unwrap()
            .is_none());
    }

    #[test]
    fn prolong_fills_unselected_with_exact_zeros() {
        let map = RestrictionMap::new(layout_2_1_2(), vec![1]).unwrap();
        assert_eq!(prolong(&map, &[9.0]).unwrap(), vec![0.0, 0.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn restrict_after_prolong_is_identity() {
        let map = RestrictionMap::new(layout_2_1_2(), vec![0, 2]).unwrap();
        let mut rng = crate::rng::stream_rng(3, 0);
        for _ in 0..50 {
            let x_hat: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let back = restrict(&map, &prolong(&map, &x_hat).unwrap()).unwrap();
            assert_eq!(back, x_hat);
        }
    }

    #[test]
    fn prolong_then_restrict_is_projection() {
        let map = RestrictionMap::new(layout_2_1_2(), vec![0, 2]).unwrap();
        let mut rng = crate::rng::stream_rng(4, 0);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let proj = prolong(&map, &restrict(&map, &x).unwrap()).unwrap();
        // Idempotent and norm-contracting.
        let proj2 = prolong(&map, &restrict(&map, &proj).unwrap()).unwrap();
        assert_eq!(proj, proj2);
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let np: f64 = proj.iter().map(|v| v * v).sum();
        assert!(np <= nx);
        // Prolongation preserves norms exactly.
        let x_hat = restrict(&map, &x).unwrap();
        let nh: f64 = x_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nl: f64 = prolong(&map, &x_hat).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(nh, nl);
    }

    #[test]
    fn coarse_regularizer_reindexes_terms() {
        let layout = layout_2_1_2();
        let spec = RegularizerSpec::new(
            layout.clone(),
            vec![RegTerm::Zero, RegTerm::L1 { lambda: 0.5 }, RegTerm::GroupL2 { lambda: 1.0 }],
            1.0,
        )
        .unwrap();
        let map = RestrictionMap::new(layout, vec![1, 2]).unwrap();
        let coarse = coarse_regularizer(&spec, &map);
        assert_eq!(coarse.terms(), &[RegTerm::L1 { lambda: 0.5 }, RegTerm::GroupL2 { lambda: 1.0 }]);
        assert_eq!(coarse.delta(), spec.delta());
    }

    #[test]
    fn coarse_plus_unselected_regularizer_is_total() {
        use crate::regularizers::eval_j;
        let layout = layout_2_1_2();
        let spec = RegularizerSpec::new(
            layout.clone(),
            vec![
                RegTerm::L1 { lambda: 0.7 },
                RegTerm::GroupL2 { lambda: 0.3 },
                RegTerm::L1 { lambda: 1.1 },
            ],
            2.0,
        )
        .unwrap();
        let map = RestrictionMap::new(layout.clone(), vec![0, 2]).unwrap();
        let coarse = coarse_regularizer(&spec, &map);
        let theta = [1.0, -2.0, 0.5, 3.0, -0.25];
        let theta_hat = restrict(&map, &theta).unwrap();
        let j_coarse = eval_j(&coarse, &theta_hat).unwrap();
        // Only group 1 is unselected.
        let unselected_spec = RegularizerSpec::new(
            Arc::new(GroupLayout::new(vec![GroupSpec::new("b", 1, GroupRole::Weight)]).unwrap()),
            vec![RegTerm::GroupL2 { lambda: 0.3 }],
            2.0,
        )
        .unwrap();
        let j_rest = eval_j(&unselected_spec, &theta[2..3]).unwrap();
        let j_total = eval_j(&spec, &theta).unwrap();
        assert!((j_coarse + j_rest - j_total).abs() <= 1e-12);
    }

    #[test]
    fn coarse_loss_example_quadratic() {
        // L(theta) = ||theta||^2 / 2, anchor (1, 2), restriction keeps
        // coordinate 2: coarse loss (1 + t^2)/2, gradient at 2 is 2.
        let fam = QuadraticFamily::isotropic(vec![vec![0.0, 0.0]]).unwrap();
        let problem = FiniteSumProblem::new(
            Arc::new(fam),
            GroupLayout::scalar_weights(2),
        )
        .unwrap();
        let anchor =
            ParamVector::new(problem.layout().clone(), vec![1.0, 2.0]).unwrap();
        let map = RestrictionMap::new(problem.layout().clone(), vec![1]).unwrap();
        let coarse = CoarseProblem::new(&problem, &anchor, &map).unwrap();
        assert_eq!(coarse.loss(coarse.anchor_restricted()), problem.loss(anchor.as_slice()));
        assert_eq!(coarse.loss(&[3.0]), 0.5 * (1.0 + 9.0));
        assert_eq!(coarse.gradient(&[2.0]), vec![2.0]);
    }

    #[test]
    fn first_order_coherence_is_exact() {
        let fam = QuadraticFamily::random(6, 3, 0.5, 2.0, 8).unwrap();
        let layout = GroupLayout::scalar_weights(6);
        let problem = FiniteSumProblem::new(Arc::new(fam), layout.clone()).unwrap();
        let mut rng = crate::rng::stream_rng(5, 0);
        let anchor_vals: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let anchor = ParamVector::new(layout.clone(), anchor_vals).unwrap();
        let map = RestrictionMap::new(layout, vec![0, 2, 5]).unwrap();
        let coarse = CoarseProblem::new(&problem, &anchor, &map).unwrap();
        let lhs = coarse.gradient(coarse.anchor_restricted());
        let rhs = restrict(&map, &problem.full_gradient(anchor.as_slice())).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn coarse_gradient_matches_finite_differences() {
        let fam = QuadraticFamily::random(5, 2, 0.5, 3.0, 21).unwrap();
        let layout = GroupLayout::scalar_weights(5);
        let problem = FiniteSumProblem::new(Arc::new(fam), layout.clone()).unwrap();
        let anchor = ParamVector::new(layout.clone(), vec![0.4, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let map = RestrictionMap::new(layout, vec![1, 3, 4]).unwrap();
        let coarse = CoarseProblem::new(&problem, &anchor, &map).unwrap();
        let point = [0.5, -0.25, 1.5];
        let grad = coarse.gradient(&point);
        let h = 1e-6;
        let mut p = point;
        for i in 0..3 {
            let orig = p[i];
            p[i] = orig + h;
            let up = coarse.loss(&p);
            p[i] = orig - h;
            let down = coarse.loss(&p);
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() / grad[i].abs().max(1.0) <= 1e-5,
                "coord {i}: fd {fd} vs {}",
                grad[i]
            );
        }
    }

    fn random_feasible_state(
        spec: &Arc<RegularizerSpec>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> BregmanState {
        let d = spec.layout().total_dim();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * spec.delta()).collect();
        let theta = prox(spec, &scaled).unwrap();
        BregmanState::new(theta, v, spec.clone()).unwrap()
    }

    #[test]
    fn restriction_preserves_feasibility() {
        // Randomized check over both regularizer families.
        for (term, seed) in [
            (RegTerm::L1 { lambda: 0.8 }, 60),
            (RegTerm::GroupL2 { lambda: 0.5 }, 61),
        ] {
            let spec =
                Arc::new(RegularizerSpec::uniform(layout_2_1_2(), term, 1.4).unwrap());
            let mut rng = crate::rng::stream_rng(seed, 0);
            for _ in 0..100 {
                let state = random_feasible_state(&spec, &mut rng);
                if let Some(map) = build_restriction(state.theta(), &RestrictionPolicy::NonzeroGroups)
                    .unwrap()
                {
                    let coarse = restrict_state(&state, &map).unwrap();
                    assert!(coarse.is_feasible());
                }
            }
        }
    }

    #[test]
    fn merge_preserves_feasibility_and_untouched_groups() {
        let spec = Arc::new(
            RegularizerSpec::uniform(layout_2_1_2(), RegTerm::L1 { lambda: 0.6 }, 0.9).unwrap(),
        );
        let mut rng = crate::rng::stream_rng(62, 0);
        for _ in 0..100 {
            let fine = random_feasible_state(&spec, &mut rng);
            let Some(map) =
                build_restriction(fine.theta(), &RestrictionPolicy::NonzeroGroups).unwrap()
            else {
                continue;
            };
            let coarse_spec = coarse_regularizer(&spec, &map);
            // Random feasible coarse endpoint.
            let d = map.coarse_dim();
            let v_hat: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let scaled: Vec<f64> = v_hat.iter().map(|x| x * coarse_spec.delta()).collect();
            let theta_hat = prox(&coarse_spec, &scaled).unwrap();
            let coarse = BregmanState::new(theta_hat, v_hat, coarse_spec).unwrap();

            let merged = merge_state(&fine, &map, &coarse).unwrap();
            assert!(merged.is_feasible());
            for g in map.unselected() {
                assert_eq!(merged.theta().group(g), fine.theta().group(g));
                let r = spec.layout().range(g);
                assert_eq!(&merged.v()[r.clone()], &fine.v()[r]);
            }
        }
    }

    #[test]
    fn merge_of_restricted_state_is_identity() {
        let spec = Arc::new(
            RegularizerSpec::uniform(layout_2_1_2(), RegTerm::L1 { lambda: 0.4 }, 1.2).unwrap(),
        );
        let mut rng = crate::rng::stream_rng(63, 0);
        let fine = random_feasible_state(&spec, &mut rng);
        let map = build_restriction(fine.theta(), &RestrictionPolicy::AllGroups)
            .unwrap()
            .unwrap();
        let coarse = restrict_state(&fine, &map).unwrap();
        let merged = merge_state(&fine, &map, &coarse).unwrap();
        assert_eq!(merged.theta().as_slice(), fine.theta().as_slice());
        assert_eq!(merged.v(), fine.v());
    }

    #[test]
    fn zero_state_restricts_to_feasible_zero() {
        let spec = Arc::new(
            RegularizerSpec::uniform(layout_2_1_2(), RegTerm::L1 { lambda: 1.0 }, 1.0).unwrap(),
        );
        let state = BregmanState::from_theta(ParamVector::zeros(layout_2_1_2()), spec).unwrap();
        let map = build_restriction(state.theta(), &RestrictionPolicy::AllGroups)
            .unwrap()
            .unwrap();
        let coarse = restrict_state(&state, &map).unwrap();
        assert!(coarse.is_feasible());
        assert!(coarse.theta().as_slice().iter().all(|t| *t == 0.0));
    }

    #[test]
    fn criterion_examples() {
        let layout = GroupLayout::scalar_weights(2);
        let map = RestrictionMap::new(layout, vec![0]).unwrap();
        assert!(coarse_criterion(&[3.0, 4.0], &map, 0.5, 0.1).unwrap());
        assert!(!coarse_criterion(&[0.0, 4.0], &map, 0.5, 0.1).unwrap());
        assert!(coarse_criterion(&[1e-6, 0.0], &map, 0.0, 1e-300).unwrap());
    }

    #[test]
    fn restriction_contracts_norms() {
        let map = RestrictionMap::new(layout_2_1_2(), vec![0, 1]).unwrap();
        let mut rng = crate::rng::stream_rng(64, 0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let rx = restrict(&map, &x).unwrap();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nr: f64 = rx.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(nr <= nx + 1e-15);
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let map = RestrictionMap::new(layout_2_1_2(), vec![0, 2]).unwrap();
        assert!(restrict(&map, &[1.0, 2.0]).is_err());
        assert!(prolong(&map, &[1.0]).is_err());
        assert!(RestrictionMap::new(layout_2_1_2(), vec![]).is_err());
        assert!(RestrictionMap::new(layout_2_1_2(), vec![2, 1]).is_err());
        assert!(RestrictionMap::new(layout_2_1_2(), vec![0, 3]).is_err());
    }
}
