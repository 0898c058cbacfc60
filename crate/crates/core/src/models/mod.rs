//! Differentiable finite-sum problems: synthetic convex losses, small
//! feed-forward networks with hand-coded backpropagation, minibatch
//! gradient estimators, and a finite-difference oracle.

pub mod datasets;
pub mod network;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::param_space::{GroupLayout, LayoutError, ParamVector};
use crate::rng::{stream_rng, STREAM_DATA};

pub use datasets::{
    read_idx_dataset, read_idx_images, read_idx_labels, read_numeric_csv, two_blobs_dataset,
    CsvTask, Dataset, TargetData,
};
pub use network::{
    forward_flops, FlopSupport, Grouping, Head, LayerSpec, NetworkSpec, Target, TensorShape,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("idx error: {0}")]
    Idx(String),
}

/// Term provider for a finite-sum objective `L = (1/n) sum_j L_j`.
pub trait SumTerms: Send + Sync {
    fn num_terms(&self) -> usize;
    fn dim(&self) -> usize;
    fn term_loss(&self, j: usize, theta: &[f64]) -> f64;
    /// Accumulates `grad L_j(theta)` into `grad`.
    fn term_gradient_acc(&self, j: usize, theta: &[f64], grad: &mut [f64]);
    /// Smallest distance to a ReLU kink at `theta`, when meaningful.
    fn min_kink_distance(&self, _theta: &[f64]) -> Option<f64> {
        None
    }
    fn network(&self) -> Option<&NetworkSpec> {
        None
    }
}

/// A minibatch of term indices, drawn without replacement. Stored sorted so
/// reductions run in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBatch {
    indices: Vec<usize>,
}

impl SampleBatch {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self, ModelError> {
        if indices.is_empty() || indices.len() > n {
            return Err(ModelError::InvalidParams(format!(
                "batch size {} not in 1..={n}",
                indices.len()
            )));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::InvalidParams("batch indices must be distinct".into()));
        }
        if *indices.last().unwrap() >= n {
            return Err(ModelError::InvalidParams("batch index out of range".into()));
        }
        Ok(SampleBatch { indices })
    }

    /// All `n` terms.
    pub fn full(n: usize) -> Self {
        SampleBatch { indices: (0..n).collect() }
    }

    /// Draws `b` distinct indices from `[0, n)`.
    pub fn draw(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Result<Self, ModelError> {
        if b == 0 || b > n {
            return Err(ModelError::InvalidParams(format!("batch size {b} not in 1..={n}")));
        }
        let mut indices = rand::seq::index::sample(rng, n, b).into_vec();
        indices.sort_unstable();
        Ok(SampleBatch { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// A differentiable finite-sum objective over a grouped parameter space.
#[derive(Clone)]
pub struct FiniteSumProblem {
    terms: Arc<dyn SumTerms>,
    layout: Arc<GroupLayout>,
}

impl std::fmt::Debug for FiniteSumProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteSumProblem")
            .field("n", &self.terms.num_terms())
            .field("dim", &self.terms.dim())
            .finish()
    }
}

impl FiniteSumProblem {
    pub fn new(terms: Arc<dyn SumTerms>, layout: Arc<GroupLayout>) -> Result<Self, ModelError> {
        if terms.dim() != layout.total_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "terms have dimension {}, layout has {}",
                terms.dim(),
                layout.total_dim()
            )));
        }
        if terms.num_terms() == 0 {
            return Err(ModelError::InvalidParams("finite sum needs at least one term".into()));
        }
        Ok(FiniteSumProblem { terms, layout })
    }

    pub fn num_terms(&self) -> usize {
        self.terms.num_terms()
    }

    pub fn dim(&self) -> usize {
        self.terms.dim()
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn network(&self) -> Option<&NetworkSpec> {
        self.terms.network()
    }

    pub fn term_loss(&self, j: usize, theta: &[f64]) -> f64 {
        self.terms.term_loss(j, theta)
    }

    /// `L(theta) = (1/n) sum_j L_j(theta)`, summed in term order.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.num_terms();
        let mut acc = 0.0;
        for j in 0..n {
            acc += self.terms.term_loss(j, theta);
        }
        acc / n as f64
    }

    pub fn batch_loss(&self, theta: &[f64], batch: &SampleBatch) -> f64 {
        let mut acc = 0.0;
        for &j in batch.indices() {
            acc += self.terms.term_loss(j, theta);
        }
        acc / batch.len() as f64
    }

    /// Exact gradient, accumulated term by term in index order.
    pub fn full_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        for j in 0..self.num_terms() {
            self.terms.term_gradient_acc(j, theta, &mut grad);
        }
        let inv = 1.0 / self.num_terms() as f64;
        for g in &mut grad {
            *g *= inv;
        }
        grad
    }

    /// `(1/b) sum_{j in batch} grad L_j(theta)`, accumulated in increasing
    /// index order.
    pub fn minibatch_gradient(&self, theta: &[f64], batch: &SampleBatch) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        for &j in batch.indices() {
            self.terms.term_gradient_acc(j, theta, &mut grad);
        }
        let inv = 1.0 / batch.len() as f64;
        for g in &mut grad {
            *g *= inv;
        }
        grad
    }

    pub fn min_kink_distance(&self, theta: &[f64]) -> Option<f64> {
        self.terms.min_kink_distance(theta)
    }

    /// Forward-pass FLOPs under the given support. Network problems use
    /// the layer formulas; other families count `2 * nnz` multiply-adds of
    /// a linear predictor.
    pub fn forward_flops(&self, support: FlopSupport<'_>) -> u64 {
        match self.terms.network() {
            Some(net) => network::forward_flops(net, support),
            None => match support {
                FlopSupport::Dense => 2 * self.dim() as u64,
                FlopSupport::Sparse(theta) => 2 * theta.num_nonzero() as u64,
            },
        }
    }
}

/// Quadratic finite sums `L_j(theta) = (1/2)(theta - c_j)^T A_j (theta - c_j)`
/// with `A_j = Q D_j Q^T` sharing one rotation, so the spectrum of the mean
/// Hessian is available in closed form.
#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    rotation: Option<Vec<f64>>,
    eigs: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    dim: usize,
}

impl QuadraticFamily {
    /// Terms `(1/2)||theta - c_j||^2`.
    pub fn isotropic(centers: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if centers.is_empty() || centers[0].is_empty() {
            return Err(ModelError::InvalidParams("need at least one center".into()));
        }
        let dim = centers[0].len();
        if centers.iter().any(|c| c.len() != dim) {
            return Err(ModelError::InvalidParams("centers differ in dimension".into()));
        }
        let eigs = vec![vec![1.0; dim]; centers.len()];
        Ok(QuadraticFamily { rotation: None, eigs, centers, dim })
    }

    /// Diagonal terms with explicit per-term spectra.
    pub fn diagonal(eigs: Vec<Vec<f64>>, centers: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if eigs.len() != centers.len() || eigs.is_empty() {
            return Err(ModelError::InvalidParams("eigs/centers length mismatch".into()));
        }
        let dim = eigs[0].len();
        if eigs.iter().any(|e| e.len() != dim) || centers.iter().any(|c| c.len() != dim) {
            return Err(ModelError::InvalidParams("terms differ in dimension".into()));
        }
        if eigs.iter().flatten().any(|e| *e <= 0.0) {
            return Err(ModelError::InvalidParams("eigenvalues must be positive".into()));
        }
        Ok(QuadraticFamily { rotation: None, eigs, centers, dim })
    }

    /// Randomly rotated strongly convex instances with per-term spectra
    /// drawn from `[eig_min, eig_max]` and Gaussian centers.
    pub fn random(
        d: usize,
        n_terms: usize,
        eig_min: f64,
        eig_max: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if d == 0 || n_terms == 0 {
            return Err(ModelError::InvalidParams("need d >= 1 and n_terms >= 1".into()));
        }
        if !(0.0 < eig_min && eig_min <= eig_max) {
            return Err(ModelError::InvalidParams(format!(
                "bad eigenvalue range [{eig_min}, {eig_max}]"
            )));
        }
        let mut rng = stream_rng(seed, STREAM_DATA);
        let rotation = random_orthogonal(d, &mut rng);
        let mut eigs = Vec::with_capacity(n_terms);
        let mut centers = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            // Pin the spectrum endpoints so lambda_min/lambda_max are exact.
            let mut e: Vec<f64> =
                (0..d).map(|_| rng.random_range(eig_min..=eig_max)).collect();
            e[0] = eig_min;
            if d > 1 {
                e[d - 1] = eig_max;
            }
            eigs.push(e);
            centers.push((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
        }
        Ok(QuadraticFamily { rotation: Some(rotation), eigs, centers, dim: d })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn rotate_t(&self, x: &[f64]) -> Vec<f64> {
        // z = Q^T x
        match &self.rotation {
            None => x.to_vec(),
            Some(q) => {
                let d = self.dim;
                let mut z = vec![0.0; d];
                for (i, zi) in z.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, xk) in x.iter().enumerate() {
                        acc += q[k * d + i] * xk;
                    }
                    *zi = acc;
                }
                z
            }
        }
    }

    fn rotate(&self, z: &[f64]) -> Vec<f64> {
        // x = Q z
        match &self.rotation {
            None => z.to_vec(),
            Some(q) => {
                let d = self.dim;
                let mut x = vec![0.0; d];
                for (i, xi) in x.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, zk) in z.iter().enumerate() {
                        acc += q[i * d + k] * zk;
                    }
                    *xi = acc;
                }
                x
            }
        }
    }

    /// Eigenvalues of the mean Hessian `(1/n) sum_j A_j` in rotated order.
    pub fn mean_eigs(&self) -> Vec<f64> {
        let n = self.eigs.len() as f64;
        let mut out = vec![0.0; self.dim];
        for e in &self.eigs {
            for (o, ei) in out.iter_mut().zip(e) {
                *o += ei;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        out
    }

    pub fn lambda_min(&self) -> f64 {
        self.mean_eigs().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        self.mean_eigs().into_iter().fold(0.0, f64::max)
    }

    /// Largest per-term gradient Lipschitz constant `max_j ||A_j||`.
    pub fn max_term_lipschitz(&self) -> f64 {
        self.eigs.iter().flatten().cloned().fold(0.0, f64::max)
    }

    /// The unique minimizer of the mean loss.
    pub fn minimizer(&self) -> Vec<f64> {
        let d = self.dim;
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for (e, c) in self.eigs.iter().zip(&self.centers) {
            let zc = self.rotate_t(c);
            for i in 0..d {
                num[i] += e[i] * zc[i];
                den[i] += e[i];
            }
        }
        let z: Vec<f64> = num.iter().zip(&den).map(|(n, dn)| n / dn).collect();
        self.rotate(&z)
    }

    /// `L^* = L(minimizer)`.
    pub fn loss_star(&self) -> f64 {
        let theta = self.minimizer();
        let n = self.eigs.len();
        let mut acc = 0.0;
        for j in 0..n {
            acc += self.term_loss(j, &theta);
        }
        acc / n as f64
    }
}

impl SumTerms for QuadraticFamily {
    fn num_terms(&self) -> usize {
        self.eigs.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn term_loss(&self, j: usize, theta: &[f64]) -> f64 {
        let diff: Vec<f64> = theta.iter().zip(&self.centers[j]).map(|(t, c)| t - c).collect();
        let z = self.rotate_t(&diff);
        0.5 * z.iter().zip(&self.eigs[j]).map(|(zi, e)| e * zi * zi).sum::<f64>()
    }

    fn term_gradient_acc(&self, j: usize, theta: &[f64], grad: &mut [f64]) {
        let diff: Vec<f64> = theta.iter().zip(&self.centers[j]).map(|(t, c)| t - c).collect();
        let mut z = self.rotate_t(&diff);
        for (zi, e) in z.iter_mut().zip(&self.eigs[j]) {
            *zi *= e;
        }
        let g = self.rotate(&z);
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Modified Gram-Schmidt on a Gaussian matrix, one extra pass for
    // orthogonality at small d.
    let mut q: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    for _pass in 0..2 {
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| q[i * d + k] * q[j * d + k]).sum();
                for k in 0..d {
                    q[i * d + k] -= dot * q[j * d + k];
                }
            }
            let norm: f64 = (0..d).map(|k| q[i * d + k] * q[i * d + k]).sum::<f64>().sqrt();
            for k in 0..d {
                q[i * d + k] /= norm;
            }
        }
    }
    // Rows are orthonormal; store as column basis (Q with orthonormal cols).
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            out[k * d + i] = q[i * d + k];
        }
    }
    out
}

/// Least-squares terms `L_j(theta) = (1/2)(<x_j, theta> - y_j)^2` of a
/// linear model.
#[derive(Debug, Clone)]
pub struct LinearRegressionTerms {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
}

impl LinearRegressionTerms {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize) -> Result<Self, ModelError> {
        if dim == 0 || features.len() != targets.len() * dim || targets.is_empty() {
            return Err(ModelError::InvalidParams("features/targets shape mismatch".into()));
        }
        Ok(LinearRegressionTerms { features, targets, dim })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }
}

impl SumTerms for LinearRegressionTerms {
    fn num_terms(&self) -> usize {
        self.targets.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn term_loss(&self, j: usize, theta: &[f64]) -> f64 {
        let r: f64 =
            self.row(j).iter().zip(theta).map(|(x, t)| x * t).sum::<f64>() - self.targets[j];
        0.5 * r * r
    }

    fn term_gradient_acc(&self, j: usize, theta: &[f64], grad: &mut [f64]) {
        let row = self.row(j);
        let r: f64 = row.iter().zip(theta).map(|(x, t)| x * t).sum::<f64>() - self.targets[j];
        for (g, x) in grad.iter_mut().zip(row) {
            *g += r * x;
        }
    }
}

/// A network paired with a dataset; term `j` is the loss on sample `j`.
#[derive(Debug, Clone)]
pub struct NetworkTerms {
    net: NetworkSpec,
    data: Dataset,
}

impl NetworkTerms {
    pub fn new(net: NetworkSpec, data: Dataset) -> Result<Self, ModelError> {
        if net.input_shape().flat_len() != data.input_shape().flat_len() {
            return Err(ModelError::ShapeMismatch(format!(
                "network expects {} inputs, dataset provides {}",
                net.input_shape().flat_len(),
                data.input_shape().flat_len()
            )));
        }
        match (net.head(), data.target(0)) {
            (Head::SoftmaxCrossEntropy, Target::Class(_)) => {
                if let Some(classes) = data.num_classes() {
                    if classes > net.output_dim() {
                        return Err(ModelError::ShapeMismatch(format!(
                            "dataset has {classes} classes but network outputs {}",
                            net.output_dim()
                        )));
                    }
                }
            }
            (Head::Mse, Target::Values(v)) => {
                if v.len() != net.output_dim() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "targets have dimension {} but network outputs {}",
                        v.len(),
                        net.output_dim()
                    )));
                }
            }
            _ => {
                return Err(ModelError::ShapeMismatch(
                    "dataset target kind does not match network head".into(),
                ))
            }
        }
        Ok(NetworkTerms { net, data })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

impl SumTerms for NetworkTerms {
    fn num_terms(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn term_loss(&self, j: usize, theta: &[f64]) -> f64 {
        self.net.sample_loss(theta, self.data.input(j), self.data.target(j))
    }

    fn term_gradient_acc(&self, j: usize, theta: &[f64], grad: &mut [f64]) {
        self.net.sample_gradient_acc(theta, self.data.input(j), self.data.target(j), grad);
    }

    fn min_kink_distance(&self, theta: &[f64]) -> Option<f64> {
        let mut min: Option<f64> = None;
        for j in 0..self.data.len() {
            if let Some(m) = self.net.min_abs_preactivation(theta, self.data.input(j)) {
                min = Some(min.map_or(m, |cur| cur.min(m)));
            }
        }
        min
    }

    fn network(&self) -> Option<&NetworkSpec> {
        Some(&self.net)
    }
}

/// Wraps a network and dataset into a finite-sum problem with the chosen
/// parameter grouping.
pub fn network_problem(
    net: NetworkSpec,
    data: Dataset,
    grouping: Grouping,
) -> Result<FiniteSumProblem, ModelError> {
    let layout = net.build_layout(grouping);
    FiniteSumProblem::new(Arc::new(NetworkTerms::new(net, data)?), layout)
}

/// Result of comparing the analytic gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Set when some ReLU pre-activation sits within `10 h` of its kink,
    /// where the comparison is unreliable.
    pub kink_proximity: bool,
    pub min_kink_distance: Option<f64>,
}

/// Central-difference check of the full gradient: the maximum over
/// coordinates of `|analytic - fd| / max(1, |analytic|)`.
pub fn fd_check(problem: &FiniteSumProblem, theta: &[f64], h: f64) -> FdReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = problem.full_gradient(theta);
    let mut point = theta.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = problem.loss(&point);
        point[i] = orig - h;
        let down = problem.loss(&point);
        point[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    let min_kink_distance = problem.min_kink_distance(theta);
    let kink_proximity = min_kink_distance.is_some_and(|m| m < 10.0 * h);
    FdReport { max_rel_error: max_rel, kink_proximity, min_kink_distance }
}

/// A generated sparse-regression testbed with its ground truth.
#[derive(Debug, Clone)]
pub struct SparseRegression {
    pub problem: FiniteSumProblem,
    pub terms: Arc<LinearRegressionTerms>,
    pub true_support: Vec<usize>,
    pub theta_star: Vec<f64>,
}

/// Builds `y_j = <x_j, theta*> + sigma * noise` with standard normal rows
/// and a `k_true`-sparse sign vector `theta*`. One scalar group per
/// coordinate, so restriction freezes individual coefficients.
pub fn make_sparse_regression(
    n: usize,
    d: usize,
    k_true: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SparseRegression, ModelError> {
    if n == 0 || d == 0 {
        return Err(ModelError::InvalidParams("need n >= 1 and d >= 1".into()));
    }
    if k_true > d {
        return Err(ModelError::InvalidParams(format!("k_true {k_true} exceeds d {d}")));
    }
    if noise_sigma < 0.0 {
        return Err(ModelError::InvalidParams("noise sigma must be nonnegative".into()));
    }
    let mut rng = stream_rng(seed, STREAM_DATA);
    let mut support = rand::seq::index::sample(&mut rng, d, k_true).into_vec();
    support.sort_unstable();
    let mut theta_star = vec![0.0; d];
    for &i in &support {
        theta_star[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        features.push(StandardNormal.sample(&mut rng));
    }
    let mut targets = Vec::with_capacity(n);
    for j in 0..n {
        let row = &features[j * d..(j + 1) * d];
        let mut y: f64 = row.iter().zip(&theta_star).map(|(x, t)| x * t).sum();
        if noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            y += noise_sigma * z;
        }
        targets.push(y);
    }
    let terms = Arc::new(LinearRegressionTerms::new(features, targets, d)?);
    let problem =
        FiniteSumProblem::new(terms.clone(), GroupLayout::scalar_weights(d))?;
    Ok(SparseRegression { problem, terms, true_support: support, theta_star })
}

/// Two separable Gaussian blobs behind a linear softmax classifier.
pub fn make_two_blobs(
    n: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<FiniteSumProblem, ModelError> {
    let data = two_blobs_dataset(n, d, separation, seed)?;
    let net = NetworkSpec::mlp(&[d, 2], Head::SoftmaxCrossEntropy)?;
    network_problem(net, data, Grouping::Layer)
}

/// Fraction of correctly classified samples.
pub fn classification_accuracy(net: &NetworkSpec, theta: &[f64], data: &Dataset) -> Option<f64> {
    let mut correct = 0usize;
    for j in 0..data.len() {
        let label = data.class_label(j)?;
        if net.predict_class(theta, data.input(j)) == label {
            correct += 1;
        }
    }
    Some(correct as f64 / data.len() as f64)
}
