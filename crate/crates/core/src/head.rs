//! Gaussian Naive Bayes head.
//!
//! Class-conditional Gaussians are configured directly from a support set:
//! maximum-likelihood priors, means and (biased) covariances, with the
//! covariance replaced by one of three shrinkage choices:
//!
//! * QDA: `e1·Σ_class + e2·Σ_task + e3·I` per class
//! * LDA: `e2·Σ_task + e3·I` shared by all classes
//! * ProtoNets: `I`, with logits `-‖z − μ_c‖²`
//!
//! Everything here works in `f64`. The tape-recorded counterpart used for
//! training lives in [`log_probs_graph`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{read_f64_blob, sidecar_path, write_f64_blob, F64_LE};
use crate::error::{FitError, Result};
use crate::numerics::autodiff::{argmax, logsumexp};
use crate::numerics::{cholesky, CholeskyFactor, Graph, Matrix, NodeId};

/// Backbone parameter count of BiT-M-R50x1.
pub const BIT_R50_BACKBONE_PARAMS: usize = 23_500_352;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Qda,
    Lda,
    #[serde(alias = "protonet", alias = "proto")]
    ProtoNets,
}

impl std::str::FromStr for HeadVariant {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qda" => Ok(Self::Qda),
            "lda" => Ok(Self::Lda),
            "protonets" | "protonet" | "proto" => Ok(Self::ProtoNets),
            other => Err(FitError::Config(format!("unknown head variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Qda => "qda",
            Self::Lda => "lda",
            Self::ProtoNets => "protonets",
        })
    }
}

/// Maximum-likelihood statistics of a labelled embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStatistics {
    pub priors: Vec<f64>,
    /// C x d_b, one class mean per row.
    pub means: Matrix,
    pub class_covs: Vec<Matrix>,
    pub task_cov: Matrix,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl HeadStatistics {
    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }
}

fn outer_accumulate(acc: &mut Matrix, v: &[f64]) {
    let d = v.len();
    for i in 0..d {
        for j in 0..d {
            acc.add_at(i, j, v[i] * v[j]);
        }
    }
}

/// Priors `N_c/N`, class means, biased class covariances and the biased
/// covariance of all points about the single global mean.
pub fn estimate_stats(
    embeddings: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<HeadStatistics> {
    if embeddings.rows() != labels.len() {
        return Err(FitError::DimensionMismatch(format!(
            "{} embeddings, {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let d = embeddings.cols();
    let mut counts = vec![0usize; num_classes];
    let mut means = Matrix::zeros(num_classes, d);
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(FitError::DimensionMismatch(format!(
                "label {c} with {num_classes} classes"
            )));
        }
        counts[c] += 1;
        for (m, &x) in means.row_mut(c).iter_mut().zip(embeddings.row(i)) {
            *m += x;
        }
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(FitError::EmptyClass { class });
    }
    for (c, &n) in counts.iter().enumerate() {
        for m in means.row_mut(c) {
            *m /= n as f64;
        }
    }
    let total = labels.len();
    let mut global = vec![0.0; d];
    for i in 0..total {
        for (g, &x) in global.iter_mut().zip(embeddings.row(i)) {
            *g += x;
        }
    }
    for g in &mut global {
        *g /= total as f64;
    }

    let mut class_covs = vec![Matrix::zeros(d, d); num_classes];
    let mut task_cov = Matrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (i, &c) in labels.iter().enumerate() {
        let x = embeddings.row(i);
        for j in 0..d {
            diff[j] = x[j] - means.get(c, j);
        }
        outer_accumulate(&mut class_covs[c], &diff);
        for j in 0..d {
            diff[j] = x[j] - global[j];
        }
        outer_accumulate(&mut task_cov, &diff);
    }
    for (cov, &n) in class_covs.iter_mut().zip(&counts) {
        *cov = cov.scale(1.0 / n as f64);
    }
    let task_cov = task_cov.scale(1.0 / total as f64);
    Ok(HeadStatistics {
        priors: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        means,
        class_covs,
        task_cov,
        counts,
        total,
    })
}

/// Shrinkage weights `e = (e1, e2, e3)`, stored as logs so that optimization
/// keeps them positive. A zero weight is representable as `log 0 = -inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceWeights {
    log: [f64; 3],
}

impl Default for CovarianceWeights {
    fn default() -> Self {
        Self::initial()
    }
}

impl CovarianceWeights {
    /// `e = (0.5, 0.5, 1.0)`.
    pub fn initial() -> Self {
        Self::from_values([0.5, 0.5, 1.0]).expect("valid")
    }

    pub fn from_values(e: [f64; 3]) -> Result<Self> {
        if e.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(FitError::Config(format!(
                "covariance weights must be finite and nonnegative, got {e:?}"
            )));
        }
        Ok(Self {
            log: e.map(f64::ln),
        })
    }

    pub fn from_logs(log: [f64; 3]) -> Self {
        Self { log }
    }

    pub fn logs(&self) -> [f64; 3] {
        self.log
    }

    pub fn values(&self) -> [f64; 3] {
        self.log.map(f64::exp)
    }
}

/// Output of [`mix_covariance`].
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSet {
    PerClass(Vec<Matrix>),
    Shared(Matrix),
    Identity,
}

pub fn mix_covariance(
    stats: &HeadStatistics,
    e: &CovarianceWeights,
    variant: HeadVariant,
) -> CovarianceSet {
    let [e1, e2, e3] = e.values();
    let d = stats.dim();
    let shared = stats
        .task_cov
        .scale(e2)
        .add(&Matrix::identity(d).scale(e3))
        .expect("square");
    match variant {
        HeadVariant::Qda => CovarianceSet::PerClass(
            stats
                .class_covs
                .iter()
                .map(|c| c.scale(e1).add(&shared).expect("square"))
                .collect(),
        ),
        HeadVariant::Lda => CovarianceSet::Shared(shared),
        HeadVariant::ProtoNets => CovarianceSet::Identity,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheKind {
    Qda {
        means: Matrix,
        factors: Vec<CholeskyFactor>,
        logdets: Vec<f64>,
    },
    /// `weights` row c is `Σ⁻¹μ_c`; `offsets[c] = μ_cᵀΣ⁻¹μ_c`.
    Lda { weights: Matrix, offsets: Vec<f64> },
    ProtoNets { means: Matrix, use_prior: bool },
}

/// Prediction-ready head over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierCache {
    /// Global label of each cache row.
    pub classes: Vec<usize>,
    pub log_priors: Vec<f64>,
    pub kind: CacheKind,
}

impl ClassifierCache {
    pub fn variant(&self) -> HeadVariant {
        match self.kind {
            CacheKind::Qda { .. } => HeadVariant::Qda,
            CacheKind::Lda { .. } => HeadVariant::Lda,
            CacheKind::ProtoNets { .. } => HeadVariant::ProtoNets,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            CacheKind::Qda { means, .. } | CacheKind::ProtoNets { means, .. } => means.cols(),
            CacheKind::Lda { weights, .. } => weights.cols(),
        }
    }

    /// Head values a client would need to store: means, packed Cholesky
    /// factors or compact LDA vectors. Priors are excluded.
    pub fn head_value_count(&self) -> usize {
        let (c, d) = (self.num_classes(), self.dim());
        match self.kind {
            CacheKind::Qda { .. } => c * d + c * d * (d + 1) / 2,
            CacheKind::Lda { .. } => c * (d + 1),
            CacheKind::ProtoNets { .. } => c * d,
        }
    }

    /// Keeps the listed global classes, in the given order.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = classes
            .iter()
            .map(|c| {
                self.classes
                    .iter()
                    .position(|k| k == c)
                    .ok_or(FitError::UncoveredClass { class: *c })
            })
            .collect::<Result<_>>()?;
        let kind = match &self.kind {
            CacheKind::Qda {
                means,
                factors,
                logdets,
            } => CacheKind::Qda {
                means: means.select_rows(&rows),
                factors: rows.iter().map(|&r| factors[r].clone()).collect(),
                logdets: rows.iter().map(|&r| logdets[r]).collect(),
            },
            CacheKind::Lda { weights, offsets } => CacheKind::Lda {
                weights: weights.select_rows(&rows),
                offsets: rows.iter().map(|&r| offsets[r]).collect(),
            },
            CacheKind::ProtoNets { means, use_prior } => CacheKind::ProtoNets {
                means: means.select_rows(&rows),
                use_prior: *use_prior,
            },
        };
        Ok(Self {
            classes: classes.to_vec(),
            log_priors: rows.iter().map(|&r| self.log_priors[r]).collect(),
            kind,
        })
    }

    /// Unnormalized class scores for one embedding.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(FitError::DimensionMismatch(format!(
                "{}-dim embedding for a {}-dim head",
                z.len(),
                self.dim()
            )));
        }
        let c = self.num_classes();
        Ok(match &self.kind {
            CacheKind::Qda {
                means,
                factors,
                logdets,
            } => (0..c)
                .map(|k| {
                    let diff: Vec<f64> = z.iter().zip(means.row(k)).map(|(a, b)| a - b).collect();
                    let y = factors[k]
                        .solve_lower(&Matrix::col_vector(&diff))
                        .expect("dims checked");
                    let maha: f64 = y.as_slice().iter().map(|v| v * v).sum();
                    self.log_priors[k] - 0.5 * logdets[k] - 0.5 * maha
                })
                .collect(),
            CacheKind::Lda { weights, offsets } => (0..c)
                .map(|k| {
                    let dot: f64 = weights.row(k).iter().zip(z).map(|(a, b)| a * b).sum();
                    self.log_priors[k] + dot - 0.5 * offsets[k]
                })
                .collect(),
            CacheKind::ProtoNets { means, use_prior } => (0..c)
                .map(|k| {
                    let d2: f64 = means
                        .row(k)
                        .iter()
                        .zip(z)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if *use_prior {
                        self.log_priors[k] - d2
                    } else {
                        -d2
                    }
                })
                .collect(),
        })
    }

    /// Posterior log-probabilities over `self.classes`.
    pub fn predict_log_probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(z)?;
        let lse = logsumexp(&logits);
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }

    pub fn predict_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), self.num_classes());
        for i in 0..z.rows() {
            out.row_mut(i).copy_from_slice(&self.predict_log_probs(z.row(i))?);
        }
        Ok(out)
    }

    /// Global label of the most probable class; ties go to the lowest row.
    pub fn predict_label(&self, z: &[f64]) -> Result<usize> {
        Ok(self.classes[argmax(&self.logits(z)?)])
    }
}

pub fn predict_log_probs(z: &[f64], cache: &ClassifierCache) -> Result<Vec<f64>> {
    cache.predict_log_probs(z)
}

fn dense_classes(c: usize) -> Vec<usize> {
    (0..c).collect()
}

/// Full-form Gaussian cache: one factor per class (a shared covariance is
/// factorized once and repeated).
pub fn gaussian_cache(stats: &HeadStatistics, covs: &CovarianceSet) -> Result<ClassifierCache> {
    let c = stats.num_classes();
    let factors = match covs {
        CovarianceSet::PerClass(m) => m.iter().map(|s| cholesky(s, 0.0)).collect::<Result<Vec<_>>>()?,
        CovarianceSet::Shared(s) => vec![cholesky(s, 0.0)?; c],
        CovarianceSet::Identity => vec![cholesky(&Matrix::identity(stats.dim()), 0.0)?; c],
    };
    Ok(ClassifierCache {
        classes: dense_classes(c),
        log_priors: stats.priors.iter().map(|p| p.ln()).collect(),
        kind: CacheKind::Qda {
            means: stats.means.clone(),
            logdets: factors.iter().map(CholeskyFactor::logdet).collect(),
            factors,
        },
    })
}

/// Compact LDA: stores `Σ⁻¹μ_c` and `μ_cᵀΣ⁻¹μ_c` per class.
pub fn compress_lda(stats: &HeadStatistics, sigma_lda: &Matrix) -> Result<ClassifierCache> {
    let factor = cholesky(sigma_lda, 0.0)?;
    let solved = factor.solve(&stats.means.transpose())?; // d x C
    let weights = solved.transpose();
    let offsets = (0..stats.num_classes())
        .map(|k| {
            weights
                .row(k)
                .iter()
                .zip(stats.means.row(k))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(ClassifierCache {
        classes: dense_classes(stats.num_classes()),
        log_priors: stats.priors.iter().map(|p| p.ln()).collect(),
        kind: CacheKind::Lda { weights, offsets },
    })
}

pub fn protonets_cache(stats: &HeadStatistics, use_prior: bool) -> ClassifierCache {
    ClassifierCache {
        classes: dense_classes(stats.num_classes()),
        log_priors: stats.priors.iter().map(|p| p.ln()).collect(),
        kind: CacheKind::ProtoNets {
            means: stats.means.clone(),
            use_prior,
        },
    }
}

/// Prototype cache from explicit class means (uniform priors).
pub fn prototype_cache(classes: Vec<usize>, means: Matrix) -> ClassifierCache {
    let c = classes.len();
    ClassifierCache {
        classes,
        log_priors: vec![-(c as f64).ln(); c],
        kind: CacheKind::ProtoNets {
            means,
            use_prior: false,
        },
    }
}

/// Mixes covariances and builds the prediction cache for `variant`.
pub fn build_cache(
    stats: &HeadStatistics,
    e: &CovarianceWeights,
    variant: HeadVariant,
    protonets_prior: bool,
) -> Result<ClassifierCache> {
    match mix_covariance(stats, e, variant) {
        covs @ CovarianceSet::PerClass(_) => gaussian_cache(stats, &covs),
        CovarianceSet::Shared(s) => compress_lda(stats, &s),
        CovarianceSet::Identity => Ok(protonets_cache(stats, protonets_prior)),
    }
}

/// Fraction of rows of `z` whose predicted label equals `labels`.
pub fn accuracy(cache: &ClassifierCache, z: &Matrix, labels: &[usize]) -> Result<f64> {
    if z.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if cache.predict_label(z.row(i))? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / z.rows() as f64)
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Transfer method whose updateable parameters are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fit(HeadVariant),
    /// Full fine-tuning of the backbone plus a linear head.
    BitLinear,
}

impl std::str::FromStr for Method {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bit" | "bit-linear" | "linear" => Ok(Self::BitLinear),
            other => other.parse().map(Self::Fit),
        }
    }
}

/// Updateable parameters for `C` classes and embedding size `d_b`.
/// `adapted` is `|ψ|` for FiT variants and `|θ|` for full fine-tuning.
pub fn count_updateable(method: Method, classes: usize, d_b: usize, adapted: usize) -> usize {
    let (c, d) = (classes, d_b);
    match method {
        Method::Fit(HeadVariant::Qda) => adapted + c * d + c * d * (d + 1) / 2 + 3,
        Method::Fit(HeadVariant::Lda) => adapted + c * (d + 1) + 2,
        Method::Fit(HeadVariant::ProtoNets) => adapted + c * d,
        Method::BitLinear => adapted + c * d,
    }
}

/// Parameters frozen and shared across tasks.
pub fn count_shared(method: Method, backbone: usize) -> usize {
    match method {
        Method::Fit(_) => backbone,
        Method::BitLinear => 0,
    }
}

/// Relative model update size.
pub fn rmus(updateable: usize, reference_updateable: usize) -> f64 {
    updateable as f64 / reference_updateable as f64
}

// ---------------------------------------------------------------------------
// Linear head baseline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// C x d_b.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, d_b: usize) -> Self {
        Self {
            weight: Matrix::zeros(classes, d_b),
            bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

pub fn linear_forward(head: &LinearHead, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != head.weight.cols() || head.weight.rows() != head.bias.len() {
        return Err(FitError::DimensionMismatch(format!(
            "linear head {:?} with {}-dim input",
            head.weight.shape(),
            z.len()
        )));
    }
    Ok((0..head.num_classes())
        .map(|k| {
            head.bias[k]
                + head
                    .weight
                    .row(k)
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect())
}

/// Cross-entropy `-log softmax(logits)[label]`.
pub fn linear_loss(head: &LinearHead, z: &[f64], label: usize) -> Result<f64> {
    let logits = linear_forward(head, z)?;
    if label >= logits.len() {
        return Err(FitError::DimensionMismatch(format!(
            "label {label} for {} classes",
            logits.len()
        )));
    }
    Ok(logsumexp(&logits) - logits[label])
}

/// Tape nodes of a linear head.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight_t: NodeId,
    pub bias: NodeId,
}

impl LinearHead {
    /// Registers `Wᵀ` (d_b x C) and the bias row as trainable leaves.
    pub fn to_graph(&self, g: &mut Graph) -> LinearNodes {
        LinearNodes {
            weight_t: g.trainable(self.weight.transpose()),
            bias: g.trainable(Matrix::row_vector(&self.bias)),
        }
    }
}

/// Mean cross-entropy of a linear head over the rows of `z`.
pub fn linear_loss_graph(
    g: &mut Graph,
    head: LinearNodes,
    z: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = g.matmul(z, head.weight_t)?;
    let logits = g.add_row(logits, head.bias)?;
    let logp = g.log_softmax_rows(logits)?;
    let mask = g.constant(one_hot(labels, g.shape(logp).1)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale_const(total, -1.0 / labels.len().max(1) as f64))
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(FitError::DimensionMismatch(format!(
                "label {l} for {classes} classes"
            )));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Tape-recorded head

/// Options for [`log_probs_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphHeadOptions {
    pub variant: HeadVariant,
    pub protonets_prior: bool,
}

/// Records the head on a tape: statistics from `support` (rows labelled by
/// `support_labels`, classes `0..num_classes`, each nonempty), then query
/// log-probabilities (`n_q x num_classes`). `log_e` is a 1x3 node of
/// log-weights and is only read by QDA and LDA.
pub fn log_probs_graph(
    g: &mut Graph,
    support: NodeId,
    support_labels: &[usize],
    num_classes: usize,
    query: NodeId,
    log_e: NodeId,
    opts: GraphHeadOptions,
) -> Result<NodeId> {
    let (n, d) = g.shape(support);
    if support_labels.len() != n {
        return Err(FitError::DimensionMismatch(format!(
            "{n} support rows, {} labels",
            support_labels.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in support_labels.iter().enumerate() {
        if c >= num_classes {
            return Err(FitError::DimensionMismatch(format!(
                "support label {c} with {num_classes} classes"
            )));
        }
        members[c].push(i);
    }
    if let Some(class) = members.iter().position(Vec::is_empty) {
        return Err(FitError::EmptyClass { class });
    }

    // Class means via a constant averaging matrix.
    let mut avg = Matrix::zeros(num_classes, n);
    for (c, idx) in members.iter().enumerate() {
        for &i in idx {
            avg.set(c, i, 1.0 / idx.len() as f64);
        }
    }
    let avg = g.constant(avg);
    let means = g.matmul(avg, support)?;
    let log_priors: Vec<f64> = members
        .iter()
        .map(|m| (m.len() as f64 / n as f64).ln())
        .collect();

    let logits = match opts.variant {
        HeadVariant::ProtoNets => {
            let d2 = g.sq_dist(query, means)?;
            let neg = g.scale_const(d2, -1.0);
            if opts.protonets_prior {
                let lp = g.constant(Matrix::row_vector(&log_priors));
                g.add_row(neg, lp)?
            } else {
                neg
            }
        }
        HeadVariant::Lda | HeadVariant::Qda => {
            let e = g.exp(log_e);
            let e2 = g.pick(e, 0, 1)?;
            let e3 = g.pick(e, 0, 2)?;
            let ones = g.constant(Matrix::filled(1, n, 1.0 / n as f64));
            let global = g.matmul(ones, support)?;
            let centred = g.sub_row(support, global)?;
            let ct = g.transpose(centred);
            let task = g.matmul(ct, centred)?;
            let task = g.scale_const(task, 1.0 / n as f64);
            let eye = g.constant(Matrix::identity(d));
            let t2 = g.scale(task, e2)?;
            let t3 = g.scale(eye, e3)?;
            let shared = g.add(t2, t3)?;
            let lp = g.constant(Matrix::row_vector(&log_priors));

            if opts.variant == HeadVariant::Lda {
                // Compact form: the query quadratic term is class independent.
                let mt = g.transpose(means);
                let v = g.psd_solve(shared, mt)?; // d x C
                let lin = g.matmul(query, v)?; // n_q x C
                let vt = g.transpose(v);
                let mv = g.mul(means, vt)?;
                let off = g.row_sum(mv); // C x 1
                let off = g.transpose(off);
                let off = g.scale_const(off, -0.5);
                let l = g.add_row(lin, off)?;
                g.add_row(l, lp)?
            } else {
                let e1 = g.pick(e, 0, 0)?;
                let mut cols = Vec::with_capacity(num_classes);
                for (c, idx) in members.iter().enumerate() {
                    let rows = g.select_rows(support, idx)?;
                    let mu = g.select_rows(means, &[c])?;
                    let cen = g.sub_row(rows, mu)?;
                    let cent = g.transpose(cen);
                    let cov = g.matmul(cent, cen)?;
                    let cov = g.scale_const(cov, 1.0 / idx.len() as f64);
                    let cov = g.scale(cov, e1)?;
                    let sigma = g.add(cov, shared)?;
                    let diff = g.sub_row(query, mu)?;
                    let dt = g.transpose(diff);
                    let y = g.psd_solve(sigma, dt)?; // d x n_q
                    let yt = g.transpose(y);
                    let q = g.mul(diff, yt)?;
                    let maha = g.row_sum(q); // n_q x 1
                    let ld = g.logdet(sigma)?;
                    let shift = g.scale_const(ld, -0.5);
                    let lpc = g.pick(lp, 0, c)?;
                    let shift = g.add_row(shift, lpc)?;
                    let col = g.scale_const(maha, -0.5);
                    cols.push(g.add_row(col, shift)?);
                }
                g.concat_cols(&cols)?
            }
        }
    };
    g.log_softmax_rows(logits)
}

// ---------------------------------------------------------------------------
// Cache files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSidecar {
    pub dtype: String,
    pub variant: HeadVariant,
    pub num_classes: usize,
    pub d_b: usize,
    pub classes: Vec<usize>,
    #[serde(default)]
    pub use_prior: bool,
    pub count: usize,
    pub sections: Vec<CacheSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub name: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub count: usize,
}

impl ClassifierCache {
    fn sections(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("log_priors".to_string(), self.log_priors.clone())];
        match &self.kind {
            CacheKind::Qda {
                means,
                factors,
                logdets,
            } => {
                out.push(("means".into(), means.as_slice().to_vec()));
                out.push(("logdets".into(), logdets.clone()));
                for (c, f) in factors.iter().enumerate() {
                    let l = f.lower();
                    let packed = (0..l.rows())
                        .flat_map(|i| (0..=i).map(move |j| l.get(i, j)))
                        .collect();
                    out.push((format!("cholesky_{c}"), packed));
                }
            }
            CacheKind::Lda { weights, offsets } => {
                out.push(("weights".into(), weights.as_slice().to_vec()));
                out.push(("offsets".into(), offsets.clone()));
            }
            CacheKind::ProtoNets { means, .. } => {
                out.push(("means".into(), means.as_slice().to_vec()));
            }
        }
        out
    }

    /// Writes a little-endian f64 blob at `path` and a JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut flat = Vec::new();
        let mut sections = Vec::new();
        for (name, values) in self.sections() {
            sections.push(CacheSection {
                name,
                offset: flat.len() * 8,
                count: values.len(),
            });
            flat.extend(values);
        }
        write_f64_blob(path, &flat)?;
        let sidecar = CacheSidecar {
            dtype: F64_LE.into(),
            variant: self.variant(),
            num_classes: self.num_classes(),
            d_b: self.dim(),
            classes: self.classes.clone(),
            use_prior: matches!(self.kind, CacheKind::ProtoNets { use_prior: true, .. }),
            count: flat.len(),
            sections,
        };
        let mut w = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(&mut w, &sidecar)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sc: CacheSidecar =
            serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        if sc.dtype != F64_LE {
            return Err(FitError::Config(format!("unsupported dtype {}", sc.dtype)));
        }
        let flat = read_f64_blob(path)?;
        if flat.len() != sc.count || sc.classes.len() != sc.num_classes {
            return Err(FitError::DimensionMismatch(format!(
                "cache blob holds {} values, sidecar says {}",
                flat.len(),
                sc.count
            )));
        }
        let section = |name: &str, expected: usize| -> Result<Vec<f64>> {
            let s = sc
                .sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| FitError::Config(format!("cache section {name} missing")))?;
            let start = s.offset / 8;
            if s.count != expected || start + s.count > flat.len() {
                return Err(FitError::DimensionMismatch(format!(
                    "cache section {name}: {} values at {}, expected {expected}",
                    s.count, s.offset
                )));
            }
            Ok(flat[start..start + s.count].to_vec())
        };
        let (c, d) = (sc.num_classes, sc.d_b);
        let log_priors = section("log_priors", c)?;
        let kind = match sc.variant {
            HeadVariant::Qda => {
                let means = Matrix::from_vec(c, d, section("means", c * d)?)?;
                let logdets = section("logdets", c)?;
                let mut factors = Vec::with_capacity(c);
                for k in 0..c {
                    let packed = section(&format!("cholesky_{k}"), d * (d + 1) / 2)?;
                    let mut l = Matrix::zeros(d, d);
                    let mut it = packed.into_iter();
                    for i in 0..d {
                        for j in 0..=i {
                            l.set(i, j, it.next().expect("sized"));
                        }
                    }
                    factors.push(CholeskyFactor::from_lower(l)?);
                }
                CacheKind::Qda {
                    means,
                    factors,
                    logdets,
                }
            }
            HeadVariant::Lda => CacheKind::Lda {
                weights: Matrix::from_vec(c, d, section("weights", c * d)?)?,
                offsets: section("offsets", c)?,
            },
            HeadVariant::ProtoNets => CacheKind::ProtoNets {
                means: Matrix::from_vec(c, d, section("means", c * d)?)?,
                use_prior: sc.use_prior,
            },
        };
        Ok(Self {
            classes: sc.classes,
            log_priors,
            kind,
        })
    }
}
