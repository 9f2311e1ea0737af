//! Episodic fine-tuning: dataset splitting, task sampling, the Adam loop
//! over FiLM parameters and covariance weights, and final prediction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FilmNodes, FilmParams};
use crate::data::LabelledDataset;
use crate::error::{FitError, Result};
use crate::exec;
use crate::head::{
    self, build_cache, estimate_stats, linear_loss_graph, log_probs_graph, one_hot,
    ClassifierCache, CovarianceWeights, GraphHeadOptions, HeadVariant, LinearHead,
};
use crate::numerics::autodiff::argmax;
use crate::numerics::{Graph, Matrix, NodeId};

/// Query examples per task are capped at this total across classes.
pub const MAX_QUERY_TOTAL: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Half of each class for support sampling, the rest for queries.
    Split,
    /// Support and query are both sampled from the whole dataset.
    NoSplit,
    /// Support and query are the whole dataset every iteration.
    UseAll,
    /// `Split` below `auto_split_threshold` examples, `NoSplit` otherwise.
    Auto,
}

impl std::str::FromStr for SplitMode {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Self::Split),
            "no-split" => Ok(Self::NoSplit),
            "use-all" => Ok(Self::UseAll),
            "auto" => Ok(Self::Auto),
            other => Err(FitError::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub support_set_size: usize,
    pub split_mode: SplitMode,
    pub auto_split_threshold: usize,
    /// Shuffles the dataset before splitting when set.
    pub split_shuffle_seed: Option<u64>,
    pub seed: u64,
    /// Blocks gradients through the support-set statistics.
    pub stop_grad_support: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Adds log-priors to ProtoNets logits.
    pub protonets_prior: bool,
    /// Records elapsed milliseconds in the trace (makes traces nondeterministic).
    pub trace_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0035,
            iterations: 400,
            support_set_size: 100,
            split_mode: SplitMode::Auto,
            auto_split_threshold: 1000,
            split_shuffle_seed: None,
            seed: 0,
            stop_grad_support: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            protonets_prior: false,
            trace_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(FitError::Config("learning_rate must be positive".into()));
        }
        if self.support_set_size == 0 {
            return Err(FitError::Config("support_set_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(FitError::Config("invalid Adam constants".into()));
        }
        Ok(())
    }

    /// Split mode actually used for a dataset of `n` examples.
    pub fn effective_split(&self, n: usize) -> SplitMode {
        match self.split_mode {
            SplitMode::Auto if n < self.auto_split_threshold => SplitMode::Split,
            SplitMode::Auto => SplitMode::NoSplit,
            m => m,
        }
    }
}

/// First `ceil(N_c/2)` examples of each class go to train, the rest to test.
pub fn split_dataset(d: &LabelledDataset) -> Result<(LabelledDataset, LabelledDataset)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in d.classes_present() {
        let idx = d.indices_of(c);
        if idx.len() < 2 {
            return Err(FitError::TooFewShots {
                class: c,
                count: idx.len(),
            });
        }
        let k = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((d.subset(&train), d.subset(&test)))
}

/// A support/query episode. Labels are local (`0..classes.len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: LabelledDataset,
    pub query: LabelledDataset,
    /// Original label of each local class.
    pub classes: Vec<usize>,
}

impl Task {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    /// The whole dataset as both support and query.
    pub fn use_all(d: &LabelledDataset) -> Result<Self> {
        let classes = d.classes_present();
        if classes.is_empty() {
            return Err(FitError::EmptyDataset);
        }
        let all: Vec<usize> = (0..d.len()).collect();
        let support = relabel(d, &all, &classes)?;
        Ok(Self {
            query: support.clone(),
            support,
            classes,
        })
    }
}

fn relabel(d: &LabelledDataset, idx: &[usize], classes: &[usize]) -> Result<LabelledDataset> {
    let mut local = vec![usize::MAX; d.num_classes()];
    for (k, &c) in classes.iter().enumerate() {
        local[c] = k;
    }
    let labels = idx.iter().map(|&i| local[d.labels()[i]]).collect();
    LabelledDataset::new(d.features().select_rows(idx), labels, classes.len())
}

/// Round half to even.
fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Draws one task from `d_train` (support) and `d_test` (query).
pub fn sample_task(
    d_train: &LabelledDataset,
    d_test: &LabelledDataset,
    support_set_size: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    let classes = d_train.classes_present();
    if classes.is_empty() || support_set_size == 0 {
        return Err(FitError::EmptyDataset);
    }
    let min_way = classes.len().min(5);
    let max_way = classes.len().min(support_set_size);
    if min_way > max_way {
        return Err(FitError::Config(format!(
            "support_set_size {support_set_size} is below the minimum way {min_way}"
        )));
    }
    let way = rng.random_range(min_way..=max_way);
    let mut selected: Vec<usize> = sample(rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    selected.sort_unstable();

    let balanced = (round_half_even(support_set_size as f64 / way as f64) as usize).max(1);
    let max_test = (MAX_QUERY_TOTAL / way).max(1);
    let mut s_idx = Vec::new();
    let mut q_idx = Vec::new();
    for &c in &selected {
        let pool = d_train.indices_of(c);
        let k = pool.len().min(balanced);
        s_idx.extend(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
        let pool = if c < d_test.num_classes() {
            d_test.indices_of(c)
        } else {
            Vec::new()
        };
        let k = pool.len().min(max_test);
        q_idx.extend(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
    }
    Ok(Task {
        support: relabel(d_train, &s_idx, &selected)?,
        query: relabel(d_test, &q_idx, &selected)?,
        classes: selected,
    })
}

/// Head configuration shared by training and prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSetup {
    pub variant: HeadVariant,
    pub protonets_prior: bool,
    pub stop_grad_support: bool,
}

impl HeadSetup {
    pub fn new(variant: HeadVariant) -> Self {
        Self {
            variant,
            protonets_prior: false,
            stop_grad_support: false,
        }
    }

    pub fn from_config(variant: HeadVariant, config: &TrainConfig) -> Self {
        Self {
            variant,
            protonets_prior: config.protonets_prior,
            stop_grad_support: config.stop_grad_support,
        }
    }
}

/// Tape of one episode: the summed query log-likelihood and its leaves.
pub struct EpisodeGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub film: FilmNodes,
    pub log_e: NodeId,
}

pub fn episode_graph(
    task: &Task,
    backbone: &Backbone,
    psi: &FilmParams,
    e: &CovarianceWeights,
    setup: HeadSetup,
) -> Result<EpisodeGraph> {
    let mut g = Graph::new();
    let film = psi.to_graph(&mut g);
    let log_e = g.trainable(Matrix::row_vector(&e.logs()));
    let xs = g.constant(task.support.features().clone());
    let xq = g.constant(task.query.features().clone());
    let mut zs = backbone.forward_graph(&mut g, &film, xs)?;
    if setup.stop_grad_support {
        zs = g.stop_grad(zs);
    }
    let zq = backbone.forward_graph(&mut g, &film, xq)?;
    let logp = log_probs_graph(
        &mut g,
        zs,
        task.support.labels(),
        task.way(),
        zq,
        log_e,
        GraphHeadOptions {
            variant: setup.variant,
            protonets_prior: setup.protonets_prior,
        },
    )?;
    let mask = g.constant(one_hot(task.query.labels(), task.way())?);
    let picked = g.mul(logp, mask)?;
    let loss = g.sum(picked);
    Ok(EpisodeGraph {
        graph: g,
        loss,
        film,
        log_e,
    })
}

/// Summed log-likelihood of the query labels under the support-configured head.
pub fn episode_loss(
    task: &Task,
    backbone: &Backbone,
    psi: &FilmParams,
    e: &CovarianceWeights,
    setup: HeadSetup,
) -> Result<f64> {
    let eg = episode_graph(task, backbone, psi, e, setup)?;
    Ok(eg.graph.value(eg.loss).item())
}

/// Episode value with gradients w.r.t. ψ (flattened like [`FilmParams::flatten`])
/// and the three log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeGradient {
    pub loss: f64,
    pub psi: Vec<f64>,
    pub log_e: [f64; 3],
}

pub fn episode_gradient(
    task: &Task,
    backbone: &Backbone,
    psi: &FilmParams,
    e: &CovarianceWeights,
    setup: HeadSetup,
) -> Result<EpisodeGradient> {
    let eg = episode_graph(task, backbone, psi, e, setup)?;
    let grads = eg.graph.gradient(eg.loss)?;
    let mut flat = Vec::with_capacity(psi.param_count());
    for &(gamma, beta) in &eg.film.layers {
        flat.extend_from_slice(grads.wrt(gamma).as_slice());
        flat.extend_from_slice(grads.wrt(beta).as_slice());
    }
    let ge = grads.wrt(eg.log_e).as_slice();
    Ok(EpisodeGradient {
        loss: eg.graph.value(eg.loss).item(),
        psi: flat,
        log_e: [ge[0], ge[1], ge[2]],
    })
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn from_config(n: usize, config: &TrainConfig) -> Self {
        Self::new(
            n,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Moves `params` along `+grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step(params, grad, 1.0);
    }

    /// Moves `params` along `-grad` (descent).
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step(params, grad, -1.0);
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += sign * self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub way: usize,
    pub support: usize,
    pub query: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutput {
    pub psi: FilmParams,
    pub e: CovarianceWeights,
    pub trace: Vec<TraceEntry>,
    /// True when the 1-shot rule skipped optimization.
    pub skipped: bool,
}

fn shuffled(d: &LabelledDataset, seed: u64) -> LabelledDataset {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    d.subset(&idx)
}

/// Where tasks come from during fine-tuning.
pub enum TaskSource {
    Sampled {
        train: LabelledDataset,
        test: LabelledDataset,
        support_set_size: usize,
    },
    Fixed(Task),
}

impl TaskSource {
    pub fn new(d: &LabelledDataset, config: &TrainConfig) -> Result<Self> {
        let d = match config.split_shuffle_seed {
            Some(s) => shuffled(d, s),
            None => d.clone(),
        };
        Ok(match config.effective_split(d.len()) {
            SplitMode::Split => {
                let (train, test) = split_dataset(&d)?;
                Self::Sampled {
                    train,
                    test,
                    support_set_size: config.support_set_size,
                }
            }
            SplitMode::NoSplit => Self::Sampled {
                train: d.clone(),
                test: d,
                support_set_size: config.support_set_size,
            },
            SplitMode::UseAll => Self::Fixed(Task::use_all(&d)?),
            SplitMode::Auto => unreachable!("resolved by effective_split"),
        })
    }

    pub fn next(&self, rng: &mut impl Rng) -> Result<Task> {
        match self {
            Self::Sampled {
                train,
                test,
                support_set_size,
            } => sample_task(train, test, *support_set_size, rng),
            Self::Fixed(t) => Ok(t.clone()),
        }
    }
}

/// True when no class has more than one example.
pub fn is_one_shot(d: &LabelledDataset) -> bool {
    d.class_counts().iter().all(|&n| n <= 1)
}

/// Episodic fine-tuning of ψ and e by Adam ascent on the query log-likelihood.
pub fn finetune(
    d: &LabelledDataset,
    backbone: &Backbone,
    config: &TrainConfig,
    variant: HeadVariant,
) -> Result<FinetuneOutput> {
    config.validate()?;
    if d.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let psi = backbone.identity_film();
    let e = CovarianceWeights::initial();
    if is_one_shot(d) {
        return Ok(FinetuneOutput {
            psi,
            e,
            trace: Vec::new(),
            skipped: true,
        });
    }
    let setup = HeadSetup::from_config(variant, config);
    let source = TaskSource::new(d, config)?;
    let (psi, e, trace) = train_episodic(&source, backbone, config, setup, psi, e, |_| {})?;
    Ok(FinetuneOutput {
        psi,
        e,
        trace,
        skipped: false,
    })
}

/// Runs `config.iterations` Adam ascent steps from (`psi`, `e`) on tasks
/// drawn from `source`. `post_step` sees the flat parameter vector
/// (ψ followed by the three log-weights) after every update.
pub fn train_episodic(
    source: &TaskSource,
    backbone: &Backbone,
    config: &TrainConfig,
    setup: HeadSetup,
    mut psi: FilmParams,
    mut e: CovarianceWeights,
    mut post_step: impl FnMut(&mut [f64]),
) -> Result<(FilmParams, CovarianceWeights, Vec<TraceEntry>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = psi.widths();
    let mut flat = psi.flatten();
    let n_psi = flat.len();
    flat.extend_from_slice(&e.logs());
    let mut adam = Adam::from_config(flat.len(), config);
    let start = Instant::now();
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let mut step = || -> Result<TraceEntry> {
            let task = source.next(&mut rng)?;
            let g = episode_gradient(&task, backbone, &psi, &e, setup)?;
            let mut grad = g.psi;
            grad.extend_from_slice(&g.log_e);
            adam.ascend(&mut flat, &grad);
            post_step(&mut flat);
            psi = FilmParams::from_flat(&widths, &flat[..n_psi])?;
            e = CovarianceWeights::from_logs([flat[n_psi], flat[n_psi + 1], flat[n_psi + 2]]);
            Ok(TraceEntry {
                iteration,
                loss: g.loss,
                way: task.way(),
                support: task.support.len(),
                query: task.query.len(),
                wall_ms: config
                    .trace_wall_clock
                    .then(|| start.elapsed().as_secs_f64() * 1e3),
            })
        };
        let entry = step().map_err(|err| err.at_iteration(iteration))?;
        log::debug!("iteration {iteration}: loss {:.6}", entry.loss);
        trace.push(entry);
    }
    Ok((psi, e, trace))
}

/// Embeds `support` under ψ and configures the head from all of it. The
/// cache covers the classes present in `support`.
pub fn build_model_cache(
    support: &LabelledDataset,
    backbone: &Backbone,
    psi: &FilmParams,
    e: &CovarianceWeights,
    variant: HeadVariant,
    protonets_prior: bool,
) -> Result<ClassifierCache> {
    let classes = support.classes_present();
    if classes.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let all: Vec<usize> = (0..support.len()).collect();
    let local = relabel(support, &all, &classes)?;
    let z = backbone.forward_batch(psi, local.features())?;
    let stats = estimate_stats(&z, local.labels(), classes.len())?;
    let mut cache = build_cache(&stats, e, variant, protonets_prior)?;
    cache.classes = classes;
    Ok(cache)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Over `classes`, in order.
    pub log_probs: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Posterior for one input with the head configured from all of `support`.
pub fn predict(
    support: &LabelledDataset,
    backbone: &Backbone,
    psi: &FilmParams,
    e: &CovarianceWeights,
    variant: HeadVariant,
    x: &[f64],
) -> Result<Prediction> {
    let cache = build_model_cache(support, backbone, psi, e, variant, false)?;
    let z = backbone.forward(psi, x)?;
    let log_probs = cache.predict_log_probs(&z)?;
    Ok(Prediction {
        label: cache.classes[argmax(&log_probs)],
        log_probs,
        classes: cache.classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub examples: usize,
    /// Accuracy per class present in the evaluation set.
    pub per_class: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predicted: &[usize]) -> Self {
        let mut hits = BTreeMap::<usize, (usize, usize)>::new();
        for (&y, &p) in labels.iter().zip(predicted) {
            let h = hits.entry(y).or_default();
            h.1 += 1;
            if y == p {
                h.0 += 1;
            }
        }
        let correct: usize = hits.values().map(|h| h.0).sum();
        Self {
            accuracy: if labels.is_empty() {
                0.0
            } else {
                correct as f64 / labels.len() as f64
            },
            examples: labels.len(),
            per_class: hits
                .into_iter()
                .map(|(c, (h, n))| (c, h as f64 / n as f64))
                .collect(),
        }
    }
}

/// Embeds `test` under ψ and scores it against `cache`.
pub fn evaluate(
    cache: &ClassifierCache,
    backbone: &Backbone,
    psi: &FilmParams,
    test: &LabelledDataset,
) -> Result<EvalReport> {
    let rows: Vec<usize> = (0..test.len()).collect();
    let predicted = exec::try_map_slice(&rows, |&i| {
        let z = backbone.forward(psi, test.example(i))?;
        cache.predict_label(&z)
    })?;
    Ok(EvalReport::from_predictions(test.labels(), &predicted))
}

pub fn write_trace_jsonl(path: impl AsRef<Path>, trace: &[TraceEntry]) -> Result<()> {
    write_jsonl(path, trace)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear head baseline

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFinetuneOutput {
    pub psi: FilmParams,
    pub head: LinearHead,
    pub trace: Vec<TraceEntry>,
}

/// Jointly trains ψ and a zero-initialized linear head by Adam descent on
/// mean cross-entropy over each task's support and query examples.
pub fn finetune_linear(
    d: &LabelledDataset,
    backbone: &Backbone,
    config: &TrainConfig,
) -> Result<LinearFinetuneOutput> {
    config.validate()?;
    if d.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let c = d.num_classes();
    let mut psi = backbone.identity_film();
    let mut lin = LinearHead::zeros(c, backbone.d_b());
    let source = TaskSource::new(d, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = psi.widths();
    let n_psi = psi.param_count();
    let n_w = c * backbone.d_b();
    let mut flat = psi.flatten();
    flat.extend_from_slice(lin.weight.as_slice());
    flat.extend_from_slice(&lin.bias);
    let mut adam = Adam::from_config(flat.len(), config);
    let mut trace = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    for iteration in 0..config.iterations {
        let mut step = || -> Result<TraceEntry> {
            let task = source.next(&mut rng)?;
            let local = task.support.concat(&task.query)?;
            let labels: Vec<usize> = local.labels().iter().map(|&l| task.classes[l]).collect();
            let mut g = Graph::new();
            let film = psi.to_graph(&mut g);
            let nodes = lin.to_graph(&mut g);
            let x = g.constant(local.features().clone());
            let z = backbone.forward_graph(&mut g, &film, x)?;
            let loss = linear_loss_graph(&mut g, nodes, z, &labels)?;
            let grads = g.gradient(loss)?;
            let mut grad = Vec::with_capacity(flat.len());
            for &(gamma, beta) in &film.layers {
                grad.extend_from_slice(grads.wrt(gamma).as_slice());
                grad.extend_from_slice(grads.wrt(beta).as_slice());
            }
            grad.extend_from_slice(grads.wrt(nodes.weight_t).transpose().as_slice());
            grad.extend_from_slice(grads.wrt(nodes.bias).as_slice());
            adam.descend(&mut flat, &grad);
            psi = FilmParams::from_flat(&widths, &flat[..n_psi])?;
            lin.weight = Matrix::from_vec(c, backbone.d_b(), flat[n_psi..n_psi + n_w].to_vec())?;
            lin.bias = flat[n_psi + n_w..].to_vec();
            Ok(TraceEntry {
                iteration,
                loss: g.value(loss).item(),
                way: task.way(),
                support: task.support.len(),
                query: task.query.len(),
                wall_ms: config
                    .trace_wall_clock
                    .then(|| start.elapsed().as_secs_f64() * 1e3),
            })
        };
        trace.push(step().map_err(|err| err.at_iteration(iteration))?);
    }
    Ok(LinearFinetuneOutput {
        psi,
        head: lin,
        trace,
    })
}

pub fn evaluate_linear(
    head: &LinearHead,
    backbone: &Backbone,
    psi: &FilmParams,
    test: &LabelledDataset,
) -> Result<EvalReport> {
    let rows: Vec<usize> = (0..test.len()).collect();
    let predicted = exec::try_map_slice(&rows, |&i| {
        let z = backbone.forward(psi, test.example(i))?;
        Ok(argmax(&head::linear_forward(head, &z)?))
    })?;
    Ok(EvalReport::from_predictions(test.labels(), &predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::data::{generate_synth, SynthSpec};
    use crate::head::predict_log_probs;

    fn counts_dataset(counts: &[usize]) -> LabelledDataset {
        let mut labels = Vec::new();
        // Interleave classes so dataset order is not grouped.
        let max = counts.iter().copied().max().unwrap_or(0);
        for k in 0..max {
            for (c, &n) in counts.iter().enumerate() {
                if k < n {
                    labels.push(c);
                }
            }
        }
        let feats = Matrix::from_vec(
            labels.len(),
            2,
            (0..labels.len() * 2).map(|i| i as f64).collect(),
        )
        .unwrap();
        LabelledDataset::new(feats, labels, counts.len()).unwrap()
    }

    #[test]
    fn split_counts() {
        let d = counts_dataset(&[5, 2, 3]);
        let (tr, te) = split_dataset(&d).unwrap();
        assert_eq!(tr.class_counts(), vec![3, 1, 2]);
        assert_eq!(te.class_counts(), vec![2, 1, 1]);
        // First examples of each class go to train.
        let first0 = d.indices_of(0)[..3].to_vec();
        for i in first0 {
            assert!((0..tr.len()).any(|j| tr.example(j) == d.example(i)));
        }
        let d = counts_dataset(&[3, 1]);
        assert!(matches!(
            split_dataset(&d),
            Err(FitError::TooFewShots { class: 1, count: 1 })
        ));
    }

    #[test]
    fn task_shapes() {
        let d = counts_dataset(&[20; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = sample_task(&d, &d, 100, &mut rng).unwrap();
            assert!((5..=10).contains(&t.way()));
            let shots = (100.0 / t.way() as f64).round_ties_even() as usize;
            for n in t.support.class_counts() {
                assert_eq!(n, shots.min(20));
            }
        }
        assert_eq!(round_half_even(100.0 / 7.0) as usize, 14);
        assert_eq!((MAX_QUERY_TOTAL / 5).max(1), 400);
        let empty = LabelledDataset::new(Matrix::zeros(0, 2), vec![], 3).unwrap();
        assert!(matches!(
            sample_task(&empty, &empty, 10, &mut rng),
            Err(FitError::EmptyDataset)
        ));
        // Fewer support slots than the minimum way.
        assert!(matches!(sample_task(&d, &d, 3, &mut rng), Err(FitError::Config(_))));
        let small = counts_dataset(&[4, 4]);
        assert_eq!(sample_task(&small, &small, 3, &mut rng).unwrap().way(), 2);
    }

    fn toy_task(seed: u64) -> (Task, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut sl = Vec::new();
        for c in 0..3 {
            for _ in 0..4 {
                rows.extend((0..3).map(|j| if j == c { 2.0 } else { 0.0 } + rng.random_range(-1.0..1.0)));
                sl.push(c);
            }
        }
        let support = LabelledDataset::new(Matrix::from_vec(12, 3, rows).unwrap(), sl, 3).unwrap();
        let q = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let query = LabelledDataset::new(q, vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let bb = Backbone::new(BackboneSpec::mlp(3, vec![5], 3, seed)).unwrap();
        (
            Task {
                support,
                query,
                classes: vec![0, 1, 2],
            },
            bb,
        )
    }

    fn perturbed(bb: &Backbone, seed: u64) -> FilmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = bb
            .identity_film()
            .flatten()
            .iter()
            .map(|v| v + rng.random_range(-0.3..0.3))
            .collect();
        FilmParams::from_flat(&bb.film_widths(), &flat).unwrap()
    }

    #[test]
    fn episode_loss_matches_straight_line() {
        let (task, bb) = toy_task(4);
        let psi = perturbed(&bb, 9);
        let e = CovarianceWeights::from_values([0.3, 0.6, 1.1]).unwrap();
        for variant in [HeadVariant::Qda, HeadVariant::Lda, HeadVariant::ProtoNets] {
            let got = episode_loss(&task, &bb, &psi, &e, HeadSetup::new(variant)).unwrap();
            let zs = bb.forward_batch(&psi, task.support.features()).unwrap();
            let stats = estimate_stats(&zs, task.support.labels(), 3).unwrap();
            let cache = build_cache(&stats, &e, variant, false).unwrap();
            let want: f64 = (0..task.query.len())
                .map(|i| {
                    let z = bb.forward(&psi, task.query.example(i)).unwrap();
                    predict_log_probs(&z, &cache).unwrap()[task.query.labels()[i]]
                })
                .sum();
            assert!((got - want).abs() < 1e-12, "{variant}: {got} vs {want}");
        }
    }

    #[test]
    fn uniform_single_query_gives_minus_log_c() {
        let support = LabelledDataset::new(
            Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
            vec![0, 1, 2, 3],
            4,
        )
        .unwrap();
        let query = LabelledDataset::new(Matrix::from_rows(&[[0.0, 0.0]]), vec![2], 4).unwrap();
        let task = Task {
            support,
            query,
            classes: vec![0, 1, 2, 3],
        };
        let bb = Backbone::new(BackboneSpec::identity(2)).unwrap();
        let l = episode_loss(
            &task,
            &bb,
            &bb.identity_film(),
            &CovarianceWeights::initial(),
            HeadSetup::new(HeadVariant::ProtoNets),
        )
        .unwrap();
        assert!((l + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_keeps_value_changes_gradient() {
        let (task, bb) = toy_task(6);
        let psi = perturbed(&bb, 2);
        let e = CovarianceWeights::initial();
        let mut setup = HeadSetup::new(HeadVariant::Lda);
        let a = episode_gradient(&task, &bb, &psi, &e, setup).unwrap();
        setup.stop_grad_support = true;
        let b = episode_gradient(&task, &bb, &psi, &e, setup).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_ne!(a.psi, b.psi);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [0.0, 0.0];
        adam.ascend(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.1).abs() < 1e-8);
        assert!((p[1] + 0.1).abs() < 1e-8);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_iterations_and_one_shot_return_identity() {
        let syn = generate_synth(&SynthSpec {
            num_classes: 4,
            latent_dim: 6,
            train_per_class: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let bb = Backbone::new(BackboneSpec::identity(6)).unwrap();
        let cfg = TrainConfig {
            iterations: 50,
            ..TrainConfig::default()
        };
        let out = finetune(&syn.train, &bb, &cfg, HeadVariant::Lda).unwrap();
        assert!(out.skipped && out.psi.is_identity());
        assert_eq!(out.e.values(), [0.5, 0.5, 1.0]);

        let syn = generate_synth(&SynthSpec {
            num_classes: 4,
            latent_dim: 6,
            train_per_class: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = finetune(&syn.train, &bb, &cfg, HeadVariant::Qda).unwrap();
        assert!(!out.skipped && out.psi.is_identity() && out.trace.is_empty());
        assert_eq!(out.e, CovarianceWeights::initial());
    }

    #[test]
    fn finetune_is_deterministic() {
        let syn = generate_synth(&SynthSpec {
            num_classes: 5,
            latent_dim: 8,
            train_per_class: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        let bb = Backbone::new(BackboneSpec::identity(8)).unwrap();
        let cfg = TrainConfig {
            iterations: 15,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = finetune(&syn.train, &bb, &cfg, HeadVariant::Lda).unwrap();
        let b = finetune(&syn.train, &bb, &cfg, HeadVariant::Lda).unwrap();
        assert_eq!(a, b);
        assert!(!a.psi.is_identity());
    }

    #[test]
    fn use_all_task_is_whole_dataset() {
        let d = counts_dataset(&[3, 2]);
        let src = TaskSource::new(
            &d,
            &TrainConfig {
                split_mode: SplitMode::UseAll,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let t = src.next(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.support, t.query);
        assert_eq!(t.support.len(), 5);
    }

    #[test]
    fn prediction_paths_agree() {
        let support = LabelledDataset::new(
            Matrix::from_rows(&[[-1.0], [-1.0], [1.0], [1.0]]),
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let bb = Backbone::new(BackboneSpec::identity(1)).unwrap();
        let psi = bb.identity_film();
        let e = CovarianceWeights::initial();
        let p = predict(&support, &bb, &psi, &e, HeadVariant::Lda, &[0.0]).unwrap();
        assert!((p.log_probs[0].exp() - 0.5).abs() < 1e-12);

        let p = predict(&support, &bb, &psi, &e, HeadVariant::ProtoNets, &[0.9]).unwrap();
        let cache = build_model_cache(&support, &bb, &psi, &e, HeadVariant::ProtoNets, false).unwrap();
        assert_eq!(p.log_probs, cache.predict_log_probs(&[0.9]).unwrap());
        assert_eq!(p.label, 1);
    }

    #[test]
    fn eval_report_per_class() {
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class[&0], 0.5);
        assert_eq!(r.per_class[&1], 1.0);
    }
}
