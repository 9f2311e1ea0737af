//! Federated simulator: clients train FiLM parameters locally with a
//! ProtoNets head, the server averages them, and a global classifier is
//! assembled from client prototypes. Messages are simulated; only parameter
//! counts are ledgered.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FilmParams};
use crate::data::LabelledDataset;
use crate::episodic::{
    is_one_shot, train_episodic, write_jsonl, HeadSetup, SplitMode, TaskSource, TrainConfig,
};
use crate::error::{FitError, Result};
use crate::exec;
use crate::head::{prototype_cache, ClassifierCache, CovarianceWeights, HeadVariant};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum FedAlgorithm {
    FedAvg,
    FedProx { mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub shots_per_class: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub algorithm: FedAlgorithm,
    pub seed: u64,
    pub support_set_size: usize,
    /// Clients sharing a class get disjoint examples of it.
    pub disjoint_examples: bool,
    /// Weights client prototypes by example count when averaging.
    pub weighted_prototypes: bool,
    pub baseline_steps: usize,
    pub baseline_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            classes_per_client: 5,
            shots_per_class: 5,
            rounds: 60,
            clients_per_round: 5,
            local_steps: 10,
            learning_rate: 0.003,
            lr_decay: 0.3,
            lr_decay_every: 20,
            algorithm: FedAlgorithm::FedAvg,
            seed: 0,
            support_set_size: 100,
            disjoint_examples: true,
            weighted_prototypes: false,
            baseline_steps: 400,
            baseline_learning_rate: 0.003,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.classes_per_client == 0 || self.shots_per_class == 0 {
            return Err(FitError::Config(
                "num_clients, classes_per_client and shots_per_class must be positive".into(),
            ));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(FitError::Config(format!(
                "clients_per_round {} must be in 1..={}",
                self.clients_per_round, self.num_clients
            )));
        }
        if let FedAlgorithm::FedProx { mu } = self.algorithm {
            if !(mu >= 0.0) || !mu.is_finite() {
                return Err(FitError::Config(format!("FedProx mu must be >= 0, got {mu}")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.baseline_learning_rate > 0.0) {
            return Err(FitError::Config("learning rates must be positive".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(FitError::Config("lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Client learning rate for round `round` (1-based).
    pub fn round_lr(&self, round: usize) -> f64 {
        let k = round.saturating_sub(1) / self.lr_decay_every;
        self.learning_rate * self.lr_decay.powi(k as i32)
    }

    fn train_config(&self, lr: f64, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            iterations,
            support_set_size: self.support_set_size,
            split_mode: SplitMode::Auto,
            seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            ..TrainConfig::default()
        }
    }
}

const STREAM_PARTITION: u64 = 1;
const STREAM_ROUND: u64 = 2;
const STREAM_LOCAL: u64 = 3;
const STREAM_BASELINE: u64 = 4;

/// Mixes a seed with stream and index words (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for w in [stream, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(w.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Ascending.
    pub classes: Vec<usize>,
    /// Local examples with global labels.
    pub data: LabelledDataset,
}

/// Assigns each client `classes_per_client` random classes and
/// `shots_per_class` examples of each.
pub fn partition_clients(dataset: &LabelledDataset, config: &FedConfig) -> Result<Vec<ClientState>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PARTITION, 0, 0));
    let classes = dataset.classes_present();
    if classes.len() < config.classes_per_client {
        return Err(FitError::InsufficientData(format!(
            "{} classes available, {} per client requested",
            classes.len(),
            config.classes_per_client
        )));
    }
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if config.disjoint_examples {
        for &c in &classes {
            let mut idx = dataset.indices_of(c);
            idx.shuffle(&mut rng);
            pools.insert(c, idx);
        }
    }
    let mut clients = Vec::with_capacity(config.num_clients);
    for id in 0..config.num_clients {
        let mut own: Vec<usize> = sample(&mut rng, classes.len(), config.classes_per_client)
            .into_iter()
            .map(|i| classes[i])
            .collect();
        own.sort_unstable();
        let mut rows = Vec::new();
        for &c in &own {
            let picked: Vec<usize> = if config.disjoint_examples {
                let pool = pools.get_mut(&c).expect("pool per class");
                if pool.len() < config.shots_per_class {
                    return Err(FitError::InsufficientData(format!(
                        "class {c} ran out of examples at client {id}"
                    )));
                }
                pool.drain(..config.shots_per_class).collect()
            } else {
                let idx = dataset.indices_of(c);
                if idx.len() < config.shots_per_class {
                    return Err(FitError::InsufficientData(format!(
                        "class {c} has {} examples, {} shots requested",
                        idx.len(),
                        config.shots_per_class
                    )));
                }
                sample(&mut rng, idx.len(), config.shots_per_class)
                    .into_iter()
                    .map(|i| idx[i])
                    .collect()
            };
            rows.extend(picked);
        }
        clients.push(ClientState {
            id,
            classes: own,
            data: dataset.subset(&rows),
        });
    }
    Ok(clients)
}

fn prox_hook(mu: f64, lr: f64, anchor: Vec<f64>) -> impl FnMut(&mut [f64]) {
    let k = lr * mu;
    move |flat: &mut [f64]| {
        for (p, a) in flat.iter_mut().zip(&anchor) {
            *p = (*p + k * a) / (1.0 + k);
        }
    }
}

/// `steps` ProtoNets episodes on the client's data starting from
/// `global_psi`, with a fresh Adam state. FedProx applies the proximal
/// map of `μ/2·‖ψ − ψ_global‖²` after each Adam step.
pub fn local_update(
    client: &ClientState,
    global_psi: &FilmParams,
    backbone: &Backbone,
    algorithm: FedAlgorithm,
    train: &TrainConfig,
) -> Result<FilmParams> {
    let run = || -> Result<FilmParams> {
        if train.iterations == 0 || client.data.is_empty() || is_one_shot(&client.data) {
            return Ok(global_psi.clone());
        }
        let source = TaskSource::new(&client.data, train)?;
        let setup = HeadSetup::from_config(HeadVariant::ProtoNets, train);
        let e = CovarianceWeights::initial();
        let (psi, _, _) = match algorithm {
            FedAlgorithm::FedProx { mu } if mu > 0.0 => {
                let mut anchor = global_psi.flatten();
                anchor.extend_from_slice(&e.logs());
                train_episodic(
                    &source,
                    backbone,
                    train,
                    setup,
                    global_psi.clone(),
                    e,
                    prox_hook(mu, train.learning_rate, anchor),
                )?
            }
            _ => train_episodic(&source, backbone, train, setup, global_psi.clone(), e, |_| {})?,
        };
        Ok(psi)
    };
    run().map_err(|err| err.for_client(client.id))
}

/// Elementwise mean, summed in the order given.
pub fn aggregate_films(updates: &[FilmParams]) -> Result<FilmParams> {
    let first = updates
        .first()
        .ok_or_else(|| FitError::InsufficientData("no updates to aggregate".into()))?;
    let widths = first.widths();
    let mut acc = vec![0.0; first.param_count()];
    for u in updates {
        if u.widths() != widths {
            return Err(FitError::DimensionMismatch(format!(
                "update widths {:?} vs {:?}",
                u.widths(),
                widths
            )));
        }
        for (a, v) in acc.iter_mut().zip(u.flatten()) {
            *a += v;
        }
    }
    let n = updates.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    FilmParams::from_flat(&widths, &acc)
}

/// Per-class mean embeddings of a client's data under ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub classes: Vec<usize>,
    pub means: Matrix,
    pub counts: Vec<usize>,
}

pub fn client_prototypes(
    client: &ClientState,
    backbone: &Backbone,
    psi: &FilmParams,
) -> Result<PrototypeTable> {
    let z = backbone.forward_batch(psi, client.data.features())?;
    let d = z.cols();
    let mut means = Matrix::zeros(client.classes.len(), d);
    let mut counts = vec![0; client.classes.len()];
    for (i, &y) in client.data.labels().iter().enumerate() {
        let k = client
            .classes
            .binary_search(&y)
            .map_err(|_| FitError::UncoveredClass { class: y })?;
        counts[k] += 1;
        for (m, v) in means.row_mut(k).iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(FitError::EmptyClass {
                class: client.classes[k],
            });
        }
        for m in means.row_mut(k) {
            *m /= n as f64;
        }
    }
    Ok(PrototypeTable {
        classes: client.classes.clone(),
        means,
        counts,
    })
}

/// Classes owned by at least one client, ascending.
pub fn covered_classes(clients: &[ClientState]) -> Vec<usize> {
    let mut all: Vec<usize> = clients.iter().flat_map(|c| c.classes.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Averages client prototypes per class over `vocabulary`.
pub fn global_prototypes_from_tables(
    tables: &[PrototypeTable],
    vocabulary: &[usize],
    weighted: bool,
) -> Result<ClassifierCache> {
    let d = tables.first().map_or(0, |t| t.means.cols());
    let mut means = Matrix::zeros(vocabulary.len(), d);
    for (row, &c) in vocabulary.iter().enumerate() {
        let mut total = 0.0;
        for t in tables {
            if let Ok(k) = t.classes.binary_search(&c) {
                let w = if weighted { t.counts[k] as f64 } else { 1.0 };
                for (m, v) in means.row_mut(row).iter_mut().zip(t.means.row(k)) {
                    *m += w * v;
                }
                total += w;
            }
        }
        if total == 0.0 {
            return Err(FitError::UncoveredClass { class: c });
        }
        for m in means.row_mut(row) {
            *m /= total;
        }
    }
    Ok(prototype_cache(vocabulary.to_vec(), means))
}

/// Global ProtoNets cache over the covered classes under `psi`.
pub fn build_global_prototypes(
    clients: &[ClientState],
    psi: &FilmParams,
    backbone: &Backbone,
    weighted: bool,
) -> Result<ClassifierCache> {
    let tables = exec::try_map_slice(clients, |c| client_prototypes(c, backbone, psi))?;
    global_prototypes_from_tables(&tables, &covered_classes(clients), weighted)
}

/// Accuracy of `cache` on the test examples whose class the cache knows.
pub fn restricted_accuracy(
    cache: &ClassifierCache,
    backbone: &Backbone,
    psi: &FilmParams,
    test: &LabelledDataset,
) -> Result<f64> {
    let t = test.filter_classes(&cache.classes);
    Ok(crate::episodic::evaluate(cache, backbone, psi, &t)?.accuracy)
}

/// Mean over clients of each client's accuracy on the test examples of its
/// own classes, using `model(client)` = (ψ, cache).
pub fn mean_personalized_accuracy<F>(
    clients: &[ClientState],
    backbone: &Backbone,
    test: &LabelledDataset,
    model: F,
) -> Result<f64>
where
    F: Fn(&ClientState) -> Result<(FilmParams, ClassifierCache)> + Sync + Send,
{
    let accs = exec::try_map_slice(clients, |c| {
        let (psi, cache) = model(c)?;
        restricted_accuracy(&cache, backbone, &psi, test)
    })?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

fn own_prototype_cache(
    client: &ClientState,
    backbone: &Backbone,
    psi: &FilmParams,
) -> Result<ClassifierCache> {
    let t = client_prototypes(client, backbone, psi)?;
    Ok(prototype_cache(t.classes, t.means))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub client_ids: Vec<usize>,
    pub params_down: usize,
    pub params_up: usize,
    pub cum_cost: usize,
    pub global_acc: f64,
    pub personalized_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedRun {
    pub logs: Vec<RoundLog>,
    pub global_psi: FilmParams,
    pub global_cache: ClassifierCache,
    /// Per client, in id order.
    pub personalized: Vec<ClassifierCache>,
}

fn evaluate_round(
    clients: &[ClientState],
    backbone: &Backbone,
    psi: &FilmParams,
    test: &LabelledDataset,
    config: &FedConfig,
) -> Result<(ClassifierCache, f64, f64)> {
    let global = build_global_prototypes(clients, psi, backbone, config.weighted_prototypes)?;
    let global_acc = restricted_accuracy(&global, backbone, psi, test)?;
    let personalized = mean_personalized_accuracy(clients, backbone, test, |c| {
        Ok((psi.clone(), own_prototype_cache(c, backbone, psi)?))
    })?;
    Ok((global, global_acc, personalized))
}

/// Runs the full protocol. `on_round` sees every log row as soon as it is
/// produced (row 0 is the identity-ψ baseline), so a failing run keeps the
/// rows already emitted.
pub fn run_federated<F>(
    clients: &[ClientState],
    test: &LabelledDataset,
    backbone: &Backbone,
    config: &FedConfig,
    mut on_round: F,
) -> Result<FedRun>
where
    F: FnMut(&RoundLog) -> Result<()>,
{
    config.validate()?;
    if clients.len() != config.num_clients {
        return Err(FitError::Config(format!(
            "{} clients for num_clients {}",
            clients.len(),
            config.num_clients
        )));
    }
    let mut psi = backbone.identity_film();
    let psi_len = psi.param_count();
    let (mut cache, g, p) = evaluate_round(clients, backbone, &psi, test, config)?;
    let mut logs = vec![RoundLog {
        round: 0,
        client_ids: Vec::new(),
        params_down: 0,
        params_up: 0,
        cum_cost: 0,
        global_acc: g,
        personalized_acc: p,
    }];
    on_round(&logs[0])?;
    let mut cum = 0;
    for round in 1..=config.rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ROUND, round as u64, 0));
        let mut ids: Vec<usize> = sample(&mut rng, clients.len(), config.clients_per_round).into_vec();
        ids.sort_unstable();
        let lr = config.round_lr(round);
        let updates = exec::try_map_slice(&ids, |&id| {
            let train = config.train_config(
                lr,
                config.local_steps,
                derive_seed(config.seed, STREAM_LOCAL, round as u64, id as u64),
            );
            local_update(&clients[id], &psi, backbone, config.algorithm, &train)
        })?;
        psi = aggregate_films(&updates)?;
        let down = ids.len() * psi_len;
        let up = ids.len() * psi_len;
        cum += down + up;
        let (c, g, p) = evaluate_round(clients, backbone, &psi, test, config)?;
        cache = c;
        let log = RoundLog {
            round,
            client_ids: ids,
            params_down: down,
            params_up: up,
            cum_cost: cum,
            global_acc: g,
            personalized_acc: p,
        };
        log::info!(
            "round {round}: clients {:?}, global {:.4}, personalized {:.4}, cost {cum}",
            log.client_ids,
            g,
            p
        );
        on_round(&log)?;
        logs.push(log);
    }
    let personalized = exec::try_map_slice(clients, |c| own_prototype_cache(c, backbone, &psi))?;
    Ok(FedRun {
        logs,
        global_psi: psi,
        global_cache: cache,
        personalized,
    })
}

pub fn write_round_logs(path: impl AsRef<Path>, logs: &[RoundLog]) -> Result<()> {
    write_jsonl(path, logs)
}

/// Result of a baseline: global cache and accuracy, mean personalized accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub global_psi: FilmParams,
    pub global_cache: ClassifierCache,
    pub global_acc: f64,
    pub personalized_acc: f64,
}

fn union_data(clients: &[ClientState]) -> Result<LabelledDataset> {
    let mut it = clients.iter();
    let first = it
        .next()
        .ok_or_else(|| FitError::InsufficientData("no clients".into()))?
        .data
        .clone();
    it.try_fold(first, |acc, c| acc.concat(&c.data))
}

fn baseline_train(
    data: &LabelledDataset,
    backbone: &Backbone,
    config: &FedConfig,
    stream_index: u64,
) -> Result<FilmParams> {
    let train = config.train_config(
        config.baseline_learning_rate,
        config.baseline_steps,
        derive_seed(config.seed, STREAM_BASELINE, stream_index, 0),
    );
    let client = ClientState {
        id: stream_index as usize,
        classes: data.classes_present(),
        data: data.clone(),
    };
    local_update(&client, &backbone.identity_film(), backbone, FedAlgorithm::FedAvg, &train)
}

/// Centralized training on the union of client data.
pub fn upper_bound(
    clients: &[ClientState],
    test: &LabelledDataset,
    backbone: &Backbone,
    config: &FedConfig,
) -> Result<BoundReport> {
    config.validate()?;
    let union = union_data(clients)?;
    let psi = baseline_train(&union, backbone, config, 0)?;
    let everyone = ClientState {
        id: 0,
        classes: union.classes_present(),
        data: union,
    };
    let tables = vec![client_prototypes(&everyone, backbone, &psi)?];
    let global = global_prototypes_from_tables(&tables, &everyone.classes, false)?;
    let global_acc = restricted_accuracy(&global, backbone, &psi, test)?;
    let personalized_acc = mean_personalized_accuracy(clients, backbone, test, |c| {
        Ok((psi.clone(), global.restrict(&c.classes)?))
    })?;
    Ok(BoundReport {
        global_psi: psi,
        global_cache: global,
        global_acc,
        personalized_acc,
    })
}

/// Independent per-client training, averaged once.
pub fn lower_bound(
    clients: &[ClientState],
    test: &LabelledDataset,
    backbone: &Backbone,
    config: &FedConfig,
) -> Result<BoundReport> {
    config.validate()?;
    let local = exec::try_map_slice(clients, |c| baseline_train(&c.data, backbone, config, c.id as u64))?;
    let psi = aggregate_films(&local)?;
    let global = build_global_prototypes(clients, &psi, backbone, config.weighted_prototypes)?;
    let global_acc = restricted_accuracy(&global, backbone, &psi, test)?;
    let personalized_acc = mean_personalized_accuracy(clients, backbone, test, |c| {
        let own = &local[clients.iter().position(|k| k.id == c.id).expect("member")];
        Ok((own.clone(), own_prototype_cache(c, backbone, own)?))
    })?;
    Ok(BoundReport {
        global_psi: psi,
        global_cache: global,
        global_acc,
        personalized_acc,
    })
}

/// Parameters moved per round when each selected client downloads and
/// uploads `payload` values.
pub fn round_cost(clients_per_round: usize, payload: usize) -> usize {
    2 * clients_per_round * payload
}

pub fn total_cost(rounds: usize, clients_per_round: usize, payload: usize) -> usize {
    rounds * round_cost(clients_per_round, payload)
}

/// Full-model payload of fine-tuning a backbone of `theta` parameters with a
/// `classes x d_b` linear head.
pub fn full_model_payload(theta: usize, classes: usize, d_b: usize) -> usize {
    theta + classes * d_b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, RESNET50_FILM_PARAMS};
    use crate::data::{generate_synth, SynthSpec};
    use crate::head::BIT_R50_BACKBONE_PARAMS;

    fn pool(classes: usize, per: usize, dim: usize) -> (LabelledDataset, LabelledDataset) {
        let s = generate_synth(&SynthSpec {
            num_classes: classes,
            latent_dim: dim,
            train_per_class: per,
            test_per_class: 10,
            seed: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        (s.train, s.test)
    }

    fn small_config() -> FedConfig {
        FedConfig {
            num_clients: 4,
            classes_per_client: 3,
            shots_per_class: 4,
            rounds: 2,
            clients_per_round: 2,
            local_steps: 3,
            baseline_steps: 5,
            ..FedConfig::default()
        }
    }

    #[test]
    fn paper_costs() {
        assert_eq!(round_cost(5, RESNET50_FILM_PARAMS), 116_480);
        assert_eq!(total_cost(60, 5, RESNET50_FILM_PARAMS), 6_988_800);
        let payload = full_model_payload(BIT_R50_BACKBONE_PARAMS, 100, 2048);
        assert_eq!(round_cost(5, payload), 237_051_520);
        assert_eq!(total_cost(60, 5, payload), 14_223_091_200);
    }

    #[test]
    fn lr_schedule() {
        let c = FedConfig::default();
        assert_eq!(c.round_lr(1), 0.003);
        assert_eq!(c.round_lr(20), 0.003);
        assert!((c.round_lr(21) - 0.0009).abs() < 1e-15);
        assert!((c.round_lr(41) - 0.003 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn partition_shapes_and_determinism() {
        let (train, _) = pool(20, 30, 20);
        let cfg = FedConfig {
            num_clients: 10,
            classes_per_client: 10,
            shots_per_class: 2,
            ..FedConfig::default()
        };
        let a = partition_clients(&train, &cfg).unwrap();
        for c in &a {
            let mut k = c.classes.clone();
            k.dedup();
            assert_eq!(k.len(), 10);
            assert_eq!(c.data.len(), 20);
        }
        assert_eq!(a, partition_clients(&train, &cfg).unwrap());
        let too_many = FedConfig {
            classes_per_client: 21,
            ..cfg
        };
        assert!(matches!(
            partition_clients(&train, &too_many),
            Err(FitError::InsufficientData(_))
        ));
    }

    #[test]
    fn aggregation() {
        let widths = [2];
        let a = FilmParams::from_flat(&widths, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = FilmParams::from_flat(&widths, &[2.0, 2.0, 3.0, -1.0]).unwrap();
        let m = aggregate_films(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.flatten(), vec![1.0, 1.0, 2.0, 0.0]);
        assert_eq!(aggregate_films(&[a.clone(), a.clone()]).unwrap(), a);
        let c = FilmParams::from_flat(&[3], &[0.0; 6]).unwrap();
        assert!(matches!(
            aggregate_films(&[a, c]),
            Err(FitError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn local_update_zero_steps_and_prox_zero() {
        let (train, _) = pool(6, 20, 8);
        let cfg = small_config();
        let clients = partition_clients(&train, &cfg).unwrap();
        let bb = Backbone::new(BackboneSpec::identity(8)).unwrap();
        let g = bb.identity_film();
        let t0 = cfg.train_config(0.003, 0, 1);
        assert_eq!(
            local_update(&clients[0], &g, &bb, FedAlgorithm::FedAvg, &t0).unwrap(),
            g
        );
        let t = cfg.train_config(0.003, 5, 1);
        let avg = local_update(&clients[0], &g, &bb, FedAlgorithm::FedAvg, &t).unwrap();
        let prox = local_update(&clients[0], &g, &bb, FedAlgorithm::FedProx { mu: 0.0 }, &t).unwrap();
        let bits = |p: &FilmParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&avg), bits(&prox));
        let strong = local_update(&clients[0], &g, &bb, FedAlgorithm::FedProx { mu: 1e6 }, &t).unwrap();
        let ratio = strong.squared_distance(&g).unwrap().sqrt() / avg.squared_distance(&g).unwrap().sqrt();
        assert!(ratio < 1e-3, "{ratio}");
    }

    #[test]
    fn global_prototypes_are_mean_of_client_means() {
        let t1 = PrototypeTable {
            classes: vec![0, 2],
            means: Matrix::from_rows(&[[1.0, 1.0], [4.0, 0.0]]),
            counts: vec![2, 2],
        };
        let t2 = PrototypeTable {
            classes: vec![2],
            means: Matrix::from_rows(&[[0.0, 2.0]]),
            counts: vec![6],
        };
        let cache = global_prototypes_from_tables(&[t1.clone(), t2.clone()], &[0, 2], false).unwrap();
        let crate::head::CacheKind::ProtoNets { means, .. } = &cache.kind else {
            panic!()
        };
        assert_eq!(means.row(0), &[1.0, 1.0]);
        assert_eq!(means.row(1), &[2.0, 1.0]);
        let w = global_prototypes_from_tables(&[t1.clone(), t2.clone()], &[0, 2], true).unwrap();
        let crate::head::CacheKind::ProtoNets { means, .. } = &w.kind else {
            panic!()
        };
        assert_eq!(means.row(1), &[1.0, 1.5]);
        assert!(matches!(
            global_prototypes_from_tables(&[t1, t2], &[0, 1, 2], false),
            Err(FitError::UncoveredClass { class: 1 })
        ));
    }

    #[test]
    fn zero_rounds_logs_baseline_only() {
        let (train, test) = pool(6, 20, 8);
        let cfg = FedConfig {
            rounds: 0,
            ..small_config()
        };
        let clients = partition_clients(&train, &cfg).unwrap();
        let bb = Backbone::new(BackboneSpec::identity(8)).unwrap();
        let run = run_federated(&clients, &test, &bb, &cfg, |_| Ok(())).unwrap();
        assert_eq!(run.logs.len(), 1);
        assert_eq!(run.logs[0].cum_cost, 0);
        assert!(run.global_psi.is_identity());
    }

    #[test]
    fn run_is_deterministic_and_costs_add_up() {
        let (train, test) = pool(6, 20, 8);
        let cfg = small_config();
        let clients = partition_clients(&train, &cfg).unwrap();
        let bb = Backbone::new(BackboneSpec::identity(8)).unwrap();
        let mut streamed = Vec::new();
        let a = run_federated(&clients, &test, &bb, &cfg, |l| {
            streamed.push(l.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(streamed, a.logs);
        let b = run_federated(&clients, &test, &bb, &cfg, |_| Ok(())).unwrap();
        assert_eq!(a, b);
        let per = round_cost(cfg.clients_per_round, bb.identity_film().param_count());
        for w in a.logs.windows(2) {
            assert_eq!(w[1].cum_cost, w[0].cum_cost + per);
            assert_eq!(w[1].client_ids.len(), cfg.clients_per_round);
        }
    }

    #[test]
    fn single_client_bounds_agree() {
        let (train, test) = pool(6, 20, 8);
        let cfg = FedConfig {
            num_clients: 1,
            clients_per_round: 1,
            ..small_config()
        };
        let clients = partition_clients(&train, &cfg).unwrap();
        let bb = Backbone::new(BackboneSpec::identity(8)).unwrap();
        let up = upper_bound(&clients, &test, &bb, &cfg).unwrap();
        let lo = lower_bound(&clients, &test, &bb, &cfg).unwrap();
        assert_eq!(up.global_psi, lo.global_psi);
        assert_eq!(up.global_acc, lo.global_acc);
        assert_eq!(up.personalized_acc, lo.personalized_acc);
    }
}
