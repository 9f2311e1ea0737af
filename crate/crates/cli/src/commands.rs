use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use fit_core::backbone::{film_magnitude_stats, FilmParams};
use fit_core::data::{generate_synth, load_csv, save_csv, LabelledDataset};
use fit_core::episodic::{
    build_model_cache, evaluate, evaluate_linear, finetune as run_finetune, finetune_linear,
    write_trace_jsonl, EvalReport,
};
use fit_core::fed::{lower_bound, partition_clients, run_federated, upper_bound, BoundReport};
use fit_core::head::{
    count_shared, count_updateable, rmus, CovarianceWeights, Method, BIT_R50_BACKBONE_PARAMS,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{
    resolve, under, EvalConfig, FedsimConfig, FinetuneConfig, Overrides, SynthConfig,
};
use crate::output::{
    check_jsonl, save_cache, save_psi, thousands, write_json, write_manifest, UsageError,
};
use crate::Globals;

fn config_path(g: &Globals) -> Option<PathBuf> {
    g.config.as_deref().map(|p| under(&g.out_dir, p))
}

fn prepare_out_dir(g: &Globals) -> Result<()> {
    fs::create_dir_all(&g.out_dir)
        .with_context(|| format!("creating output directory {}", g.out_dir.display()))
}

fn load(g: &Globals, p: &Path) -> Result<LabelledDataset> {
    let path = under(&g.out_dir, p);
    load_csv(&path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Args, Debug, Default)]
pub struct BackboneArgs {
    /// identity-with-film or mlp-with-film.
    #[arg(long = "backbone")]
    kind: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    d_b: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
}

impl BackboneArgs {
    fn push(&self, o: &mut Overrides) {
        o.opt("backbone.kind", &self.kind)
            .opt("backbone.widths", &self.widths)
            .opt("backbone.d_b", &self.d_b)
            .opt("backbone.seed", &self.backbone_seed);
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    distortion_scale: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn synth(g: &Globals, a: SynthArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("num_classes", &a.num_classes)
        .opt("latent_dim", &a.latent_dim)
        .opt("separation", &a.separation)
        .opt("noise_std", &a.noise_std)
        .opt("distortion_scale", &a.distortion_scale)
        .opt("train_per_class", &a.train_per_class)
        .opt("test_per_class", &a.test_per_class)
        .opt("seed", &a.seed);
    let spec: SynthConfig = resolve(config_path(g).as_deref(), o.into_vec())?;
    spec.validate()?;
    prepare_out_dir(g)?;
    let data = generate_synth(&spec)?;
    for (name, d) in [("train.csv", &data.train), ("test.csv", &data.test)] {
        let p = g.out_dir.join(name);
        save_csv(d, &p)?;
        let back = load_csv(&p)?;
        if back.len() != d.len() || back.labels() != d.labels() {
            bail!("{} did not read back", p.display());
        }
    }
    save_psi(&g.out_dir.join("oracle_film.bin"), &data.oracle_film)?;
    write_manifest(&g.out_dir, "synth", spec.seed, &spec)?;
    println!(
        "wrote {} train and {} test examples ({} classes, dim {})",
        data.train.len(),
        data.test.len(),
        spec.num_classes,
        spec.latent_dim
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out set for the evaluation report.
    #[arg(long)]
    test: Option<PathBuf>,
    /// qda, lda or protonets.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    linear_baseline: Option<bool>,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    support_set_size: Option<usize>,
    /// split, no-split, use-all or auto.
    #[arg(long)]
    split_mode: Option<String>,
    #[arg(long)]
    auto_split_threshold: Option<usize>,
    #[arg(long)]
    split_shuffle_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stop_grad_support: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    protonets_prior: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trace_wall_clock: Option<bool>,
}

/// Head weights on disk. `log` is `null` where a weight is exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub values: [f64; 3],
    pub log: [Option<f64>; 3],
}

impl WeightsFile {
    pub fn from_weights(e: &CovarianceWeights) -> Self {
        let l = e.logs();
        Self {
            values: e.values(),
            log: l.map(|x| x.is_finite().then_some(x)),
        }
    }

    pub fn to_weights(&self) -> CovarianceWeights {
        CovarianceWeights::from_logs(self.log.map(|x| x.unwrap_or(f64::NEG_INFINITY)))
    }
}

fn write_report(path: &Path, r: &EvalReport) -> Result<()> {
    write_json(path, r)
}

pub fn finetune(g: &Globals, a: FinetuneArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("train", &a.train)
        .opt("test", &a.test)
        .opt("variant", &a.variant)
        .opt("shots", &a.shots)
        .opt("linear_baseline", &a.linear_baseline)
        .opt("training.learning_rate", &a.learning_rate)
        .opt("training.iterations", &a.iterations)
        .opt("training.support_set_size", &a.support_set_size)
        .opt("training.split_mode", &a.split_mode)
        .opt("training.auto_split_threshold", &a.auto_split_threshold)
        .opt("training.split_shuffle_seed", &a.split_shuffle_seed)
        .opt("training.seed", &a.seed)
        .opt("training.stop_grad_support", &a.stop_grad_support)
        .opt("training.protonets_prior", &a.protonets_prior)
        .opt("training.trace_wall_clock", &a.trace_wall_clock);
    a.backbone.push(&mut o);
    let cfg: FinetuneConfig = resolve(config_path(g).as_deref(), o.into_vec())?;
    cfg.training.validate()?;
    prepare_out_dir(g)?;

    let mut train = load(g, &cfg.train)?;
    if let Some(s) = cfg.shots {
        train = train.take_shots(s);
    }
    let test = cfg.test.as_deref().map(|p| load(g, p)).transpose()?;
    let backbone = cfg.backbone.build(train.dim())?;
    log::info!(
        "finetune {} on {} examples, |psi| = {}",
        cfg.variant,
        train.len(),
        backbone.identity_film().param_count()
    );

    let out = run_finetune(&train, &backbone, &cfg.training, cfg.variant)?;
    if out.skipped {
        log::info!("one example per class: optimization skipped");
    }
    let dir = &g.out_dir;
    save_psi(&dir.join("psi.bin"), &out.psi)?;
    write_json(&dir.join("weights.json"), &WeightsFile::from_weights(&out.e))?;
    write_trace_jsonl(dir.join("trace.jsonl"), &out.trace)?;
    check_jsonl(&dir.join("trace.jsonl"), out.trace.len())?;
    let cache = build_model_cache(
        &train,
        &backbone,
        &out.psi,
        &out.e,
        cfg.variant,
        cfg.training.protonets_prior,
    )?;
    save_cache(&dir.join("cache.bin"), &cache)?;

    if let Some(test) = &test {
        let r = evaluate(&cache, &backbone, &out.psi, test)?;
        write_report(&dir.join("report.json"), &r)?;
        println!("{} accuracy {:.4} on {} examples", cfg.variant, r.accuracy, r.examples);
    }

    if cfg.linear_baseline {
        let lin = finetune_linear(&train, &backbone, &cfg.training)?;
        write_trace_jsonl(dir.join("linear_trace.jsonl"), &lin.trace)?;
        check_jsonl(&dir.join("linear_trace.jsonl"), lin.trace.len())?;
        if let Some(test) = &test {
            let r = evaluate_linear(&lin.head, &backbone, &lin.psi, test)?;
            write_report(&dir.join("linear_report.json"), &r)?;
            println!("linear accuracy {:.4} on {} examples", r.accuracy, r.examples);
        }
    }
    write_manifest(dir, "finetune", cfg.training.seed, &cfg)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    /// FiLM blob; identity when omitted.
    #[arg(long)]
    psi: Option<PathBuf>,
    /// weights.json from finetune; initial weights when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    protonets_prior: Option<bool>,
    #[command(flatten)]
    backbone: BackboneArgs,
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("support", &a.support)
        .opt("test", &a.test)
        .opt("variant", &a.variant)
        .opt("shots", &a.shots)
        .opt("psi", &a.psi)
        .opt("weights", &a.weights)
        .opt("protonets_prior", &a.protonets_prior);
    a.backbone.push(&mut o);
    let cfg: EvalConfig = resolve(config_path(g).as_deref(), o.into_vec())?;
    prepare_out_dir(g)?;

    let mut support = load(g, &cfg.support)?;
    if let Some(s) = cfg.shots {
        support = support.take_shots(s);
    }
    let test = load(g, &cfg.test)?;
    let backbone = cfg.backbone.build(support.dim())?;
    let psi = match &cfg.psi {
        Some(p) => {
            let psi = FilmParams::load(under(&g.out_dir, p))?;
            if psi.widths() != backbone.film_widths() {
                bail!(fit_core::FitError::Config(format!(
                    "psi widths {:?} do not match the backbone {:?}",
                    psi.widths(),
                    backbone.film_widths()
                )));
            }
            psi
        }
        None => backbone.identity_film(),
    };
    let e = match &cfg.weights {
        Some(p) => {
            let path = under(&g.out_dir, p);
            let w: WeightsFile = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            w.to_weights()
        }
        None => CovarianceWeights::initial(),
    };
    let cache = build_model_cache(&support, &backbone, &psi, &e, cfg.variant, cfg.protonets_prior)?;
    let r = evaluate(&cache, &backbone, &psi, &test)?;
    write_report(&g.out_dir.join("eval_report.json"), &r)?;
    println!("{} accuracy {:.4} on {} examples", cfg.variant, r.accuracy, r.examples);
    write_manifest(&g.out_dir, "eval", 0, &cfg)
}

// ---------------------------------------------------------------------------
// fedsim

#[derive(Args, Debug)]
pub struct FedsimArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Also run the upper and lower bound baselines.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    baselines: Option<bool>,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    num_clients: Option<usize>,
    #[arg(long)]
    classes_per_client: Option<usize>,
    #[arg(long)]
    shots_per_class: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Switches the algorithm to FedProx with this proximal weight.
    #[arg(long)]
    fedprox_mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    support_set_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    disjoint_examples: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    weighted_prototypes: Option<bool>,
    #[arg(long)]
    baseline_steps: Option<usize>,
    #[arg(long)]
    baseline_learning_rate: Option<f64>,
}

#[derive(Serialize)]
struct ClientEntry<'a> {
    id: usize,
    classes: &'a [usize],
}

#[derive(Serialize)]
struct Rung {
    global_acc: f64,
    personalized_acc: f64,
}

impl From<&BoundReport> for Rung {
    fn from(b: &BoundReport) -> Self {
        Self {
            global_acc: b.global_acc,
            personalized_acc: b.personalized_acc,
        }
    }
}

#[derive(Serialize)]
struct Ladder {
    lower: Rung,
    fl: Rung,
    upper: Rung,
}

pub fn fedsim(g: &Globals, a: FedsimArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("train", &a.train)
        .opt("test", &a.test)
        .opt("baselines", &a.baselines)
        .opt("fed.num_clients", &a.num_clients)
        .opt("fed.classes_per_client", &a.classes_per_client)
        .opt("fed.shots_per_class", &a.shots_per_class)
        .opt("fed.rounds", &a.rounds)
        .opt("fed.clients_per_round", &a.clients_per_round)
        .opt("fed.local_steps", &a.local_steps)
        .opt("fed.learning_rate", &a.learning_rate)
        .opt("fed.lr_decay", &a.lr_decay)
        .opt("fed.lr_decay_every", &a.lr_decay_every)
        .opt("fed.seed", &a.seed)
        .opt("fed.support_set_size", &a.support_set_size)
        .opt("fed.disjoint_examples", &a.disjoint_examples)
        .opt("fed.weighted_prototypes", &a.weighted_prototypes)
        .opt("fed.baseline_steps", &a.baseline_steps)
        .opt("fed.baseline_learning_rate", &a.baseline_learning_rate);
    if let Some(mu) = a.fedprox_mu {
        o.0.push(("fed.algorithm", json!({ "name": "fedprox", "mu": mu })));
    }
    a.backbone.push(&mut o);
    let cfg: FedsimConfig = resolve(config_path(g).as_deref(), o.into_vec())?;
    cfg.fed.validate()?;
    prepare_out_dir(g)?;

    let train = load(g, &cfg.train)?;
    let test = load(g, &cfg.test)?;
    let backbone = cfg.backbone.build(train.dim())?;
    let clients = partition_clients(&train, &cfg.fed)?;
    let dir = &g.out_dir;
    let entries: Vec<ClientEntry> = clients
        .iter()
        .map(|c| ClientEntry {
            id: c.id,
            classes: &c.classes,
        })
        .collect();
    write_json(&dir.join("clients.json"), &entries)?;

    let rounds_path = dir.join("rounds.jsonl");
    let mut w = BufWriter::new(File::create(&rounds_path)?);
    let run = run_federated(&clients, &test, &backbone, &cfg.fed, |row| {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    })?;
    drop(w);
    check_jsonl(&rounds_path, run.logs.len())?;

    save_psi(&dir.join("global_psi.bin"), &run.global_psi)?;
    save_cache(&dir.join("global_cache.bin"), &run.global_cache)?;
    let pdir = dir.join("personalized");
    fs::create_dir_all(&pdir)?;
    for (c, cache) in clients.iter().zip(&run.personalized) {
        save_cache(&pdir.join(format!("client_{}.bin", c.id)), cache)?;
    }

    let last = run.logs.last().expect("baseline row");
    println!(
        "round {}: global {:.4}, personalized {:.4}, cumulative cost {}",
        last.round,
        last.global_acc,
        last.personalized_acc,
        thousands(last.cum_cost)
    );

    if cfg.baselines {
        let lower = lower_bound(&clients, &test, &backbone, &cfg.fed)?;
        let upper = upper_bound(&clients, &test, &backbone, &cfg.fed)?;
        let ladder = Ladder {
            lower: (&lower).into(),
            fl: Rung {
                global_acc: last.global_acc,
                personalized_acc: last.personalized_acc,
            },
            upper: (&upper).into(),
        };
        write_json(&dir.join("bounds.json"), &ladder)?;
        print_ladder(&ladder);
    }
    write_manifest(dir, "fedsim", cfg.fed.seed, &cfg)
}

fn print_ladder(l: &Ladder) {
    println!("{:<8} {:>8} {:>13}", "", "global", "personalized");
    for (name, r) in [("lower", &l.lower), ("fl", &l.fl), ("upper", &l.upper)] {
        println!("{name:<8} {:>8.4} {:>13.4}", r.global_acc, r.personalized_acc);
    }
    let ordered = l.lower.global_acc <= l.fl.global_acc && l.fl.global_acc <= l.upper.global_acc;
    println!(
        "global ordering lower <= fl <= upper: {}",
        if ordered { "yes" } else { "no" }
    );
}

// ---------------------------------------------------------------------------
// paramcount

#[derive(Args, Debug)]
pub struct ParamcountArgs {
    /// qda, lda, protonets or bit-linear.
    method: String,
    /// Number of classes.
    classes: i64,
    /// Embedding size.
    d_b: i64,
    /// FiLM parameter count (ignored for bit-linear).
    psi_count: i64,
    #[arg(long, default_value_t = BIT_R50_BACKBONE_PARAMS as i64)]
    backbone_params: i64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Serialize)]
struct ParamCount {
    method: Method,
    shared: usize,
    updateable: usize,
    reference_updateable: usize,
    rmus: f64,
}

fn positive(name: &str, v: i64) -> Result<usize> {
    if v <= 0 {
        return Err(UsageError(format!("{name} must be a positive integer, got {v}")).into());
    }
    Ok(v as usize)
}

pub fn paramcount(a: ParamcountArgs) -> Result<()> {
    let method: Method = a
        .method
        .parse()
        .map_err(|e: fit_core::FitError| UsageError(e.to_string()))?;
    let c = positive("classes", a.classes)?;
    let d = positive("d_b", a.d_b)?;
    let psi = positive("psi_count", a.psi_count)?;
    let theta = positive("backbone_params", a.backbone_params)?;
    let adapted = match method {
        Method::BitLinear => theta,
        Method::Fit(_) => psi,
    };
    let updateable = count_updateable(method, c, d, adapted);
    let reference = count_updateable(Method::BitLinear, c, d, theta);
    let pc = ParamCount {
        method,
        shared: count_shared(method, theta),
        updateable,
        reference_updateable: reference,
        rmus: rmus(updateable, reference),
    };
    if a.json {
        println!("{}", serde_json::to_string(&pc)?);
    } else {
        println!("shared      {}", thousands(pc.shared));
        println!("updateable  {}", thousands(pc.updateable));
        println!("rmus        {:.4} (bit-linear {})", pc.rmus, thousands(reference));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// filmstats

#[derive(Args, Debug)]
pub struct FilmstatsArgs {
    /// FiLM parameter blob.
    psi: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilmstatsConfig {
    psi: PathBuf,
}

pub fn filmstats(g: &Globals, a: FilmstatsArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("psi", &a.psi);
    let cfg: FilmstatsConfig = resolve(config_path(g).as_deref(), o.into_vec())?;
    prepare_out_dir(g)?;
    let psi = FilmParams::load(under(&g.out_dir, &cfg.psi))?;
    let stats = film_magnitude_stats(&psi);
    let path = g.out_dir.join("filmstats.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "layer", "width", "gamma_min", "gamma_q1", "gamma_median", "gamma_q3", "gamma_max",
        "beta_min", "beta_q1", "beta_median", "beta_q3", "beta_max",
    ])?;
    for (s, layer) in stats.iter().zip(psi.layers()) {
        let mut row = vec![s.layer.to_string(), layer.width().to_string()];
        for f in [s.gamma_dev, s.beta_abs] {
            row.extend([f.min, f.q1, f.median, f.q3, f.max].map(|x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    drop(w);
    let rows = csv::Reader::from_path(&path)?.records().count();
    if rows != stats.len() {
        bail!("{}: {rows} rows, expected {}", path.display(), stats.len());
    }
    write_manifest(&g.out_dir, "filmstats", 0, &cfg)?;
    println!("{} layers", stats.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_file_keeps_zero_weights() {
        let e = CovarianceWeights::from_values([0.0, 0.5, 1.0]).unwrap();
        let f = WeightsFile::from_weights(&e);
        let text = serde_json::to_string(&f).unwrap();
        let back: WeightsFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.log[0], None);
        assert_eq!(back.to_weights().logs(), e.logs());
    }
}
