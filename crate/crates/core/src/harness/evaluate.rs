//! The full evaluation sweep: model preparation, per-instance metrics,
//! diagnosticity and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attribution::{
    compute_fa, random_fa, top_k_rationale, AttributionScores, FaContext, FaName,
};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::corpus::{load_attributions, load_corpus, ImportedScores};
use crate::harness::curves::emit_curves;
use crate::harness::synthetic::{generate_synthetic, SyntheticCorpora};
use crate::metrics::{
    aopc, baseline_gap, diagnosticity, normalized_comprehensiveness, normalized_sufficiency,
    rank_sum_test, soft_nc_with, soft_ns_with, DiagnosticityReport, Exclusion, LikelihoodTriple,
    Metric,
};
use crate::model::adapter::{AdapterClient, AdapterEndpoint};
use crate::model::{embed, forward, train, ModelParams, TokenSequence};
use crate::numerics::{argmax, rng_for, Matrix, RngStream};
use crate::perturbation::{
    continuous_attention_mask, gaussian_perturb, hard_remove, hard_retain, soft_perturb,
    zero_baseline, GaussianPerturbConfig, SoftMode, SoftPerturbConfig, SoftStrategy,
};

// RNG domain tags; every random draw in a run hangs off (seed, tag, ...).
const TAG_SYNTHETIC: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_FA_RANDOM: u64 = 3;
const TAG_COUNTERPART: u64 = 4;
const TAG_SOFT: u64 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INSTANCE_FILE: &str = "instance_records.csv";
pub const RANDOM_FILE: &str = "random_records.csv";
pub const AGGREGATE_FILE: &str = "fa_aggregates.csv";
pub const DIAGNOSTICITY_FILE: &str = "diagnosticity.csv";
pub const MODEL_FILE: &str = "model.json";

const RECORD_HEADER: [&str; 8] = [
    "instance_id",
    "fa",
    "metric",
    "scope",
    "ratio",
    "samples",
    "value",
    "excluded",
];

/// Metric values of one explanation on one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    /// Hard metrics per ratio of the grid.
    pub ns: Vec<f64>,
    pub nc: Vec<f64>,
    pub aopc_ns: f64,
    pub aopc_nc: f64,
    pub soft_ns: f64,
    pub soft_nc: f64,
}

impl MetricSet {
    /// The value diagnosticity compares: AOPC for hard metrics.
    pub fn summary(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Ns => self.aopc_ns,
            Metric::Nc => self.aopc_nc,
            Metric::SoftNs => self.soft_ns,
            Metric::SoftNc => self.soft_nc,
        }
    }

    pub fn at_ratio(&self, metric: Metric, r: usize) -> Option<f64> {
        match metric {
            Metric::Ns => Some(self.ns[r]),
            Metric::Nc => Some(self.nc[r]),
            _ => None,
        }
    }
}

/// One FA explanation and its random counterpart on the same instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FaOutcome {
    pub own: MetricSet,
    pub counterpart: MetricSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub p_full: f64,
    pub p_zero: f64,
    /// `None` when the instance is excluded; otherwise one entry per FA.
    pub outcomes: Option<Vec<FaOutcome>>,
}

impl InstanceResult {
    pub fn exclusion(&self) -> Option<Exclusion> {
        self.outcomes
            .is_none()
            .then_some(Exclusion::DegenerateBaseline)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Fa,
    Random,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Fa => "fa",
            Role::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scope {
    Ratio(f64),
    Aopc,
    Soft,
}

impl Scope {
    fn name(self) -> &'static str {
        match self {
            Scope::Ratio(_) => "ratio",
            Scope::Aopc => "aopc",
            Scope::Soft => "soft",
        }
    }

    fn ratio_text(self) -> String {
        match self {
            Scope::Ratio(r) => r.to_string(),
            _ => String::new(),
        }
    }
}

/// Corpus mean of one metric for one FA (or its random counterparts).
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub role: Role,
    pub fa: String,
    pub metric: Metric,
    pub scope: Scope,
    pub count: usize,
    pub excluded: usize,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvaluationOutput {
    pub instances: Vec<InstanceResult>,
    pub aggregates: Vec<Aggregate>,
    pub diagnosticity: Vec<DiagnosticityReport>,
    pub test_accuracy: f64,
}

impl EvaluationOutput {
    pub fn aggregate(&self, role: Role, fa: &str, metric: Metric, scope: Scope) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.role == role && a.fa == fa && a.metric == metric && a.scope == scope)
    }

    /// The summary diagnosticity row (AOPC or soft) for `fa`, or for
    /// `"average"` across FAs.
    pub fn diagnosticity_for(&self, fa: &str, metric: Metric) -> Option<&DiagnosticityReport> {
        let scope = if metric.is_soft() { "soft" } else { "aopc" };
        self.diagnosticity
            .iter()
            .find(|d| d.fa == fa && d.metric == metric && d.scope == scope)
    }

    pub fn excluded_ids(&self) -> Vec<&str> {
        self.instances
            .iter()
            .filter(|i| i.outcomes.is_none())
            .map(|i| i.id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub output: EvaluationOutput,
}

/// Model plus the corpora it was trained and is evaluated on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub params: ModelParams,
    pub train: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
}

/// The synthetic corpora a run with `cfg` would use.
pub fn synthetic_corpora(cfg: &RunConfig) -> Result<SyntheticCorpora> {
    generate_synthetic(&cfg.synthetic, &RngStream::new(cfg.seed).split(TAG_SYNTHETIC))
}

/// Loads or generates corpora and loads or trains the model.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let root = RngStream::new(cfg.seed);
    let synthetic = match cfg.corpus {
        None => Some(synthetic_corpora(cfg)?),
        Some(_) => None,
    };
    let train_set = match (&cfg.train_corpus, &synthetic) {
        (Some(path), _) => load_corpus(path, cfg.train.vocab_size, cfg.train.classes, cfg.train.max_len)?,
        (None, Some(s)) => s.train.clone(),
        (None, None) => Vec::new(),
    };
    let params = match &cfg.model {
        Some(path) => ModelParams::load(path)?,
        None if train_set.is_empty() => {
            return Err(Error::Parameter(
                "an evaluation corpus needs either a model file or a training corpus".into(),
            ))
        }
        None => train(&train_set, &cfg.train, &root.split(TAG_TRAIN))?,
    };
    let eval = match (&cfg.corpus, synthetic) {
        (Some(path), _) => load_corpus(path, params.vocab_size(), params.classes(), params.max_len())?,
        (None, Some(s)) => {
            for seq in &s.test {
                seq.validate(params.vocab_size(), params.classes(), params.max_len())?;
            }
            s.test
        }
        (None, None) => unreachable!("synthetic corpora exist whenever no corpus path is set"),
    };
    Ok(Prepared {
        params,
        train: train_set,
        eval,
    })
}

pub fn accuracy(params: &ModelParams, corpus: &[TokenSequence]) -> Result<f64> {
    let mut correct = 0usize;
    for seq in corpus {
        if forward(&embed(seq, params)?, params)?.predicted == seq.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

/// Source of class probabilities for (perturbed) embeddings.
enum Predictor<'a> {
    Local(&'a ModelParams),
    Remote(Box<AdapterClient>),
}

impl Predictor<'_> {
    fn probs(&mut self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Predictor::Local(p) => Ok(forward(x, p)?.probs),
            Predictor::Remote(client) => Ok(client.predict(x)?.probs),
        }
    }

    fn prob(&mut self, x: &Matrix, class: usize) -> Result<f64> {
        let probs = self.probs(x)?;
        probs.get(class).copied().ok_or_else(|| {
            Error::Shape(format!("class {class} missing from {} probabilities", probs.len()))
        })
    }
}

struct Shared<'a> {
    cfg: &'a RunConfig,
    params: &'a ModelParams,
    imported: &'a ImportedScores,
}

fn context(id: &str, what: impl fmt::Display, e: Error) -> Error {
    match e {
        e @ Error::Context { .. } => e,
        e => Error::Context {
            instance: id.to_string(),
            fa: what.to_string(),
            source: Box::new(e),
        },
    }
}

fn explanation(
    shared: &Shared<'_>,
    fa: &FaName,
    ctx: &FaContext<'_>,
    id: &str,
) -> Result<AttributionScores> {
    let scores = match fa {
        FaName::External(name) => {
            let key = (id.to_string(), name.clone());
            let raw = shared.imported.get(&key).ok_or_else(|| {
                Error::Data(format!("no imported '{name}' attribution for instance {id}"))
            })?;
            if raw.len() != ctx.x.rows() {
                return Err(Error::Data(format!(
                    "imported '{name}' attribution for instance {id} has {} scores for {} tokens",
                    raw.len(),
                    ctx.x.rows()
                )));
            }
            AttributionScores::new(fa.clone(), raw.clone())?
        }
        _ => compute_fa(fa, ctx)?,
    };
    Ok(scores.for_instance(id))
}

fn soft_probabilities(
    shared: &Shared<'_>,
    predictor: &mut Predictor<'_>,
    x: &Matrix,
    a: &[f64],
    mode: SoftMode,
    class: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let cfg = shared.cfg;
    let mode_rng = rng.split(match mode {
        SoftMode::Retain => 0,
        SoftMode::Remove => 1,
    });
    match cfg.soft_strategy {
        SoftStrategy::Bernoulli => {
            let samples = soft_perturb(
                x,
                a,
                &SoftPerturbConfig {
                    mode,
                    samples: cfg.soft_samples,
                    rng: mode_rng,
                },
            )?;
            samples.iter().map(|xp| predictor.prob(xp, class)).collect()
        }
        SoftStrategy::Gaussian { variant, mu, sigma2 } => {
            // noise lands on what is being removed
            let weights: Vec<f64> = match mode {
                SoftMode::Remove => a.to_vec(),
                SoftMode::Retain => a.iter().map(|v| 1.0 - v).collect(),
            };
            (0..cfg.soft_samples)
                .map(|s| {
                    let xp = gaussian_perturb(
                        x,
                        &weights,
                        &GaussianPerturbConfig {
                            variant,
                            mu,
                            sigma2,
                            rng: mode_rng.split(s as u64),
                        },
                    )?;
                    predictor.prob(&xp, class)
                })
                .collect()
        }
        SoftStrategy::AttentionMask => {
            if matches!(predictor, Predictor::Remote(_)) {
                return Err(Error::Parameter(
                    "the attention-mask strategy needs the built-in model".into(),
                ));
            }
            // attention is steered toward what is kept
            let weights: Vec<f64> = match mode {
                SoftMode::Retain => a.to_vec(),
                SoftMode::Remove => a.iter().map(|v| 1.0 - v).collect(),
            };
            let trace = forward(x, shared.params)?;
            Ok(vec![continuous_attention_mask(&trace, &weights, shared.params)?[class]])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn metric_set(
    shared: &Shared<'_>,
    predictor: &mut Predictor<'_>,
    x: &Matrix,
    scores: &AttributionScores,
    class: usize,
    p_full: f64,
    p_zero: f64,
    soft_rng: &RngStream,
) -> Result<MetricSet> {
    let cfg = shared.cfg;
    let value = |o: crate::metrics::Outcome| {
        o.value()
            .ok_or_else(|| Error::Consistency("exclusion after the baseline check passed".into()))
    };
    let mut ns = Vec::with_capacity(cfg.ratios.len());
    let mut nc = Vec::with_capacity(cfg.ratios.len());
    for &ratio in &cfg.ratios {
        let r = top_k_rationale(scores, ratio)?;
        let p_retain = predictor.prob(&hard_retain(x, &r)?, class)?;
        let p_remove = predictor.prob(&hard_remove(x, &r)?, class)?;
        ns.push(value(normalized_sufficiency(&LikelihoodTriple::new(p_full, p_retain, p_zero)?))?);
        nc.push(value(normalized_comprehensiveness(&LikelihoodTriple::new(p_full, p_remove, p_zero)?))?);
    }
    let aopc_ns = aopc(&ns.iter().map(|&v| Some(v)).collect::<Vec<_>>(), cfg.ratios.len())?;
    let aopc_nc = aopc(&nc.iter().map(|&v| Some(v)).collect::<Vec<_>>(), cfg.ratios.len())?;
    let a = &scores.normalized;
    let retain = soft_probabilities(shared, predictor, x, a, SoftMode::Retain, class, soft_rng)?;
    let remove = soft_probabilities(shared, predictor, x, a, SoftMode::Remove, class, soft_rng)?;
    Ok(MetricSet {
        ns,
        nc,
        aopc_ns,
        aopc_nc,
        soft_ns: value(soft_ns_with(p_full, &retain, p_zero, cfg.soft_aggregate)?)?,
        soft_nc: value(soft_nc_with(p_full, &remove, p_zero, cfg.soft_aggregate)?)?,
    })
}

fn evaluate_instance(
    shared: &Shared<'_>,
    predictor: &mut Predictor<'_>,
    index: usize,
    seq: &TokenSequence,
) -> Result<InstanceResult> {
    let cfg = shared.cfg;
    let id = seq.id.as_str();
    let x = embed(seq, shared.params).map_err(|e| context(id, "embedding", e))?;
    let trace = forward(&x, shared.params).map_err(|e| context(id, "forward", e))?;
    let full = predictor.probs(&x).map_err(|e| context(id, "prediction", e))?;
    let class = argmax(&full);
    let p_full = full[class];
    let p_zero = predictor
        .prob(&zero_baseline(&x), class)
        .map_err(|e| context(id, "prediction", e))?;
    let mut result = InstanceResult {
        id: seq.id.clone(),
        label: seq.label,
        predicted: class,
        p_full,
        p_zero,
        outcomes: None,
    };
    if baseline_gap(p_full, p_zero).is_none() {
        return Ok(result);
    }
    let idx = index as u64;
    let soft_rng = rng_for(cfg.seed, &[TAG_SOFT, idx]);
    let mut outcomes = Vec::with_capacity(cfg.fas.len());
    for (f, fa) in cfg.fas.iter().enumerate() {
        let ctx = FaContext {
            x: &x,
            trace: &trace,
            params: shared.params,
            class,
            ig_steps: cfg.ig_steps,
            reduce: cfg.reduce,
            rng: rng_for(cfg.seed, &[TAG_FA_RANDOM, idx]),
        };
        let own_scores = explanation(shared, fa, &ctx, id).map_err(|e| context(id, fa, e))?;
        let random_scores = random_fa(&rng_for(cfg.seed, &[TAG_COUNTERPART, idx, f as u64]), x.rows())
            .map_err(|e| context(id, fa, e))?;
        let own = metric_set(shared, predictor, &x, &own_scores, class, p_full, p_zero, &soft_rng)
            .map_err(|e| context(id, fa, e))?;
        let counterpart = metric_set(shared, predictor, &x, &random_scores, class, p_full, p_zero, &soft_rng)
            .map_err(|e| context(id, format!("{fa} (random counterpart)"), e))?;
        outcomes.push(FaOutcome { own, counterpart });
    }
    result.outcomes = Some(outcomes);
    Ok(result)
}

fn make_predictor<'a>(cfg: &RunConfig, params: &'a ModelParams) -> Result<Predictor<'a>> {
    match &cfg.adapter {
        None => Ok(Predictor::Local(params)),
        Some(cmd) => {
            let endpoint = AdapterEndpoint::from_command_line(cmd, cfg.adapter_timeout_ms)?;
            Ok(Predictor::Remote(Box::new(AdapterClient::start(&endpoint)?)))
        }
    }
}

/// Scores every instance with every FA. Instances are split into contiguous
/// chunks, one per worker, and results are merged back in corpus order.
pub fn evaluate_corpus(
    cfg: &RunConfig,
    params: &ModelParams,
    corpus: &[TokenSequence],
) -> Result<EvaluationOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let imported = match &cfg.attributions {
        Some(path) => load_attributions(path)?,
        None => ImportedScores::new(),
    };
    let shared = Shared {
        cfg,
        params,
        imported: &imported,
    };
    let workers = cfg.workers.clamp(1, corpus.len());
    let chunk = corpus.len().div_ceil(workers);
    let instances = std::thread::scope(|scope| -> Result<Vec<InstanceResult>> {
        let shared = &shared;
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .enumerate()
            .map(|(w, part)| {
                scope.spawn(move || -> Result<Vec<InstanceResult>> {
                    let mut predictor = make_predictor(shared.cfg, shared.params)?;
                    part.iter()
                        .enumerate()
                        .map(|(j, seq)| evaluate_instance(shared, &mut predictor, w * chunk + j, seq))
                        .collect()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(corpus.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })?;
    let aggregates = aggregate(cfg, &instances);
    let diagnosticity = diagnosticity_reports(cfg, &instances)?;
    Ok(EvaluationOutput {
        instances,
        aggregates,
        diagnosticity,
        test_accuracy: accuracy(params, corpus)?,
    })
}

fn fa_labels(cfg: &RunConfig) -> Vec<String> {
    cfg.fas.iter().map(ToString::to_string).collect()
}

fn scopes_for(cfg: &RunConfig, metric: Metric) -> Vec<(Scope, Option<usize>)> {
    if metric.is_soft() {
        vec![(Scope::Soft, None)]
    } else {
        let mut v: Vec<_> = cfg
            .ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| (Scope::Ratio(r), Some(i)))
            .collect();
        v.push((Scope::Aopc, None));
        v
    }
}

fn pick(set: &MetricSet, metric: Metric, ratio_index: Option<usize>) -> f64 {
    match ratio_index {
        Some(r) => set.at_ratio(metric, r).expect("ratio scope only for hard metrics"),
        None => set.summary(metric),
    }
}

fn aggregate(cfg: &RunConfig, instances: &[InstanceResult]) -> Vec<Aggregate> {
    let labels = fa_labels(cfg);
    let excluded = instances.iter().filter(|i| i.outcomes.is_none()).count();
    let mut out = Vec::new();
    for role in [Role::Fa, Role::Random] {
        for (f, label) in labels.iter().enumerate() {
            for metric in Metric::ALL {
                for (scope, r) in scopes_for(cfg, metric) {
                    let mut total = 0.0;
                    let mut count = 0usize;
                    for o in instances.iter().filter_map(|i| i.outcomes.as_ref()) {
                        let set = match role {
                            Role::Fa => &o[f].own,
                            Role::Random => &o[f].counterpart,
                        };
                        total += pick(set, metric, r);
                        count += 1;
                    }
                    out.push(Aggregate {
                        role,
                        fa: label.clone(),
                        metric,
                        scope,
                        count,
                        excluded,
                        mean: (count > 0).then(|| total / count as f64),
                    });
                }
            }
        }
    }
    out
}

/// `(u, v)` pairs of one FA (or of all FAs pooled when `fa` is `None`).
fn pairs(
    instances: &[InstanceResult],
    fa: Option<usize>,
    metric: Metric,
    ratio_index: Option<usize>,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for o in instances.iter().filter_map(|i| i.outcomes.as_ref()) {
        let range = match fa {
            Some(f) => f..f + 1,
            None => 0..o.len(),
        };
        for f in range {
            out.push((
                pick(&o[f].own, metric, ratio_index),
                pick(&o[f].counterpart, metric, ratio_index),
            ));
        }
    }
    out
}

fn margins(p: &[(f64, f64)]) -> Vec<f64> {
    p.iter().map(|(u, v)| u - v).collect()
}

fn diagnosticity_reports(cfg: &RunConfig, instances: &[InstanceResult]) -> Result<Vec<DiagnosticityReport>> {
    if instances.iter().all(|i| i.outcomes.is_none()) {
        return Err(Error::Consistency(
            "every instance was excluded; no diagnosticity can be computed".into(),
        ));
    }
    let mut groups: Vec<(String, Option<usize>)> = fa_labels(cfg)
        .into_iter()
        .enumerate()
        .map(|(f, l)| (l, Some(f)))
        .collect();
    groups.push(("average".into(), None));
    let mut out = Vec::new();
    for (label, fa) in &groups {
        for metric in Metric::ALL {
            // u − v margins of the counterpart (AOPC for hard metrics)
            let other = margins(&pairs(instances, *fa, metric.counterpart(), None));
            for (scope, r) in scopes_for(cfg, metric) {
                let p = pairs(instances, *fa, metric, r);
                let d = diagnosticity(&p, cfg.epsilon)?;
                let p_value = rank_sum_test(&margins(&p), &other)?;
                out.push(DiagnosticityReport {
                    dataset: cfg.dataset.clone(),
                    metric,
                    fa: label.clone(),
                    scope: match scope {
                        Scope::Ratio(r) => r.to_string(),
                        s => s.name().to_string(),
                    },
                    pairs: d.pairs,
                    wins: d.wins,
                    ties: d.ties,
                    diagnosticity: d.value,
                    p_value: Some(p_value),
                });
            }
        }
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_records(path: &Path, cfg: &RunConfig, instances: &[InstanceResult], role: Role) -> Result<usize> {
    let mut w = csv_writer(path)?;
    let wr = |w: &mut csv::Writer<fs::File>, row: [String; 8]| w.write_record(&row).map_err(|e| csv_error(path, e));
    wr(&mut w, RECORD_HEADER.map(String::from))?;
    let labels = fa_labels(cfg);
    let samples = match cfg.soft_strategy {
        SoftStrategy::AttentionMask => 1,
        _ => cfg.soft_samples,
    };
    let mut rows = 0;
    for inst in instances {
        for (f, label) in labels.iter().enumerate() {
            let set = inst.outcomes.as_ref().map(|o| match role {
                Role::Fa => &o[f].own,
                Role::Random => &o[f].counterpart,
            });
            let excluded = inst.exclusion().map(|e| e.to_string()).unwrap_or_default();
            for metric in Metric::ALL {
                for (scope, r) in scopes_for(cfg, metric) {
                    let value = set.map(|s| pick(s, metric, r).to_string()).unwrap_or_default();
                    wr(
                        &mut w,
                        [
                            inst.id.clone(),
                            label.clone(),
                            metric.to_string(),
                            scope.name().to_string(),
                            scope.ratio_text(),
                            if metric.is_soft() { samples.to_string() } else { String::new() },
                            value,
                            excluded.clone(),
                        ],
                    )?;
                    rows += 1;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn write_aggregates(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["role", "fa", "metric", "scope", "ratio", "count", "excluded", "mean"])
        .map_err(|e| csv_error(path, e))?;
    for a in aggregates {
        w.write_record([
            a.role.to_string(),
            a.fa.clone(),
            a.metric.to_string(),
            a.scope.name().to_string(),
            a.scope.ratio_text(),
            a.count.to_string(),
            a.excluded.to_string(),
            a.mean.map(|m| m.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_diagnosticity(path: &Path, reports: &[DiagnosticityReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "dataset",
        "metric",
        "fa",
        "scope",
        "pairs",
        "wins",
        "ties",
        "diagnosticity",
        "p_value",
    ])
    .map_err(|e| csv_error(path, e))?;
    for d in reports {
        w.write_record([
            d.dataset.clone(),
            d.metric.to_string(),
            d.fa.clone(),
            d.scope.clone(),
            d.pairs.to_string(),
            d.wins.to_string(),
            d.ties.to_string(),
            d.diagnosticity.to_string(),
            d.p_value.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest {
    library_version: &'static str,
    dataset: String,
    seed: u64,
    config: BTreeMap<String, String>,
    model_fingerprint: String,
    instances: usize,
    test_accuracy: f64,
    exclusions: Exclusions,
    records: BTreeMap<&'static str, usize>,
}

#[derive(Serialize)]
struct Exclusions {
    degenerate_baseline: usize,
    instances: Vec<String>,
}

/// Writes every report for `output` into `dir`.
pub fn write_reports(dir: &Path, cfg: &RunConfig, params: &ModelParams, output: &EvaluationOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params.save(&dir.join(MODEL_FILE))?;
    let fa_rows = write_records(&dir.join(INSTANCE_FILE), cfg, &output.instances, Role::Fa)?;
    let random_rows = write_records(&dir.join(RANDOM_FILE), cfg, &output.instances, Role::Random)?;
    write_aggregates(&dir.join(AGGREGATE_FILE), &output.aggregates)?;
    write_diagnosticity(&dir.join(DIAGNOSTICITY_FILE), &output.diagnosticity)?;
    let excluded: Vec<String> = output.excluded_ids().into_iter().map(String::from).collect();
    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION"),
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        config: cfg.to_pairs(),
        model_fingerprint: format!("{:016x}", params.fingerprint()),
        instances: output.instances.len(),
        test_accuracy: output.test_accuracy,
        exclusions: Exclusions {
            degenerate_baseline: excluded.len(),
            instances: excluded,
        },
        records: BTreeMap::from([(INSTANCE_FILE, fa_rows), (RANDOM_FILE, random_rows)]),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Prepares the model, evaluates, and writes reports and curves into
/// `cfg.output`.
pub fn run_evaluation(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let output = evaluate_corpus(cfg, &prepared.params, &prepared.eval)?;
    write_reports(&cfg.output, cfg, &prepared.params, &output)?;
    emit_curves(&cfg.output)?;
    Ok(RunSummary {
        dir: cfg.output.clone(),
        output,
    })
}
