//! Run configuration.
//!
//! The file format is flat `key = value` lines; `#` starts a comment line.
//! List values are comma separated. Every key accepted by [`RunConfig::set`]
//! is listed in [`KEYS`], and [`RunConfig::to_pairs`] writes them all back
//! out in the same format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attribution::{FaName, TokenReduce, DEFAULT_IG_STEPS};
use crate::error::{Error, Result};
use crate::harness::synthetic::SyntheticSpec;
use crate::metrics::SoftAggregate;
use crate::model::TrainConfig;
use crate::perturbation::{GaussianVariant, SoftStrategy, DEFAULT_SOFT_SAMPLES};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "FAITH_WORKERS";

pub const DEFAULT_RATIOS: [f64; 5] = [0.01, 0.05, 0.10, 0.20, 0.50];

pub const KEYS: &[&str] = &[
    "seed",
    "seeds",
    "dataset",
    "corpus",
    "train_corpus",
    "model",
    "output",
    "vocab_size",
    "classes",
    "keywords_per_class",
    "keyword_prob",
    "min_len",
    "max_len",
    "train_size",
    "dev_size",
    "test_size",
    "model_max_len",
    "dim",
    "epochs",
    "learning_rate",
    "batch_size",
    "fas",
    "ratios",
    "soft_samples",
    "soft_aggregate",
    "soft_strategy",
    "gaussian_mu",
    "gaussian_sigma2",
    "epsilon",
    "ig_steps",
    "token_reduce",
    "adapter",
    "adapter_timeout_ms",
    "attributions",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Extra model seeds; when non-empty each seed gets its own run directory.
    pub seeds: Vec<u64>,
    pub dataset: String,
    /// Evaluation corpus. Without one the synthetic test split is used.
    pub corpus: Option<PathBuf>,
    pub train_corpus: Option<PathBuf>,
    /// Saved parameters; skips training when present.
    pub model: Option<PathBuf>,
    pub output: PathBuf,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub fas: Vec<FaName>,
    pub ratios: Vec<f64>,
    pub soft_samples: usize,
    pub soft_aggregate: SoftAggregate,
    pub soft_strategy: SoftStrategy,
    pub epsilon: f64,
    pub ig_steps: usize,
    pub reduce: TokenReduce,
    /// Command line of an external prediction adapter.
    pub adapter: Option<String>,
    pub adapter_timeout_ms: u64,
    pub attributions: Option<PathBuf>,
    /// Not part of the run identity: outputs do not depend on it.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        let train = TrainConfig {
            vocab_size: synthetic.vocab_size,
            classes: synthetic.classes,
            ..TrainConfig::default()
        };
        RunConfig {
            seed: 13,
            seeds: Vec::new(),
            dataset: "synthetic".into(),
            corpus: None,
            train_corpus: None,
            model: None,
            output: PathBuf::from("runs/synthetic"),
            synthetic,
            train,
            fas: FaName::BUILT_IN.to_vec(),
            ratios: DEFAULT_RATIOS.to_vec(),
            soft_samples: DEFAULT_SOFT_SAMPLES,
            soft_aggregate: SoftAggregate::default(),
            soft_strategy: SoftStrategy::default(),
            epsilon: 0.0,
            ig_steps: DEFAULT_IG_STEPS,
            reduce: TokenReduce::default(),
            adapter: None,
            adapter_timeout_ms: 10_000,
            attributions: None,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order; the
    /// worker count comes from [`WORKERS_ENV`].
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.workers = workers_from_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "corpus" => self.corpus = optional_path(v),
            "train_corpus" => self.train_corpus = optional_path(v),
            "model" => self.model = optional_path(v),
            "output" => self.output = PathBuf::from(v),
            "vocab_size" => {
                self.synthetic.vocab_size = parse(key, v)?;
                self.train.vocab_size = self.synthetic.vocab_size;
            }
            "classes" => {
                self.synthetic.classes = parse(key, v)?;
                self.train.classes = self.synthetic.classes;
            }
            "keywords_per_class" => self.synthetic.keywords_per_class = parse(key, v)?,
            "keyword_prob" => self.synthetic.keyword_prob = parse(key, v)?,
            "min_len" => self.synthetic.min_len = parse(key, v)?,
            "max_len" => self.synthetic.max_len = parse(key, v)?,
            "train_size" => self.synthetic.train_size = parse(key, v)?,
            "dev_size" => self.synthetic.dev_size = parse(key, v)?,
            "test_size" => self.synthetic.test_size = parse(key, v)?,
            "model_max_len" => self.train.max_len = parse(key, v)?,
            "dim" => self.train.dim = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "fas" => self.fas = parse_list(key, v)?,
            "ratios" => self.ratios = parse_list(key, v)?,
            "soft_samples" => self.soft_samples = parse(key, v)?,
            "soft_aggregate" => self.soft_aggregate = v.parse()?,
            "soft_strategy" => self.soft_strategy = parse_strategy(v, self.soft_strategy)?,
            "gaussian_mu" | "gaussian_sigma2" => {
                let x: f64 = parse(key, v)?;
                match &mut self.soft_strategy {
                    SoftStrategy::Gaussian { mu, sigma2, .. } => {
                        if key == "gaussian_mu" {
                            *mu = x;
                        } else {
                            *sigma2 = x;
                        }
                    }
                    _ => {
                        return Err(Error::Parameter(format!(
                            "{key} needs soft_strategy set to a gaussian variant first"
                        )))
                    }
                }
            }
            "epsilon" => self.epsilon = parse(key, v)?,
            "ig_steps" => self.ig_steps = parse(key, v)?,
            "token_reduce" => self.reduce = v.parse()?,
            "adapter" => self.adapter = (!v.is_empty()).then(|| v.to_string()),
            "adapter_timeout_ms" => self.adapter_timeout_ms = parse(key, v)?,
            "attributions" => self.attributions = optional_path(v),
            other => return Err(Error::Parameter(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.ratios.is_empty() {
            return bad("ratio grid is empty".into());
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return bad(format!("ratios must lie in (0, 1]: {:?}", self.ratios));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ratios must be strictly increasing: {:?}", self.ratios));
        }
        if self.soft_samples == 0 {
            return bad("soft_samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.fas.is_empty() {
            return bad("no attribution methods selected".into());
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be positive".into());
        }
        if self.adapter_timeout_ms == 0 {
            return bad("adapter_timeout_ms must be positive".into());
        }
        if let SoftStrategy::Gaussian { sigma2, .. } = self.soft_strategy {
            if !(sigma2 > 0.0) {
                return bad(format!("gaussian_sigma2 must be positive, got {sigma2}"));
            }
        }
        let external: Vec<_> = self
            .fas
            .iter()
            .filter(|f| matches!(f, FaName::External(_)))
            .collect();
        if !external.is_empty() && self.attributions.is_none() {
            return bad(format!("{} needs an attributions file", external[0]));
        }
        if self.corpus.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order. Output path and
    /// worker count are left out because they do not affect results.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let s = &self.synthetic;
        let t = &self.train;
        let (mu, sigma2) = match self.soft_strategy {
            SoftStrategy::Gaussian { mu, sigma2, .. } => (mu.to_string(), sigma2.to_string()),
            _ => (String::new(), String::new()),
        };
        let pairs = [
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("dataset", self.dataset.clone()),
            ("corpus", path_text(&self.corpus)),
            ("train_corpus", path_text(&self.train_corpus)),
            ("model", path_text(&self.model)),
            ("vocab_size", s.vocab_size.to_string()),
            ("classes", s.classes.to_string()),
            ("keywords_per_class", s.keywords_per_class.to_string()),
            ("keyword_prob", s.keyword_prob.to_string()),
            ("min_len", s.min_len.to_string()),
            ("max_len", s.max_len.to_string()),
            ("train_size", s.train_size.to_string()),
            ("dev_size", s.dev_size.to_string()),
            ("test_size", s.test_size.to_string()),
            ("model_max_len", t.max_len.to_string()),
            ("dim", t.dim.to_string()),
            ("epochs", t.epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("fas", join(&self.fas)),
            ("ratios", join(&self.ratios)),
            ("soft_samples", self.soft_samples.to_string()),
            ("soft_aggregate", self.soft_aggregate.to_string()),
            ("soft_strategy", self.soft_strategy.to_string()),
            ("gaussian_mu", mu),
            ("gaussian_sigma2", sigma2),
            ("epsilon", self.epsilon.to_string()),
            ("ig_steps", self.ig_steps.to_string()),
            ("token_reduce", self.reduce.to_string()),
            ("adapter", self.adapter.clone().unwrap_or_default()),
            ("adapter_timeout_ms", self.adapter_timeout_ms.to_string()),
            ("attributions", path_text(&self.attributions)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// One configuration per model seed.
    pub fn per_seed(&self) -> Vec<RunConfig> {
        if self.seeds.is_empty() {
            return vec![self.clone()];
        }
        self.seeds
            .iter()
            .map(|&seed| RunConfig {
                seed,
                seeds: Vec::new(),
                output: self.output.join(format!("seed-{seed}")),
                ..self.clone()
            })
            .collect()
    }
}

fn parse_strategy(v: &str, current: SoftStrategy) -> Result<SoftStrategy> {
    let (mu, sigma2) = match current {
        SoftStrategy::Gaussian { mu, sigma2, .. } => (mu, sigma2),
        _ => (0.0, 0.1),
    };
    match v {
        "bernoulli" => Ok(SoftStrategy::Bernoulli),
        "attention_mask" => Ok(SoftStrategy::AttentionMask),
        other => match other.strip_prefix("gaussian_") {
            Some(variant) => Ok(SoftStrategy::Gaussian {
                variant: GaussianVariant::from_str(variant)?,
                mu,
                sigma2,
            }),
            None => Err(Error::Parameter(format!("unknown soft_strategy '{other}'"))),
        },
    }
}

/// Parses flat `key = value` text.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parameter(format!(
                "config line {}: expected key = value, got '{line}'",
                i + 1
            )));
        };
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Parameter(format!(
                "config line {}: unknown key '{key}'",
                i + 1
            )));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Parameter(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

/// The flat config text for `cfg`; reading it back yields the same config.
pub fn render_config(cfg: &RunConfig) -> String {
    let pairs = cfg.to_pairs();
    let mut out = String::new();
    for key in KEYS {
        if *key == "output" {
            out.push_str(&format!("output = {}\n", cfg.output.display()));
            continue;
        }
        let value = &pairs[*key];
        if value.is_empty() {
            continue;
        }
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ratios, DEFAULT_RATIOS.to_vec());
        assert_eq!(cfg.fas.len(), 6);
        assert_eq!(cfg.epsilon, 0.0);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nseed = 5\nratios = 0.1, 0.5\nsoft_samples=8\n").unwrap();
        let cfg = RunConfig::resolve(
            Some(&path),
            &[("soft_samples".into(), "32".into())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.ratios, vec![0.1, 0.5]);
        assert_eq!(cfg.soft_samples, 32);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("seed", "x").is_err());
        for (k, v) in [("ratios", "0.5,0.1"), ("ratios", "0,0.5"), ("soft_samples", "0"), ("epsilon", "2")] {
            let mut c = RunConfig::default();
            c.set(k, v).unwrap();
            let e = c.validate().unwrap_err();
            assert_eq!(e.exit_code(), 1, "{k}={v}: {e}");
        }
        assert!(parse_config_text("seed 4").is_err());
    }

    #[test]
    fn rendered_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("soft_strategy", "gaussian_variance_importance").unwrap();
        cfg.set("gaussian_sigma2", "0.05").unwrap();
        cfg.set("fas", "attention,random").unwrap();
        cfg.set("seeds", "1,2").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in parse_config_text(&render_config(&cfg)).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_list_fans_out() {
        let mut cfg = RunConfig::default();
        cfg.set("seeds", "3,4").unwrap();
        let runs = cfg.per_seed();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[1].seed, 4);
        assert!(runs[1].output.ends_with("seed-4"));
    }
}
