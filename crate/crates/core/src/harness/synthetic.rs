//! Planted-keyword classification corpora.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub classes: usize,
    pub keywords_per_class: usize,
    /// Chance that an instance receives a keyword of its class. Instances
    /// without one get a uniformly random label.
    pub keyword_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 64,
            classes: 2,
            keywords_per_class: 3,
            keyword_prob: 1.0,
            min_len: 8,
            max_len: 24,
            train_size: 1000,
            dev_size: 100,
            test_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpora {
    pub train: Vec<TokenSequence>,
    pub dev: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.keywords_per_class == 0 {
            return bad("keywords_per_class must be positive".into());
        }
        let planted = self.classes * self.keywords_per_class;
        if planted >= self.vocab_size {
            return bad(format!(
                "{planted} planted keywords leave no filler in a vocabulary of {}",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.keyword_prob) {
            return bad(format!("keyword_prob {} outside [0, 1]", self.keyword_prob));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] invalid", self.min_len, self.max_len));
        }
        if self.test_size == 0 || self.train_size == 0 {
            return bad("train and test sizes must be positive".into());
        }
        Ok(())
    }

    /// Keyword token ids for `class`. Keywords occupy the low end of the
    /// vocabulary, class by class.
    pub fn keywords(&self, class: usize) -> std::ops::Range<usize> {
        let k = self.keywords_per_class;
        class * k..(class + 1) * k
    }

    pub fn is_keyword(&self, token: usize) -> bool {
        token < self.classes * self.keywords_per_class
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, rng: &RngStream) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let split = |idx: u64, size: usize, prefix: &str| -> Vec<TokenSequence> {
        let stream = rng.split(idx);
        (0..size)
            .map(|i| instance(spec, &stream.split(i as u64), format!("{prefix}-{i:05}")))
            .collect()
    };
    Ok(SyntheticCorpora {
        train: split(0, spec.train_size, "train"),
        dev: split(1, spec.dev_size, "dev"),
        test: split(2, spec.test_size, "test"),
    })
}

fn instance(spec: &SyntheticSpec, rng: &RngStream, id: String) -> TokenSequence {
    let mut g = rng.generator();
    let first_filler = spec.classes * spec.keywords_per_class;
    let len = g.random_range(spec.min_len..=spec.max_len);
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| g.random_range(first_filler..spec.vocab_size))
        .collect();
    let label = g.random_range(0..spec.classes);
    if g.random::<f64>() < spec.keyword_prob {
        let pos = g.random_range(0..len);
        tokens[pos] = g.random_range(spec.keywords(label));
    }
    TokenSequence { id, tokens, label }
}
