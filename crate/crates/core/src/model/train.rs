use rand::seq::SliceRandom;

use super::{backward, embed, forward, ModelParams, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Plain minibatch gradient descent on cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub vocab_size: usize,
    pub classes: usize,
    pub max_len: usize,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vocab_size: 64,
            classes: 2,
            max_len: 32,
            dim: 16,
            epochs: 40,
            learning_rate: 0.5,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.dim == 0 || self.vocab_size == 0 || self.classes < 2 {
            return Err(Error::Parameter(
                "batch size, dimension and vocabulary must be positive, classes at least 2".into(),
            ));
        }
        Ok(())
    }
}

pub fn train(corpus: &[TokenSequence], cfg: &TrainConfig, rng: &RngStream) -> Result<ModelParams> {
    train_with_history(corpus, cfg, rng).map(|(p, _)| p)
}

/// Trains and also returns the mean training cross-entropy before the first
/// epoch followed by the value after every epoch.
pub fn train_with_history(
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("training corpus is empty".into()));
    }
    for seq in corpus {
        seq.validate(cfg.vocab_size, cfg.classes, cfg.max_len)?;
    }
    let mut params = ModelParams::init(
        cfg.vocab_size,
        cfg.dim,
        cfg.classes,
        cfg.max_len,
        &rng.split(0),
    )?;
    let mut history = vec![mean_loss(corpus, &params)?];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng.split(1).split(epoch as u64).generator());
        let diverged = |e: Error| match e {
            Error::NumericInput(message) => Error::Training { epoch, message },
            other => other,
        };
        for batch in order.chunks(cfg.batch_size) {
            params = step(corpus, batch, &params, cfg.learning_rate, epoch).map_err(diverged)?;
        }
        let loss = mean_loss(corpus, &params).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("loss became {loss}"),
            });
        }
        history.push(loss);
    }
    Ok((params, history))
}

fn mean_loss(corpus: &[TokenSequence], params: &ModelParams) -> Result<f64> {
    let mut total = 0.0;
    for seq in corpus {
        let trace = forward(&embed(seq, params)?, params)?;
        total -= trace.probs[seq.label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / corpus.len() as f64)
}

fn step(
    corpus: &[TokenSequence],
    batch: &[usize],
    params: &ModelParams,
    lr: f64,
    epoch: usize,
) -> Result<ModelParams> {
    let d = params.dim();
    let c = params.classes();
    let mut g_emb = Matrix::zeros(params.vocab_size(), d);
    let mut g_q = Matrix::zeros(d, d);
    let mut g_k = Matrix::zeros(d, d);
    let mut g_v = Matrix::zeros(d, d);
    let mut g_o = Matrix::zeros(d, c);
    let mut g_b = vec![0.0; c];
    for &idx in batch {
        let seq = &corpus[idx];
        let trace = forward(&embed(seq, params)?, params)?;
        let mut dz = trace.probs.clone();
        dz[seq.label] -= 1.0;
        let g = backward(&trace, params, &dz)?;
        for (i, &tok) in seq.tokens.iter().enumerate() {
            for (acc, v) in g_emb.row_mut(tok).iter_mut().zip(g.input.row(i)) {
                *acc += v;
            }
        }
        g_q.add_assign(&g.w_q)?;
        g_k.add_assign(&g.w_k)?;
        g_v.add_assign(&g.w_v)?;
        g_o.add_assign(&g.w_o)?;
        for (acc, v) in g_b.iter_mut().zip(&g.bias) {
            *acc += v;
        }
    }
    let rate = lr / batch.len() as f64;
    let update = |w: &Matrix, g: &Matrix| w.zip_map(g, |a, b| a - rate * b);
    let bias: Vec<f64> = params
        .bias()
        .iter()
        .zip(&g_b)
        .map(|(b, g)| b - rate * g)
        .collect();
    ModelParams::from_parts(
        update(params.embedding(), &g_emb)?,
        update(params.w_q(), &g_q)?,
        update(params.w_k(), &g_k)?,
        update(params.w_v(), &g_v)?,
        update(params.w_o(), &g_o)?,
        bias,
        params.max_len(),
    )
    .map_err(|e| Error::Training {
        epoch,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;

    fn tiny_corpus() -> Vec<TokenSequence> {
        // token 0 marks class 0, token 1 marks class 1, the rest is filler
        (0..40)
            .map(|i| TokenSequence {
                id: format!("t{i}"),
                tokens: vec![2 + i % 5, i % 2, 3 + i % 4, 7],
                label: i % 2,
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            vocab_size: 8,
            classes: 2,
            max_len: 6,
            dim: 6,
            epochs: 30,
            learning_rate: 0.5,
            batch_size: 8,
        }
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        let corpus = tiny_corpus();
        let (a, hist) = train_with_history(&corpus, &cfg(), &rng_for(3, &[])).unwrap();
        assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
        let b = train(&corpus, &cfg(), &rng_for(3, &[])).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = train(&corpus, &cfg(), &rng_for(4, &[])).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn rejects_bad_configs() {
        let corpus = tiny_corpus();
        let rng = rng_for(0, &[]);
        let zero_epochs = TrainConfig { epochs: 0, ..cfg() };
        assert!(matches!(train(&corpus, &zero_epochs, &rng), Err(Error::Parameter(_))));
        let bad_lr = TrainConfig { learning_rate: 0.0, ..cfg() };
        assert!(matches!(train(&corpus, &bad_lr, &rng), Err(Error::Parameter(_))));
        assert!(matches!(train(&[], &cfg(), &rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let corpus = tiny_corpus();
        let wild = TrainConfig {
            learning_rate: 1e200,
            ..cfg()
        };
        match train(&corpus, &wild, &rng_for(0, &[])) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
