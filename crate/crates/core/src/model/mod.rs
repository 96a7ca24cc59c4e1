//! Single-head self-attention classifier with a hand-written forward and
//! reverse pass.
//!
//! ```text
//! Q = X·Wq   K = X·Wk   V = X·Wv
//! A = softmax_rows(Q·Kᵀ/√d + bias)
//! H = A·V    pooled = mean_rows(H)
//! logits = pooled·Wo + b
//! ```
//!
//! There are no positional embeddings, so the model is permutation
//! equivariant in its token rows.

pub mod adapter;
mod train;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, mix64, softmax, Matrix, RngStream};

pub use train::{train, train_with_history, TrainConfig};

/// Version tag written into parameter files.
pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// One tokenized instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, classes: usize, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > max_len {
            return Err(Error::Data(format!(
                "instance {}: length {} outside [1, {max_len}]",
                self.id,
                self.tokens.len()
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Data(format!(
                "instance {}: token {t} outside vocabulary of size {vocab_size}",
                self.id
            )));
        }
        if self.label >= classes {
            return Err(Error::Data(format!(
                "instance {}: label {} but only {classes} classes",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) weights. Immutable once built; the
/// fingerprint lets traces detect that they came from other weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    embedding: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    bias: Vec<f64>,
    max_len: usize,
    fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format_version: u32,
    vocab_size: usize,
    dim: usize,
    classes: usize,
    max_len: usize,
    embedding: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    bias: Vec<f64>,
}

impl ModelParams {
    pub fn from_parts(
        embedding: Matrix,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
        bias: Vec<f64>,
        max_len: usize,
    ) -> Result<Self> {
        let d = embedding.cols();
        let c = bias.len();
        if d == 0 || embedding.rows() == 0 || c == 0 || max_len == 0 {
            return Err(Error::Shape("model dimensions must be positive".into()));
        }
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    m.shape()
                )));
            }
        }
        if w_o.shape() != (d, c) {
            return Err(Error::Shape(format!(
                "w_o is {:?}, expected ({d}, {c})",
                w_o.shape()
            )));
        }
        let all_finite = [&embedding, &w_q, &w_k, &w_v, &w_o]
            .iter()
            .all(|m| m.is_finite())
            && bias.iter().all(|b| b.is_finite());
        if !all_finite {
            return Err(Error::NumericInput("model parameters must be finite".into()));
        }
        let mut params = ModelParams {
            embedding,
            w_q,
            w_k,
            w_v,
            w_o,
            bias,
            max_len,
            fingerprint: 0,
        };
        params.fingerprint = params.compute_fingerprint();
        Ok(params)
    }

    /// Uniform `[-0.1, 0.1]` initialization for every weight matrix, zero bias.
    pub fn init(
        vocab_size: usize,
        dim: usize,
        classes: usize,
        max_len: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        let mut gen = rng.generator();
        let mut draw = |r: usize, c: usize| {
            Matrix::from_fn(r, c, |_, _| gen.random_range(-0.1..=0.1))
        };
        let embedding = draw(vocab_size, dim);
        let w_q = draw(dim, dim);
        let w_k = draw(dim, dim);
        let w_v = draw(dim, dim);
        let w_o = draw(dim, classes);
        ModelParams::from_parts(embedding, w_q, w_k, w_v, w_o, vec![0.0; classes], max_len)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = mix64(self.max_len as u64);
        for m in [&self.embedding, &self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            h = mix64(h ^ (m.rows() as u64) ^ ((m.cols() as u64) << 32));
            for v in m.data() {
                h = mix64(h ^ v.to_bits());
            }
        }
        for v in &self.bias {
            h = mix64(h ^ v.to_bits());
        }
        h
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn w_o(&self) -> &Matrix {
        &self.w_o
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            format_version: PARAMS_FORMAT_VERSION,
            vocab_size: self.vocab_size(),
            dim: self.dim(),
            classes: self.classes(),
            max_len: self.max_len,
            embedding: self.embedding.clone(),
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_o: self.w_o.clone(),
            bias: self.bias.clone(),
        };
        serde_json::to_string(&file).expect("parameter file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format_version != PARAMS_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported parameter format version {}",
                file.format_version
            )));
        }
        let params = ModelParams::from_parts(
            file.embedding,
            file.w_q,
            file.w_k,
            file.w_v,
            file.w_o,
            file.bias,
            file.max_len,
        )?;
        if (params.vocab_size(), params.dim(), params.classes())
            != (file.vocab_size, file.dim, file.classes)
        {
            return Err(Error::Data(
                "declared shapes disagree with the weight arrays".into(),
            ));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_json(&text)
    }
}

/// Everything the forward pass computed, kept for the reverse passes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    /// Pre-softmax attention logits, including any bias.
    pub scores: Matrix,
    pub attention: Matrix,
    pub hidden: Matrix,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    params_fingerprint: u64,
}

impl ForwardTrace {
    pub fn tokens(&self) -> usize {
        self.input.rows()
    }
}

/// Row `i` of the result is the embedding of token `i`.
pub fn embed(seq: &TokenSequence, params: &ModelParams) -> Result<Matrix> {
    seq.validate(params.vocab_size(), usize::MAX, params.max_len())?;
    let d = params.dim();
    let mut x = Matrix::zeros(seq.len(), d);
    for (i, &t) in seq.tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(params.embedding.row(t));
    }
    Ok(x)
}

pub fn forward(x: &Matrix, params: &ModelParams) -> Result<ForwardTrace> {
    forward_with_bias(x, params, None)
}

/// Forward pass with an optional additive offset on the attention logits of
/// each key column (same offset in every query row).
pub fn forward_with_bias(
    x: &Matrix,
    params: &ModelParams,
    key_bias: Option<&[f64]>,
) -> Result<ForwardTrace> {
    let (t, d) = x.shape();
    if d != params.dim() {
        return Err(Error::Shape(format!(
            "input has {d} columns but the model dimension is {}",
            params.dim()
        )));
    }
    if t == 0 || t > params.max_len() {
        return Err(Error::Shape(format!(
            "input has {t} rows, expected 1..={}",
            params.max_len()
        )));
    }
    if let Some(b) = key_bias {
        if b.len() != t {
            return Err(Error::Shape(format!(
                "attention bias has {} entries for {t} tokens",
                b.len()
            )));
        }
    }
    let queries = x.matmul(&params.w_q)?;
    let keys = x.matmul(&params.w_k)?;
    let values = x.matmul(&params.w_v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = queries.matmul_t(&keys)?.scale(scale);
    if let Some(b) = key_bias {
        for i in 0..t {
            for (s, bj) in scores.row_mut(i).iter_mut().zip(b) {
                *s += bj;
            }
        }
    }
    let mut attention = Matrix::zeros(t, t);
    for i in 0..t {
        let row = softmax(scores.row(i))?;
        attention.row_mut(i).copy_from_slice(&row);
    }
    let hidden = attention.matmul(&values)?;
    let pooled = hidden.column_means();
    let logits: Vec<f64> = (0..params.classes())
        .map(|c| {
            params.bias[c]
                + pooled
                    .iter()
                    .enumerate()
                    .map(|(e, p)| p * params.w_o.get(e, c))
                    .sum::<f64>()
        })
        .collect();
    let probs = softmax(&logits)?;
    let predicted = argmax(&probs);
    Ok(ForwardTrace {
        input: x.clone(),
        queries,
        keys,
        values,
        scores,
        attention,
        hidden,
        pooled,
        logits,
        probs,
        predicted,
        params_fingerprint: params.fingerprint,
    })
}

/// `p(class | x)`.
pub fn predict_prob(x: &Matrix, params: &ModelParams, class: usize) -> Result<f64> {
    check_class(params, class)?;
    Ok(forward(x, params)?.probs[class])
}

/// Logit of `class` for input `x`.
pub fn class_logit(x: &Matrix, params: &ModelParams, class: usize) -> Result<f64> {
    check_class(params, class)?;
    Ok(forward(x, params)?.logits[class])
}

fn check_class(params: &ModelParams, class: usize) -> Result<()> {
    if class >= params.classes() {
        return Err(Error::Parameter(format!(
            "class {class} but the model has {} classes",
            params.classes()
        )));
    }
    Ok(())
}

/// Gradients of a scalar objective that is linear in the logits.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Matrix,
    pub attention: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub bias: Vec<f64>,
}

/// Reverse pass for the objective `Σ_c logit_grad[c] · logit[c]`.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, logit_grad: &[f64]) -> Result<Gradients> {
    if trace.params_fingerprint != params.fingerprint {
        return Err(Error::Consistency(
            "trace was produced with different model parameters".into(),
        ));
    }
    if logit_grad.len() != params.classes() {
        return Err(Error::Shape(format!(
            "{} logit gradients for {} classes",
            logit_grad.len(),
            params.classes()
        )));
    }
    let (t, d) = trace.input.shape();
    let scale = 1.0 / (d as f64).sqrt();

    let w_o = Matrix::from_fn(d, params.classes(), |e, c| trace.pooled[e] * logit_grad[c]);
    let d_pooled: Vec<f64> = (0..d).map(|e| dot(params.w_o.row(e), logit_grad)).collect();
    let tf = t as f64;
    let d_hidden = Matrix::from_fn(t, d, |_, e| d_pooled[e] / tf);

    let d_attention = d_hidden.matmul_t(&trace.values)?;
    let d_values = trace.attention.t_matmul(&d_hidden)?;

    let mut d_scores = Matrix::zeros(t, t);
    for i in 0..t {
        let a = trace.attention.row(i);
        let g = d_attention.row(i);
        let inner = dot(a, g);
        for (j, out) in d_scores.row_mut(i).iter_mut().enumerate() {
            *out = a[j] * (g[j] - inner);
        }
    }
    let d_queries = d_scores.matmul(&trace.keys)?.scale(scale);
    let d_keys = d_scores.t_matmul(&trace.queries)?.scale(scale);

    let mut d_input = d_queries.matmul_t(&params.w_q)?;
    d_input.add_assign(&d_keys.matmul_t(&params.w_k)?)?;
    d_input.add_assign(&d_values.matmul_t(&params.w_v)?)?;

    Ok(Gradients {
        w_q: trace.input.t_matmul(&d_queries)?,
        w_k: trace.input.t_matmul(&d_keys)?,
        w_v: trace.input.t_matmul(&d_values)?,
        w_o,
        bias: logit_grad.to_vec(),
        input: d_input,
        attention: d_attention,
    })
}

/// `∂logit[class]/∂X` and `∂logit[class]/∂A` for the traced input.
pub fn backward_input_grad(
    trace: &ForwardTrace,
    params: &ModelParams,
    class: usize,
) -> Result<(Matrix, Matrix)> {
    check_class(params, class)?;
    let mut onehot = vec![0.0; params.classes()];
    onehot[class] = 1.0;
    let g = backward(trace, params, &onehot)?;
    Ok((g.input, g.attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;

    fn toy(seed: u64) -> ModelParams {
        ModelParams::init(12, 4, 3, 8, &rng_for(seed, &[0])).unwrap()
    }

    fn seq(tokens: &[usize]) -> TokenSequence {
        TokenSequence {
            id: "s".into(),
            tokens: tokens.to_vec(),
            label: 0,
        }
    }

    fn scaled(p: &ModelParams, s: f64) -> ModelParams {
        ModelParams::from_parts(
            p.embedding().scale(s),
            p.w_q().scale(s),
            p.w_k().scale(s),
            p.w_v().scale(s),
            p.w_o().scale(s),
            p.bias().to_vec(),
            p.max_len(),
        )
        .unwrap()
    }

    #[test]
    fn embed_is_a_lookup() {
        let p = toy(1);
        for k in 0..p.vocab_size() {
            let x = embed(&seq(&[k]), &p).unwrap();
            assert_eq!(x.row(0), p.embedding().row(k));
            assert!(x.is_finite());
            assert!(dot(x.row(0), x.row(0)) > 0.0);
        }
        let x = embed(&seq(&[3, 3]), &p).unwrap();
        assert_eq!(x.row(0), x.row(1));
        assert!(matches!(embed(&seq(&[12]), &p), Err(Error::Data(_))));
        assert!(matches!(embed(&seq(&[0; 9]), &p), Err(Error::Data(_))));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = toy(2);
        let tr = forward(&embed(&seq(&[5]), &p).unwrap(), &p).unwrap();
        assert_eq!(tr.attention.data(), &[1.0]);
    }

    #[test]
    fn zero_query_key_projections_give_uniform_attention() {
        let p = toy(3);
        let p = ModelParams::from_parts(
            p.embedding().clone(),
            Matrix::zeros(4, 4),
            Matrix::zeros(4, 4),
            p.w_v().clone(),
            p.w_o().clone(),
            p.bias().to_vec(),
            8,
        )
        .unwrap();
        let tr = forward(&embed(&seq(&[1, 2, 3, 4, 5]), &p).unwrap(), &p).unwrap();
        for v in tr.attention.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn trace_distributions_are_valid() {
        let p = scaled(&toy(4), 20.0);
        let tr = forward(&embed(&seq(&[0, 7, 7, 2, 11, 4]), &p).unwrap(), &p).unwrap();
        assert!((tr.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..tr.tokens() {
            assert!((tr.attention.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(tr.predicted, argmax(&tr.probs));
    }

    #[test]
    fn shape_errors() {
        let p = toy(5);
        assert!(matches!(forward(&Matrix::zeros(2, 3), &p), Err(Error::Shape(_))));
        assert!(matches!(forward(&Matrix::zeros(9, 4), &p), Err(Error::Shape(_))));
        assert!(matches!(
            predict_prob(&Matrix::zeros(2, 4), &p, 3),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn predict_prob_identity_and_zero_baseline() {
        let p = scaled(&toy(6), 10.0);
        let x = embed(&seq(&[1, 2, 3]), &p).unwrap();
        let tr = forward(&x, &p).unwrap();
        assert_eq!(predict_prob(&x, &p, tr.predicted).unwrap(), tr.probs[tr.predicted]);
        let zero = Matrix::zeros(3, 4);
        let pz = predict_prob(&zero, &p, tr.predicted).unwrap();
        let expected = softmax(p.bias()).unwrap()[tr.predicted];
        assert!((pz - expected).abs() < 1e-15);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let p = toy(7);
        let q = toy(8);
        let tr = forward(&embed(&seq(&[1, 2]), &p).unwrap(), &p).unwrap();
        assert!(matches!(
            backward_input_grad(&tr, &q, 0),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let p = toy(9);
        let p = ModelParams::from_parts(
            p.embedding().clone(),
            Matrix::zeros(4, 4),
            Matrix::zeros(4, 4),
            Matrix::zeros(4, 4),
            Matrix::zeros(4, 3),
            vec![0.1, 0.2, 0.3],
            8,
        )
        .unwrap();
        let tr = forward(&embed(&seq(&[1, 2, 3]), &p).unwrap(), &p).unwrap();
        let (gx, ga) = backward_input_grad(&tr, &p, 1).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(ga.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_rows_get_equal_gradients() {
        let p = scaled(&toy(10), 8.0);
        let tr = forward(&embed(&seq(&[4, 9, 4]), &p).unwrap(), &p).unwrap();
        let (gx, _) = backward_input_grad(&tr, &p, 2).unwrap();
        for (a, b) in gx.row(0).iter().zip(gx.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_json_round_trip() {
        let p = toy(11);
        let back = ModelParams::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.fingerprint(), p.fingerprint());
        let bad = p.to_json().replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(ModelParams::from_json(&bad), Err(Error::Data(_))));
    }
}
