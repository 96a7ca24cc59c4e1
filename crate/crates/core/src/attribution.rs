//! Token-level feature attributions, their normalization into Bernoulli
//! parameters, and top-k rationale selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{backward_input_grad, forward, ForwardTrace, ModelParams};
use crate::numerics::{Matrix, RngStream};

/// Threshold below which a Rescale multiplier falls back to the local gradient.
pub const RESCALE_EPS: f64 = 1e-8;

pub const DEFAULT_IG_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaName {
    Attention,
    ScaledAttention,
    InputXGrad,
    IntegratedGradients,
    DeepLift,
    Random,
    /// Scores imported from a file, tagged with the name found there.
    External(String),
}

impl FaName {
    pub const BUILT_IN: [FaName; 6] = [
        FaName::Attention,
        FaName::ScaledAttention,
        FaName::InputXGrad,
        FaName::IntegratedGradients,
        FaName::DeepLift,
        FaName::Random,
    ];
}

impl fmt::Display for FaName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaName::Attention => f.write_str("attention"),
            FaName::ScaledAttention => f.write_str("scaled_attention"),
            FaName::InputXGrad => f.write_str("input_x_grad"),
            FaName::IntegratedGradients => f.write_str("integrated_gradients"),
            FaName::DeepLift => f.write_str("deeplift"),
            FaName::Random => f.write_str("random"),
            FaName::External(name) => write!(f, "external:{name}"),
        }
    }
}

impl FromStr for FaName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "attention" => FaName::Attention,
            "scaled_attention" => FaName::ScaledAttention,
            "input_x_grad" => FaName::InputXGrad,
            "integrated_gradients" | "ig" => FaName::IntegratedGradients,
            "deeplift" => FaName::DeepLift,
            "random" => FaName::Random,
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => FaName::External(name.to_string()),
                _ => {
                    return Err(Error::Parameter(format!(
                        "unknown feature attribution '{other}'"
                    )))
                }
            },
        })
    }
}

/// How per-dimension attributions collapse into one score per token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenReduce {
    /// `|Σ_d attribution[i, d]|`
    #[default]
    AbsSum,
    /// `sqrt(Σ_d attribution[i, d]²)`
    L2,
}

impl FromStr for TokenReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "abs_sum" => Ok(TokenReduce::AbsSum),
            "l2" => Ok(TokenReduce::L2),
            other => Err(Error::Parameter(format!("unknown token reduction '{other}'"))),
        }
    }
}

impl fmt::Display for TokenReduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenReduce::AbsSum => "abs_sum",
            TokenReduce::L2 => "l2",
        })
    }
}

pub fn reduce_tokens(attributions: &Matrix, reduce: TokenReduce) -> Vec<f64> {
    (0..attributions.rows())
        .map(|i| {
            let row = attributions.row(i);
            match reduce {
                TokenReduce::AbsSum => row.iter().sum::<f64>().abs(),
                TokenReduce::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect()
}

/// Raw and normalized per-token scores from one attribution method.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionScores {
    pub instance_id: String,
    pub fa: FaName,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl AttributionScores {
    pub fn new(fa: FaName, raw: Vec<f64>) -> Result<Self> {
        let normalized = normalize_scores(&raw)?;
        Ok(AttributionScores {
            instance_id: String::new(),
            fa,
            raw,
            normalized,
        })
    }

    pub fn for_instance(mut self, id: impl Into<String>) -> Self {
        self.instance_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Min-max normalization into `[0, 1]`; a constant vector maps to 0.5 everywhere.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!("attribution score {v}")));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range >= 1e-12) {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw.iter().map(|r| (r - min) / range).collect())
}

/// Column means of the attention matrix.
pub fn attention_fa(trace: &ForwardTrace) -> Result<AttributionScores> {
    AttributionScores::new(FaName::Attention, trace.attention.column_means())
}

/// Column means of `A ⊙ ∂logit/∂A`.
pub fn scaled_attention_fa(trace: &ForwardTrace, attention_grad: &Matrix) -> Result<AttributionScores> {
    let scaled = trace.attention.hadamard(attention_grad)?;
    AttributionScores::new(FaName::ScaledAttention, scaled.column_means())
}

pub fn input_x_grad(x: &Matrix, input_grad: &Matrix, reduce: TokenReduce) -> Result<AttributionScores> {
    let prod = x.hadamard(input_grad)?;
    AttributionScores::new(FaName::InputXGrad, reduce_tokens(&prod, reduce))
}

/// Per-dimension integrated gradients from the zero baseline, right-endpoint
/// Riemann sum over `steps` points.
pub fn integrated_gradients_attributions(
    x: &Matrix,
    params: &ModelParams,
    class: usize,
    steps: usize,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Parameter("integrated gradients needs at least one step".into()));
    }
    let mut total = Matrix::zeros(x.rows(), x.cols());
    for k in 1..=steps {
        let point = x.scale(k as f64 / steps as f64);
        let trace = forward(&point, params)?;
        let (grad, _) = backward_input_grad(&trace, params, class)?;
        total.add_assign(&grad)?;
    }
    let n = steps as f64;
    x.zip_map(&total, |xv, g| xv * (g / n))
}

pub fn integrated_gradients(
    x: &Matrix,
    params: &ModelParams,
    class: usize,
    steps: usize,
    reduce: TokenReduce,
) -> Result<AttributionScores> {
    let attr = integrated_gradients_attributions(x, params, class, steps)?;
    AttributionScores::new(FaName::IntegratedGradients, reduce_tokens(&attr, reduce))
}

fn rescale(delta_out: f64, delta_in: f64, local_grad: f64) -> f64 {
    if delta_in.abs() < RESCALE_EPS {
        local_grad
    } else {
        delta_out / delta_in
    }
}

/// Per-dimension DeepLift contributions against the all-zero reference.
///
/// The logit of `class` is `b + Σ_j ā_j u_j` with `u_j = x_j·(Wv·w_class)` and
/// `ā` the attention column means, so the pass decomposes it into elementary
/// ops. Products use the symmetric split `Δ(ab) = Δa·(b+b̄)/2 + Δb·(a+ā)/2`,
/// the exponential and reciprocal inside the row softmax use Rescale
/// multipliers, and linear maps pass multipliers through unchanged.
/// Contributions sum to `logit(X) − logit(0)` up to rounding.
pub fn deeplift_contributions(x: &Matrix, params: &ModelParams, class: usize) -> Result<Matrix> {
    let (t, d) = x.shape();
    if d != params.dim() {
        return Err(Error::Shape(format!(
            "input has {d} columns but the model dimension is {}",
            params.dim()
        )));
    }
    if class >= params.classes() {
        return Err(Error::Parameter(format!("class {class} out of range")));
    }
    let tf = t as f64;
    let scale = 1.0 / (d as f64).sqrt();
    let w_class: Vec<f64> = (0..d).map(|e| params.w_o().get(e, class)).collect();
    let value_dir: Vec<f64> = (0..d)
        .map(|e| crate::numerics::dot(params.w_v().row(e), &w_class))
        .collect();

    let q = x.matmul(params.w_q())?;
    let k = x.matmul(params.w_k())?;
    let s = q.matmul_t(&k)?.scale(scale);
    let u: Vec<f64> = (0..t)
        .map(|j| crate::numerics::dot(x.row(j), &value_dir))
        .collect();

    // softmax rows as E·R with a per-row shift shared by input and reference
    let mut e = Matrix::zeros(t, t);
    let mut e_ref = vec![0.0; t];
    let mut r = vec![0.0; t];
    let mut r_ref = vec![0.0; t];
    let mut n = vec![0.0; t];
    let mut n_ref = vec![0.0; t];
    for i in 0..t {
        let shift = s.row(i).iter().copied().fold(0.0, f64::max);
        for j in 0..t {
            e.set(i, j, (s.get(i, j) - shift).exp());
        }
        e_ref[i] = (-shift).exp();
        n[i] = e.row(i).iter().sum();
        n_ref[i] = tf * e_ref[i];
        r[i] = 1.0 / n[i];
        r_ref[i] = 1.0 / n_ref[i];
    }
    let col_mean: Vec<f64> = (0..t)
        .map(|j| (0..t).map(|i| e.get(i, j) * r[i]).sum::<f64>() / tf)
        .collect();

    // ā_j·u_j, reference ā = 1/T, u = 0
    let m_u: Vec<f64> = col_mean.iter().map(|a| (a + 1.0 / tf) / 2.0).collect();
    let m_colmean: Vec<f64> = u.iter().map(|uj| uj / 2.0).collect();

    let mut m_s = Matrix::zeros(t, t);
    for i in 0..t {
        let mut m_r = 0.0;
        let mut m_e_row = vec![0.0; t];
        for j in 0..t {
            let m_a = m_colmean[j] / tf;
            m_e_row[j] = m_a * (r[i] + r_ref[i]) / 2.0;
            m_r += m_a * (e.get(i, j) + e_ref[i]) / 2.0;
        }
        let m_n = m_r * rescale(r[i] - r_ref[i], n[i] - n_ref[i], -r[i] * r[i]);
        for j in 0..t {
            let m_e = m_e_row[j] + m_n;
            let sij = s.get(i, j);
            m_s.set(i, j, m_e * rescale(e.get(i, j) - e_ref[i], sij, e.get(i, j)));
        }
    }

    // S = Q·Kᵀ·scale, reference Q = K = 0
    let half = scale / 2.0;
    let m_q = m_s.matmul(&k)?.scale(half);
    let m_k = m_s.t_matmul(&q)?.scale(half);
    let mut m_x = m_q.matmul_t(params.w_q())?;
    m_x.add_assign(&m_k.matmul_t(params.w_k())?)?;
    for j in 0..t {
        for (mx, g) in m_x.row_mut(j).iter_mut().zip(&value_dir) {
            *mx += m_u[j] * g;
        }
    }
    m_x.hadamard(x)
}

pub fn deeplift(
    x: &Matrix,
    params: &ModelParams,
    class: usize,
    reduce: TokenReduce,
) -> Result<AttributionScores> {
    let contrib = deeplift_contributions(x, params, class)?;
    AttributionScores::new(FaName::DeepLift, reduce_tokens(&contrib, reduce))
}

/// I.i.d. uniform `[0, 1)` scores drawn from the start of `rng`.
pub fn random_fa(rng: &RngStream, tokens: usize) -> Result<AttributionScores> {
    if tokens == 0 {
        return Err(Error::Parameter("random attribution needs at least one token".into()));
    }
    let mut gen = rng.generator();
    let raw = (0..tokens).map(|_| gen.random::<f64>()).collect();
    AttributionScores::new(FaName::Random, raw)
}

/// Inputs for computing any built-in attribution on one instance.
pub struct FaContext<'a> {
    pub x: &'a Matrix,
    pub trace: &'a ForwardTrace,
    pub params: &'a ModelParams,
    pub class: usize,
    pub ig_steps: usize,
    pub reduce: TokenReduce,
    /// Stream for the `random` method.
    pub rng: RngStream,
}

pub fn compute_fa(fa: &FaName, ctx: &FaContext<'_>) -> Result<AttributionScores> {
    match fa {
        FaName::Attention => attention_fa(ctx.trace),
        FaName::ScaledAttention => {
            let (_, ga) = backward_input_grad(ctx.trace, ctx.params, ctx.class)?;
            scaled_attention_fa(ctx.trace, &ga)
        }
        FaName::InputXGrad => {
            let (gx, _) = backward_input_grad(ctx.trace, ctx.params, ctx.class)?;
            input_x_grad(ctx.x, &gx, ctx.reduce)
        }
        FaName::IntegratedGradients => {
            integrated_gradients(ctx.x, ctx.params, ctx.class, ctx.ig_steps, ctx.reduce)
        }
        FaName::DeepLift => deeplift(ctx.x, ctx.params, ctx.class, ctx.reduce),
        FaName::Random => random_fa(&ctx.rng, ctx.x.rows()),
        FaName::External(name) => Err(Error::Parameter(format!(
            "external attribution '{name}' must be imported, not computed"
        ))),
    }
}

/// Top-scoring tokens kept as the explanation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RationaleMask {
    pub instance_id: String,
    /// Fraction in `(0, 1]`, stored as its bit pattern so the mask stays `Eq`.
    ratio_bits: u64,
    pub members: Vec<bool>,
}

impl RationaleMask {
    pub fn from_members(instance_id: impl Into<String>, ratio: f64, members: Vec<bool>) -> Self {
        RationaleMask {
            instance_id: instance_id.into(),
            ratio_bits: ratio.to_bits(),
            members,
        }
    }

    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn member_indices(&self) -> Vec<usize> {
        (0..self.members.len()).filter(|&i| self.members[i]).collect()
    }
}

/// `max(1, ceil(ratio·T))`, ignoring float fuzz just above an integer.
pub fn rationale_size(ratio: f64, tokens: usize) -> usize {
    let k = (ratio * tokens as f64 - 1e-9).ceil() as usize;
    k.clamp(1, tokens)
}

/// Indices sorted by descending score, lower index first among equal scores.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

pub fn top_k_rationale(scores: &AttributionScores, ratio: f64) -> Result<RationaleMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Parameter(format!("rationale ratio {ratio} outside (0, 1]")));
    }
    let t = scores.len();
    if t == 0 {
        return Err(Error::Parameter("cannot select a rationale from zero tokens".into()));
    }
    let k = rationale_size(ratio, t);
    let mut members = vec![false; t];
    for &i in descending_order(&scores.raw).iter().take(k) {
        members[i] = true;
    }
    Ok(RationaleMask::from_members(scores.instance_id.clone(), ratio, members))
}
