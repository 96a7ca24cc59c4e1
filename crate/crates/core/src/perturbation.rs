//! Hard erasure (zeroing whole token rows) and soft erasure (masking
//! embedding dimensions in proportion to token importance).

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::attribution::RationaleMask;
use crate::error::{Error, Result};
use crate::model::{forward_with_bias, ForwardTrace, ModelParams};
use crate::numerics::{bernoulli_mask, Matrix, RngStream};

pub const DEFAULT_SOFT_SAMPLES: usize = 16;

/// Tuning grid for the Gaussian noise variance.
pub const SIGMA2_GRID: [f64; 7] = [0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0];

const ATTENTION_MASK_FLOOR: f64 = 1e-12;

pub fn zero_baseline(x: &Matrix) -> Matrix {
    Matrix::zeros(x.rows(), x.cols())
}

fn check_mask(x: &Matrix, r: &RationaleMask) -> Result<()> {
    if r.len() != x.rows() {
        return Err(Error::Shape(format!(
            "rationale covers {} tokens, input has {}",
            r.len(),
            x.rows()
        )));
    }
    Ok(())
}

/// Keeps rationale rows, zeroes the rest.
pub fn hard_retain(x: &Matrix, r: &RationaleMask) -> Result<Matrix> {
    check_mask(x, r)?;
    let mut out = x.clone();
    for (i, &keep) in r.members.iter().enumerate() {
        if !keep {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Zeroes rationale rows, keeps the rest.
pub fn hard_remove(x: &Matrix, r: &RationaleMask) -> Result<Matrix> {
    check_mask(x, r)?;
    let mut out = x.clone();
    for (i, &drop) in r.members.iter().enumerate() {
        if drop {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftMode {
    /// Keep probability `a_i`.
    Retain,
    /// Keep probability `1 − a_i`.
    Remove,
}

impl SoftMode {
    pub fn keep_probability(self, importance: f64) -> f64 {
        match self {
            SoftMode::Retain => importance,
            SoftMode::Remove => 1.0 - importance,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SoftPerturbConfig {
    pub mode: SoftMode,
    pub samples: usize,
    /// Per-instance stream; sample `s`, token `i` draws from `rng/s/i`.
    pub rng: RngStream,
}

fn check_importances(x: &Matrix, a: &[f64]) -> Result<()> {
    if a.len() != x.rows() {
        return Err(Error::Parameter(format!(
            "{} importances for {} tokens",
            a.len(),
            x.rows()
        )));
    }
    if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Parameter(format!(
            "importance {v} is not normalized into [0, 1]"
        )));
    }
    Ok(())
}

/// `M` Bernoulli-masked copies of `x`.
pub fn soft_perturb(x: &Matrix, a: &[f64], cfg: &SoftPerturbConfig) -> Result<Vec<Matrix>> {
    check_importances(x, a)?;
    if cfg.samples == 0 {
        return Err(Error::Parameter("soft perturbation needs at least one sample".into()));
    }
    let d = x.cols();
    (0..cfg.samples)
        .map(|s| {
            let sample_rng = cfg.rng.split(s as u64);
            let mut out = x.clone();
            for (i, &ai) in a.iter().enumerate() {
                let q = cfg.mode.keep_probability(ai);
                let mask = bernoulli_mask(&sample_rng.split(i as u64), q, d)?;
                for (v, &m) in out.row_mut(i).iter_mut().zip(mask.entries()) {
                    if m == 0 {
                        *v = 0.0;
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianVariant {
    /// `x' = x + γ·λ ⊙ x`, `γ ~ N(μ, σ²)`, `λ` the importance.
    ScaledImportance,
    /// `x' = x + γ ⊙ x`, `γ ~ N(μ, λ·σ²)`.
    VarianceImportance,
}

impl FromStr for GaussianVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scaled_importance" => Ok(GaussianVariant::ScaledImportance),
            "variance_importance" => Ok(GaussianVariant::VarianceImportance),
            other => Err(Error::Parameter(format!("unknown Gaussian variant '{other}'"))),
        }
    }
}

impl fmt::Display for GaussianVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaussianVariant::ScaledImportance => "scaled_importance",
            GaussianVariant::VarianceImportance => "variance_importance",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GaussianPerturbConfig {
    pub variant: GaussianVariant,
    pub mu: f64,
    pub sigma2: f64,
    /// Token `i` draws its noise from `rng/i`.
    pub rng: RngStream,
}

pub fn gaussian_perturb(x: &Matrix, a: &[f64], cfg: &GaussianPerturbConfig) -> Result<Matrix> {
    check_importances(x, a)?;
    if !(cfg.sigma2 > 0.0 && cfg.sigma2.is_finite()) || !cfg.mu.is_finite() {
        return Err(Error::Parameter(format!(
            "Gaussian noise needs finite mu and sigma2 > 0 (got {}, {})",
            cfg.mu, cfg.sigma2
        )));
    }
    let mut out = x.clone();
    for (i, &ai) in a.iter().enumerate() {
        let (std, weight) = match cfg.variant {
            GaussianVariant::ScaledImportance => (cfg.sigma2.sqrt(), ai),
            GaussianVariant::VarianceImportance => ((ai * cfg.sigma2).sqrt(), 1.0),
        };
        let normal = Normal::new(cfg.mu, std)
            .map_err(|e| Error::Parameter(format!("Gaussian noise: {e}")))?;
        let mut gen = cfg.rng.split(i as u64).generator();
        for v in out.row_mut(i).iter_mut() {
            let gamma = normal.sample(&mut gen);
            *v += gamma * weight * *v;
        }
    }
    Ok(out)
}

/// Class probabilities after offsetting every attention logit aimed at token
/// `j` by `ln(a_j + 1e-12)`.
pub fn continuous_attention_mask(
    trace: &ForwardTrace,
    a: &[f64],
    params: &ModelParams,
) -> Result<Vec<f64>> {
    check_importances(&trace.input, a)?;
    let bias: Vec<f64> = a.iter().map(|v| (v + ATTENTION_MASK_FLOOR).ln()).collect();
    Ok(forward_with_bias(&trace.input, params, Some(&bias))?.probs)
}

/// The soft perturbation family used for Soft-NS / Soft-NC.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SoftStrategy {
    #[default]
    Bernoulli,
    Gaussian {
        variant: GaussianVariant,
        mu: f64,
        sigma2: f64,
    },
    AttentionMask,
}

impl fmt::Display for SoftStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SoftStrategy::Bernoulli => f.write_str("bernoulli"),
            SoftStrategy::Gaussian { variant, .. } => write!(f, "gaussian_{variant}"),
            SoftStrategy::AttentionMask => f.write_str("attention_mask"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;
    use proptest::prelude::*;

    fn sample_x(rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| 0.5 + r as f64 - 0.25 * c as f64)
    }

    fn mask(members: &[bool]) -> RationaleMask {
        RationaleMask::from_members("x", 0.5, members.to_vec())
    }

    #[test]
    fn zero_baseline_shape_and_idempotence() {
        let x = sample_x(3, 4);
        let z = zero_baseline(&x);
        assert_eq!(z.shape(), (3, 4));
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero_baseline(&z), z);
    }

    #[test]
    fn hard_erasure_examples() {
        let x = sample_x(3, 2);
        assert_eq!(hard_retain(&x, &mask(&[true; 3])).unwrap(), x);
        assert_eq!(hard_retain(&x, &mask(&[false; 3])).unwrap(), zero_baseline(&x));
        let r0 = hard_retain(&x, &mask(&[true, false, false])).unwrap();
        assert_eq!(r0.row(0), x.row(0));
        assert_eq!(r0.row(1), &[0.0, 0.0]);
        assert_eq!(r0.row(2), &[0.0, 0.0]);
        assert_eq!(hard_remove(&x, &mask(&[true; 3])).unwrap(), zero_baseline(&x));
        let r1 = hard_remove(&x, &mask(&[false, true, false])).unwrap();
        assert_eq!(r1.row(0), x.row(0));
        assert_eq!(r1.row(1), &[0.0, 0.0]);
        assert_eq!(r1.row(2), x.row(2));
        assert!(matches!(hard_remove(&x, &mask(&[true])), Err(Error::Shape(_))));
    }

    #[test]
    fn soft_perturb_degenerate_importances() {
        let x = sample_x(4, 8);
        let ones = vec![1.0; 4];
        let retain = SoftPerturbConfig {
            mode: SoftMode::Retain,
            samples: 5,
            rng: rng_for(1, &[0]),
        };
        for s in soft_perturb(&x, &ones, &retain).unwrap() {
            assert_eq!(s, x);
        }
        let remove = SoftPerturbConfig {
            mode: SoftMode::Remove,
            ..retain.clone()
        };
        for s in soft_perturb(&x, &ones, &remove).unwrap() {
            assert_eq!(s, zero_baseline(&x));
        }
        assert!(matches!(
            soft_perturb(&x, &[1.2, 0.0, 0.0, 0.0], &retain),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(soft_perturb(&x, &[1.0], &retain), Err(Error::Parameter(_))));
    }

    #[test]
    fn soft_perturb_keep_rate() {
        let (d, m, q) = (128usize, 1000usize, 0.25);
        let x = Matrix::from_fn(3, d, |_, _| 1.0);
        let cfg = SoftPerturbConfig {
            mode: SoftMode::Retain,
            samples: m,
            rng: rng_for(5, &[2]),
        };
        let samples = soft_perturb(&x, &[q; 3], &cfg).unwrap();
        let bound = 3.0 * (q * (1.0 - q) / (d * m) as f64).sqrt();
        for i in 0..3 {
            let kept: f64 = samples.iter().map(|s| s.row(i).iter().sum::<f64>()).sum();
            let rate = kept / (d * m) as f64;
            assert!((rate - q).abs() <= bound, "token {i}: {rate}");
        }
    }

    #[test]
    fn soft_perturb_is_order_independent() {
        let x = sample_x(5, 16);
        let a = [0.1, 0.9, 0.5, 0.3, 0.7];
        let cfg = SoftPerturbConfig {
            mode: SoftMode::Remove,
            samples: 8,
            rng: rng_for(42, &[7]),
        };
        let all = soft_perturb(&x, &a, &cfg).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (x, cfg) = (x.clone(), cfg.clone());
                std::thread::spawn(move || soft_perturb(&x, &a, &cfg).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), all);
        }
    }

    #[test]
    fn gaussian_zero_importance_and_vanishing_variance() {
        let x = sample_x(3, 6);
        let cfg = GaussianPerturbConfig {
            variant: GaussianVariant::VarianceImportance,
            mu: 0.0,
            sigma2: 0.5,
            rng: rng_for(3, &[]),
        };
        let out = gaussian_perturb(&x, &[0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(out, x);
        for variant in [GaussianVariant::ScaledImportance, GaussianVariant::VarianceImportance] {
            let tiny = GaussianPerturbConfig {
                variant,
                sigma2: 1e-16,
                ..cfg.clone()
            };
            let out = gaussian_perturb(&x, &[0.4, 0.9, 1.0], &tiny).unwrap();
            assert!(out.max_abs_diff(&x) < 1e-6);
        }
        let bad = GaussianPerturbConfig { sigma2: 0.0, ..cfg };
        assert!(matches!(
            gaussian_perturb(&x, &[0.1; 3], &bad),
            Err(Error::Parameter(_))
        ));
        assert!("cauchy".parse::<GaussianVariant>().is_err());
    }

    #[test]
    fn gaussian_scaled_importance_variance() {
        let sigma2 = 0.1;
        let d = 10;
        let x = Matrix::from_fn(1, d, |_, c| 0.3 + c as f64);
        let root = rng_for(17, &[]);
        let draws = 10_000;
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for k in 0..draws {
            let cfg = GaussianPerturbConfig {
                variant: GaussianVariant::ScaledImportance,
                mu: 0.0,
                sigma2,
                rng: root.split(k),
            };
            let out = gaussian_perturb(&x, &[1.0], &cfg).unwrap();
            for e in 0..d {
                let g = (out.get(0, e) - x.get(0, e)) / x.get(0, e);
                sums[e] += g;
                sq[e] += g * g;
            }
        }
        let n = draws as f64;
        for e in 0..d {
            let mean = sums[e] / n;
            let var = sq[e] / n - mean * mean;
            assert!((var - sigma2).abs() <= 0.05 * sigma2, "dim {e}: {var}");
        }
    }

    proptest! {
        #[test]
        fn retain_and_remove_partition_the_input(
            members in prop::collection::vec(any::<bool>(), 1..12),
            seed in 0u64..1000,
        ) {
            let t = members.len();
            let x = Matrix::from_fn(t, 5, |r, c| ((seed + r as u64 * 7 + c as u64) % 13) as f64 - 6.5);
            let r = mask(&members);
            let sum = hard_retain(&x, &r).unwrap().add(&hard_remove(&x, &r).unwrap()).unwrap();
            prop_assert_eq!(sum, x);
        }
    }
}
