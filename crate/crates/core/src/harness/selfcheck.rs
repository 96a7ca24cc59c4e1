//! Quick invariant checks runnable from the command line.

use crate::attribution::{deeplift_contributions, integrated_gradients_attributions};
use crate::error::Result;
use crate::metrics::{normalized_comprehensiveness, normalized_sufficiency, rank_sum_test, soft_nc, soft_ns, LikelihoodTriple};
use crate::model::{backward_input_grad, class_logit, forward, predict_prob, ModelParams};
use crate::numerics::{bernoulli_mask, rng_for, Matrix};
use crate::perturbation::{soft_perturb, zero_baseline, SoftMode, SoftPerturbConfig};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random_input(seed: u64, i: u64, rows: usize, cols: usize) -> Matrix {
    let mut g = rng_for(seed, &[i]).generator();
    Matrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
}

/// Runs every check on a freshly initialized model drawn from `seed`.
pub fn run_selfcheck(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let params = ModelParams::init(32, 8, 3, 16, &rng_for(seed, &[0]))?;
    let inputs: Vec<Matrix> = (0..instances as u64)
        .map(|i| random_input(seed, 1 + i, 2 + (i as usize % 10), params.dim()))
        .collect();
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for x in &inputs {
        let trace = forward(x, &params)?;
        let class = trace.predicted;
        let (grad, _) = backward_input_grad(&trace, &params, class)?;
        let h = 1e-5;
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.set(r, c, x.get(r, c) + h);
                minus.set(r, c, x.get(r, c) - h);
                let fd = (class_logit(&plus, &params, class)? - class_logit(&minus, &params, class)?) / (2.0 * h);
                let g = grad.get(r, c);
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    out.push(check("gradient_finite_difference", worst <= 1e-4, format!("max relative error {worst:.3e}")));

    let mut ig_worst = 0.0f64;
    let mut dl_worst = 0.0f64;
    for x in &inputs {
        let class = forward(x, &params)?.predicted;
        let delta = class_logit(x, &params, class)? - class_logit(&zero_baseline(x), &params, class)?;
        let ig: f64 = integrated_gradients_attributions(x, &params, class, 50)?.data().iter().sum();
        ig_worst = ig_worst.max((ig - delta).abs() / (delta.abs() + 1e-6));
        let dl: f64 = deeplift_contributions(x, &params, class)?.data().iter().sum();
        dl_worst = dl_worst.max((dl - delta).abs());
    }
    out.push(check("ig_completeness", ig_worst <= 0.01, format!("worst relative residual {ig_worst:.3e}")));
    out.push(check("deeplift_summation", dl_worst <= 1e-6, format!("worst residual {dl_worst:.3e}")));

    let mut bernoulli_ok = true;
    let mut detail = Vec::new();
    for (k, q) in [0.1, 0.3, 0.5, 0.9].into_iter().enumerate() {
        let (n, d) = (1000usize, 128usize);
        let kept: usize = (0..n)
            .map(|s| bernoulli_mask(&rng_for(seed, &[99, k as u64, s as u64]), q, d).map(|m| m.ones()))
            .sum::<Result<usize>>()?;
        let total = (n * d) as f64;
        let sigma = (total * q * (1.0 - q)).sqrt();
        let z = (kept as f64 - total * q) / sigma;
        bernoulli_ok &= z.abs() <= 3.0;
        detail.push(format!("q={q}: z={z:.2}"));
    }
    out.push(check("bernoulli_keep_rate", bernoulli_ok, detail.join(", ")));

    let mut boundary_worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let class = forward(x, &params)?.predicted;
        let p_full = predict_prob(x, &params, class)?;
        let p_zero = predict_prob(&zero_baseline(x), &params, class)?;
        let ones = vec![1.0; x.rows()];
        let soft = |mode| -> Result<Vec<f64>> {
            let cfg = SoftPerturbConfig {
                mode,
                samples: 4,
                rng: rng_for(seed, &[7, i as u64]),
            };
            soft_perturb(x, &ones, &cfg)?
                .iter()
                .map(|xp| predict_prob(xp, &params, class))
                .collect()
        };
        let values = [
            normalized_sufficiency(&LikelihoodTriple::new(p_full, p_full, p_zero)?).value(),
            normalized_comprehensiveness(&LikelihoodTriple::new(p_full, p_zero, p_zero)?).value(),
            soft_ns(p_full, &soft(SoftMode::Retain)?, p_zero)?.value(),
            soft_nc(p_full, &soft(SoftMode::Remove)?, p_zero)?.value(),
        ];
        for v in values.into_iter().flatten() {
            boundary_worst = boundary_worst.max((v - 1.0).abs());
        }
    }
    out.push(check("metric_boundaries", boundary_worst <= 1e-9, format!("worst deviation {boundary_worst:.3e}")));

    let p = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])?;
    out.push(check("rank_sum_exact", (p - 0.1).abs() < 1e-12, format!("p = {p}")));
    Ok(out)
}
