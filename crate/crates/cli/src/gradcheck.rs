//! Finite-difference audit of the analytic loss gradients on random
//! instances.

use ace_core::losses::{
    ace_grad_logits, ace_loss, ace_loss_ensemble_form, ace_weighted_grad_logits, ace_weighted_loss,
    compare_gradients, cross_entropy, finite_diff_grad, softmax_ce_grad, GradComparison,
    DEFAULT_FD_STEP,
};
use ace_core::numerics::softmax;
use ace_core::{AceCoefficients, ProbVector, SeededRng, Stream, Vector};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;

pub const REL_TOL: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-8;
const LAMBDAS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub instances: usize,
    pub ace: GradComparison,
    pub weighted: GradComparison,
    pub softmax_ce: GradComparison,
    /// Largest gap between the pairwise and ensemble-mean loss forms.
    pub forms_max_diff: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.ace.passed && self.weighted.passed && self.softmax_ce.passed
    }
}

fn random_logits(rng: &mut SeededRng, len: usize) -> Vector {
    Vector::from_shape_simple_fn(len, || rng.random_range(-3.0..3.0))
}

fn random_label(rng: &mut SeededRng, len: usize) -> Result<ProbVector> {
    Ok(if rng.random_bool(0.5) {
        ProbVector::one_hot(rng.random_range(0..len), len)?
    } else {
        softmax(&random_logits(rng, len))?
    })
}

fn passing() -> GradComparison {
    GradComparison {
        passed: true,
        ..Default::default()
    }
}

pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradcheckSummary> {
    let mut summary = GradcheckSummary {
        instances,
        ace: passing(),
        weighted: passing(),
        softmax_ce: passing(),
        forms_max_diff: 0.0,
    };
    for i in 0..instances {
        let mut rng = SeededRng::derive(seed, Stream::Test, i as u64);
        let k_models = rng.random_range(2..=5);
        let labels = rng.random_range(2..=8);
        let lambda = LAMBDAS[i % LAMBDAS.len()];
        let k = rng.random_range(0..k_models);
        let p = random_label(&mut rng, labels)?;
        let logits: Vec<Vector> = (0..k_models)
            .map(|_| random_logits(&mut rng, labels))
            .collect();
        let q_all = logits
            .iter()
            .map(softmax)
            .collect::<ace_core::Result<Vec<_>>>()?;
        let raw: Vec<f64> = (0..k_models).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|a| a / total).collect();

        let coeff = AceCoefficients::new(k_models, lambda)?;
        let weighted = coeff.clone().with_alpha(alpha)?;

        let with_member = |z: &Vector| {
            let mut q = q_all.clone();
            q[k] = softmax(z).expect("finite logits");
            q
        };

        let analytic = ace_grad_logits(&p, &q_all, k, &coeff)?;
        let numeric = finite_diff_grad(
            |z| ace_loss(&p, &with_member(z), k, &coeff).expect("valid instance"),
            &logits[k],
            DEFAULT_FD_STEP,
        );
        summary.ace = summary
            .ace
            .merge(compare_gradients(&analytic, &numeric, REL_TOL, ABS_FLOOR));

        let analytic = ace_weighted_grad_logits(&p, &q_all, k, &weighted)?;
        let numeric = finite_diff_grad(
            |z| ace_weighted_loss(&p, &with_member(z), k, &weighted).expect("valid instance"),
            &logits[k],
            DEFAULT_FD_STEP,
        );
        summary.weighted = summary
            .weighted
            .merge(compare_gradients(&analytic, &numeric, REL_TOL, ABS_FLOOR));

        let analytic = softmax_ce_grad(&p, &logits[k])?;
        let numeric = finite_diff_grad(
            |z| cross_entropy(&p, &softmax(z).expect("finite logits")).expect("same length"),
            &logits[k],
            DEFAULT_FD_STEP,
        );
        summary.softmax_ce = summary
            .softmax_ce
            .merge(compare_gradients(&analytic, &numeric, REL_TOL, ABS_FLOOR));

        let gap = (ace_loss(&p, &q_all, k, &coeff)?
            - ace_loss_ensemble_form(&p, &q_all, k, &coeff)?)
        .abs();
        summary.forms_max_diff = summary.forms_max_diff.max(gap);
    }
    Ok(summary)
}
