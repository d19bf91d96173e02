//! Plain-valued training objectives. The tape computes the same terms
//! during training; these are the reference forms.

use crate::scalar::Scalar;
use crate::tape::{kl_value, log_sum_exp, KlDirection};
use crate::tensor::Tensor;

use super::TrainConfig;

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> T {
    log_sum_exp(logits.data()) - logits.data()[label]
}

/// Batch mean of the KL term between paired logit vectors.
pub fn distill_loss<T: Scalar>(student: &[Tensor<T>], teacher: &[Tensor<T>], direction: KlDirection) -> T {
    let n = T::from(student.len().max(1)).expect("count");
    student
        .iter()
        .zip(teacher)
        .map(|(s, t)| kl_value(s.data(), t.data(), direction))
        .sum::<T>()
        / n
}

/// `|mean(fractions) − target|`, both as fractions of the dense cost.
pub fn budget_loss(fractions: &[f64], target: f64) -> f64 {
    (mean(fractions) - target).abs()
}

/// Derivative of [`budget_loss`] with respect to the batch mean; zero at
/// the kink.
pub fn budget_grad(mean_fraction: f64, target: f64) -> f64 {
    let d = mean_fraction - target;
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn total_loss(ce: f64, flops: f64, distill: f64, cfg: &TrainConfig) -> f64 {
    ce + cfg.lambda_flops * flops + cfg.lambda_distill * distill
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
