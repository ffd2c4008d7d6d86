//! Small numerically-careful helpers shared by the recurrent models.

use ndarray::Array1;

use crate::num::Scalar;

pub fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Max-subtracted softmax; strictly positive, sums to 1.
pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|l| (l - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Log-probabilities: `logits - max - ln(sum(exp(logits - max)))`.
pub fn log_softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let log_sum = logits.mapv(|l| (l - max).exp()).sum().ln();
    logits.mapv(|l| l - max - log_sum)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Scalar>(values: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
