use crate::scalar::Scalar;

const PROB_FLOOR: f64 = 1e-12;

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean binary cross-entropy of positive-class probabilities, clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss<S: Scalar>(probabilities: &[S], labels: &[bool]) -> S {
    debug_assert_eq!(probabilities.len(), labels.len());
    let lo = S::of(PROB_FLOOR);
    let hi = S::one() - lo;
    let total: S = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            if y {
                -p.ln()
            } else {
                -(S::one() - p).ln()
            }
        })
        .sum();
    total / S::of(labels.len() as f64)
}

/// Two-class softmax followed by BCE on the positive class (index 1).
/// Returns `(loss, positive probability, d loss / d logits)`.
pub fn softmax_bce<S: Scalar>(logits: &[S; 2], label: bool) -> (S, S, [S; 2]) {
    let p = softmax(logits);
    let loss = bce_loss(&[p[1]], &[label]);
    let y = if label { S::one() } else { S::zero() };
    (loss, p[1], [p[0] - (S::one() - y), p[1] - y])
}
