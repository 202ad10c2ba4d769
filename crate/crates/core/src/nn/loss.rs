//! Losses computed from logits. Each returns the batch-mean loss and its
//! gradient with respect to the logits.

use super::Scalar;

/// `max(x, 0) + ln(1 + e^{-|x|})`
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`.
pub fn bce_with_logits<S: Scalar>(logits: &[S], targets: &[S]) -> (S, Vec<S>) {
    let n = S::lit(logits.len() as f64);
    let mut loss = S::zero();
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            loss += t * softplus(-z) + (S::one() - t) * softplus(z);
            (sigmoid(z) - t) / n
        })
        .collect();
    (loss / n, grad)
}

fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

/// Cross-entropy over per-class sigmoid scores renormalised to sum to one:
/// `-ln(s_y / Σ_j s_j)` with `s = sigmoid(logits)`.
pub fn renormalized_sigmoid_ce<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> (S, Vec<S>) {
    let batch = labels.len();
    assert_eq!(logits.len(), batch * classes);
    let n = S::lit(batch as f64);
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let log_s: Vec<S> = row.iter().map(|&a| -softplus(-a)).collect();
        let lse = log_sum_exp(&log_s);
        loss += lse - log_s[y];
        for c in 0..classes {
            let s = log_s[c].exp();
            let mut g = s * (S::one() - s) / (lse.exp());
            if c == y {
                g -= S::one() - s;
            }
            grad[b * classes + c] = g / n;
        }
    }
    (loss / n, grad)
}

pub fn softmax_rows<S: Scalar>(logits: &[S], classes: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    out
}

/// Categorical cross-entropy of `softmax(logits)`.
pub fn softmax_ce<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> (S, Vec<S>) {
    let n = S::lit(labels.len() as f64);
    let mut probs = softmax_rows(logits, classes);
    let mut loss = S::zero();
    for (b, &y) in labels.iter().enumerate() {
        loss -= probs[b * classes + y].max(S::min_positive_value()).ln();
        probs[b * classes + y] -= S::one();
    }
    probs.iter_mut().for_each(|g| *g /= n);
    (loss / n, probs)
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn bce_matches_definition_and_gradient() {
        let z = [0.3, -2.0, 5.0, -0.1];
        let t = [1.0, 0.0, 1.0, 0.0];
        let (loss, grad) = bce_with_logits(&z, &t);
        let direct: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + f64::exp(-z));
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss - direct).abs() < 1e-12);
        let num = numeric(|z| bce_with_logits(z, &t).0, &z);
        for (a, b) in grad.iter().zip(num) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn renormalized_ce_matches_definition_and_gradient() {
        let z = [0.5, -1.0, 2.0, 0.0, 3.0, -4.0];
        let labels = [2, 0];
        let (loss, grad) = renormalized_sigmoid_ce(&z, 3, &labels);
        let mut direct = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let s: Vec<f64> = z[b * 3..b * 3 + 3].iter().map(|&a| 1.0 / (1.0 + f64::exp(-a))).collect();
            direct -= (s[y] / s.iter().sum::<f64>()).ln();
        }
        assert!((loss - direct / 2.0).abs() < 1e-12);
        let num = numeric(|z| renormalized_sigmoid_ce(z, 3, &labels).0, &z);
        for (a, b) in grad.iter().zip(num) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ce_gradient() {
        let z = [1.0, 2.0, 3.0, -50.0, 0.0, 50.0];
        let p = softmax_rows(&z, 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let labels = [1, 2];
        let (_, grad) = softmax_ce(&z, 3, &labels);
        let num = numeric(|z| softmax_ce(z, 3, &labels).0, &z);
        for (a, b) in grad.iter().zip(num) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
