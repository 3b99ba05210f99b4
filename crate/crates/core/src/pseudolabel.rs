//! Class-balanced pseudo-labels for the unlabeled target domain.
//!
//! For each class `k` a threshold `λ_k` is the confidence of the most
//! confident `p` portion of samples predicted as `k`. A sample is labeled
//! with `k* = argmax_k p_k / λ_k` when `p_{k*} > λ_{k*}` and left unlabeled
//! (the zero vector) otherwise. That rule is the exact minimizer of the
//! per-sample objective `-Σ_k ŷ_k (ln p_k - ln λ_k)` over the one-hot
//! vectors and zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, PROB_FLOOR};

/// Upper cap on thresholds of classes that have predictions.
pub const LAMBDA_CAP: f64 = 0.999_999;

/// Per-class confidence thresholds, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector(Vec<f64>);

impl LambdaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v <= 0.0 || *v > 1.0) {
            return Err(Error::contract("lambdas must lie in (0, 1]"));
        }
        Ok(LambdaVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A label vector in the simplex, or the zero vector when not selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub vector: Vec<f64>,
    pub selected: bool,
}

impl PseudoLabel {
    pub fn unselected(classes: usize) -> Self {
        PseudoLabel { vector: vec![0.0; classes], selected: false }
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut vector = vec![0.0; classes];
        vector[class] = 1.0;
        PseudoLabel { vector, selected: true }
    }

    /// `ŷ ∈ Δ^{K-1} ∪ {0}` with `selected` agreeing with the vector.
    pub fn is_feasible(&self) -> bool {
        let mass: f64 = self.vector.iter().sum();
        let nonneg = self.vector.iter().all(|v| *v >= 0.0);
        if self.selected {
            nonneg && (mass - 1.0).abs() <= 1e-9
        } else {
            self.vector.iter().all(|v| *v == 0.0)
        }
    }
}

/// Pseudo-labels for every target sample in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
    pub round: usize,
}

impl PseudoLabelSet {
    pub fn unselected(n: usize, classes: usize, round: usize) -> Self {
        PseudoLabelSet { labels: vec![PseudoLabel::unselected(classes); n], round }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.labels.iter().filter(|l| l.selected).count()
    }

    pub fn selection_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.labels.len() as f64
        }
    }
}

/// Thresholds from target predictions.
///
/// For class `k`, the confidences `p_k` of samples whose argmax is `k` are
/// sorted descending and `λ_k` is the entry at index `⌊p·(count-1)⌋`,
/// capped at [`LAMBDA_CAP`]. Classes nobody predicts get `λ_k = 1`.
pub fn compute_lambdas<P: AsRef<[f64]>>(probs: &[P], portion: f64) -> Result<LambdaVector> {
    if probs.is_empty() {
        return Err(Error::config("cannot compute thresholds from an empty target set"));
    }
    if !(portion > 0.0 && portion <= 1.0) {
        return Err(Error::config(format!("portion {portion} outside (0, 1]")));
    }
    let classes = probs[0].as_ref().len();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for p in probs {
        let p = p.as_ref();
        if p.len() != classes {
            return Err(Error::config("probability vectors differ in length"));
        }
        let k = argmax(p);
        buckets[k].push(p[k]);
    }
    let values = buckets
        .into_iter()
        .map(|mut conf| {
            if conf.is_empty() {
                return 1.0;
            }
            conf.sort_by(|a, b| b.total_cmp(a));
            let idx = ((portion * (conf.len() - 1) as f64).floor() as usize).min(conf.len() - 1);
            conf[idx].min(LAMBDA_CAP)
        })
        .collect();
    LambdaVector::new(values)
}

/// Selected class under the class-balanced rule, if any.
pub fn balanced_choice(prob: &[f64], lambdas: &LambdaVector) -> Option<usize> {
    let ratios: Vec<f64> = prob.iter().zip(lambdas.values()).map(|(p, l)| p / l).collect();
    let k = argmax(&ratios);
    (prob[k] > lambdas.values()[k]).then_some(k)
}

/// One-hot label at the class-balanced argmax, or zero when not confident.
pub fn hard_pseudo_label(prob: &[f64], lambdas: &LambdaVector) -> PseudoLabel {
    match balanced_choice(prob, lambdas) {
        Some(k) => PseudoLabel::one_hot(k, prob.len()),
        None => PseudoLabel::unselected(prob.len()),
    }
}

/// The prediction itself, kept only when the sample passes the selection test.
pub fn soft_pseudo_label(prob: &[f64], lambdas: &LambdaVector) -> PseudoLabel {
    match balanced_choice(prob, lambdas) {
        Some(_) => PseudoLabel { vector: prob.to_vec(), selected: true },
        None => PseudoLabel::unselected(prob.len()),
    }
}

/// Spreads `epsilon` evenly over the non-winning classes of a one-hot label.
pub fn smooth_label(onehot: &PseudoLabel, epsilon: f64, classes: usize) -> Result<PseudoLabel> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let ones = onehot.vector.iter().filter(|v| **v == 1.0).count();
    let zeros = onehot.vector.iter().filter(|v| **v == 0.0).count();
    if !onehot.selected || onehot.vector.len() != classes || ones != 1 || ones + zeros != classes {
        return Err(Error::contract("smooth_label expects a selected one-hot label"));
    }
    if epsilon == 0.0 || classes == 1 {
        return Ok(onehot.clone());
    }
    let spread = epsilon / (classes - 1) as f64;
    let vector = onehot.vector.iter().map(|v| if *v == 1.0 { 1.0 - epsilon } else { spread }).collect();
    Ok(PseudoLabel { vector, selected: true })
}

/// Per-sample pseudo-label objective `-Σ_k ŷ_k (ln p_k - ln λ_k)`,
/// probabilities floored at [`PROB_FLOOR`].
pub fn step1_sample_objective(label: &[f64], prob: &[f64], lambdas: &LambdaVector) -> f64 {
    label
        .iter()
        .zip(prob)
        .zip(lambdas.values())
        .filter(|((y, _), _)| **y != 0.0)
        .map(|((y, p), l)| -y * (p.max(PROB_FLOOR).ln() - l.ln()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lam(v: &[f64]) -> LambdaVector {
        LambdaVector::new(v.to_vec()).unwrap()
    }

    // Sort-and-index oracle written independently of compute_lambdas.
    fn lambda_oracle(conf: &[f64], portion: f64) -> f64 {
        let mut c = conf.to_vec();
        c.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let idx = (portion * (c.len() as f64 - 1.0)).floor() as usize;
        c[idx]
    }

    #[test]
    fn lambda_at_portion_index() {
        // four samples predicted as class 0 with confidences 0.9, 0.8, 0.6, 0.4
        let probs = vec![
            vec![0.6, 0.2, 0.2],
            vec![0.9, 0.05, 0.05],
            vec![0.4, 0.3, 0.3],
            vec![0.8, 0.1, 0.1],
        ];
        let l = compute_lambdas(&probs, 0.5).unwrap();
        assert_eq!(l.values()[0], 0.8);
        assert_eq!(l.values()[0], lambda_oracle(&[0.9, 0.8, 0.6, 0.4], 0.5));
        // nobody predicts classes 1 or 2
        assert_eq!(&l.values()[1..], &[1.0, 1.0]);
    }

    #[test]
    fn full_portion_takes_minimum() {
        let probs = vec![vec![0.7, 0.3], vec![0.55, 0.45], vec![0.95, 0.05], vec![0.2, 0.8]];
        let l = compute_lambdas(&probs, 1.0).unwrap();
        assert_eq!(l.values(), &[0.55, 0.8]);
    }

    #[test]
    fn saturated_class_is_capped() {
        let probs = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let l = compute_lambdas(&probs, 0.2).unwrap();
        assert_eq!(l.values()[0], LAMBDA_CAP);
        assert!(hard_pseudo_label(&probs[0], &l).selected);
    }

    #[test]
    fn lambda_errors() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(compute_lambdas(&empty, 0.5), Err(Error::Config(_))));
        assert!(compute_lambdas(&[vec![0.5, 0.5]], 0.0).is_err());
        assert!(compute_lambdas(&[vec![0.5, 0.5]], 1.5).is_err());
    }

    #[test]
    fn hard_label_examples() {
        let half = lam(&[0.5, 0.5, 0.5]);
        let l = hard_pseudo_label(&[0.3, 0.6, 0.2], &half);
        assert_eq!(l, PseudoLabel { vector: vec![0.0, 1.0, 0.0], selected: true });
        let l = hard_pseudo_label(&[0.4, 0.35, 0.25], &half);
        assert_eq!(l, PseudoLabel::unselected(3));
        let l = hard_pseudo_label(&[0.6, 0.4], &lam(&[0.9, 0.3]));
        assert_eq!(l.vector, vec![0.0, 1.0]);
    }

    #[test]
    fn hard_label_ties_go_to_lowest_index() {
        let l = hard_pseudo_label(&[0.5, 0.5], &lam(&[0.4, 0.4]));
        assert_eq!(l.vector, vec![1.0, 0.0]);
    }

    #[test]
    fn soft_label_examples() {
        let half = lam(&[0.5, 0.5, 0.5]);
        let l = soft_pseudo_label(&[0.3, 0.6, 0.2], &half);
        assert_eq!(l, PseudoLabel { vector: vec![0.3, 0.6, 0.2], selected: true });
        assert_eq!(soft_pseudo_label(&[0.4, 0.35, 0.25], &half), PseudoLabel::unselected(3));
        assert_eq!(soft_pseudo_label(&[1.0, 0.0, 0.0], &half).vector, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn smoothing_examples() {
        let s = smooth_label(&PseudoLabel::one_hot(1, 3), 0.1, 3).unwrap();
        assert_eq!(s.vector, vec![0.05, 0.9, 0.05]);
        let s = smooth_label(&PseudoLabel::one_hot(2, 4), 0.0, 4).unwrap();
        assert_eq!(s, PseudoLabel::one_hot(2, 4));
        let s = smooth_label(&PseudoLabel::one_hot(0, 2), 0.2, 2).unwrap();
        assert_eq!(s.vector, vec![0.8, 0.2]);
    }

    #[test]
    fn smoothing_rejects_non_one_hot() {
        let soft = PseudoLabel { vector: vec![0.3, 0.7], selected: true };
        assert!(matches!(smooth_label(&soft, 0.1, 2), Err(Error::Contract(_))));
        assert!(smooth_label(&PseudoLabel::unselected(2), 0.1, 2).is_err());
        assert!(smooth_label(&PseudoLabel::one_hot(0, 2), 1.0, 2).is_err());
    }

    #[test]
    fn objective_of_selected_label() {
        let half = lam(&[0.5, 0.5, 0.5]);
        let v = step1_sample_objective(&[0.0, 1.0, 0.0], &[0.25, 0.5, 0.25], &half);
        assert_relative_eq!(v, 0.0, epsilon = 1e-15);
        assert_eq!(step1_sample_objective(&[0.0; 3], &[0.25, 0.5, 0.25], &half), 0.0);
    }
}
