//! Evaluation: per-class accuracy, label-marginal KL divergence and energy
//! summaries. Natural logarithms throughout.

use serde::{Deserialize, Serialize};

use crate::datagen::DomainDataset;
use crate::energy::{energy, EnergyValue};
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax, ModelParams, PROB_FLOOR};

/// Which way round the label-marginal KL divergence is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(true ‖ predicted)`.
    #[default]
    TrueToPredicted,
    /// `KL(predicted ‖ true)`.
    PredictedToTrue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per class; classes absent from the truth report 0 and are
    /// left out of `mean_acc`.
    pub per_class_acc: Vec<f64>,
    pub mean_acc: f64,
    pub marginal_kl: f64,
    pub mean_energy: f64,
    pub min_energy: f64,
    pub max_energy: f64,
}

/// Per-class accuracy and its mean over classes present in `truth`.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<(Vec<f64>, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.iter().chain(truth).any(|&l| l >= classes) {
        return Err(Error::contract(format!("label outside 0..{classes}")));
    }
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let acc: Vec<f64> = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let present: Vec<f64> = acc.iter().zip(&count).filter(|(_, &n)| n > 0).map(|(a, _)| *a).collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok((acc, mean))
}

/// `Σ_k q_k ln(q_k / p̂_k)` with `q` the true marginal and `p̂` the predicted
/// one floored at `1e-12`.
pub fn marginal_kl(predicted: &[f64], truth: &[f64]) -> f64 {
    kl(truth, predicted)
}

/// Marginal KL in the requested direction. The second argument of the
/// divergence is always floored.
pub fn marginal_kl_directed(predicted: &[f64], truth: &[f64], direction: KlDirection) -> f64 {
    match direction {
        KlDirection::TrueToPredicted => kl(truth, predicted),
        KlDirection::PredictedToTrue => kl(predicted, truth),
    }
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    let v: f64 = q
        .iter()
        .zip(p)
        .filter(|(qk, _)| **qk > 0.0)
        .map(|(qk, pk)| qk * (qk / pk.max(PROB_FLOOR)).ln())
        .sum();
    v.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn energy_stats(energies: &[EnergyValue]) -> Result<EnergyStats> {
    if energies.is_empty() {
        return Err(Error::contract("energy_stats of an empty sequence"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for e in energies {
        min = min.min(e.0);
        max = max.max(e.0);
        sum += e.0;
    }
    Ok(EnergyStats { mean: sum / energies.len() as f64, min, max })
}

/// Evaluates `params` on `ds`, using hidden ground truth for target data.
/// Samples without any label are left out of accuracy and the true marginal.
pub fn evaluate(params: &ModelParams, ds: &DomainDataset, direction: KlDirection) -> Result<EvalReport> {
    let classes = ds.classes();
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let mut pred_marginal = vec![0.0; classes];
    let mut energies = Vec::with_capacity(ds.len());
    for (x, label) in ds.features().iter().zip(ds.evaluation_labels()) {
        let z = params.forward(x)?;
        energies.push(energy(&z));
        if let Some(t) = label {
            let p = softmax(&z);
            for (m, pk) in pred_marginal.iter_mut().zip(p.iter()) {
                *m += pk;
            }
            preds.push(argmax(&z));
            truth.push(*t);
        }
    }
    let (per_class_acc, mean_acc) = per_class_accuracy(&preds, &truth, classes)?;
    let marginal_kl = if truth.is_empty() {
        0.0
    } else {
        let n = truth.len() as f64;
        pred_marginal.iter_mut().for_each(|m| *m /= n);
        let mut true_marginal = vec![0.0; classes];
        for &t in &truth {
            true_marginal[t] += 1.0 / n;
        }
        marginal_kl_directed(&pred_marginal, &true_marginal, direction)
    };
    let stats = if energies.is_empty() {
        EnergyStats { mean: 0.0, min: 0.0, max: 0.0 }
    } else {
        energy_stats(&energies)?
    };
    Ok(EvalReport {
        per_class_acc,
        mean_acc,
        marginal_kl,
        mean_energy: stats.mean,
        min_energy: stats.min,
        max_energy: stats.max,
    })
}
