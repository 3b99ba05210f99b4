//! Energy quantities of a classifier viewed as an energy-based model.
//!
//! The energy of an input is `E(x) = -logsumexp_k f(x)[k]`. Unlike the
//! softmax, it moves with a constant shift of the logits:
//! `E(z + c) = E(z) - c`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{logsumexp, softmax, ModelParams};
use crate::pseudolabel::LambdaVector;

/// `E_w(x)` for one input.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EnergyValue(pub f64);

impl EnergyValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn energy(z: &[f64]) -> EnergyValue {
    EnergyValue(-logsumexp(z))
}

/// `∂E/∂z = -softmax(z)`.
pub fn energy_grad_logits(z: &[f64]) -> Vec<f64> {
    softmax(z).iter().map(|p| -p).collect()
}

/// `α Σ_t E(x_t)`, the energy contribution to the minimized objective.
pub fn rebm_target_term(energies: &[EnergyValue], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    alpha * energies.iter().map(|e| e.0).sum::<f64>()
}

/// Label-weighted energy loss
/// `-log Σ_k ŷ_k exp(z_k) + Σ_k ŷ_k log λ_k`.
///
/// `soft` is a frozen previous-round prediction; the `λ` term carries no
/// gradient. Fails on a zero label vector.
pub fn ebm_loss(z: &[f64], soft: &[f64], lambdas: &LambdaVector) -> Result<f64> {
    let lse = weighted_logsumexp(z, soft)?;
    let offset: f64 = soft
        .iter()
        .zip(lambdas.values())
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, l)| y * l.ln())
        .sum();
    Ok(-lse + offset)
}

/// `∂/∂z` of [`ebm_loss`]: `-ŷ_k e^{z_k} / Σ_j ŷ_j e^{z_j}`.
pub fn ebm_loss_grad_logits(z: &[f64], soft: &[f64]) -> Result<Vec<f64>> {
    let m = support_max(z, soft)?;
    let weights: Vec<f64> = z
        .iter()
        .zip(soft)
        .map(|(zk, yk)| if *yk > 0.0 { yk * (zk - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| -w / total).collect())
}

fn support_max(z: &[f64], soft: &[f64]) -> Result<f64> {
    if z.len() != soft.len() {
        return Err(Error::contract("soft label and logits differ in length"));
    }
    let m = z
        .iter()
        .zip(soft)
        .filter(|(_, y)| **y > 0.0)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::contract("energy loss needs a nonzero soft label"));
    }
    Ok(m)
}

/// `log Σ_k ŷ_k exp(z_k)`, shifted by the largest logit on the label support.
fn weighted_logsumexp(z: &[f64], soft: &[f64]) -> Result<f64> {
    let m = support_max(z, soft)?;
    let s: f64 = z
        .iter()
        .zip(soft)
        .filter(|(_, y)| **y > 0.0)
        .map(|(zk, yk)| yk * (zk - m).exp())
        .sum();
    Ok(m + s.ln())
}

/// Rescales a soft label to unit mass when it is off by more than `1e-6`.
/// Returns the label and whether it was rescaled.
pub fn normalize_soft_label(soft: &[f64]) -> (Vec<f64>, bool) {
    let mass: f64 = soft.iter().sum();
    if mass > 0.0 && (mass - 1.0).abs() > 1e-6 {
        (soft.iter().map(|v| v / mass).collect(), true)
    } else {
        (soft.to_vec(), false)
    }
}

/// Annealing weight at epoch `n`: `10 / (1 + n²)` up to `n = 5`, then zero.
pub fn anneal_beta(n: u32) -> f64 {
    if n <= 5 {
        10.0 / (1.0 + f64::from(n * n))
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub epoch: u32,
    pub beta: f64,
}

impl AnnealState {
    pub fn at(epoch: u32) -> Self {
        AnnealState { epoch, beta: anneal_beta(epoch) }
    }
}

/// `(L + β R) / (1 + β)`.
pub fn annealed_target_loss(l_ebm: f64, r_ebm: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return l_ebm;
    }
    (l_ebm + beta * r_ebm) / (1.0 + beta)
}

/// A scalar energy over input space with an input gradient.
pub trait EnergySurface {
    fn energy_at(&self, x: &[f64]) -> Result<f64>;
    fn energy_grad_input(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl EnergySurface for ModelParams {
    fn energy_at(&self, x: &[f64]) -> Result<f64> {
        Ok(energy(&self.forward(x)?).0)
    }

    fn energy_grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.forward(x)?;
        self.input_gradient(x, &energy_grad_logits(&z))
    }
}

/// Langevin chain settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
}

/// Final state of a Langevin chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SgldSample {
    pub state: Vec<f64>,
    /// The chain hit a non-finite state and stopped at the last finite one.
    pub aborted: bool,
}

/// Runs `x ← x - (step_size / 2) ∇E(x) + noise_scale · ξ`, `ξ ~ N(0, I)`.
pub fn sgld_negative_sample<S, R>(
    surface: &S,
    x0: &[f64],
    cfg: SgldConfig,
    rng: &mut R,
) -> SgldSample
where
    S: EnergySurface + ?Sized,
    R: Rng + ?Sized,
{
    let mut x = x0.to_vec();
    for step in 0..cfg.steps {
        let grad = match surface.energy_grad_input(&x) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("sgld chain stopped at step {step}: {e}");
                return SgldSample { state: x, aborted: true };
            }
        };
        let next: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(xi, gi)| {
                let noise: f64 = if cfg.noise_scale == 0.0 { 0.0 } else { rng.sample(StandardNormal) };
                xi - 0.5 * cfg.step_size * gi + cfg.noise_scale * noise
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            log::warn!("sgld chain produced a non-finite state at step {step}");
            return SgldSample { state: x, aborted: true };
        }
        x = next;
    }
    SgldSample { state: x, aborted: false }
}
