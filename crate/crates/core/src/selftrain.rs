//! Alternating self-training on a labeled source and an unlabeled target set.
//!
//! A round fixes the network and picks pseudo-labels (step 1), then fixes
//! the pseudo-labels and runs gradient descent on the network (step 2). The
//! jointly minimized objective is
//!
//! ```text
//! Σ_s CE(y_s, p(x_s)) + Σ_t Σ_k ŷ_tk (-ln p_k(x_t) + ln λ_k) + α Σ_t E(x_t)
//! ```
//!
//! Five modes share this skeleton:
//!
//! | mode      | target labels        | label term              | energy term |
//! |-----------|----------------------|-------------------------|-------------|
//! | `cbst`    | one-hot              | λ-offset cross-entropy  | no          |
//! | `crst-ls` | smoothed one-hot     | λ-offset cross-entropy  | no          |
//! | `rebm`    | one-hot              | λ-offset cross-entropy  | yes         |
//! | `lebm`    | raw softmax          | label-weighted energy   | yes         |
//! | `anneal`  | raw softmax          | β-blend of the two      | yes         |

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::DomainDataset;
use crate::energy::{
    anneal_beta, ebm_loss, ebm_loss_grad_logits, energy, energy_grad_logits, normalize_soft_label,
    sgld_negative_sample, SgldConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, KlDirection};
use crate::nn::{log_softmax, sgd_step, softmax, softmax_cross_entropy, GradientSet, ModelParams, MomentumState, SgdConfig};
use crate::pseudolabel::{
    compute_lambdas, hard_pseudo_label, smooth_label, soft_pseudo_label, LambdaVector, PseudoLabel,
    PseudoLabelSet,
};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "cbst")]
    Cbst,
    #[serde(rename = "crst-ls")]
    CrstLs,
    #[serde(rename = "rebm")]
    Rebm,
    #[serde(rename = "lebm")]
    Lebm,
    #[serde(rename = "anneal")]
    Anneal,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Cbst, Mode::CrstLs, Mode::Rebm, Mode::Lebm, Mode::Anneal];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cbst => "cbst",
            Mode::CrstLs => "crst-ls",
            Mode::Rebm => "rebm",
            Mode::Lebm => "lebm",
            Mode::Anneal => "anneal",
        }
    }

    /// Whether `α Σ E(x_t)` is part of the objective.
    pub fn uses_energy(self) -> bool {
        matches!(self, Mode::Rebm | Mode::Lebm | Mode::Anneal)
    }

    /// Whether step 1 keeps the raw prediction instead of a one-hot label.
    pub fn soft_labels(self) -> bool {
        matches!(self, Mode::Lebm | Mode::Anneal)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?} (expected cbst, crst-ls, rebm, lebm or anneal)")))
    }
}

/// When thresholds are recomputed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// Every round, from the current predictions.
    #[default]
    Recompute,
    /// Once in round 0, then kept.
    Freeze,
}

/// How the parameter gradient of the energy terms is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyEstimator {
    /// Backpropagate the objective exactly.
    #[default]
    Direct,
    /// Contrastive divergence: every energy pushed down at a target sample
    /// `x_t` is pushed up by the same weight at `x̃_t`, the end of a short
    /// Langevin chain started at `x_t`. Covers `α E(x_t)` and the
    /// label-weighted energy of lebm and anneal.
    Contrastive,
}

/// Portion of each class kept by the thresholds, as a function of the round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortionSchedule {
    pub start: f64,
    pub step: f64,
    pub max: f64,
}

impl PortionSchedule {
    pub fn fixed(p: f64) -> Self {
        PortionSchedule { start: p, step: 0.0, max: p }
    }

    pub fn at(&self, round: usize) -> f64 {
        (self.start + self.step * round as f64).min(self.max)
    }
}

impl Default for PortionSchedule {
    fn default() -> Self {
        PortionSchedule { start: 0.2, step: 0.05, max: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub epsilon: f64,
    pub portion: PortionSchedule,
    pub sgd: SgdConfig,
    /// Passes over the data per round in step 2.
    pub epochs: usize,
    /// Samples per gradient step; 0 uses all samples in one step.
    pub batch_size: usize,
    pub lambda_policy: LambdaPolicy,
    /// Keep the energy term in step 2. `false` retrains on the two
    /// cross-entropy sums only.
    pub step2_energy: bool,
    pub estimator: EnergyEstimator,
    pub sgld: SgldConfig,
    pub kl_direction: KlDirection,
    /// Step 2 aborts when the objective exceeds this value.
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Rebm,
            alpha: 1.0,
            epsilon: 0.1,
            portion: PortionSchedule::default(),
            sgd: SgdConfig { lr: 1e-3, momentum: 0.9, weight_decay: 5e-4 },
            epochs: 20,
            batch_size: 32,
            lambda_policy: LambdaPolicy::Recompute,
            step2_energy: true,
            estimator: EnergyEstimator::Contrastive,
            sgld: SgldConfig { steps: 10, step_size: 0.01, noise_scale: 0.005 },
            kl_direction: KlDirection::TrueToPredicted,
            divergence_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.portion;
        if !(p.start > 0.0 && p.start <= 1.0 && p.max > 0.0 && p.max <= 1.0 && p.step >= 0.0) {
            return Err(Error::config("portion schedule must stay inside (0, 1]"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon must lie in [0, 1)"));
        }
        if !(self.sgd.lr >= 0.0 && self.sgd.momentum >= 0.0 && self.sgd.weight_decay >= 0.0) {
            return Err(Error::config("lr, momentum and weight decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs per round must be at least 1"));
        }
        Ok(())
    }
}

/// Everything that carries over from one round to the next.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub round: usize,
    pub config: TrainConfig,
    pub seed: u64,
    /// Thresholds of the last round.
    pub lambdas: Option<LambdaVector>,
    /// Pseudo-labels of the last round.
    pub labels: Option<PseudoLabelSet>,
    sgld_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            params,
            round: 0,
            config,
            seed,
            lambdas: None,
            labels: None,
            sgld_rng: stream(seed, Stream::Sgld),
            shuffle_rng: stream(seed, Stream::Shuffle),
        })
    }

    pub fn portion(&self) -> f64 {
        self.config.portion.at(self.round)
    }

    /// Annealing weight for the current round; zero outside anneal mode.
    pub fn beta(&self) -> f64 {
        if self.config.mode == Mode::Anneal {
            anneal_beta(u32::try_from(self.round).unwrap_or(u32::MAX))
        } else {
            0.0
        }
    }

    fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec { mode: self.config.mode, alpha: self.config.alpha, beta: self.beta(), include_energy: true }
    }
}

/// Which objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub alpha: f64,
    /// Annealing weight, used only in anneal mode.
    pub beta: f64,
    /// Whether the energy term enters (subject to the mode using it).
    pub include_energy: bool,
}

impl ObjectiveSpec {
    pub fn new(mode: Mode, alpha: f64) -> Self {
        ObjectiveSpec { mode, alpha, beta: 0.0, include_energy: true }
    }

    fn energy_weight(&self) -> f64 {
        if self.include_energy && self.mode.uses_energy() {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Objective value and its decomposition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub source_ce: f64,
    pub target_pseudo: f64,
    pub energy_term: f64,
    pub total: f64,
}

/// Label term of one target sample and its logit gradient.
fn target_label_term(z: &[f64], label: &PseudoLabel, lambdas: &LambdaVector, spec: &ObjectiveSpec) -> Result<(f64, Vec<f64>)> {
    if !label.selected {
        return Ok((0.0, vec![0.0; z.len()]));
    }
    let offset = |y: &[f64]| -> f64 {
        y.iter().zip(lambdas.values()).filter(|(v, _)| **v != 0.0).map(|(v, l)| v * l.ln()).sum()
    };
    match spec.mode {
        Mode::Cbst | Mode::CrstLs | Mode::Rebm => {
            let (ce, g) = softmax_cross_entropy(z, &label.vector);
            Ok((ce + offset(&label.vector), g))
        }
        Mode::Lebm => {
            let (y, _) = normalize_soft_label(&label.vector);
            Ok((ebm_loss(z, &y, lambdas)?, ebm_loss_grad_logits(z, &y)?))
        }
        Mode::Anneal => {
            let (y, _) = normalize_soft_label(&label.vector);
            let l = ebm_loss(z, &y, lambdas)?;
            let gl = ebm_loss_grad_logits(z, &y)?;
            let (ce, gr) = softmax_cross_entropy(z, &y);
            let r = ce + offset(&y);
            let b = spec.beta;
            let value = crate::energy::annealed_target_loss(l, r, b);
            let grad = gl.iter().zip(&gr).map(|(a, c)| (a + b * c) / (1.0 + b)).collect();
            Ok((value, grad))
        }
    }
}

fn check_alignment(target: &[Vec<f64>], labels: &PseudoLabelSet) -> Result<()> {
    if target.len() != labels.len() {
        return Err(Error::contract(format!("{} target samples but {} pseudo-labels", target.len(), labels.len())));
    }
    Ok(())
}

/// Evaluates the joint objective with its decomposition.
pub fn total_objective(
    params: &ModelParams,
    source: &DomainDataset,
    target: &[Vec<f64>],
    labels: &PseudoLabelSet,
    lambdas: &LambdaVector,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveTerms> {
    check_alignment(target, labels)?;
    let mut terms = ObjectiveTerms::default();
    for (x, y) in source.features().iter().zip(source.labels()) {
        if let Some(y) = y {
            let lp = log_softmax(&params.forward(x)?);
            terms.source_ce -= lp[*y];
        }
    }
    let alpha = spec.energy_weight();
    let mut energy_sum = 0.0;
    for (x, label) in target.iter().zip(&labels.labels) {
        let z = params.forward(x)?;
        terms.target_pseudo += target_label_term(&z, label, lambdas, spec)?.0;
        if alpha != 0.0 {
            energy_sum += energy(&z).0;
        }
    }
    if alpha != 0.0 {
        terms.energy_term = alpha * energy_sum;
    }
    terms.total = terms.source_ce + terms.target_pseudo + terms.energy_term;
    Ok(terms)
}

/// Value and exact parameter gradient of the objective in `spec`.
pub fn objective_gradient(
    params: &ModelParams,
    source: &DomainDataset,
    target: &[Vec<f64>],
    labels: &PseudoLabelSet,
    lambdas: &LambdaVector,
    spec: &ObjectiveSpec,
) -> Result<(f64, GradientSet)> {
    check_alignment(target, labels)?;
    let all: Vec<usize> = (0..source.len() + target.len()).collect();
    gradient_on(params, source, target, labels, lambdas, spec, &all)
}

/// Objective restricted to `indices` (source samples first, then target)
/// and its gradient.
fn gradient_on(
    params: &ModelParams,
    source: &DomainDataset,
    target: &[Vec<f64>],
    labels: &PseudoLabelSet,
    lambdas: &LambdaVector,
    spec: &ObjectiveSpec,
    indices: &[usize],
) -> Result<(f64, GradientSet)> {
    let n_source = source.len();
    let batch: Vec<&[f64]> = indices
        .iter()
        .map(|&i| if i < n_source { source.features()[i].as_slice() } else { target[i - n_source].as_slice() })
        .collect();
    let classes = params.num_classes();
    let alpha = spec.energy_weight();
    // backward's per-sample callback is infallible; contract errors are
    // recorded here and surfaced afterwards
    let failure = std::cell::RefCell::new(None);
    let loss = |j: usize, z: &[f64]| -> (f64, Vec<f64>) {
        let i = indices[j];
        if i < n_source {
            return match source.labels()[i] {
                Some(y) => {
                    let mut onehot = vec![0.0; classes];
                    onehot[y] = 1.0;
                    softmax_cross_entropy(z, &onehot)
                }
                None => (0.0, vec![0.0; classes]),
            };
        }
        let label = &labels.labels[i - n_source];
        let (mut value, mut grad) = match target_label_term(z, label, lambdas, spec) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                (0.0, vec![0.0; classes])
            }
        };
        if alpha != 0.0 {
            value += alpha * energy(z).0;
            for (g, e) in grad.iter_mut().zip(energy_grad_logits(z)) {
                *g += alpha * e;
            }
        }
        (value, grad)
    };
    let out = params.backward(&batch, &loss)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(out)
}

/// Weight of the energy pull-up at a Langevin negative started from a
/// target sample: `α` for the regularizer plus the weight of the
/// label-weighted energy in lebm and anneal.
fn contrastive_weight(label: &PseudoLabel, spec: &ObjectiveSpec) -> f64 {
    let label_energy = match spec.mode {
        Mode::Lebm if label.selected => 1.0,
        Mode::Anneal if label.selected => 1.0 / (1.0 + spec.beta),
        _ => 0.0,
    };
    spec.energy_weight() + label_energy
}

/// Gradient of `-Σ_t c_t E(x̃_t)` over Langevin negatives `x̃_t` started at
/// the given target points.
fn contrastive_correction(
    params: &ModelParams,
    positives: &[(&[f64], f64)],
    sgld: SgldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradientSet> {
    let negatives: Vec<Vec<f64>> =
        positives.iter().map(|(x, _)| sgld_negative_sample(params, x, sgld, rng).state).collect();
    let (_, grads) = params.backward(&negatives, &|i: usize, z: &[f64]| {
        let c = positives[i].1;
        (0.0, softmax(z).iter().map(|p| c * p).collect::<Vec<f64>>())
    })?;
    Ok(grads)
}

/// Pseudo-labels for every target sample from the current network.
///
/// Thresholds are recomputed from the predictions (or reused under
/// [`LambdaPolicy::Freeze`]); labels are hard, smoothed or soft depending on
/// the mode.
pub fn step1_generate(state: &TrainState, target: &[Vec<f64>]) -> Result<(PseudoLabelSet, LambdaVector)> {
    let probs = target
        .iter()
        .map(|x| Ok(softmax(&state.params.forward(x)?).into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = match (&state.lambdas, state.config.lambda_policy) {
        (Some(l), LambdaPolicy::Freeze) => l.clone(),
        _ => compute_lambdas(&probs, state.portion())?,
    };
    let classes = state.params.num_classes();
    let mode = state.config.mode;
    let labels = probs
        .iter()
        .map(|p| match mode {
            Mode::Cbst | Mode::Rebm => Ok(hard_pseudo_label(p, &lambdas)),
            Mode::CrstLs => {
                let hard = hard_pseudo_label(p, &lambdas);
                if hard.selected {
                    smooth_label(&hard, state.config.epsilon, classes)
                } else {
                    Ok(hard)
                }
            }
            Mode::Lebm | Mode::Anneal => Ok(soft_pseudo_label(p, &lambdas)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PseudoLabelSet { labels, round: state.round }, lambdas))
}

#[derive(Debug, Clone)]
pub struct Step2Outcome {
    pub params: ModelParams,
    /// Minimized objective after each epoch.
    pub trace: Vec<f64>,
}

/// Minibatch gradient descent on the network with pseudo-labels held fixed.
///
/// An epoch is one pass over the source and target samples in a shuffled
/// order, in batches of `batch_size`. Each step follows the batch mean of
/// the per-sample objective; the trace records the full (summed) objective
/// after each epoch.
pub fn step2_retrain(
    state: &mut TrainState,
    source: &DomainDataset,
    target: &[Vec<f64>],
    labels: &PseudoLabelSet,
    lambdas: &LambdaVector,
) -> Result<Step2Outcome> {
    check_alignment(target, labels)?;
    let cfg = state.config.clone();
    let spec = ObjectiveSpec { include_energy: cfg.step2_energy, ..state.objective_spec() };
    let contrastive = cfg.estimator == EnergyEstimator::Contrastive;
    let n_source = source.len();
    let mut order: Vec<usize> = (0..n_source + target.len()).collect();
    let batch_size = if cfg.batch_size == 0 { order.len().max(1) } else { cfg.batch_size };
    let mut params = state.params.clone();
    let mut momentum = MomentumState::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.batch_size != 0 {
            order.shuffle(&mut state.shuffle_rng);
        }
        for batch in order.chunks(batch_size) {
            let (_, mut grads) = gradient_on(&params, source, target, labels, lambdas, &spec, batch)
                .map_err(|e| diverged(e, epoch))?;
            if contrastive {
                let positives: Vec<(&[f64], f64)> = batch
                    .iter()
                    .filter(|&&i| i >= n_source)
                    .map(|&i| (target[i - n_source].as_slice(), contrastive_weight(&labels.labels[i - n_source], &spec)))
                    .filter(|(_, c)| *c != 0.0)
                    .collect();
                if !positives.is_empty() {
                    let neg = contrastive_correction(&params, &positives, cfg.sgld, &mut state.sgld_rng)
                        .map_err(|e| diverged(e, epoch))?;
                    grads.add_scaled(&neg, 1.0);
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            params = sgd_step(&params, &grads, cfg.sgd, &mut momentum);
        }
        let value = total_objective(&params, source, target, labels, lambdas, &spec)
            .map_err(|e| diverged(e, epoch))?
            .total;
        if !value.is_finite() || value > cfg.divergence_limit {
            return Err(Error::Diverged { epoch, loss: value });
        }
        trace.push(value);
    }
    Ok(Step2Outcome { params, trace })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Supervised training on the source set alone; returns the trained
/// parameters and the mean cross-entropy after each epoch.
pub fn pretrain_source(
    params: &ModelParams,
    source: &DomainDataset,
    sgd: SgdConfig,
    epochs: usize,
) -> Result<(ModelParams, Vec<f64>)> {
    let empty = PseudoLabelSet::unselected(0, params.num_classes(), 0);
    let lambdas = LambdaVector::new(vec![1.0; params.num_classes()])?;
    let spec = ObjectiveSpec::new(Mode::Cbst, 0.0);
    let scale = 1.0 / source.len().max(1) as f64;
    let mut params = params.clone();
    let mut momentum = MomentumState::new();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (value, mut grads) = objective_gradient(&params, source, &[], &empty, &lambdas, &spec)?;
        if epoch > 0 {
            trace.push(value * scale);
        }
        grads.scale(scale);
        params = sgd_step(&params, &grads, sgd, &mut momentum);
    }
    if epochs > 0 {
        let (value, _) = objective_gradient(&params, source, &[], &empty, &lambdas, &spec)?;
        trace.push(value * scale);
    }
    Ok((params, trace))
}

/// Record of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub portion: f64,
    pub beta: f64,
    pub lambdas: Vec<f64>,
    /// Objective at the new network with the previous round's labels.
    pub step1_loss_before: f64,
    /// Objective at the new network with this round's labels.
    pub step1_loss_after: f64,
    pub step1_terms: ObjectiveTerms,
    pub step2_loss_trace: Vec<f64>,
    /// Objective after step 2, with this round's labels.
    pub step2_final_loss: f64,
    pub mean_target_energy: f64,
    pub selection_fraction: f64,
    /// Soft labels rescaled to unit mass before use.
    pub renormalized_labels: usize,
    /// `Σ_t Σ_k ŷ_tk ln λ_k` for this round's labels.
    pub lower_bound: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub marginal_kl: f64,
    pub step1_non_increasing: bool,
    pub lower_bound_holds: bool,
}

/// Performs step 1 then step 2 and advances the round counter.
pub fn run_round(
    state: TrainState,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(TrainState, RoundReport)> {
    let mut state = state;
    let target_x = target.features();
    let spec = state.objective_spec();
    let classes = state.params.num_classes();

    let (labels, lambdas) = step1_generate(&state, target_x)?;
    let previous = match &state.labels {
        Some(prev) if prev.len() == target_x.len() => prev.clone(),
        _ => PseudoLabelSet::unselected(target_x.len(), classes, state.round),
    };
    let before = total_objective(&state.params, source, target_x, &previous, &lambdas, &spec)?;
    let after = total_objective(&state.params, source, target_x, &labels, &lambdas, &spec)?;

    let step2 = step2_retrain(&mut state, source, target_x, &labels, &lambdas)?;
    let final_terms = total_objective(&step2.params, source, target_x, &labels, &lambdas, &spec)?;

    let lower_bound: f64 = labels
        .labels
        .iter()
        .filter(|l| l.selected)
        .map(|l| {
            l.vector.iter().zip(lambdas.values()).filter(|(y, _)| **y != 0.0).map(|(y, lam)| y * lam.ln()).sum::<f64>()
        })
        .sum();
    let renormalized_labels = if state.config.mode.soft_labels() {
        labels.labels.iter().filter(|l| l.selected && normalize_soft_label(&l.vector).1).count()
    } else {
        0
    };

    let source_eval = evaluate(&step2.params, source, state.config.kl_direction)?;
    let target_eval = evaluate(&step2.params, target, state.config.kl_direction)?;

    let mut recorded = vec![after.total, final_terms.total];
    if state.config.step2_energy {
        recorded.extend_from_slice(&step2.trace);
    }
    let lower_bound_holds = recorded.iter().all(|v| *v >= lower_bound);

    let report = RoundReport {
        round: state.round,
        portion: state.portion(),
        beta: spec.beta,
        lambdas: lambdas.values().to_vec(),
        step1_loss_before: before.total,
        step1_loss_after: after.total,
        step1_terms: after,
        step2_loss_trace: step2.trace,
        step2_final_loss: final_terms.total,
        mean_target_energy: target_eval.mean_energy,
        selection_fraction: labels.selection_fraction(),
        renormalized_labels,
        lower_bound,
        source_acc: source_eval.mean_acc,
        target_acc: target_eval.mean_acc,
        marginal_kl: target_eval.marginal_kl,
        step1_non_increasing: after.total <= before.total + 1e-9,
        lower_bound_holds,
    };

    state.params = step2.params;
    state.lambdas = Some(lambdas);
    state.labels = Some(labels);
    state.round += 1;
    Ok((state, report))
}

/// Value of the maximized objective (the negated minimized one) at one
/// phase of a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemPhase {
    pub rcml: f64,
}

/// One round read as classification EM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemRound {
    pub round: usize,
    /// Posteriors from the current network, previous labels.
    pub e_step: CemPhase,
    /// Labels reassigned by the thresholded argmax.
    pub c_step: CemPhase,
    /// Network updated by gradient ascent.
    pub m_step: CemPhase,
}

impl CemRound {
    pub fn c_step_improves(&self, slack: f64) -> bool {
        self.c_step.rcml >= self.e_step.rcml - slack
    }

    pub fn m_step_improves(&self, slack: f64) -> bool {
        self.m_step.rcml >= self.c_step.rcml - slack
    }
}

/// E/C/M view of completed rounds.
pub fn cem_trace(reports: &[RoundReport]) -> Result<Vec<CemRound>> {
    if reports.is_empty() {
        return Err(Error::contract("cem_trace needs at least one completed round"));
    }
    Ok(reports
        .iter()
        .map(|r| CemRound {
            round: r.round,
            e_step: CemPhase { rcml: -r.step1_loss_before },
            c_step: CemPhase { rcml: -r.step1_loss_after },
            m_step: CemPhase { rcml: -r.step2_final_loss },
        })
        .collect())
}

/// Network shape and source-only pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain: SgdConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![32, 32], pretrain_epochs: 300, pretrain: SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// Result of pretraining followed by self-training rounds.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Source-only model on the target set.
    pub initial: EvalReport,
    pub reports: Vec<RoundReport>,
    pub final_eval: EvalReport,
    pub status: RunStatus,
    pub message: Option<String>,
    pub params: ModelParams,
}

/// Initializes a network from `seed`, pretrains it on the source set, then
/// runs `rounds` self-training rounds. A diverging round (non-finite or
/// exploding loss) stops the run with
/// status [`RunStatus::Diverged`]; earlier rounds are kept.
pub fn run_self_training(
    train: &TrainConfig,
    model: &ModelConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    rounds: usize,
    seed: u64,
) -> Result<RunOutcome> {
    if source.dim() != target.dim() || source.classes() != target.classes() {
        return Err(Error::config("source and target disagree on feature dimension or class count"));
    }
    let init = ModelParams::init(source.dim(), &model.hidden, source.classes(), &mut stream(seed, Stream::Init))?;
    let (params, _) = pretrain_source(&init, source, model.pretrain, model.pretrain_epochs)?;
    let initial = evaluate(&params, target, train.kl_direction)?;
    let mut state = TrainState::new(params, train.clone(), seed)?;
    let mut reports = Vec::with_capacity(rounds);
    let mut status = RunStatus::Completed;
    let mut message = None;
    for _ in 0..rounds {
        match run_round(state.clone(), source, target) {
            Ok((next, report)) => {
                state = next;
                reports.push(report);
            }
            Err(e @ (Error::Diverged { .. } | Error::Numerical { .. })) => {
                log::warn!("round {} diverged: {e}", state.round);
                status = RunStatus::Diverged;
                message = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let final_eval = evaluate(&state.params, target, train.kl_direction)?;
    Ok(RunOutcome { initial, reports, final_eval, status, message, params: state.params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Domain;
    use crate::nn::Dense;
    use approx::assert_relative_eq;

    fn lam(v: &[f64]) -> LambdaVector {
        LambdaVector::new(v.to_vec()).unwrap()
    }

    /// Single linear layer `z = x` over three classes.
    fn identity3() -> ModelParams {
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        ModelParams::new(vec![Dense::new(3, 3, w, vec![0.0; 3]).unwrap()]).unwrap()
    }

    fn empty_source() -> DomainDataset {
        DomainDataset::new(vec![], vec![], Domain::Source, 3, 3).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("ebm".parse::<Mode>().is_err());
    }

    #[test]
    fn empty_selection_leaves_source_ce() {
        let params = identity3();
        let source =
            DomainDataset::new(vec![vec![0.0, 2f64.ln(), 0.0]], vec![Some(1)], Domain::Source, 3, 3).unwrap();
        let target = vec![vec![0.3, 0.1, 0.2]];
        let labels = PseudoLabelSet::unselected(1, 3, 0);
        let t = total_objective(&params, &source, &target, &labels, &lam(&[0.5; 3]), &ObjectiveSpec::new(Mode::Cbst, 0.0))
            .unwrap();
        assert_relative_eq!(t.total, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(t.target_pseudo, 0.0);
        assert_eq!(t.energy_term, 0.0);
    }

    #[test]
    fn selected_sample_at_threshold_costs_nothing() {
        // logits ln(0.25), ln(0.5), ln(0.25) give p = [0.25, 0.5, 0.25]
        let x = vec![0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()];
        let labels = PseudoLabelSet { labels: vec![PseudoLabel::one_hot(1, 3)], round: 0 };
        let t = total_objective(
            &identity3(),
            &empty_source(),
            &[x],
            &labels,
            &lam(&[0.5; 3]),
            &ObjectiveSpec::new(Mode::Rebm, 0.0),
        )
        .unwrap();
        assert_relative_eq!(t.target_pseudo, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn energy_term_added_with_alpha() {
        let labels = PseudoLabelSet { labels: vec![PseudoLabel::one_hot(1, 3)], round: 0 };
        let x = vec![1.0, 2.0, 0.0];
        let spec = ObjectiveSpec::new(Mode::Rebm, 1.0);
        let t = total_objective(&identity3(), &empty_source(), &[x.clone()], &labels, &lam(&[0.5; 3]), &spec).unwrap();
        assert_relative_eq!(t.energy_term, -2.407606, epsilon = 1e-6);
        let cbst = ObjectiveSpec::new(Mode::Cbst, 1.0);
        let t = total_objective(&identity3(), &empty_source(), &[x], &labels, &lam(&[0.5; 3]), &cbst).unwrap();
        assert_eq!(t.energy_term, 0.0);
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let labels = PseudoLabelSet::unselected(2, 3, 0);
        let r = total_objective(
            &identity3(),
            &empty_source(),
            &[vec![0.0; 3]],
            &labels,
            &lam(&[0.5; 3]),
            &ObjectiveSpec::new(Mode::Cbst, 0.0),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn portion_schedule_caps() {
        let s = PortionSchedule::default();
        assert_eq!(s.at(0), 0.2);
        assert_relative_eq!(s.at(2), 0.3, epsilon = 1e-12);
        assert_eq!(s.at(100), 0.5);
        assert_eq!(PortionSchedule::fixed(0.4).at(9), 0.4);
    }

    #[test]
    fn single_sample_is_its_own_threshold() {
        // With p = 1 and one sample, λ for its class is its own confidence,
        // so the strict inequality leaves it unselected.
        let params = identity3();
        let x = vec![0.3f64.ln(), 0.6f64.ln(), 0.1f64.ln()];
        let cfg = TrainConfig { mode: Mode::Cbst, portion: PortionSchedule::fixed(1.0), ..TrainConfig::default() };
        let state = TrainState::new(params, cfg, 0).unwrap();
        let (labels, lambdas) = step1_generate(&state, &[x.clone()]).unwrap();
        assert_eq!(lambdas.values()[0], 1.0);
        assert_relative_eq!(lambdas.values()[1], 0.6, epsilon = 1e-12);
        assert_eq!(lambdas.values()[2], 1.0);
        assert!(!labels.labels[0].selected);
        assert_eq!(step1_generate(&state, &[x]).unwrap().0, labels);
    }

    #[test]
    fn crst_labels_are_smoothed() {
        let xs: Vec<Vec<f64>> = [[0.8, 0.1, 0.1], [0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.1, 0.6, 0.3]]
            .iter()
            .map(|p| p.iter().map(|v: &f64| v.ln()).collect())
            .collect();
        let cfg = TrainConfig {
            mode: Mode::CrstLs,
            epsilon: 0.1,
            portion: PortionSchedule::fixed(1.0),
            ..TrainConfig::default()
        };
        let state = TrainState::new(identity3(), cfg, 0).unwrap();
        let (labels, _) = step1_generate(&state, &xs).unwrap();
        assert!(labels.labels[0].selected);
        for (a, b) in labels.labels[0].vector.iter().zip([0.9, 0.05, 0.05]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(!labels.labels[1].selected);
        assert!(labels.labels.iter().all(PseudoLabel::is_feasible));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let source = crate::datagen::gen_two_moons(20, 0.1, 1).unwrap();
        let target = crate::datagen::rotate_domain(&source, 30.0).unwrap();
        let params = ModelParams::init(2, &[4], 2, &mut stream(0, Stream::Init)).unwrap();
        let mut cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        cfg.sgd.lr = 0.0;
        let mut state = TrainState::new(params.clone(), cfg, 0).unwrap();
        let (labels, lambdas) = step1_generate(&state, target.features()).unwrap();
        let out = step2_retrain(&mut state, &source, target.features(), &labels, &lambdas).unwrap();
        assert_eq!(out.params, params);
        assert!(out.trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_step_on_convex_instance_decreases_loss() {
        let w = vec![0.1, -0.2, 0.05, 0.3];
        let params = ModelParams::new(vec![Dense::new(2, 2, w, vec![0.0, 0.0]).unwrap()]).unwrap();
        let source = crate::datagen::gen_two_moons(10, 0.1, 2).unwrap();
        let target = crate::datagen::rotate_domain(&source, 20.0).unwrap();
        let cfg = TrainConfig { epochs: 1, mode: Mode::Cbst, ..TrainConfig::default() };
        let mut state = TrainState::new(params.clone(), cfg, 0).unwrap();
        let (labels, lambdas) = step1_generate(&state, target.features()).unwrap();
        let spec = ObjectiveSpec::new(Mode::Cbst, 0.0);
        let start = total_objective(&params, &source, target.features(), &labels, &lambdas, &spec).unwrap().total;
        let out = step2_retrain(&mut state, &source, target.features(), &labels, &lambdas).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!(out.trace[0] < start);
    }

    #[test]
    fn anneal_round_zero_uses_beta_ten() {
        let cfg = TrainConfig { mode: Mode::Anneal, ..TrainConfig::default() };
        let params = ModelParams::init(2, &[4], 2, &mut stream(0, Stream::Init)).unwrap();
        let state = TrainState::new(params, cfg, 0).unwrap();
        assert_eq!(state.beta(), 10.0);
        let cbst = TrainState::new(state.params.clone(), TrainConfig { mode: Mode::Cbst, ..TrainConfig::default() }, 0)
            .unwrap();
        assert_eq!(cbst.beta(), 0.0);
    }

    #[test]
    fn cem_trace_needs_rounds() {
        assert!(cem_trace(&[]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let params = ModelParams::init(2, &[4], 2, &mut stream(0, Stream::Init)).unwrap();
        let bad = [
            TrainConfig { portion: PortionSchedule::fixed(0.0), ..TrainConfig::default() },
            TrainConfig { alpha: -1.0, ..TrainConfig::default() },
            TrainConfig { epsilon: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(TrainState::new(params.clone(), cfg, 0).is_err());
        }
    }
}
