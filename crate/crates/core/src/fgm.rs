//! Weight-perturbation adversarial training (fast gradient method).
//!
//! One step: clean loss and gradient at `w`; perturb the selected weights by
//! `delta = eps * g / ||g||`; loss and gradient at `w + delta`; restore `w`
//! bit-for-bit; then update with the summed gradient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqaError};
use crate::losses::LossBreakdown;
use crate::nn;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{l2_norm, Gradients, ParamKind, ParamMeta, Parameterized};

/// Gradients with a norm below this are treated as zero and left unperturbed.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each tensor is normalised by its own gradient norm.
    #[default]
    PerTensor,
    /// One norm over all perturbed tensors.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgmConfig {
    #[serde(default = "FgmConfig::default_enabled")]
    pub enabled: bool,
    pub epsilon: f64,
    #[serde(default)]
    pub norm_scope: NormScope,
    /// Regexes over parameter names; a tensor is perturbed if any matches.
    #[serde(default = "FgmConfig::default_filter")]
    pub param_filter: Vec<String>,
    #[serde(default)]
    pub perturb_biases: bool,
    #[serde(default)]
    pub perturb_norms: bool,
}

impl FgmConfig {
    fn default_enabled() -> bool {
        true
    }

    fn default_filter() -> Vec<String> {
        vec![".*".to_string()]
    }

    pub fn new(epsilon: f64) -> Self {
        Self {
            enabled: true,
            epsilon,
            norm_scope: NormScope::PerTensor,
            param_filter: Self::default_filter(),
            perturb_biases: false,
            perturb_norms: false,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(VqaError::Config(format!("fgm.epsilon must be >= 0, got {}", self.epsilon)));
        }
        self.compiled_filter().map(|_| ())
    }

    fn compiled_filter(&self) -> Result<Vec<Regex>> {
        self.param_filter
            .iter()
            .map(|p| Regex::new(p).map_err(|e| VqaError::Config(format!("fgm.param_filter `{p}`: {e}"))))
            .collect()
    }

    /// Which tensors receive a perturbation.
    pub fn mask(&self, meta: &[ParamMeta]) -> Result<Vec<bool>> {
        let filter = self.compiled_filter()?;
        Ok(meta
            .iter()
            .map(|m| {
                let kind_ok = match m.kind {
                    ParamKind::Weight => true,
                    ParamKind::Bias => self.perturb_biases,
                    ParamKind::Norm => self.perturb_norms,
                };
                kind_ok && filter.iter().any(|r| r.is_match(&m.name))
            })
            .collect())
    }
}

/// Loss and gradient of a model at its current weights.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub breakdown: Option<LossBreakdown>,
    pub grads: Gradients,
}

impl Evaluation {
    fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// A differentiable model trained on slices of `Item`.
pub trait Trainable: Parameterized {
    type Item;

    fn evaluate(&self, batch: &[&Self::Item]) -> Result<Evaluation>;
}

/// `delta = eps * g / ||g||` for masked tensors under the given scope.
pub fn compute_perturbation(grads: &Gradients, mask: &[bool], epsilon: f64, scope: NormScope) -> Result<Gradients> {
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(VqaError::NonFinite {
            context: "gradient passed to perturbation".into(),
        });
    }
    let scaled = |g: &[f64], norm: f64| -> Vec<f64> {
        if norm < MIN_GRAD_NORM {
            vec![0.0; g.len()]
        } else {
            g.iter().map(|v| epsilon * v / norm).collect()
        }
    };
    let global = match scope {
        NormScope::Global => grads
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(g, _)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt(),
        NormScope::PerTensor => 0.0,
    };
    Ok(grads
        .iter()
        .zip(mask)
        .map(|(g, &m)| {
            if !m {
                vec![0.0; g.len()]
            } else {
                match scope {
                    NormScope::PerTensor => scaled(g, l2_norm(g)),
                    NormScope::Global => scaled(g, global),
                }
            }
        })
        .collect())
}

/// Saved weights and the perturbation applied on top of them.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub snapshot: Vec<Vec<f64>>,
    pub deltas: Gradients,
}

impl PerturbationState {
    /// Save the current weights and move them to `w + delta`.
    pub fn apply<M: Parameterized + ?Sized>(model: &mut M, deltas: Gradients) -> Self {
        let snapshot = model.snapshot();
        for (w, d) in model.param_slices_mut().into_iter().zip(&deltas) {
            w.iter_mut().zip(d).for_each(|(w, d)| *w += d);
        }
        Self { snapshot, deltas }
    }

    pub fn restore<M: Parameterized + ?Sized>(&self, model: &mut M) {
        model.restore(&self.snapshot);
    }

    pub fn delta_norms(&self, meta: &[ParamMeta], mask: &[bool]) -> BTreeMap<String, f64> {
        meta.iter()
            .zip(&self.deltas)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((m, d), _)| (m.name.clone(), l2_norm(d)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassLoss {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied {
        clean: PassLoss,
        adversarial: Option<PassLoss>,
        delta_norms: BTreeMap<String, f64>,
    },
    /// Non-finite loss or weights; parameters are back at their pre-step values.
    Aborted { reason: String },
}

fn pass(e: &Evaluation) -> PassLoss {
    PassLoss {
        loss: e.loss,
        breakdown: e.breakdown,
    }
}

fn weights_finite<M: Parameterized + ?Sized>(model: &M) -> bool {
    model.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
}

/// One training step on `batch`. With FGM disabled this is a single clean
/// gradient step.
pub fn fgm_step<M: Trainable>(
    model: &mut M,
    batch: &[&M::Item],
    config: &FgmConfig,
    optimizer: &mut dyn Optimizer,
    learning_rate: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(VqaError::Empty("training batch"));
    }
    let start = model.snapshot();
    let clean = model.evaluate(batch)?;
    if !clean.is_finite() {
        return Ok(StepOutcome::Aborted {
            reason: format!("non-finite clean loss {}", clean.loss),
        });
    }

    let (combined, adversarial, delta_norms) = if config.enabled {
        let meta = model.param_meta();
        let mask = config.mask(&meta)?;
        let deltas = compute_perturbation(&clean.grads, &mask, config.epsilon, config.norm_scope)?;
        let state = PerturbationState::apply(model, deltas);
        let adv = model.evaluate(batch);
        state.restore(model);
        let adv = adv?;
        if !adv.is_finite() {
            return Ok(StepOutcome::Aborted {
                reason: format!("non-finite adversarial loss {}", adv.loss),
            });
        }
        let combined: Gradients = clean
            .grads
            .iter()
            .zip(&adv.grads)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        (combined, Some(pass(&adv)), state.delta_norms(&meta, &mask))
    } else {
        (clean.grads.clone(), None, BTreeMap::new())
    };

    optimizer.step(model.param_slices_mut(), &combined, learning_rate);
    if !weights_finite(model) {
        model.restore(&start);
        return Ok(StepOutcome::Aborted {
            reason: "non-finite weights after update".into(),
        });
    }
    Ok(StepOutcome::Applied {
        clean: pass(&clean),
        adversarial,
        delta_norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Relative change between consecutive loss windows that counts as converged.
    #[serde(default = "TrainConfig::default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "TrainConfig::default_window")]
    pub window: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "TrainConfig::default_shuffle")]
    pub shuffle: bool,
}

impl TrainConfig {
    fn default_tolerance() -> f64 {
        1e-4
    }
    fn default_window() -> usize {
        50
    }
    fn default_shuffle() -> bool {
        true
    }

    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            learning_rate,
            batch_size,
            epochs,
            max_steps: None,
            tolerance: Self::default_tolerance(),
            window: Self::default_window(),
            optimizer: OptimizerKind::Sgd,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(VqaError::Config("train.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(VqaError::Config("train.batch_size must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(VqaError::Config("train.window must be at least 1".into()));
        }
        Ok(())
    }
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcl: Option<f64>,
    pub delta_norms: BTreeMap<String, f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub steps: usize,
    pub aborted: usize,
    pub converged: bool,
}

/// Largest tolerated fraction of aborted steps.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

fn window_converged(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let recent = losses[n - window..].iter().sum::<f64>() / window as f64;
    let previous = losses[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (recent - previous).abs() / previous.abs().max(f64::MIN_POSITIVE) < tolerance
}

/// Mini-batch loop over `data` until `epochs`, `max_steps` or convergence.
/// `on_step` sees every record as it is produced.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &[M::Item],
    train_cfg: &TrainConfig,
    fgm_cfg: &FgmConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord, &M),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    fgm_cfg.validate()?;
    let mut optimizer = train_cfg.optimizer.build();
    let mut rng = nn::seeded_rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut clean_losses = Vec::new();
    let mut aborted = 0usize;
    let mut converged = false;
    let max_steps = train_cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;

    'outer: for epoch in 0..train_cfg.epochs {
        if train_cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(train_cfg.batch_size) {
            if step >= max_steps {
                break 'outer;
            }
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &data[i]).collect();
            let outcome = fgm_step(model, &batch, fgm_cfg, optimizer.as_mut(), train_cfg.learning_rate)?;
            let record = match outcome {
                StepOutcome::Applied {
                    clean,
                    adversarial,
                    delta_norms,
                } => {
                    clean_losses.push(clean.loss);
                    StepRecord {
                        step,
                        epoch,
                        clean_loss: Some(clean.loss),
                        adv_loss: adversarial.map(|a| a.loss),
                        mae: clean.breakdown.map(|b| b.mae),
                        bce: clean.breakdown.map(|b| b.bce),
                        fcl: clean.breakdown.map(|b| b.fcl),
                        delta_norms,
                        lr: train_cfg.learning_rate,
                        aborted: None,
                    }
                }
                StepOutcome::Aborted { reason } => {
                    aborted += 1;
                    StepRecord {
                        step,
                        epoch,
                        clean_loss: None,
                        adv_loss: None,
                        mae: None,
                        bce: None,
                        fcl: None,
                        delta_norms: BTreeMap::new(),
                        lr: train_cfg.learning_rate,
                        aborted: Some(reason),
                    }
                }
            };
            on_step(&record, model);
            log.push(record);
            step += 1;
            if window_converged(&clean_losses, train_cfg.window, train_cfg.tolerance) {
                converged = true;
                break 'outer;
            }
        }
    }
    if step > 0 && aborted as f64 / step as f64 > MAX_ABORT_FRACTION {
        return Err(VqaError::Diverged(format!("{aborted} of {step} steps aborted")));
    }
    Ok(TrainOutcome {
        log,
        steps: step,
        aborted,
        converged,
    })
}
