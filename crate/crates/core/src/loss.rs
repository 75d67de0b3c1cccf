//! Training objectives with exact gradients with respect to their input
//! scores: BCE, the sigmoid-relaxed a-DCF and the two combined SASV losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::types::{CostModel, TrialLabel};

/// Probability inputs to [`bce`] are clamped to `[ε, 1-ε]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BceInput {
    Probability,
    Logit,
}

/// Binary cross-entropy and its derivative with respect to the input.
pub fn bce(input: f64, y: bool, kind: BceInput) -> (f64, f64) {
    match kind {
        BceInput::Probability => {
            let p = input.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let clamped = p != input;
            if y {
                (-p.ln(), if clamped { 0.0 } else { -1.0 / p })
            } else {
                (-(1.0 - p).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - p) })
            }
        }
        BceInput::Logit => {
            // -[y ln σ(x) + (1-y) ln(1-σ(x))] = softplus(x) - y·x
            let t = if y { 1.0 } else { 0.0 };
            (softplus(input) - t * input, sigmoid(input) - t)
        }
    }
}

/// Sigmoid-relaxed a-DCF settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftAdcfConfig {
    pub cost: CostModel,
    pub tau: f64,
    /// Sigmoid steepness; the hard a-DCF is recovered as `alpha → ∞`.
    pub alpha: f64,
    pub normalized: bool,
}

impl SoftAdcfConfig {
    pub fn new(cost: CostModel, tau: f64, alpha: f64, normalized: bool) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(
                "loss",
                format!("alpha = {alpha} must be positive"),
            ));
        }
        if !tau.is_finite() {
            return Err(Error::InvalidConfig("loss", format!("tau = {tau} must be finite")));
        }
        Ok(Self {
            cost,
            tau,
            alpha,
            normalized,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAdcf {
    pub loss: f64,
    pub d_scores: Vec<f64>,
    pub d_tau: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            module: "loss",
            left: a,
            right: b,
        });
    }
    Ok(())
}

/// a-DCF with every Heaviside step replaced by `σ(α·t)`.
pub fn soft_adcf(scores: &[f64], labels: &[TrialLabel], cfg: &SoftAdcfConfig) -> Result<SoftAdcf> {
    check_lengths(scores.len(), labels.len())?;
    let mut n = [0usize; 3];
    for l in labels {
        n[class_index(*l)] += 1;
    }
    for (count, label) in n.iter().zip(TrialLabel::ALL) {
        if *count == 0 {
            return Err(Error::EmptyClass {
                module: "loss",
                class: label.class_name(),
            });
        }
    }
    let norm = if cfg.normalized { cfg.cost.default_cost() } else { 1.0 };
    let w = cfg.cost.weights();
    let scale: [f64; 3] = std::array::from_fn(|k| w[k] / n[k] as f64 / norm);

    let mut loss = 0.0;
    let mut d_tau = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        let k = class_index(l);
        // Misses are soft indicators of s < τ, false alarms of s > τ.
        let sign = if l.is_target() { -1.0 } else { 1.0 };
        let q = sigmoid(cfg.alpha * sign * (s - cfg.tau));
        loss += scale[k] * q;
        let dq = scale[k] * cfg.alpha * q * (1.0 - q) * sign;
        d_scores.push(dq);
        d_tau -= dq;
    }
    Ok(SoftAdcf { loss, d_scores, d_tau })
}

fn class_index(l: TrialLabel) -> usize {
    match l {
        TrialLabel::TargetBonafide => 0,
        TrialLabel::NontargetBonafide => 1,
        TrialLabel::Spoof => 2,
    }
}

/// Mixing weights of the combined objectives. They are hyperparameters and
/// are not updated by training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    fn check(active: &[f64]) -> Result<()> {
        if active.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss", "loss weights must be nonnegative".into()));
        }
        if active.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig("loss", "every active loss weight is zero".into()));
        }
        Ok(())
    }

    pub fn check_v1(&self) -> Result<()> {
        Self::check(&[self.beta1, self.beta2])
    }

    pub fn check_v2(&self) -> Result<()> {
        Self::check(&[self.lambda1, self.lambda2, self.lambda3])
    }
}

/// Unweighted component values, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adcf: f64,
    pub bce_sasv: f64,
    pub bce_asv: f64,
    pub bce_cm: f64,
}

/// Combined loss value with gradients for every score it consumed. The
/// branch gradients are all zero for the V1 loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub parts: LossParts,
    pub d_sasv: Vec<f64>,
    pub d_asv: Vec<f64>,
    pub d_cm: Vec<f64>,
    pub d_tau: f64,
}

/// Mean logit-BCE over the trials that have a target, accumulating
/// `weight · ∂/∂x` into `grad`.
fn mean_logit_bce(
    logits: &[f64],
    targets: impl Iterator<Item = Option<bool>>,
    weight: f64,
    grad: &mut [f64],
) -> Option<f64> {
    let picked: Vec<(usize, bool)> = targets.enumerate().filter_map(|(i, y)| y.map(|y| (i, y))).collect();
    if picked.is_empty() {
        return None;
    }
    let inv = 1.0 / picked.len() as f64;
    let mut total = 0.0;
    for (i, y) in picked {
        let (l, d) = bce(logits[i], y, BceInput::Logit);
        total += l;
        grad[i] += weight * d * inv;
    }
    Some(total * inv)
}

/// `β1·soft-a-DCF + β2·mean BCE(σ(s_sasv), y_sasv)`.
pub fn combined_loss_v1(
    s_sasv: &[f64],
    labels: &[TrialLabel],
    w: &LossWeights,
    cfg: &SoftAdcfConfig,
) -> Result<LossOutput> {
    check_lengths(s_sasv.len(), labels.len())?;
    w.check_v1()?;
    let n = s_sasv.len();
    let mut out = LossOutput {
        loss: 0.0,
        parts: LossParts::default(),
        d_sasv: vec![0.0; n],
        d_asv: vec![0.0; n],
        d_cm: vec![0.0; n],
        d_tau: 0.0,
    };
    if w.beta1 != 0.0 {
        let a = soft_adcf(s_sasv, labels, cfg)?;
        out.parts.adcf = a.loss;
        out.loss += w.beta1 * a.loss;
        out.d_tau += w.beta1 * a.d_tau;
        out.d_sasv
            .iter_mut()
            .zip(&a.d_scores)
            .for_each(|(g, d)| *g += w.beta1 * d);
    }
    if w.beta2 != 0.0 {
        let targets = labels.iter().map(|l| Some(l.label_maps().sasv));
        let b = mean_logit_bce(s_sasv, targets, w.beta2, &mut out.d_sasv).ok_or(Error::EmptyClass {
            module: "loss",
            class: "any",
        })?;
        out.parts.bce_sasv = b;
        out.loss += w.beta2 * b;
    }
    Ok(out)
}

/// `λ1·soft-a-DCF(s_sasv) + λ2·BCE_asv(σ(ℓ_asv)) + λ3·BCE_cm(σ(ℓ_cm))`.
/// Spoof trials are left out of the ASV term.
pub fn combined_loss_v2(
    llr_asv: &[f64],
    llr_cm: &[f64],
    s_sasv: &[f64],
    labels: &[TrialLabel],
    w: &LossWeights,
    cfg: &SoftAdcfConfig,
) -> Result<LossOutput> {
    check_lengths(s_sasv.len(), labels.len())?;
    check_lengths(llr_asv.len(), labels.len())?;
    check_lengths(llr_cm.len(), labels.len())?;
    w.check_v2()?;
    let n = s_sasv.len();
    let mut out = LossOutput {
        loss: 0.0,
        parts: LossParts::default(),
        d_sasv: vec![0.0; n],
        d_asv: vec![0.0; n],
        d_cm: vec![0.0; n],
        d_tau: 0.0,
    };
    if w.lambda1 != 0.0 {
        let a = soft_adcf(s_sasv, labels, cfg)?;
        out.parts.adcf = a.loss;
        out.loss += w.lambda1 * a.loss;
        out.d_tau += w.lambda1 * a.d_tau;
        out.d_sasv
            .iter_mut()
            .zip(&a.d_scores)
            .for_each(|(g, d)| *g += w.lambda1 * d);
    }
    if w.lambda2 != 0.0 {
        let targets = labels.iter().map(|l| l.label_maps().asv);
        let b = mean_logit_bce(llr_asv, targets, w.lambda2, &mut out.d_asv).ok_or(Error::EmptyClass {
            module: "loss",
            class: "bona fide",
        })?;
        out.parts.bce_asv = b;
        out.loss += w.lambda2 * b;
    }
    if w.lambda3 != 0.0 {
        let targets = labels.iter().map(|l| Some(l.label_maps().cm));
        let b = mean_logit_bce(llr_cm, targets, w.lambda3, &mut out.d_cm).ok_or(Error::EmptyClass {
            module: "loss",
            class: "any",
        })?;
        out.parts.bce_cm = b;
        out.loss += w.lambda3 * b;
    }
    Ok(out)
}
