//! Calibration of raw scores to log-likelihood ratios, ASV/CM fusion and the
//! Bayes-optimal SASV accept rule.
//!
//! All log-domain expressions of the form `-ln[a·e^{-x} + b·e^{-y}]` are
//! evaluated as a shifted log-sum-exp so that LLRs of any magnitude are safe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, logit, sigmoid, softplus};
use crate::types::CostModel;

/// `ILR` normalisation constant of the linear fusion rule.
pub const INV_SQRT_6: f64 = 0.408_248_290_463_863_f64;

/// Affine score-to-LLR map `w0 + w1·s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub w0: f64,
    pub w1: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CalibrationParams {
    pub const IDENTITY: Self = Self { w0: 0.0, w1: 1.0 };

    pub fn new(w0: f64, w1: f64) -> Self {
        Self { w0, w1 }
    }

    pub fn apply(&self, score: f64) -> f64 {
        calibrate(score, *self)
    }
}

pub fn calibrate(score: f64, p: CalibrationParams) -> f64 {
    p.w0 + p.w1 * score
}

pub const CALIBRATION_GRAD_TOL: f64 = 1e-8;
pub const CALIBRATION_MAX_ITERS: usize = 200;
/// Separable data drives `|w1|` to infinity; the fit stops here instead.
pub const CALIBRATION_SCALE_CAP: f64 = 50.0;

/// Result of [`fit_calibration_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    pub iterations: usize,
    /// The classes were (numerically) separable and the scale hit the cap.
    pub separable: bool,
}

struct BalancedLogistic<'a> {
    scores: &'a [f64],
    labels: &'a [bool],
    w_pos: f64,
    w_neg: f64,
}

impl BalancedLogistic<'_> {
    fn weight(&self, y: bool) -> f64 {
        if y {
            self.w_pos
        } else {
            self.w_neg
        }
    }

    fn objective(&self, w0: f64, w1: f64) -> f64 {
        self.scores
            .iter()
            .zip(self.labels)
            .map(|(&s, &y)| {
                let z = w0 + w1 * s;
                self.weight(y) * if y { softplus(-z) } else { softplus(z) }
            })
            .sum()
    }

    /// Gradient and Hessian (`[h00, h01, h11]`).
    fn derivatives(&self, w0: f64, w1: f64) -> ([f64; 2], [f64; 3]) {
        let mut g = [0.0; 2];
        let mut h = [0.0; 3];
        for (&s, &y) in self.scores.iter().zip(self.labels) {
            let c = self.weight(y);
            let p = sigmoid(w0 + w1 * s);
            let r = c * (p - if y { 1.0 } else { 0.0 });
            g[0] += r;
            g[1] += r * s;
            let q = c * p * (1.0 - p);
            h[0] += q;
            h[1] += q * s;
            h[2] += q * s * s;
        }
        (g, h)
    }
}

/// Fit `(w0, w1)` by logistic regression of the labels on the scores.
///
/// Each class carries half of the total weight, so the fitted map produces
/// log-likelihood ratios independent of the class proportions in `scores`.
pub fn fit_calibration(scores: &[f64], labels: &[bool]) -> Result<CalibrationParams> {
    fit_calibration_report(scores, labels).map(|f| f.params)
}

/// [`fit_calibration`] with convergence diagnostics.
pub fn fit_calibration_report(scores: &[f64], labels: &[bool]) -> Result<CalibrationFit> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            module: "decision",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("decision", "non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let obj = BalancedLogistic {
        scores,
        labels,
        w_pos: 0.5 / n_pos as f64,
        w_neg: 0.5 / n_neg as f64,
    };

    let (mut w0, mut w1) = (0.0_f64, 0.0_f64);
    let mut f = obj.objective(w0, w1);
    for iter in 0..CALIBRATION_MAX_ITERS {
        let (g, h) = obj.derivatives(w0, w1);
        if g[0].hypot(g[1]) < CALIBRATION_GRAD_TOL {
            return Ok(CalibrationFit {
                params: CalibrationParams::new(w0, w1),
                iterations: iter,
                separable: false,
            });
        }
        // Levenberg damping keeps the 2x2 system solvable on flat or
        // separable problems.
        let ridge = 1e-12 * (h[0] + h[2]).max(1e-300);
        let (a, b, d) = (h[0] + ridge, h[1], h[2] + ridge);
        let det = a * d - b * b;
        let (mut d0, mut d1) = if det > 0.0 && det.is_finite() {
            ((-d * g[0] + b * g[1]) / det, (b * g[0] - a * g[1]) / det)
        } else {
            (-g[0], -g[1])
        };
        if d0 * g[0] + d1 * g[1] >= 0.0 {
            d0 = -g[0];
            d1 = -g[1];
        }
        let slope = d0 * g[0] + d1 * g[1];
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let (n0, n1) = (w0 + t * d0, w1 + t * d1);
            let fn_ = obj.objective(n0, n1);
            if fn_ <= f + 1e-4 * t * slope {
                w0 = n0;
                w1 = n1;
                f = fn_;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable descent left: we are at the optimum up to
            // floating-point resolution.
            return Ok(CalibrationFit {
                params: CalibrationParams::new(w0, w1),
                iterations: iter + 1,
                separable: false,
            });
        }
        if w1.abs() > CALIBRATION_SCALE_CAP {
            let k = CALIBRATION_SCALE_CAP / w1.abs();
            return Ok(CalibrationFit {
                params: CalibrationParams::new(w0 * k, w1 * k),
                iterations: iter + 1,
                separable: true,
            });
        }
    }
    Err(Error::NonConvergence(CALIBRATION_MAX_ITERS))
}

/// Linear fusion of calibrated LLRs: `(ℓ_asv + ℓ_cm)/√6`.
pub fn fuse_linear(llr_asv: f64, llr_cm: f64) -> f64 {
    (llr_asv + llr_cm) * INV_SQRT_6
}

/// Nonlinear fusion `-ln[(1-ρ̃)e^{-ℓ_asv} + ρ̃ e^{-ℓ_cm}]`.
///
/// `rho_tilde = 0` returns `llr_asv` and `rho_tilde = 1` returns `llr_cm`
/// exactly.
pub fn fuse_nonlinear(llr_asv: f64, llr_cm: f64, rho_tilde: f64) -> f64 {
    let mut terms = [f64::NEG_INFINITY; 2];
    if rho_tilde < 1.0 {
        terms[0] = (1.0 - rho_tilde).ln() - llr_asv;
    }
    if rho_tilde > 0.0 {
        terms[1] = rho_tilde.ln() - llr_cm;
    }
    -log_sum_exp(&terms)
}

/// Value and partial derivatives of [`fuse_nonlinear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGrad {
    pub value: f64,
    pub d_asv: f64,
    pub d_cm: f64,
    /// Derivative with respect to `logit(ρ̃)`.
    pub d_rho_logit: f64,
}

/// Forward and backward of nonlinear fusion parameterised by `logit(ρ̃)`.
pub fn fuse_nonlinear_grad(llr_asv: f64, llr_cm: f64, rho_logit: f64) -> FusionGrad {
    let rho = sigmoid(rho_logit);
    // ln(1-ρ) and ln ρ from the logit to stay finite for saturated ρ.
    let t_asv = -softplus(rho_logit) - llr_asv;
    let t_cm = -softplus(-rho_logit) - llr_cm;
    let lse = log_sum_exp(&[t_asv, t_cm]);
    let p_asv = (t_asv - lse).exp();
    let p_cm = (t_cm - lse).exp();
    FusionGrad {
        value: -lse,
        d_asv: p_asv,
        d_cm: p_cm,
        d_rho_logit: p_asv * rho - p_cm * (1.0 - rho),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FusionMode::Linear),
            "nonlinear" => Ok(FusionMode::Nonlinear),
            other => Err(Error::InvalidConfig(
                "decision",
                format!("unknown fusion mode {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub rho_tilde: f64,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, rho_tilde: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_tilde) {
            return Err(Error::InvalidConfig(
                "decision",
                format!("rho_tilde = {rho_tilde} not in [0,1]"),
            ));
        }
        Ok(Self { mode, rho_tilde })
    }

    /// Nonlinear fusion with `ρ̃` equal to the cost model's spoof prevalence.
    pub fn from_cost_model(cm: &CostModel) -> Result<Self> {
        Self::new(FusionMode::Nonlinear, cm.rho()?)
    }

    pub fn fuse(&self, llr_asv: f64, llr_cm: f64) -> f64 {
        match self.mode {
            FusionMode::Linear => fuse_linear(llr_asv, llr_cm),
            FusionMode::Nonlinear => fuse_nonlinear(llr_asv, llr_cm, self.rho_tilde),
        }
    }
}

/// Left-hand side of the optimal SASV policy:
/// `-ln[(1-ρ)(C_fa^non/C_miss)e^{-ℓ_asv} + ρ(C_fa^spf/C_miss)e^{-ℓ_cm}]`.
pub fn bayes_lhs(llr_asv: f64, llr_cm: f64, cm: &CostModel) -> Result<f64> {
    if cm.c_miss_tar() == 0.0 {
        return Err(Error::ZeroMissCost);
    }
    let rho = cm.rho()?;
    let mut terms = [f64::NEG_INFINITY; 2];
    let a = (1.0 - rho) * cm.c_fa_non();
    if a > 0.0 {
        terms[0] = ((1.0 - rho).ln() + (cm.c_fa_non() / cm.c_miss_tar()).ln()) - llr_asv;
    }
    let b = rho * cm.c_fa_spf();
    if b > 0.0 {
        terms[1] = (rho.ln() + (cm.c_fa_spf() / cm.c_miss_tar()).ln()) - llr_cm;
    }
    Ok(-log_sum_exp(&terms))
}

/// Bayes-optimal accept decision for a pair of calibrated LLRs.
pub fn bayes_accept(llr_asv: f64, llr_cm: f64, cm: &CostModel) -> Result<bool> {
    let lhs = bayes_lhs(llr_asv, llr_cm, cm)?;
    Ok(lhs > -cm.beta()?.ln())
}

/// Bayes log-odds of accepting: positive iff [`bayes_accept`] holds.
pub fn bayes_log_odds(llr_asv: f64, llr_cm: f64, cm: &CostModel) -> Result<f64> {
    Ok(bayes_lhs(llr_asv, llr_cm, cm)? + cm.beta()?.ln())
}

/// Threshold on the ASV LLR for conventional (spoof-free) verification:
/// `ln(C_fa/C_miss) − logit(π_tar)`.
pub fn asv_bayes_threshold(cm: &CostModel) -> Result<f64> {
    if !(cm.c_miss_tar() > 0.0 && cm.c_fa_non() > 0.0) {
        return Err(Error::InvalidCostModel(
            "ASV threshold needs positive miss and nontarget false-alarm costs".into(),
        ));
    }
    let pi = cm.pi_tar();
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::PriorOutOfRange(format!("pi_tar = {pi}")));
    }
    Ok((cm.c_fa_non() / cm.c_miss_tar()).ln() - logit(pi))
}
