//! Optimizers and the joint training loop: ASV head + CM head, affine
//! calibration, fusion and a combined SASV loss, trained end to end with the
//! checkpoint of lowest development min a-DCF kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::{
    fit_calibration, fuse_linear, fuse_nonlinear_grad, CalibrationParams, FusionConfig, FusionMode, INV_SQRT_6,
};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_v1, combined_loss_v2, soft_adcf, LossOutput, LossWeights, SoftAdcfConfig};
use crate::math::{logit, sigmoid};
use crate::metrics::{self, extended_float};
use crate::nn::{
    cosine_score, weighted_cosine_backward, weighted_cosine_score, Activation, CosineTape, Mlp, MlpGrads, MlpTape,
    WeightedCosine, DEFAULT_HIDDEN, DEFAULT_LEAKY_SLOPE,
};
use crate::types::{CostModel, EmbeddingStore, TrialLabel, TrialRecord};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 192;
pub const DEFAULT_LR: f64 = 8.61e-4;

/// Trials per parallel work unit when accumulating head gradients. Fixed so
/// that the summation order, and hence every bit of the result, does not
/// depend on the number of threads.
const GRAD_CHUNK: usize = 16;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            module: "train",
            left: a,
            right: b,
        });
    }
    Ok(())
}

/// Plain gradient descent `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_len(params.len(), grads.len())?;
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidConfig("train", format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moment estimates (Adam only, empty for SGD).
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(
                "train",
                format!("learning rate {lr} must be nonnegative"),
            ));
        }
        let n = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        })
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, self.lr)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::Adam => adam_step(params, grads, self),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    check_len(params.len(), grads.len())?;
    check_len(state.m.len(), params.len())?;
    check_len(state.v.len(), params.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// The three joint-system layouts: an MLP, plain cosine or weighted cosine
/// speaker head, each paired with an MLP countermeasure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "mlp-mlp")]
    MlpMlp,
    #[serde(rename = "cosine-mlp")]
    CosineMlp,
    #[serde(rename = "wcos-mlp")]
    WeightedCosineMlp,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MlpMlp => "mlp-mlp",
            Self::CosineMlp => "cosine-mlp",
            Self::WeightedCosineMlp => "wcos-mlp",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-mlp" => Ok(Self::MlpMlp),
            "cosine-mlp" => Ok(Self::CosineMlp),
            "wcos-mlp" => Ok(Self::WeightedCosineMlp),
            other => Err(Error::InvalidConfig("train", format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Soft a-DCF plus BCE on the fused score.
    V1,
    /// Soft a-DCF plus separate ASV and CM BCE terms.
    V2,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            other => Err(Error::InvalidConfig("train", format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    /// Heads first trained on their own BCE objectives.
    Pretrained,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(Error::InvalidConfig("train", format!("unknown init {other:?}"))),
        }
    }
}

/// Which loss terms update the calibration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationGradient {
    Both,
    FusedOnly,
    AuxOnly,
}

impl std::str::FromStr for CalibrationGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "fused-only" => Ok(Self::FusedOnly),
            "aux-only" => Ok(Self::AuxOnly),
            other => Err(Error::InvalidConfig(
                "train",
                format!("unknown calibration gradient {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub fusion: FusionMode,
    pub loss: LossVariant,
    pub init: InitKind,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub cost: CostModel,
    /// Steepness of the soft a-DCF sigmoid.
    pub alpha: f64,
    /// Normalized a-DCF for both the loss and checkpoint selection.
    pub normalized: bool,
    pub weights: LossWeights,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub calibration_gradient: CalibrationGradient,
    /// Epochs of head pretraining when `init` is `Pretrained`.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::WeightedCosineMlp,
            fusion: FusionMode::Nonlinear,
            loss: LossVariant::V1,
            init: InitKind::Random,
            optimizer: OptimizerKind::Sgd,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            seed: 0,
            cost: CostModel::default(),
            alpha: 1.0,
            normalized: true,
            weights: LossWeights::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            activation: Activation::LeakyRelu {
                slope: DEFAULT_LEAKY_SLOPE,
            },
            calibration_gradient: CalibrationGradient::Both,
            pretrain_epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig("train", m));
        if self.batch_size < 3 {
            return bad(format!("batch size {} cannot hold all three classes", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be nonnegative", self.lr));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be positive", self.alpha));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer of width zero".into());
        }
        match self.loss {
            LossVariant::V1 => self.weights.check_v1(),
            LossVariant::V2 => self.weights.check_v2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AsvHead {
    Mlp(Mlp),
    Cosine,
    WeightedCosine(WeightedCosine),
}

impl AsvHead {
    pub fn num_params(&self) -> usize {
        match self {
            Self::Mlp(m) => m.num_params(),
            Self::Cosine => 0,
            Self::WeightedCosine(w) => w.w.len(),
        }
    }
}

/// Every trainable of the joint system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub asv_dim: usize,
    pub cm_dim: usize,
    pub fusion: FusionMode,
    pub asv: AsvHead,
    /// Input is `[ASV test embedding ; CM test embedding]`.
    pub cm: Mlp,
    pub asv_calib: CalibrationParams,
    pub cm_calib: CalibrationParams,
    /// Nonlinear fusion weight `ρ̃`, stored as its logit.
    pub rho_logit: f64,
    /// Soft a-DCF threshold.
    pub tau: f64,
}

/// Number of scalars after the two heads in the flat layout.
const TAIL_PARAMS: usize = 6;

impl ModelParams {
    /// Seeded initialization: random MLPs, unit cosine weights, identity
    /// calibration, `ρ̃` from the cost model and `τ = 0`.
    pub fn init(cfg: &TrainConfig, asv_dim: usize, cm_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if asv_dim == 0 || cm_dim == 0 {
            return Err(Error::InvalidConfig("train", "embedding dimension is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let asv = match cfg.architecture {
            Architecture::MlpMlp => AsvHead::Mlp(Mlp::random(2 * asv_dim, &cfg.hidden, cfg.activation, &mut rng)?),
            Architecture::CosineMlp => AsvHead::Cosine,
            Architecture::WeightedCosineMlp => AsvHead::WeightedCosine(WeightedCosine::ones(asv_dim)),
        };
        let cm = Mlp::random(asv_dim + cm_dim, &cfg.hidden, cfg.activation, &mut rng)?;
        Ok(Self {
            asv_dim,
            cm_dim,
            fusion: cfg.fusion,
            asv,
            cm,
            asv_calib: CalibrationParams::IDENTITY,
            cm_calib: CalibrationParams::IDENTITY,
            rho_logit: logit(cfg.cost.rho()?),
            tau: 0.0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self.asv {
            AsvHead::Mlp(_) => Architecture::MlpMlp,
            AsvHead::Cosine => Architecture::CosineMlp,
            AsvHead::WeightedCosine(_) => Architecture::WeightedCosineMlp,
        }
    }

    pub fn rho_tilde(&self) -> f64 {
        sigmoid(self.rho_logit)
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion,
            rho_tilde: self.rho_tilde(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.asv.num_params() + self.cm.num_params() + TAIL_PARAMS
    }

    /// Layout: ASV head, CM MLP, ASV `(w0, w1)`, CM `(w0, w1)`, `logit ρ̃`, `τ`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match &self.asv {
            AsvHead::Mlp(m) => m.flatten_into(&mut out),
            AsvHead::Cosine => {}
            AsvHead::WeightedCosine(w) => out.extend_from_slice(&w.w),
        }
        self.cm.flatten_into(&mut out);
        out.extend_from_slice(&[
            self.asv_calib.w0,
            self.asv_calib.w1,
            self.cm_calib.w0,
            self.cm_calib.w1,
            self.rho_logit,
            self.tau,
        ]);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = match &mut self.asv {
            AsvHead::Mlp(m) => m.load_flat(flat)?,
            AsvHead::Cosine => 0,
            AsvHead::WeightedCosine(w) => {
                let n = w.w.len();
                w.w.copy_from_slice(&flat[..n]);
                n
            }
        };
        at += self.cm.load_flat(&flat[at..])?;
        let t = &flat[at..];
        self.asv_calib = CalibrationParams::new(t[0], t[1]);
        self.cm_calib = CalibrationParams::new(t[2], t[3]);
        self.rho_logit = t[4];
        self.tau = t[5];
        Ok(())
    }

    fn asv_raw(&self, enr: &[f64], tst: &[f64]) -> Result<f64> {
        match &self.asv {
            AsvHead::Mlp(m) => m.score(&[enr, tst].concat()),
            AsvHead::Cosine => cosine_score(enr, tst),
            AsvHead::WeightedCosine(w) => weighted_cosine_score(w, enr, tst).map(|(s, _)| s),
        }
    }

    fn fuse(&self, llr_asv: f64, llr_cm: f64) -> f64 {
        match self.fusion {
            FusionMode::Linear => fuse_linear(llr_asv, llr_cm),
            FusionMode::Nonlinear => fuse_nonlinear_grad(llr_asv, llr_cm, self.rho_logit).value,
        }
    }

    /// Raw head scores, calibrated LLRs and the fused SASV score of a trial.
    pub fn score_trial(&self, t: &PreparedTrial<'_>) -> Result<TrialScores> {
        let s_asv = self.asv_raw(t.enroll, t.test_asv)?;
        let s_cm = self.cm.score(&[t.test_asv, t.test_cm].concat())?;
        let llr_asv = self.asv_calib.apply(s_asv);
        let llr_cm = self.cm_calib.apply(s_cm);
        Ok(TrialScores {
            s_asv,
            s_cm,
            llr_asv,
            llr_cm,
            s_sasv: self.fuse(llr_asv, llr_cm),
        })
    }

    pub fn score_trials(&self, trials: &[PreparedTrial<'_>]) -> Result<Vec<TrialScores>> {
        trials.par_iter().map(|t| self.score_trial(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub s_asv: f64,
    pub s_cm: f64,
    pub llr_asv: f64,
    pub llr_cm: f64,
    pub s_sasv: f64,
}

/// A protocol row with its embeddings looked up.
#[derive(Debug, Clone, Copy)]
pub struct PreparedTrial<'a> {
    pub enroll: &'a [f64],
    pub test_asv: &'a [f64],
    pub test_cm: &'a [f64],
    pub label: TrialLabel,
}

pub fn prepare_trials<'a>(
    asv: &'a EmbeddingStore,
    cm: &'a EmbeddingStore,
    trials: &[TrialRecord],
) -> Result<Vec<PreparedTrial<'a>>> {
    let lookup = |store: &'a EmbeddingStore, id: &str, what: &str| {
        store
            .get(id)
            .ok_or_else(|| Error::UnknownEmbedding(format!("{what} embedding {id:?}")))
    };
    trials
        .iter()
        .map(|t| {
            Ok(PreparedTrial {
                enroll: lookup(asv, t.enroll_id(), "ASV enrollment")?,
                test_asv: lookup(asv, t.test_id(), "ASV test")?,
                test_cm: lookup(cm, t.test_id(), "CM test")?,
                label: t.label(),
            })
        })
        .collect()
}

fn require_all_classes(trials: &[PreparedTrial<'_>], split: &str) -> Result<()> {
    for l in TrialLabel::ALL {
        if !trials.iter().any(|t| t.label == l) {
            return Err(Error::DegenerateSplit(format!(
                "{split} split has no {} trials",
                l.as_str()
            )));
        }
    }
    Ok(())
}

/// Embeddings plus training and development protocols.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub asv: &'a EmbeddingStore,
    pub cm: &'a EmbeddingStore,
    pub train: &'a [TrialRecord],
    pub dev: &'a [TrialRecord],
}

impl<'a> TrainData<'a> {
    fn prepare(&self) -> Result<(Vec<PreparedTrial<'a>>, Vec<PreparedTrial<'a>>)> {
        let train = prepare_trials(self.asv, self.cm, self.train)?;
        let dev = prepare_trials(self.asv, self.cm, self.dev)?;
        require_all_classes(&train, "train")?;
        require_all_classes(&dev, "dev")?;
        Ok((train, dev))
    }
}

/// Loss composition used for one gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Joint(LossVariant),
    /// Head pretraining: ASV and CM BCE only.
    Aux,
}

enum AsvTape {
    Mlp(MlpTape),
    Cosine,
    Weighted(CosineTape),
}

struct ForwardRecord {
    s_asv: f64,
    s_cm: f64,
    asv: AsvTape,
    cm: MlpTape,
}

fn forward_trial(p: &ModelParams, t: &PreparedTrial<'_>) -> Result<ForwardRecord> {
    let (s_asv, asv) = match &p.asv {
        AsvHead::Mlp(m) => {
            let (s, tape) = m.forward(&[t.enroll, t.test_asv].concat())?;
            (s, AsvTape::Mlp(tape))
        }
        AsvHead::Cosine => (cosine_score(t.enroll, t.test_asv)?, AsvTape::Cosine),
        AsvHead::WeightedCosine(w) => {
            let (s, tape) = weighted_cosine_score(w, t.enroll, t.test_asv)?;
            (s, AsvTape::Weighted(tape))
        }
    };
    let (s_cm, cm) = p.cm.forward(&[t.test_asv, t.test_cm].concat())?;
    Ok(ForwardRecord { s_asv, s_cm, asv, cm })
}

/// Loss value and its gradient with respect to [`ModelParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: LossOutput,
    pub grad: Vec<f64>,
}

/// Full forward and backward pass of the configured joint loss on one batch.
pub fn batch_gradient(p: &ModelParams, cfg: &TrainConfig, batch: &[PreparedTrial<'_>]) -> Result<BatchGradient> {
    objective_gradient(p, cfg, Objective::Joint(cfg.loss), batch)
}

fn objective_gradient(
    p: &ModelParams,
    cfg: &TrainConfig,
    objective: Objective,
    batch: &[PreparedTrial<'_>],
) -> Result<BatchGradient> {
    let records: Vec<ForwardRecord> = batch.par_iter().map(|t| forward_trial(p, t)).collect::<Result<_>>()?;
    let n = batch.len();
    let labels: Vec<TrialLabel> = batch.iter().map(|t| t.label).collect();
    let llr_asv: Vec<f64> = records.iter().map(|r| p.asv_calib.apply(r.s_asv)).collect();
    let llr_cm: Vec<f64> = records.iter().map(|r| p.cm_calib.apply(r.s_cm)).collect();

    let mut s_sasv = Vec::with_capacity(n);
    let mut fuse_d = Vec::with_capacity(n);
    for i in 0..n {
        match p.fusion {
            FusionMode::Linear => {
                s_sasv.push(fuse_linear(llr_asv[i], llr_cm[i]));
                fuse_d.push((INV_SQRT_6, INV_SQRT_6, 0.0));
            }
            FusionMode::Nonlinear => {
                let g = fuse_nonlinear_grad(llr_asv[i], llr_cm[i], p.rho_logit);
                s_sasv.push(g.value);
                fuse_d.push((g.d_asv, g.d_cm, g.d_rho_logit));
            }
        }
    }

    let soft = SoftAdcfConfig::new(cfg.cost, p.tau, cfg.alpha, cfg.normalized)?;
    let loss = match objective {
        Objective::Joint(LossVariant::V1) => combined_loss_v1(&s_sasv, &labels, &cfg.weights, &soft)?,
        Objective::Joint(LossVariant::V2) => {
            combined_loss_v2(&llr_asv, &llr_cm, &s_sasv, &labels, &cfg.weights, &soft)?
        }
        Objective::Aux => {
            let w = LossWeights {
                lambda1: 0.0,
                lambda2: 1.0,
                lambda3: 1.0,
                ..LossWeights::default()
            };
            combined_loss_v2(&llr_asv, &llr_cm, &s_sasv, &labels, &w, &soft)?
        }
    };

    // Upstream gradients at the calibrated LLRs, split by origin.
    let mut up_asv = vec![0.0; n];
    let mut up_cm = vec![0.0; n];
    let mut calib = [0.0; 4];
    let mut d_rho = 0.0;
    let (use_fused, use_aux) = match cfg.calibration_gradient {
        CalibrationGradient::Both => (true, true),
        CalibrationGradient::FusedOnly => (true, false),
        CalibrationGradient::AuxOnly => (false, true),
    };
    for i in 0..n {
        let (da, dc, dr) = fuse_d[i];
        let fused_a = loss.d_sasv[i] * da;
        let fused_c = loss.d_sasv[i] * dc;
        d_rho += loss.d_sasv[i] * dr;
        up_asv[i] = fused_a + loss.d_asv[i];
        up_cm[i] = fused_c + loss.d_cm[i];
        let ca = if use_fused { fused_a } else { 0.0 } + if use_aux { loss.d_asv[i] } else { 0.0 };
        let cc = if use_fused { fused_c } else { 0.0 } + if use_aux { loss.d_cm[i] } else { 0.0 };
        calib[0] += ca;
        calib[1] += ca * records[i].s_asv;
        calib[2] += cc;
        calib[3] += cc * records[i].s_cm;
    }

    let head_len = p.asv.num_params() + p.cm.num_params();
    let chunk_grads: Vec<Vec<f64>> = records
        .par_chunks(GRAD_CHUNK)
        .zip(up_asv.par_chunks(GRAD_CHUNK))
        .zip(up_cm.par_chunks(GRAD_CHUNK))
        .map(|((recs, ua), uc)| head_backward(p, recs, ua, uc))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; head_len];
    for g in &chunk_grads {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.extend_from_slice(&calib);
    grad.push(d_rho);
    grad.push(loss.d_tau);
    Ok(BatchGradient { loss, grad })
}

/// Head gradients for a run of trials, flattened like [`ModelParams`].
fn head_backward(p: &ModelParams, recs: &[ForwardRecord], up_asv: &[f64], up_cm: &[f64]) -> Result<Vec<f64>> {
    let mut asv_mlp = match &p.asv {
        AsvHead::Mlp(m) => Some(m.zero_grads()),
        _ => None,
    };
    let mut asv_w = match &p.asv {
        AsvHead::WeightedCosine(w) => vec![0.0; w.w.len()],
        _ => Vec::new(),
    };
    let mut cm: MlpGrads = p.cm.zero_grads();
    for (i, r) in recs.iter().enumerate() {
        let ua = up_asv[i] * p.asv_calib.w1;
        match (&p.asv, &r.asv) {
            (AsvHead::Mlp(m), AsvTape::Mlp(tape)) => {
                if let Some(g) = asv_mlp.as_mut() {
                    m.backward_into(tape, ua, g)?;
                }
            }
            (AsvHead::WeightedCosine(w), AsvTape::Weighted(tape)) => {
                let g = weighted_cosine_backward(w, tape, ua)?;
                asv_w.iter_mut().zip(&g.w).for_each(|(a, b)| *a += b);
            }
            (AsvHead::Cosine, AsvTape::Cosine) => {}
            _ => return Err(Error::TapeMismatch("ASV head and tape disagree".into())),
        }
        p.cm.backward_into(&r.cm, up_cm[i] * p.cm_calib.w1, &mut cm)?;
    }
    let mut out = Vec::with_capacity(p.asv.num_params() + p.cm.num_params());
    if let Some(g) = asv_mlp {
        g.flatten_into(&mut out);
    }
    out.extend_from_slice(&asv_w);
    cm.flatten_into(&mut out);
    Ok(out)
}

/// Shuffled mini-batches in which every class appears at least once.
fn stratified_batches(labels: &[TrialLabel], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[*l as usize].push(i);
    }
    let min_class = by_class.iter().map(Vec::len).min().unwrap_or(0).max(1);
    let n_batches = labels.len().div_ceil(batch_size).clamp(1, min_class);
    let mut batches = vec![Vec::with_capacity(batch_size); n_batches];
    let mut k = 0;
    for idx in &mut by_class {
        idx.shuffle(rng);
        for &i in idx.iter() {
            batches[k % n_batches].push(i);
            k += 1;
        }
    }
    batches.shuffle(rng);
    batches
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_min_adcf: f64,
    #[serde(with = "extended_float")]
    pub dev_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ModelParams,
    pub dev_min_adcf: f64,
    #[serde(with = "extended_float")]
    pub dev_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Lowest development min a-DCF, earliest epoch on ties.
    pub best: Checkpoint,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
}

fn dev_metric(p: &ModelParams, cfg: &TrainConfig, dev: &[PreparedTrial<'_>]) -> Result<(f64, f64)> {
    let scores = p.score_trials(dev)?;
    let pairs: Vec<(f64, TrialLabel)> = scores.iter().zip(dev).map(|(s, t)| (s.s_sasv, t.label)).collect();
    let r = metrics::min_adcf(&pairs, &cfg.cost, cfg.normalized)?;
    Ok((r.min_adcf, r.min_threshold))
}

fn run_epochs(
    mut p: ModelParams,
    cfg: &TrainConfig,
    objective: Objective,
    epochs: usize,
    train: &[PreparedTrial<'_>],
    mut on_epoch: impl FnMut(usize, f64, &ModelParams) -> Result<()>,
) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let labels: Vec<TrialLabel> = train.iter().map(|t| t.label).collect();
    let mut flat = p.flatten();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, flat.len())?;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=epochs {
        let batches = stratified_batches(&labels, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i]));
            let g = objective_gradient(&p, cfg, objective, &batch)?;
            if !g.loss.loss.is_finite() {
                return Err(Error::NonConvergence(epoch));
            }
            total += g.loss.loss;
            opt.apply(&mut flat, &g.grad)?;
            p.load_flat(&flat)?;
        }
        on_epoch(epoch, total / batches.len() as f64, &p)?;
    }
    Ok(p)
}

/// Seeded initial parameters, pretrained first when the config asks for it.
pub fn initial_params(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<ModelParams> {
    match cfg.init {
        InitKind::Random => ModelParams::init(cfg, data.asv.dim(), data.cm.dim()),
        InitKind::Pretrained => pretrain_heads(cfg, data),
    }
}

/// Train the ASV head on its BCE (spoofs excluded) and the CM head on its
/// BCE, each through its own calibration, starting from the seeded init.
pub fn pretrain_heads(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<ModelParams> {
    let init = ModelParams::init(cfg, data.asv.dim(), data.cm.dim())?;
    let (train, _) = data.prepare()?;
    run_epochs(
        init,
        cfg,
        Objective::Aux,
        cfg.pretrain_epochs,
        &train,
        |epoch, loss, _| {
            log::debug!("pretrain epoch {epoch}: loss {loss:.6}");
            Ok(())
        },
    )
}

/// Joint training from the configured initialization.
pub fn train_joint(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<TrainOutcome> {
    let init = initial_params(cfg, data)?;
    train_from(cfg, init, data)
}

/// Joint training from explicit starting parameters.
pub fn train_from(cfg: &TrainConfig, init: ModelParams, data: &TrainData<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.asv_dim != data.asv.dim() || init.cm_dim != data.cm.dim() {
        return Err(Error::ShapeMismatch(format!(
            "model expects ASV/CM dims {}/{}, embeddings have {}/{}",
            init.asv_dim,
            init.cm_dim,
            data.asv.dim(),
            data.cm.dim()
        )));
    }
    let (train, dev) = data.prepare()?;
    let (m0, t0) = dev_metric(&init, cfg, &dev)?;
    let mut best = Checkpoint {
        epoch: 0,
        params: init.clone(),
        dev_min_adcf: m0,
        dev_threshold: t0,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let last = run_epochs(
        init,
        cfg,
        Objective::Joint(cfg.loss),
        cfg.epochs,
        &train,
        |epoch, loss, p| {
            let (m, t) = dev_metric(p, cfg, &dev)?;
            log::debug!("epoch {epoch}: loss {loss:.6} dev min a-DCF {m:.6}");
            log.push(EpochLog {
                epoch,
                train_loss: loss,
                dev_min_adcf: m,
                dev_threshold: t,
            });
            if epoch == 1 || m < best.dev_min_adcf {
                best = Checkpoint {
                    epoch,
                    params: p.clone(),
                    dev_min_adcf: m,
                    dev_threshold: t,
                };
            }
            Ok(())
        },
    )?;
    Ok(TrainOutcome { best, last, log })
}

/// Calibrated score-level fusion with a trained `ρ̃` and threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreFusionModel {
    pub asv_calib: CalibrationParams,
    pub cm_calib: CalibrationParams,
    pub fusion: FusionConfig,
    pub tau: f64,
}

impl ScoreFusionModel {
    pub fn llrs(&self, s_asv: f64, s_cm: f64) -> (f64, f64) {
        (self.asv_calib.apply(s_asv), self.cm_calib.apply(s_cm))
    }

    pub fn score(&self, s_asv: f64, s_cm: f64) -> f64 {
        let (a, c) = self.llrs(s_asv, s_cm);
        self.fusion.fuse(a, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreFusionConfig {
    pub mode: FusionMode,
    pub cost: CostModel,
    pub alpha: f64,
    pub normalized: bool,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ScoreFusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Nonlinear,
            cost: CostModel::default(),
            alpha: 1.0,
            normalized: true,
            steps: 300,
            lr: 0.05,
        }
    }
}

/// Fit both calibrations by logistic regression (target vs nontarget for
/// ASV, bona fide vs spoof for CM), then train `logit ρ̃` and `τ` with Adam on
/// the full-batch soft a-DCF of the fused score.
pub fn train_score_fusion(
    s_asv: &[f64],
    s_cm: &[f64],
    labels: &[TrialLabel],
    cfg: &ScoreFusionConfig,
) -> Result<ScoreFusionModel> {
    check_len(s_asv.len(), labels.len())?;
    check_len(s_cm.len(), labels.len())?;
    let (asv_s, asv_y): (Vec<f64>, Vec<bool>) = s_asv
        .iter()
        .zip(labels)
        .filter_map(|(&s, l)| l.label_maps().asv.map(|y| (s, y)))
        .unzip();
    let cm_y: Vec<bool> = labels.iter().map(|l| l.label_maps().cm).collect();
    let asv_calib = fit_calibration(&asv_s, &asv_y)?;
    let cm_calib = fit_calibration(s_cm, &cm_y)?;
    let llr_a: Vec<f64> = s_asv.iter().map(|&s| asv_calib.apply(s)).collect();
    let llr_c: Vec<f64> = s_cm.iter().map(|&s| cm_calib.apply(s)).collect();

    let mut theta = [logit(cfg.cost.rho()?), 0.0];
    let mut opt = OptimizerState::new(OptimizerKind::Adam, cfg.lr, 2)?;
    let mut fused = vec![0.0; labels.len()];
    for _ in 0..cfg.steps {
        let mut d_rho_per = Vec::with_capacity(labels.len());
        for i in 0..labels.len() {
            match cfg.mode {
                FusionMode::Linear => {
                    fused[i] = fuse_linear(llr_a[i], llr_c[i]);
                    d_rho_per.push(0.0);
                }
                FusionMode::Nonlinear => {
                    let g = fuse_nonlinear_grad(llr_a[i], llr_c[i], theta[0]);
                    fused[i] = g.value;
                    d_rho_per.push(g.d_rho_logit);
                }
            }
        }
        let soft = soft_adcf(
            &fused,
            labels,
            &SoftAdcfConfig::new(cfg.cost, theta[1], cfg.alpha, cfg.normalized)?,
        )?;
        let d_rho = soft.d_scores.iter().zip(&d_rho_per).map(|(a, b)| a * b).sum::<f64>();
        opt.apply(&mut theta, &[d_rho, soft.d_tau])?;
    }
    let rho_tilde = match cfg.mode {
        FusionMode::Linear => cfg.cost.rho()?,
        FusionMode::Nonlinear => sigmoid(theta[0]),
    };
    Ok(ScoreFusionModel {
        asv_calib,
        cm_calib,
        fusion: FusionConfig::new(cfg.mode, rho_tilde)?,
        tau: theta[1],
    })
}
