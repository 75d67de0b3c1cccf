//! Synthetic data: Gaussian classes in calibrated score space, a toy
//! embedding world standing in for frozen extractors, and decision-boundary
//! grids over the (ASV LLR, CM LLR) plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{bayes_accept, FusionConfig};
use crate::error::{Error, Result};
use crate::types::{CostModel, EmbeddingStore, TrialLabel, TrialRecord};

/// Standard normal draws by the Box–Muller transform over a seeded ChaCha
/// stream, so samples are identical on every platform.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

/// One class of the score simulation: a bivariate Gaussian over
/// `(llr_asv, llr_cm)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub count: usize,
}

impl ClassGaussian {
    fn unit(mean: [f64; 2], count: usize) -> Self {
        Self {
            mean,
            cov: [[1.0, 0.0], [0.0, 1.0]],
            count,
        }
    }

    /// Lower Cholesky factor `[l00, l10, l11]`.
    fn cholesky(&self) -> Result<[f64; 3]> {
        let [[a, b], [c, d]] = self.cov;
        if b != c {
            return Err(Error::InvalidConfig("sim", "covariance is not symmetric".into()));
        }
        if !(a > 0.0 && a * d - b * b > 0.0) {
            return Err(Error::InvalidConfig(
                "sim",
                "covariance is not positive definite".into(),
            ));
        }
        let l00 = a.sqrt();
        let l10 = b / l00;
        Ok([l00, l10, (d - l10 * l10).sqrt()])
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let (dx, dy) = (x[0] - self.mean[0], x[1] - self.mean[1]);
        let q = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSimConfig {
    pub target: ClassGaussian,
    pub nontarget: ClassGaussian,
    pub spoof: ClassGaussian,
    pub seed: u64,
}

impl Default for ScoreSimConfig {
    /// Spoofs sit apart from bona fide trials mainly along the CM axis,
    /// nontargets mainly along the ASV axis.
    fn default() -> Self {
        Self {
            target: ClassGaussian::unit([3.0, 3.0], 2000),
            nontarget: ClassGaussian::unit([-3.0, 3.0], 2000),
            spoof: ClassGaussian::unit([0.0, -3.0], 2000),
            seed: 0,
        }
    }
}

impl ScoreSimConfig {
    pub fn class(&self, label: TrialLabel) -> &ClassGaussian {
        match label {
            TrialLabel::TargetBonafide => &self.target,
            TrialLabel::NontargetBonafide => &self.nontarget,
            TrialLabel::Spoof => &self.spoof,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in TrialLabel::ALL {
            let c = self.class(l);
            c.cholesky()?;
            if c.count == 0 {
                return Err(Error::InvalidConfig("sim", format!("{} count is zero", l.class_name())));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidConfig("sim", "non-finite mean".into()));
            }
        }
        Ok(())
    }

    /// True ASV and CM log-likelihood ratios of a point under the
    /// generating densities.
    pub fn true_llrs(&self, x: [f64; 2]) -> (f64, f64) {
        let t = self.target.log_density(x);
        (t - self.nontarget.log_density(x), t - self.spoof.log_density(x))
    }
}

/// One simulated trial in score space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScore {
    pub label: TrialLabel,
    pub llr_asv: f64,
    pub llr_cm: f64,
}

/// Exactly `count` draws per class, targets first, then nontargets, then
/// spoofs.
pub fn simulate_scores(cfg: &ScoreSimConfig) -> Result<Vec<SimScore>> {
    cfg.validate()?;
    let mut g = GaussianSampler::new(cfg.seed);
    let total = cfg.target.count + cfg.nontarget.count + cfg.spoof.count;
    let mut out = Vec::with_capacity(total);
    for label in TrialLabel::ALL {
        let c = cfg.class(label);
        let [l00, l10, l11] = c.cholesky()?;
        for _ in 0..c.count {
            let (z0, z1) = (g.standard(), g.standard());
            out.push(SimScore {
                label,
                llr_asv: c.mean[0] + l00 * z0,
                llr_cm: c.mean[1] + l10 * z0 + l11 * z1,
            });
        }
    }
    Ok(out)
}

/// Toy embedding world: unit speaker directions in ASV space, and a single
/// bona fide/spoof axis in CM space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSimConfig {
    pub n_speakers: usize,
    pub dim_asv: usize,
    pub dim_cm: usize,
    /// Norm of the within-speaker noise (per component `sigma/√dim`).
    pub within_sigma: f64,
    /// How far spoofed tests move toward the attacked speaker in ASV space:
    /// 0 keeps them at the source speaker, 1 impersonates perfectly.
    pub spoof_proximity: f64,
    /// Distance between the bona fide and spoof centres in CM space.
    pub cm_margin: f64,
    /// Trials per class, per split.
    pub n_target: usize,
    pub n_nontarget: usize,
    pub n_spoof: usize,
    pub seed: u64,
}

impl Default for EmbeddingSimConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            dim_asv: 32,
            dim_cm: 16,
            within_sigma: 0.5,
            spoof_proximity: 0.5,
            cm_margin: 4.0,
            n_target: 300,
            n_nontarget: 300,
            n_spoof: 300,
            seed: 0,
        }
    }
}

impl EmbeddingSimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig("sim", m.to_string()));
        if self.dim_asv < 2 || self.dim_cm < 2 {
            return bad("dimensions must be at least 2");
        }
        if self.n_speakers < 2 {
            return bad("need at least two speakers for nontarget trials");
        }
        if !(self.within_sigma > 0.0 && self.within_sigma.is_finite()) {
            return bad("within_sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.spoof_proximity) {
            return bad("spoof_proximity must lie in [0,1]");
        }
        if !(self.cm_margin >= 0.0 && self.cm_margin.is_finite()) {
            return bad("cm_margin must be nonnegative");
        }
        if self.n_target == 0 || self.n_nontarget == 0 || self.n_spoof == 0 {
            return bad("every class needs at least one trial");
        }
        Ok(())
    }
}

/// Simulated embeddings for a training and a development split that share
/// speakers and the CM geometry.
#[derive(Debug, Clone)]
pub struct SimEmbeddings {
    pub asv: EmbeddingStore,
    pub cm: EmbeddingStore,
    pub train: Vec<TrialRecord>,
    pub dev: Vec<TrialRecord>,
}

fn unit_vector(g: &mut GaussianSampler, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| g.standard()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(g: &mut GaussianSampler, center: &[f64], sigma: f64) -> Vec<f64> {
    let s = sigma / (center.len() as f64).sqrt();
    center.iter().map(|c| c + s * g.standard()).collect()
}

pub fn simulate_embeddings(cfg: &EmbeddingSimConfig) -> Result<SimEmbeddings> {
    cfg.validate()?;
    let mut world = GaussianSampler::new(cfg.seed);
    let speakers: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| unit_vector(&mut world, cfg.dim_asv))
        .collect();
    let axis = unit_vector(&mut world, cfg.dim_cm);
    let bona_center: Vec<f64> = axis.iter().map(|a| -0.5 * cfg.cm_margin * a).collect();
    let spoof_center: Vec<f64> = axis.iter().map(|a| 0.5 * cfg.cm_margin * a).collect();

    let mut asv = EmbeddingStore::new(cfg.dim_asv)?;
    let mut cm = EmbeddingStore::new(cfg.dim_cm)?;
    let mut splits = Vec::with_capacity(2);
    for (k, split) in ["train", "dev"].into_iter().enumerate() {
        let mut g = GaussianSampler::new(cfg.seed ^ (0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(k as u64 + 1)));
        for (s, mean) in speakers.iter().enumerate() {
            asv.insert(format!("{split}-enr-spk{s:03}"), noisy(&mut g, mean, cfg.within_sigma))?;
        }
        let mut protocol = Vec::with_capacity(cfg.n_target + cfg.n_nontarget + cfg.n_spoof);
        let mut next = 0usize;
        let plan = [
            (TrialLabel::TargetBonafide, cfg.n_target),
            (TrialLabel::NontargetBonafide, cfg.n_nontarget),
            (TrialLabel::Spoof, cfg.n_spoof),
        ];
        for (label, count) in plan {
            for _ in 0..count {
                let claimed = g.uniform_index(cfg.n_speakers);
                let other = (claimed + 1 + g.uniform_index(cfg.n_speakers - 1)) % cfg.n_speakers;
                let (asv_center, cm_center) = match label {
                    TrialLabel::TargetBonafide => (speakers[claimed].clone(), &bona_center),
                    TrialLabel::NontargetBonafide => (speakers[other].clone(), &bona_center),
                    TrialLabel::Spoof => {
                        let d = cfg.spoof_proximity;
                        let mix = speakers[other]
                            .iter()
                            .zip(&speakers[claimed])
                            .map(|(src, tgt)| (1.0 - d) * src + d * tgt)
                            .collect();
                        (mix, &spoof_center)
                    }
                };
                let test_id = format!("{split}-tst-{next:06}");
                next += 1;
                asv.insert(test_id.clone(), noisy(&mut g, &asv_center, cfg.within_sigma))?;
                cm.insert(test_id.clone(), noisy(&mut g, cm_center, cfg.within_sigma))?;
                protocol.push(TrialRecord::new(
                    format!("{split}-enr-spk{claimed:03}"),
                    test_id,
                    label,
                )?);
            }
        }
        splits.push(protocol);
    }
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(SimEmbeddings { asv, cm, train, dev })
}

/// Axis-aligned grid over `(llr_asv, llr_cm)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub asv_min: f64,
    pub asv_max: f64,
    pub cm_min: f64,
    pub cm_max: f64,
    pub steps_asv: usize,
    pub steps_cm: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            asv_min: -10.0,
            asv_max: 10.0,
            cm_min: -10.0,
            cm_max: 10.0,
            steps_asv: 101,
            steps_cm: 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub llr_asv: f64,
    pub llr_cm: f64,
    pub s_sasv: f64,
    pub accept: bool,
}

fn axis_values(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Fused score and Bayes decision at every grid node; rows run over
/// `llr_cm`, columns over `llr_asv`.
pub fn boundary_grid(fusion: &FusionConfig, cm: &CostModel, spec: &GridSpec) -> Result<Vec<GridNode>> {
    let bounds = [spec.asv_min, spec.asv_max, spec.cm_min, spec.cm_max];
    if bounds.iter().any(|b| !b.is_finite()) || spec.asv_min > spec.asv_max || spec.cm_min > spec.cm_max {
        return Err(Error::InvalidConfig(
            "sim",
            "grid bounds must be finite and ordered".into(),
        ));
    }
    if spec.steps_asv == 0 || spec.steps_cm == 0 {
        return Err(Error::InvalidConfig("sim", "empty grid".into()));
    }
    let xs = axis_values(spec.asv_min, spec.asv_max, spec.steps_asv);
    let ys = axis_values(spec.cm_min, spec.cm_max, spec.steps_cm);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(GridNode {
                llr_asv: x,
                llr_cm: y,
                s_sasv: fusion.fuse(x, y),
                accept: bayes_accept(x, y, cm)?,
            });
        }
    }
    Ok(out)
}
