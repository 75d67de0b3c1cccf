//! Domain types shared by every stage: trial labels, protocol rows, the
//! SASV cost model and embedding stores.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the prior simplex constraint `pi_tar + pi_non + pi_spf = 1`.
pub const PRIOR_SUM_TOLERANCE: f64 = 1e-9;

/// Ground truth of one SASV trial. Spoofed targets and spoofed nontargets
/// are collapsed into [`TrialLabel::Spoof`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialLabel {
    TargetBonafide,
    NontargetBonafide,
    Spoof,
}

/// Binary supervision targets derived from a [`TrialLabel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelBits {
    pub sasv: bool,
    /// Absent for spoof trials: they carry no speaker-match supervision.
    pub asv: Option<bool>,
    pub cm: bool,
}

impl TrialLabel {
    pub const ALL: [TrialLabel; 3] = [
        TrialLabel::TargetBonafide,
        TrialLabel::NontargetBonafide,
        TrialLabel::Spoof,
    ];

    pub fn label_maps(self) -> LabelBits {
        match self {
            TrialLabel::TargetBonafide => LabelBits {
                sasv: true,
                asv: Some(true),
                cm: true,
            },
            TrialLabel::NontargetBonafide => LabelBits {
                sasv: false,
                asv: Some(false),
                cm: true,
            },
            TrialLabel::Spoof => LabelBits {
                sasv: false,
                asv: None,
                cm: false,
            },
        }
    }

    pub fn is_target(self) -> bool {
        self == TrialLabel::TargetBonafide
    }

    /// Protocol-file keyword.
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::TargetBonafide => "target",
            TrialLabel::NontargetBonafide => "nontarget",
            TrialLabel::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(TrialLabel::TargetBonafide),
            "nontarget" => Some(TrialLabel::NontargetBonafide),
            "spoof" => Some(TrialLabel::Spoof),
            _ => None,
        }
    }

    pub(crate) fn class_name(self) -> &'static str {
        match self {
            TrialLabel::TargetBonafide => "tar.bon",
            TrialLabel::NontargetBonafide => "non.bon",
            TrialLabel::Spoof => "spf",
        }
    }
}

impl std::fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidId(id.to_string()));
    }
    Ok(())
}

/// One protocol row: an enrollment/test pairing with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialRecord {
    enroll_id: String,
    test_id: String,
    label: TrialLabel,
}

impl TrialRecord {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, label: TrialLabel) -> Result<Self> {
        let enroll_id = enroll_id.into();
        let test_id = test_id.into();
        check_id(&enroll_id)?;
        check_id(&test_id)?;
        Ok(Self {
            enroll_id,
            test_id,
            label,
        })
    }

    pub fn enroll_id(&self) -> &str {
        &self.enroll_id
    }

    pub fn test_id(&self) -> &str {
        &self.test_id
    }

    pub fn label(&self) -> TrialLabel {
        self.label
    }
}

#[derive(Deserialize)]
struct CostModelFields {
    c_miss_tar: f64,
    c_fa_non: f64,
    c_fa_spf: f64,
    pi_tar: f64,
    pi_non: f64,
    pi_spf: f64,
}

/// Decision costs and class priors of the three-class SASV task.
///
/// Costs are per-error (miss a bona fide target, accept a bona fide
/// nontarget, accept a spoof); priors must sum to one. The model is
/// immutable once built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostModelFields")]
pub struct CostModel {
    c_miss_tar: f64,
    c_fa_non: f64,
    c_fa_spf: f64,
    pi_tar: f64,
    pi_non: f64,
    pi_spf: f64,
}

impl TryFrom<CostModelFields> for CostModel {
    type Error = Error;

    fn try_from(f: CostModelFields) -> Result<Self> {
        CostModel::new(f.c_miss_tar, f.c_fa_non, f.c_fa_spf, f.pi_tar, f.pi_non, f.pi_spf)
    }
}

impl Default for CostModel {
    /// Costs 1/10/20 and priors 0.9/0.05/0.05.
    fn default() -> Self {
        Self {
            c_miss_tar: 1.0,
            c_fa_non: 10.0,
            c_fa_spf: 20.0,
            pi_tar: 0.9,
            pi_non: 0.05,
            pi_spf: 0.05,
        }
    }
}

impl CostModel {
    pub fn new(c_miss_tar: f64, c_fa_non: f64, c_fa_spf: f64, pi_tar: f64, pi_non: f64, pi_spf: f64) -> Result<Self> {
        let costs = [c_miss_tar, c_fa_non, c_fa_spf];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidCostModel(format!(
                "costs must be finite and nonnegative, got {costs:?}"
            )));
        }
        if costs.iter().all(|c| *c == 0.0) {
            return Err(Error::InvalidCostModel("all costs are zero".into()));
        }
        if !(pi_tar > 0.0 && pi_tar < 1.0) {
            return Err(Error::PriorOutOfRange(format!("pi_tar = {pi_tar} not in (0,1)")));
        }
        for (name, p) in [("pi_non", pi_non), ("pi_spf", pi_spf)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::PriorOutOfRange(format!("{name} = {p} not in [0,1)")));
            }
        }
        let sum = pi_tar + pi_non + pi_spf;
        if (sum - 1.0).abs() > PRIOR_SUM_TOLERANCE {
            return Err(Error::PriorOutOfRange(format!("priors sum to {sum}, expected 1")));
        }
        Ok(Self {
            c_miss_tar,
            c_fa_non,
            c_fa_spf,
            pi_tar,
            pi_non,
            pi_spf,
        })
    }

    /// Like [`CostModel::new`] but rescales the priors to sum to one first.
    /// Only for callers that explicitly opt in to renormalization.
    pub fn new_renormalized(
        c_miss_tar: f64,
        c_fa_non: f64,
        c_fa_spf: f64,
        pi_tar: f64,
        pi_non: f64,
        pi_spf: f64,
    ) -> Result<Self> {
        let sum = pi_tar + pi_non + pi_spf;
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::PriorOutOfRange(format!("priors sum to {sum}")));
        }
        Self::new(c_miss_tar, c_fa_non, c_fa_spf, pi_tar / sum, pi_non / sum, pi_spf / sum)
    }

    /// Rebuild priors from `pi_tar` and the spoof prevalence `rho`.
    pub fn from_rho(c_miss_tar: f64, c_fa_non: f64, c_fa_spf: f64, pi_tar: f64, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::PriorOutOfRange(format!("rho = {rho} not in [0,1]")));
        }
        let rest = 1.0 - pi_tar;
        Self::new(c_miss_tar, c_fa_non, c_fa_spf, pi_tar, (1.0 - rho) * rest, rho * rest)
    }

    pub fn c_miss_tar(&self) -> f64 {
        self.c_miss_tar
    }
    pub fn c_fa_non(&self) -> f64 {
        self.c_fa_non
    }
    pub fn c_fa_spf(&self) -> f64 {
        self.c_fa_spf
    }
    pub fn pi_tar(&self) -> f64 {
        self.pi_tar
    }
    pub fn pi_non(&self) -> f64 {
        self.pi_non
    }
    pub fn pi_spf(&self) -> f64 {
        self.pi_spf
    }

    /// Spoof prevalence: the spoof share of the non-target prior mass.
    pub fn rho(&self) -> Result<f64> {
        derive_rho(self.pi_non, self.pi_spf)
    }

    /// Prior odds of a bona fide target.
    pub fn beta(&self) -> Result<f64> {
        derive_beta(self.pi_tar)
    }

    /// Prior-weighted costs `(C_miss·π_tar, C_fa^non·π_non, C_fa^spf·π_spf)`.
    pub fn weights(&self) -> [f64; 3] {
        [
            self.c_miss_tar * self.pi_tar,
            self.c_fa_non * self.pi_non,
            self.c_fa_spf * self.pi_spf,
        ]
    }

    /// Cost of the better of the two blind systems (accept all / reject all).
    pub fn default_cost(&self) -> f64 {
        let [w_tar, w_non, w_spf] = self.weights();
        w_tar.min(w_non + w_spf)
    }
}

pub fn derive_rho(pi_non: f64, pi_spf: f64) -> Result<f64> {
    let denom = pi_non + pi_spf;
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::DegeneratePriors);
    }
    Ok(pi_spf / denom)
}

pub fn derive_beta(pi_tar: f64) -> Result<f64> {
    if !(pi_tar > 0.0 && pi_tar < 1.0) {
        return Err(Error::PriorOutOfRange(format!("pi_tar = {pi_tar} not in (0,1)")));
    }
    Ok(pi_tar / (1.0 - pi_tar))
}

/// Named fixed-dimension embeddings, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Embedding("empty id".into()));
        }
        if vector.len() != self.dim {
            return Err(Error::Embedding(format!(
                "{id:?} has length {}, store dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding(format!("{id:?} has non-finite components")));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// A trial with its raw branch scores, calibrated LLRs and fused score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub trial: TrialRecord,
    pub s_asv_raw: f64,
    pub s_cm_raw: f64,
    pub llr_asv: Option<f64>,
    pub llr_cm: Option<f64>,
    pub s_sasv: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(pi_tar: f64, pi_non: f64, pi_spf: f64) -> CostModel {
        CostModel::new(1.0, 1.0, 1.0, pi_tar, pi_non, pi_spf).unwrap()
    }

    #[test]
    fn rho_examples() {
        assert_eq!(cm(0.9, 0.05, 0.05).rho().unwrap(), 0.5);
        assert_eq!(cm(0.95, 0.05, 0.0).rho().unwrap(), 0.0);
        assert!((cm(0.995, 0.004, 0.001).rho().unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(derive_rho(0.0, 0.0), Err(Error::DegeneratePriors)));
    }

    #[test]
    fn beta_examples() {
        assert_eq!(derive_beta(0.5).unwrap(), 1.0);
        assert!((derive_beta(0.9).unwrap() - 9.0).abs() < 1e-12);
        assert!((derive_beta(0.995).unwrap() - 199.0).abs() < 1e-9);
        assert!(derive_beta(1.0).is_err());
        assert!(derive_beta(0.0).is_err());
    }

    #[test]
    fn label_maps_table() {
        let t = TrialLabel::TargetBonafide.label_maps();
        assert_eq!((t.sasv, t.asv, t.cm), (true, Some(true), true));
        let n = TrialLabel::NontargetBonafide.label_maps();
        assert_eq!((n.sasv, n.asv, n.cm), (false, Some(false), true));
        let s = TrialLabel::Spoof.label_maps();
        assert_eq!((s.sasv, s.asv, s.cm), (false, None, false));
    }

    #[test]
    fn label_maps_injective() {
        let keys: std::collections::HashSet<_> = TrialLabel::ALL
            .iter()
            .map(|l| {
                let b = l.label_maps();
                (b.sasv, b.cm, b.asv.is_some())
            })
            .collect();
        assert_eq!(keys.len(), 3);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::new(1.0, 10.0, 20.0, 0.9, 0.05, 0.05).is_ok());
        assert!(CostModel::new(1.0, 10.0, 20.0, 0.9, 0.05, 0.06).is_err());
        assert!(CostModel::new(-1.0, 10.0, 20.0, 0.9, 0.05, 0.05).is_err());
        assert!(CostModel::new(0.0, 0.0, 0.0, 0.9, 0.05, 0.05).is_err());
        assert!(CostModel::new(1.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_err());
        // Renormalization is explicit only.
        let r = CostModel::new_renormalized(1.0, 10.0, 20.0, 1.8, 0.1, 0.1).unwrap();
        assert!((r.pi_tar() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn cost_model_json_validates() {
        let ok = r#"{"c_miss_tar":1,"c_fa_non":10,"c_fa_spf":20,"pi_tar":0.9,"pi_non":0.05,"pi_spf":0.05}"#;
        let m: CostModel = serde_json::from_str(ok).unwrap();
        assert_eq!(m, CostModel::default());
        let bad = r#"{"c_miss_tar":1,"c_fa_non":10,"c_fa_spf":20,"pi_tar":0.9,"pi_non":0.5,"pi_spf":0.05}"#;
        assert!(serde_json::from_str::<CostModel>(bad).is_err());
    }

    #[test]
    fn trial_ids_validated() {
        assert!(TrialRecord::new("e1", "t1", TrialLabel::Spoof).is_ok());
        assert!(TrialRecord::new("", "t1", TrialLabel::Spoof).is_err());
        assert!(TrialRecord::new("e\t1", "t1", TrialLabel::Spoof).is_err());
        assert!(TrialRecord::new("e1", "t\n1", TrialLabel::Spoof).is_err());
    }

    #[test]
    fn embedding_store_rejects_bad_vectors() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(s.insert("a", vec![1.0, 2.0]).is_err());
        assert!(s.insert("b", vec![1.0]).is_err());
        assert!(s.insert("c", vec![f64::NAN, 0.0]).is_err());
        assert!(EmbeddingStore::new(0).is_err());
        assert_eq!(s.len(), 1);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rho_beta_reconstruct_priors(pi_tar in 0.001f64..0.999, rho in 0.0f64..=1.0) {
                let m = CostModel::from_rho(1.0, 10.0, 20.0, pi_tar, rho).unwrap();
                let r = m.rho().unwrap();
                let rest = 1.0 - m.pi_tar();
                prop_assert!((r * rest - m.pi_spf()).abs() <= 1e-12);
                prop_assert!(((1.0 - r) * rest - m.pi_non()).abs() <= 1e-12);
                let b = m.beta().unwrap();
                prop_assert!((b / (1.0 + b) - m.pi_tar()).abs() <= 1e-12);
            }
        }
    }
}
