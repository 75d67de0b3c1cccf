//! Hard-decision evaluation: error counting, a-DCF (minimum and actual),
//! equal error rates and DET curves.
//!
//! A trial is accepted when its score is `>= τ`. Misses therefore count
//! target scores strictly below `τ` and false alarms count negatives at or
//! above it, so a score exactly at the threshold is never both.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CostModel, TrialLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub p_miss_tar: f64,
    pub p_fa_non: f64,
    pub p_fa_spf: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

/// a-DCF evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcfReport {
    pub min_adcf: f64,
    #[serde(with = "extended_float")]
    pub min_threshold: f64,
    pub act_adcf: Option<f64>,
    #[serde(with = "extended_float::option")]
    pub act_threshold: Option<f64>,
    pub normalized: bool,
    pub rates_at_min: ErrorRates,
}

/// Per-class error counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    miss_tar: usize,
    fa_non: usize,
    fa_spf: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ClassSizes {
    tar: usize,
    non: usize,
    spf: usize,
}

fn class_sizes(trials: &[(f64, TrialLabel)]) -> Result<ClassSizes> {
    let (tar, non, spf) = trials
        .par_iter()
        .fold(
            || (0usize, 0usize, 0usize),
            |(t, n, s), (_, l)| match l {
                TrialLabel::TargetBonafide => (t + 1, n, s),
                TrialLabel::NontargetBonafide => (t, n + 1, s),
                TrialLabel::Spoof => (t, n, s + 1),
            },
        )
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    for (n, label) in [
        (tar, TrialLabel::TargetBonafide),
        (non, TrialLabel::NontargetBonafide),
        (spf, TrialLabel::Spoof),
    ] {
        if n == 0 {
            return Err(Error::EmptyClass {
                module: "metrics",
                class: label.class_name(),
            });
        }
    }
    Ok(ClassSizes { tar, non, spf })
}

fn rates(c: Counts, n: ClassSizes, threshold: f64) -> ErrorRates {
    ErrorRates {
        p_miss_tar: c.miss_tar as f64 / n.tar as f64,
        p_fa_non: c.fa_non as f64 / n.non as f64,
        p_fa_spf: c.fa_spf as f64 / n.spf as f64,
        threshold,
    }
}

/// Expected cost of the given error rates; every a-DCF value in the crate
/// goes through here so equal counts give bit-identical costs.
pub fn adcf_from_rates(r: &ErrorRates, cm: &CostModel, normalized: bool) -> f64 {
    let [w_tar, w_non, w_spf] = cm.weights();
    let cost = w_tar * r.p_miss_tar + w_non * r.p_fa_non + w_spf * r.p_fa_spf;
    if normalized {
        cost / cm.default_cost()
    } else {
        cost
    }
}

pub fn error_rates(trials: &[(f64, TrialLabel)], tau: f64) -> Result<ErrorRates> {
    let sizes = class_sizes(trials)?;
    let counts = trials
        .par_iter()
        .fold(Counts::default, |mut c, &(s, l)| {
            let accept = s >= tau;
            match l {
                TrialLabel::TargetBonafide if !accept => c.miss_tar += 1,
                TrialLabel::NontargetBonafide if accept => c.fa_non += 1,
                TrialLabel::Spoof if accept => c.fa_spf += 1,
                _ => {}
            }
            c
        })
        .reduce(Counts::default, |a, b| Counts {
            miss_tar: a.miss_tar + b.miss_tar,
            fa_non: a.fa_non + b.fa_non,
            fa_spf: a.fa_spf + b.fa_spf,
        });
    Ok(rates(counts, sizes, tau))
}

pub fn adcf_at(trials: &[(f64, TrialLabel)], tau: f64, cm: &CostModel, normalized: bool) -> Result<f64> {
    Ok(adcf_from_rates(&error_rates(trials, tau)?, cm, normalized))
}

/// Threshold strictly separating `lo < hi`: everything `<= lo` is rejected
/// and everything `>= hi` accepted.
fn split_point(lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * lo + 0.5 * hi;
    if mid > lo {
        mid
    } else {
        hi
    }
}

fn sorted_trials(trials: &[(f64, TrialLabel)]) -> Result<Vec<(f64, TrialLabel)>> {
    if trials.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidConfig("metrics", "NaN score".into()));
    }
    let mut v = trials.to_vec();
    v.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(v)
}

/// Every candidate threshold of the sweep, in increasing order, with the
/// error rates it produces: `-inf`, the split points between consecutive
/// distinct scores, and `+inf`.
pub fn threshold_sweep(trials: &[(f64, TrialLabel)]) -> Result<Vec<ErrorRates>> {
    let sizes = class_sizes(trials)?;
    let sorted = sorted_trials(trials)?;
    let mut below = Counts::default();
    let mut out = Vec::with_capacity(sorted.len() + 2);
    let counts_at = |below: Counts| Counts {
        miss_tar: below.miss_tar,
        fa_non: sizes.non - below.fa_non,
        fa_spf: sizes.spf - below.fa_spf,
    };
    out.push(rates(counts_at(below), sizes, f64::NEG_INFINITY));
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            // `below` tracks per-class counts of scores under the threshold.
            match sorted[i].1 {
                TrialLabel::TargetBonafide => below.miss_tar += 1,
                TrialLabel::NontargetBonafide => below.fa_non += 1,
                TrialLabel::Spoof => below.fa_spf += 1,
            }
            i += 1;
        }
        let tau = if i < sorted.len() {
            split_point(v, sorted[i].0)
        } else {
            f64::INFINITY
        };
        out.push(rates(counts_at(below), sizes, tau));
    }
    Ok(out)
}

/// Minimum a-DCF over all thresholds. The first (lowest) minimising
/// threshold is reported.
pub fn min_adcf(trials: &[(f64, TrialLabel)], cm: &CostModel, normalized: bool) -> Result<AdcfReport> {
    let sweep = threshold_sweep(trials)?;
    let mut best = sweep[0];
    let mut best_cost = adcf_from_rates(&best, cm, normalized);
    for r in &sweep[1..] {
        let c = adcf_from_rates(r, cm, normalized);
        if c < best_cost {
            best_cost = c;
            best = *r;
        }
    }
    Ok(AdcfReport {
        min_adcf: best_cost,
        min_threshold: best.threshold,
        act_adcf: None,
        act_threshold: None,
        normalized,
        rates_at_min: best,
    })
}

/// a-DCF of evaluation trials at a threshold fixed beforehand (typically the
/// development-set minimiser).
pub fn actual_adcf(trials: &[(f64, TrialLabel)], dev_threshold: f64, cm: &CostModel, normalized: bool) -> Result<f64> {
    if !dev_threshold.is_finite() {
        return Err(Error::InvalidConfig(
            "metrics",
            format!("threshold {dev_threshold} is not finite"),
        ));
    }
    adcf_at(trials, dev_threshold, cm, normalized)
}

/// Minimum a-DCF plus, when a threshold is given, the actual a-DCF there.
pub fn evaluate(
    trials: &[(f64, TrialLabel)],
    cm: &CostModel,
    normalized: bool,
    threshold: Option<f64>,
) -> Result<AdcfReport> {
    let mut report = min_adcf(trials, cm, normalized)?;
    if let Some(t) = threshold {
        report.act_adcf = Some(actual_adcf(trials, t, cm, normalized)?);
        report.act_threshold = Some(t);
    }
    Ok(report)
}

/// ROC vertices `(threshold, p_miss, p_fa)` for thresholds at every distinct
/// score and `+inf`, in increasing threshold order.
fn roc_vertices(pos: &[f64], neg: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyClass {
            module: "metrics",
            class: if pos.is_empty() { "positive" } else { "negative" },
        });
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("metrics", "NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut out = Vec::with_capacity(all.len() + 1);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        out.push((v, pos_below as f64 / np, (neg.len() - neg_below) as f64 / nn));
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    out.push((f64::INFINITY, 1.0, 0.0));
    Ok(out)
}

/// Equal error rate and the threshold where it occurs. The crossing of the
/// miss and false-alarm staircases is linearly interpolated between adjacent
/// ROC vertices.
pub fn eer(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    let v = roc_vertices(pos, neg)?;
    let k = v
        .iter()
        .position(|&(_, m, f)| m >= f)
        .expect("last vertex always has p_miss >= p_fa");
    let (t1, m1, f1) = v[k];
    if m1 == f1 || k == 0 {
        return Ok((m1, t1));
    }
    let (t0, m0, f0) = v[k - 1];
    // Intersection of the segment (f0,m0)-(f1,m1) with the diagonal, written
    // so that swapping the roles of misses and false alarms is exact.
    let rate = (m0 * f1 - m1 * f0) / ((f1 - f0) - (m1 - m0));
    let frac = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    let tau = if t1.is_finite() { t0 + frac * (t1 - t0) } else { t0 };
    Ok((rate, tau))
}

/// DET/ROC staircase as `(p_fa, p_miss)` points ordered by increasing
/// `p_fa`, consecutive duplicates removed.
pub fn det_points(pos: &[f64], neg: &[f64]) -> Result<Vec<(f64, f64)>> {
    let v = roc_vertices(pos, neg)?;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for &(_, m, f) in v.iter().rev() {
        if out.last() != Some(&(f, m)) {
            out.push((f, m));
        }
    }
    Ok(out)
}

/// Scores of the three classes, split out of a labelled list.
pub fn split_by_class(trials: &[(f64, TrialLabel)]) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for &(s, l) in trials {
        let i = match l {
            TrialLabel::TargetBonafide => 0,
            TrialLabel::NontargetBonafide => 1,
            TrialLabel::Spoof => 2,
        };
        out[i].push(s);
    }
    out
}

/// Serialises non-finite thresholds as the strings `"inf"`, `"-inf"`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid number {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}
