//! Equal error rate, per-gender confusion counts and the group fairness
//! metrics.
//!
//! Spoof is the positive class. Paired metrics are signed female minus male.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::data::{Gender, Label, Trial};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no trials for gender {0}")]
    EmptyGroup(Gender),
    #[error("gender {0} has no {1} trials")]
    MissingLabelInGroup(Gender, Label),
    #[error("empty score class")]
    EmptyClass,
    #[error("non-finite threshold")]
    NonFiniteThreshold,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Whether a trial with `score` is predicted spoof at `threshold`.
#[inline]
pub fn predicts_spoof(score: f64, threshold: f64) -> bool {
    score < threshold
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }

    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn positive_rate(&self) -> f64 {
        (self.tp + self.fp) as f64 / self.total() as f64
    }
}

/// Confusion counts for each gender.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub female: Counts,
    pub male: Counts,
}

impl GroupConfusion {
    pub fn get(&self, g: Gender) -> &Counts {
        match g {
            Gender::F => &self.female,
            Gender::M => &self.male,
        }
    }

    fn get_mut(&mut self, g: Gender) -> &mut Counts {
        match g {
            Gender::F => &mut self.female,
            Gender::M => &mut self.male,
        }
    }
}

/// Per-gender confusion counts, each gender classified against its own
/// threshold.
pub fn confusion(trials: &[Trial], threshold_f: f64, threshold_m: f64) -> Result<GroupConfusion> {
    if !threshold_f.is_finite() || !threshold_m.is_finite() {
        return Err(MetricsError::NonFiniteThreshold);
    }
    let mut c = GroupConfusion::default();
    for t in trials {
        let th = match t.gender {
            Gender::F => threshold_f,
            Gender::M => threshold_m,
        };
        let spoof_pred = predicts_spoof(t.score, th);
        let cell = c.get_mut(t.gender);
        match (t.label, spoof_pred) {
            (Label::Spoof, true) => cell.tp += 1,
            (Label::Spoof, false) => cell.fn_ += 1,
            (Label::Bonafide, true) => cell.fp += 1,
            (Label::Bonafide, false) => cell.tn += 1,
        }
    }
    for g in Gender::ALL {
        if c.get(g).total() == 0 {
            return Err(MetricsError::EmptyGroup(g));
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Midpoint of two finite floats without overflow.
#[inline]
pub fn midpoint(a: f64, b: f64) -> f64 {
    a / 2.0 + b / 2.0
}

/// Candidate thresholds for an EER sweep: one below every score, the
/// midpoints between consecutive distinct pooled scores, one above every
/// score. The outer candidates stand in for -inf/+inf and classify
/// identically to them.
pub fn eer_candidates(sorted_unique: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sorted_unique.len() + 1);
    let (Some(&lo), Some(&hi)) = (sorted_unique.first(), sorted_unique.last()) else {
        return out;
    };
    out.push(lo - 1.0);
    for w in sorted_unique.windows(2) {
        out.push(midpoint(w[0], w[1]));
    }
    out.push(hi + 1.0);
    out
}

/// Equal error rate by a sorted sweep. FAR(θ) is the fraction of spoof
/// scores ≥ θ, FRR(θ) the fraction of bonafide scores < θ. Among candidates
/// minimising |FAR − FRR| the smallest threshold wins, and the EER is the
/// mean of FAR and FRR there.
pub fn eer(bona_scores: &[f64], spoof_scores: &[f64]) -> Result<EerResult> {
    if bona_scores.is_empty() || spoof_scores.is_empty() {
        return Err(MetricsError::EmptyClass);
    }
    let mut bona = bona_scores.to_vec();
    let mut spoof = spoof_scores.to_vec();
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut pooled: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();

    let nb = bona.len() as f64;
    let ns = spoof.len() as f64;
    // bona_below: #bona < θ; spoof_below: #spoof < θ. Both advance
    // monotonically as θ increases.
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let mut best: Option<(f64, f64, f64)> = None; // (|far-frr|, eer, θ)
    for theta in eer_candidates(&pooled) {
        while bona_below < bona.len() && bona[bona_below] < theta {
            bona_below += 1;
        }
        while spoof_below < spoof.len() && spoof[spoof_below] < theta {
            spoof_below += 1;
        }
        let far = (spoof.len() - spoof_below) as f64 / ns;
        let frr = bona_below as f64 / nb;
        let diff = (far - frr).abs();
        if best.is_none_or(|(d, _, _)| diff < d) {
            best = Some((diff, (far + frr) / 2.0, theta));
        }
    }
    let (_, eer, threshold) = best.expect("at least two candidates");
    Ok(EerResult { eer, threshold })
}

/// EER restricted to one gender's trials.
pub fn gender_eer(trials: &[Trial], gender: Gender) -> Result<EerResult> {
    let (bona, spoof) = split_scores(trials.iter().filter(|t| t.gender == gender));
    if bona.is_empty() && spoof.is_empty() {
        return Err(MetricsError::EmptyGroup(gender));
    }
    if bona.is_empty() {
        return Err(MetricsError::MissingLabelInGroup(gender, Label::Bonafide));
    }
    if spoof.is_empty() {
        return Err(MetricsError::MissingLabelInGroup(gender, Label::Spoof));
    }
    eer(&bona, &spoof)
}

/// EER over all trials regardless of gender.
pub fn pooled_eer(trials: &[Trial]) -> Result<EerResult> {
    let (bona, spoof) = split_scores(trials.iter());
    eer(&bona, &spoof)
}

pub fn split_scores<'a>(trials: impl Iterator<Item = &'a Trial>) -> (Vec<f64>, Vec<f64>) {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for t in trials {
        match t.label {
            Label::Bonafide => bona.push(t.score),
            Label::Spoof => spoof.push(t.score),
        }
    }
    (bona, spoof)
}

/// How the equal-opportunity column is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EopMode {
    /// `P(Ŷ=1 | Y=0, G=g)`, the false positive rate.
    #[default]
    FalsePositiveRate,
    /// `P(Ŷ=1 | Y=1, G=g)`, the true positive rate on spoof trials.
    TruePositiveRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DegenerateFlag {
    /// No positive predictions for the gender, PPV undefined.
    PpvFemale,
    PpvMale,
    /// Zero false negatives for the gender, treatment equality undefined.
    TedFemale,
    TedMale,
    /// No spoof trials for the gender under the TPR form of EOP.
    EopFemale,
    EopMale,
}

/// One row of a mitigation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub eer_f: f64,
    pub eer_m: f64,
    pub eer_gap: f64,
    pub d_fpr: f64,
    pub spd: f64,
    #[serde(serialize_with = "ser_metric")]
    pub eop: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ppd: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ted: f64,
    pub threshold_f: f64,
    pub threshold_m: f64,
    pub confusion: GroupConfusion,
    pub flags: BTreeSet<DegenerateFlag>,
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("undefined")
    }
}

/// Difference of two possibly undefined per-gender quantities. An undefined
/// female side gives +inf, an undefined male side -inf, both NaN.
fn signed_difference(f: Option<f64>, m: Option<f64>) -> f64 {
    match (f, m) {
        (Some(a), Some(b)) => a - b,
        (None, Some(_)) => f64::INFINITY,
        (Some(_), None) => f64::NEG_INFINITY,
        (None, None) => f64::NAN,
    }
}

pub fn fairness_report(
    trials: &[Trial],
    threshold_f: f64,
    threshold_m: f64,
    eop_mode: EopMode,
) -> Result<FairnessReport> {
    let c = confusion(trials, threshold_f, threshold_m)?;
    for g in Gender::ALL {
        let k = c.get(g);
        if k.fp + k.tn == 0 {
            return Err(MetricsError::MissingLabelInGroup(g, Label::Bonafide));
        }
        if k.tp + k.fn_ == 0 {
            return Err(MetricsError::MissingLabelInGroup(g, Label::Spoof));
        }
    }
    let eer_f = gender_eer(trials, Gender::F)?.eer;
    let eer_m = gender_eer(trials, Gender::M)?.eer;

    let mut flags = BTreeSet::new();
    let (f, m) = (&c.female, &c.male);
    let d_fpr = f.fpr() - m.fpr();
    let spd = f.positive_rate() - m.positive_rate();
    let eop = match eop_mode {
        EopMode::FalsePositiveRate => f.fpr() - m.fpr(),
        EopMode::TruePositiveRate => f.tpr() - m.tpr(),
    };

    let ppv = |k: &Counts| (k.tp + k.fp > 0).then(|| k.tp as f64 / (k.tp + k.fp) as f64);
    let (ppv_f, ppv_m) = (ppv(f), ppv(m));
    if ppv_f.is_none() {
        flags.insert(DegenerateFlag::PpvFemale);
    }
    if ppv_m.is_none() {
        flags.insert(DegenerateFlag::PpvMale);
    }
    let te = |k: &Counts| (k.fn_ > 0).then(|| k.fp as f64 / k.fn_ as f64);
    let (te_f, te_m) = (te(f), te(m));
    if te_f.is_none() {
        flags.insert(DegenerateFlag::TedFemale);
    }
    if te_m.is_none() {
        flags.insert(DegenerateFlag::TedMale);
    }

    Ok(FairnessReport {
        eer_f,
        eer_m,
        eer_gap: eer_f - eer_m,
        d_fpr,
        spd,
        eop,
        ppd: signed_difference(ppv_f, ppv_m),
        ted: signed_difference(te_f, te_m),
        threshold_f,
        threshold_m,
        confusion: c,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScoreSummary {
    pub gender: Gender,
    pub label: Label,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<u64>,
}

/// Per gender×label score moments and histograms over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub edges: Vec<f64>,
    pub groups: Vec<GroupScoreSummary>,
}

impl ScoreSummary {
    pub fn group(&self, gender: Gender, label: Label) -> Option<&GroupScoreSummary> {
        self.groups
            .iter()
            .find(|g| g.gender == gender && g.label == label)
    }
}

/// Shared equal-width bin edges over `[min, max]`. Constant data gets a unit
/// wide range centred on the value.
pub fn bin_edges(scores: impl Iterator<Item = f64>, bins: usize) -> Vec<f64> {
    let bins = bins.max(1);
    let (lo, hi) = scores.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect()
}

pub fn bin_index(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    let width = (edges[bins] - edges[0]) / bins as f64;
    (((x - edges[0]) / width).floor().max(0.0) as usize).min(bins - 1)
}

pub fn score_summary(trials: &[Trial], bins: usize) -> Result<ScoreSummary> {
    for g in Gender::ALL {
        if !trials.iter().any(|t| t.gender == g) {
            return Err(MetricsError::EmptyGroup(g));
        }
    }
    let edges = bin_edges(trials.iter().map(|t| t.score), bins);
    let mut groups = Vec::new();
    for g in Gender::ALL {
        for l in Label::ALL {
            let scores: Vec<f64> = trials
                .iter()
                .filter(|t| t.gender == g && t.label == l)
                .map(|t| t.score)
                .collect();
            let n = scores.len();
            let (mean, std) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = scores.iter().sum::<f64>() / n as f64;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            };
            let mut histogram = vec![0u64; edges.len() - 1];
            for s in &scores {
                histogram[bin_index(&edges, *s)] += 1;
            }
            groups.push(GroupScoreSummary {
                gender: g,
                label: l,
                count: n,
                mean,
                std,
                histogram,
            });
        }
    }
    Ok(ScoreSummary { edges, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    pub(crate) fn trial(id: &str, score: f64, label: Label, gender: Gender) -> Trial {
        Trial {
            utt_id: id.into(),
            score,
            label,
            gender,
            attack_id: (label == Label::Spoof).then(|| "A01".to_string()),
            split: Split::Eval,
        }
    }

    #[test]
    fn confusion_one_each_side() {
        let ts = vec![
            trial("a", 3.0, Label::Bonafide, Gender::F),
            trial("b", 1.0, Label::Bonafide, Gender::F),
            trial("c", 1.0, Label::Spoof, Gender::M),
        ];
        let c = confusion(&ts, 2.0, 2.0).unwrap();
        assert_eq!(c.female.tn, 1);
        assert_eq!(c.female.fp, 1);
    }

    #[test]
    fn confusion_hand_set() {
        let ts = vec![
            trial("a", 3.0, Label::Bonafide, Gender::F),
            trial("b", 1.0, Label::Spoof, Gender::F),
            trial("c", 2.5, Label::Bonafide, Gender::M),
            trial("d", 0.5, Label::Spoof, Gender::M),
        ];
        let c = confusion(&ts, 2.0, 2.0).unwrap();
        let want = Counts {
            tp: 1,
            fp: 0,
            tn: 1,
            fn_: 0,
        };
        assert_eq!(c.female, want);
        assert_eq!(c.male, want);
    }

    #[test]
    fn confusion_empty_gender() {
        let ts = vec![trial("a", 3.0, Label::Bonafide, Gender::F)];
        assert_eq!(
            confusion(&ts, 0.0, 0.0),
            Err(MetricsError::EmptyGroup(Gender::M))
        );
    }

    #[test]
    fn eer_examples() {
        let r = eer(&[2.0, 3.0, 4.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.eer, 0.0);
        let r = eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap();
        assert_eq!(r.eer, 1.0);
        let r = eer(&[1.0, 3.0], &[2.0, 4.0]).unwrap();
        assert_eq!(r.eer, 0.5);
        assert!(r.threshold > 2.0 && r.threshold < 3.0);
        assert_eq!(eer(&[], &[1.0]), Err(MetricsError::EmptyClass));
    }

    #[test]
    fn eer_constant_scores_threshold_is_finite() {
        let r = eer(&[1.0, 1.0], &[1.0]).unwrap();
        assert!(r.threshold.is_finite());
        assert_eq!(r.eer, 0.5);
    }

    #[test]
    fn eer_gap_from_table_values() {
        // Baseline row of the reference mitigation table, as fractions.
        let gap: f64 = 0.2492 - 0.2137;
        assert!((gap - 0.0355).abs() < 1e-12);
    }

    #[test]
    fn d_fpr_direct_arithmetic() {
        let mut ts = Vec::new();
        let mut n = 0;
        let mut push = |score: f64, label, gender, count: usize| {
            for _ in 0..count {
                n += 1;
                ts.push(trial(&format!("t{n}"), score, label, gender));
            }
        };
        // threshold 0: scores below are predicted spoof
        push(-1.0, Label::Bonafide, Gender::F, 2);
        push(1.0, Label::Bonafide, Gender::F, 8);
        push(-1.0, Label::Bonafide, Gender::M, 1);
        push(1.0, Label::Bonafide, Gender::M, 9);
        push(-1.0, Label::Spoof, Gender::F, 5);
        push(1.0, Label::Spoof, Gender::F, 1);
        push(-1.0, Label::Spoof, Gender::M, 5);
        push(1.0, Label::Spoof, Gender::M, 1);
        let r = fairness_report(&ts, 0.0, 0.0, EopMode::default()).unwrap();
        assert!((r.d_fpr - 0.1).abs() < 1e-12);
        assert_eq!(r.eop, r.d_fpr);
    }

    #[test]
    fn degenerate_ted_flagged_not_crashing() {
        let ts = vec![
            trial("a", 1.0, Label::Bonafide, Gender::F),
            trial("b", -1.0, Label::Spoof, Gender::F),
            trial("c", 1.0, Label::Bonafide, Gender::M),
            trial("d", 1.0, Label::Spoof, Gender::M),
        ];
        let r = fairness_report(&ts, 0.0, 0.0, EopMode::default()).unwrap();
        assert!(r.flags.contains(&DegenerateFlag::TedFemale));
        assert_eq!(r.ted, f64::INFINITY);
        assert!(r.flags.contains(&DegenerateFlag::PpvMale));
        assert_eq!(r.ppd, f64::NEG_INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"ted\":\"undefined\""));
    }

    #[test]
    fn missing_label_in_group() {
        let ts = vec![
            trial("a", 1.0, Label::Bonafide, Gender::F),
            trial("c", 1.0, Label::Bonafide, Gender::M),
            trial("d", 1.0, Label::Spoof, Gender::M),
        ];
        assert_eq!(
            fairness_report(&ts, 0.0, 0.0, EopMode::default()).unwrap_err(),
            MetricsError::MissingLabelInGroup(Gender::F, Label::Spoof)
        );
    }

    #[test]
    fn summary_constant_scores() {
        let ts = vec![
            trial("a", 1.0, Label::Bonafide, Gender::F),
            trial("b", 1.0, Label::Bonafide, Gender::F),
            trial("c", 1.0, Label::Bonafide, Gender::F),
            trial("d", 1.0, Label::Bonafide, Gender::M),
        ];
        let s = score_summary(&ts, 40).unwrap();
        let g = s.group(Gender::F, Label::Bonafide).unwrap();
        assert_eq!(g.mean, 1.0);
        assert_eq!(g.std, 0.0);
        assert_eq!(g.histogram.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.edges.len(), 41);
    }

    #[test]
    fn summary_identical_groups_identical_histograms() {
        let mut ts = Vec::new();
        for (i, s) in [0.1, 0.5, 0.9, 2.0].iter().enumerate() {
            ts.push(trial(&format!("f{i}"), *s, Label::Spoof, Gender::F));
            ts.push(trial(&format!("m{i}"), *s, Label::Spoof, Gender::M));
        }
        let s = score_summary(&ts, 10).unwrap();
        assert_eq!(
            s.group(Gender::F, Label::Spoof).unwrap().histogram,
            s.group(Gender::M, Label::Spoof).unwrap().histogram
        );
        assert_eq!(
            score_summary(&ts[..1], 10).unwrap_err(),
            MetricsError::EmptyGroup(Gender::M)
        );
    }
}
