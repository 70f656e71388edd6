//! Bias source diagnosis: eight checks at the data, model and decision level,
//! and the mapping from confirmed sources to mitigation strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::data::{Dataset, EmbeddingRecord, Gender, Label, Split, Trial};
use crate::metrics::{self, MetricsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosisError {
    #[error("contingency table has a zero marginal")]
    ZeroMarginal,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("probe needs both genders")]
    SingleGender,
    #[error("split fraction must lie strictly between 0 and 1")]
    InvalidSplitFraction,
    #[error("no embeddings")]
    NoEmbeddings,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("all attribution mass is zero")]
    ZeroTotalMass,
}

pub type Result<T> = std::result::Result<T, DiagnosisError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Result {
    pub statistic: f64,
    pub dof: u32,
    pub p_value: f64,
}

/// Upper tail of the chi-squared distribution, `Q(dof/2, x/2)`.
pub fn chi2_sf(statistic: f64, dof: u32) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    if statistic.is_infinite() {
        return 0.0;
    }
    gamma_ur(dof as f64 / 2.0, statistic / 2.0)
}

/// Pearson chi-squared test of independence on a 2×2 table, without
/// continuity correction.
pub fn chi2_test(table: [[u64; 2]; 2]) -> Result<Chi2Result> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) || cols.contains(&0) {
        return Err(DiagnosisError::ZeroMarginal);
    }
    let total = (rows[0] + rows[1]) as f64;
    let mut statistic = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = rows[i] as f64 * cols[j] as f64 / total;
            statistic += (obs as f64 - expected).powi(2) / expected;
        }
    }
    Ok(Chi2Result {
        statistic,
        dof: 1,
        p_value: chi2_sf(statistic, 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    TrainingImbalance,
    EvalProtocolAsymmetry,
    AttackNonOverlap,
    ScoreSeparationGap,
    GenderLeakage,
    LeakageLocalisation,
    SingleThresholdBias,
    TrainingObjectiveBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Data,
    Model,
    Decision,
}

impl CheckId {
    pub const ALL: [CheckId; 8] = [
        CheckId::TrainingImbalance,
        CheckId::EvalProtocolAsymmetry,
        CheckId::AttackNonOverlap,
        CheckId::ScoreSeparationGap,
        CheckId::GenderLeakage,
        CheckId::LeakageLocalisation,
        CheckId::SingleThresholdBias,
        CheckId::TrainingObjectiveBias,
    ];

    pub fn level(self) -> Level {
        match self {
            CheckId::TrainingImbalance | CheckId::EvalProtocolAsymmetry | CheckId::AttackNonOverlap => {
                Level::Data
            }
            CheckId::ScoreSeparationGap | CheckId::GenderLeakage | CheckId::LeakageLocalisation => {
                Level::Model
            }
            CheckId::SingleThresholdBias | CheckId::TrainingObjectiveBias => Level::Decision,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            CheckId::TrainingImbalance => "Training imbalance",
            CheckId::EvalProtocolAsymmetry => "Eval protocol asymmetry",
            CheckId::AttackNonOverlap => "Attack non-overlap",
            CheckId::ScoreSeparationGap => "Score separation gap",
            CheckId::GenderLeakage => "Gender leakage accuracy",
            CheckId::LeakageLocalisation => "Attribution leakage type",
            CheckId::SingleThresholdBias => "Single threshold bias",
            CheckId::TrainingObjectiveBias => "Training objective bias",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Data => "Data",
            Level::Model => "Model",
            Level::Decision => "Decision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Status {
    Confirmed,
    Weak,
    RuledOut,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Confirmed => "Confirmed",
            Status::Weak => "Weak",
            Status::RuledOut => "Ruled out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckId,
    pub statistics: BTreeMap<String, f64>,
    pub status: Status,
    pub evidence: String,
}

impl CheckResult {
    fn new(check: CheckId, status: Status, evidence: impl Into<String>) -> Self {
        CheckResult {
            check,
            statistics: BTreeMap::new(),
            status,
            evidence: evidence.into(),
        }
    }

    fn stat(mut self, name: &str, value: f64) -> Self {
        self.statistics.insert(name.to_string(), value);
        self
    }

    /// A check that could not run. Reported as weak evidence so that it
    /// neither gates nor clears the run.
    pub fn failed(check: CheckId, reason: impl fmt::Display) -> Self {
        CheckResult::new(check, Status::Weak, format!("check failed: {reason}"))
    }
}

/// Status cut-offs. Every threshold is overridable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Chi-squared significance level for the data-level checks.
    pub p_value: f64,
    /// Minimum |sep_F − sep_M| for a confirmed score separation gap.
    pub separation_gap: f64,
    /// Probe accuracy margin over chance for confirmed leakage.
    pub leakage_confirmed: f64,
    /// Probe accuracy margin over chance for weak leakage.
    pub leakage_weak: f64,
    /// Top-k attribution share at or above which leakage is localised.
    pub localisation_share: f64,
    pub top_k: usize,
    /// Minimum |d_FPR| for confirmed objective bias.
    pub d_fpr: f64,
    /// Extra absolute slack on the per-gender threshold gap, on top of the
    /// score granularity slack.
    pub threshold_gap_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            p_value: 0.05,
            separation_gap: 0.1,
            leakage_confirmed: 0.10,
            leakage_weak: 0.02,
            localisation_share: 0.5,
            top_k: 3,
            d_fpr: 0.02,
            threshold_gap_min: 0.0,
        }
    }
}

impl Thresholds {
    pub fn chi2_status(&self, p_value: f64) -> Status {
        if p_value < self.p_value {
            Status::Confirmed
        } else {
            Status::RuledOut
        }
    }

    pub fn separation_status(&self, gap: f64) -> Status {
        if gap >= self.separation_gap {
            Status::Confirmed
        } else if gap > 0.0 {
            Status::Weak
        } else {
            Status::RuledOut
        }
    }

    pub fn leakage_status(&self, test_accuracy: f64) -> Status {
        let margin = test_accuracy - 0.5;
        if margin >= self.leakage_confirmed {
            Status::Confirmed
        } else if margin >= self.leakage_weak {
            Status::Weak
        } else {
            Status::RuledOut
        }
    }

    pub fn localisation(&self, top_k_share: f64) -> Localisation {
        if top_k_share >= self.localisation_share {
            Localisation::Localised
        } else {
            Localisation::Diffuse
        }
    }

    pub fn d_fpr_status(&self, d_fpr: f64) -> Status {
        if d_fpr.abs() >= self.d_fpr {
            Status::Confirmed
        } else {
            Status::RuledOut
        }
    }

    pub fn threshold_gap_status(&self, gap: f64, granularity_slack: f64) -> Status {
        if gap > granularity_slack.max(self.threshold_gap_min) {
            Status::Confirmed
        } else {
            Status::RuledOut
        }
    }
}

fn gender_label_table<'a>(trials: impl Iterator<Item = &'a Trial>) -> [[u64; 2]; 2] {
    let mut table = [[0u64; 2]; 2];
    for t in trials {
        let r = match t.gender {
            Gender::F => 0,
            Gender::M => 1,
        };
        let c = match t.label {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        };
        table[r][c] += 1;
    }
    table
}

fn require_both_genders(trials: &[Trial]) -> Result<()> {
    for g in Gender::ALL {
        if !trials.iter().any(|t| t.gender == g) {
            return Err(MetricsError::EmptyGroup(g).into());
        }
    }
    Ok(())
}

/// Gender × label independence on the training split.
pub fn check_training_balance(train: &[Trial], th: &Thresholds) -> Result<CheckResult> {
    let table = gender_label_table(train.iter());
    let chi = chi2_test(table)?;
    let status = th.chi2_status(chi.p_value);
    Ok(CheckResult::new(
        CheckId::TrainingImbalance,
        status,
        format!(
            "chi2={:.3}, p={:.3e}; F {}:{} M {}:{} (bonafide:spoof)",
            chi.statistic, chi.p_value, table[0][0], table[0][1], table[1][0], table[1][1]
        ),
    )
    .stat("chi2", chi.statistic)
    .stat("p_value", chi.p_value))
}

/// Gender × label independence on the evaluation split, with per-gender
/// bonafide:spoof ratios and attack distributions as evidence.
pub fn check_eval_asymmetry(eval: &[Trial], th: &Thresholds) -> Result<CheckResult> {
    require_both_genders(eval)?;
    let table = gender_label_table(eval.iter());
    let chi = chi2_test(table)?;
    let ratio = |row: [u64; 2]| row[1] as f64 / row[0] as f64;
    let (ratio_f, ratio_m) = (ratio(table[0]), ratio(table[1]));

    let mut attacks: BTreeMap<Gender, BTreeMap<&str, u64>> = BTreeMap::new();
    for t in eval {
        if let Some(a) = &t.attack_id {
            *attacks.entry(t.gender).or_default().entry(a).or_default() += 1;
        }
    }
    let dist: Vec<String> = attacks
        .iter()
        .map(|(g, m)| {
            let parts: Vec<String> = m.iter().map(|(a, n)| format!("{a}={n}")).collect();
            format!("{g}[{}]", parts.join(" "))
        })
        .collect();

    Ok(CheckResult::new(
        CheckId::EvalProtocolAsymmetry,
        th.chi2_status(chi.p_value),
        format!(
            "chi2={:.3}, p={:.3e}; bonafide:spoof F 1:{ratio_f:.2} M 1:{ratio_m:.2}; attacks {}",
            chi.statistic,
            chi.p_value,
            dist.join(" ")
        ),
    )
    .stat("chi2", chi.statistic)
    .stat("p_value", chi.p_value)
    .stat("spoof_per_bonafide_f", ratio_f)
    .stat("spoof_per_bonafide_m", ratio_m))
}

fn attack_set(trials: &[Trial]) -> BTreeSet<&str> {
    trials.iter().filter_map(|t| t.attack_id.as_deref()).collect()
}

fn describe_attacks(set: &BTreeSet<&str>) -> String {
    match (set.first(), set.last()) {
        (Some(a), Some(b)) if set.len() > 2 => format!("{a}-{b} ({} types)", set.len()),
        _ => set.iter().copied().collect::<Vec<_>>().join(","),
    }
}

/// Structural asymmetry between training and evaluation attack types.
pub fn check_attack_overlap(train: &[Trial], eval: &[Trial]) -> CheckResult {
    let tr = attack_set(train);
    let ev = attack_set(eval);
    let shared = tr.intersection(&ev).count();
    let summary = format!("{} vs. {}", describe_attacks(&tr), describe_attacks(&ev));
    let result = if ev.is_empty() {
        CheckResult::new(CheckId::AttackNonOverlap, Status::Weak, "no eval attacks")
    } else if tr.is_empty() {
        CheckResult::new(CheckId::AttackNonOverlap, Status::Weak, "no train attacks")
    } else if shared == 0 {
        CheckResult::new(
            CheckId::AttackNonOverlap,
            Status::Confirmed,
            format!("{summary}; no shared attack types"),
        )
    } else {
        CheckResult::new(
            CheckId::AttackNonOverlap,
            Status::RuledOut,
            format!("{summary}; {shared} shared attack types"),
        )
    };
    result
        .stat("train_attacks", tr.len() as f64)
        .stat("eval_attacks", ev.len() as f64)
        .stat("shared_attacks", shared as f64)
}

/// Mean summed in sorted order, so equal multisets give bit-equal means.
fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean bonafide score minus mean spoof score for one gender.
pub fn score_separation(trials: &[Trial], gender: Gender) -> Result<f64> {
    let of = |label| {
        mean(
            trials
                .iter()
                .filter(|t| t.gender == gender && t.label == label)
                .map(|t| t.score),
        )
    };
    if !trials.iter().any(|t| t.gender == gender) {
        return Err(MetricsError::EmptyGroup(gender).into());
    }
    let bona = of(Label::Bonafide).ok_or(MetricsError::MissingLabelInGroup(gender, Label::Bonafide))?;
    let spoof = of(Label::Spoof).ok_or(MetricsError::MissingLabelInGroup(gender, Label::Spoof))?;
    Ok(bona - spoof)
}

pub fn check_score_separation(trials: &[Trial], th: &Thresholds) -> Result<CheckResult> {
    let sep_f = score_separation(trials, Gender::F)?;
    let sep_m = score_separation(trials, Gender::M)?;
    let gap = (sep_f - sep_m).abs();
    Ok(CheckResult::new(
        CheckId::ScoreSeparationGap,
        th.separation_status(gap),
        format!("F = {sep_f:.3}, M = {sep_m:.3} (gap = {gap:.3})"),
    )
    .stat("separation_f", sep_f)
    .stat("separation_m", sep_m)
    .stat("gap", gap))
}

/// Settings for the gender leakage probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 0.1,
            iterations: 500,
            l2: 1e-4,
        }
    }
}

/// Logistic-regression gender probe. Weights act on raw (unstandardised)
/// embedding coordinates; a positive logit predicts female. The loss is
/// class-balanced and accuracies are balanced accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Training loss after each accepted step, starting at initialisation.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

impl ProbeModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predicts_female(&self, x: &[f64]) -> bool {
        self.logit(x) > 0.0
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded stratified split: within each gender, records are ordered by a
/// seeded hash of their utt_id and the first `fraction` go to training.
/// Returns (train indices, test indices).
pub fn stratified_split(
    records: &[EmbeddingRecord],
    seed: u64,
    fraction: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for g in Gender::ALL {
        let mut idx: Vec<(u64, usize)> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.gender == g)
            .map(|(i, r)| (fnv1a(seed, r.utt_id.as_bytes()), i))
            .collect();
        idx.sort_unstable();
        let n = idx.len();
        let mut n_train = (fraction * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        train.extend(idx[..n_train].iter().map(|&(_, i)| i));
        test.extend(idx[n_train..].iter().map(|&(_, i)| i));
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus L2 penalty and its gradient, on standardised rows.
/// Class-balanced mean logistic loss plus L2 penalty and its gradient, on
/// standardised rows.
fn probe_loss_grad(x: &[Vec<f64>], y: &[f64], sw: &[f64], w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for ((row, &target), &weight) in x.iter().zip(y).zip(sw) {
        let z = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        loss += weight * (softplus(z) - target * z);
        let r = weight * (sigmoid(z) - target);
        for (g, a) in gw.iter_mut().zip(row) {
            *g += r * a;
        }
        gb += r;
    }
    loss /= n;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    (loss, gw, gb / n)
}

/// Train the gender probe on a seeded stratified split of `records`.
pub fn train_probe(
    records: &[EmbeddingRecord],
    seed: u64,
    split_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(DiagnosisError::InvalidSplitFraction);
    }
    let dim = records.first().ok_or(DiagnosisError::NoEmbeddings)?.vector.len();
    if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
        return Err(DiagnosisError::DimensionMismatch {
            expected: dim,
            got: r.vector.len(),
        });
    }
    for g in Gender::ALL {
        if !records.iter().any(|r| r.gender == g) {
            return Err(DiagnosisError::SingleGender);
        }
    }
    let (train_idx, test_idx) = stratified_split(records, seed, split_fraction);
    fit_indexed(records, &train_idx, &test_idx, cfg)
}

/// Fit the probe on `train` and score it on `test`, without any splitting.
pub fn fit_probe(train: &[EmbeddingRecord], test: &[EmbeddingRecord], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let dim = train.first().ok_or(DiagnosisError::NoEmbeddings)?.vector.len();
    if let Some(r) = train.iter().chain(test).find(|r| r.vector.len() != dim) {
        return Err(DiagnosisError::DimensionMismatch {
            expected: dim,
            got: r.vector.len(),
        });
    }
    for g in Gender::ALL {
        if !train.iter().any(|r| r.gender == g) {
            return Err(DiagnosisError::SingleGender);
        }
    }
    let records: Vec<EmbeddingRecord> = train.iter().chain(test).cloned().collect();
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let test_idx: Vec<usize> = (train.len()..records.len()).collect();
    fit_indexed(&records, &train_idx, &test_idx, cfg)
}

fn fit_indexed(
    records: &[EmbeddingRecord],
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    let dim = records[train_idx[0]].vector.len();

    let n_train = train_idx.len() as f64;
    let mut centre = vec![0.0; dim];
    for &i in train_idx {
        for (c, v) in centre.iter_mut().zip(&records[i].vector) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= n_train);
    let mut scale = vec![0.0; dim];
    for &i in train_idx {
        for ((s, v), c) in scale.iter_mut().zip(&records[i].vector).zip(&centre) {
            *s += (v - c).powi(2);
        }
    }
    // Constant columns standardise to zero and keep a zero weight.
    scale.iter_mut().for_each(|s| {
        let sd = (*s / n_train).sqrt();
        *s = if sd > 0.0 { sd } else { f64::INFINITY };
    });

    let xs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| {
            records[i]
                .vector
                .iter()
                .zip(&centre)
                .zip(&scale)
                .map(|((v, c), s)| (v - c) / s)
                .collect()
        })
        .collect();
    let ys: Vec<f64> = train_idx
        .iter()
        .map(|&i| if records[i].gender == Gender::F { 1.0 } else { 0.0 })
        .collect();
    let n_female = ys.iter().filter(|&&y| y == 1.0).count() as f64;
    let n_male = n_train - n_female;
    let sw: Vec<f64> = ys
        .iter()
        .map(|&y| n_train / (2.0 * if y == 1.0 { n_female } else { n_male }))
        .collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut lr = cfg.learning_rate;
    let (mut loss, mut gw, mut gb) = probe_loss_grad(&xs, &ys, &sw, &w, b, cfg.l2);
    let mut loss_history = vec![loss];
    for _ in 0..cfg.iterations {
        loop {
            let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect();
            let cand_b = b - lr * gb;
            let (l, g2w, g2b) = probe_loss_grad(&xs, &ys, &sw, &cand_w, cand_b, cfg.l2);
            if l <= loss {
                w = cand_w;
                b = cand_b;
                loss = l;
                gw = g2w;
                gb = g2b;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
        loss_history.push(loss);
        if lr < 1e-12 {
            break;
        }
    }

    let weights: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
    let bias = b - weights.iter().zip(&centre).map(|(wi, c)| wi * c).sum::<f64>();
    let mut probe = ProbeModel {
        weights,
        bias,
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        loss_history,
    };
    // Balanced accuracy: mean of the per-gender hit rates, so chance is 0.5
    // whatever the gender mix.
    let accuracy = |idx: &[usize]| {
        let mut hits = [0usize; 2];
        let mut total = [0usize; 2];
        for &i in idx {
            let g = (records[i].gender == Gender::M) as usize;
            total[g] += 1;
            hits[g] += (probe.predicts_female(&records[i].vector) == (g == 0)) as usize;
        }
        let rates: Vec<f64> = (0..2)
            .filter(|&g| total[g] > 0)
            .map(|g| hits[g] as f64 / total[g] as f64)
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    };
    let (tr, te) = (accuracy(train_idx), accuracy(test_idx));
    probe.train_accuracy = tr;
    probe.test_accuracy = te;
    Ok(probe)
}

pub fn check_leakage(probe: &ProbeModel, th: &Thresholds) -> CheckResult {
    let margin = probe.test_accuracy - 0.5;
    CheckResult::new(
        CheckId::GenderLeakage,
        th.leakage_status(probe.test_accuracy),
        format!(
            "{:.1}% ({:+.1} pp above chance)",
            probe.test_accuracy * 100.0,
            margin * 100.0
        ),
    )
    .stat("test_accuracy", probe.test_accuracy)
    .stat("train_accuracy", probe.train_accuracy)
    .stat("margin", margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Localisation {
    Localised,
    Diffuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// (dimension, mean |attribution|), strongest first.
    pub ranked: Vec<(usize, f64)>,
    pub localisation: Localisation,
    pub top_k_share: f64,
}

impl Attribution {
    pub fn top_dims(&self, k: usize) -> Vec<usize> {
        self.ranked.iter().take(k).map(|&(d, _)| d).collect()
    }
}

/// Per-dimension attribution of the linear probe, `w_d·(x_d − mean_d)`,
/// which is the exact Shapley value for a linear scorer with a mean
/// baseline. Mass is the mean absolute attribution over `records`.
pub fn attribution_localisation(
    probe: &ProbeModel,
    records: &[EmbeddingRecord],
    th: &Thresholds,
) -> Result<Attribution> {
    let dim = probe.weights.len();
    if records.is_empty() {
        return Err(DiagnosisError::NoEmbeddings);
    }
    if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
        return Err(DiagnosisError::DimensionMismatch {
            expected: dim,
            got: r.vector.len(),
        });
    }
    let n = records.len() as f64;
    let mut centre = vec![0.0; dim];
    for r in records {
        for (c, v) in centre.iter_mut().zip(&r.vector) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= n);
    let mut mass = vec![0.0; dim];
    for r in records {
        for d in 0..dim {
            mass[d] += (probe.weights[d] * (r.vector[d] - centre[d])).abs();
        }
    }
    mass.iter_mut().for_each(|m| *m /= n);
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(DiagnosisError::ZeroTotalMass);
    }
    let mut ranked: Vec<(usize, f64)> = mass.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: f64 = ranked.iter().take(th.top_k).map(|(_, m)| m).sum();
    let top_k_share = top / total;
    Ok(Attribution {
        localisation: th.localisation(top_k_share),
        ranked,
        top_k_share,
    })
}

/// Localised leakage is actionable (confirmed); diffuse leakage is reported
/// as weak. Weak leakage caps the status at weak, and weak diffuse leakage
/// is ruled out so one faint signal is not counted twice.
pub fn check_localisation(leakage: Status, attribution: &Attribution, th: &Thresholds) -> CheckResult {
    let dims: Vec<String> = attribution
        .top_dims(th.top_k)
        .iter()
        .map(|d| d.to_string())
        .collect();
    let kind = match attribution.localisation {
        Localisation::Localised => "Localised",
        Localisation::Diffuse => "Diffuse",
    };
    // Localisation never outranks the leakage it describes.
    let status = match (leakage, attribution.localisation) {
        (Status::Confirmed, Localisation::Localised) => Status::Confirmed,
        (Status::Confirmed, Localisation::Diffuse) | (Status::Weak, Localisation::Localised) => Status::Weak,
        _ => Status::RuledOut,
    };
    let mut evidence = format!(
        "Dims {} - {kind} (top-{} share {:.3})",
        dims.join(", "),
        th.top_k,
        attribution.top_k_share
    );
    match leakage {
        Status::RuledOut => evidence.push_str("; no leakage to localise"),
        Status::Weak => evidence.push_str("; leakage only weak"),
        Status::Confirmed => {}
    }
    let mut r = CheckResult::new(CheckId::LeakageLocalisation, status, evidence)
        .stat("top_k_share", attribution.top_k_share);
    for (rank, (d, m)) in attribution.ranked.iter().take(th.top_k).enumerate() {
        r = r.stat(&format!("rank{}_dim", rank + 1), *d as f64);
        r = r.stat(&format!("rank{}_mass", rank + 1), *m);
    }
    r
}

/// Half the smallest gap between distinct scores.
fn granularity_slack(trials: &[Trial]) -> f64 {
    let mut s: Vec<f64> = trials.iter().map(|t| t.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
        .min(f64::MAX)
        / 2.0
}

/// Per-gender EER thresholds on the development split.
pub fn check_threshold_bias(dev: &[Trial], th: &Thresholds) -> Result<CheckResult> {
    let theta_f = metrics::gender_eer(dev, Gender::F)?.threshold;
    let theta_m = metrics::gender_eer(dev, Gender::M)?.threshold;
    let gap = (theta_f - theta_m).abs();
    let slack = granularity_slack(dev);
    Ok(CheckResult::new(
        CheckId::SingleThresholdBias,
        th.threshold_gap_status(gap, slack),
        format!("F = {theta_f:.3}, M = {theta_m:.3}, gap = {gap:.3}"),
    )
    .stat("threshold_f", theta_f)
    .stat("threshold_m", theta_m)
    .stat("gap", gap)
    .stat("granularity_slack", slack))
}

/// d_FPR at one shared threshold.
pub fn check_objective_bias(trials: &[Trial], threshold: f64, th: &Thresholds) -> Result<CheckResult> {
    let c = metrics::confusion(trials, threshold, threshold)?;
    for g in Gender::ALL {
        let k = c.get(g);
        if k.fp + k.tn == 0 {
            return Err(MetricsError::MissingLabelInGroup(g, Label::Bonafide).into());
        }
    }
    let d_fpr = c.female.fpr() - c.male.fpr();
    Ok(CheckResult::new(
        CheckId::TrainingObjectiveBias,
        th.d_fpr_status(d_fpr),
        format!("d_FPR = {d_fpr:+.3} at threshold {threshold:.3}"),
    )
    .stat("d_fpr", d_fpr)
    .stat("threshold", threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mitigation {
    S1,
    S2,
    S3,
    Eafr,
    Tc,
    Sgfs,
    Gnea,
    ProtocolRedesign,
}

impl Mitigation {
    pub fn name(self) -> &'static str {
        match self {
            Mitigation::S1 => "S1",
            Mitigation::S2 => "S2",
            Mitigation::S3 => "S3",
            Mitigation::Eafr => "EAFR",
            Mitigation::Tc => "TC",
            Mitigation::Sgfs => "SGFS",
            Mitigation::Gnea => "GNEA",
            Mitigation::ProtocolRedesign => "protocol redesign",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub thresholds: Thresholds,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub split_fraction: f64,
    /// Shared threshold for the objective bias check. Defaults to the pooled
    /// EER threshold of the development split.
    pub default_threshold: Option<f64>,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            thresholds: Thresholds::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            split_fraction: 0.7,
            default_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub checks: Vec<CheckResult>,
    pub recommendations: BTreeMap<CheckId, BTreeSet<Mitigation>>,
    pub top_dims: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DiagnosisReport {
    pub fn check(&self, id: CheckId) -> &CheckResult {
        self.checks
            .iter()
            .find(|c| c.check == id)
            .expect("report carries all eight checks")
    }

    pub fn confirmed(&self) -> BTreeSet<CheckId> {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Confirmed)
            .map(|c| c.check)
            .collect()
    }

    pub fn any_confirmed(&self) -> bool {
        self.checks.iter().any(|c| c.status == Status::Confirmed)
    }

    pub fn recommended(&self) -> BTreeSet<Mitigation> {
        self.recommendations.values().flatten().copied().collect()
    }
}

/// Mitigations addressing one confirmed source.
pub fn recommendations_for(check: CheckId) -> BTreeSet<Mitigation> {
    use Mitigation::*;
    match check {
        CheckId::TrainingImbalance => [S1].into(),
        CheckId::ScoreSeparationGap | CheckId::TrainingObjectiveBias => [S2, Eafr].into(),
        CheckId::LeakageLocalisation => [S3, Sgfs, Gnea].into(),
        CheckId::GenderLeakage => BTreeSet::new(),
        CheckId::SingleThresholdBias => [Tc].into(),
        CheckId::EvalProtocolAsymmetry | CheckId::AttackNonOverlap => [ProtocolRedesign].into(),
    }
}

fn or_failed(check: CheckId, r: Result<CheckResult>) -> CheckResult {
    r.unwrap_or_else(|e| CheckResult::failed(check, e))
}

/// Run all eight checks. Failures of individual checks are recorded in
/// their evidence and never abort the report.
pub fn diagnose_all(dataset: &Dataset, cfg: &DiagnosisConfig) -> DiagnosisReport {
    let th = &cfg.thresholds;
    let mut warnings = Vec::new();
    let train = dataset.split(Split::Train);
    let dev = dataset.split(Split::Dev);
    let mut eval = dataset.split(Split::Eval);
    if eval.is_empty() {
        warnings.push("no eval split; model and decision checks use all trials".to_string());
        eval = dataset.trials.clone();
    }
    let calib = if dev.is_empty() {
        warnings.push("no dev split; thresholds are estimated on the eval split".to_string());
        eval.clone()
    } else {
        dev
    };

    let mut checks = Vec::with_capacity(8);
    checks.push(if train.is_empty() {
        CheckResult::failed(CheckId::TrainingImbalance, "no train split")
    } else {
        or_failed(CheckId::TrainingImbalance, check_training_balance(&train, th))
    });
    checks.push(or_failed(
        CheckId::EvalProtocolAsymmetry,
        check_eval_asymmetry(&eval, th),
    ));
    checks.push(check_attack_overlap(&train, &eval));
    checks.push(or_failed(
        CheckId::ScoreSeparationGap,
        check_score_separation(&eval, th),
    ));

    let mut top_dims = Vec::new();
    match dataset.embeddings.as_deref() {
        Some(records) if !records.is_empty() => {
            match train_probe(records, cfg.seed, cfg.split_fraction, &cfg.probe) {
                Ok(probe) => {
                    let leak = check_leakage(&probe, th);
                    let status = leak.status;
                    checks.push(leak);
                    checks.push(
                        match attribution_localisation(&probe, records, th) {
                            Ok(attr) => {
                                top_dims = attr.top_dims(th.top_k);
                                check_localisation(status, &attr, th)
                            }
                            // A probe with no attribution mass has found nothing to localise.
                            Err(DiagnosisError::ZeroTotalMass) if status == Status::RuledOut => {
                                CheckResult::new(
                                    CheckId::LeakageLocalisation,
                                    Status::RuledOut,
                                    "no leakage to localise",
                                )
                            }
                            Err(e) => CheckResult::failed(CheckId::LeakageLocalisation, e),
                        },
                    );
                }
                Err(e) => {
                    checks.push(CheckResult::failed(CheckId::GenderLeakage, &e));
                    checks.push(CheckResult::failed(CheckId::LeakageLocalisation, e));
                }
            }
        }
        _ => {
            warnings.push("no embeddings; leakage checks not evaluated".to_string());
            checks.push(CheckResult::failed(CheckId::GenderLeakage, "no embeddings"));
            checks.push(CheckResult::failed(CheckId::LeakageLocalisation, "no embeddings"));
        }
    }

    checks.push(or_failed(
        CheckId::SingleThresholdBias,
        check_threshold_bias(&calib, th),
    ));
    let shared = match cfg.default_threshold {
        Some(t) => Ok(t),
        None => metrics::pooled_eer(&calib)
            .map(|r| r.threshold)
            .map_err(DiagnosisError::from),
    };
    checks.push(or_failed(
        CheckId::TrainingObjectiveBias,
        shared.and_then(|t| check_objective_bias(&eval, t, th)),
    ));

    let mut recommendations = BTreeMap::new();
    for c in &checks {
        if c.status == Status::Confirmed {
            recommendations.insert(c.check, recommendations_for(c.check));
        }
    }
    let leakage = checks
        .iter()
        .find(|c| c.check == CheckId::GenderLeakage)
        .map(|c| c.status);
    let localisation = checks
        .iter()
        .find(|c| c.check == CheckId::LeakageLocalisation)
        .map(|c| c.status);
    if leakage == Some(Status::Confirmed) && localisation != Some(Status::Confirmed) {
        warnings.push(
            "leakage is diffuse: adversarial debiasing and dimension suppression are predicted to fail"
                .to_string(),
        );
    }

    DiagnosisReport {
        checks,
        recommendations,
        top_dims,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_identical_proportions() {
        let r = chi2_test([[10, 20], [10, 20]]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn chi2_hand_cases() {
        let r = chi2_test([[50, 30], [30, 50]]).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        assert!((r.p_value - 1.565_402_258e-3).abs() < 1e-9);
        let r = chi2_test([[1, 0], [0, 1]]).unwrap();
        assert!((r.statistic - 2.0).abs() < 1e-12);
        assert!((r.p_value - 0.157_299_207).abs() < 1e-8);
    }

    #[test]
    fn chi2_zero_marginal() {
        assert_eq!(chi2_test([[0, 0], [3, 4]]), Err(DiagnosisError::ZeroMarginal));
    }

    #[test]
    fn chi2_table_one_pairing() {
        // Reported training-balance statistic and its printed p-value.
        assert!((chi2_sf(1.196, 1) - 0.274).abs() < 5e-4);
    }

    #[test]
    fn status_rules_match_reference_pairings() {
        let th = Thresholds::default();
        assert_eq!(th.leakage_status(0.625), Status::Confirmed);
        assert_eq!(th.leakage_status(0.534), Status::Weak);
        assert_eq!(th.leakage_status(0.50), Status::RuledOut);
        assert_eq!(th.separation_status(0.407), Status::Confirmed);
        assert_eq!(th.separation_status(0.034), Status::Weak);
        assert_eq!(th.separation_status(0.0), Status::RuledOut);
        assert_eq!(th.d_fpr_status(0.050), Status::Confirmed);
        assert_eq!(th.d_fpr_status(0.057), Status::Confirmed);
        assert_eq!(th.d_fpr_status(0.0), Status::RuledOut);
        assert_eq!(th.threshold_gap_status(0.158, 1e-4), Status::Confirmed);
        assert_eq!(th.threshold_gap_status(0.102, 1e-4), Status::Confirmed);
        assert_eq!(th.threshold_gap_status(0.0, 0.0), Status::RuledOut);
    }

    fn t(id: &str, score: f64, label: Label, gender: Gender, split: Split, attack: Option<&str>) -> Trial {
        Trial {
            utt_id: id.into(),
            score,
            label,
            gender,
            attack_id: attack.map(String::from),
            split,
        }
    }

    #[test]
    fn attack_overlap_cases() {
        let train: Vec<Trial> = (1..=8)
            .map(|i| t(&format!("t{i}"), 0.0, Label::Spoof, Gender::F, Split::Train, Some(&format!("A{i:02}"))))
            .collect();
        let eval: Vec<Trial> = (17..=32)
            .map(|i| t(&format!("e{i}"), 0.0, Label::Spoof, Gender::F, Split::Eval, Some(&format!("A{i:02}"))))
            .collect();
        let r = check_attack_overlap(&train, &eval);
        assert_eq!(r.status, Status::Confirmed);
        assert_eq!(r.statistics["shared_attacks"], 0.0);
        assert!(r.evidence.starts_with("A01-A08"));
        assert_eq!(check_attack_overlap(&train, &train).status, Status::RuledOut);
        let bona = vec![t("b", 1.0, Label::Bonafide, Gender::F, Split::Eval, None)];
        let r = check_attack_overlap(&train, &bona);
        assert_eq!(r.status, Status::Weak);
        assert_eq!(r.evidence, "no eval attacks");
    }

    #[test]
    fn separation_statuses() {
        let th = Thresholds::default();
        let mk = |bf: f64, bm: f64| {
            vec![
                t("a", bf, Label::Bonafide, Gender::F, Split::Eval, None),
                t("b", 0.0, Label::Spoof, Gender::F, Split::Eval, Some("A1")),
                t("c", bm, Label::Bonafide, Gender::M, Split::Eval, None),
                t("d", 0.0, Label::Spoof, Gender::M, Split::Eval, Some("A1")),
            ]
        };
        let r = check_score_separation(&mk(2.713, 3.120), &th).unwrap();
        assert!((r.statistics["gap"] - 0.407).abs() < 1e-9);
        assert_eq!(r.status, Status::Confirmed);
        let r = check_score_separation(&mk(0.388, 0.422), &th).unwrap();
        assert!((r.statistics["gap"] - 0.034).abs() < 1e-9);
        assert_eq!(r.status, Status::Weak);
        assert_eq!(check_score_separation(&mk(1.0, 1.0), &th).unwrap().status, Status::RuledOut);
    }

    #[test]
    fn eval_asymmetry_single_gender_is_error() {
        let ts = vec![
            t("a", 1.0, Label::Bonafide, Gender::F, Split::Eval, None),
            t("b", 0.0, Label::Spoof, Gender::F, Split::Eval, Some("A17")),
        ];
        assert!(matches!(
            check_eval_asymmetry(&ts, &Thresholds::default()),
            Err(DiagnosisError::Metrics(MetricsError::EmptyGroup(Gender::M)))
        ));
    }

    #[test]
    fn eval_asymmetry_equal_ratios_ruled_out() {
        let mut ts = Vec::new();
        for g in Gender::ALL {
            for i in 0..10 {
                ts.push(t(&format!("{g}b{i}"), 1.0, Label::Bonafide, g, Split::Eval, None));
            }
            for i in 0..40 {
                ts.push(t(&format!("{g}s{i}"), 0.0, Label::Spoof, g, Split::Eval, Some("A17")));
            }
        }
        let r = check_eval_asymmetry(&ts, &Thresholds::default()).unwrap();
        assert_eq!(r.status, Status::RuledOut);
        assert_eq!(r.statistics["spoof_per_bonafide_f"], 4.0);
    }

    #[test]
    fn leakage_status_from_probe() {
        let th = Thresholds::default();
        let p = |acc| ProbeModel {
            weights: vec![1.0],
            bias: 0.0,
            train_accuracy: acc,
            test_accuracy: acc,
            loss_history: vec![],
        };
        assert_eq!(check_leakage(&p(0.625), &th).status, Status::Confirmed);
        assert_eq!(check_leakage(&p(0.534), &th).status, Status::Weak);
        assert_eq!(check_leakage(&p(0.50), &th).status, Status::RuledOut);
    }

    #[test]
    fn zero_probe_has_no_attribution_mass() {
        let p = ProbeModel {
            weights: vec![0.0; 3],
            bias: 0.1,
            train_accuracy: 0.5,
            test_accuracy: 0.5,
            loss_history: vec![],
        };
        let recs = vec![EmbeddingRecord {
            utt_id: "a".into(),
            vector: vec![1.0, 2.0, 3.0],
            gender: Gender::F,
            label: Label::Spoof,
        }];
        assert_eq!(
            attribution_localisation(&p, &recs, &Thresholds::default()),
            Err(DiagnosisError::ZeroTotalMass)
        );
    }

    #[test]
    fn recommendation_map() {
        assert_eq!(recommendations_for(CheckId::TrainingImbalance), [Mitigation::S1].into());
        assert_eq!(recommendations_for(CheckId::SingleThresholdBias), [Mitigation::Tc].into());
        assert!(recommendations_for(CheckId::GenderLeakage).is_empty());
        for c in CheckId::ALL {
            if c != CheckId::TrainingImbalance {
                assert!(!recommendations_for(c).contains(&Mitigation::S1));
            }
        }
    }
}
