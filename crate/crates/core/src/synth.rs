//! Seeded synthetic datasets with independently injectable bias sources.
//!
//! Scores are drawn by stratified Gaussian sampling: cell value `i` of `n`
//! is `mean + std·Φ⁻¹((i + u_i)/n)`. The jitter `u` is shared between the
//! two genders of a (split, label) cell, so genders with equal counts and
//! equal score parameters get identical score multisets and the null checks
//! come out exactly zero.
//!
//! Embedding dim 0 carries the score, the remaining dims are standard
//! normal noise plus any injected gender shift. The head reads dim 0.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{Dataset, EmbeddingRecord, Gender, Label, LinearHead, Split, Trial};
use crate::diagnosis::CheckId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub mean: f64,
    pub std: f64,
}

/// Score distribution per gender and label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub female_bonafide: CellParams,
    pub female_spoof: CellParams,
    pub male_bonafide: CellParams,
    pub male_spoof: CellParams,
}

impl ScoreModel {
    pub fn get(&self, g: Gender, l: Label) -> CellParams {
        match (g, l) {
            (Gender::F, Label::Bonafide) => self.female_bonafide,
            (Gender::F, Label::Spoof) => self.female_spoof,
            (Gender::M, Label::Bonafide) => self.male_bonafide,
            (Gender::M, Label::Spoof) => self.male_spoof,
        }
    }
}

impl Default for ScoreModel {
    fn default() -> Self {
        let bona = CellParams { mean: 1.0, std: 1.5 };
        let spoof = CellParams { mean: -1.0, std: 1.5 };
        ScoreModel {
            female_bonafide: bona,
            female_spoof: spoof,
            male_bonafide: bona,
            male_spoof: spoof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LeakMode {
    None,
    /// Female mean `+separation/2`, male `-separation/2` on `k` random dims.
    Localised { k: usize, separation: f64 },
    /// The same shift on every non-score dim.
    Diffuse { separation: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSets {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub eval: Vec<String>,
}

impl AttackSets {
    pub fn range(lo: u32, hi: u32) -> Vec<String> {
        (lo..=hi).map(|i| format!("A{i:02}")).collect()
    }

    pub fn shared(lo: u32, hi: u32) -> Self {
        let a = AttackSets::range(lo, hi);
        AttackSets {
            train: a.clone(),
            dev: a.clone(),
            eval: a,
        }
    }

    fn get(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }
}

/// Per-gender spoof:bonafide ratio on Eval, with Eval bonafide count per
/// gender `bonafide_factor · n_per_cell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRatios {
    pub female: f64,
    pub male: f64,
    pub bonafide_factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub preset: String,
    pub seed: u64,
    pub n_per_cell: usize,
    pub embed_dim: usize,
    pub scores: ScoreModel,
    /// Added to every female trial score, not to the embeddings.
    pub threshold_shift: f64,
    pub leak: LeakMode,
    pub eval_ratios: Option<EvalRatios>,
    pub attacks: AttackSets,
    /// Fraction of `n_per_cell` used for the male bonafide Train cell.
    pub train_male_bonafide_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            preset: "balanced-clean".into(),
            seed: 0,
            n_per_cell: 1000,
            embed_dim: 32,
            scores: ScoreModel::default(),
            threshold_shift: 0.0,
            leak: LeakMode::None,
            eval_ratios: None,
            attacks: AttackSets::shared(1, 8),
            train_male_bonafide_fraction: 1.0,
        }
    }
}

/// Groups of knobs, one per injectable bias source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnobFamily {
    TrainBalance,
    EvalRatio,
    AttackSets,
    ScoreModel,
    Leak,
    ThresholdShift,
}

impl ScenarioConfig {
    /// Knob families that differ from the clean defaults.
    pub fn altered_families(&self) -> BTreeSet<KnobFamily> {
        let base = ScenarioConfig::default();
        let mut out = BTreeSet::new();
        if self.train_male_bonafide_fraction != base.train_male_bonafide_fraction {
            out.insert(KnobFamily::TrainBalance);
        }
        if self.eval_ratios.is_some() {
            out.insert(KnobFamily::EvalRatio);
        }
        if self.attacks != base.attacks {
            out.insert(KnobFamily::AttackSets);
        }
        if self.scores != base.scores {
            out.insert(KnobFamily::ScoreModel);
        }
        if self.leak != LeakMode::None {
            out.insert(KnobFamily::Leak);
        }
        if self.threshold_shift != 0.0 {
            out.insert(KnobFamily::ThresholdShift);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_per_cell == 0 {
            return bad("n_per_cell must be positive");
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2");
        }
        for g in Gender::ALL {
            for l in Label::ALL {
                let c = self.scores.get(g, l);
                if !c.mean.is_finite() || !(c.std.is_finite() && c.std > 0.0) {
                    return bad("cell std must be positive and finite");
                }
            }
        }
        if !self.threshold_shift.is_finite() {
            return bad("threshold_shift must be finite");
        }
        match self.leak {
            LeakMode::None => {}
            LeakMode::Localised { k, separation } => {
                if k == 0 || k >= self.embed_dim {
                    return bad("leak dims must fit in 1..embed_dim");
                }
                if !(separation.is_finite() && separation >= 0.0) {
                    return bad("leak separation must be non-negative");
                }
            }
            LeakMode::Diffuse { separation } => {
                if !(separation.is_finite() && separation >= 0.0) {
                    return bad("leak separation must be non-negative");
                }
            }
        }
        if let Some(r) = self.eval_ratios {
            if !(r.female > 0.0 && r.male > 0.0 && r.female.is_finite() && r.male.is_finite()) {
                return bad("eval ratios must be positive");
            }
            if r.bonafide_factor == 0 {
                return bad("bonafide_factor must be positive");
            }
        }
        if !(self.train_male_bonafide_fraction > 0.0 && self.train_male_bonafide_fraction <= 1.0) {
            return bad("train_male_bonafide_fraction must lie in (0, 1]");
        }
        for s in Split::ALL {
            if self.attacks.get(s).is_empty() {
                return bad("every split needs at least one attack type");
            }
        }
        Ok(())
    }

    fn count(&self, split: Split, g: Gender, l: Label) -> usize {
        let n = self.n_per_cell;
        match (split, l) {
            (Split::Train, Label::Bonafide) if g == Gender::M => {
                ((n as f64 * self.train_male_bonafide_fraction).round() as usize).max(1)
            }
            (Split::Eval, _) if self.eval_ratios.is_some() => {
                let r = self.eval_ratios.unwrap();
                let bona = n * r.bonafide_factor;
                match l {
                    Label::Bonafide => bona,
                    Label::Spoof => {
                        let ratio = if g == Gender::F { r.female } else { r.male };
                        (bona as f64 * ratio).round() as usize
                    }
                }
            }
            _ => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub preset: String,
    pub families: BTreeSet<KnobFamily>,
    /// Checks the injected source should confirm.
    pub expected_confirmed: BTreeSet<CheckId>,
    /// Checks whose weak status is the expected outcome rather than noise.
    pub expected_weak: BTreeSet<CheckId>,
    pub eval_ratios: Option<EvalRatios>,
    pub leak_dims: Vec<usize>,
    pub threshold_shift: f64,
}

pub const PRESET_NAMES: [&str; 8] = [
    "balanced-clean",
    "threshold-biased",
    "localised-leak",
    "diffuse-leak",
    "eval-asymmetric",
    "attack-disjoint",
    "train-imbalanced",
    "separation-gap",
];

/// Named scenario with the given seed.
pub fn preset(name: &str, seed: u64) -> Result<ScenarioConfig> {
    let mut c = ScenarioConfig {
        preset: name.to_string(),
        seed,
        ..ScenarioConfig::default()
    };
    match name {
        "balanced-clean" => {}
        "threshold-biased" => c.threshold_shift = 0.5,
        "localised-leak" => c.leak = LeakMode::Localised { k: 3, separation: 2.0 },
        "diffuse-leak" => {
            // Same total squared separation as three dims at 2σ.
            let spread = (c.embed_dim - 1) as f64;
            c.leak = LeakMode::Diffuse {
                separation: 2.0 * (3.0 / spread).sqrt(),
            };
        }
        "eval-asymmetric" => {
            c.eval_ratios = Some(EvalRatios {
                female: 4.10,
                male: 3.71,
                bonafide_factor: 3,
            })
        }
        "attack-disjoint" => {
            c.attacks = AttackSets {
                train: AttackSets::range(1, 8),
                dev: AttackSets::range(9, 16),
                eval: AttackSets::range(17, 32),
            }
        }
        "train-imbalanced" => c.train_male_bonafide_fraction = 0.25,
        "separation-gap" => c.scores.female_spoof.mean += 0.5,
        _ => return Err(SynthError::UnknownPreset(name.to_string())),
    }
    Ok(c)
}

pub fn presets(seed: u64) -> Vec<ScenarioConfig> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n, seed).expect("built-in preset"))
        .collect()
}

fn expected_checks(cfg: &ScenarioConfig) -> (BTreeSet<CheckId>, BTreeSet<CheckId>) {
    let mut confirmed = BTreeSet::new();
    let mut weak = BTreeSet::new();
    for f in cfg.altered_families() {
        match f {
            KnobFamily::TrainBalance => {
                confirmed.insert(CheckId::TrainingImbalance);
            }
            KnobFamily::EvalRatio => {
                confirmed.insert(CheckId::EvalProtocolAsymmetry);
            }
            KnobFamily::AttackSets => {
                let tr: BTreeSet<_> = cfg.attacks.train.iter().collect();
                if cfg.attacks.eval.iter().all(|a| !tr.contains(a)) {
                    confirmed.insert(CheckId::AttackNonOverlap);
                }
            }
            KnobFamily::ScoreModel => {
                confirmed.insert(CheckId::ScoreSeparationGap);
                confirmed.insert(CheckId::SingleThresholdBias);
            }
            KnobFamily::Leak => {
                confirmed.insert(CheckId::GenderLeakage);
                match cfg.leak {
                    LeakMode::Localised { .. } => {
                        confirmed.insert(CheckId::LeakageLocalisation);
                    }
                    _ => {
                        weak.insert(CheckId::LeakageLocalisation);
                    }
                }
            }
            KnobFamily::ThresholdShift => {
                confirmed.insert(CheckId::SingleThresholdBias);
                confirmed.insert(CheckId::TrainingObjectiveBias);
            }
        }
    }
    (confirmed, weak)
}

fn split_tag(s: Split) -> &'static str {
    match s {
        Split::Train => "tr",
        Split::Dev => "dv",
        Split::Eval => "ev",
    }
}

/// Build the dataset and its ground truth. Deterministic in `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::standard();
    let dim = cfg.embed_dim;

    let leak_dims: Vec<usize> = match cfg.leak {
        LeakMode::None => Vec::new(),
        LeakMode::Localised { k, .. } => {
            let mut d: Vec<usize> = index::sample(&mut rng, dim - 1, k).into_iter().map(|i| i + 1).collect();
            d.sort_unstable();
            d
        }
        LeakMode::Diffuse { .. } => (1..dim).collect(),
    };
    let half_sep = match cfg.leak {
        LeakMode::None => 0.0,
        LeakMode::Localised { separation, .. } | LeakMode::Diffuse { separation } => separation / 2.0,
    };

    let mut trials = Vec::new();
    let mut records = Vec::new();
    for split in Split::ALL {
        for label in Label::ALL {
            let counts = Gender::ALL.map(|g| cfg.count(split, g, label));
            let n_max = counts.into_iter().max().unwrap_or(0);
            let jitter: Vec<f64> = (0..n_max).map(|_| rng.random::<f64>()).collect();
            for (gi, g) in Gender::ALL.into_iter().enumerate() {
                let n = counts[gi];
                let cell = cfg.scores.get(g, label);
                let mut values: Vec<f64> = (0..n)
                    .map(|i| {
                        let q = (i as f64 + jitter[i]) / n as f64;
                        cell.mean + cell.std * std_normal.inverse_cdf(q)
                    })
                    .collect();
                values.shuffle(&mut rng);
                let attacks = cfg.attacks.get(split);
                for (i, carrier) in values.into_iter().enumerate() {
                    let utt_id = format!(
                        "{}-{}-{}-{i:05}",
                        split_tag(split),
                        g.as_str().to_ascii_lowercase(),
                        if label == Label::Bonafide { "b" } else { "s" }
                    );
                    let mut vector = Vec::with_capacity(dim);
                    vector.push(carrier);
                    for _ in 1..dim {
                        vector.push(rng.sample::<f64, _>(StandardNormal));
                    }
                    let sign = if g == Gender::F { 1.0 } else { -1.0 };
                    for &d in &leak_dims {
                        vector[d] += sign * half_sep;
                    }
                    let shift = if g == Gender::F { cfg.threshold_shift } else { 0.0 };
                    trials.push(Trial {
                        utt_id: utt_id.clone(),
                        score: carrier + shift,
                        label,
                        gender: g,
                        attack_id: (label == Label::Spoof).then(|| attacks[i % attacks.len()].clone()),
                        split,
                    });
                    records.push(EmbeddingRecord {
                        utt_id,
                        vector,
                        gender: g,
                        label,
                    });
                }
            }
        }
    }

    let mut weights = vec![0.0; dim];
    weights[0] = 1.0;
    let (expected_confirmed, expected_weak) = expected_checks(cfg);
    let truth = GroundTruth {
        preset: cfg.preset.clone(),
        families: cfg.altered_families(),
        expected_confirmed,
        expected_weak,
        eval_ratios: cfg.eval_ratios,
        leak_dims,
        threshold_shift: cfg.threshold_shift,
    };
    let dataset = Dataset {
        trials,
        embeddings: Some(records),
        head: Some(LinearHead { weights, bias: 0.0 }),
    };
    Ok((dataset, truth))
}
