//! Post-processing mitigations: per-gender threshold calibration (TC),
//! dimension suppression (SGFS) and gender-neutral alignment (GNEA), and the
//! pipeline that composes them with any upstream system.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EmbeddingRecord, Gender, LinearHead, Split, Trial};
use crate::diagnosis::{self, DiagnosisError, Mitigation, ProbeConfig, Thresholds};
use crate::metrics::{self, EopMode, FairnessReport, MetricsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostprocError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
    #[error("k = {k} exceeds embedding dimension {dim}")]
    KTooLarge { k: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no linear head to rescore with")]
    MissingHead,
    #[error("strategy needs embeddings")]
    MissingEmbeddings,
    #[error("no embedding for utterance {0}")]
    MissingEmbedding(String),
    #[error("no {0} split")]
    MissingSplit(Split),
    #[error("align mode needs dev embeddings of both genders")]
    MissingGroupMeans,
    #[error("unknown strategy: {0}")]
    UnknownStrategy(String),
    #[error("strategy {spec} needs a model trained with {needed}")]
    NotApplicable { spec: String, needed: &'static str },
}

pub type Result<T> = std::result::Result<T, PostprocError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub theta_f: f64,
    pub theta_m: f64,
    pub source_split: Split,
}

impl ThresholdPair {
    pub fn get(&self, g: Gender) -> f64 {
        match g {
            Gender::F => self.theta_f,
            Gender::M => self.theta_m,
        }
    }
}

/// Per-gender EER thresholds on the Dev trials of `trials`.
pub fn calibrate_thresholds(trials: &[Trial]) -> Result<ThresholdPair> {
    let dev: Vec<Trial> = trials.iter().filter(|t| t.split == Split::Dev).cloned().collect();
    if dev.is_empty() {
        return Err(PostprocError::MissingSplit(Split::Dev));
    }
    Ok(ThresholdPair {
        theta_f: metrics::gender_eer(&dev, Gender::F)?.threshold,
        theta_m: metrics::gender_eer(&dev, Gender::M)?.threshold,
        source_split: Split::Dev,
    })
}

/// Spoof predictions with each trial judged against its gender's threshold.
pub fn apply_tc(trials: &[Trial], pair: &ThresholdPair) -> Vec<bool> {
    trials
        .iter()
        .map(|t| metrics::predicts_spoof(t.score, pair.get(t.gender)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuppressionMode {
    /// Zero the selected dimensions.
    Zero,
    /// Replace each selected dimension by the midpoint of the two gender means.
    Align,
    /// Shift each gender's values so its mean lands on the midpoint, keeping
    /// within-gender spread. Not idempotent.
    AlignShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSet {
    pub dims: BTreeSet<usize>,
    pub mode: SuppressionMode,
    /// Per selected dim, `(mean_F, mean_M)` on the calibration embeddings.
    pub group_means: Option<Vec<(usize, f64, f64)>>,
    pub dim: usize,
}

impl SuppressionSet {
    fn means(&self, d: usize) -> (f64, f64) {
        let gm = self.group_means.as_ref().expect("align modes carry means");
        let &(_, f, m) = gm.iter().find(|(i, _, _)| *i == d).expect("mean for every dim");
        (f, m)
    }

    /// The constant written by `Align` for dimension `d`.
    pub fn midpoint(&self, d: usize) -> Option<f64> {
        self.group_means.as_ref()?;
        let (f, m) = self.means(d);
        Some((f + m) / 2.0)
    }
}

fn gender_means(records: &[EmbeddingRecord], d: usize) -> Option<(f64, f64)> {
    let mut sum = [0.0; 2];
    let mut n = [0usize; 2];
    for r in records {
        let i = (r.gender == Gender::M) as usize;
        sum[i] += r.vector[d];
        n[i] += 1;
    }
    (n[0] > 0 && n[1] > 0).then(|| (sum[0] / n[0] as f64, sum[1] / n[1] as f64))
}

/// Select the top `k` of `ranked_dims` and, for the align modes, freeze
/// per-gender means computed on `calibration` (the Dev embeddings).
pub fn build_suppression(
    ranked_dims: &[usize],
    k: usize,
    mode: SuppressionMode,
    calibration: &[EmbeddingRecord],
    dim: usize,
) -> Result<SuppressionSet> {
    if k > dim || k > ranked_dims.len() {
        return Err(PostprocError::KTooLarge { k, dim });
    }
    if let Some(&d) = ranked_dims.iter().find(|&&d| d >= dim) {
        return Err(PostprocError::DimensionMismatch {
            expected: dim,
            got: d + 1,
        });
    }
    let dims: BTreeSet<usize> = ranked_dims[..k].iter().copied().collect();
    let group_means = match mode {
        SuppressionMode::Zero => None,
        SuppressionMode::Align | SuppressionMode::AlignShift => {
            if let Some(r) = calibration.iter().find(|r| r.vector.len() != dim) {
                return Err(PostprocError::DimensionMismatch {
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            let means = dims
                .iter()
                .map(|&d| {
                    gender_means(calibration, d)
                        .map(|(f, m)| (d, f, m))
                        .ok_or(PostprocError::MissingGroupMeans)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(means)
        }
    };
    Ok(SuppressionSet {
        dims,
        mode,
        group_means,
        dim,
    })
}

pub fn apply_suppression(records: &[EmbeddingRecord], s: &SuppressionSet) -> Result<Vec<EmbeddingRecord>> {
    let mut out = records.to_vec();
    for r in &mut out {
        if r.vector.len() != s.dim {
            return Err(PostprocError::DimensionMismatch {
                expected: s.dim,
                got: r.vector.len(),
            });
        }
        for &d in &s.dims {
            r.vector[d] = match s.mode {
                SuppressionMode::Zero => 0.0,
                SuppressionMode::Align => {
                    let (f, m) = s.means(d);
                    (f + m) / 2.0
                }
                SuppressionMode::AlignShift => {
                    let (f, m) = s.means(d);
                    let own = if r.gender == Gender::F { f } else { m };
                    r.vector[d] - own + (f + m) / 2.0
                }
            };
        }
    }
    Ok(out)
}

/// Replace each trial's score by `head(embedding)`; metadata is untouched.
pub fn rescore(trials: &[Trial], records: &[EmbeddingRecord], head: &LinearHead) -> Result<Vec<Trial>> {
    let by_id: HashMap<&str, &EmbeddingRecord> = records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    trials
        .iter()
        .map(|t| {
            let r = by_id
                .get(t.utt_id.as_str())
                .ok_or_else(|| PostprocError::MissingEmbedding(t.utt_id.clone()))?;
            if r.vector.len() != head.dim() {
                return Err(PostprocError::DimensionMismatch {
                    expected: head.dim(),
                    got: r.vector.len(),
                });
            }
            Ok(Trial {
                score: head.score(&r.vector),
                ..t.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmbeddingEdit {
    None,
    Sgfs,
    Gnea,
}

/// A mitigation pipeline: an optional training-time strategy label, an
/// optional embedding edit, and single or per-gender thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StrategySpec {
    pub trained: Option<Mitigation>,
    pub edit: EmbeddingEdit,
    pub tc: bool,
}

impl StrategySpec {
    pub const BASELINE: StrategySpec = StrategySpec {
        trained: None,
        edit: EmbeddingEdit::None,
        tc: false,
    };
}

impl FromStr for StrategySpec {
    type Err = PostprocError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || PostprocError::UnknownStrategy(s.to_string());
        let mut spec = StrategySpec::BASELINE;
        let mut seen_baseline = false;
        for part in s.split('+').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "baseline" if !seen_baseline && spec == StrategySpec::BASELINE => seen_baseline = true,
                "tc" if !spec.tc => spec.tc = true,
                "sgfs" if spec.edit == EmbeddingEdit::None => spec.edit = EmbeddingEdit::Sgfs,
                "gnea" if spec.edit == EmbeddingEdit::None => spec.edit = EmbeddingEdit::Gnea,
                "s1" | "s2" | "s3" | "eafr" if spec.trained.is_none() => {
                    spec.trained = Some(match part.as_str() {
                        "s1" => Mitigation::S1,
                        "s2" => Mitigation::S2,
                        "s3" => Mitigation::S3,
                        _ => Mitigation::Eafr,
                    })
                }
                _ => return Err(unknown()),
            }
        }
        if seen_baseline && spec != StrategySpec::BASELINE {
            return Err(unknown());
        }
        Ok(spec)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(t) = self.trained {
            parts.push(match t {
                Mitigation::S1 => "s1",
                Mitigation::S2 => "s2",
                Mitigation::S3 => "s3",
                _ => "eafr",
            });
        }
        match self.edit {
            EmbeddingEdit::None => {}
            EmbeddingEdit::Sgfs => parts.push("sgfs"),
            EmbeddingEdit::Gnea => parts.push("gnea"),
        }
        if self.tc {
            parts.push("tc");
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of attribution-ranked dims to edit.
    pub k: usize,
    /// Mode used for GNEA; `AlignShift` selects the variance-preserving variant.
    pub align_mode: SuppressionMode,
    pub eop_mode: EopMode,
    pub seed: u64,
    pub split_fraction: f64,
    pub probe: ProbeConfig,
    /// Training strategy the scores came from, if any.
    pub trained: Option<Mitigation>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 3,
            align_mode: SuppressionMode::Align,
            eop_mode: EopMode::FalsePositiveRate,
            seed: 0,
            split_fraction: 0.7,
            probe: ProbeConfig::default(),
            trained: None,
        }
    }
}

/// Rank embedding dims by probe attribution, using only non-Eval embeddings.
pub fn rank_dims(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let fit = dataset.embeddings_in(&[Split::Train, Split::Dev]);
    if fit.is_empty() {
        return Err(PostprocError::MissingEmbeddings);
    }
    let probe = diagnosis::train_probe(&fit, cfg.seed, cfg.split_fraction, &cfg.probe)?;
    let attr = diagnosis::attribution_localisation(&probe, &fit, &Thresholds::default())?;
    Ok(attr.ranked.iter().map(|&(d, _)| d).collect())
}

/// Every strategy that can run on `dataset`.
pub fn applicable_strategies(dataset: &Dataset, trained: Option<Mitigation>) -> Vec<StrategySpec> {
    let edits: &[EmbeddingEdit] = if dataset.embeddings.is_some() && dataset.head.is_some() {
        &[EmbeddingEdit::None, EmbeddingEdit::Sgfs, EmbeddingEdit::Gnea]
    } else {
        &[EmbeddingEdit::None]
    };
    let mut out = Vec::new();
    for &edit in edits {
        for tc in [false, true] {
            out.push(StrategySpec { trained, edit, tc });
        }
    }
    out
}

/// Apply `spec` to `dataset` and report fairness on the Eval split.
pub fn run_pipeline(dataset: &Dataset, spec: &StrategySpec, cfg: &PipelineConfig) -> Result<FairnessReport> {
    if spec.trained != cfg.trained {
        if let Some(needed) = spec.trained {
            return Err(PostprocError::NotApplicable {
                spec: spec.to_string(),
                needed: needed.name(),
            });
        }
    }
    let trials = match spec.edit {
        EmbeddingEdit::None => dataset.trials.clone(),
        edit => {
            let records = dataset.embeddings.as_deref().ok_or(PostprocError::MissingEmbeddings)?;
            let head = dataset.head.as_ref().ok_or(PostprocError::MissingHead)?;
            let dim = head.dim();
            let ranked = if cfg.k == 0 { Vec::new() } else { rank_dims(dataset, cfg)? };
            let mode = match edit {
                EmbeddingEdit::Sgfs => SuppressionMode::Zero,
                _ => cfg.align_mode,
            };
            let s = build_suppression(&ranked, cfg.k, mode, &dataset.embeddings_in(&[Split::Dev]), dim)?;
            let edited = apply_suppression(records, &s)?;
            rescore(&dataset.trials, &edited, head)?
        }
    };
    let (theta_f, theta_m) = if spec.tc {
        let pair = calibrate_thresholds(&trials)?;
        (pair.theta_f, pair.theta_m)
    } else {
        let dev: Vec<Trial> = trials.iter().filter(|t| t.split == Split::Dev).cloned().collect();
        if dev.is_empty() {
            return Err(PostprocError::MissingSplit(Split::Dev));
        }
        let t = metrics::pooled_eer(&dev)?.threshold;
        (t, t)
    };
    let eval: Vec<Trial> = trials.into_iter().filter(|t| t.split == Split::Eval).collect();
    if eval.is_empty() {
        return Err(PostprocError::MissingSplit(Split::Eval));
    }
    Ok(metrics::fairness_report(&eval, theta_f, theta_m, cfg.eop_mode)?)
}
