//! Small MLP spoof classifier with the in-processing fairness strategies:
//! inverse-frequency weighting (S1), per-batch fairness penalty (S2),
//! adversarial debiasing through a gradient reversal layer (S3) and
//! epoch-accumulated fairness regularisation (EAFR).
//!
//! The spoof head's logit is positive for spoof. Exported heads are negated
//! so exported scores follow the bonafide-high convention.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EmbeddingRecord, Gender, Label, LinearHead, Split, Trial};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("no training samples for ({0}, {1})")]
    EmptyCell(Gender, Label),
    #[error("batch has no samples for ({0}, {1})")]
    EmptyCellInBatch(Gender, Label),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset has no embeddings")]
    MissingEmbeddings,
    #[error("no embedding for utterance {0}")]
    MissingEmbedding(String),
    #[error("no {0} split")]
    MissingSplit(Split),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unknown strategy: {0}")]
    UnknownStrategy(String),
    #[error("fairness penalty is at a tie; its gradient is not defined there")]
    TiePoint,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Plain,
    S1,
    S2,
    S3,
    Eafr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Plain, Strategy::S1, Strategy::S2, Strategy::S3, Strategy::Eafr];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::S1 => "s1",
            Strategy::S2 => "s2",
            Strategy::S3 => "s3",
            Strategy::Eafr => "eafr",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TrainError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lambda_fair: f64,
    pub lambda_adv: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Encoder widths; the last one is the embedding size.
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        TrainConfig {
            strategy,
            lambda_fair: if strategy == Strategy::Eafr { 0.5 } else { 0.1 },
            lambda_adv: 0.05,
            batch_size: 24,
            epochs: 20,
            learning_rate: 0.05,
            seed: 0,
            hidden: vec![32, 16],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda_fair.is_finite() && self.lambda_fair >= 0.0) {
            return bad("lambda_fair must be non-negative");
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return bad("lambda_adv must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(Strategy::Plain)
    }
}

/// One value per (gender, label) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cells<T> {
    pub female_bonafide: T,
    pub female_spoof: T,
    pub male_bonafide: T,
    pub male_spoof: T,
}

impl<T> Cells<T> {
    pub fn get(&self, g: Gender, l: Label) -> &T {
        match (g, l) {
            (Gender::F, Label::Bonafide) => &self.female_bonafide,
            (Gender::F, Label::Spoof) => &self.female_spoof,
            (Gender::M, Label::Bonafide) => &self.male_bonafide,
            (Gender::M, Label::Spoof) => &self.male_spoof,
        }
    }

    pub fn get_mut(&mut self, g: Gender, l: Label) -> &mut T {
        match (g, l) {
            (Gender::F, Label::Bonafide) => &mut self.female_bonafide,
            (Gender::F, Label::Spoof) => &mut self.female_spoof,
            (Gender::M, Label::Bonafide) => &mut self.male_bonafide,
            (Gender::M, Label::Spoof) => &mut self.male_spoof,
        }
    }
}

fn cells() -> [(Gender, Label); 4] {
    [
        (Gender::F, Label::Bonafide),
        (Gender::F, Label::Spoof),
        (Gender::M, Label::Bonafide),
        (Gender::M, Label::Spoof),
    ]
}

/// Affine layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    fn random(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / n_in as f64).sqrt();
        let w = (0..n_in * n_out)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense {
            n_in,
            n_out,
            w,
            b: vec![0.0; n_out],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[o]
            })
            .collect()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.b)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub encoder: Vec<Dense>,
    pub spoof_head: Dense,
    pub gender_head: Option<Dense>,
}

impl MlpModel {
    /// Gaussian initialisation with variance `1/fan_in`, zero biases. The
    /// gender head is always drawn so the other parameters do not depend on
    /// whether it is kept.
    pub fn init(input_dim: usize, hidden: &[usize], with_gender_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut encoder = Vec::with_capacity(hidden.len());
        let mut n_in = input_dim;
        for &h in hidden {
            encoder.push(Dense::random(n_in, h, rng));
            n_in = h;
        }
        let spoof_head = Dense::random(n_in, 1, rng);
        let gender_head = Dense::random(n_in, 1, rng);
        MlpModel {
            encoder,
            spoof_head,
            gender_head: with_gender_head.then_some(gender_head),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.n_in, d.n_out);
        MlpModel {
            encoder: self.encoder.iter().map(z).collect(),
            spoof_head: z(&self.spoof_head),
            gender_head: self.gender_head.as_ref().map(z),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].n_in
    }

    pub fn embed_dim(&self) -> usize {
        self.spoof_head.n_in
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in &self.encoder {
            a = layer.apply(&a).into_iter().map(f64::tanh).collect();
        }
        a
    }

    fn encoder_params(&self) -> impl Iterator<Item = &f64> {
        self.encoder.iter().flat_map(Dense::params)
    }

    /// Number of encoder parameters; they come first in `params()`.
    pub fn n_encoder_params(&self) -> usize {
        self.encoder_params().count()
    }

    pub fn params(&self) -> Vec<f64> {
        self.encoder_params()
            .chain(self.spoof_head.params())
            .chain(self.gender_head.iter().flat_map(Dense::params))
            .copied()
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.params_mut());
        }
        out.extend(self.spoof_head.params_mut());
        if let Some(g) = &mut self.gender_head {
            out.extend(g.params_mut());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        for (p, v) in self.params_mut().into_iter().zip(values) {
            *p = *v;
        }
    }

    /// `self += a · other` over every parameter.
    pub fn axpy(&mut self, a: f64, other: &MlpModel) {
        let src = other.params();
        for (p, g) in self.params_mut().into_iter().zip(src) {
            *p += a * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Linear head on the embedding that scores bonafide high.
    pub fn export_head(&self) -> LinearHead {
        LinearHead {
            weights: self.spoof_head.w.iter().map(|w| -w).collect(),
            bias: -self.spoof_head.b[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub embeddings: Vec<Vec<f64>>,
    pub spoof_logits: Vec<f64>,
    pub gender_logits: Option<Vec<f64>>,
}

struct Cache {
    /// Per sample, the input followed by each layer's activation.
    acts: Vec<Vec<Vec<f64>>>,
}

fn forward_cached(model: &MlpModel, xs: &[Vec<f64>]) -> Result<(Forward, Cache)> {
    let d = model.input_dim();
    let mut acts = Vec::with_capacity(xs.len());
    let mut embeddings = Vec::with_capacity(xs.len());
    let mut spoof_logits = Vec::with_capacity(xs.len());
    let mut gender_logits = model.gender_head.as_ref().map(|_| Vec::with_capacity(xs.len()));
    for x in xs {
        if x.len() != d {
            return Err(TrainError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let mut per = Vec::with_capacity(model.encoder.len() + 1);
        per.push(x.clone());
        for layer in &model.encoder {
            let a: Vec<f64> = layer.apply(per.last().unwrap()).into_iter().map(f64::tanh).collect();
            per.push(a);
        }
        let h = per.last().unwrap();
        spoof_logits.push(model.spoof_head.apply(h)[0]);
        if let (Some(gl), Some(gh)) = (&mut gender_logits, &model.gender_head) {
            gl.push(gh.apply(h)[0]);
        }
        embeddings.push(h.clone());
        acts.push(per);
    }
    Ok((
        Forward {
            embeddings,
            spoof_logits,
            gender_logits,
        },
        Cache { acts },
    ))
}

pub fn forward(model: &MlpModel, xs: &[Vec<f64>]) -> Result<Forward> {
    forward_cached(model, xs).map(|(f, _)| f)
}

fn head_backward(head: &Dense, grad: &mut Dense, hs: &[Vec<f64>], dz: &[f64]) -> Vec<Vec<f64>> {
    hs.iter()
        .zip(dz)
        .map(|(h, &g)| {
            for (gw, hv) in grad.w.iter_mut().zip(h) {
                *gw += g * hv;
            }
            grad.b[0] += g;
            head.w.iter().map(|w| g * w).collect()
        })
        .collect()
}

fn encoder_backward(model: &MlpModel, cache: &Cache, dh: &[Vec<f64>], grad: &mut [Dense]) {
    for (per, top) in cache.acts.iter().zip(dh) {
        let mut upstream = top.clone();
        for l in (0..model.encoder.len()).rev() {
            let layer = &model.encoder[l];
            let out = &per[l + 1];
            let input = &per[l];
            let delta: Vec<f64> = upstream.iter().zip(out).map(|(u, a)| u * (1.0 - a * a)).collect();
            let g = &mut grad[l];
            for ((row, gb), d) in g.w.chunks_mut(layer.n_in).zip(g.b.iter_mut()).zip(&delta) {
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
                *gb += d;
            }
            if l > 0 {
                upstream = (0..layer.n_in)
                    .map(|i| (0..layer.n_out).map(|o| layer.w[o * layer.n_in + i] * delta[o]).sum())
                    .collect();
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean weighted binary cross-entropy with logits; `targets[i]` is true for
/// the positive class.
pub fn bce_loss(logits: &[f64], targets: &[bool], weights: Option<&[f64]>) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (&z, &y))| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * (softplus(z) - if y { z } else { 0.0 })
        })
        .sum::<f64>()
        / n
}

fn bce_grad(logits: &[f64], targets: &[bool], weights: Option<&[f64]>) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (&z, &y))| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n
        })
        .collect()
}

/// Inverse-frequency weights `N / (4·N_{g,y})`.
pub fn s1_weights(trials: &[Trial]) -> Result<Cells<f64>> {
    let mut counts: Cells<usize> = Cells::default();
    for t in trials {
        *counts.get_mut(t.gender, t.label) += 1;
    }
    let total = trials.len() as f64;
    let mut w = Cells::default();
    for (g, l) in cells() {
        let n = *counts.get(g, l);
        if n == 0 {
            return Err(TrainError::EmptyCell(g, l));
        }
        *w.get_mut(g, l) = total / (4.0 * n as f64);
    }
    Ok(w)
}

/// Soft error rates per gender from predicted spoof probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub fpr_f: f64,
    pub fpr_m: f64,
    pub fnr_f: f64,
    pub fnr_m: f64,
}

impl GroupRates {
    pub fn fpr_gap(&self) -> f64 {
        self.fpr_f - self.fpr_m
    }

    pub fn fnr_gap(&self) -> f64 {
        self.fnr_f - self.fnr_m
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fpr_f, self.fpr_m, self.fnr_f, self.fnr_m]
    }
}

pub fn soft_group_rates(probs: &[f64], labels: &[Label], genders: &[Gender]) -> Result<GroupRates> {
    let mut acc = GroupAccumulator::default();
    for ((&p, &l), &g) in probs.iter().zip(labels).zip(genders) {
        acc.add(p, g, l);
    }
    acc.rates()
}

/// Running per-cell sums of spoof probabilities over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccumulator {
    pub sum: Cells<f64>,
    pub count: Cells<u64>,
}

impl GroupAccumulator {
    pub fn reset(&mut self) {
        *self = GroupAccumulator::default();
    }

    pub fn add(&mut self, p_spoof: f64, g: Gender, l: Label) {
        *self.sum.get_mut(g, l) += p_spoof;
        *self.count.get_mut(g, l) += 1;
    }

    pub fn rates(&self) -> Result<GroupRates> {
        for (g, l) in cells() {
            if *self.count.get(g, l) == 0 {
                return Err(TrainError::EmptyCellInBatch(g, l));
            }
        }
        let mean = |g, l| self.sum.get(g, l) / *self.count.get(g, l) as f64;
        Ok(GroupRates {
            fpr_f: mean(Gender::F, Label::Bonafide),
            fpr_m: mean(Gender::M, Label::Bonafide),
            fnr_f: 1.0 - mean(Gender::F, Label::Spoof),
            fnr_m: 1.0 - mean(Gender::M, Label::Spoof),
        })
    }
}

pub fn s2_penalty(rates: &GroupRates, lambda: f64) -> f64 {
    lambda * (rates.fpr_gap().abs() + rates.fnr_gap().abs())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `s2_penalty` with respect to each spoof logit.
fn penalty_grad(logits: &[f64], labels: &[Label], genders: &[Gender], rates: &GroupRates, lambda: f64) -> Vec<f64> {
    let mut counts: Cells<f64> = Cells::default();
    for (&l, &g) in labels.iter().zip(genders) {
        *counts.get_mut(g, l) += 1.0;
    }
    let s_fpr = sign(rates.fpr_gap());
    let s_fnr = sign(rates.fnr_gap());
    logits
        .iter()
        .zip(labels)
        .zip(genders)
        .map(|((&z, &l), &g)| {
            let p = sigmoid(z);
            let dp = p * (1.0 - p);
            let side = if g == Gender::F { 1.0 } else { -1.0 };
            let n = *counts.get(g, l);
            match l {
                Label::Bonafide => lambda * s_fpr * side * dp / n,
                Label::Spoof => -lambda * s_fnr * side * dp / n,
            }
        })
        .collect()
}

/// Gradient reversal: identity forward, `−λ·g` backward.
pub fn grl_backward(upstream: &[f64], lambda_adv: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda_adv * g).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub genders: Vec<Gender>,
    /// Per-sample BCE weights (S1).
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    fn spoof_targets(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == Label::Spoof).collect()
    }

    fn female_targets(&self) -> Vec<bool> {
        self.genders.iter().map(|&g| g == Gender::F).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub spoof: f64,
    pub fairness: f64,
    pub gender: f64,
    pub total: f64,
    pub penalty_skipped: bool,
}

/// Gradient of the gender branch split into its head part and its
/// unreversed encoder part.
pub struct GenderGrad {
    pub head: Dense,
    pub encoder_unreversed: Vec<Dense>,
}

struct Objective {
    parts: LossParts,
    grad: MlpModel,
    logits: Vec<f64>,
    gender: Option<GenderGrad>,
}

/// Loss and gradient of one strategy's objective on `batch`. With
/// `fairness` set, the S2 penalty applies (S2 per batch; EAFR epoch steps
/// and its gradient check use it too).
fn objective(model: &MlpModel, batch: &Batch, cfg: &TrainConfig, fairness: bool, adversarial: bool) -> Result<Objective> {
    let (fwd, cache) = forward_cached(model, &batch.x)?;
    let targets = batch.spoof_targets();
    let weights = batch.weights.as_deref();
    let mut parts = LossParts {
        spoof: bce_loss(&fwd.spoof_logits, &targets, weights),
        ..LossParts::default()
    };
    let mut dz = bce_grad(&fwd.spoof_logits, &targets, weights);

    if fairness {
        let probs: Vec<f64> = fwd.spoof_logits.iter().map(|&z| sigmoid(z)).collect();
        match soft_group_rates(&probs, &batch.labels, &batch.genders) {
            Ok(rates) => {
                parts.fairness = s2_penalty(&rates, cfg.lambda_fair);
                let pg = penalty_grad(&fwd.spoof_logits, &batch.labels, &batch.genders, &rates, cfg.lambda_fair);
                dz.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
            }
            Err(TrainError::EmptyCellInBatch(..)) => parts.penalty_skipped = true,
            Err(e) => return Err(e),
        }
    }

    let mut grad = model.zeros_like();
    let mut dh = head_backward(&model.spoof_head, &mut grad.spoof_head, &fwd.embeddings, &dz);
    let mut gender = None;

    if adversarial {
        if let (Some(gh), Some(gl)) = (&model.gender_head, &fwd.gender_logits) {
            let gt = batch.female_targets();
            parts.gender = bce_loss(gl, &gt, None);
            let dzg = bce_grad(gl, &gt, None);
            let mut head = Dense::zeros(gh.n_in, 1);
            let dh_g = head_backward(gh, &mut head, &fwd.embeddings, &dzg);
            let mut unrev = grad.encoder.iter().map(|d| Dense::zeros(d.n_in, d.n_out)).collect::<Vec<_>>();
            encoder_backward(model, &cache, &dh_g, &mut unrev);
            if let Some(g) = &mut grad.gender_head {
                *g = head.clone();
            }
            gender = Some(GenderGrad {
                head,
                encoder_unreversed: unrev,
            });
        }
    }

    encoder_backward(model, &cache, &std::mem::take(&mut dh), &mut grad.encoder);
    if let Some(gg) = &gender {
        for (dst, src) in grad.encoder.iter_mut().zip(&gg.encoder_unreversed) {
            for (a, b) in dst.params_mut().zip(grl_backward(&src.params().copied().collect::<Vec<_>>(), cfg.lambda_adv)) {
                *a += b;
            }
        }
    }
    parts.total = parts.spoof + parts.fairness + parts.gender;
    Ok(Objective {
        parts,
        grad,
        logits: fwd.spoof_logits,
        gender,
    })
}

fn batch_objective(model: &MlpModel, batch: &Batch, cfg: &TrainConfig) -> Result<Objective> {
    match cfg.strategy {
        Strategy::Plain | Strategy::S1 | Strategy::Eafr => objective(model, batch, cfg, false, false),
        Strategy::S2 => objective(model, batch, cfg, true, false),
        Strategy::S3 => objective(model, batch, cfg, false, true),
    }
}

/// Gender-branch gradients of the S3 objective on `batch`: the gender head
/// gradient and the encoder gradient before reversal.
pub fn gender_branch_gradients(model: &MlpModel, batch: &Batch, cfg: &TrainConfig) -> Result<GenderGrad> {
    let obj = objective(model, batch, cfg, false, true)?;
    obj.gender
        .ok_or_else(|| TrainError::InvalidConfig("model has no gender head".into()))
}

/// Full analytic gradient of the strategy objective on `batch`, flattened
/// like `MlpModel::params`. EAFR uses BCE plus the penalty on the whole
/// batch, which is the epoch-level objective when the batch is the epoch.
pub fn analytic_gradient(model: &MlpModel, batch: &Batch, cfg: &TrainConfig) -> Result<(LossParts, Vec<f64>)> {
    let obj = match cfg.strategy {
        Strategy::Eafr => objective(model, batch, cfg, true, false)?,
        _ => batch_objective(model, batch, cfg)?,
    };
    Ok((obj.parts, obj.grad.params()))
}

/// Maximum relative error between analytic gradients and central finite
/// differences (step 1e-5). For S3 the reference for head parameters is
/// `L_spoof + L_gender` and for encoder parameters `L_spoof − λ_adv·L_gender`,
/// which is the function the reversed gradient descends.
pub fn gradient_check(model: &MlpModel, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let fairness = matches!(cfg.strategy, Strategy::S2 | Strategy::Eafr);
    if fairness {
        let fwd = forward(model, &batch.x)?;
        let probs: Vec<f64> = fwd.spoof_logits.iter().map(|&z| sigmoid(z)).collect();
        let rates = soft_group_rates(&probs, &batch.labels, &batch.genders)?;
        if rates.fpr_gap().abs() < 1e-6 || rates.fnr_gap().abs() < 1e-6 {
            return Err(TrainError::TiePoint);
        }
    }
    let (_, analytic) = analytic_gradient(model, batch, cfg)?;
    let n_enc = model.n_encoder_params();
    let base = model.params();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut eval = |params: &[f64], encoder_param: bool| -> Result<f64> {
        probe.set_params(params);
        let p = objective(&probe, batch, cfg, fairness, cfg.strategy == Strategy::S3)?.parts;
        Ok(if cfg.strategy == Strategy::S3 && encoder_param {
            p.spoof - cfg.lambda_adv * p.gender
        } else {
            p.total
        })
    };
    let mut worst: f64 = 0.0;
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + h;
        let up = eval(&params, i < n_enc)?;
        params[i] = base[i] - h;
        let down = eval(&params, i < n_enc)?;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub spoof_loss: f64,
    pub fairness_penalty: f64,
    pub gender_loss: f64,
    pub skipped_penalty_batches: usize,
    /// Penalty of the end-of-epoch EAFR step, before the step.
    pub epoch_penalty: Option<f64>,
    /// Soft rates accumulated over the epoch's batches.
    pub rates: Option<GroupRates>,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub head: LinearHead,
    pub embeddings: Vec<EmbeddingRecord>,
    pub trials: Vec<Trial>,
}

struct Samples {
    x: Vec<Vec<f64>>,
    labels: Vec<Label>,
    genders: Vec<Gender>,
}

impl Samples {
    fn batch(&self, idx: &[usize], weights: Option<&Cells<f64>>) -> Batch {
        Batch {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            genders: idx.iter().map(|&i| self.genders[i]).collect(),
            weights: weights.map(|w| idx.iter().map(|&i| *w.get(self.genders[i], self.labels[i])).collect()),
        }
    }

    fn all(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            labels: self.labels.clone(),
            genders: self.genders.clone(),
            weights: None,
        }
    }
}

fn samples_for(dataset: &Dataset, split: Split) -> Result<Samples> {
    let records = dataset.embeddings.as_deref().ok_or(TrainError::MissingEmbeddings)?;
    let by_id: HashMap<&str, &EmbeddingRecord> = records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut s = Samples {
        x: Vec::new(),
        labels: Vec::new(),
        genders: Vec::new(),
    };
    for t in dataset.trials.iter().filter(|t| t.split == split) {
        let r = by_id
            .get(t.utt_id.as_str())
            .ok_or_else(|| TrainError::MissingEmbedding(t.utt_id.clone()))?;
        s.x.push(r.vector.clone());
        s.labels.push(t.label);
        s.genders.push(t.gender);
    }
    if s.x.is_empty() {
        return Err(TrainError::MissingSplit(split));
    }
    Ok(s)
}

fn accuracy(model: &MlpModel, s: &Samples) -> Result<f64> {
    let fwd = forward(model, &s.x)?;
    let hits = fwd
        .spoof_logits
        .iter()
        .zip(&s.labels)
        .filter(|(&z, &l)| (z > 0.0) == (l == Label::Spoof))
        .count();
    Ok(hits as f64 / s.x.len() as f64)
}

/// Train on the Train split's embeddings and export embeddings, head and
/// rescored trials for every trial in `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_set = samples_for(dataset, Split::Train)?;
    let dev_set = samples_for(dataset, Split::Dev)?;
    let train_trials = dataset.split(Split::Train);
    let weights = match cfg.strategy {
        Strategy::S1 => Some(s1_weights(&train_trials)?),
        _ => None,
    };
    let dim = train_set.x[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(dim, &cfg.hidden, cfg.strategy == Strategy::S3, &mut rng);
    let mut order: Vec<usize> = (0..train_set.x.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut acc = GroupAccumulator::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        acc.reset();
        let mut sums = LossParts::default();
        let mut skipped = 0;
        let mut n_batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.batch(chunk, weights.as_ref());
            let obj = batch_objective(&model, &batch, cfg)?;
            if !obj.parts.total.is_finite() {
                return Err(TrainError::NanLoss { epoch, batch: bi });
            }
            model.axpy(-cfg.learning_rate, &obj.grad);
            if !model.is_finite() {
                return Err(TrainError::NanLoss { epoch, batch: bi });
            }
            for ((&z, &l), &g) in obj.logits.iter().zip(&batch.labels).zip(&batch.genders) {
                acc.add(sigmoid(z), g, l);
            }
            sums.total += obj.parts.total;
            sums.spoof += obj.parts.spoof;
            sums.fairness += obj.parts.fairness;
            sums.gender += obj.parts.gender;
            skipped += obj.parts.penalty_skipped as usize;
            n_batches += 1;
        }
        let epoch_penalty = if cfg.strategy == Strategy::Eafr {
            let all = train_set.all();
            let fwd = forward(&model, &all.x)?;
            let probs: Vec<f64> = fwd.spoof_logits.iter().map(|&z| sigmoid(z)).collect();
            let rates = soft_group_rates(&probs, &all.labels, &all.genders)?;
            let penalty = s2_penalty(&rates, cfg.lambda_fair);
            let pg = penalty_grad(&fwd.spoof_logits, &all.labels, &all.genders, &rates, cfg.lambda_fair);
            let (_, cache) = forward_cached(&model, &all.x)?;
            let mut grad = model.zeros_like();
            let dh = head_backward(&model.spoof_head, &mut grad.spoof_head, &fwd.embeddings, &pg);
            encoder_backward(&model, &cache, &dh, &mut grad.encoder);
            model.axpy(-cfg.learning_rate, &grad);
            if !penalty.is_finite() || !model.is_finite() {
                return Err(TrainError::NanLoss { epoch, batch: n_batches });
            }
            Some(penalty)
        } else {
            None
        };
        let nb = n_batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            loss: sums.total / nb,
            spoof_loss: sums.spoof / nb,
            fairness_penalty: sums.fairness / nb,
            gender_loss: sums.gender / nb,
            skipped_penalty_batches: skipped,
            epoch_penalty,
            rates: acc.rates().ok(),
            train_accuracy: accuracy(&model, &train_set)?,
            dev_accuracy: accuracy(&model, &dev_set)?,
        });
    }

    let head = model.export_head();
    let records = dataset.embeddings.as_deref().ok_or(TrainError::MissingEmbeddings)?;
    let by_id: HashMap<&str, &EmbeddingRecord> = records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut embeddings = Vec::with_capacity(dataset.trials.len());
    let mut trials = Vec::with_capacity(dataset.trials.len());
    for t in &dataset.trials {
        let r = by_id
            .get(t.utt_id.as_str())
            .ok_or_else(|| TrainError::MissingEmbedding(t.utt_id.clone()))?;
        if r.vector.len() != dim {
            return Err(TrainError::DimensionMismatch {
                expected: dim,
                got: r.vector.len(),
            });
        }
        let e = model.embed(&r.vector);
        trials.push(Trial {
            score: head.score(&e),
            ..t.clone()
        });
        embeddings.push(EmbeddingRecord {
            utt_id: t.utt_id.clone(),
            vector: e,
            gender: t.gender,
            label: t.label,
        });
    }
    Ok(TrainOutput {
        model,
        history,
        head,
        embeddings,
        trials,
    })
}

/// Spread of soft rate estimates from random batches versus whole-epoch
/// bootstrap resamples on a fixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateVariability {
    pub batch_std: GroupRates,
    pub epoch_std: GroupRates,
    /// Batches in which each rate was defined, in `GroupRates` order.
    pub batch_samples: [usize; 4],
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn partial_rates(probs: &[f64], labels: &[Label], genders: &[Gender], idx: &[usize]) -> [Option<f64>; 4] {
    let mut acc = GroupAccumulator::default();
    for &i in idx {
        acc.add(probs[i], genders[i], labels[i]);
    }
    let mean = |g, l| {
        let n = *acc.count.get(g, l);
        (n > 0).then(|| acc.sum.get(g, l) / n as f64)
    };
    [
        mean(Gender::F, Label::Bonafide),
        mean(Gender::M, Label::Bonafide),
        mean(Gender::F, Label::Spoof).map(|p| 1.0 - p),
        mean(Gender::M, Label::Spoof).map(|p| 1.0 - p),
    ]
}

pub fn rate_variability(
    model: &MlpModel,
    records: &[EmbeddingRecord],
    batch_size: usize,
    resamples: usize,
    seed: u64,
) -> Result<RateVariability> {
    if records.is_empty() {
        return Err(TrainError::MissingEmbeddings);
    }
    let xs: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let genders: Vec<Gender> = records.iter().map(|r| r.gender).collect();
    let probs: Vec<f64> = forward(model, &xs)?.spoof_logits.iter().map(|&z| sigmoid(z)).collect();
    let n = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch: [Vec<f64>; 4] = Default::default();
    let mut epoch: [Vec<f64>; 4] = Default::default();
    for _ in 0..resamples {
        let idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec();
        for (k, r) in partial_rates(&probs, &labels, &genders, &idx).into_iter().enumerate() {
            if let Some(v) = r {
                batch[k].push(v);
            }
        }
        let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        for (k, r) in partial_rates(&probs, &labels, &genders, &boot).into_iter().enumerate() {
            if let Some(v) = r {
                epoch[k].push(v);
            }
        }
    }
    let to_rates = |v: &[Vec<f64>; 4]| GroupRates {
        fpr_f: population_std(&v[0]),
        fpr_m: population_std(&v[1]),
        fnr_f: population_std(&v[2]),
        fnr_m: population_std(&v[3]),
    };
    Ok(RateVariability {
        batch_std: to_rates(&batch),
        epoch_std: to_rates(&epoch),
        batch_samples: [batch[0].len(), batch[1].len(), batch[2].len(), batch[3].len()],
    })
}
