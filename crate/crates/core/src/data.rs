//! On-disk data model: trial score files, embedding tables and linear
//! scoring heads.
//!
//! Scores follow the bonafide-high convention throughout the crate: a trial
//! is predicted spoof iff its score is below the decision threshold. Score
//! files written by detectors with the opposite convention are brought into
//! line with [`Dataset::apply_polarity`] right after parsing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact header of a trial TSV file.
pub const TRIALS_HEADER: &str = "utt_id\tscore\tlabel\tgender\tattack\tsplit";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: bad header, expected `{expected}`")]
    BadHeader { line: usize, expected: String },
    #[error("empty input")]
    EmptyInput,
    #[error("line {0}: malformed row")]
    MalformedRow(usize),
    #[error("duplicate utt_id `{0}`")]
    DuplicateUttId(String),
    #[error("line {line}: invalid value for field `{field}`")]
    InvalidEnum { field: &'static str, line: usize },
    #[error("line {0}: attack must be present iff label is spoof")]
    AttackMismatch(usize),
    #[error("utt_id `{0}` not present in trials")]
    UnknownUttId(String),
    #[error("line {0}: ragged row")]
    RaggedRow(usize),
    #[error("line {line}, column {col}: non-finite value")]
    NonFiniteValue { line: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Bonafide,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Bonafide, Label::Spoof];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::F, Gender::M];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::F => Gender::M,
            Gender::M => Gender::F,
        }
    }
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "bonafide" | "bona-fide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            _ => Err(()),
        }
    }
}

impl FromStr for Gender {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            _ => Err(()),
        }
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(()),
        }
    }
}

/// Orientation of detector scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Polarity {
    /// Higher score means more bonafide-like.
    #[default]
    BonafideHigh,
    /// Higher score means more spoof-like; scores are negated on load.
    SpoofHigh,
}

/// One utterance's detector output plus its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub utt_id: String,
    pub score: f64,
    pub label: Label,
    pub gender: Gender,
    pub attack_id: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub utt_id: String,
    pub vector: Vec<f64>,
    pub gender: Gender,
    pub label: Label,
}

/// Affine scorer over embeddings: `score = weights · x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    pub embeddings: Option<Vec<EmbeddingRecord>>,
    pub head: Option<LinearHead>,
}

impl Dataset {
    pub fn from_trials(trials: Vec<Trial>) -> Self {
        Dataset {
            trials,
            embeddings: None,
            head: None,
        }
    }

    /// Dimension of the embedding set, if any embeddings are attached.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.embeddings
            .as_ref()
            .and_then(|e| e.first())
            .map(|r| r.vector.len())
    }

    pub fn split(&self, split: Split) -> Vec<Trial> {
        self.trials
            .iter()
            .filter(|t| t.split == split)
            .cloned()
            .collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.trials.iter().any(|t| t.split == split)
    }

    /// Embedding records whose trial belongs to one of `splits`.
    pub fn embeddings_in(&self, splits: &[Split]) -> Vec<EmbeddingRecord> {
        let Some(records) = &self.embeddings else {
            return Vec::new();
        };
        let wanted: HashSet<&str> = self
            .trials
            .iter()
            .filter(|t| splits.contains(&t.split))
            .map(|t| t.utt_id.as_str())
            .collect();
        records
            .iter()
            .filter(|r| wanted.contains(r.utt_id.as_str()))
            .cloned()
            .collect()
    }

    pub fn apply_polarity(&mut self, polarity: Polarity) {
        if polarity == Polarity::SpoofHigh {
            for t in &mut self.trials {
                t.score = -t.score;
            }
        }
    }

    pub fn attach_head(&mut self, head: LinearHead) -> Result<()> {
        if let Some(d) = self.embedding_dim() {
            if d != head.dim() {
                return Err(DataError::DimensionMismatch {
                    expected: d,
                    got: head.dim(),
                });
            }
        }
        self.head = Some(head);
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_trials(path: &Path) -> Result<Dataset> {
    parse_trials_str(&read_file(path)?)
}

/// Parse trial TSV text. Line numbers in errors are 1-based and count the
/// header.
pub fn parse_trials_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == TRIALS_HEADER => {}
        Some(_) => {
            return Err(DataError::BadHeader {
                line: 1,
                expected: TRIALS_HEADER.replace('\t', "\\t"),
            })
        }
        None => return Err(DataError::EmptyInput),
    }

    let mut seen = HashSet::new();
    let mut trials = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(DataError::MalformedRow(line_no));
        }
        let utt_id = cols[0];
        if utt_id.is_empty() {
            return Err(DataError::MalformedRow(line_no));
        }
        let score: f64 = cols[1]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or(DataError::MalformedRow(line_no))?;
        let label: Label = cols[2].parse().map_err(|_| DataError::InvalidEnum {
            field: "label",
            line: line_no,
        })?;
        let gender: Gender = cols[3].parse().map_err(|_| DataError::InvalidEnum {
            field: "gender",
            line: line_no,
        })?;
        let attack_id = match cols[4] {
            "-" => None,
            "" => return Err(DataError::MalformedRow(line_no)),
            a => Some(a.to_string()),
        };
        let split: Split = cols[5].parse().map_err(|_| DataError::InvalidEnum {
            field: "split",
            line: line_no,
        })?;
        if attack_id.is_some() != (label == Label::Spoof) {
            return Err(DataError::AttackMismatch(line_no));
        }
        if !seen.insert(utt_id.to_string()) {
            return Err(DataError::DuplicateUttId(utt_id.to_string()));
        }
        trials.push(Trial {
            utt_id: utt_id.to_string(),
            score,
            label,
            gender,
            attack_id,
            split,
        });
    }
    Ok(Dataset::from_trials(trials))
}

pub fn write_trials_string(trials: &[Trial]) -> String {
    let mut out = String::with_capacity(trials.len() * 40);
    out.push_str(TRIALS_HEADER);
    out.push('\n');
    for t in trials {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            t.utt_id,
            t.score,
            t.label,
            t.gender,
            t.attack_id.as_deref().unwrap_or("-"),
            t.split
        ));
    }
    out
}

pub fn parse_embeddings(path: &Path, dataset: Dataset) -> Result<Dataset> {
    parse_embeddings_str(&read_file(path)?, dataset)
}

/// Parse an embedding CSV and join it onto `dataset`'s trials; gender and
/// label are taken from the matching trial.
pub fn parse_embeddings_str(text: &str, mut dataset: Dataset) -> Result<Dataset> {
    let by_id: HashMap<&str, &Trial> = dataset
        .trials
        .iter()
        .map(|t| (t.utt_id.as_str(), t))
        .collect();

    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, h)) => parse_embedding_header(h.trim_end_matches('\r'))?,
        None => return Err(DataError::EmptyInput),
    };

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let utt_id = cols.next().unwrap_or_default();
        let values: Vec<&str> = cols.collect();
        if values.len() != dim {
            return Err(DataError::RaggedRow(line_no));
        }
        let mut vector = Vec::with_capacity(dim);
        for (c, v) in values.iter().enumerate() {
            let x: f64 = v.trim().parse().map_err(|_| DataError::MalformedRow(line_no))?;
            if !x.is_finite() {
                return Err(DataError::NonFiniteValue {
                    line: line_no,
                    col: c + 1,
                });
            }
            vector.push(x);
        }
        let trial = by_id
            .get(utt_id)
            .ok_or_else(|| DataError::UnknownUttId(utt_id.to_string()))?;
        if !seen.insert(utt_id.to_string()) {
            return Err(DataError::DuplicateUttId(utt_id.to_string()));
        }
        records.push(EmbeddingRecord {
            utt_id: utt_id.to_string(),
            vector,
            gender: trial.gender,
            label: trial.label,
        });
    }
    if let Some(head) = &dataset.head {
        if head.dim() != dim {
            return Err(DataError::DimensionMismatch {
                expected: dim,
                got: head.dim(),
            });
        }
    }
    dataset.embeddings = Some(records);
    Ok(dataset)
}

fn parse_embedding_header(header: &str) -> Result<usize> {
    let bad = || DataError::BadHeader {
        line: 1,
        expected: "utt_id,e0,...,e{D-1}".to_string(),
    };
    let mut cols = header.split(',');
    if cols.next() != Some("utt_id") {
        return Err(bad());
    }
    let mut dim = 0;
    for (i, c) in cols.enumerate() {
        if c != format!("e{i}") {
            return Err(bad());
        }
        dim += 1;
    }
    if dim == 0 {
        return Err(bad());
    }
    Ok(dim)
}

pub fn write_embeddings_string(records: &[EmbeddingRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("utt_id");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.utt_id);
        for v in &r.vector {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_head(path: &Path) -> Result<LinearHead> {
    parse_head_str(&read_file(path)?)
}

/// Parse a linear head CSV: an optional `w0,...,w{D-1},bias` header and a
/// single row of values.
pub fn parse_head_str(text: &str) -> Result<LinearHead> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty());
    let (mut line_no, mut row) = rows.next().ok_or(DataError::EmptyInput)?;
    let mut expected_len = None;
    if row.starts_with('w') || row.starts_with("bias") {
        let names: Vec<&str> = row.split(',').collect();
        let ok = names.last() == Some(&"bias")
            && names[..names.len() - 1]
                .iter()
                .enumerate()
                .all(|(i, n)| *n == format!("w{i}"));
        if !ok || names.len() < 2 {
            return Err(DataError::BadHeader {
                line: line_no,
                expected: "w0,...,w{D-1},bias".to_string(),
            });
        }
        expected_len = Some(names.len());
        (line_no, row) = rows.next().ok_or(DataError::EmptyInput)?;
    }
    let mut values = Vec::new();
    for (c, v) in row.split(',').enumerate() {
        let x: f64 = v.trim().parse().map_err(|_| DataError::MalformedRow(line_no))?;
        if !x.is_finite() {
            return Err(DataError::NonFiniteValue {
                line: line_no,
                col: c + 1,
            });
        }
        values.push(x);
    }
    if values.len() < 2 || expected_len.is_some_and(|n| n != values.len()) {
        return Err(DataError::RaggedRow(line_no));
    }
    if let Some((extra, _)) = rows.next() {
        return Err(DataError::MalformedRow(extra));
    }
    let bias = values.pop().expect("at least two values");
    Ok(LinearHead {
        weights: values,
        bias,
    })
}

pub fn write_head_string(head: &LinearHead) -> String {
    let mut header: Vec<String> = (0..head.dim()).map(|i| format!("w{i}")).collect();
    header.push("bias".into());
    let mut values: Vec<String> = head.weights.iter().map(|w| w.to_string()).collect();
    values.push(head.bias.to_string());
    format!("{}\n{}\n", header.join(","), values.join(","))
}

/// Non-fatal findings about a dataset. Never mutates it.
pub fn validate(dataset: &Dataset) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut cells: BTreeMap<(Gender, Label), usize> = BTreeMap::new();
    let mut splits = BTreeSet::new();
    for t in &dataset.trials {
        *cells.entry((t.gender, t.label)).or_default() += 1;
        splits.insert(t.split);
    }
    for g in Gender::ALL {
        for l in Label::ALL {
            if !cells.contains_key(&(g, l)) {
                let name = match l {
                    Label::Bonafide => "Bonafide",
                    Label::Spoof => "Spoof",
                };
                warnings.push(format!("empty cell ({g}, {name})"));
            }
        }
    }
    if !splits.contains(&Split::Train) {
        warnings.push("no train split: training balance check unavailable".into());
    }
    if !splits.contains(&Split::Dev) {
        warnings.push("no dev split: threshold calibration unavailable".into());
    }
    if !splits.contains(&Split::Eval) {
        warnings.push("no eval split: evaluation falls back to all trials".into());
    }
    if let Some(records) = &dataset.embeddings {
        if let Some(first) = records.first() {
            let d = first.vector.len();
            if records.iter().any(|r| r.vector.len() != d) {
                warnings.push("embedding dimensions differ between records".into());
            }
            if let Some(h) = &dataset.head {
                if h.dim() != d {
                    warnings.push(format!(
                        "head dimension {} does not match embedding dimension {d}",
                        h.dim()
                    ));
                }
            }
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(rows: &[&str]) -> String {
        let mut s = format!("{TRIALS_HEADER}\n");
        for r in rows {
            s.push_str(&r.replace(' ', "\t"));
            s.push('\n');
        }
        s
    }

    #[test]
    fn parses_bonafide_and_spoof_rows() {
        let ds = parse_trials_str(&tsv(&["u1 2.5 bonafide F - eval", "u2 -0.3 spoof M A17 eval"]))
            .unwrap();
        assert_eq!(
            ds.trials[0],
            Trial {
                utt_id: "u1".into(),
                score: 2.5,
                label: Label::Bonafide,
                gender: Gender::F,
                attack_id: None,
                split: Split::Eval
            }
        );
        assert_eq!(ds.trials[1].attack_id.as_deref(), Some("A17"));
        assert_eq!(ds.trials[1].score, -0.3);
        assert_eq!(ds.trials[1].gender, Gender::M);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse_trials_str(&tsv(&["u1 1 bonafide F - eval", "u1 2 bonafide M - eval"]))
            .unwrap_err();
        assert!(matches!(err, DataError::DuplicateUttId(id) if id == "u1"));
    }

    #[test]
    fn row_errors_carry_line_numbers() {
        let cases = [
            ("u1 x bonafide F - eval", "malformed 2"),
            ("u1 1 bonafide F -", "malformed 2"),
            ("u1 1 human F - eval", "label 2"),
            ("u1 1 bonafide X - eval", "gender 2"),
            ("u1 1 bonafide F - test", "split 2"),
            ("u1 1 bonafide F A01 eval", "attack 2"),
            ("u1 inf bonafide F - eval", "malformed 2"),
        ];
        for (row, want) in cases {
            let err = parse_trials_str(&tsv(&[row])).unwrap_err();
            let got = match err {
                DataError::MalformedRow(l) => format!("malformed {l}"),
                DataError::InvalidEnum { field, line } => format!("{field} {line}"),
                DataError::AttackMismatch(l) => format!("attack {l}"),
                e => panic!("unexpected {e}"),
            };
            assert_eq!(got, want, "row {row}");
        }
    }

    #[test]
    fn header_must_match() {
        assert!(matches!(
            parse_trials_str("id\tscore\n"),
            Err(DataError::BadHeader { line: 1, .. })
        ));
        assert!(matches!(parse_trials_str(""), Err(DataError::EmptyInput)));
    }

    fn three_trials() -> Dataset {
        parse_trials_str(&tsv(&[
            "a 1 bonafide F - train",
            "b 2 spoof M A01 train",
            "c 3 bonafide M - dev",
        ]))
        .unwrap()
    }

    #[test]
    fn embeddings_infer_dimension_and_copy_metadata() {
        let csv = "utt_id,e0,e1,e2,e3\na,1,2,3,4\nb,0,0,0,0\nc,-1,0.5,2,1e-3\n";
        let ds = parse_embeddings_str(csv, three_trials()).unwrap();
        assert_eq!(ds.embedding_dim(), Some(4));
        let e = ds.embeddings.unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[1].gender, Gender::M);
        assert_eq!(e[1].label, Label::Spoof);
    }

    #[test]
    fn embedding_errors() {
        let unknown = "utt_id,e0\nzz,1\n";
        assert!(matches!(
            parse_embeddings_str(unknown, three_trials()),
            Err(DataError::UnknownUttId(id)) if id == "zz"
        ));
        let nan = "utt_id,e0,e1\na,1,nan\n";
        assert!(matches!(
            parse_embeddings_str(nan, three_trials()),
            Err(DataError::NonFiniteValue { line: 2, col: 2 })
        ));
        let ragged = "utt_id,e0,e1\na,1\n";
        assert!(matches!(
            parse_embeddings_str(ragged, three_trials()),
            Err(DataError::RaggedRow(2))
        ));
    }

    #[test]
    fn head_with_and_without_header() {
        let h = parse_head_str("w0,w1,bias\n1,2,0.5\n").unwrap();
        assert_eq!(h.weights, vec![1.0, 2.0]);
        assert_eq!(h.bias, 0.5);
        assert_eq!(parse_head_str("1,2,0.5\n").unwrap(), h);
        assert_eq!(parse_head_str(&write_head_string(&h)).unwrap(), h);
        assert!(parse_head_str("w0,bias\n1,2,3\n").is_err());
        assert!(parse_head_str("1\n").is_err());
    }

    #[test]
    fn validate_reports_empty_cells_and_missing_dev() {
        let ds = parse_trials_str(&tsv(&[
            "a 1 bonafide F - train",
            "b 1 bonafide M - eval",
            "c 0 spoof M A01 eval",
        ]))
        .unwrap();
        let w = validate(&ds);
        assert!(w.contains(&"empty cell (F, Spoof)".to_string()));
        assert!(w.iter().any(|m| m.contains("threshold calibration unavailable")));
    }

    #[test]
    fn validate_clean_dataset_is_silent() {
        let ds = parse_trials_str(&tsv(&[
            "a 1 bonafide F - train",
            "b 0 spoof F A01 dev",
            "c 1 bonafide M - dev",
            "d 0 spoof M A01 eval",
        ]))
        .unwrap();
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn polarity_flips_scores() {
        let mut ds = three_trials();
        ds.apply_polarity(Polarity::SpoofHigh);
        assert_eq!(ds.trials[0].score, -1.0);
    }
}
