use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairgate::data::{self, Dataset, Polarity};
use fairgate::diagnosis::{self, DiagnosisConfig, Mitigation, ProbeConfig, Thresholds};
use fairgate::metrics::{EopMode, FairnessReport};
use fairgate::postproc::{self, PipelineConfig, StrategySpec, SuppressionMode};
use fairgate::report;
use fairgate::synth;
use fairgate::trainer::{self, Strategy, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "fairgate", version, about = "Gender bias diagnosis and mitigation for spoof detector scores")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Score orientation of the input files.
    #[arg(long, global = true, value_enum, default_value_t = PolarityArg::BonafideHigh)]
    polarity: PolarityArg,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "fairgate-run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PolarityArg {
    BonafideHigh,
    SpoofHigh,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::BonafideHigh => Polarity::BonafideHigh,
            PolarityArg::SpoofHigh => Polarity::SpoofHigh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EopArg {
    Fpr,
    Tpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TrainedArg {
    S1,
    S2,
    S3,
    Eafr,
}

impl From<TrainedArg> for Mitigation {
    fn from(t: TrainedArg) -> Self {
        match t {
            TrainedArg::S1 => Mitigation::S1,
            TrainedArg::S2 => Mitigation::S2,
            TrainedArg::S3 => Mitigation::S3,
            TrainedArg::Eafr => Mitigation::Eafr,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct Inputs {
    /// Trial TSV.
    #[arg(long)]
    trials: PathBuf,
    /// Embedding CSV keyed by utt_id.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Linear head CSV over the embeddings.
    #[arg(long)]
    head: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the eight bias source checks. Exit 2 when any source is confirmed.
    Diagnose {
        #[command(flatten)]
        inputs: Inputs,
        /// JSON file overriding status thresholds.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Shared threshold for the objective bias check.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        /// Fraction of embeddings used to fit the leakage probe.
        #[arg(long, default_value_t = 0.7)]
        split_fraction: f64,
    },
    /// Evaluate mitigation strategies on the Eval split.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        /// Strategy specs such as `baseline`, `tc`, `sgfs+tc`.
        #[arg(long, value_delimiter = ',', required_unless_present = "grid", conflicts_with = "grid")]
        strategy: Vec<String>,
        /// Run every applicable strategy.
        #[arg(long)]
        grid: bool,
        /// Training strategy that produced the scores.
        #[arg(long, value_enum)]
        trained: Option<TrainedArg>,
        /// Number of attribution-ranked dims to edit.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Variance-preserving GNEA variant.
        #[arg(long)]
        align_shift: bool,
        #[arg(long, value_enum, default_value_t = EopArg::Fpr)]
        eop: EopArg,
    },
    /// Per-gender thresholds from the Dev split.
    Calibrate {
        #[arg(long)]
        trials: PathBuf,
    },
    /// Train a detector on embeddings and export rescored artifacts.
    Train {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// plain, s1, s2, s3 or eafr.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        lambda_fair: Option<f64>,
        #[arg(long)]
        lambda_adv: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Generate a synthetic dataset with a known bias source.
    Synth {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        n_per_cell: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
    },
    /// Render per-gender score histograms.
    Report {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    polarity: PolarityArg,
    /// SHA-256 of each input file, keyed by role.
    inputs: BTreeMap<&'static str, String>,
    /// Seconds since the epoch from `SOURCE_DATE_EPOCH`, if set.
    timestamp: Option<u64>,
}

struct Run {
    out: PathBuf,
    seed: u64,
    polarity: PolarityArg,
    inputs: BTreeMap<&'static str, String>,
}

impl Run {
    fn manifest(&self, command: &'static str, config: impl Serialize) -> Result<RunManifest> {
        Ok(RunManifest {
            tool: "fairgate",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: serde_json::to_value(config)?,
            seed: self.seed,
            polarity: self.polarity,
            inputs: self.inputs.clone(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()),
        })
    }

    fn digest(&mut self, role: &'static str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.insert(role, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents.as_bytes())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn load(&mut self, inputs: &Inputs) -> Result<Dataset> {
        self.digest("trials", &inputs.trials)?;
        let mut ds = data::parse_trials(&inputs.trials)?;
        if let Some(p) = &inputs.embeddings {
            self.digest("embeddings", p)?;
            ds = data::parse_embeddings(p, ds)?;
        }
        if let Some(p) = &inputs.head {
            self.digest("head", p)?;
            let mut head = data::parse_head(p)?;
            if self.polarity == PolarityArg::SpoofHigh {
                head.weights.iter_mut().for_each(|w| *w = -*w);
                head.bias = -head.bias;
            }
            ds.attach_head(head)?;
        }
        ds.apply_polarity(self.polarity.into());
        for w in data::validate(&ds) {
            eprintln!("warning: {w}");
        }
        Ok(ds)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("FAIRGATE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("FAIRGATE_THREADS must be a positive integer, got {v:?}"))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

#[derive(Serialize)]
struct DiagnoseConfigSnapshot<'a> {
    thresholds: &'a Thresholds,
    probe: &'a ProbeConfig,
    split_fraction: f64,
    default_threshold: Option<f64>,
}

fn diagnose(
    run: &mut Run,
    inputs: &Inputs,
    thresholds: Option<&Path>,
    threshold: Option<f64>,
    split_fraction: f64,
) -> Result<u8> {
    let ds = run.load(inputs)?;
    let th = match thresholds {
        Some(p) => {
            run.digest("thresholds", p)?;
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid thresholds file {}", p.display()))?
        }
        None => Thresholds::default(),
    };
    let cfg = DiagnosisConfig {
        thresholds: th,
        probe: ProbeConfig::default(),
        seed: run.seed,
        split_fraction,
        default_threshold: threshold,
    };
    let result = diagnosis::diagnose_all(&ds, &cfg);
    let manifest = run.manifest(
        "diagnose",
        DiagnoseConfigSnapshot {
            thresholds: &cfg.thresholds,
            probe: &cfg.probe,
            split_fraction,
            default_threshold: threshold,
        },
    )?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        diagnosis: &'a diagnosis::DiagnosisReport,
    }
    run.write_json(
        "diagnosis.json",
        &Out {
            manifest,
            diagnosis: &result,
        },
    )?;
    run.write("diagnosis.md", &report::diagnosis_markdown(&result))?;
    Ok(if result.any_confirmed() { 2 } else { 0 })
}

#[derive(Serialize)]
struct EvaluationRow {
    strategy: String,
    report: FairnessReport,
}

fn evaluate(run: &mut Run, inputs: &Inputs, specs: Vec<StrategySpec>, grid: bool, cfg: PipelineConfig) -> Result<u8> {
    let ds = run.load(inputs)?;
    let specs = if grid {
        postproc::applicable_strategies(&ds, cfg.trained)
    } else {
        specs
    };
    let pool = thread_pool()?;
    let rows: Vec<Result<EvaluationRow>> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| {
                let report = postproc::run_pipeline(&ds, s, &cfg).with_context(|| format!("strategy {s}"))?;
                Ok(EvaluationRow {
                    strategy: s.to_string(),
                    report,
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    #[derive(Serialize)]
    struct Snapshot<'a> {
        pipeline: &'a PipelineConfig,
        strategies: Vec<String>,
        grid: bool,
    }
    let manifest = run.manifest(
        "evaluate",
        Snapshot {
            pipeline: &cfg,
            strategies: specs.iter().map(ToString::to_string).collect(),
            grid,
        },
    )?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        rows: &'a [EvaluationRow],
    }
    run.write_json("evaluation.json", &Out { manifest, rows: &rows })?;
    let table: Vec<(String, FairnessReport)> = rows.into_iter().map(|r| (r.strategy, r.report)).collect();
    run.write("evaluation.md", &report::evaluation_markdown(&table))?;
    Ok(0)
}

fn calibrate(run: &mut Run, trials: &Path) -> Result<u8> {
    run.digest("trials", trials)?;
    let mut ds = data::parse_trials(trials)?;
    ds.apply_polarity(run.polarity.into());
    let pair = postproc::calibrate_thresholds(&ds.trials)?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        thresholds: &'a postproc::ThresholdPair,
    }
    let manifest = run.manifest("calibrate", serde_json::json!({}))?;
    run.write_json(
        "thresholds.json",
        &Out {
            manifest,
            thresholds: &pair,
        },
    )?;
    Ok(0)
}

fn train(run: &mut Run, trials: &Path, embeddings: &Path, mut cfg: TrainConfig) -> Result<u8> {
    run.digest("trials", trials)?;
    run.digest("embeddings", embeddings)?;
    let mut ds = data::parse_trials(trials)?;
    ds = data::parse_embeddings(embeddings, ds)?;
    ds.apply_polarity(run.polarity.into());
    cfg.seed = run.seed;
    let out = trainer::train(&ds, &cfg)?;
    run.write("trials.tsv", &data::write_trials_string(&out.trials))?;
    run.write("embeddings.csv", &data::write_embeddings_string(&out.embeddings))?;
    run.write("head.csv", &data::write_head_string(&out.head))?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        history: &'a [trainer::EpochRecord],
    }
    let manifest = run.manifest("train", &cfg)?;
    run.write_json(
        "history.json",
        &Out {
            manifest,
            history: &out.history,
        },
    )?;
    Ok(0)
}

fn synthesize(run: &mut Run, preset: &str, n_per_cell: Option<usize>, embed_dim: Option<usize>) -> Result<u8> {
    let mut cfg = synth::preset(preset, run.seed)?;
    if let Some(n) = n_per_cell {
        cfg.n_per_cell = n;
    }
    if let Some(d) = embed_dim {
        cfg.embed_dim = d;
    }
    let (ds, truth) = synth::generate(&cfg)?;
    let head = ds.head.as_ref().context("generator did not emit a head")?;
    let records = ds.embeddings.as_deref().context("generator did not emit embeddings")?;
    run.write("trials.tsv", &data::write_trials_string(&ds.trials))?;
    run.write("embeddings.csv", &data::write_embeddings_string(records))?;
    run.write("head.csv", &data::write_head_string(head))?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        ground_truth: &'a synth::GroundTruth,
    }
    let manifest = run.manifest("synth", &cfg)?;
    run.write_json(
        "ground_truth.json",
        &Out {
            manifest,
            ground_truth: &truth,
        },
    )?;
    Ok(0)
}

fn render(run: &mut Run, trials: &Path, bins: usize) -> Result<u8> {
    if bins == 0 {
        bail!("--bins must be positive");
    }
    run.digest("trials", trials)?;
    let mut ds = data::parse_trials(trials)?;
    ds.apply_polarity(run.polarity.into());
    let svg = report::histogram_svg(&ds.trials, bins)?;
    let summary = fairgate::metrics::score_summary(&ds.trials, bins)?;
    run.write("histograms.svg", &svg)?;
    #[derive(Serialize)]
    struct Out<'a> {
        manifest: RunManifest,
        summary: &'a fairgate::metrics::ScoreSummary,
    }
    let manifest = run.manifest("report", serde_json::json!({ "bins": bins }))?;
    run.write_json(
        "score_summary.json",
        &Out {
            manifest,
            summary: &summary,
        },
    )?;
    Ok(0)
}

fn execute(cli: Cli) -> Result<u8> {
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let mut run = Run {
        out: cli.out,
        seed: cli.seed,
        polarity: cli.polarity,
        inputs: BTreeMap::new(),
    };
    match cli.command {
        Command::Diagnose {
            inputs,
            thresholds,
            threshold,
            split_fraction,
        } => diagnose(&mut run, &inputs, thresholds.as_deref(), threshold, split_fraction),
        Command::Evaluate {
            inputs,
            strategy,
            grid,
            trained,
            k,
            align_shift,
            eop,
        } => {
            let specs = strategy
                .iter()
                .map(|s| s.parse::<StrategySpec>())
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = PipelineConfig {
                k,
                align_mode: if align_shift {
                    SuppressionMode::AlignShift
                } else {
                    SuppressionMode::Align
                },
                eop_mode: match eop {
                    EopArg::Fpr => EopMode::FalsePositiveRate,
                    EopArg::Tpr => EopMode::TruePositiveRate,
                },
                seed: run.seed,
                trained: trained.map(Into::into),
                ..PipelineConfig::default()
            };
            evaluate(&mut run, &inputs, specs, grid, cfg)
        }
        Command::Calibrate { trials } => calibrate(&mut run, &trials),
        Command::Train {
            trials,
            embeddings,
            strategy,
            lambda_fair,
            lambda_adv,
            epochs,
            batch_size,
            learning_rate,
        } => {
            let mut cfg = TrainConfig::new(strategy.parse::<Strategy>()?);
            if let Some(v) = lambda_fair {
                cfg.lambda_fair = v;
            }
            if let Some(v) = lambda_adv {
                cfg.lambda_adv = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            train(&mut run, &trials, &embeddings, cfg)
        }
        Command::Synth {
            preset,
            n_per_cell,
            embed_dim,
        } => synthesize(&mut run, &preset, n_per_cell, embed_dim),
        Command::Report { trials, bins } => render(&mut run, &trials, bins),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
