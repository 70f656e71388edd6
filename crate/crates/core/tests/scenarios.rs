//! Worked examples on hand-built and generated datasets.

use fairgate::data::{Dataset, EmbeddingRecord, Gender, Label, LinearHead, Split, Trial};
use fairgate::diagnosis::{
    self, CheckId, DiagnosisConfig, Localisation, Mitigation, ProbeConfig, ProbeModel, Status, Thresholds,
};
use fairgate::metrics::{self, EopMode};
use fairgate::postproc::{self, PipelineConfig, StrategySpec, SuppressionMode};
use fairgate::synth::{self, LeakMode};
use fairgate::trainer::{self, Batch, MlpModel, Strategy as Objective, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn trial(id: String, score: f64, label: Label, gender: Gender, split: Split) -> Trial {
    Trial {
        utt_id: id,
        score,
        label,
        gender,
        attack_id: (label == Label::Spoof).then(|| "A01".to_string()),
        split,
    }
}

/// Cell sizes `[F bona, F spoof, M bona, M spoof]` with constant scores.
fn cells(counts: [usize; 4], split: Split) -> Vec<Trial> {
    let keys = [
        (Gender::F, Label::Bonafide),
        (Gender::F, Label::Spoof),
        (Gender::M, Label::Bonafide),
        (Gender::M, Label::Spoof),
    ];
    let mut out = Vec::new();
    for ((g, l), n) in keys.into_iter().zip(counts) {
        for _ in 0..n {
            let s = if l == Label::Bonafide { 1.0 } else { -1.0 };
            out.push(trial(format!("{split}{}", out.len()), s, l, g, split));
        }
    }
    out
}

#[test]
fn gender_skew_in_training_is_confirmed() {
    // 1800 female vs 200 male training trials.
    let train = cells([900, 900, 100, 100], Split::Train);
    let r = diagnosis::check_training_balance(&train, &Thresholds::default()).unwrap();
    // Skew in gender alone leaves the gender-label table independent.
    assert_eq!(r.status, Status::RuledOut);
    let train = cells([900, 100, 500, 500], Split::Train);
    let r = diagnosis::check_training_balance(&train, &Thresholds::default()).unwrap();
    assert_eq!(r.status, Status::Confirmed);
    assert!(r.statistics["p_value"] < 1e-10);
}

#[test]
fn skewed_eval_ratios_are_confirmed() {
    let eval = cells([10_000, 41_000, 10_000, 37_100], Split::Eval);
    let r = diagnosis::check_eval_asymmetry(&eval, &Thresholds::default()).unwrap();
    assert_eq!(r.status, Status::Confirmed);
    assert!(r.evidence.contains("1:4.10") && r.evidence.contains("1:3.71"), "{}", r.evidence);
}

#[test]
fn eval_without_spoof_makes_attack_overlap_vacuous() {
    let train = cells([5, 5, 5, 5], Split::Train);
    let eval = cells([5, 0, 5, 0], Split::Eval);
    let r = diagnosis::check_attack_overlap(&train, &eval);
    assert_eq!(r.status, Status::Weak);
    assert!(r.evidence.contains("no eval attacks"));
}

/// Dev trials whose per-gender EER thresholds are `theta_f` and `theta_m`.
fn dev_with_thresholds(theta_f: f64, theta_m: f64) -> Vec<Trial> {
    let mut out = Vec::new();
    for (g, theta) in [(Gender::F, theta_f), (Gender::M, theta_m)] {
        for (l, s) in [(Label::Bonafide, theta + 0.001), (Label::Spoof, theta - 0.001)] {
            out.push(trial(format!("d{}", out.len()), s, l, g, Split::Dev));
        }
    }
    out
}

#[test]
fn per_gender_threshold_gaps_are_confirmed() {
    for (f, m, gap) in [(5.249, 5.091, 0.158), (0.773, 0.671, 0.102)] {
        let dev = dev_with_thresholds(f, m);
        let r = diagnosis::check_threshold_bias(&dev, &Thresholds::default()).unwrap();
        assert_eq!(r.status, Status::Confirmed);
        assert!((r.statistics["gap"] - gap).abs() < 1e-9);
    }
    let r = diagnosis::check_threshold_bias(&dev_with_thresholds(1.0, 1.0), &Thresholds::default()).unwrap();
    assert_eq!(r.status, Status::RuledOut);
}

#[test]
fn objective_bias_from_shared_threshold() {
    // F: 3 of 60 bonafide rejected (0.05), M: 0 of 60.
    let mut ts = cells([60, 10, 60, 10], Split::Eval);
    for t in ts.iter_mut().filter(|t| t.gender == Gender::F && t.label == Label::Bonafide).take(3) {
        t.score = -1.0;
    }
    let r = diagnosis::check_objective_bias(&ts, 0.0, &Thresholds::default()).unwrap();
    assert!((r.statistics["d_fpr"] - 0.05).abs() < 1e-12);
    assert_eq!(r.status, Status::Confirmed);
    let sym = cells([60, 10, 60, 10], Split::Eval);
    let r = diagnosis::check_objective_bias(&sym, 0.0, &Thresholds::default()).unwrap();
    assert_eq!(r.status, Status::RuledOut);
}

fn records_with_gender_dim(seed: u64, n: usize, separation: f64, dim: usize) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let g = if i % 2 == 0 { Gender::F } else { Gender::M };
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            v[0] += if g == Gender::F { separation / 2.0 } else { -separation / 2.0 };
            EmbeddingRecord {
                utt_id: format!("r{i}"),
                vector: v,
                gender: g,
                label: if i % 4 < 2 { Label::Bonafide } else { Label::Spoof },
            }
        })
        .collect()
}

#[test]
fn probe_finds_a_separable_gender_dimension() {
    // F at +1, M at -1 on dim 0 with unit noise: margin 2σ.
    let records = records_with_gender_dim(1, 2000, 2.0, 8);
    let mut rs = records.clone();
    for r in rs.iter_mut() {
        r.vector[0] = r.vector[0] / 10.0 + if r.gender == Gender::F { 1.0 } else { -1.0 };
    }
    let probe = diagnosis::train_probe(&rs, 0, 0.7, &ProbeConfig::default()).unwrap();
    assert!(probe.test_accuracy >= 0.9, "{}", probe.test_accuracy);
}

#[test]
fn probe_is_at_chance_without_gender_signal() {
    for seed in 0..5 {
        // 800 test points at a 0.7 split.
        let records = records_with_gender_dim(seed, 2667, 0.0, 8);
        let probe = diagnosis::train_probe(&records, seed, 0.7, &ProbeConfig::default()).unwrap();
        assert!((0.45..=0.55).contains(&probe.test_accuracy), "seed {seed}: {}", probe.test_accuracy);
    }
}

#[test]
fn probe_is_reproducible_for_a_seed() {
    let records = records_with_gender_dim(3, 400, 1.0, 4);
    let a = diagnosis::train_probe(&records, 11, 0.7, &ProbeConfig::default()).unwrap();
    let b = diagnosis::train_probe(&records, 11, 0.7, &ProbeConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = diagnosis::train_probe(&records, 12, 0.7, &ProbeConfig::default()).unwrap();
    assert_ne!(a.test_accuracy.to_bits() ^ a.weights[0].to_bits(), c.test_accuracy.to_bits() ^ c.weights[0].to_bits());
}

fn isotropic(n: usize, dim: usize) -> Vec<EmbeddingRecord> {
    records_with_gender_dim(7, n, 0.0, dim)
}

#[test]
fn dominant_weight_is_localised() {
    let dim = 10;
    let mut weights = vec![0.1; dim];
    weights[0] = 5.0;
    let probe = ProbeModel {
        weights,
        bias: 0.0,
        train_accuracy: 0.5,
        test_accuracy: 0.5,
        loss_history: Vec::new(),
    };
    let a = diagnosis::attribution_localisation(&probe, &isotropic(4000, dim), &Thresholds::default()).unwrap();
    assert_eq!(a.ranked[0].0, 0);
    assert_eq!(a.localisation, Localisation::Localised);
}

#[test]
fn uniform_weights_are_diffuse() {
    for dim in [8, 16, 32] {
        let probe = ProbeModel {
            weights: vec![1.0; dim],
            bias: 0.0,
            train_accuracy: 0.5,
            test_accuracy: 0.5,
            loss_history: Vec::new(),
        };
        let a = diagnosis::attribution_localisation(&probe, &isotropic(4000, dim), &Thresholds::default()).unwrap();
        assert!((a.top_k_share - 3.0 / dim as f64).abs() < 0.03, "{dim}: {}", a.top_k_share);
        assert_eq!(a.localisation, Localisation::Diffuse);
    }
}

#[test]
fn localisation_status_follows_leakage() {
    let th = Thresholds::default();
    let attr = |l| diagnosis::Attribution {
        ranked: vec![(0, 1.0), (1, 0.5), (2, 0.25)],
        localisation: l,
        top_k_share: 1.0,
    };
    let cases = [
        (Status::Confirmed, Localisation::Localised, Status::Confirmed),
        (Status::Confirmed, Localisation::Diffuse, Status::Weak),
        (Status::Weak, Localisation::Localised, Status::Weak),
        (Status::Weak, Localisation::Diffuse, Status::RuledOut),
        (Status::RuledOut, Localisation::Localised, Status::RuledOut),
    ];
    for (leak, loc, want) in cases {
        assert_eq!(diagnosis::check_localisation(leak, &attr(loc), &th).status, want, "{leak:?} {loc:?}");
    }
}

fn diagnose(name: &str, seed: u64) -> diagnosis::DiagnosisReport {
    let (ds, _) = synth::generate(&synth::preset(name, seed).unwrap()).unwrap();
    diagnosis::diagnose_all(
        &ds,
        &DiagnosisConfig {
            seed,
            ..DiagnosisConfig::default()
        },
    )
}

#[test]
fn threshold_biased_scenario_recommends_tc() {
    let r = diagnose("threshold-biased", 0);
    assert_eq!(
        r.confirmed(),
        [CheckId::SingleThresholdBias, CheckId::TrainingObjectiveBias].into()
    );
    assert!(r.recommended().contains(&Mitigation::Tc));
}

#[test]
fn localised_leak_scenario_recommends_embedding_fixes() {
    let r = diagnose("localised-leak", 0);
    assert_eq!(r.check(CheckId::GenderLeakage).status, Status::Confirmed);
    assert_eq!(r.check(CheckId::LeakageLocalisation).status, Status::Confirmed);
    let rec = r.recommended();
    for m in [Mitigation::S3, Mitigation::Sgfs, Mitigation::Gnea] {
        assert!(rec.contains(&m));
    }
}

#[test]
fn diffuse_leak_scenario_warns_against_adversarial_debiasing() {
    let r = diagnose("diffuse-leak", 0);
    assert_eq!(r.check(CheckId::GenderLeakage).status, Status::Confirmed);
    assert_eq!(r.check(CheckId::LeakageLocalisation).status, Status::Weak);
    assert!(!r.recommended().contains(&Mitigation::S3));
    assert!(r.warnings.iter().any(|w| w.contains("adversarial debiasing")));
}

#[test]
fn clean_scenario_confirms_nothing() {
    for seed in 0..5 {
        let r = diagnose("balanced-clean", seed);
        assert!(r.confirmed().is_empty(), "seed {seed}: {:?}", r.confirmed());
        assert!(r.recommendations.is_empty());
    }
}

#[test]
fn generated_threshold_shift_is_recovered() {
    let mut cfg = synth::preset("threshold-biased", 0).unwrap();
    cfg.n_per_cell = 4000;
    let (ds, _) = synth::generate(&cfg).unwrap();
    let pair = postproc::calibrate_thresholds(&ds.trials).unwrap();
    assert!((pair.theta_f - pair.theta_m - 0.5).abs() <= 0.1, "{pair:?}");
    assert_eq!(pair.source_split, Split::Dev);

    let (clean, _) = synth::generate(&synth::preset("balanced-clean", 0).unwrap()).unwrap();
    let pair = postproc::calibrate_thresholds(&clean.trials).unwrap();
    assert_eq!(pair.theta_f, pair.theta_m);
}

#[test]
fn calibrated_thresholds_balance_errors_on_dev() {
    let (ds, _) = synth::generate(&synth::preset("threshold-biased", 1).unwrap()).unwrap();
    let dev = ds.split(Split::Dev);
    let pair = postproc::calibrate_thresholds(&dev).unwrap();
    let preds = postproc::apply_tc(&dev, &pair);
    for g in Gender::ALL {
        let (mut fa, mut fr, mut nb, mut ns) = (0.0, 0.0, 0.0, 0.0);
        for (t, &p) in dev.iter().zip(&preds).filter(|(t, _)| t.gender == g) {
            match t.label {
                Label::Bonafide => {
                    nb += 1.0;
                    fr += p as u8 as f64;
                }
                Label::Spoof => {
                    ns += 1.0;
                    fa += (!p) as u8 as f64;
                }
            }
        }
        assert!((fa / ns - fr / nb).abs() <= 1.0 / nb.min(ns) + 1e-12, "{g:?}");
    }
}

#[test]
fn equal_thresholds_reduce_to_single_threshold() {
    let (ds, _) = synth::generate(&synth::preset("balanced-clean", 2).unwrap()).unwrap();
    let pair = postproc::ThresholdPair {
        theta_f: 0.3,
        theta_m: 0.3,
        source_split: Split::Dev,
    };
    let preds = postproc::apply_tc(&ds.trials, &pair);
    assert!(ds.trials.iter().zip(preds).all(|(t, p)| p == metrics::predicts_spoof(t.score, 0.3)));
}

#[test]
fn tc_roughly_halves_fpr_gap_on_threshold_bias() {
    let mut cfg = synth::preset("threshold-biased", 3).unwrap();
    cfg.n_per_cell = 4000;
    let (ds, _) = synth::generate(&cfg).unwrap();
    let pc = PipelineConfig::default();
    let base = postproc::run_pipeline(&ds, &StrategySpec::BASELINE, &pc).unwrap();
    let tc = postproc::run_pipeline(&ds, &"tc".parse().unwrap(), &pc).unwrap();
    assert!(tc.d_fpr.abs() <= 0.5 * base.d_fpr.abs());
}

#[test]
fn sgfs_with_tc_does_not_widen_the_gap() {
    for seed in 0..3 {
        let (ds, _) = synth::generate(&synth::preset("localised-leak", seed).unwrap()).unwrap();
        let pc = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        let run = |s: &str| postproc::run_pipeline(&ds, &s.parse().unwrap(), &pc).unwrap().d_fpr.abs();
        let both = run("sgfs+tc");
        assert!(both <= run("sgfs") + 1e-12, "seed {seed}");
        assert!(both <= run("baseline") + 1e-12, "seed {seed}");
    }
}

#[test]
fn gnea_with_zero_dims_equals_baseline() {
    let (ds, _) = synth::generate(&synth::preset("localised-leak", 0).unwrap()).unwrap();
    let pc = PipelineConfig {
        k: 0,
        ..PipelineConfig::default()
    };
    let gnea = postproc::run_pipeline(&ds, &"gnea".parse().unwrap(), &pc).unwrap();
    let base = postproc::run_pipeline(&ds, &StrategySpec::BASELINE, &pc).unwrap();
    assert_eq!(serde_json::to_string(&gnea).unwrap(), serde_json::to_string(&base).unwrap());
}

#[test]
fn edits_require_embeddings() {
    let ds = Dataset::from_trials(cells([3, 3, 3, 3], Split::Eval));
    let err = postproc::run_pipeline(&ds, &"sgfs".parse().unwrap(), &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, postproc::PostprocError::MissingEmbeddings));
    assert!("bogus".parse::<StrategySpec>().is_err());
}

#[test]
fn rescoring_identities() {
    let (ds, _) = synth::generate(&synth::preset("balanced-clean", 0).unwrap()).unwrap();
    let records = ds.embeddings.as_deref().unwrap();
    let head = ds.head.clone().unwrap();
    let zero = LinearHead {
        weights: vec![0.0; head.dim()],
        bias: 0.25,
    };
    assert!(postproc::rescore(&ds.trials, records, &zero).unwrap().iter().all(|t| t.score == 0.25));
    let none = postproc::build_suppression(&[], 0, SuppressionMode::Align, records, head.dim()).unwrap();
    let same = postproc::apply_suppression(records, &none).unwrap();
    assert_eq!(
        postproc::rescore(&ds.trials, &same, &head).unwrap(),
        postproc::rescore(&ds.trials, records, &head).unwrap()
    );
}

#[test]
fn generated_localised_leak_is_probe_visible() {
    let (ds, truth) = synth::generate(&synth::preset("localised-leak", 0).unwrap()).unwrap();
    let records = ds.embeddings.as_deref().unwrap();
    let probe = diagnosis::train_probe(records, 0, 0.7, &ProbeConfig::default()).unwrap();
    assert!(probe.test_accuracy >= 0.9, "{}", probe.test_accuracy);
    let a = diagnosis::attribution_localisation(&probe, records, &Thresholds::default()).unwrap();
    assert!(a.top_k_share >= 0.5);
    let mut top = a.top_dims(3);
    top.sort_unstable();
    assert_eq!(top, truth.leak_dims);
}

#[test]
fn generated_eval_ratios_are_recorded() {
    let (_, truth) = synth::generate(&synth::preset("eval-asymmetric", 0).unwrap()).unwrap();
    let r = truth.eval_ratios.unwrap();
    assert_eq!((r.female, r.male), (4.10, 3.71));
    let cfg = synth::preset("diffuse-leak", 0).unwrap();
    assert!(matches!(cfg.leak, LeakMode::Diffuse { .. }));
    assert!(synth::preset("no-such-preset", 0).is_err());
}

#[test]
fn plain_training_fits_separable_data() {
    let mut cfg = synth::preset("balanced-clean", 0).unwrap();
    cfg.n_per_cell = 200;
    cfg.embed_dim = 4;
    let (mut ds, _) = synth::generate(&cfg).unwrap();
    // Make dim 0 a clean label indicator.
    let labels: std::collections::HashMap<String, Label> =
        ds.trials.iter().map(|t| (t.utt_id.clone(), t.label)).collect();
    for r in ds.embeddings.as_mut().unwrap() {
        r.vector[0] = if labels[&r.utt_id] == Label::Bonafide { 2.0 } else { -2.0 } + 0.1 * r.vector[1];
    }
    let mut tc = TrainConfig::new(Objective::Plain);
    tc.epochs = 50;
    let out = trainer::train(&ds, &tc).unwrap();
    assert!(out.history.last().unwrap().train_accuracy >= 0.95);
    let exported = out.trials.iter().filter(|t| t.split == Split::Eval);
    for t in exported {
        assert!(t.score.is_finite());
    }
}

#[test]
fn trainer_defaults_follow_the_strategy() {
    assert_eq!(TrainConfig::new(Objective::Eafr).lambda_fair, 0.5);
    assert_eq!(TrainConfig::new(Objective::S2).lambda_fair, 0.1);
    assert_eq!(TrainConfig::new(Objective::S3).lambda_adv, 0.05);
    assert_eq!(TrainConfig::new(Objective::Plain).batch_size, 24);
    assert!("sideways".parse::<Objective>().is_err());
}

#[test]
fn fairness_gradient_check_refuses_tie_points() {
    let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.3, 1.0]).collect();
    let mut xs = x.clone();
    xs.extend(x);
    let batch = Batch {
        x: xs,
        labels: [Label::Bonafide, Label::Bonafide, Label::Spoof, Label::Spoof].repeat(2),
        genders: [vec![Gender::F; 4], vec![Gender::M; 4]].concat(),
        weights: None,
    };
    let model = MlpModel::init(2, &[4], false, &mut ChaCha8Rng::seed_from_u64(0));
    let err = trainer::gradient_check(&model, &batch, &TrainConfig::new(Objective::S2)).unwrap_err();
    assert!(matches!(err, TrainError::TiePoint));
}

#[test]
fn s2_skips_batches_missing_a_cell() {
    let mut cfg = synth::preset("balanced-clean", 0).unwrap();
    cfg.n_per_cell = 30;
    cfg.embed_dim = 4;
    let (ds, _) = synth::generate(&cfg).unwrap();
    let mut tc = TrainConfig::new(Objective::S2);
    tc.epochs = 2;
    tc.batch_size = 2;
    let out = trainer::train(&ds, &tc).unwrap();
    assert!(out.history.iter().all(|h| h.skipped_penalty_batches > 0));
}

#[test]
fn report_table_uses_fixed_columns() {
    let (ds, _) = synth::generate(&synth::preset("threshold-biased", 0).unwrap()).unwrap();
    let eval = ds.split(Split::Eval);
    let r = metrics::fairness_report(&eval, 0.0, 0.0, EopMode::FalsePositiveRate).unwrap();
    let md = fairgate::report::evaluation_markdown(&[("baseline".into(), r)]);
    let header = md.lines().nth(2).unwrap();
    assert_eq!(header, "| Strategy | EER F% | EER M% | EER Gap | d_FPR | SPD | EOP | PPD | TED |");
    let svg = fairgate::report::histogram_svg(&ds.trials, 40).unwrap();
    assert_eq!(svg, fairgate::report::histogram_svg(&ds.trials, 40).unwrap());
}
