//! Replays the checked-in fuzz seeds through the parsers.

use fairgate::data;
use fairgate::postproc::StrategySpec;
use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn trial_seeds_parse_or_fail_cleanly() {
    let mut ok = 0;
    for (path, text) in seeds("trials_tsv") {
        if let Ok(ds) = data::parse_trials_str(&text) {
            ok += 1;
            let again = data::parse_trials_str(&data::write_trials_string(&ds.trials)).unwrap();
            assert_eq!(again.trials.len(), ds.trials.len(), "{}", path.display());
        }
    }
    assert!(ok >= 1);
}

#[test]
fn embedding_and_head_seeds_parse_or_fail_cleanly() {
    let trials = "utt_id\tscore\tlabel\tgender\tattack\tsplit\n\
                  u1\t1.5\tbonafide\tF\t-\ttrain\n\
                  u2\t-0.5\tspoof\tM\tA01\tdev\n\
                  u3\t0.25\tbonafide\tM\t-\teval\n";
    let results: Vec<bool> = seeds("embeddings_csv")
        .iter()
        .map(|(_, text)| data::parse_embeddings_str(text, data::parse_trials_str(trials).unwrap()).is_ok())
        .collect();
    assert!(results.contains(&true) && results.contains(&false));
    let results: Vec<bool> = seeds("head_csv").iter().map(|(_, t)| data::parse_head_str(t).is_ok()).collect();
    assert!(results.contains(&true) && results.contains(&false));
}

#[test]
fn strategy_seeds_round_trip() {
    for (path, text) in seeds("strategy_spec") {
        if let Ok(spec) = text.parse::<StrategySpec>() {
            assert_eq!(spec.to_string().parse::<StrategySpec>().unwrap(), spec, "{}", path.display());
        }
    }
}
