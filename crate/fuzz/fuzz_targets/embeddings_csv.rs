#![no_main]

use libfuzzer_sys::fuzz_target;

const TRIALS: &str = "utt_id\tscore\tlabel\tgender\tattack\tsplit\n\
u1\t1.5\tbonafide\tF\t-\ttrain\n\
u2\t-0.5\tspoof\tM\tA01\tdev\n\
u3\t0.25\tbonafide\tM\t-\teval\n";

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let ds = fairgate::data::parse_trials_str(TRIALS).unwrap();
        let _ = fairgate::data::parse_embeddings_str(text, ds);
    }
});
