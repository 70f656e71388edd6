#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = fairgate::data::parse_trials_str(text) {
            let again = fairgate::data::write_trials_string(&ds.trials);
            assert!(fairgate::data::parse_trials_str(&again).is_ok());
        }
    }
});
