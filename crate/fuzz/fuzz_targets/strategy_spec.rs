#![no_main]

use fairgate::postproc::StrategySpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = text.parse::<StrategySpec>() {
            assert_eq!(spec.to_string().parse::<StrategySpec>().ok(), Some(spec));
        }
    }
});
