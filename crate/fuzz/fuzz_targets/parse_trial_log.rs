#![no_main]
use libfuzzer_sys::fuzz_target;
use rollout_grid::opt::{parse_trial_log, Study};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trials) = parse_trial_log(text) {
            let _ = Study::replay(trials);
        }
    }
});
