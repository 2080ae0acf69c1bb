#![no_main]
use libfuzzer_sys::fuzz_target;
use rollout_grid_bench::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mut cfg) = parse_config(text) {
            let _ = cfg.normalize();
        }
    }
});
