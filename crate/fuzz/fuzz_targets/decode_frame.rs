#![no_main]
use libfuzzer_sys::fuzz_target;
use rollout_grid::exec::wire::{decode_frame, encode_frame};

fuzz_target!(|data: &[u8]| {
    if let Ok(((tag, payload), used)) = decode_frame(data) {
        assert!(used <= data.len());
        assert_eq!(encode_frame(tag, payload).unwrap(), &data[..used]);
    }
});
