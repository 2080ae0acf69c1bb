#![no_main]
use libfuzzer_sys::fuzz_target;
use rollout_grid::exec::wire::Request;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = Request::decode(data) {
        // re-encoding is a fixed point even when the input was not canonical
        let bytes = req.encode().unwrap();
        let again = Request::decode(&bytes).unwrap();
        assert_eq!(again.encode().unwrap(), bytes);
    }
});
