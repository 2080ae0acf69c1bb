#![no_main]
use libfuzzer_sys::fuzz_target;
use rollout_grid::exec::wire::Reply;

fuzz_target!(|data: &[u8]| {
    if let Ok(reply) = Reply::decode(data) {
        let bytes = reply.encode().unwrap();
        let again = Reply::decode(&bytes).unwrap();
        assert_eq!(again.encode().unwrap(), bytes);
    }
});
