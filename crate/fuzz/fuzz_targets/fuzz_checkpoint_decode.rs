//! Checkpoint container decoding must reject arbitrary bytes gracefully:
//! no panics, no allocation blowups, only structured errors.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = omnilight::checkpoint::decode(data);
});
