//! Run-configuration JSON parsing and validation on arbitrary input.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = omnilight::config::RunConfig::from_json(s);
    }
});
