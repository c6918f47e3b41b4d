//! PNG ingestion path: arbitrary bytes through the image loader must come
//! back as a structured error, never a panic.
#![no_main]

use std::io::Write;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut f = tempfile::Builder::new().suffix(".png").tempfile().unwrap();
    f.write_all(data).unwrap();
    let _ = omnilight::imageio::load_png(f.path());
});
