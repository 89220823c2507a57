#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Must never panic; parse errors are the expected outcome.
    let _ = vra_core::data::parse_manifest(data);
});
