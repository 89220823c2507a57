#![no_main]

use libfuzzer_sys::fuzz_target;
use vra_core::eval::config::untrusted;

fuzz_target!(|data: &[u8]| {
    // Every config schema shares the same JSON entry point; run each
    // validator over the same bytes.
    let _ = untrusted::parse_gen_data(data);
    let _ = untrusted::parse_train_job(data);
    let _ = untrusted::parse_attack_job(data);
    let _ = untrusted::parse_sweep(data);
    let _ = untrusted::parse_overlap_exp(data);
});
