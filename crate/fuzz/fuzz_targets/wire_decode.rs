#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| rkesim_core::fuzz_checks::wire_decode(data));
