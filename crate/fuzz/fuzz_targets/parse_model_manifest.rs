#![no_main]

use libfuzzer_sys::fuzz_target;
use promptta::persist::parse_model_manifest;

fuzz_target!(|data: &[u8]| {
    let _ = parse_model_manifest(data);
});
