#![no_main]

use libfuzzer_sys::fuzz_target;
use promptta::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = RunConfig::from_json(data) {
        let again = RunConfig::from_json(config.to_json().as_bytes()).expect("valid config re-parses");
        assert_eq!(again, config);
    }
});
