#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = kinloop::ocp::TaskConfig::from_toml(text);
        let _ = kinloop_harness::experiment::ExperimentConfig::from_toml(text);
    }
});
