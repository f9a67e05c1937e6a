#![no_main]

use kinloop_harness::trajfile::{parse_trajectory, write_trajectory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = parse_trajectory(text) {
            let again = parse_trajectory(&write_trajectory(&file)).expect("written file parses");
            assert_eq!(again, file);
        }
    }
});
