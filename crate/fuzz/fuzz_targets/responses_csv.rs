#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = lsfm::io::parse_responses_csv(data) {
        assert!(records.iter().all(|r| r.site < 6 && r.value.is_finite()));
    }
});
