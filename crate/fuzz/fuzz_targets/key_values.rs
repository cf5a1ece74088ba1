#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pairs) = lsfm::io::parse_key_values(text) {
            let again: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
            assert_eq!(lsfm::io::parse_key_values(&again).unwrap(), pairs);
        }
    }
});
