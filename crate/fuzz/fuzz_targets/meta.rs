#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(meta) = lsfm::io::DatasetMeta::parse(text) {
            let _ = meta.response_spec();
            assert_eq!(lsfm::io::DatasetMeta::parse(&meta.to_text()).unwrap(), meta);
        }
    }
});
