#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = lsfm::io::parse_status_csv(data, "tooth");
    let _ = lsfm::io::parse_status_csv(data, "site");
});
