#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = lsfm::simstudy::MetricsTable::read_csv(data) {
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let _ = table.to_text();
    }
});
