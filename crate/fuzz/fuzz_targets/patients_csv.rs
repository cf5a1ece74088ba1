#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = lsfm::io::parse_patients_csv(data) {
        assert_eq!(table.ids.len(), table.rows.len());
        assert!(table.rows.iter().all(|r| r.len() == table.covariate_names.len()));
    }
});
