#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(summaries) = lsfm::sampler::read_summaries_csv(data) {
        let mut buf = Vec::new();
        lsfm::sampler::write_summaries_csv(&summaries, &mut buf).unwrap();
        let again = lsfm::sampler::read_summaries_csv(buf.as_slice()).unwrap();
        assert_eq!(again.len(), summaries.len());
    }
});
