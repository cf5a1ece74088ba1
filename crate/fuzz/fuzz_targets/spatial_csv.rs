#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let n_sites = usize::from(n % 64) + 1;
    if let Ok((names, w)) = lsfm::io::parse_spatial_csv(rest, n_sites) {
        assert_eq!(w.nrows(), n_sites);
        assert_eq!(w.ncols(), names.len());
        assert!(w.iter().all(|v| v.is_finite()));
    }
});
