#![no_main]

use libfuzzer_sys::fuzz_target;

use lsfm::io::{dataset_files, parse_dataset, DatasetFiles};

// Sections separated by NUL bytes: meta, patients, responses, status and
// optionally spatial and edges.
fuzz_target!(|data: &[u8]| {
    let parts: Vec<&[u8]> = data.split(|&b| b == 0).collect();
    if parts.len() < 4 {
        return;
    }
    let Ok(meta) = std::str::from_utf8(parts[0]) else { return };
    let files = DatasetFiles {
        meta: meta.to_string(),
        patients: parts[1].to_vec(),
        responses: parts[2].to_vec(),
        status: parts[3].to_vec(),
        spatial: parts.get(4).map(|p| p.to_vec()),
        edges: parts.get(5).map(|p| p.to_vec()),
    };
    if let Ok(dataset) = parse_dataset(&files) {
        let written = dataset_files(&dataset).unwrap();
        parse_dataset(&written).unwrap();
    }
});
