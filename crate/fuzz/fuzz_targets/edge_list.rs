#![no_main]

use libfuzzer_sys::fuzz_target;

use lsfm::mouthgraph::{GridVariant, MouthGraph};

fuzz_target!(|data: &[u8]| {
    if let Ok(edges) = lsfm::mouthgraph::parse_edge_list(data) {
        if let Ok(graph) = MouthGraph::build(2, 1, GridVariant::Grid1).unwrap().with_edges(&edges) {
            let car = lsfm::carfield::CarStructure::new(&graph);
            let _ = car.log_det(0.5);
        }
    }
});
