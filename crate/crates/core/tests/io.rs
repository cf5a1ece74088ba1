use std::sync::Arc;

use lsfm::io::{
    dataset_files, parse_dataset, parse_key_values, parse_responses_csv, parse_spatial_csv, parse_status_csv,
    DatasetFiles, DatasetMeta,
};
use lsfm::model::{generate_dataset, DesignSpec, Granularity};
use lsfm::mouthgraph::{GridVariant, MouthGraph};
use lsfm::stochastic::RngStream;
use lsfm::Error;
use nalgebra::DMatrix;

fn simulated(granularity: Granularity, seed: u64) -> lsfm::model::Dataset {
    let design = DesignSpec {
        granularity,
        n_patients: 6,
        ..DesignSpec::standard(4).unwrap()
    };
    generate_dataset(&design, &mut RngStream::new(seed, 0)).unwrap().dataset
}

fn same(a: &lsfm::model::Dataset, b: &lsfm::model::Dataset) {
    assert_eq!(a.patient_ids(), b.patient_ids());
    assert_eq!(a.x(), b.x());
    assert_eq!(a.w(), b.w());
    assert_eq!(a.graph().edges(), b.graph().edges());
    assert_eq!(a.granularity(), b.granularity());
    for j in 0..a.n_responses() {
        for i in 0..a.n_patients() {
            let (ya, yb) = (a.y(j, i), b.y(j, i));
            assert!(ya.iter().zip(yb).all(|(u, v)| u == v || (u.is_nan() && v.is_nan())));
        }
    }
}

#[test]
fn datasets_round_trip_through_files() {
    for granularity in [Granularity::Site, Granularity::Tooth] {
        let data = simulated(granularity, 4);
        let files = dataset_files(&data).unwrap();
        let back = parse_dataset(&files).unwrap();
        same(&data, &back);
        let again = dataset_files(&back).unwrap();
        assert_eq!(files.meta, again.meta);
        assert_eq!(files.responses, again.responses);
        assert_eq!(files.status, again.status);
        assert_eq!(files.patients, again.patients);
    }
}

#[test]
fn imported_graphs_and_spatial_covariates_round_trip() {
    let data = simulated(Granularity::Site, 8);
    let graph = MouthGraph::build(7, 1, GridVariant::Grid1)
        .unwrap()
        .with_edges(&(0..41).map(|s| (s, s + 1)).collect::<Vec<_>>())
        .unwrap();
    let w = DMatrix::from_fn(42, 2, |s, k| (s as f64 / 7.0).sin() + k as f64);
    let mut parts = dataset_files(&data.with_graph(Arc::new(graph)).unwrap()).unwrap();
    assert!(parts.edges.is_some());
    let mut spatial = String::from("site,molar,jaw\n");
    for s in 0..42 {
        spatial.push_str(&format!("{s},{},{}\n", w[(s, 0)], w[(s, 1)]));
    }
    parts.spatial = Some(spatial.into_bytes());
    let back = parse_dataset(&parts).unwrap();
    assert_eq!(back.spatial_names(), ["molar", "jaw"]);
    assert_eq!(back.w(), &w);
    assert_eq!(back.graph().grid(), GridVariant::Imported);
    assert_eq!(back.graph().n_components(), 1);
    same(&back, &parse_dataset(&dataset_files(&back).unwrap()).unwrap());
}

fn row_of(err: Error) -> Option<usize> {
    match err {
        Error::Validation { row, .. } => row,
        other => panic!("expected a validation error, got {other}"),
    }
}

fn with_responses(files: &DatasetFiles, edit: impl FnOnce(&mut Vec<String>)) -> DatasetFiles {
    let mut lines: Vec<String> = String::from_utf8(files.responses.clone())
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    edit(&mut lines);
    DatasetFiles {
        responses: (lines.join("\n") + "\n").into_bytes(),
        ..files.clone()
    }
}

#[test]
fn response_errors_carry_row_numbers() {
    let files = dataset_files(&simulated(Granularity::Tooth, 2)).unwrap();

    let bad = with_responses(&files, |l| l[5] = l[5].rsplit_once(',').unwrap().0.to_string() + ",abc");
    assert_eq!(row_of(parse_dataset(&bad).unwrap_err()), Some(6));

    let bad = with_responses(&files, |l| {
        let dup = l[3].clone();
        l.insert(4, dup);
    });
    assert_eq!(row_of(parse_dataset(&bad).unwrap_err()), Some(5));

    let bad = with_responses(&files, |l| l[2] = l[2].replacen(&l[2][..l[2].find(',').unwrap()], "ghost", 1));
    assert_eq!(row_of(parse_dataset(&bad).unwrap_err()), Some(3));

    let bad = with_responses(&files, |l| l[0] = "patient,tooth,site,response_name,value".into());
    assert_eq!(row_of(parse_dataset(&bad).unwrap_err()), Some(1));
}

#[test]
fn teeth_are_all_or_nothing() {
    let data = simulated(Granularity::Tooth, 3);
    let files = dataset_files(&data).unwrap();
    // Dropping one site of a present tooth leaves it partially observed.
    let partial = with_responses(&files, |l| {
        l.remove(1);
    });
    let err = parse_dataset(&partial).unwrap_err();
    assert!(matches!(err, Error::Validation { .. }));
    assert!(err.to_string().contains("missing value on a present unit"), "{err}");

    // A value on a tooth marked absent names the offending row.
    let (i, t) = (0..data.n_patients())
        .flat_map(|i| (0..data.n_units()).map(move |t| (i, t)))
        .find(|&(i, t)| !data.unit_present(i, t))
        .expect("design 4 leaves some teeth missing");
    let pid = data.patient_ids()[i].clone();
    let extra = with_responses(&files, |l| l.push(format!("{pid},{t},0,y,1.5")));
    let rows = String::from_utf8(extra.responses.clone()).unwrap().lines().count();
    assert_eq!(row_of(parse_dataset(&extra).unwrap_err()), Some(rows));
}

#[test]
fn status_and_spatial_tables_are_checked() {
    let err = parse_status_csv("patient_id,tooth,present\np1,0,2\n".as_bytes(), "tooth").unwrap_err();
    assert_eq!(row_of(err), Some(2));
    let err = parse_status_csv("patient_id,site,present\n".as_bytes(), "tooth").unwrap_err();
    assert_eq!(row_of(err), Some(1));
    assert!(parse_spatial_csv("site,a\n0,1\n".as_bytes(), 2).is_err());
    assert!(parse_spatial_csv("site,a\n0,1\n0,2\n".as_bytes(), 2).is_err());
    let (names, w) = parse_spatial_csv("site,a\n1,3\n0,2\n".as_bytes(), 2).unwrap();
    assert_eq!(names, ["a"]);
    assert_eq!(w.column(0).as_slice(), [2.0, 3.0]);
    let err = parse_responses_csv("patient_id,tooth,site,response_name,value\np,0,6,y,1\n".as_bytes()).unwrap_err();
    assert_eq!(row_of(err), Some(2));
}

#[test]
fn key_values_and_meta() {
    let kv = parse_key_values("# c\n a = 1 \n\nb.c=x=y\n").unwrap();
    assert_eq!(kv, [("a".into(), "1".into()), ("b.c".into(), "x=y".into())]);
    assert!(parse_key_values("a=1\na=2\n").is_err());
    assert!(parse_key_values("novalue\n").is_err());
    assert!(parse_key_values("bad key=1\n").is_err());

    let meta = DatasetMeta::parse(
        "teeth_per_quadrant=7\nquadrants=4\ngrid=2\ngranularity=tooth\nresponses=cal,ppd:continuous,bop:binary\nreference=ppd\n",
    )
    .unwrap();
    assert_eq!(meta.responses.len(), 3);
    assert_eq!(meta.response_spec().unwrap().reference(), 1);
    assert_eq!(DatasetMeta::parse(&meta.to_text()).unwrap(), meta);
    assert!(DatasetMeta::parse("teeth_per_quadrant=7\n").is_err());
    assert!(DatasetMeta::parse(&(meta.to_text() + "colour=blue\n")).is_err());
}

#[test]
fn dataset_directories_round_trip() {
    let data = simulated(Granularity::Tooth, 9);
    let files = dataset_files(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, bytes) in files.entries(data.granularity()) {
        std::fs::write(dir.path().join(name), bytes).unwrap();
    }
    let read = DatasetFiles::read_dir(dir.path()).unwrap();
    same(&data, &parse_dataset(&read).unwrap());
    std::fs::remove_file(dir.path().join("teeth.csv")).unwrap();
    assert!(matches!(DatasetFiles::read_dir(dir.path()), Err(Error::Io(_))));
}
