use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lsfm::sampler::read_summaries_csv;
use lsfm::simstudy::MetricsTable;

fn lsfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsfm")).args(args).output().expect("binary runs")
}

fn arg(key: &str, path: &Path) -> String {
    format!("{key}={}", path.display())
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate".to_string(), "-q".into(), arg("out", dir)];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(lsfm(&refs));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, &["design=5", "seed=12"]);
    simulate(&b, &["design=5", "seed=12"]);
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["meta.txt", "patients.csv", "responses.csv", "site_status.csv", "truth.csv", "manifest.txt"] {
        assert!(names.contains(&want), "missing {want}");
    }
    // Manifests record their own output directory; everything else matches.
    let strip = |files: &[(String, Vec<u8>)]| -> Vec<(String, String)> {
        files
            .iter()
            .map(|(n, b)| {
                let text = String::from_utf8_lossy(b);
                let kept: Vec<&str> = if n == "manifest.txt" {
                    text.lines().filter(|l| !l.starts_with("out=") && !l.starts_with("# config-sha256")).collect()
                } else {
                    text.lines().collect()
                };
                (n.clone(), kept.join("\n"))
            })
            .collect()
    };
    assert_eq!(strip(&fa), strip(&fb));
    assert_eq!(
        fa.iter().filter(|(n, _)| n != "manifest.txt").collect::<Vec<_>>(),
        fb.iter().filter(|(n, _)| n != "manifest.txt").collect::<Vec<_>>()
    );
    let c = tmp.path().join("c");
    simulate(&c, &["design=5", "seed=13"]);
    assert_ne!(fs::read(a.join("responses.csv")).unwrap(), fs::read(c.join("responses.csv")).unwrap());
}

#[test]
fn mean_regression_detects_the_largest_effect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    simulate(&data, &["design=1", "seed=3"]);
    ok(lsfm(&["fit", "-q", &arg("data", &data), &arg("out", &fit), "model.variant=1", "mcmc.n_iter=2000", "mcmc.burn_in=500"]));
    let summaries = read_summaries_csv(fs::File::open(fit.join("summary.csv")).unwrap()).unwrap();
    let b6 = summaries.iter().find(|s| s.name == "beta[x6]").unwrap();
    assert!(b6.excludes_zero(), "{b6:?}");
    assert!(fit.join("draws.csv").exists());
    assert!(!fit.join("mu.csv").exists());
}

#[test]
fn manifest_reproduces_a_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &["design=2", "seed=4", "design.n_patients=10"]);
    let first = tmp.path().join("first");
    ok(lsfm(&[
        "fit",
        "-q",
        &arg("data", &data),
        &arg("out", &first),
        "model.variant=2",
        "mcmc.n_iter=300",
        "mcmc.burn_in=100",
        "seed=8",
    ]));
    let second = tmp.path().join("second");
    let manifest = first.join("manifest.txt");
    ok(lsfm(&["fit", "-q", "--config", manifest.to_str().unwrap(), &arg("out", &second)]));
    for f in ["summary.csv", "draws.csv", "deviance.csv", "mu.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.lines().any(|l| l.starts_with("# config-sha256 ")));
    assert!(text.lines().any(|l| l == "mcmc.n_iter=300"));

    let diag = tmp.path().join("diag");
    ok(lsfm(&["diagnose", "-q", &arg("fit", &first), &arg("out", &diag)]));
    let influence = fs::read_to_string(diag.join("influence.csv")).unwrap();
    assert_eq!(influence.lines().count(), 11);
    let dic = fs::read_to_string(diag.join("dic.txt")).unwrap();
    assert!(dic.starts_with("dic="));
    assert_eq!(fs::read_to_string(diag.join("site_weights.csv")).unwrap().lines().count(), 1 + 10 * 42);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    for args in [
        vec!["simulate".to_string(), arg("out", &out), "colour=blue".into()],
        vec!["simulate".to_string(), arg("out", &out), "design=9".into()],
        vec!["simulate".to_string(), "design=1".into()],
        vec!["fit".to_string(), arg("out", &out), "data=d".into(), "mcmc.burn_in=50000".into()],
        vec!["fit".to_string(), arg("out", &out), "data=d".into(), "preset=ref9-uv1-w1-grid1".into()],
    ] {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let res = lsfm(&refs);
        assert_eq!(res.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    assert!(!out.exists());
    let res = lsfm(&["fit", &arg("out", &out), &arg("data", &tmp.path().join("nowhere"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_code_3_and_name_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &["design=4", "seed=6", "design.granularity=tooth", "design.n_patients=8"]);
    let status = fs::read_to_string(data.join("teeth.csv")).unwrap();
    let absent = status.lines().skip(1).find(|l| l.ends_with(",0")).expect("some tooth is missing");
    let mut parts = absent.split(',');
    let (pid, tooth) = (parts.next().unwrap(), parts.next().unwrap());
    let mut responses = fs::read_to_string(data.join("responses.csv")).unwrap();
    responses.push_str(&format!("{pid},{tooth},2,y,1.0\n"));
    let row = responses.lines().count();
    fs::write(data.join("responses.csv"), &responses).unwrap();
    let res = lsfm(&["fit", &arg("data", &data), &arg("out", &tmp.path().join("fit"))]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains(&format!("row {row}")), "{err}");

    // A present tooth with one site removed breaks all-or-nothing observation.
    let mut lines: Vec<&str> = responses.lines().collect();
    lines.pop();
    lines.remove(1);
    fs::write(data.join("responses.csv"), lines.join("\n") + "\n").unwrap();
    let res = lsfm(&["fit", &arg("data", &data), &arg("out", &tmp.path().join("fit"))]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("present unit"));
}

#[test]
fn small_study_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("study");
    ok(lsfm(&[
        "sim-study",
        "-q",
        &arg("out", &out),
        "study.designs=1",
        "study.models=1,2",
        "study.replicates=2",
        "mcmc.n_iter=200",
        "mcmc.burn_in=50",
        "--threads",
        "2",
    ]));
    let table = MetricsTable::read_csv(fs::File::open(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.replicates == 2));
    assert!(fs::read_to_string(out.join("metrics.txt")).unwrap().contains("design"));
}

#[test]
fn config_fuzz_seeds_resolve_and_round_trip() {
    use lsfm_cli::{Command, RunConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/cli_config");
    for (name, bytes) in read_dir_sorted(&dir) {
        let text = String::from_utf8(bytes).unwrap();
        let command = match name.as_str() {
            "study" => Command::SimStudy,
            _ => Command::Fit,
        };
        let cfg = RunConfig::resolve(command, Some(&text), &[("out".into(), "o".into())])
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::resolve(command, Some(&cfg.manifest(&[])), &[]).unwrap(), cfg);
    }
}
