//! Dataset files and the `key=value` text format.
//!
//! A dataset directory holds:
//!
//! * `meta.txt`: `teeth_per_quadrant`, `quadrants`, `grid` (`1`, `2`, `3` or
//!   `imported`), `granularity` (`tooth` or `site`), `responses`
//!   (`name:kind,...`) and `reference`.
//! * `patients.csv`: `patient_id,<covariate>...`
//! * `responses.csv`: `patient_id,tooth,site,response_name,value`, one row per
//!   observed value. `tooth` is the 0-based tooth index in jaw order and
//!   `site` the 0-based position within the tooth.
//! * `teeth.csv` (`patient_id,tooth,present`) for tooth granularity or
//!   `site_status.csv` (`patient_id,site,present`, global site index) for
//!   site granularity.
//! * optionally `spatial.csv` (`site,<covariate>...`) and, for imported
//!   graphs, `edges.csv` (`site_a,site_b`).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dataset, DatasetParts, Granularity, ResponseKind, ResponseSpec};
use crate::mouthgraph::{parse_edge_list, GridVariant, MouthGraph, SITES_PER_TOOTH};
use crate::sampler::fmt_f64;

/// Parse `key=value` lines in order. Blank lines and `#` comments are
/// skipped; a repeated key is an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key=value`, got `{line}`", k + 1)));
        };
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
            return Err(Error::Config(format!("line {}: invalid key `{key}`", k + 1)));
        }
        if out.iter().any(|(k2, _)| k2 == key) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", k + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Contents of `meta.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub teeth_per_quadrant: usize,
    pub quadrants: usize,
    pub grid: GridVariant,
    pub granularity: Granularity,
    pub responses: Vec<(String, ResponseKind)>,
    pub reference: String,
}

impl DatasetMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let kv: HashMap<String, String> = parse_key_values(text)?.into_iter().collect();
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::validation(None, format!("meta.txt: missing `{k}`")))
        };
        for k in kv.keys() {
            if !["teeth_per_quadrant", "quadrants", "grid", "granularity", "responses", "reference"]
                .contains(&k.as_str())
            {
                return Err(Error::validation(None, format!("meta.txt: unknown key `{k}`")));
            }
        }
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::validation(None, format!("meta.txt: `{k}` must be a positive integer")))
        };
        let grid = match get("grid")? {
            "imported" => GridVariant::Imported,
            g => g.parse().map_err(|e: Error| Error::validation(None, format!("meta.txt: {e}")))?,
        };
        let mut responses = Vec::new();
        for item in get("responses")?.split(',') {
            let (name, kind) = item.split_once(':').unwrap_or((item, "continuous"));
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::validation(None, "meta.txt: empty response name"));
            }
            let kind = ResponseKind::parse(kind).map_err(|e| Error::validation(None, format!("meta.txt: {e}")))?;
            responses.push((name.to_string(), kind));
        }
        let reference = match kv.get("reference") {
            Some(r) => r.clone(),
            None => responses[0].0.clone(),
        };
        Ok(DatasetMeta {
            teeth_per_quadrant: int("teeth_per_quadrant")?,
            quadrants: int("quadrants")?,
            grid,
            granularity: Granularity::parse(get("granularity")?)
                .map_err(|e| Error::validation(None, format!("meta.txt: {e}")))?,
            responses,
            reference,
        })
    }

    pub fn to_text(&self) -> String {
        let responses: Vec<String> = self
            .responses
            .iter()
            .map(|(n, k)| format!("{n}:{}", k.as_str()))
            .collect();
        let grid = match self.grid {
            GridVariant::Imported => "imported".to_string(),
            g => g.to_string(),
        };
        format!(
            "teeth_per_quadrant={}\nquadrants={}\ngrid={grid}\ngranularity={}\nresponses={}\nreference={}\n",
            self.teeth_per_quadrant,
            self.quadrants,
            self.granularity.as_str(),
            responses.join(","),
            self.reference
        )
    }

    pub fn response_spec(&self) -> Result<ResponseSpec> {
        let reference = self
            .responses
            .iter()
            .position(|(n, _)| *n == self.reference)
            .ok_or_else(|| Error::validation(None, format!("reference response `{}` is not listed", self.reference)))?;
        ResponseSpec::new(
            self.responses.iter().map(|(n, _)| n.clone()).collect(),
            self.responses.iter().map(|(_, k)| *k).collect(),
            reference,
        )
        .map_err(|e| Error::validation(None, e.to_string()))
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

fn check_header(headers: &csv::StringRecord, want: &[&str], file: &str) -> Result<()> {
    if headers.iter().ne(want.iter().copied()) {
        return Err(Error::validation(
            Some(1),
            format!("{file}: header must be `{}`", want.join(",")),
        ));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(v: Option<&str>, row: usize, what: &str) -> Result<T> {
    v.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation(Some(row), format!("`{what}` is not a valid value")))
}

fn parse_finite(v: Option<&str>, row: usize, what: &str) -> Result<f64> {
    let x: f64 = parse_num(v, row, what)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::validation(Some(row), format!("`{what}` must be finite")))
    }
}

/// Patient covariate table.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTable {
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_patients_csv<R: Read>(input: R) -> Result<PatientTable> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("patient_id") {
        return Err(Error::validation(Some(1), "patients.csv: first column must be `patient_id`"));
    }
    let covariate_names: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::validation(Some(row), e.to_string()))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::validation(Some(row), "empty patient_id"));
        }
        if seen.insert(id.clone(), row).is_some() {
            return Err(Error::validation(Some(row), format!("duplicate patient `{id}`")));
        }
        let vals = (1..headers.len())
            .map(|c| parse_finite(rec.get(c), row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        rows.push(vals);
    }
    Ok(PatientTable {
        ids,
        covariate_names,
        rows,
    })
}

/// Site-level covariates: names and an `S × q` matrix.
pub fn parse_spatial_csv<R: Read>(input: R, n_sites: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("site") {
        return Err(Error::validation(Some(1), "spatial.csv: first column must be `site`"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut w = DMatrix::from_element(n_sites, names.len(), f64::NAN);
    let mut seen = vec![false; n_sites];
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::validation(Some(row), e.to_string()))?;
        let s: usize = parse_num(rec.get(0), row, "site")?;
        if s >= n_sites {
            return Err(Error::validation(Some(row), format!("site {s} outside 0..{n_sites}")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::validation(Some(row), format!("duplicate site {s}")));
        }
        for c in 1..headers.len() {
            w[(s, c - 1)] = parse_finite(rec.get(c), row, &headers[c])?;
        }
    }
    if let Some(s) = seen.iter().position(|x| !x) {
        return Err(Error::validation(None, format!("spatial.csv: no row for site {s}")));
    }
    Ok((names, w))
}

/// One row of `responses.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub row: usize,
    pub patient_id: String,
    pub tooth: usize,
    pub site: usize,
    pub response: String,
    pub value: f64,
}

pub fn parse_responses_csv<R: Read>(input: R) -> Result<Vec<ResponseRecord>> {
    let mut rdr = reader(input);
    check_header(
        rdr.headers()?,
        &["patient_id", "tooth", "site", "response_name", "value"],
        "responses.csv",
    )?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::validation(Some(row), e.to_string()))?;
        let site: usize = parse_num(rec.get(2), row, "site")?;
        if site >= SITES_PER_TOOTH {
            return Err(Error::validation(Some(row), format!("site {site} outside 0..{SITES_PER_TOOTH}")));
        }
        out.push(ResponseRecord {
            row,
            patient_id: rec.get(0).unwrap_or_default().to_string(),
            tooth: parse_num(rec.get(1), row, "tooth")?,
            site,
            response: rec.get(3).unwrap_or_default().to_string(),
            value: parse_finite(rec.get(4), row, "value")?,
        });
    }
    Ok(out)
}

/// One row of `teeth.csv` or `site_status.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatusRecord {
    pub row: usize,
    pub patient_id: String,
    pub unit: usize,
    pub present: bool,
}

/// Parse a status table whose unit column is `unit_column` (`tooth` or `site`).
pub fn parse_status_csv<R: Read>(input: R, unit_column: &str) -> Result<Vec<StatusRecord>> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &["patient_id", unit_column, "present"], "status file")?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::validation(Some(row), e.to_string()))?;
        let present = match rec.get(2) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(Error::validation(Some(row), "`present` must be 0 or 1")),
        };
        out.push(StatusRecord {
            row,
            patient_id: rec.get(0).unwrap_or_default().to_string(),
            unit: parse_num(rec.get(1), row, unit_column)?,
            present,
        });
    }
    Ok(out)
}

/// Raw file contents of a dataset directory.
#[derive(Debug, Clone, Default)]
pub struct DatasetFiles {
    pub meta: String,
    pub patients: Vec<u8>,
    pub responses: Vec<u8>,
    pub status: Vec<u8>,
    pub spatial: Option<Vec<u8>>,
    pub edges: Option<Vec<u8>>,
}

impl DatasetFiles {
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta = fs::read_to_string(dir.join("meta.txt"))?;
        let parsed = DatasetMeta::parse(&meta)?;
        let status_name = status_file(parsed.granularity);
        let optional = |name: &str| -> Result<Option<Vec<u8>>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(fs::read(p)?))
            } else {
                Ok(None)
            }
        };
        Ok(DatasetFiles {
            meta,
            patients: fs::read(dir.join("patients.csv"))?,
            responses: fs::read(dir.join("responses.csv"))?,
            status: fs::read(dir.join(status_name))?,
            spatial: optional("spatial.csv")?,
            edges: optional("edges.csv")?,
        })
    }

    /// `(file name, contents)` pairs in a fixed order.
    pub fn entries(&self, granularity: Granularity) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = vec![
            ("meta.txt", self.meta.clone().into_bytes()),
            ("patients.csv", self.patients.clone()),
            ("responses.csv", self.responses.clone()),
            (status_file(granularity), self.status.clone()),
        ];
        if let Some(s) = &self.spatial {
            out.push(("spatial.csv", s.clone()));
        }
        if let Some(e) = &self.edges {
            out.push(("edges.csv", e.clone()));
        }
        out
    }
}

pub fn status_file(granularity: Granularity) -> &'static str {
    match granularity {
        Granularity::Tooth => "teeth.csv",
        Granularity::Site => "site_status.csv",
    }
}

/// Assemble and validate a dataset from raw file contents.
pub fn parse_dataset(files: &DatasetFiles) -> Result<Dataset> {
    let meta = DatasetMeta::parse(&files.meta)?;
    let responses = meta.response_spec()?;
    let mut graph = MouthGraph::build(
        meta.teeth_per_quadrant,
        meta.quadrants,
        if meta.grid == GridVariant::Imported {
            GridVariant::Grid1
        } else {
            meta.grid
        },
    )
    .map_err(|e| Error::validation(None, format!("meta.txt: {e}")))?;
    if meta.grid == GridVariant::Imported {
        let Some(edges) = &files.edges else {
            return Err(Error::validation(None, "grid=imported needs edges.csv"));
        };
        graph = graph.with_edges(&parse_edge_list(edges.as_slice())?)?;
    }
    let s_count = graph.n_sites();
    let n_teeth = graph.n_teeth();

    let patients = parse_patients_csv(files.patients.as_slice())?;
    let n = patients.ids.len();
    let index: HashMap<&str, usize> = patients.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let x = DMatrix::from_fn(n, patients.covariate_names.len(), |r, c| patients.rows[r][c]);
    let (spatial_names, w) = match &files.spatial {
        Some(bytes) => parse_spatial_csv(bytes.as_slice(), s_count)?,
        None => (Vec::new(), DMatrix::zeros(s_count, 0)),
    };

    let (unit_column, n_units) = match meta.granularity {
        Granularity::Tooth => ("tooth", n_teeth),
        Granularity::Site => ("site", s_count),
    };
    let mut status: Vec<Option<bool>> = vec![None; n * n_units];
    for rec in parse_status_csv(files.status.as_slice(), unit_column)? {
        let i = *index
            .get(rec.patient_id.as_str())
            .ok_or_else(|| Error::validation(Some(rec.row), format!("unknown patient `{}`", rec.patient_id)))?;
        if rec.unit >= n_units {
            return Err(Error::validation(
                Some(rec.row),
                format!("{unit_column} {} outside 0..{n_units}", rec.unit),
            ));
        }
        if status[i * n_units + rec.unit].replace(rec.present).is_some() {
            return Err(Error::validation(
                Some(rec.row),
                format!("duplicate status for patient `{}` {unit_column} {}", rec.patient_id, rec.unit),
            ));
        }
    }
    if let Some(k) = status.iter().position(Option::is_none) {
        return Err(Error::validation(
            None,
            format!(
                "no status row for patient `{}` {unit_column} {}",
                patients.ids[k / n_units],
                k % n_units
            ),
        ));
    }
    let unit_present: Vec<bool> = status.into_iter().map(|v| v.unwrap_or(false)).collect();

    let resp_index: HashMap<&str, usize> = responses.names().iter().enumerate().map(|(j, r)| (r.as_str(), j)).collect();
    let mut y = vec![vec![f64::NAN; n * s_count]; responses.len()];
    for rec in parse_responses_csv(files.responses.as_slice())? {
        let i = *index
            .get(rec.patient_id.as_str())
            .ok_or_else(|| Error::validation(Some(rec.row), format!("unknown patient `{}`", rec.patient_id)))?;
        let j = *resp_index
            .get(rec.response.as_str())
            .ok_or_else(|| Error::validation(Some(rec.row), format!("unknown response `{}`", rec.response)))?;
        if rec.tooth >= n_teeth {
            return Err(Error::validation(Some(rec.row), format!("tooth {} outside 0..{n_teeth}", rec.tooth)));
        }
        let s = rec.tooth * SITES_PER_TOOTH + rec.site;
        let unit = match meta.granularity {
            Granularity::Tooth => rec.tooth,
            Granularity::Site => s,
        };
        if !unit_present[i * n_units + unit] {
            return Err(Error::validation(
                Some(rec.row),
                format!(
                    "value recorded for patient `{}` on absent {unit_column} {unit}",
                    rec.patient_id
                ),
            ));
        }
        let slot = &mut y[j][i * s_count + s];
        if !slot.is_nan() {
            return Err(Error::validation(
                Some(rec.row),
                format!(
                    "duplicate value for patient `{}` tooth {} site {} response `{}`",
                    rec.patient_id, rec.tooth, rec.site, rec.response
                ),
            ));
        }
        *slot = rec.value;
    }
    Dataset::new(DatasetParts {
        graph: Arc::new(graph),
        granularity: meta.granularity,
        responses,
        patient_ids: patients.ids,
        covariate_names: patients.covariate_names,
        x,
        spatial_names,
        w,
        y,
        unit_present,
    })
}

/// Serialize a dataset to the directory layout described above.
pub fn dataset_files(data: &Dataset) -> Result<DatasetFiles> {
    let graph = data.graph();
    let responses = data.responses();
    let meta = DatasetMeta {
        teeth_per_quadrant: graph.teeth_per_quadrant(),
        quadrants: graph.n_quadrants(),
        grid: graph.grid(),
        granularity: data.granularity(),
        responses: responses
            .names()
            .iter()
            .cloned()
            .zip(responses.kinds().iter().copied())
            .collect(),
        reference: responses.names()[responses.reference()].clone(),
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patient_id".to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for (i, id) in data.patient_ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(data.x().row(i).iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    let patients = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "tooth", "site", "response_name", "value"])?;
    for (i, id) in data.patient_ids().iter().enumerate() {
        for s in 0..data.n_sites() {
            for (j, name) in responses.names().iter().enumerate() {
                let v = data.y(j, i)[s];
                if v.is_nan() {
                    continue;
                }
                w.write_record([
                    id.clone(),
                    (s / SITES_PER_TOOTH).to_string(),
                    (s % SITES_PER_TOOTH).to_string(),
                    name.clone(),
                    fmt_f64(v),
                ])?;
            }
        }
    }
    let responses_csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let unit_column = match data.granularity() {
        Granularity::Tooth => "tooth",
        Granularity::Site => "site",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", unit_column, "present"])?;
    for (i, id) in data.patient_ids().iter().enumerate() {
        for u in 0..data.n_units() {
            w.write_record([id.clone(), u.to_string(), u8::from(data.unit_present(i, u)).to_string()])?;
        }
    }
    let status = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let spatial = if data.n_spatial() > 0 {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["site".to_string()];
        header.extend(data.spatial_names().iter().cloned());
        w.write_record(&header)?;
        for s in 0..data.n_sites() {
            let mut rec = vec![s.to_string()];
            rec.extend(data.w().row(s).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
        Some(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
    } else {
        None
    };
    let edges = if graph.grid() == GridVariant::Imported {
        let mut buf = Vec::new();
        graph.write_edges_csv(&mut buf)?;
        Some(buf)
    } else {
        None
    };
    Ok(DatasetFiles {
        meta: meta.to_text(),
        patients,
        responses: responses_csv,
        status,
        spatial,
        edges,
    })
}

/// Write `parameter,value` rows.
pub fn write_parameter_csv(values: &BTreeMap<String, f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "value"])?;
    for (k, v) in values {
        w.write_record([k.clone(), fmt_f64(*v)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
