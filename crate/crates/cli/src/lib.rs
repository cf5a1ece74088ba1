//! Configuration resolution and subcommands behind the `lsfm` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use lsfm::diagnostics::{dic, InfluenceReport};
use lsfm::io::{dataset_files, parse_dataset, parse_key_values, write_parameter_csv, DatasetFiles};
use lsfm::model::{generate_dataset, Dataset, DesignSpec, Granularity};
use lsfm::mouthgraph::{GridVariant, MouthGraph};
use lsfm::sampler::{read_summaries_csv, run_chain, ChainOutput, FitConfig, MuSummary, VariancePooling};
use lsfm::simstudy::{run_study, StudyPlan};
use lsfm::stochastic::RngStream;
use lsfm::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Diagnose,
    SimStudy,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Diagnose => "diagnose",
            Command::SimStudy => "sim-study",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const ALL: &[Command] = &[Command::Simulate, Command::Fit, Command::Diagnose, Command::SimStudy];
const SIM: &[Command] = &[Command::Simulate];
const FIT: &[Command] = &[Command::Fit];
const DIAG: &[Command] = &[Command::Diagnose];
const STUDY: &[Command] = &[Command::SimStudy];
const CHAIN: &[Command] = &[Command::Fit, Command::SimStudy];

/// A recognised configuration key.
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub commands: &'static [Command],
    pub help: &'static str,
}

/// Every key the CLI accepts, with its default. An empty default means
/// "unset".
pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "out", default: "", commands: ALL, help: "output directory (required)" },
    KeySpec { name: "seed", default: "1", commands: &[Command::Simulate, Command::Fit, Command::SimStudy], help: "random seed" },
    KeySpec { name: "threads", default: "1", commands: &[Command::Fit, Command::SimStudy], help: "worker threads; results do not depend on it" },
    KeySpec { name: "verbosity", default: "1", commands: ALL, help: "0 silences progress messages" },
    KeySpec { name: "design", default: "1", commands: SIM, help: "simulation design 1-6" },
    KeySpec { name: "design.n_patients", default: "", commands: SIM, help: "override the design's patient count" },
    KeySpec { name: "design.granularity", default: "", commands: SIM, help: "site or tooth missingness units" },
    KeySpec { name: "design.teeth_per_quadrant", default: "", commands: SIM, help: "teeth per quadrant" },
    KeySpec { name: "design.quadrants", default: "", commands: SIM, help: "1, 2 or 4 quadrants" },
    KeySpec { name: "design.grid", default: "", commands: SIM, help: "adjacency grid 1-3" },
    KeySpec { name: "data", default: "", commands: &[Command::Fit, Command::Diagnose], help: "dataset directory" },
    KeySpec { name: "fit", default: "", commands: DIAG, help: "output directory of a previous fit" },
    KeySpec { name: "preset", default: "", commands: FIT, help: "sensitivity preset ref<k>-uv<x>-w<x>-grid<k>" },
    KeySpec { name: "model.variant", default: "5", commands: FIT, help: "model 1-5" },
    KeySpec { name: "model.spatial", default: "variant", commands: FIT, help: "on, off or variant" },
    KeySpec { name: "model.informative_missing", default: "variant", commands: FIT, help: "on, off or variant" },
    KeySpec { name: "model.pooling", default: "variant", commands: FIT, help: "pooled, per-patient or variant" },
    KeySpec { name: "mcmc.n_iter", default: "20000", commands: CHAIN, help: "iterations per chain" },
    KeySpec { name: "mcmc.burn_in", default: "5000", commands: CHAIN, help: "discarded iterations" },
    KeySpec { name: "mcmc.thin", default: "1", commands: CHAIN, help: "keep every k-th draw after burn-in" },
    KeySpec { name: "mcmc.rho_concentration", default: "50", commands: FIT, help: "Beta proposal concentration for rho" },
    KeySpec { name: "mcmc.hyper_proposal_sd", default: "0.5", commands: FIT, help: "initial log-scale proposal sd" },
    KeySpec { name: "mcmc.target_acceptance", default: "0.4", commands: FIT, help: "adaptation target" },
    KeySpec { name: "prior.u", default: "0.1", commands: FIT, help: "Gamma shape of hyperpriors" },
    KeySpec { name: "prior.v", default: "0.1", commands: FIT, help: "Gamma rate of hyperpriors" },
    KeySpec { name: "prior.w", default: "10", commands: FIT, help: "prior sd of regression coefficients" },
    KeySpec { name: "data.reference", default: "", commands: FIT, help: "reference response (name or 1-based index)" },
    KeySpec { name: "data.grid", default: "", commands: FIT, help: "refit on adjacency grid 1-3" },
    KeySpec { name: "data.standardize", default: "false", commands: FIT, help: "standardize covariates" },
    KeySpec { name: "data.scale_responses", default: "false", commands: FIT, help: "centre and scale continuous responses" },
    KeySpec { name: "output.draws", default: "true", commands: FIT, help: "write draws.csv" },
    KeySpec { name: "study.designs", default: "1,2,3,4,5,6", commands: STUDY, help: "designs to run" },
    KeySpec { name: "study.models", default: "1,2,3,4,5", commands: STUDY, help: "models to fit" },
    KeySpec { name: "study.replicates", default: "20", commands: STUDY, help: "datasets per design" },
    KeySpec { name: "study.paper_scale", default: "false", commands: STUDY, help: "100 replicates of 20000 iterations" },
];

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Resolved settings for one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

/// Where a configuration layer came from, for error messages.
fn set_layer(
    command: Command,
    target: &mut BTreeMap<String, String>,
    pairs: Vec<(String, String)>,
    origin: &str,
) -> Result<()> {
    for (k, v) in pairs {
        match spec(&k) {
            Some(s) if s.commands.contains(&command) => {
                target.insert(k, v);
            }
            Some(_) => {
                return Err(Error::Config(format!(
                    "key `{k}` ({origin}) does not apply to `{command}`"
                )))
            }
            None => return Err(Error::Config(format!("unknown key `{k}` ({origin})"))),
        }
    }
    Ok(())
}

/// Parse `key=value` command-line settings.
pub fn parse_settings(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for a in args {
        let Some((k, v)) = a.split_once('=') else {
            return Err(Error::Config(format!("expected key=value, got `{a}`")));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Expand a sensitivity preset `ref<k>-uv<x>-w<x>-grid<k>`.
pub fn expand_preset(name: &str) -> Result<Vec<(String, String)>> {
    let bad = || Error::Config(format!("unknown preset `{name}`; expected ref<1-3>-uv<0.1|0.0001>-w<10|1000>-grid<1-3>"));
    let parts: Vec<&str> = name.split('-').collect();
    let [r, uv, w, g] = parts.as_slice() else {
        return Err(bad());
    };
    let r = r.strip_prefix("ref").filter(|v| ["1", "2", "3"].contains(v)).ok_or_else(bad)?;
    let uv = uv.strip_prefix("uv").filter(|v| ["0.1", "0.0001"].contains(v)).ok_or_else(bad)?;
    let w = w.strip_prefix("w").filter(|v| ["10", "1000"].contains(v)).ok_or_else(bad)?;
    let g = g.strip_prefix("grid").filter(|v| ["1", "2", "3"].contains(v)).ok_or_else(bad)?;
    Ok(vec![
        ("data.reference".into(), r.into()),
        ("prior.u".into(), uv.into()),
        ("prior.v".into(), uv.into()),
        ("prior.w".into(), w.into()),
        ("data.grid".into(), g.into()),
    ])
}

/// Every preset name, in a fixed order.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for r in 1..=3 {
        for uv in ["0.1", "0.0001"] {
            for w in ["10", "1000"] {
                for g in 1..=3 {
                    out.push(format!("ref{r}-uv{uv}-w{w}-grid{g}"));
                }
            }
        }
    }
    out
}

impl RunConfig {
    /// Layer defaults, an optional preset, the config file text and the
    /// command-line settings (later layers win).
    pub fn resolve(command: Command, file_text: Option<&str>, cli: &[(String, String)]) -> Result<Self> {
        let mut explicit = BTreeMap::new();
        if let Some(text) = file_text {
            set_layer(command, &mut explicit, parse_key_values(text)?, "config file")?;
        }
        set_layer(command, &mut explicit, cli.to_vec(), "command line")?;

        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .filter(|k| k.commands.contains(&command))
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        if command == Command::SimStudy && explicit.get("study.paper_scale").map(String::as_str) == Some("true") {
            values.insert("study.replicates".into(), "100".into());
            values.insert("mcmc.n_iter".into(), "20000".into());
            values.insert("mcmc.burn_in".into(), "5000".into());
        } else if command == Command::SimStudy {
            values.insert("mcmc.n_iter".into(), "4000".into());
            values.insert("mcmc.burn_in".into(), "1000".into());
        }
        if let Some(p) = explicit.get("preset").filter(|p| !p.is_empty()) {
            for (k, v) in expand_preset(p)? {
                values.insert(k, v);
            }
        }
        values.extend(explicit);
        let cfg = RunConfig { command, values };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.get("out").is_empty() {
            return Err(Error::Config("key `out` is required".into()));
        }
        match self.command {
            Command::Fit => {
                self.required("data")?;
                self.fit_config()?.validate()?;
            }
            Command::Diagnose => {
                self.required("fit")?;
            }
            Command::Simulate => {
                self.design()?.validate()?;
            }
            Command::SimStudy => {
                self.study_plan()?.validate()?;
            }
        }
        self.usize_key("verbosity")?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn required(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            "" => Err(Error::Config(format!("key `{key}` is required for `{}`", self.command))),
            v => Ok(v),
        }
    }

    fn parse_key<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{}` is not {what}", self.get(key))))
    }

    pub fn usize_key(&self, key: &str) -> Result<usize> {
        self.parse_key(key, "a non-negative integer")
    }

    pub fn f64_key(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_key(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("key `{key}` must be finite")))
        }
    }

    pub fn bool_key(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("key `{key}`: `{v}` is not a boolean"))),
        }
    }

    fn optional_usize(&self, key: &str) -> Result<Option<usize>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.usize_key(key).map(Some)
        }
    }

    fn list_key(&self, key: &str) -> Result<Vec<u8>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a small integer")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn verbose(&self) -> bool {
        self.usize_key("verbosity").map(|v| v > 0).unwrap_or(true)
    }

    /// Design for `simulate`, with any overrides applied.
    pub fn design(&self) -> Result<DesignSpec> {
        let id: u8 = self.parse_key("design", "a design number")?;
        let mut d = DesignSpec::standard(id).map_err(|e| Error::Config(format!("key `design`: {e}")))?;
        if let Some(n) = self.optional_usize("design.n_patients")? {
            d.n_patients = n;
        }
        if let Some(t) = self.optional_usize("design.teeth_per_quadrant")? {
            d.teeth_per_quadrant = t;
        }
        if let Some(q) = self.optional_usize("design.quadrants")? {
            d.n_quadrants = q;
        }
        match self.get("design.granularity") {
            "" => {}
            g => d.granularity = Granularity::parse(g).map_err(|e| Error::Config(format!("key `design.granularity`: {e}")))?,
        }
        match self.get("design.grid") {
            "" => {}
            g => d.grid = g.parse().map_err(|e: Error| Error::Config(format!("key `design.grid`: {e}")))?,
        }
        d.validate()?;
        MouthGraph::build(d.teeth_per_quadrant, d.n_quadrants, d.grid)?;
        Ok(d)
    }

    fn switch(&self, key: &str, variant_value: bool) -> Result<bool> {
        match self.get(key) {
            "variant" => Ok(variant_value),
            _ => self.bool_key(key),
        }
    }

    pub fn fit_config(&self) -> Result<FitConfig> {
        let model: u8 = self.parse_key("model.variant", "a model number")?;
        let base = FitConfig::for_model(model).map_err(|e| Error::Config(format!("key `model.variant`: {e}")))?;
        let pooling = match self.get("model.pooling") {
            "variant" => base.pooling,
            p => VariancePooling::parse(p).map_err(|e| Error::Config(format!("key `model.pooling`: {e}")))?,
        };
        let cfg = FitConfig {
            n_iter: self.usize_key("mcmc.n_iter")?,
            burn_in: self.usize_key("mcmc.burn_in")?,
            thin: self.usize_key("mcmc.thin")?,
            seed: self.parse_key("seed", "an unsigned integer")?,
            spatial: self.switch("model.spatial", base.spatial)?,
            informative_missing: self.switch("model.informative_missing", base.informative_missing)?,
            pooling,
            prior: lsfm::model::PriorConfig {
                u: self.f64_key("prior.u")?,
                v: self.f64_key("prior.v")?,
                w: self.f64_key("prior.w")?,
            },
            rho_concentration: self.f64_key("mcmc.rho_concentration")?,
            hyper_proposal_sd: self.f64_key("mcmc.hyper_proposal_sd")?,
            target_acceptance: self.f64_key("mcmc.target_acceptance")?,
            threads: self.usize_key("threads")?,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn study_plan(&self) -> Result<StudyPlan> {
        Ok(StudyPlan {
            designs: self.list_key("study.designs")?,
            models: self.list_key("study.models")?,
            replicates: self.usize_key("study.replicates")?,
            seed: self.parse_key("seed", "an unsigned integer")?,
            n_iter: self.usize_key("mcmc.n_iter")?,
            burn_in: self.usize_key("mcmc.burn_in")?,
            thin: self.usize_key("mcmc.thin")?,
            threads: self.usize_key("threads")?,
        })
    }

    /// Resolved settings as `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Manifest text: comments with command, version and config hash, then
    /// the resolved settings. It can be passed back with `--config`.
    pub fn manifest(&self, extra: &[(String, String)]) -> String {
        let mut s = format!(
            "# lsfm {} {}\n# command {}\n# config-sha256 {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.hash()
        );
        for (k, v) in extra {
            s.push_str(&format!("# {k} {v}\n"));
        }
        s.push_str(&self.to_text());
        s
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Precondition(_) => 2,
        Error::Validation { .. } | Error::Csv(_) | Error::Dimension { .. } => 3,
        Error::Numerical { .. } => 4,
        Error::Io(_) => 1,
    }
}

/// Files produced by a command, written together at the end.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Write each file through a temporary file in the same directory and
    /// rename it into place.
    pub fn commit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
        }
        Ok(())
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn progress(cfg: &RunConfig, msg: &str) {
    if cfg.verbose() {
        eprintln!("lsfm {}: {msg}", cfg.command);
    }
}

/// Run a command and write its outputs; returns the output directory.
pub fn execute(cfg: &RunConfig) -> Result<PathBuf> {
    let outputs = match cfg.command {
        Command::Simulate => cmd_simulate(cfg)?,
        Command::Fit => cmd_fit(cfg)?,
        Command::Diagnose => cmd_diagnose(cfg)?,
        Command::SimStudy => cmd_sim_study(cfg)?,
    };
    let dir = cfg.out_dir();
    outputs.commit(&dir)?;
    progress(cfg, &format!("wrote {} to {}", outputs.names().join(", "), dir.display()));
    Ok(dir)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outputs> {
    let design = cfg.design()?;
    let seed: u64 = cfg.parse_key("seed", "an unsigned integer")?;
    let sim = generate_dataset(&design, &mut RngStream::new(seed, 0))?;
    let files = dataset_files(&sim.dataset)?;
    let mut out = Outputs::default();
    for (name, bytes) in files.entries(sim.dataset.granularity()) {
        out.add(name, bytes);
    }
    let t = &sim.truth;
    let mut truth = BTreeMap::new();
    for (k, b) in t.beta.iter().enumerate() {
        truth.insert(format!("beta[x{}]", k + 1), *b);
    }
    truth.insert("a[missing]".into(), t.a[0]);
    truth.insert("b[missing]".into(), t.b[0]);
    for (j, name) in sim.dataset.responses().names().iter().enumerate() {
        truth.insert(format!("a[{name}]"), t.a[j + 1]);
        truth.insert(format!("b[{name}]"), t.b[j + 1]);
    }
    truth.insert("rho".into(), t.rho);
    for (i, pid) in sim.dataset.patient_ids().iter().enumerate() {
        truth.insert(format!("tau2[{pid}]"), t.tau2[i]);
        truth.insert(format!("sigma2[{pid}]"), t.sigma2[i]);
    }
    out.add("truth.csv", write_parameter_csv(&truth)?);
    let mu = csv_bytes(|buf| {
        let chain_like = ChainOutput {
            mu: t
                .mu
                .iter()
                .map(|m| MuSummary {
                    mean: m.clone(),
                    sd: vec![0.0; m.len()],
                })
                .collect(),
            ..ChainOutput::new(vec![], vec![], vec![], vec![], vec![], vec![])
        };
        chain_like.write_mu_csv(sim.dataset.patient_ids(), buf)
    })?;
    out.add("truth_mu.csv", mu);
    out.add("manifest.txt", cfg.manifest(&[]).into_bytes());
    progress(
        cfg,
        &format!(
            "design {} with {} patients and {} sites",
            design.design_id,
            sim.dataset.n_patients(),
            sim.dataset.n_sites()
        ),
    );
    Ok(out)
}

/// Load the dataset named by `data` and apply the `data.*` settings.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = PathBuf::from(cfg.required("data")?);
    let files = DatasetFiles::read_dir(&dir)?;
    let mut data = parse_dataset(&files)?;
    match cfg.get("data.grid") {
        "" => {}
        g => {
            let grid: GridVariant = g.parse().map_err(|e: Error| Error::Config(format!("key `data.grid`: {e}")))?;
            let graph = data.graph();
            let rebuilt = MouthGraph::build(graph.teeth_per_quadrant(), graph.n_quadrants(), grid)?;
            data = data.with_graph(Arc::new(rebuilt))?;
        }
    }
    match cfg.get("data.reference") {
        "" => {}
        r => {
            let names = data.responses().names();
            let idx = match r.parse::<usize>() {
                Ok(k) if (1..=names.len()).contains(&k) => k - 1,
                _ => names.iter().position(|n| n == r).ok_or_else(|| {
                    Error::Config(format!("key `data.reference`: no response `{r}` (have {})", names.join(", ")))
                })?,
            };
            data.set_reference(idx)?;
        }
    }
    if cfg.bool_key("data.standardize")? {
        data.standardize_covariates();
    }
    if cfg.bool_key("data.scale_responses")? {
        data.scale_responses();
    }
    Ok(data)
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Outputs> {
    let data = load_dataset(cfg)?;
    let fit = cfg.fit_config()?;
    progress(
        cfg,
        &format!(
            "fitting model {} to {} patients × {} sites ({} iterations)",
            cfg.get("model.variant"),
            data.n_patients(),
            data.n_sites(),
            fit.n_iter
        ),
    );
    let chain = run_chain(&data, &fit)?;
    let mut out = Outputs::default();
    out.add("summary.csv", csv_bytes(|b| chain.write_summary_csv(b))?);
    if cfg.bool_key("output.draws")? {
        out.add("draws.csv", csv_bytes(|b| chain.write_draws_csv(b))?);
    }
    out.add("deviance.csv", csv_bytes(|b| chain.write_deviance_csv(b))?);
    if !chain.mu.is_empty() {
        out.add("mu.csv", csv_bytes(|b| chain.write_mu_csv(data.patient_ids(), b))?);
    }
    if !chain.notes.is_empty() {
        out.add("notes.txt", (chain.notes.join("\n") + "\n").into_bytes());
        for n in &chain.notes {
            progress(cfg, &format!("warning: {n}"));
        }
    }
    let scaling: BTreeMap<String, f64> = data
        .response_scaling()
        .iter()
        .zip(data.responses().names())
        .filter_map(|(s, n)| s.map(|(c, sc)| [(format!("centre[{n}]"), c), (format!("scale[{n}]"), sc)]))
        .flatten()
        .collect();
    if !scaling.is_empty() {
        out.add("response_scaling.csv", write_parameter_csv(&scaling)?);
    }
    out.add("manifest.txt", cfg.manifest(&[]).into_bytes());
    Ok(out)
}

/// Rebuild the parts of a chain needed for diagnostics from a fit directory.
pub fn read_fit_dir(dir: &Path) -> Result<(RunConfig, ChainOutput)> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let fit_cfg = RunConfig::resolve(Command::Fit, Some(&manifest), &[])?;
    let summaries = read_summaries_csv(fs::File::open(dir.join("summary.csv"))?)?;
    let deviance = read_two_column(&fs::read(dir.join("deviance.csv"))?, "deviance")?;
    let mu_path = dir.join("mu.csv");
    let mu = if mu_path.exists() {
        read_mu_csv(&fs::read(mu_path)?)?
    } else {
        Vec::new()
    };
    let fc = fit_cfg.fit_config()?;
    let iterations: Vec<usize> = (1..=fc.n_iter).filter(|&t| fc.is_retained(t)).collect();
    let chain = ChainOutput {
        names: summaries.iter().map(|s| s.name.clone()).collect(),
        iterations,
        draws: Vec::new(),
        deviance_trace: deviance,
        mu,
        acceptance: Vec::new(),
        summaries,
        notes: Vec::new(),
    };
    Ok((fit_cfg, chain))
}

fn read_two_column(bytes: &[u8], column: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        out.push(
            rec.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::validation(Some(k + 2), format!("bad `{column}` value")))?,
        );
    }
    Ok(out)
}

fn read_mu_csv(bytes: &[u8]) -> Result<Vec<MuSummary>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out: Vec<(String, MuSummary)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let pid = rec.get(0).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::validation(Some(row), "bad number in mu.csv"))
        };
        if out.last().map(|(p, _)| p != &pid).unwrap_or(true) {
            out.push((pid, MuSummary { mean: Vec::new(), sd: Vec::new() }));
        }
        let m = &mut out.last_mut().expect("just pushed").1;
        m.mean.push(num(2)?);
        m.sd.push(num(3)?);
    }
    Ok(out.into_iter().map(|(_, m)| m).collect())
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Outputs> {
    let fit_dir = PathBuf::from(cfg.required("fit")?);
    let (mut fit_cfg, chain) = read_fit_dir(&fit_dir)?;
    if !cfg.get("data").is_empty() {
        fit_cfg.values.insert("data".into(), cfg.get("data").into());
    }
    let data = load_dataset(&fit_cfg)?;
    let mut out = Outputs::default();
    let mut extra = Vec::new();
    match InfluenceReport::from_chain(&chain, &data) {
        Ok(report) => {
            out.add("influence.csv", csv_bytes(|b| report.write_patients_csv(b))?);
            out.add("site_weights.csv", csv_bytes(|b| report.write_sites_csv(b))?);
            extra.push((
                "influence".to_string(),
                "heuristic: posterior means of rho and tau2 with the reference error variance".to_string(),
            ));
        }
        Err(e) => {
            progress(cfg, &format!("influence weights skipped: {e}"));
            extra.push(("influence".to_string(), format!("skipped: {e}")));
        }
    }
    match dic(&chain, &data) {
        Ok(d) => {
            let text = format!(
                "dic={}\np_d={}\nmean_deviance={}\n",
                lsfm::sampler::fmt_f64(d.dic),
                lsfm::sampler::fmt_f64(d.p_d),
                lsfm::sampler::fmt_f64(d.mean_deviance)
            );
            if d.p_d < 0.0 {
                progress(cfg, "warning: negative p_D suggests poor mixing");
            }
            progress(cfg, &format!("DIC {:.1} (p_D {:.1})", d.dic, d.p_d));
            out.add("dic.txt", text.into_bytes());
        }
        Err(e) => {
            progress(cfg, &format!("DIC skipped: {e}"));
            extra.push(("dic".to_string(), format!("skipped: {e}")));
        }
    }
    out.add("manifest.txt", cfg.manifest(&extra).into_bytes());
    Ok(out)
}

pub fn cmd_sim_study(cfg: &RunConfig) -> Result<Outputs> {
    let plan = cfg.study_plan()?;
    progress(
        cfg,
        &format!(
            "designs {:?}, models {:?}, {} replicates of {} iterations",
            plan.designs, plan.models, plan.replicates, plan.n_iter
        ),
    );
    let result = run_study(&plan)?;
    let mut out = Outputs::default();
    out.add("metrics.csv", csv_bytes(|b| result.table.write_csv(b))?);
    out.add("metrics.txt", result.table.to_text().into_bytes());
    if !result.failures.is_empty() {
        out.add("failures.txt", (result.failures.join("\n") + "\n").into_bytes());
    }
    if cfg.verbose() {
        eprint!("{}", result.table.to_text());
    }
    out.add("manifest.txt", cfg.manifest(&[]).into_bytes());
    Ok(out)
}
