//! Data model and the generative side of the latent factor model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::carfield::{factor_spd, CarStructure};
use crate::error::{Error, Result};
use crate::mouthgraph::{GridVariant, MouthGraph, ToothAverageMap};
use crate::stochastic::normal_draw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Continuous,
    Binary,
}

impl ResponseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseKind::Continuous => "continuous",
            ResponseKind::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "continuous" | "c" => Ok(ResponseKind::Continuous),
            "binary" | "b" => Ok(ResponseKind::Binary),
            other => Err(Error::Config(format!("unknown response kind `{other}`"))),
        }
    }
}

/// Response names, kinds and which response has its slope fixed at one.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSpec {
    names: Vec<String>,
    kinds: Vec<ResponseKind>,
    reference: usize,
}

impl ResponseSpec {
    pub fn new(names: Vec<String>, kinds: Vec<ResponseKind>, reference: usize) -> Result<Self> {
        if names.is_empty() || names.len() != kinds.len() {
            return Err(Error::Config("need one kind per response and at least one response".into()));
        }
        if reference >= names.len() {
            return Err(Error::Config(format!(
                "reference response {} out of range (J = {})",
                reference + 1,
                names.len()
            )));
        }
        Ok(ResponseSpec { names, kinds, reference })
    }

    pub fn single_continuous(name: &str) -> Self {
        ResponseSpec {
            names: vec![name.to_string()],
            kinds: vec![ResponseKind::Continuous],
            reference: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, j: usize) -> ResponseKind {
        self.kinds[j]
    }

    pub fn kinds(&self) -> &[ResponseKind] {
        &self.kinds
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn with_reference(mut self, reference: usize) -> Result<Self> {
        if reference >= self.names.len() {
            return Err(Error::Config(format!("reference response {} out of range", reference + 1)));
        }
        self.reference = reference;
        Ok(self)
    }

    pub fn is_continuous(&self, j: usize) -> bool {
        self.kinds[j] == ResponseKind::Continuous
    }
}

/// Unit at which presence/absence is recorded and modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Whole teeth: six sites observed or absent together.
    Tooth,
    /// Individual sites.
    Site,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Tooth => "tooth",
            Granularity::Site => "site",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tooth" => Ok(Granularity::Tooth),
            "site" => Ok(Granularity::Site),
            other => Err(Error::Config(format!("unknown missingness granularity `{other}`"))),
        }
    }
}

/// Observed data for N patients on a shared graph.
///
/// Responses are stored per type as `N × S` row-major arrays with `NaN` at
/// absent sites; binary responses hold 0/1.
#[derive(Debug, Clone)]
pub struct Dataset {
    graph: Arc<MouthGraph>,
    granularity: Granularity,
    units: ToothAverageMap,
    responses: ResponseSpec,
    patient_ids: Vec<String>,
    covariate_names: Vec<String>,
    x: DMatrix<f64>,
    spatial_names: Vec<String>,
    w: DMatrix<f64>,
    y: Vec<Vec<f64>>,
    unit_present: Vec<bool>,
    observed_counts: Vec<usize>,
    response_scaling: Vec<Option<(f64, f64)>>,
}

/// Everything needed to assemble a [`Dataset`].
#[derive(Debug, Clone)]
pub struct DatasetParts {
    pub graph: Arc<MouthGraph>,
    pub granularity: Granularity,
    pub responses: ResponseSpec,
    pub patient_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub spatial_names: Vec<String>,
    pub w: DMatrix<f64>,
    pub y: Vec<Vec<f64>>,
    pub unit_present: Vec<bool>,
}

impl Dataset {
    /// Validate and assemble. Every present unit must have all J responses at
    /// all of its sites; every absent unit must have none.
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            graph,
            granularity,
            responses,
            patient_ids,
            covariate_names,
            x,
            spatial_names,
            w,
            y,
            unit_present,
        } = parts;
        let n = patient_ids.len();
        let s_count = graph.n_sites();
        let units = match granularity {
            Granularity::Tooth => graph.tooth_average_map(),
            Granularity::Site => ToothAverageMap::per_site(s_count),
        };
        let n_units = units.n_rows();
        let invalid = |m: String| Err(Error::validation(None, m));
        if x.nrows() != n {
            return invalid(format!("covariate matrix has {} rows for {n} patients", x.nrows()));
        }
        if x.ncols() != covariate_names.len() {
            return invalid("covariate names do not match covariate columns".into());
        }
        if w.nrows() != s_count || w.ncols() != spatial_names.len() {
            return invalid(format!(
                "spatial covariates must be {s_count} × {} (got {} × {})",
                spatial_names.len(),
                w.nrows(),
                w.ncols()
            ));
        }
        if y.len() != responses.len() {
            return invalid(format!("{} response arrays for {} response types", y.len(), responses.len()));
        }
        if unit_present.len() != n * n_units {
            return invalid("presence mask has the wrong length".into());
        }
        if x.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return invalid("covariates must be finite".into());
        }
        for (j, series) in y.iter().enumerate() {
            if series.len() != n * s_count {
                return invalid(format!("response `{}` has the wrong length", responses.names()[j]));
            }
        }

        let mut observed_counts = vec![0; n];
        for i in 0..n {
            for u in 0..n_units {
                let present = unit_present[i * n_units + u];
                for &s in units.row_sites(u) {
                    for (j, series) in y.iter().enumerate() {
                        let v = series[i * s_count + s];
                        let where_ = || {
                            format!(
                                "patient `{}`, {} {} (site {s}), response `{}`",
                                patient_ids[i],
                                granularity.as_str(),
                                u,
                                responses.names()[j]
                            )
                        };
                        if present && !v.is_finite() {
                            return invalid(format!("missing value on a present unit: {}", where_()));
                        }
                        if !present && !v.is_nan() {
                            return invalid(format!("value recorded on an absent unit: {}", where_()));
                        }
                        if present && responses.kind(j) == ResponseKind::Binary && v != 0.0 && v != 1.0 {
                            return invalid(format!("binary response not 0/1: {}", where_()));
                        }
                    }
                    if present {
                        observed_counts[i] += 1;
                    }
                }
            }
        }

        let j_count = responses.len();
        Ok(Dataset {
            graph,
            granularity,
            units,
            responses,
            patient_ids,
            covariate_names,
            x,
            spatial_names,
            w,
            y,
            unit_present,
            observed_counts,
            response_scaling: vec![None; j_count],
        })
    }

    pub fn graph(&self) -> &MouthGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> Arc<MouthGraph> {
        Arc::clone(&self.graph)
    }

    /// Same data on a different adjacency over the same sites.
    pub fn with_graph(mut self, graph: Arc<MouthGraph>) -> Result<Self> {
        if graph.n_sites() != self.graph.n_sites() {
            return Err(Error::Dimension {
                expected: self.graph.n_sites(),
                got: graph.n_sites(),
            });
        }
        self.graph = graph;
        Ok(self)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Averaging map from sites to missingness units (Z).
    pub fn units(&self) -> &ToothAverageMap {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.n_rows()
    }

    pub fn responses(&self) -> &ResponseSpec {
        &self.responses
    }

    pub fn set_reference(&mut self, reference: usize) -> Result<()> {
        self.responses = self.responses.clone().with_reference(reference)?;
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_sites(&self) -> usize {
        self.graph.n_sites()
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn spatial_names(&self) -> &[String] {
        &self.spatial_names
    }

    /// Patient covariates, N × p.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Spatial covariates, S × q.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_spatial(&self) -> usize {
        self.w.ncols()
    }

    /// Responses of type j for patient i (length S, NaN where absent).
    pub fn y(&self, j: usize, i: usize) -> &[f64] {
        let s = self.n_sites();
        &self.y[j][i * s..(i + 1) * s]
    }

    pub fn unit_present(&self, i: usize, u: usize) -> bool {
        self.unit_present[i * self.n_units() + u]
    }

    pub fn site_observed(&self, i: usize, s: usize) -> bool {
        !self.y[0][i * self.n_sites() + s].is_nan()
    }

    /// Observed-site count S_i.
    pub fn observed_count(&self, i: usize) -> usize {
        self.observed_counts[i]
    }

    pub fn has_missing(&self) -> bool {
        self.unit_present.iter().any(|p| !p)
    }

    pub fn all_continuous(&self) -> bool {
        self.responses.kinds().iter().all(|k| *k == ResponseKind::Continuous)
    }

    /// Ω_i = X_i' ⊗ 1_S as a dense S × p matrix.
    pub fn omega(&self, i: usize) -> DMatrix<f64> {
        let row = self.x.row(i);
        DMatrix::from_fn(self.n_sites(), self.n_covariates(), |_, k| row[k])
    }

    /// W α + Ω_i β.
    pub fn prior_mean(&self, i: usize, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let xb: f64 = self.x.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        (0..self.n_sites())
            .map(|s| xb + self.w.row(s).iter().zip(alpha).map(|(w, a)| w * a).sum::<f64>())
            .collect()
    }

    /// Standardize every patient and spatial covariate column to mean 0 and
    /// variance 1. Constant columns are centred only.
    pub fn standardize_covariates(&mut self) {
        standardize_columns(&mut self.x);
        standardize_columns(&mut self.w);
    }

    /// Centre and scale each continuous response to mean 0, variance 1 over
    /// observed values, recording `(centre, scale)` for back-transformation.
    pub fn scale_responses(&mut self) {
        for j in 0..self.responses.len() {
            if !self.responses.is_continuous(j) {
                continue;
            }
            let vals: Vec<f64> = self.y[j].iter().copied().filter(|v| !v.is_nan()).collect();
            if vals.len() < 2 {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for v in self.y[j].iter_mut().filter(|v| !v.is_nan()) {
                *v = (*v - mean) / sd;
            }
            self.response_scaling[j] = Some((mean, sd));
        }
    }

    pub fn response_scaling(&self) -> &[Option<(f64, f64)>] {
        &self.response_scaling
    }
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    if n < 2 {
        return;
    }
    for mut col in m.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
}

/// Hyperparameters of the per-patient variance hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    /// Gamma shape of σ_ij^{-2}, per response (binary entries unused).
    pub c: Vec<f64>,
    /// Gamma rate of σ_ij^{-2}, per response.
    pub d: Vec<f64>,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

/// Per-patient sampled quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientState {
    pub mu: Vec<f64>,
    /// σ²_ij per response; fixed at 1 for binary responses.
    pub sigma2: Vec<f64>,
    pub tau2: f64,
    pub rho: f64,
    /// Augmented Gaussian latents for binary responses (empty for continuous).
    pub latent: Vec<Vec<f64>>,
    /// Augmented missingness latents, one per unit.
    pub miss_latent: Vec<f64>,
}

/// All sampled quantities. Index 0 of `a`/`b` is the missingness model;
/// index `j + 1` is response j.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub patients: Vec<PatientState>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub hyper: Hyper,
}

impl ModelState {
    /// Intercept of response j.
    pub fn a_resp(&self, j: usize) -> f64 {
        self.a[j + 1]
    }

    /// Slope of response j.
    pub fn b_resp(&self, j: usize) -> f64 {
        self.b[j + 1]
    }
}

/// Prior settings: regression-type coefficients ~ N(0, w²), hyperparameters
/// ~ Gamma(u, v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub w: f64,
    pub u: f64,
    pub v: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { w: 10.0, u: 0.1, v: 0.1 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w", self.w), ("u", self.u), ("v", self.v)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Corr(y_j(s), y_l(s)) implied by a shared latent factor.
pub fn response_correlation(b_j: f64, b_l: f64, var_mu: f64, sigma2_j: f64, sigma2_l: f64) -> f64 {
    b_j * b_l * var_mu / (b_j * b_j * var_mu + sigma2_j).sqrt() / (b_l * b_l * var_mu + sigma2_l).sqrt()
}

/// Marginal mean vector and covariance matrix over responses at site `s` of
/// patient `i`, after integrating out μ_i.
pub fn marginal_moments(
    state: &ModelState,
    data: &Dataset,
    car: &CarStructure,
    i: usize,
    s: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = &state.patients[i];
    let q = car.precision(p.rho)?;
    let q_inv = factor_spd(q, "marginal_moments")?.inverse();
    let q_ss = q_inv[(s, s)];
    let lin = data.prior_mean(i, &state.alpha, &state.beta)[s];
    let j_count = data.n_responses();
    let mean = (0..j_count).map(|j| state.a_resp(j) + state.b_resp(j) * lin).collect();
    let cov = DMatrix::from_fn(j_count, j_count, |j, l| {
        let shared = state.b_resp(j) * state.b_resp(l) * p.tau2 * q_ss;
        if j == l {
            shared + p.sigma2[j]
        } else {
            shared
        }
    });
    Ok((mean, cov))
}

/// Per-patient variance assignment in a simulation design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceRule {
    /// σ_i² = τ_i² = v for everyone.
    Constant(f64),
    /// σ_i² = τ_i² = `odd` for odd (1-based) patients, `even` otherwise.
    OddEven { odd: f64, even: f64 },
}

impl VarianceRule {
    /// Variance for 0-based patient index `k`.
    pub fn variance(&self, k: usize) -> f64 {
        match *self {
            VarianceRule::Constant(v) => v,
            VarianceRule::OddEven { odd, even } => {
                if (k + 1) % 2 == 1 {
                    odd
                } else {
                    even
                }
            }
        }
    }
}

/// True intercept/slope of one simulated response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTruth {
    pub name: String,
    pub kind: ResponseKind,
    pub a: f64,
    pub b: f64,
}

/// Data-generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    /// 1–6 for the standard designs, 0 for custom.
    pub design_id: u8,
    pub rho: f64,
    pub b0: f64,
    pub a0: f64,
    pub variance: VarianceRule,
    pub n_patients: usize,
    pub teeth_per_quadrant: usize,
    pub n_quadrants: usize,
    pub grid: GridVariant,
    pub beta: Vec<f64>,
    pub responses: Vec<ResponseTruth>,
    pub granularity: Granularity,
}

impl DesignSpec {
    /// One of the six standard designs: N = 50 patients, one quadrant
    /// (S = 42), six covariates with β = (0,0,0,1,2,3)/20, a single
    /// continuous response with a₁ = b₁ = 1, a₀ = −1, and site-level
    /// missingness.
    pub fn standard(design_id: u8) -> Result<Self> {
        let odd_even = VarianceRule::OddEven { odd: 2.0, even: 0.5 };
        let (rho, b0, variance) = match design_id {
            1 => (0.0, 0.0, VarianceRule::Constant(1.0)),
            2 => (0.9, 0.0, VarianceRule::Constant(1.0)),
            3 => (0.9, 0.0, odd_even),
            4 => (0.9, 1.0, VarianceRule::Constant(1.0)),
            5 => (0.9, 1.0, odd_even),
            6 => (0.5, 1.0, odd_even),
            other => return Err(Error::Config(format!("design must be 1-6, got {other}"))),
        };
        Ok(DesignSpec {
            design_id,
            rho,
            b0,
            a0: -1.0,
            variance,
            n_patients: 50,
            teeth_per_quadrant: 7,
            n_quadrants: 1,
            grid: GridVariant::Grid1,
            beta: [0.0, 0.0, 0.0, 1.0, 2.0, 3.0].iter().map(|v| v / 20.0).collect(),
            responses: vec![ResponseTruth {
                name: "y".into(),
                kind: ResponseKind::Continuous,
                a: 1.0,
                b: 1.0,
            }],
            granularity: Granularity::Site,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("design rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.n_patients == 0 || self.responses.is_empty() {
            return Err(Error::Config("design needs at least one patient and one response".into()));
        }
        let bad_var = match self.variance {
            VarianceRule::Constant(v) => !(v > 0.0),
            VarianceRule::OddEven { odd, even } => !(odd > 0.0 && even > 0.0),
        };
        if bad_var {
            return Err(Error::Config("design variances must be positive".into()));
        }
        Ok(())
    }
}

/// True latent quantities behind a simulated dataset.
#[derive(Debug, Clone)]
pub struct Truth {
    pub mu: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub rho: f64,
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: Truth,
}

/// Draw a dataset from a design.
///
/// X_i ~ N(0, I_p); μ_i ~ N(X_i'β 1, τ_i² Q(ρ)^{-1}); each unit is absent
/// when `a₀ + b₀·(unit mean of μ_i) + ε > 0`; observed responses follow
/// `a_j + b_j μ_i(s) + ε` with variance σ_i² (continuous) or are the sign of
/// that latent with unit variance (binary).
pub fn generate_dataset<R: Rng + ?Sized>(design: &DesignSpec, rng: &mut R) -> Result<Simulated> {
    design.validate()?;
    let graph = Arc::new(MouthGraph::build(design.teeth_per_quadrant, design.n_quadrants, design.grid)?);
    let car = CarStructure::new(&graph);
    let s_count = graph.n_sites();
    let n = design.n_patients;
    let p = design.beta.len();
    let chol = factor_spd(car.precision(design.rho)?, "generate_dataset")?;
    let units = match design.granularity {
        Granularity::Tooth => graph.tooth_average_map(),
        Granularity::Site => ToothAverageMap::per_site(s_count),
    };
    let n_units = units.n_rows();

    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let j_count = design.responses.len();
    let mut y = vec![vec![f64::NAN; n * s_count]; j_count];
    let mut unit_present = vec![true; n * n_units];
    let mut mus = Vec::with_capacity(n);
    let mut tau2s = Vec::with_capacity(n);
    let mut sigma2s = Vec::with_capacity(n);
    let zero = DVector::zeros(s_count);

    for i in 0..n {
        let var = design.variance.variance(i);
        let xb: f64 = x.row(i).iter().zip(&design.beta).map(|(a, b)| a * b).sum();
        let noise = crate::carfield::sample_from_factor(&chol, &zero, rng);
        let mu: Vec<f64> = noise.iter().map(|z| xb + var.sqrt() * z).collect();

        for u in 0..n_units {
            let latent = design.a0 + design.b0 * units.average(u, &mu) + rng.sample::<f64, _>(StandardNormal);
            unit_present[i * n_units + u] = latent <= 0.0;
        }
        for u in 0..n_units {
            if !unit_present[i * n_units + u] {
                continue;
            }
            for &s in units.row_sites(u) {
                for (j, resp) in design.responses.iter().enumerate() {
                    let m = resp.a + resp.b * mu[s];
                    y[j][i * s_count + s] = match resp.kind {
                        ResponseKind::Continuous => normal_draw(m, var.sqrt(), rng)?,
                        ResponseKind::Binary => {
                            f64::from(u8::from(m + rng.sample::<f64, _>(StandardNormal) > 0.0))
                        }
                    };
                }
            }
        }
        mus.push(mu);
        tau2s.push(var);
        sigma2s.push(var);
    }

    let responses = ResponseSpec::new(
        design.responses.iter().map(|r| r.name.clone()).collect(),
        design.responses.iter().map(|r| r.kind).collect(),
        0,
    )?;
    let dataset = Dataset::new(DatasetParts {
        graph,
        granularity: design.granularity,
        responses,
        patient_ids: (1..=n).map(|i| i.to_string()).collect(),
        covariate_names: (1..=p).map(|k| format!("x{k}")).collect(),
        x,
        spatial_names: Vec::new(),
        w: DMatrix::zeros(s_count, 0),
        y,
        unit_present,
    })?;
    let mut a = vec![design.a0];
    let mut b = vec![design.b0];
    for r in &design.responses {
        a.push(r.a);
        b.push(r.b);
    }
    Ok(Simulated {
        dataset,
        truth: Truth {
            mu: mus,
            tau2: tau2s,
            sigma2: sigma2s,
            rho: design.rho,
            beta: design.beta.clone(),
            a,
            b,
        },
    })
}
