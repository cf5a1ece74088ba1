//! Gibbs/Metropolis sampler for the latent spatial factor model.

mod chain;
mod config;
mod meanreg;

pub use chain::{
    fmt_f64, quantile_sorted, read_summaries_csv, write_summaries_csv, ChainOutput, MuSummary, ParamSummary,
    SUMMARY_HEADER,
};
pub use config::{FitConfig, FixedBlocks, ModelFamily, VariancePooling};
pub use meanreg::{fit_mean_regression, mean_regression_posterior, MeanRegressionPosterior};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::carfield::{factor_spd, sample_from_factor, BandSpd, CarStructure, RHO_MAX};
use crate::error::{Error, Result};
use crate::model::{Dataset, Hyper, ModelState, PatientState, ResponseKind};
use crate::mouthgraph::ToothAverageMap;
use crate::stochastic::{
    beta_draw, inverse_gamma_draw, logpdf, normal_log_cdf, normal_quantile, truncated_normal, HalfLine,
    RngStream,
};

/// Read-only view of the global parameters during the per-patient phase.
#[derive(Clone, Copy)]
struct Globals<'a> {
    a: &'a [f64],
    b: &'a [f64],
    alpha: &'a [f64],
    beta: &'a [f64],
    hyper: &'a Hyper,
}

impl<'a> Globals<'a> {
    fn of(state: &'a ModelState) -> (Self, &'a [PatientState]) {
        let g = Globals {
            a: &state.a,
            b: &state.b,
            alpha: &state.alpha,
            beta: &state.beta,
            hyper: &state.hyper,
        };
        (g, &state.patients)
    }
}

/// Chain-invariant quantities derived from the data and configuration.
struct Fixed<'d> {
    data: &'d Dataset,
    config: FitConfig,
    car: CarStructure,
    units: ToothAverageMap,
    bandwidth: usize,
    /// Observed site indices per patient.
    observed: Vec<Vec<usize>>,
    /// Missingness indicator (true = absent) per patient and unit.
    absent: Vec<Vec<bool>>,
    continuous: Vec<bool>,
    reference: usize,
    /// W'MW and W'DW for the α update.
    wmw: DMatrix<f64>,
    wdw: DMatrix<f64>,
}

impl<'d> Fixed<'d> {
    fn new(data: &'d Dataset, config: &FitConfig) -> Result<Self> {
        let graph = data.graph();
        let car = CarStructure::new(graph);
        let units = data.units().clone();
        let mut bandwidth = car.bandwidth();
        if config.informative_missing {
            for u in 0..units.n_rows() {
                let sites = units.row_sites(u);
                if let (Some(lo), Some(hi)) = (sites.iter().min(), sites.iter().max()) {
                    bandwidth = bandwidth.max(hi - lo);
                }
            }
        }
        let n = data.n_patients();
        let s_count = data.n_sites();
        let observed = (0..n)
            .map(|i| (0..s_count).filter(|&s| data.site_observed(i, s)).collect())
            .collect();
        let absent = (0..n)
            .map(|i| (0..units.n_rows()).map(|u| !data.unit_present(i, u)).collect())
            .collect();
        let continuous = (0..data.n_responses()).map(|j| data.responses().is_continuous(j)).collect();
        let w = data.w();
        let q = w.ncols();
        let mut wmw = DMatrix::zeros(q, q);
        let mut wdw = DMatrix::zeros(q, q);
        for k in 0..q {
            for l in 0..q {
                wmw[(k, l)] = (0..s_count).map(|s| car.degrees()[s] * w[(s, k)] * w[(s, l)]).sum();
                wdw[(k, l)] = car
                    .edges()
                    .iter()
                    .map(|&(a, b)| w[(a, k)] * w[(b, l)] + w[(b, k)] * w[(a, l)])
                    .sum();
            }
        }
        Ok(Fixed {
            data,
            config: config.clone(),
            car,
            units,
            bandwidth,
            observed,
            absent,
            continuous,
            reference: data.responses().reference(),
            wmw,
            wdw,
        })
    }

    fn pooled(&self) -> bool {
        self.config.pooling == VariancePooling::Pooled
    }

    /// The value the sampler works with for response j at site s: the
    /// observation itself, or the augmented latent for binary responses.
    fn working_response(&self, p: &PatientState, i: usize, j: usize, s: usize) -> f64 {
        if self.continuous[j] {
            self.data.y(j, i)[s]
        } else {
            p.latent[j][s]
        }
    }

    fn prior_mean(&self, g: &Globals, i: usize) -> Vec<f64> {
        self.data.prior_mean(i, g.alpha, g.beta)
    }

    fn update_binary_latents<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) {
        for j in 0..self.continuous.len() {
            if self.continuous[j] {
                continue;
            }
            let y = self.data.y(j, i);
            let (a, b) = (g.a[j + 1], g.b[j + 1]);
            for &s in &self.observed[i] {
                let side = HalfLine::from_indicator(y[s] > 0.5);
                p.latent[j][s] = truncated_normal(a + b * p.mu[s], 1.0, side, rng);
            }
        }
    }

    fn update_missing_latents<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) {
        if !self.config.informative_missing {
            return;
        }
        for u in 0..self.units.n_rows() {
            let mean = g.a[0] + g.b[0] * self.units.average(u, &p.mu);
            p.miss_latent[u] = truncated_normal(mean, 1.0, HalfLine::from_indicator(self.absent[i][u]), rng);
        }
    }

    fn update_mu<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) -> Result<()> {
        let s_count = self.data.n_sites();
        let m = self.prior_mean(g, i);
        let mut prec = BandSpd::zeros(s_count, self.bandwidth);
        prec.add_car(&self.car, p.rho, 1.0 / p.tau2);
        let mut shift: Vec<f64> = self.car.precision_mul(p.rho, &m).iter().map(|v| v / p.tau2).collect();
        for (j, &cont) in self.continuous.iter().enumerate() {
            let (a, b) = (g.a[j + 1], g.b[j + 1]);
            let s2 = if cont { p.sigma2[j] } else { 1.0 };
            for &s in &self.observed[i] {
                let y = self.working_response(p, i, j, s);
                prec.add(s, s, b * b / s2);
                shift[s] += b * (y - a) / s2;
            }
        }
        if self.config.informative_missing {
            let (a0, b0) = (g.a[0], g.b[0]);
            for u in 0..self.units.n_rows() {
                let sites = self.units.row_sites(u);
                let wgt = self.units.weight(u);
                let resid = p.miss_latent[u] - a0;
                for (k, &s) in sites.iter().enumerate() {
                    shift[s] += b0 * wgt * resid;
                    for &t in &sites[..=k] {
                        prec.add(s, t, b0 * b0 * wgt * wgt);
                    }
                }
            }
        }
        let chol = prec.factor("mu")?;
        p.mu = chol.sample(&shift, rng);
        Ok(())
    }

    /// Sum of squared residuals of continuous response j over observed sites.
    fn ssr(&self, g: &Globals, i: usize, p: &PatientState, j: usize) -> f64 {
        let y = self.data.y(j, i);
        let (a, b) = (g.a[j + 1], g.b[j + 1]);
        self.observed[i].iter().map(|&s| (y[s] - a - b * p.mu[s]).powi(2)).sum()
    }

    fn car_residual(&self, g: &Globals, i: usize, p: &PatientState) -> Vec<f64> {
        let m = self.prior_mean(g, i);
        p.mu.iter().zip(&m).map(|(u, v)| u - v).collect()
    }

    fn update_sigma2<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) -> Result<()> {
        for j in 0..self.continuous.len() {
            if !self.continuous[j] {
                continue;
            }
            let shape = self.observed[i].len() as f64 / 2.0 + g.hyper.c[j];
            let scale = self.ssr(g, i, p, j) / 2.0 + g.hyper.d[j];
            p.sigma2[j] = inverse_gamma_draw(shape, scale, rng).map_err(|e| block_error("sigma2", e))?;
        }
        Ok(())
    }

    fn update_tau2<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) -> Result<()> {
        let r = self.car_residual(g, i, p);
        let quad = self.car.quadratic_form_unchecked(&r, p.rho);
        let shape = self.data.n_sites() as f64 / 2.0 + g.hyper.e;
        p.tau2 = inverse_gamma_draw(shape, quad / 2.0 + g.hyper.f, rng).map_err(|e| block_error("tau2", e))?;
        Ok(())
    }

    /// One Metropolis–Hastings step for a patient's ρ. Returns acceptance.
    fn update_rho<R: Rng + ?Sized>(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut R) -> Result<bool> {
        let r = self.car_residual(g, i, p);
        let tau2 = p.tau2;
        let (gg, hh) = (g.hyper.g, g.hyper.h);
        let target = |rho: f64| -> Result<f64> {
            let ld = self.car.log_det(rho)?;
            Ok(0.5 * ld - self.car.quadratic_form_unchecked(&r, rho) / (2.0 * tau2) + logpdf::beta(rho, gg, hh))
        };
        let (accepted, rho) = rho_step(p.rho, self.config.rho_concentration, target, rng)?;
        p.rho = rho;
        Ok(accepted)
    }

    /// Per-patient block of one sweep.
    fn patient_sweep(&self, g: &Globals, i: usize, p: &mut PatientState, rng: &mut RngStream) -> Result<Option<bool>> {
        let fixed = self.config.fixed;
        if !fixed.latents {
            self.update_binary_latents(g, i, p, rng);
            self.update_missing_latents(g, i, p, rng);
        }
        if !fixed.mu {
            self.update_mu(g, i, p, rng)?;
        }
        if self.pooled() {
            return Ok(None);
        }
        if !fixed.variances {
            self.update_sigma2(g, i, p, rng)?;
            self.update_tau2(g, i, p, rng)?;
        }
        if self.config.spatial && !fixed.rho {
            return self.update_rho(g, i, p, rng).map(Some);
        }
        Ok(None)
    }

    fn deviance(&self, state: &ModelState) -> f64 {
        let mut ll = 0.0;
        for (i, p) in state.patients.iter().enumerate() {
            for (j, &cont) in self.continuous.iter().enumerate() {
                let y = self.data.y(j, i);
                let (a, b) = (state.a[j + 1], state.b[j + 1]);
                for &s in &self.observed[i] {
                    let lin = a + b * p.mu[s];
                    ll += if cont {
                        logpdf::normal(y[s], lin, p.sigma2[j])
                    } else if y[s] > 0.5 {
                        normal_log_cdf(lin)
                    } else {
                        normal_log_cdf(-lin)
                    };
                }
            }
            if self.config.informative_missing {
                for u in 0..self.units.n_rows() {
                    let lin = state.a[0] + state.b[0] * self.units.average(u, &p.mu);
                    ll += if self.absent[i][u] { normal_log_cdf(lin) } else { normal_log_cdf(-lin) };
                }
            }
        }
        -2.0 * ll
    }
}

fn block_error(block: &str, e: Error) -> Error {
    Error::numerical(block, e.to_string())
}

/// Beta random-walk Metropolis–Hastings step on ρ with the proposal
/// asymmetry correction. Proposals outside `(0, RHO_MAX]` are rejected.
fn rho_step<R, F>(current: f64, kappa: f64, target: F, rng: &mut R) -> Result<(bool, f64)>
where
    R: Rng + ?Sized,
    F: Fn(f64) -> Result<f64>,
{
    let proposal = beta_draw(kappa * current, kappa * (1.0 - current), rng).map_err(|e| block_error("rho", e))?;
    if !(proposal > 0.0 && proposal <= RHO_MAX) {
        return Ok((false, current));
    }
    let log_q_forward = logpdf::beta(proposal, kappa * current, kappa * (1.0 - current));
    let log_q_back = logpdf::beta(current, kappa * proposal, kappa * (1.0 - proposal));
    let log_ratio = target(proposal)? - target(current)? + log_q_back - log_q_forward;
    if log_ratio.is_nan() {
        return Err(Error::numerical("rho", format!("NaN acceptance ratio at proposal {proposal}")));
    }
    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        Ok((true, proposal))
    } else {
        Ok((false, current))
    }
}

/// Adaptive log-scale random-walk state for one hyperparameter.
#[derive(Debug, Clone)]
struct Walk {
    name: String,
    log_sd: f64,
    tries: usize,
    accepts: usize,
}

impl Walk {
    fn new(name: String, sd: f64) -> Self {
        Walk {
            name,
            log_sd: sd.ln(),
            tries: 0,
            accepts: 0,
        }
    }
}

/// Which hyperparameter a walk moves.
#[derive(Debug, Clone, Copy)]
enum HyperSlot {
    C(usize),
    D(usize),
    E,
    F,
    G,
    H,
}

/// Gibbs/Metropolis sampler for one chain.
pub struct Sampler<'d> {
    fx: Fixed<'d>,
    state: ModelState,
    global_rng: RngStream,
    patient_rngs: Vec<RngStream>,
    walks: Vec<(HyperSlot, Walk)>,
    rho_tries: usize,
    rho_accepts: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<'d> Sampler<'d> {
    pub fn new(data: &'d Dataset, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        if config.family == ModelFamily::MeanRegression {
            return Err(Error::Unsupported(
                "mean regression has its own closed-form path; use run_chain".into(),
            ));
        }
        if data.n_patients() == 0 {
            return Err(Error::Precondition("dataset has no patients".into()));
        }
        let fx = Fixed::new(data, config)?;
        let state = match &config.init {
            Some(init) => {
                check_state_shape(init, data)?;
                init.clone()
            }
            None => initial_state(data, config),
        };
        let n = data.n_patients();
        let patient_rngs = (0..n).map(|i| RngStream::new(config.seed, i as u64 + 1)).collect();
        let mut walks = Vec::new();
        if config.pooling == VariancePooling::PerPatient && !config.fixed.hyper {
            for (j, name) in data.responses().names().iter().enumerate() {
                if fx.continuous[j] {
                    walks.push((HyperSlot::C(j), Walk::new(format!("c[{name}]"), config.hyper_proposal_sd)));
                    walks.push((HyperSlot::D(j), Walk::new(format!("d[{name}]"), config.hyper_proposal_sd)));
                }
            }
            walks.push((HyperSlot::E, Walk::new("e".into(), config.hyper_proposal_sd)));
            walks.push((HyperSlot::F, Walk::new("f".into(), config.hyper_proposal_sd)));
            if config.spatial {
                walks.push((HyperSlot::G, Walk::new("g".into(), config.hyper_proposal_sd)));
                walks.push((HyperSlot::H, Walk::new("h".into(), config.hyper_proposal_sd)));
            }
        }
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Sampler {
            fx,
            state,
            global_rng: RngStream::new(config.seed, 0),
            patient_rngs,
            walks,
            rho_tries: 0,
            rho_accepts: 0,
            pool,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState {
        &mut self.state
    }

    pub fn config(&self) -> &FitConfig {
        &self.fx.config
    }

    pub fn car(&self) -> &CarStructure {
        &self.fx.car
    }

    /// Current proposal sd of each adaptive hyperparameter walk.
    pub fn proposal_sds(&self) -> Vec<(String, f64)> {
        self.walks.iter().map(|(_, w)| (w.name.clone(), w.log_sd.exp())).collect()
    }

    fn with_patient<T>(
        &mut self,
        i: usize,
        f: impl FnOnce(&Fixed, &Globals, &mut PatientState, &mut RngStream) -> T,
    ) -> T {
        let ModelState {
            patients,
            a,
            b,
            alpha,
            beta,
            hyper,
        } = &mut self.state;
        let g = Globals {
            a,
            b,
            alpha,
            beta,
            hyper,
        };
        f(&self.fx, &g, &mut patients[i], &mut self.patient_rngs[i])
    }

    pub fn update_binary_latents(&mut self, i: usize) {
        self.with_patient(i, |fx, g, p, rng| fx.update_binary_latents(g, i, p, rng))
    }

    pub fn update_missing_latents(&mut self, i: usize) {
        self.with_patient(i, |fx, g, p, rng| fx.update_missing_latents(g, i, p, rng))
    }

    pub fn update_mu(&mut self, i: usize) -> Result<()> {
        self.with_patient(i, |fx, g, p, rng| fx.update_mu(g, i, p, rng))
    }

    /// Per-patient σ²_ij draws (per-patient variant).
    pub fn update_sigma2(&mut self, i: usize) -> Result<()> {
        self.with_patient(i, |fx, g, p, rng| fx.update_sigma2(g, i, p, rng))
    }

    pub fn update_tau2(&mut self, i: usize) -> Result<()> {
        self.with_patient(i, |fx, g, p, rng| fx.update_tau2(g, i, p, rng))
    }

    /// Per-patient ρ step; returns whether the proposal was accepted.
    pub fn update_rho(&mut self, i: usize) -> Result<bool> {
        if !self.fx.config.spatial {
            return Ok(false);
        }
        self.with_patient(i, |fx, g, p, rng| fx.update_rho(g, i, p, rng))
    }

    /// Full conditional `(shape, scale)` of the pooled σ²_j.
    pub fn pooled_sigma2_conditional(&self, j: usize) -> (f64, f64) {
        let (g, patients) = Globals::of(&self.state);
        let prior = self.fx.config.prior;
        let mut shape = prior.u;
        let mut scale = prior.v;
        for (i, p) in patients.iter().enumerate() {
            shape += self.fx.observed[i].len() as f64 / 2.0;
            scale += self.fx.ssr(&g, i, p, j) / 2.0;
        }
        (shape, scale)
    }

    /// Shared σ²_j, τ², ρ draws (pooled variant).
    pub fn update_pooled_variances(&mut self) -> Result<()> {
        let prior = self.fx.config.prior;
        for j in 0..self.fx.continuous.len() {
            if !self.fx.continuous[j] {
                continue;
            }
            let (shape, scale) = self.pooled_sigma2_conditional(j);
            let s2 = inverse_gamma_draw(shape, scale, &mut self.global_rng).map_err(|e| block_error("sigma2", e))?;
            for p in &mut self.state.patients {
                p.sigma2[j] = s2;
            }
        }
        let residuals = self.all_car_residuals();
        let rho = self.state.patients[0].rho;
        let quad: f64 = residuals.iter().map(|r| self.fx.car.quadratic_form_unchecked(r, rho)).sum();
        let n_total = (self.state.patients.len() * self.fx.data.n_sites()) as f64;
        let tau2 = inverse_gamma_draw(n_total / 2.0 + prior.u, quad / 2.0 + prior.v, &mut self.global_rng)
            .map_err(|e| block_error("tau2", e))?;
        for p in &mut self.state.patients {
            p.tau2 = tau2;
        }
        Ok(())
    }

    /// Shared ρ step (pooled variant) under a flat prior.
    pub fn update_pooled_rho(&mut self) -> Result<bool> {
        let residuals = self.all_car_residuals();
        let tau2 = self.state.patients[0].tau2;
        let n = residuals.len() as f64;
        let car = &self.fx.car;
        let target = |rho: f64| -> Result<f64> {
            let ld = car.log_det(rho)?;
            let quad: f64 = residuals.iter().map(|r| car.quadratic_form_unchecked(r, rho)).sum();
            Ok(0.5 * n * ld - quad / (2.0 * tau2))
        };
        let current = self.state.patients[0].rho;
        let (accepted, rho) = rho_step(current, self.fx.config.rho_concentration, target, &mut self.global_rng)?;
        for p in &mut self.state.patients {
            p.rho = rho;
        }
        Ok(accepted)
    }

    fn all_car_residuals(&self) -> Vec<Vec<f64>> {
        let (g, patients) = Globals::of(&self.state);
        patients
            .iter()
            .enumerate()
            .map(|(i, p)| self.fx.car_residual(&g, i, p))
            .collect()
    }

    /// Bivariate `(a_j, b_j)` updates, with `b` pinned for the reference
    /// response, and the missingness pair against the augmented latents.
    pub fn update_coefficients(&mut self) -> Result<()> {
        let w2 = self.fx.config.prior.w.powi(2);
        for j in 0..self.fx.continuous.len() {
            let mut xtx = [[1.0 / w2, 0.0], [0.0, 1.0 / w2]];
            let mut xty = [0.0, 0.0];
            for (i, p) in self.state.patients.iter().enumerate() {
                let s2 = if self.fx.continuous[j] { p.sigma2[j] } else { 1.0 };
                for &s in &self.fx.observed[i] {
                    let y = self.fx.working_response(p, i, j, s);
                    let m = p.mu[s];
                    xtx[0][0] += 1.0 / s2;
                    xtx[0][1] += m / s2;
                    xtx[1][1] += m * m / s2;
                    xty[0] += y / s2;
                    xty[1] += y * m / s2;
                }
            }
            if j == self.fx.reference {
                // b_ref = 1: regress y − μ on the intercept alone.
                let prec = xtx[0][0];
                let shift = xty[0] - xtx[0][1];
                let sd = prec.powf(-0.5);
                self.state.a[j + 1] = shift / prec + sd * self.global_rng.sample::<f64, _>(rand_distr::StandardNormal);
            } else {
                let (a, b) = draw_bivariate(xtx, xty, &mut self.global_rng, "coefficients")?;
                self.state.a[j + 1] = a;
                self.state.b[j + 1] = b;
            }
        }
        if self.fx.config.informative_missing {
            let mut xtx = [[1.0 / w2, 0.0], [0.0, 1.0 / w2]];
            let mut xty = [0.0, 0.0];
            for p in &self.state.patients {
                for u in 0..self.fx.units.n_rows() {
                    let z = self.fx.units.average(u, &p.mu);
                    let y = p.miss_latent[u];
                    xtx[0][0] += 1.0;
                    xtx[0][1] += z;
                    xtx[1][1] += z * z;
                    xty[0] += y;
                    xty[1] += y * z;
                }
            }
            let (a, b) = draw_bivariate(xtx, xty, &mut self.global_rng, "missingness")?;
            self.state.a[0] = a;
            self.state.b[0] = b;
        }
        Ok(())
    }

    pub fn update_alpha(&mut self) -> Result<()> {
        let q = self.fx.data.n_spatial();
        if q == 0 {
            return Ok(());
        }
        let w = self.fx.data.w();
        let w2 = self.fx.config.prior.w.powi(2);
        let mut prec = DMatrix::<f64>::identity(q, q) / w2;
        let mut shift = DVector::<f64>::zeros(q);
        for (i, p) in self.state.patients.iter().enumerate() {
            let xb: f64 = self.fx.data.x().row(i).iter().zip(&self.state.beta).map(|(x, b)| x * b).sum();
            prec += (&self.fx.wmw - &self.fx.wdw * p.rho) / p.tau2;
            let target: Vec<f64> = p.mu.iter().map(|m| m - xb).collect();
            let qv = self.fx.car.precision_mul(p.rho, &target);
            for k in 0..q {
                shift[k] += w.column(k).iter().zip(&qv).map(|(a, b)| a * b).sum::<f64>() / p.tau2;
            }
        }
        let chol = factor_spd(prec, "alpha")?;
        let draw = sample_from_factor(&chol, &shift, &mut self.global_rng);
        self.state.alpha = draw.iter().copied().collect();
        Ok(())
    }

    pub fn update_beta(&mut self) -> Result<()> {
        let p_count = self.fx.data.n_covariates();
        if p_count == 0 {
            return Ok(());
        }
        let (prec, shift) = self.beta_conditional();
        let chol = factor_spd(prec, "beta")?;
        let draw = sample_from_factor(&chol, &shift, &mut self.global_rng);
        self.state.beta = draw.iter().copied().collect();
        Ok(())
    }

    /// Canonical parameters `(precision, shift)` of β given everything else.
    pub fn beta_conditional(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p_count = self.fx.data.n_covariates();
        let w2 = self.fx.config.prior.w.powi(2);
        let mut prec = DMatrix::<f64>::identity(p_count, p_count) / w2;
        let mut shift = DVector::<f64>::zeros(p_count);
        let w = self.fx.data.w();
        for (i, p) in self.state.patients.iter().enumerate() {
            let x = self.fx.data.x().row(i).transpose();
            let ones = self.fx.car.ones_precision_ones(p.rho) / p.tau2;
            prec += &x * x.transpose() * ones;
            let target: Vec<f64> = (0..p.mu.len())
                .map(|s| p.mu[s] - w.row(s).iter().zip(&self.state.alpha).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            shift += x * (self.fx.car.ones_precision_dot(p.rho, &target) / p.tau2);
        }
        (prec, shift)
    }

    /// Log-scale random-walk Metropolis on every hyperparameter, adapting the
    /// proposal sd toward the target acceptance while `adapt` is set.
    pub fn update_hyperparameters(&mut self, iter: usize, adapt: bool) -> Result<()> {
        let prior = self.fx.config.prior;
        let target = self.fx.config.target_acceptance;
        let gain = (iter.max(1) as f64).powf(-0.6);
        for k in 0..self.walks.len() {
            let slot = self.walks[k].0;
            let current = hyper_get(&self.state.hyper, slot);
            let sd = self.walks[k].1.log_sd.exp();
            let step: f64 = self.global_rng.sample(rand_distr::StandardNormal);
            let proposal = current * (sd * step).exp();
            let log_ratio = self.hyper_log_target(slot, proposal, prior.u, prior.v)
                - self.hyper_log_target(slot, current, prior.u, prior.v);
            let u: f64 = self.global_rng.random();
            let accepted = log_ratio.is_finite() && u.ln() < log_ratio;
            if accepted {
                hyper_set(&mut self.state.hyper, slot, proposal);
            }
            let walk = &mut self.walks[k].1;
            if adapt {
                walk.log_sd += gain * (f64::from(u8::from(accepted)) - target);
            } else {
                walk.tries += 1;
                walk.accepts += usize::from(accepted);
            }
        }
        Ok(())
    }

    /// Log posterior of one hyperparameter on the log scale (including the
    /// Jacobian), up to a constant.
    fn hyper_log_target(&self, slot: HyperSlot, value: f64, u: f64, v: f64) -> f64 {
        if !(value > 0.0 && value.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let mut h = self.state.hyper.clone();
        hyper_set(&mut h, slot, value);
        let patients = &self.state.patients;
        let lik: f64 = match slot {
            HyperSlot::C(j) | HyperSlot::D(j) => patients
                .iter()
                .map(|p| logpdf::gamma(1.0 / p.sigma2[j], h.c[j], h.d[j]))
                .sum(),
            HyperSlot::E | HyperSlot::F => patients.iter().map(|p| logpdf::gamma(1.0 / p.tau2, h.e, h.f)).sum(),
            HyperSlot::G | HyperSlot::H => patients.iter().map(|p| logpdf::beta(p.rho, h.g, h.h)).sum(),
        };
        lik + logpdf::gamma(value, u, v) + value.ln()
    }

    /// Per-patient phase of a sweep, run on the worker pool when configured.
    fn patient_phase(&mut self) -> Result<()> {
        let ModelState {
            patients,
            a,
            b,
            alpha,
            beta,
            hyper,
        } = &mut self.state;
        let g = Globals {
            a,
            b,
            alpha,
            beta,
            hyper,
        };
        let fx = &self.fx;
        let rngs = &mut self.patient_rngs;
        let results: Vec<Result<Option<bool>>> = match &self.pool {
            Some(pool) => pool.install(|| {
                patients
                    .par_iter_mut()
                    .zip(rngs.par_iter_mut())
                    .enumerate()
                    .map(|(i, (p, rng))| fx.patient_sweep(&g, i, p, rng))
                    .collect()
            }),
            None => patients
                .iter_mut()
                .zip(rngs.iter_mut())
                .enumerate()
                .map(|(i, (p, rng))| fx.patient_sweep(&g, i, p, rng))
                .collect(),
        };
        for r in results {
            if let Some(acc) = r? {
                self.rho_tries += 1;
                self.rho_accepts += usize::from(acc);
            }
        }
        Ok(())
    }

    /// One full sweep. `iter` is 1-based; acceptance counts only accrue
    /// after burn-in, and adaptation only happens during it.
    pub fn sweep(&mut self, iter: usize) -> Result<()> {
        let in_burn_in = iter <= self.fx.config.burn_in;
        let (t0, a0) = (self.rho_tries, self.rho_accepts);
        self.patient_phase().map_err(|e| e.at_iteration(iter))?;
        let fixed = self.fx.config.fixed;
        if self.fx.pooled() {
            if !fixed.variances {
                self.update_pooled_variances().map_err(|e| e.at_iteration(iter))?;
            }
            if self.fx.config.spatial && !fixed.rho {
                let acc = self.update_pooled_rho().map_err(|e| e.at_iteration(iter))?;
                self.rho_tries += 1;
                self.rho_accepts += usize::from(acc);
            }
        }
        if in_burn_in {
            self.rho_tries = t0;
            self.rho_accepts = a0;
        }
        if !fixed.coefficients {
            self.update_coefficients().map_err(|e| e.at_iteration(iter))?;
        }
        if !fixed.alpha {
            self.update_alpha().map_err(|e| e.at_iteration(iter))?;
        }
        if !fixed.beta {
            self.update_beta().map_err(|e| e.at_iteration(iter))?;
        }
        self.update_hyperparameters(iter, in_burn_in).map_err(|e| e.at_iteration(iter))?;
        Ok(())
    }

    /// Deviance `−2 log p(y | μ, θ)` at the current state.
    pub fn deviance(&self) -> f64 {
        self.fx.deviance(&self.state)
    }

    /// Names of the scalar parameters recorded each retained iteration.
    pub fn parameter_names(&self) -> Vec<String> {
        let data = self.fx.data;
        let cfg = &self.fx.config;
        let resp = data.responses().names();
        let pids = data.patient_ids();
        let mut names: Vec<String> = data.covariate_names().iter().map(|c| format!("beta[{c}]")).collect();
        names.extend(data.spatial_names().iter().map(|c| format!("alpha[{c}]")));
        if cfg.informative_missing {
            names.push("a[missing]".into());
            names.push("b[missing]".into());
        }
        names.extend(resp.iter().map(|r| format!("a[{r}]")));
        for (j, r) in resp.iter().enumerate() {
            if j != self.fx.reference {
                names.push(format!("b[{r}]"));
            }
        }
        match cfg.pooling {
            VariancePooling::Pooled => {
                for (j, r) in resp.iter().enumerate() {
                    if self.fx.continuous[j] {
                        names.push(format!("sigma2[{r}]"));
                    }
                }
                names.push("tau2".into());
                if cfg.spatial {
                    names.push("rho".into());
                }
            }
            VariancePooling::PerPatient => {
                for (j, r) in resp.iter().enumerate() {
                    if self.fx.continuous[j] {
                        names.extend(pids.iter().map(|p| format!("sigma2[{r},{p}]")));
                    }
                }
                names.extend(pids.iter().map(|p| format!("tau2[{p}]")));
                if cfg.spatial {
                    names.extend(pids.iter().map(|p| format!("rho[{p}]")));
                }
                for (j, r) in resp.iter().enumerate() {
                    if self.fx.continuous[j] {
                        names.push(format!("c[{r}]"));
                        names.push(format!("d[{r}]"));
                    }
                }
                names.extend(["e", "f"].map(String::from));
                if cfg.spatial {
                    names.extend(["g", "h"].map(String::from));
                }
            }
        }
        names
    }

    /// Current values in [`Sampler::parameter_names`] order.
    pub fn parameter_values(&self) -> Vec<f64> {
        let s = &self.state;
        let cfg = &self.fx.config;
        let j_count = self.fx.continuous.len();
        let mut v = s.beta.clone();
        v.extend(&s.alpha);
        if cfg.informative_missing {
            v.push(s.a[0]);
            v.push(s.b[0]);
        }
        v.extend((0..j_count).map(|j| s.a[j + 1]));
        v.extend((0..j_count).filter(|&j| j != self.fx.reference).map(|j| s.b[j + 1]));
        let p0 = &s.patients[0];
        match cfg.pooling {
            VariancePooling::Pooled => {
                v.extend((0..j_count).filter(|&j| self.fx.continuous[j]).map(|j| p0.sigma2[j]));
                v.push(p0.tau2);
                if cfg.spatial {
                    v.push(p0.rho);
                }
            }
            VariancePooling::PerPatient => {
                for j in (0..j_count).filter(|&j| self.fx.continuous[j]) {
                    v.extend(s.patients.iter().map(|p| p.sigma2[j]));
                }
                v.extend(s.patients.iter().map(|p| p.tau2));
                if cfg.spatial {
                    v.extend(s.patients.iter().map(|p| p.rho));
                }
                for j in (0..j_count).filter(|&j| self.fx.continuous[j]) {
                    v.push(s.hyper.c[j]);
                    v.push(s.hyper.d[j]);
                }
                v.push(s.hyper.e);
                v.push(s.hyper.f);
                if cfg.spatial {
                    v.push(s.hyper.g);
                    v.push(s.hyper.h);
                }
            }
        }
        v
    }

    /// Run `n_iter` sweeps and summarize the retained draws.
    pub fn run(mut self) -> Result<ChainOutput> {
        let cfg = self.fx.config.clone();
        let names = self.parameter_names();
        let n = self.state.patients.len();
        let s_count = self.fx.data.n_sites();
        let mut iterations = Vec::with_capacity(cfg.n_retained());
        let mut draws = Vec::with_capacity(cfg.n_retained());
        let mut deviance = Vec::with_capacity(cfg.n_iter);
        let mut mu_sum = vec![vec![0.0; s_count]; n];
        let mut mu_sq = vec![vec![0.0; s_count]; n];
        for iter in 1..=cfg.n_iter {
            self.sweep(iter)?;
            let dev = self.deviance();
            if !dev.is_finite() {
                return Err(Error::numerical("deviance", format!("non-finite deviance {dev}")).at_iteration(iter));
            }
            deviance.push(dev);
            if cfg.is_retained(iter) {
                iterations.push(iter);
                draws.push(self.parameter_values());
                for (i, p) in self.state.patients.iter().enumerate() {
                    for (s, m) in p.mu.iter().enumerate() {
                        mu_sum[i][s] += m;
                        mu_sq[i][s] += m * m;
                    }
                }
            }
        }
        let k = iterations.len() as f64;
        let mu = mu_sum
            .iter()
            .zip(&mu_sq)
            .map(|(sum, sq)| {
                let mean: Vec<f64> = sum.iter().map(|v| v / k).collect();
                let sd = sq
                    .iter()
                    .zip(&mean)
                    .map(|(q, m)| if k > 1.0 { ((q - k * m * m) / (k - 1.0)).max(0.0).sqrt() } else { 0.0 })
                    .collect();
                MuSummary { mean, sd }
            })
            .collect();
        let mut acceptance = Vec::new();
        if cfg.spatial && self.rho_tries > 0 {
            acceptance.push(("rho".to_string(), self.rho_accepts as f64 / self.rho_tries as f64));
        }
        for (_, w) in &self.walks {
            if w.tries > 0 {
                acceptance.push((w.name.clone(), w.accepts as f64 / w.tries as f64));
            }
        }
        Ok(ChainOutput::new(names, iterations, draws, deviance, mu, acceptance))
    }
}

fn hyper_get(h: &Hyper, slot: HyperSlot) -> f64 {
    match slot {
        HyperSlot::C(j) => h.c[j],
        HyperSlot::D(j) => h.d[j],
        HyperSlot::E => h.e,
        HyperSlot::F => h.f,
        HyperSlot::G => h.g,
        HyperSlot::H => h.h,
    }
}

fn hyper_set(h: &mut Hyper, slot: HyperSlot, value: f64) {
    match slot {
        HyperSlot::C(j) => h.c[j] = value,
        HyperSlot::D(j) => h.d[j] = value,
        HyperSlot::E => h.e = value,
        HyperSlot::F => h.f = value,
        HyperSlot::G => h.g = value,
        HyperSlot::H => h.h = value,
    }
}

/// Draw `(x₀, x₁) ~ N(P^{-1} b, P^{-1})` for a 2 × 2 precision `P`.
fn draw_bivariate<R: Rng + ?Sized>(p: [[f64; 2]; 2], b: [f64; 2], rng: &mut R, block: &str) -> Result<(f64, f64)> {
    let l00 = p[0][0].sqrt();
    let l10 = p[0][1] / l00;
    let d = p[1][1] - l10 * l10;
    if !(p[0][0] > 0.0) || !(d > 0.0) || !d.is_finite() {
        return Err(Error::numerical(block, format!("2 × 2 precision not positive definite: {p:?}")));
    }
    let l11 = d.sqrt();
    // Forward solve, add noise, back solve.
    let y0 = b[0] / l00 + rng.sample::<f64, _>(rand_distr::StandardNormal);
    let y1 = (b[1] - l10 * b[0] / l00) / l11 + rng.sample::<f64, _>(rand_distr::StandardNormal);
    let x1 = y1 / l11;
    let x0 = (y0 - l10 * x1) / l00;
    Ok((x0, x1))
}

fn check_state_shape(state: &ModelState, data: &Dataset) -> Result<()> {
    let j = data.n_responses();
    let ok = state.patients.len() == data.n_patients()
        && state.a.len() == j + 1
        && state.b.len() == j + 1
        && state.alpha.len() == data.n_spatial()
        && state.beta.len() == data.n_covariates()
        && state.hyper.c.len() == j
        && state.hyper.d.len() == j
        && state.patients.iter().all(|p| {
            p.mu.len() == data.n_sites()
                && p.sigma2.len() == j
                && p.latent.len() == j
                && p.miss_latent.len() == data.n_units()
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Config("initial state does not match the dataset dimensions".into()))
    }
}

/// Data-driven starting point.
pub fn initial_state(data: &Dataset, config: &FitConfig) -> ModelState {
    let n = data.n_patients();
    let s_count = data.n_sites();
    let j_count = data.n_responses();
    let n_units = data.n_units();
    let mut a = vec![0.0; j_count + 1];
    let b = vec![1.0; j_count + 1];
    let mut sigma2 = vec![1.0; j_count];
    for j in 0..j_count {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| data.y(j, i).iter().copied().filter(|v| !v.is_nan()))
            .collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        match data.responses().kind(j) {
            ResponseKind::Continuous => {
                a[j + 1] = mean;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                sigma2[j] = if var > 0.0 { var / 2.0 } else { 1.0 };
            }
            ResponseKind::Binary => a[j + 1] = normal_quantile(mean.clamp(0.01, 0.99)),
        }
    }
    let missing = (0..n)
        .flat_map(|i| (0..n_units).map(move |u| (i, u)))
        .filter(|&(i, u)| !data.unit_present(i, u))
        .count() as f64
        / (n * n_units) as f64;
    let mut b = b;
    if config.informative_missing {
        a[0] = normal_quantile(missing.clamp(0.01, 0.99));
        b[0] = 0.0;
    } else {
        a[0] = 0.0;
        b[0] = 0.0;
    }
    let rho = if config.spatial { 0.5 } else { 0.0 };
    let patients = (0..n)
        .map(|i| PatientState {
            mu: vec![0.0; s_count],
            sigma2: sigma2.clone(),
            tau2: 1.0,
            rho,
            latent: (0..j_count)
                .map(|j| match data.responses().kind(j) {
                    ResponseKind::Continuous => Vec::new(),
                    ResponseKind::Binary => data
                        .y(j, i)
                        .iter()
                        .map(|v| if v.is_nan() { 0.0 } else if *v > 0.5 { 0.5 } else { -0.5 })
                        .collect(),
                })
                .collect(),
            miss_latent: (0..n_units)
                .map(|u| if data.unit_present(i, u) { -0.5 } else { 0.5 })
                .collect(),
        })
        .collect();
    ModelState {
        patients,
        a,
        b,
        alpha: vec![0.0; data.n_spatial()],
        beta: vec![0.0; data.n_covariates()],
        hyper: Hyper {
            c: vec![1.0; j_count],
            d: vec![1.0; j_count],
            e: 1.0,
            f: 1.0,
            g: 1.0,
            h: 1.0,
        },
    }
}

/// Fit one chain, routing the mean-regression family to its closed form.
pub fn run_chain(data: &Dataset, config: &FitConfig) -> Result<ChainOutput> {
    match config.family {
        ModelFamily::MeanRegression => fit_mean_regression(data, config),
        ModelFamily::LatentFactor => Sampler::new(data, config)?.run(),
    }
}

