//! Influence weights for β, DIC and simulation-study metrics.
//!
//! With Gaussian responses, complete data and no spatial covariates, the
//! posterior of β given the covariance parameters is a weighted regression of
//! per-patient scalars `z_i` with weights
//! `w_i = τ_i^{-2} 1'[Q − Q(δ_i I + Q)^{-1} Q] 1`, where
//! `δ_i = τ_i² Σ_j b_j² / σ_ij²`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::carfield::{factor_spd, BandSpd, CarStructure};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelState};
use crate::sampler::{fmt_f64, ChainOutput, ParamSummary};

/// `(δI + Q)^{-1} Q 1`, which is both the k-vector numerator and the
/// ingredient of w.
fn smoothed_ones(rho: f64, delta: f64, car: &CarStructure) -> Result<Vec<f64>> {
    let n = car.n_sites();
    let mut a = BandSpd::zeros(n, car.bandwidth());
    a.add_car(car, rho, 1.0);
    for s in 0..n {
        a.add(s, s, delta);
    }
    let q1: Vec<f64> = car.degrees().iter().map(|m| (1.0 - rho) * m).collect();
    Ok(a.factor("influence")?.solve(&q1))
}

fn check_influence_args(rho: f64, tau2: f64, delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1), got {rho}")));
    }
    if !(tau2 > 0.0) {
        return Err(Error::Domain(format!("tau2 must be positive, got {tau2}")));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("delta must be non-negative, got {delta}")));
    }
    Ok(())
}

/// Patient weight `w = τ^{-2} δ 1'(δI + Q)^{-1} Q 1`.
pub fn influence_weight(rho: f64, tau2: f64, delta: f64, car: &CarStructure) -> Result<f64> {
    check_influence_args(rho, tau2, delta)?;
    if delta == 0.0 {
        return Ok(0.0);
    }
    let u = smoothed_ones(rho, delta, car)?;
    Ok(delta * u.iter().sum::<f64>() / tau2)
}

/// Site weights `k = 1'Q(δI + Q)^{-1} / w`, unscaled.
pub fn site_weights(rho: f64, tau2: f64, delta: f64, car: &CarStructure) -> Result<Vec<f64>> {
    check_influence_args(rho, tau2, delta)?;
    if delta == 0.0 {
        return Err(Error::Domain("site weights are undefined when delta = 0".into()));
    }
    let u = smoothed_ones(rho, delta, car)?;
    let w = delta * u.iter().sum::<f64>() / tau2;
    Ok(u.iter().map(|v| v / w).collect())
}

/// Rescale weights to sum to their length.
pub fn scale_to_length(k: &[f64]) -> Vec<f64> {
    let total: f64 = k.iter().sum();
    let n = k.len() as f64;
    k.iter().map(|v| v * n / total).collect()
}

/// `δ_i = τ_i² Σ_j b_j² / σ_ij²` over continuous responses.
pub fn signal_to_noise(state: &ModelState, data: &Dataset, i: usize) -> f64 {
    let p = &state.patients[i];
    (0..data.n_responses())
        .map(|j| state.b_resp(j).powi(2) / p.sigma2[j])
        .sum::<f64>()
        * p.tau2
}

fn require_influence_setting(data: &Dataset, i: Option<usize>) -> Result<()> {
    if !data.all_continuous() {
        return Err(Error::Precondition(
            "influence weights assume every response is Gaussian".into(),
        ));
    }
    if data.n_spatial() > 0 {
        return Err(Error::Precondition(
            "influence weights assume no site-level covariates".into(),
        ));
    }
    let patients: Vec<usize> = match i {
        Some(i) => vec![i],
        None => (0..data.n_patients()).collect(),
    };
    for i in patients {
        if data.observed_count(i) != data.n_sites() {
            return Err(Error::Precondition(format!(
                "influence weights assume no missing teeth, but patient `{}` has {} of {} sites",
                data.patient_ids()[i],
                data.observed_count(i),
                data.n_sites()
            )));
        }
    }
    Ok(())
}

/// Collapsed response `z_i` and its site weights `k_i`.
pub fn collapsed_response(
    data: &Dataset,
    i: usize,
    state: &ModelState,
    car: &CarStructure,
) -> Result<(f64, Vec<f64>)> {
    require_influence_setting(data, Some(i))?;
    let p = &state.patients[i];
    let delta = signal_to_noise(state, data, i);
    let k = site_weights(p.rho, p.tau2, delta, car)?;
    let mut z = 0.0;
    for j in 0..data.n_responses() {
        let y = data.y(j, i);
        let a = state.a_resp(j);
        let inner: f64 = k.iter().zip(y).map(|(k, y)| k * (y - a)).sum();
        z += state.b_resp(j) / p.sigma2[j] * inner;
    }
    Ok((z, k))
}

/// Posterior `(mean, covariance)` of β under a flat prior, integrating out μ
/// with every other parameter held at `state`.
pub fn conjugate_beta_posterior(
    data: &Dataset,
    state: &ModelState,
    car: &CarStructure,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    require_influence_setting(data, None)?;
    let p = data.n_covariates();
    let mut info = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    for i in 0..data.n_patients() {
        let pt = &state.patients[i];
        let delta = signal_to_noise(state, data, i);
        let w = influence_weight(pt.rho, pt.tau2, delta, car)?;
        if w == 0.0 {
            continue;
        }
        let (z, _) = collapsed_response(data, i, state, car)?;
        let x = data.x().row(i).transpose();
        info += &x * x.transpose() * w;
        score += x * (w * z);
    }
    let chol = factor_spd(info, "conjugate_beta_posterior").map_err(|_| {
        Error::numerical(
            "conjugate_beta_posterior",
            "Σ w_i x_i x_i' is rank deficient; β is not identified",
        )
    })?;
    let cov = chol.inverse();
    let mean = &cov * score;
    Ok((mean, cov))
}

/// Per-patient and per-site influence summary.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub patient_ids: Vec<String>,
    pub w: Vec<f64>,
    /// `None` where the patient has missing sites.
    pub z: Vec<Option<f64>>,
    pub delta: Vec<f64>,
    /// Site weights per patient, scaled to sum to S.
    pub k: Vec<Vec<f64>>,
    /// Set when evaluated at posterior means with only the reference
    /// response's error variance, rather than at exact parameter values.
    pub heuristic: bool,
}

impl InfluenceReport {
    /// Exact report at given parameter values (all patients complete,
    /// Gaussian responses).
    pub fn at_state(data: &Dataset, state: &ModelState, car: &CarStructure) -> Result<Self> {
        require_influence_setting(data, None)?;
        let mut report = InfluenceReport {
            patient_ids: data.patient_ids().to_vec(),
            w: Vec::new(),
            z: Vec::new(),
            delta: Vec::new(),
            k: Vec::new(),
            heuristic: false,
        };
        for i in 0..data.n_patients() {
            let p = &state.patients[i];
            let delta = signal_to_noise(state, data, i);
            let (z, k) = collapsed_response(data, i, state, car)?;
            report.w.push(influence_weight(p.rho, p.tau2, delta, car)?);
            report.z.push(Some(z));
            report.delta.push(delta);
            report.k.push(scale_to_length(&k));
        }
        Ok(report)
    }

    /// Approximate report from a fitted chain: posterior means of ρ_i and
    /// τ_i², and `δ_i = τ̂_i² / σ̂_i²` of the reference response. `z_i` is
    /// reported only for complete patients when every response is Gaussian.
    pub fn from_chain(chain: &ChainOutput, data: &Dataset) -> Result<Self> {
        let car = CarStructure::new(data.graph());
        let reference = data.responses().reference();
        let ref_name = &data.responses().names()[reference];
        let mean_of = |name: &str| -> Result<f64> {
            chain
                .summary(name)
                .map(|s| s.mean)
                .ok_or_else(|| Error::Precondition(format!("chain has no parameter `{name}`")))
        };
        let mut report = InfluenceReport {
            patient_ids: data.patient_ids().to_vec(),
            w: Vec::new(),
            z: Vec::new(),
            delta: Vec::new(),
            k: Vec::new(),
            heuristic: true,
        };
        let gaussian = data.all_continuous() && data.n_spatial() == 0;
        for (i, pid) in data.patient_ids().iter().enumerate() {
            let tau2 = mean_of(&format!("tau2[{pid}]")).or_else(|_| mean_of("tau2"))?;
            let rho = mean_of(&format!("rho[{pid}]"))
                .or_else(|_| mean_of("rho"))
                .unwrap_or(0.0);
            let sigma2 =
                mean_of(&format!("sigma2[{ref_name},{pid}]")).or_else(|_| mean_of(&format!("sigma2[{ref_name}]")))?;
            let delta = tau2 / sigma2;
            let w = influence_weight(rho, tau2, delta, &car)?;
            let k = site_weights(rho, tau2, delta, &car)?;
            let z = if gaussian && data.observed_count(i) == data.n_sites() {
                let a = mean_of(&format!("a[{ref_name}]"))?;
                let y = data.y(reference, i);
                Some(k.iter().zip(y).map(|(k, y)| k * (y - a)).sum::<f64>() / sigma2)
            } else {
                None
            };
            report.w.push(w);
            report.z.push(z);
            report.delta.push(delta);
            report.k.push(scale_to_length(&k));
        }
        Ok(report)
    }

    /// `patient_id,w,z,delta`; z is blank where unavailable.
    pub fn write_patients_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient_id", "w", "z", "delta"])?;
        for i in 0..self.patient_ids.len() {
            w.write_record([
                self.patient_ids[i].clone(),
                fmt_f64(self.w[i]),
                self.z[i].map(fmt_f64).unwrap_or_default(),
                fmt_f64(self.delta[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `patient_id,site,k` with k scaled to sum to S per patient.
    pub fn write_sites_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient_id", "site", "k"])?;
        for (pid, k) in self.patient_ids.iter().zip(&self.k) {
            for (s, v) in k.iter().enumerate() {
                w.write_record([pid.clone(), s.to_string(), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Deviance information criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
}

/// DIC of a single-continuous-response fit without a missingness model,
/// with the deviance conditional on the latent field μ.
pub fn dic(chain: &ChainOutput, data: &Dataset) -> Result<Dic> {
    if data.n_responses() != 1 || !data.all_continuous() {
        return Err(Error::Unsupported(
            "DIC is defined here for a single continuous response only".into(),
        ));
    }
    if chain.index_of("a[missing]").is_some() {
        return Err(Error::Unsupported(
            "DIC does not cover fits with informative missingness".into(),
        ));
    }
    if chain.mu.len() != data.n_patients() {
        return Err(Error::Unsupported("DIC needs a latent-field fit".into()));
    }
    let devs = chain.retained_deviance();
    if devs.is_empty() {
        return Err(Error::Precondition("chain has no retained draws".into()));
    }
    let mean_deviance = devs.iter().sum::<f64>() / devs.len() as f64;

    let name = &data.responses().names()[0];
    let mean_of = |n: &str| chain.summary(n).map(|s| s.mean);
    let a = mean_of(&format!("a[{name}]"))
        .ok_or_else(|| Error::Precondition(format!("chain has no parameter `a[{name}]`")))?;
    let mut ll = 0.0;
    for (i, pid) in data.patient_ids().iter().enumerate() {
        let sigma2 = mean_of(&format!("sigma2[{name},{pid}]"))
            .or_else(|| mean_of(&format!("sigma2[{name}]")))
            .ok_or_else(|| Error::Precondition(format!("chain has no error variance for patient `{pid}`")))?;
        let y = data.y(0, i);
        let mu = &chain.mu[i].mean;
        for (s, v) in y.iter().enumerate() {
            if !v.is_nan() {
                ll += crate::stochastic::logpdf::normal(*v, a + mu[s], sigma2);
            }
        }
    }
    let at_mean = -2.0 * ll;
    let p_d = mean_deviance - at_mean;
    Ok(Dic {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
    })
}

/// Operating characteristics of β estimates over replicate fits.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyMetrics {
    /// Fraction of 95% intervals excluding zero, per coefficient.
    pub power: Vec<f64>,
    /// Mean over replicates and coefficients of the squared error.
    pub mse: f64,
    /// Mean relative error per coefficient; `None` for null coefficients.
    pub rel_bias: Vec<Option<f64>>,
    pub replicates: usize,
}

/// Summaries per replicate (`replicates[r][k]` is coefficient k) against the
/// true coefficients.
pub fn study_metrics(replicates: &[Vec<ParamSummary>], beta_true: &[f64]) -> Result<StudyMetrics> {
    let m = replicates.len();
    if m == 0 {
        return Err(Error::Precondition("need at least one replicate".into()));
    }
    let p = beta_true.len();
    if let Some(bad) = replicates.iter().find(|r| r.len() != p) {
        return Err(Error::Dimension {
            expected: p,
            got: bad.len(),
        });
    }
    let mf = m as f64;
    let mut power = vec![0.0; p];
    let mut bias = vec![0.0; p];
    let mut sq = 0.0;
    for rep in replicates {
        for (k, s) in rep.iter().enumerate() {
            if s.excludes_zero() {
                power[k] += 1.0 / mf;
            }
            let err = s.mean - beta_true[k];
            sq += err * err;
            bias[k] += err / mf;
        }
    }
    let rel_bias = bias
        .iter()
        .zip(beta_true)
        .map(|(b, t)| if *t == 0.0 { None } else { Some(b / t) })
        .collect();
    Ok(StudyMetrics {
        power,
        mse: sq / (mf * p as f64),
        rel_bias,
        replicates: m,
    })
}
