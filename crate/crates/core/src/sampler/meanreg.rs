//! Model 1: conjugate regression of each patient's mean observed response.

use nalgebra::{DMatrix, DVector};

use crate::carfield::{factor_spd, sample_from_factor};
use crate::error::{Error, Result};
use crate::model::{Dataset, PriorConfig};
use crate::stochastic::{inverse_gamma_draw, logpdf, RngStream};

use super::chain::ChainOutput;
use super::config::FitConfig;

/// Normal-inverse-gamma posterior of `ȳ_i ~ N(β₀ + x_i'β, σ²)` under
/// `(β₀, β) | σ² ~ N(0, σ² w² I)` and `σ² ~ InvGamma(u, v)`.
#[derive(Debug, Clone)]
pub struct MeanRegressionPosterior {
    /// Posterior mean of `(β₀, β)`.
    pub mean: DVector<f64>,
    /// Posterior precision factor Λ, with `Cov(β | σ²) = σ² Λ^{-1}`.
    pub precision: DMatrix<f64>,
    pub shape: f64,
    pub scale: f64,
    /// Ids of patients dropped for having no observed sites.
    pub excluded: Vec<String>,
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
}

impl MeanRegressionPosterior {
    /// Marginal posterior covariance of `(β₀, β)` (multivariate t).
    pub fn marginal_covariance(&self) -> Result<DMatrix<f64>> {
        if self.shape <= 1.0 {
            return Err(Error::Domain("marginal covariance needs shape > 1".into()));
        }
        let inv = factor_spd(self.precision.clone(), "mean_regression")?.inverse();
        Ok(inv * (self.scale / (self.shape - 1.0)))
    }
}

fn single_response(data: &Dataset) -> Result<usize> {
    if data.n_responses() != 1 || !data.responses().is_continuous(0) {
        return Err(Error::Unsupported(
            "mean regression needs exactly one continuous response".into(),
        ));
    }
    Ok(0)
}

pub fn mean_regression_posterior(data: &Dataset, prior: &PriorConfig) -> Result<MeanRegressionPosterior> {
    prior.validate()?;
    let j = single_response(data)?;
    let p = data.n_covariates();
    let mut rows = Vec::new();
    let mut ybar = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..data.n_patients() {
        let obs: Vec<f64> = data.y(j, i).iter().copied().filter(|v| !v.is_nan()).collect();
        if obs.is_empty() {
            excluded.push(data.patient_ids()[i].clone());
            continue;
        }
        ybar.push(obs.iter().sum::<f64>() / obs.len() as f64);
        let mut row = vec![1.0];
        row.extend(data.x().row(i).iter());
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Precondition("no patient has observed data".into()));
    }
    let x = DMatrix::from_fn(n, p + 1, |r, c| rows[r][c]);
    let y = DVector::from_vec(ybar);
    let precision = x.transpose() * &x + DMatrix::identity(p + 1, p + 1) / (prior.w * prior.w);
    let chol = factor_spd(precision.clone(), "mean_regression")?;
    let mean = chol.solve(&(x.transpose() * &y));
    let shape = prior.u + n as f64 / 2.0;
    let scale = prior.v + 0.5 * (y.dot(&y) - mean.dot(&(&precision * &mean)));
    Ok(MeanRegressionPosterior {
        mean,
        precision,
        shape,
        scale,
        excluded,
        design: x,
        response: y,
    })
}

/// Exact independent posterior draws of the mean-regression model, summarized
/// in the same format as the latent factor sampler.
pub fn fit_mean_regression(data: &Dataset, config: &FitConfig) -> Result<ChainOutput> {
    config.validate()?;
    let post = mean_regression_posterior(data, &config.prior)?;
    let mut rng = RngStream::new(config.seed, 0);
    let chol = factor_spd(post.precision.clone(), "mean_regression")?;
    let zero = DVector::zeros(post.mean.len());

    let resp = &data.responses().names()[0];
    let mut names = vec![format!("a[{resp}]")];
    names.extend(data.covariate_names().iter().map(|c| format!("beta[{c}]")));
    names.push(format!("sigma2[{resp}]"));

    let mut iterations = Vec::new();
    let mut draws = Vec::new();
    let mut deviance = Vec::with_capacity(config.n_iter);
    for iter in 1..=config.n_iter {
        let sigma2 = inverse_gamma_draw(post.shape, post.scale, &mut rng)?;
        let noise = sample_from_factor(&chol, &zero, &mut rng);
        let coef = &post.mean + noise * sigma2.sqrt();
        let fitted = &post.design * &coef;
        let dev: f64 = fitted
            .iter()
            .zip(post.response.iter())
            .map(|(f, y)| -2.0 * logpdf::normal(*y, *f, sigma2))
            .sum();
        deviance.push(dev);
        if config.is_retained(iter) {
            let mut row: Vec<f64> = coef.iter().copied().collect();
            row.push(sigma2);
            iterations.push(iter);
            draws.push(row);
        }
    }
    let mut out = ChainOutput::new(names, iterations, draws, deviance, Vec::new(), Vec::new());
    out.notes = post
        .excluded
        .iter()
        .map(|id| format!("patient `{id}` excluded: no observed sites"))
        .collect();
    Ok(out)
}
