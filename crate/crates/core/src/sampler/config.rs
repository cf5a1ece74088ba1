use crate::error::{Error, Result};
use crate::model::{ModelState, PriorConfig};

/// How per-patient covariance parameters are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariancePooling {
    /// One σ_j², τ² and ρ shared by all patients.
    Pooled,
    /// σ_ij², τ_i², ρ_i per patient with hyperpriors.
    PerPatient,
}

impl VariancePooling {
    pub fn as_str(self) -> &'static str {
        match self {
            VariancePooling::Pooled => "pooled",
            VariancePooling::PerPatient => "per-patient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "pooled" => Ok(VariancePooling::Pooled),
            "per-patient" | "per_patient" => Ok(VariancePooling::PerPatient),
            other => Err(Error::Config(format!("unknown variance pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// Regression of patient-mean responses on covariates.
    MeanRegression,
    /// The full latent spatial factor model.
    LatentFactor,
}

/// Blocks held at their initial values instead of being sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedBlocks {
    pub latents: bool,
    pub mu: bool,
    pub variances: bool,
    pub rho: bool,
    pub coefficients: bool,
    pub alpha: bool,
    pub beta: bool,
    pub hyper: bool,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub family: ModelFamily,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Off pins every ρ at 0.
    pub spatial: bool,
    /// Off pins b₀ at 0 and drops the missingness model.
    pub informative_missing: bool,
    pub pooling: VariancePooling,
    pub prior: PriorConfig,
    /// Concentration of the Beta random-walk proposal for ρ.
    pub rho_concentration: f64,
    /// Initial log-scale proposal sd for hyperparameters.
    pub hyper_proposal_sd: f64,
    /// Acceptance rate targeted by burn-in adaptation.
    pub target_acceptance: f64,
    /// Worker threads for per-patient blocks; 1 runs inline.
    pub threads: usize,
    pub fixed: FixedBlocks,
    pub init: Option<ModelState>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            family: ModelFamily::LatentFactor,
            n_iter: 20_000,
            burn_in: 5_000,
            thin: 1,
            seed: 1,
            spatial: true,
            informative_missing: true,
            pooling: VariancePooling::PerPatient,
            prior: PriorConfig::default(),
            rho_concentration: 50.0,
            hyper_proposal_sd: 0.5,
            target_acceptance: 0.40,
            threads: 1,
            fixed: FixedBlocks::default(),
            init: None,
        }
    }
}

impl FitConfig {
    /// Configuration for simulation-study model 1–5:
    /// 1 = mean regression, 2 = spatial pooled, 3 = spatial per-patient,
    /// 4 = spatial pooled + informative missingness, 5 = full model.
    pub fn for_model(model: u8) -> Result<Self> {
        let base = FitConfig::default();
        let cfg = match model {
            1 => FitConfig {
                family: ModelFamily::MeanRegression,
                spatial: false,
                informative_missing: false,
                pooling: VariancePooling::Pooled,
                ..base
            },
            2 => FitConfig {
                informative_missing: false,
                pooling: VariancePooling::Pooled,
                ..base
            },
            3 => FitConfig {
                informative_missing: false,
                ..base
            },
            4 => FitConfig {
                pooling: VariancePooling::Pooled,
                ..base
            },
            5 => base,
            other => return Err(Error::Config(format!("model must be 1-5, got {other}"))),
        };
        Ok(cfg)
    }

    /// Inverse of [`FitConfig::for_model`], if the flags match one.
    pub fn model_number(&self) -> Option<u8> {
        if self.family == ModelFamily::MeanRegression {
            return Some(1);
        }
        if !self.spatial {
            return None;
        }
        match (self.pooling, self.informative_missing) {
            (VariancePooling::Pooled, false) => Some(2),
            (VariancePooling::PerPatient, false) => Some(3),
            (VariancePooling::Pooled, true) => Some(4),
            (VariancePooling::PerPatient, true) => Some(5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.rho_concentration > 0.0) {
            return Err(Error::Config("rho proposal concentration must be positive".into()));
        }
        if !(self.hyper_proposal_sd > 0.0) {
            return Err(Error::Config("hyperparameter proposal sd must be positive".into()));
        }
        if !(0.0 < self.target_acceptance && self.target_acceptance < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.prior.validate()
    }

    /// Number of retained draws.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn is_retained(&self, iter: usize) -> bool {
        iter > self.burn_in && (iter - self.burn_in) % self.thin == 0
    }
}
