//! Simulation study: replicate datasets per design, fit model variants 1–5,
//! and aggregate power, MSE and relative bias.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::diagnostics::study_metrics;
use crate::error::{Error, Result};
use crate::model::{generate_dataset, DesignSpec};
use crate::sampler::{fmt_f64, run_chain, ChainOutput, FitConfig, ParamSummary};
use crate::stochastic::{mix_seed, RngStream};

const DATA_TAG: u64 = 0xDA7A;
const FIT_TAG: u64 = 0xF17;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    pub designs: Vec<u8>,
    pub models: Vec<u8>,
    pub replicates: usize,
    pub seed: u64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Concurrent (design, model, replicate) jobs.
    pub threads: usize,
}

impl StudyPlan {
    /// 20 replicates of 4000 iterations with 1000 burn-in.
    pub fn desk_scale(designs: Vec<u8>, models: Vec<u8>, seed: u64) -> Self {
        StudyPlan {
            designs,
            models,
            replicates: 20,
            seed,
            n_iter: 4000,
            burn_in: 1000,
            thin: 1,
            threads: 1,
        }
    }

    /// 100 replicates of 20000 iterations with 5000 burn-in.
    pub fn paper_scale(designs: Vec<u8>, models: Vec<u8>, seed: u64) -> Self {
        StudyPlan {
            replicates: 100,
            n_iter: 20_000,
            burn_in: 5_000,
            ..Self::desk_scale(designs, models, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for &d in &self.designs {
            DesignSpec::standard(d)?;
        }
        for &m in &self.models {
            FitConfig::for_model(m)?;
        }
        self.fit_config(1, 0)?.validate()
    }

    /// Chain configuration for one fit.
    pub fn fit_config(&self, model: u8, seed: u64) -> Result<FitConfig> {
        Ok(FitConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            ..FitConfig::for_model(model)?
        })
    }

    /// Seed of replicate r's dataset under design d; independent of models.
    pub fn data_seed(&self, design: u8, replicate: usize) -> u64 {
        mix_seed(self.seed, &[DATA_TAG, u64::from(design), replicate as u64])
    }

    pub fn fit_seed(&self, design: u8, replicate: usize, model: u8) -> u64 {
        mix_seed(
            self.seed,
            &[FIT_TAG, u64::from(design), replicate as u64, u64::from(model)],
        )
    }
}

/// One (design, model) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub design: u8,
    pub model: u8,
    /// Replicates that fitted successfully.
    pub replicates: usize,
    pub failures: usize,
    /// Power for b₀; absent for models without a missingness model.
    pub power_b0: Option<f64>,
    pub power: Vec<f64>,
    /// 100 × MSE over all coefficients.
    pub mse100: f64,
    pub rel_bias: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub n_coefficients: usize,
    pub rows: Vec<MetricsRow>,
}

/// Outcome of a study: the table plus failure messages.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub table: MetricsTable,
    pub failures: Vec<String>,
}

struct Job {
    design: u8,
    model: u8,
    replicate: usize,
}

/// β and b₀ summaries from one replicate fit.
struct Fitted {
    beta: Vec<ParamSummary>,
    b0: Option<ParamSummary>,
}

fn extract(chain: &ChainOutput, p: usize) -> Result<Fitted> {
    let beta = (1..=p)
        .map(|k| {
            chain
                .summary(&format!("beta[x{k}]"))
                .cloned()
                .ok_or_else(|| Error::Precondition(format!("fit has no beta[x{k}]")))
        })
        .collect::<Result<_>>()?;
    Ok(Fitted {
        beta,
        b0: chain.summary("b[missing]").cloned(),
    })
}

fn run_job(plan: &StudyPlan, design: &DesignSpec, job: &Job) -> Result<Fitted> {
    let mut rng = RngStream::new(plan.data_seed(job.design, job.replicate), 0);
    let sim = generate_dataset(design, &mut rng)?;
    let cfg = plan.fit_config(job.model, plan.fit_seed(job.design, job.replicate, job.model))?;
    let chain = run_chain(&sim.dataset, &cfg)?;
    extract(&chain, design.beta.len())
}

/// Run every (design, model, replicate) job and aggregate per cell. Rows are
/// ordered by design then model, as listed in the plan.
pub fn run_study(plan: &StudyPlan) -> Result<StudyResult> {
    plan.validate()?;
    let designs: Vec<DesignSpec> = plan
        .designs
        .iter()
        .map(|&d| DesignSpec::standard(d))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &d in &plan.designs {
        for &m in &plan.models {
            for r in 0..plan.replicates {
                jobs.push(Job {
                    design: d,
                    model: m,
                    replicate: r,
                });
            }
        }
    }
    let design_of = |d: u8| &designs[plan.designs.iter().position(|&x| x == d).expect("design in plan")];
    let work = |job: &Job| run_job(plan, design_of(job.design), job);
    let results: Vec<Result<Fitted>> = if plan.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(plan.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?
            .install(|| jobs.par_iter().map(work).collect())
    } else {
        jobs.iter().map(work).collect()
    };

    let n_coefficients = designs.first().map_or(6, |d| d.beta.len());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut results = results.into_iter().zip(&jobs);
    for &d in &plan.designs {
        let spec = design_of(d);
        for &m in &plan.models {
            let mut betas = Vec::new();
            let mut b0s = Vec::new();
            let mut failed = 0;
            for _ in 0..plan.replicates {
                let (res, job) = results.next().expect("one result per job");
                match res {
                    Ok(f) => {
                        betas.push(f.beta);
                        if let Some(b0) = f.b0 {
                            b0s.push(b0);
                        }
                    }
                    Err(e) => {
                        failed += 1;
                        failures.push(format!(
                            "design {} model {} replicate {}: {e}",
                            job.design, job.model, job.replicate
                        ));
                    }
                }
            }
            let row = if betas.is_empty() {
                MetricsRow {
                    design: d,
                    model: m,
                    replicates: 0,
                    failures: failed,
                    power_b0: None,
                    power: vec![f64::NAN; spec.beta.len()],
                    mse100: f64::NAN,
                    rel_bias: vec![None; spec.beta.len()],
                }
            } else {
                let metrics = study_metrics(&betas, &spec.beta)?;
                let power_b0 = (!b0s.is_empty())
                    .then(|| b0s.iter().filter(|s| s.excludes_zero()).count() as f64 / b0s.len() as f64);
                MetricsRow {
                    design: d,
                    model: m,
                    replicates: metrics.replicates,
                    failures: failed,
                    power_b0,
                    power: metrics.power,
                    mse100: 100.0 * metrics.mse,
                    rel_bias: metrics.rel_bias,
                }
            };
            rows.push(row);
        }
    }
    Ok(StudyResult {
        table: MetricsTable { n_coefficients, rows },
        failures,
    })
}

impl MetricsTable {
    pub fn row(&self, design: u8, model: u8) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.design == design && r.model == model)
    }

    fn header(&self) -> Vec<String> {
        let p = self.n_coefficients;
        let mut h: Vec<String> = ["design", "model", "replicates", "failures", "power_b0"]
            .map(String::from)
            .to_vec();
        h.extend((1..=p).map(|k| format!("power_beta{k}")));
        h.push("mse100".into());
        h.extend((1..=p).map(|k| format!("relbias_beta{k}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.design.to_string(),
                r.model.to_string(),
                r.replicates.to_string(),
                r.failures.to_string(),
                r.power_b0.map(fmt_f64).unwrap_or_default(),
            ];
            rec.extend(r.power.iter().map(|v| fmt_f64(*v)));
            rec.push(fmt_f64(r.mse100));
            rec.extend(r.rel_bias.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a table written by [`MetricsTable::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(input);
        let headers = rdr.headers()?.clone();
        let n_power = headers.iter().filter(|h| h.starts_with("power_beta")).count();
        let table = MetricsTable {
            n_coefficients: n_power,
            rows: Vec::new(),
        };
        if headers.iter().ne(table.header().iter().map(String::as_str)) {
            return Err(Error::validation(Some(1), "unexpected metrics header"));
        }
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let bad = |i: usize| Error::validation(Some(line), format!("bad value in column `{}`", &headers[i]));
            let float = |i: usize| -> Result<f64> { field(i).parse().map_err(|_| bad(i)) };
            let opt = |i: usize| -> Result<Option<f64>> {
                match field(i) {
                    "" => Ok(None),
                    _ => float(i).map(Some),
                }
            };
            let p = n_power;
            rows.push(MetricsRow {
                design: field(0).parse().map_err(|_| bad(0))?,
                model: field(1).parse().map_err(|_| bad(1))?,
                replicates: field(2).parse().map_err(|_| bad(2))?,
                failures: field(3).parse().map_err(|_| bad(3))?,
                power_b0: opt(4)?,
                power: (5..5 + p).map(float).collect::<Result<_>>()?,
                mse100: float(5 + p)?,
                rel_bias: (6 + p..6 + 2 * p).map(opt).collect::<Result<_>>()?,
            });
        }
        Ok(MetricsTable { rows, ..table })
    }

    /// Plain-text table in the layout of the published results: b₀ power,
    /// β powers, 100·MSE and the relative bias of the last coefficient.
    pub fn to_text(&self) -> String {
        let p = self.n_coefficients;
        let mut s = String::new();
        let _ = write!(s, "{:>6} {:>5} {:>6}", "design", "model", "b0");
        for k in 1..=p {
            let _ = write!(s, " {:>6}", format!("beta{k}"));
        }
        let _ = writeln!(s, " {:>8} {:>9}", "100*MSE", format!("RelBias{p}"));
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let _ = write!(s, "{:>6} {:>5} {:>6}", r.design, r.model, cell(r.power_b0));
            for v in &r.power {
                let _ = write!(s, " {:>6}", format!("{v:.2}"));
            }
            let last = r.rel_bias.last().copied().flatten();
            let _ = write!(s, " {:>8} {:>9}", format!("{:.3}", r.mse100), last.map_or("-".into(), |x| format!("{x:.3}")));
            if r.failures > 0 {
                let _ = write!(s, "  ({} failed)", r.failures);
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plan_gives_header_only_csv() {
        let plan = StudyPlan::desk_scale(vec![], vec![], 1);
        let res = run_study(&plan).unwrap();
        assert!(res.table.rows.is_empty());
        let mut buf = Vec::new();
        res.table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(MetricsTable::read_csv(text.as_bytes()).unwrap(), res.table);
    }

    #[test]
    fn data_seed_ignores_model() {
        let plan = StudyPlan::desk_scale(vec![1], vec![1, 2], 9);
        assert_ne!(plan.data_seed(1, 0), plan.data_seed(1, 1));
        assert_ne!(plan.fit_seed(1, 0, 1), plan.fit_seed(1, 0, 2));
    }

    #[test]
    fn single_cell_round_trips() {
        let plan = StudyPlan {
            replicates: 2,
            n_iter: 200,
            burn_in: 50,
            ..StudyPlan::desk_scale(vec![4], vec![4], 3)
        };
        let res = run_study(&plan).unwrap();
        assert_eq!(res.table.rows.len(), 1);
        let row = &res.table.rows[0];
        assert_eq!(row.replicates + row.failures, 2);
        assert!(row.power_b0.is_some());
        assert!(row.rel_bias[0].is_none() && row.rel_bias[5].is_some());
        let mut buf = Vec::new();
        res.table.write_csv(&mut buf).unwrap();
        assert_eq!(MetricsTable::read_csv(buf.as_slice()).unwrap(), res.table);
        assert!(res.table.to_text().contains("RelBias6"));
    }
}
