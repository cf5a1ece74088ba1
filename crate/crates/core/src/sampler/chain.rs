//! Retained draws and posterior summaries.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub acceptance_rate: Option<f64>,
}

impl ParamSummary {
    /// Does the 95% equal-tail interval exclude zero?
    pub fn excludes_zero(&self) -> bool {
        self.q025 > 0.0 || self.q975 < 0.0
    }

    pub fn from_draws(name: &str, draws: &[f64]) -> Self {
        let n = draws.len();
        let mean = if n == 0 { f64::NAN } else { draws.iter().sum::<f64>() / n as f64 };
        let sd = if n < 2 {
            0.0
        } else {
            (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        ParamSummary {
            name: name.to_string(),
            mean,
            sd,
            q025: quantile_sorted(&sorted, 0.025),
            q50: quantile_sorted(&sorted, 0.5),
            q975: quantile_sorted(&sorted, 0.975),
            acceptance_rate: None,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Per-site posterior mean and sd of μ for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct MuSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Scalar parameter names, one per column of `draws`.
    pub names: Vec<String>,
    /// Iteration number (1-based) of each retained draw.
    pub iterations: Vec<usize>,
    /// Retained draws, one row per retained iteration.
    pub draws: Vec<Vec<f64>>,
    /// Deviance at every iteration, burn-in included.
    pub deviance_trace: Vec<f64>,
    /// Posterior summaries of μ_i, one per patient (empty for mean regression).
    pub mu: Vec<MuSummary>,
    /// Post-burn-in Metropolis acceptance rates by parameter group.
    pub acceptance: Vec<(String, f64)>,
    pub summaries: Vec<ParamSummary>,
    /// Warnings raised while fitting (excluded patients and the like).
    pub notes: Vec<String>,
}

impl ChainOutput {
    pub fn new(
        names: Vec<String>,
        iterations: Vec<usize>,
        draws: Vec<Vec<f64>>,
        deviance_trace: Vec<f64>,
        mu: Vec<MuSummary>,
        acceptance: Vec<(String, f64)>,
    ) -> Self {
        let mut summaries: Vec<ParamSummary> = (0..names.len())
            .map(|k| {
                let col: Vec<f64> = draws.iter().map(|row| row[k]).collect();
                ParamSummary::from_draws(&names[k], &col)
            })
            .collect();
        for s in &mut summaries {
            s.acceptance_rate = acceptance_for(&acceptance, &s.name);
        }
        ChainOutput {
            names,
            iterations,
            draws,
            deviance_trace,
            mu,
            acceptance,
            summaries,
            notes: Vec::new(),
        }
    }

    pub fn n_retained(&self) -> usize {
        self.draws.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.index_of(name)?;
        Some(self.draws.iter().map(|row| row[k]).collect())
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Summaries whose names start with `prefix[`, in column order.
    pub fn group(&self, prefix: &str) -> Vec<&ParamSummary> {
        let tag = format!("{prefix}[");
        self.summaries.iter().filter(|s| s.name.starts_with(&tag)).collect()
    }

    /// Deviance of the retained iterations.
    pub fn retained_deviance(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .filter_map(|&it| self.deviance_trace.get(it - 1).copied())
            .collect()
    }

    pub fn acceptance(&self, group: &str) -> Option<f64> {
        self.acceptance.iter().find(|(g, _)| g == group).map(|(_, r)| *r)
    }

    /// Long-format CSV `iteration,parameter,value`.
    pub fn write_draws_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "parameter", "value"])?;
        for (it, row) in self.iterations.iter().zip(&self.draws) {
            for (name, v) in self.names.iter().zip(row) {
                w.write_record([it.to_string(), name.clone(), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `parameter,mean,sd,q2.5,q50,q97.5,acceptance_rate`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        write_summaries_csv(&self.summaries, out)
    }

    /// `iteration,deviance`.
    pub fn write_deviance_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "deviance"])?;
        for (k, d) in self.deviance_trace.iter().enumerate() {
            w.write_record([(k + 1).to_string(), fmt_f64(*d)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `patient,site,mean,sd` for the latent field.
    pub fn write_mu_csv<W: Write>(&self, patient_ids: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient_id", "site", "mean", "sd"])?;
        for (pid, m) in patient_ids.iter().zip(&self.mu) {
            for (s, (mean, sd)) in m.mean.iter().zip(&m.sd).enumerate() {
                w.write_record([pid.clone(), s.to_string(), fmt_f64(*mean), fmt_f64(*sd)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn acceptance_for(acceptance: &[(String, f64)], name: &str) -> Option<f64> {
    let group = name.split('[').next().unwrap_or(name);
    acceptance
        .iter()
        .find(|(g, _)| g == name || g == group)
        .map(|(_, r)| *r)
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub const SUMMARY_HEADER: [&str; 7] = ["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "acceptance_rate"];

pub fn write_summaries_csv<W: Write>(summaries: &[ParamSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.name.clone(),
            fmt_f64(s.mean),
            fmt_f64(s.sd),
            fmt_f64(s.q025),
            fmt_f64(s.q50),
            fmt_f64(s.q975),
            s.acceptance_rate.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a summary CSV written by [`write_summaries_csv`].
pub fn read_summaries_csv<R: Read>(input: R) -> Result<Vec<ParamSummary>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(SUMMARY_HEADER.iter().copied()) {
        return Err(Error::validation(Some(1), "unexpected summary header"));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::validation(Some(row), format!("column {} is not a number", SUMMARY_HEADER[i])))
        };
        let acc = match rec.get(6) {
            Some("") | None => None,
            Some(_) => Some(num(6)?),
        };
        out.push(ParamSummary {
            name: rec.get(0).unwrap_or_default().to_string(),
            mean: num(1)?,
            sd: num(2)?,
            q025: num(3)?,
            q50: num(4)?,
            q975: num(5)?,
            acceptance_rate: acc,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let xs: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile_sorted(&xs, 0.025), 2.5);
        assert_eq!(quantile_sorted(&xs, 0.5), 50.0);
        assert_eq!(quantile_sorted(&[3.0], 0.9), 3.0);
    }

    #[test]
    fn summaries_are_ordered_and_counted() {
        let draws: Vec<Vec<f64>> = (0..200).map(|k| vec![(k as f64 * 0.61).sin(), 2.0]).collect();
        let out = ChainOutput::new(
            vec!["beta[x1]".into(), "tau2".into()],
            (1..=200).collect(),
            draws,
            vec![0.0; 200],
            vec![],
            vec![("tau2".into(), 0.4)],
        );
        for s in &out.summaries {
            assert!(s.q025 <= s.q50 && s.q50 <= s.q975);
        }
        assert_eq!(out.n_retained(), 200);
        assert_eq!(out.summary("tau2").unwrap().sd, 0.0);
        assert_eq!(out.summary("tau2").unwrap().acceptance_rate, Some(0.4));
        assert_eq!(out.group("beta").len(), 1);
    }

    #[test]
    fn summary_csv_round_trip() {
        let out = ChainOutput::new(
            vec!["a[y]".into()],
            vec![1, 2, 3],
            vec![vec![0.1], vec![0.7], vec![-0.3]],
            vec![1.0, 2.0, 3.0],
            vec![],
            vec![],
        );
        let mut buf = Vec::new();
        out.write_summary_csv(&mut buf).unwrap();
        assert_eq!(read_summaries_csv(buf.as_slice()).unwrap(), out.summaries);
    }
}
