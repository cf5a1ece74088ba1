#![allow(dead_code)]

use std::sync::Arc;

use lsfm::carfield::CarStructure;
use lsfm::model::{Dataset, DatasetParts, Granularity, ModelState, ResponseKind, ResponseSpec};
use lsfm::mouthgraph::{GridVariant, MouthGraph};
use lsfm::sampler::{initial_state, FitConfig, FixedBlocks, VariancePooling};
use nalgebra::DMatrix;

/// Six sites paired as (0,1), (2,3), (4,5): every degree is 1, so Q(0) = I.
pub fn matching_graph() -> MouthGraph {
    MouthGraph::build(1, 1, GridVariant::Grid1)
        .unwrap()
        .with_edges(&[(0, 1), (2, 3), (4, 5)])
        .unwrap()
}

pub fn grid(teeth: usize, quadrants: usize, grid: GridVariant) -> MouthGraph {
    MouthGraph::build(teeth, quadrants, grid).unwrap()
}

/// Site-granularity dataset. `y[j]` holds N × S values with NaN at absent
/// sites; presence is read off the first response.
pub fn dataset(graph: MouthGraph, kinds: &[ResponseKind], x: DMatrix<f64>, y: Vec<Vec<f64>>) -> Dataset {
    let n = x.nrows();
    let s = graph.n_sites();
    let names: Vec<String> = (0..kinds.len()).map(|j| format!("r{}", j + 1)).collect();
    let unit_present = (0..n * s).map(|k| !y[0][k].is_nan()).collect();
    Dataset::new(DatasetParts {
        graph: Arc::new(graph),
        granularity: Granularity::Site,
        responses: ResponseSpec::new(names, kinds.to_vec(), 0).unwrap(),
        patient_ids: (0..n).map(|i| format!("p{}", i + 1)).collect(),
        covariate_names: (0..x.ncols()).map(|k| format!("x{}", k + 1)).collect(),
        x,
        spatial_names: Vec::new(),
        w: DMatrix::zeros(s, 0),
        y,
        unit_present,
    })
    .unwrap()
}

pub fn gaussian(graph: MouthGraph, x: DMatrix<f64>, y: Vec<f64>) -> Dataset {
    dataset(graph, &[ResponseKind::Continuous], x, vec![y])
}

/// Everything fixed except the listed blocks.
pub fn only(config: FitConfig, free: &[&str]) -> FitConfig {
    let has = |b: &str| free.contains(&b);
    FitConfig {
        fixed: FixedBlocks {
            latents: !has("latents"),
            mu: !has("mu"),
            variances: !has("variances"),
            rho: !has("rho"),
            coefficients: !has("coefficients"),
            alpha: !has("alpha"),
            beta: !has("beta"),
            hyper: !has("hyper"),
        },
        ..config
    }
}

pub fn pooled_config(informative: bool) -> FitConfig {
    FitConfig {
        informative_missing: informative,
        pooling: VariancePooling::Pooled,
        ..FitConfig::default()
    }
}

/// Set every patient's covariance parameters.
pub fn set_covariance(state: &mut ModelState, rho: f64, tau2: f64, sigma2: f64) {
    for p in &mut state.patients {
        p.rho = rho;
        p.tau2 = tau2;
        for v in &mut p.sigma2 {
            *v = sigma2;
        }
    }
}

pub fn state_for(data: &Dataset, config: &FitConfig) -> ModelState {
    initial_state(data, config)
}

pub fn car(data: &Dataset) -> CarStructure {
    CarStructure::new(data.graph())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Monte Carlo standard error of the mean of a correlated series by
/// non-overlapping batch means.
pub fn batch_se(v: &[f64], batches: usize) -> f64 {
    let len = v.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&v[b * len..(b + 1) * len])).collect();
    (variance(&means) / batches as f64).sqrt()
}
