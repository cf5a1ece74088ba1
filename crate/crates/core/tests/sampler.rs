mod common;

use common::*;
use lsfm::carfield::PrecisionGaussian;
use lsfm::model::{generate_dataset, DesignSpec, ResponseKind};
use lsfm::mouthgraph::GridVariant;
use lsfm::sampler::{run_chain, FitConfig, Sampler, VariancePooling};
use lsfm::stochastic::{normal_cdf, RngStream};
use nalgebra::{DMatrix, DVector};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One patient on the matching graph with a continuous and a binary response.
fn two_response_patient(binary: f64, absent_site: Option<usize>) -> lsfm::model::Dataset {
    let mut cont = vec![1.0; 6];
    let mut bin = vec![binary; 6];
    if let Some(s) = absent_site {
        cont[s] = f64::NAN;
        bin[s] = f64::NAN;
    }
    dataset(
        matching_graph(),
        &[ResponseKind::Continuous, ResponseKind::Binary],
        DMatrix::from_element(1, 1, 1.0),
        vec![cont, bin],
    )
}

#[test]
fn binary_latents_follow_truncated_normals() {
    let data = two_response_patient(1.0, None);
    let cfg = pooled_config(false);
    let mut s = Sampler::new(&data, &cfg).unwrap();
    s.state_mut().a[2] = 0.0;
    s.state_mut().patients[0].mu = vec![0.0; 6];
    let mut draws = Vec::new();
    for _ in 0..20_000 {
        s.update_binary_latents(0);
        draws.extend_from_slice(&s.state().patients[0].latent[1]);
    }
    assert!(draws.iter().all(|&z| z > 0.0));
    let se = (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (draws.len() as f64).sqrt();
    assert!((mean(&draws) - SQRT_2_OVER_PI).abs() < 3.0 * se, "mean {}", mean(&draws));

    let data = two_response_patient(0.0, None);
    let mut s = Sampler::new(&data, &cfg).unwrap();
    s.state_mut().a[2] = -5.0;
    s.state_mut().patients[0].mu = vec![0.0; 6];
    let mut draws = Vec::new();
    for _ in 0..5_000 {
        s.update_binary_latents(0);
        draws.extend_from_slice(&s.state().patients[0].latent[1]);
    }
    assert!(draws.iter().all(|&z| z < 0.0));
    assert!((mean(&draws) + 5.0).abs() < 0.03);
    assert!((variance(&draws) - 1.0).abs() < 0.05);
}

#[test]
fn latents_on_absent_sites_are_untouched() {
    let data = two_response_patient(1.0, Some(3));
    let mut s = Sampler::new(&data, &pooled_config(false)).unwrap();
    s.state_mut().patients[0].latent[1][3] = 123.0;
    for _ in 0..10 {
        s.update_binary_latents(0);
    }
    assert_eq!(s.state().patients[0].latent[1][3], 123.0);
    assert!(s.state().patients[0].latent[1][0] > 0.0);
}

fn missingness_dataset() -> lsfm::model::Dataset {
    let mut y = vec![1.0; 12];
    for s in [1, 4, 7, 8] {
        y[s] = f64::NAN;
    }
    gaussian(
        matching_graph(),
        DMatrix::from_column_slice(2, 1, &[0.3, -0.2]),
        y,
    )
}

#[test]
fn missingness_latents_match_plug_in_truncated_normals() {
    let data = missingness_dataset();
    let mut s = Sampler::new(&data, &pooled_config(true)).unwrap();
    s.state_mut().a[0] = -1.0;
    s.state_mut().b[0] = 0.7;
    for p in &mut s.state_mut().patients {
        p.mu = vec![0.0; 6];
    }
    let (mut present, mut absent) = (Vec::new(), Vec::new());
    for _ in 0..20_000 {
        for i in 0..2 {
            s.update_missing_latents(i);
            for u in 0..6 {
                let z = s.state().patients[i].miss_latent[u];
                if data.unit_present(i, u) {
                    assert!(z < 0.0);
                    present.push(z);
                } else {
                    assert!(z > 0.0);
                    absent.push(z);
                }
            }
        }
    }
    // N(-1, 1) restricted to (-inf, 0) and (0, inf).
    let below = -1.0 - phi(-1.0) / normal_cdf(1.0);
    let above = -1.0 + phi(-1.0) / normal_cdf(-1.0);
    assert!((mean(&present) - below).abs() < 3.0 * (variance(&present) / present.len() as f64).sqrt());
    assert!((mean(&absent) - above).abs() < 3.0 * (variance(&absent) / absent.len() as f64).sqrt());
}

#[test]
fn missingness_update_is_a_no_op_without_the_missingness_model() {
    let data = missingness_dataset();
    let mut s = Sampler::new(&data, &pooled_config(false)).unwrap();
    let before = s.state().patients[0].miss_latent.clone();
    s.update_missing_latents(0);
    assert_eq!(s.state().patients[0].miss_latent, before);
    assert_eq!(s.state().b[0], 0.0);
    assert!(!s.parameter_names().iter().any(|n| n.contains("missing")));
}

fn mu_draws(data: &lsfm::model::Dataset, sigma2: f64, n: usize) -> Vec<Vec<f64>> {
    let mut s = Sampler::new(data, &pooled_config(false)).unwrap();
    let st = s.state_mut();
    set_covariance(st, 0.0, 1.0, sigma2);
    st.a[1] = 0.0;
    st.beta = vec![0.0; st.beta.len()];
    (0..n)
        .map(|_| {
            s.update_mu(0).unwrap();
            s.state().patients[0].mu.clone()
        })
        .collect()
}

#[test]
fn mu_conditional_is_normal_normal_conjugate() {
    let data = gaussian(matching_graph(), DMatrix::from_element(1, 1, 1.0), vec![2.0; 6]);
    let draws = mu_draws(&data, 1.0, 40_000);
    for site in 0..6 {
        let col: Vec<f64> = draws.iter().map(|d| d[site]).collect();
        let se = (0.5 / col.len() as f64).sqrt();
        assert!((mean(&col) - 1.0).abs() < 4.0 * se, "site {site}: {}", mean(&col));
        assert!((variance(&col) - 0.5).abs() < 0.02);
    }
}

#[test]
fn mu_conditional_reverts_to_prior_without_likelihood() {
    let prior_sd = 1.0;
    let data = gaussian(matching_graph(), DMatrix::from_element(1, 1, 1.0), vec![2.0; 6]);
    let draws = mu_draws(&data, 1e12, 20_000);
    let col: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    assert!(mean(&col).abs() < 4.0 * prior_sd / (col.len() as f64).sqrt());
    assert!((variance(&col) - 1.0).abs() < 0.05);
}

#[test]
fn mu_conditional_with_all_sites_missing_is_the_car_prior() {
    let graph = grid(1, 1, GridVariant::Grid1);
    let mut y = vec![1.0; 12];
    for v in &mut y[6..] {
        *v = f64::NAN;
    }
    let data = gaussian(graph, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), y);
    let mut s = Sampler::new(&data, &pooled_config(false)).unwrap();
    let st = s.state_mut();
    set_covariance(st, 0.6, 2.0, 1.0);
    st.beta = vec![0.7];
    let q_inv = car(&data).precision(0.6).unwrap().try_inverse().unwrap() * 2.0;
    let mut draws = Vec::new();
    for _ in 0..40_000 {
        s.update_mu(1).unwrap();
        draws.push(s.state().patients[1].mu.clone());
    }
    for site in [0, 2, 5] {
        let col: Vec<f64> = draws.iter().map(|d| d[site]).collect();
        let v = q_inv[(site, site)];
        assert!((mean(&col) - 0.7).abs() < 4.0 * (v / col.len() as f64).sqrt());
        assert!((variance(&col) / v - 1.0).abs() < 0.04);
    }
    let c01: Vec<f64> = draws.iter().map(|d| (d[0] - 0.7) * (d[1] - 0.7)).collect();
    assert!((mean(&c01) - q_inv[(0, 1)]).abs() < 0.05 * q_inv[(0, 0)]);
}

fn exact_fit_dataset(n: usize) -> (lsfm::model::Dataset, Vec<Vec<f64>>) {
    let graph = grid(1, 1, GridVariant::Grid1);
    let mus: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..6).map(|s| ((i * 7 + s * 3) % 5) as f64 * 0.3 - 0.4).collect())
        .collect();
    let y: Vec<f64> = mus.iter().flat_map(|m| m.iter().map(|v| 1.5 + v)).collect();
    (gaussian(graph, DMatrix::from_element(n, 1, 1.0), y), mus)
}

#[test]
fn pooled_error_variance_scale_is_the_prior_rate_at_zero_residuals() {
    let (data, mus) = exact_fit_dataset(4);
    let mut s = Sampler::new(&data, &pooled_config(false)).unwrap();
    let st = s.state_mut();
    st.a[1] = 1.5;
    st.b[1] = 1.0;
    for (p, m) in st.patients.iter_mut().zip(&mus) {
        p.mu = m.clone();
    }
    let (shape, scale) = s.pooled_sigma2_conditional(0);
    let prior = s.config().prior;
    assert_eq!(scale, prior.v);
    assert!((shape - (prior.u + 4.0 * 6.0 / 2.0)).abs() < 1e-12);
}

#[test]
fn per_patient_variances_have_inverse_gamma_moments() {
    let (data, mus) = exact_fit_dataset(1);
    let cfg = FitConfig::for_model(3).unwrap();
    let mut s = Sampler::new(&data, &cfg).unwrap();
    let st = s.state_mut();
    st.a[1] = 1.5;
    st.hyper.c = vec![3.0];
    st.hyper.d = vec![2.0];
    st.hyper.e = 4.0;
    st.hyper.f = 3.0;
    st.beta = vec![0.0];
    st.patients[0].mu = mus[0].clone();
    st.patients[0].rho = 0.5;
    let (mut sig, mut tau) = (Vec::new(), Vec::new());
    for _ in 0..40_000 {
        s.update_sigma2(0).unwrap();
        sig.push(s.state().patients[0].sigma2[0]);
    }
    // IG(S/2 + c, d) with S = 6: mean 2/5, variance 4/(25·4).
    assert!((mean(&sig) - 0.4).abs() < 4.0 * (0.04 / sig.len() as f64).sqrt());
    assert!((variance(&sig) - 0.04).abs() < 0.004);

    // τ² ~ IG(S/2 + e, r'Q r/2 + f) with r = μ − 0.
    let r = &mus[0];
    let qf = car(&data).quadratic_form(r, 0.5).unwrap();
    let (shape, scale) = (3.0 + 4.0, qf / 2.0 + 3.0);
    for _ in 0..40_000 {
        s.update_tau2(0).unwrap();
        tau.push(s.state().patients[0].tau2);
    }
    let m = scale / (shape - 1.0);
    let v = m * m / (shape - 2.0);
    assert!((mean(&tau) - m).abs() < 4.0 * (v / tau.len() as f64).sqrt());
}

#[test]
fn pooled_rho_recovers_strong_spatial_association() {
    let graph = grid(7, 1, GridVariant::Grid1);
    let n = 40;
    let sites = graph.n_sites();
    let mut data_y = Vec::new();
    let mut mus = Vec::new();
    let car_true = lsfm::carfield::CarStructure::new(&graph);
    let q = car_true.precision(0.9).unwrap();
    let mut rng = RngStream::new(11, 0);
    for _ in 0..n {
        let mu = PrecisionGaussian::new(q.clone(), DVector::zeros(sites)).unwrap().sample(&mut rng).unwrap();
        data_y.extend(mu.iter().map(|v| v + 1.0));
        mus.push(mu.as_slice().to_vec());
    }
    let data = gaussian(graph, DMatrix::from_element(n, 1, 1.0), data_y);
    let cfg = only(pooled_config(false), &["rho"]);
    let mut s = Sampler::new(&data, &cfg).unwrap();
    let st = s.state_mut();
    set_covariance(st, 0.5, 1.0, 1.0);
    st.beta = vec![0.0];
    for (p, m) in st.patients.iter_mut().zip(&mus) {
        p.mu = m.clone();
    }
    let mut draws = Vec::new();
    let mut accepted = 0;
    for t in 0..3_000 {
        accepted += usize::from(s.update_pooled_rho().unwrap());
        if t >= 500 {
            draws.push(s.state().patients[0].rho);
        }
    }
    assert!(s.state().patients.iter().all(|p| p.rho == s.state().patients[0].rho));
    assert!((mean(&draws) - 0.9).abs() < 0.05, "rho mean {}", mean(&draws));
    assert!(accepted > 300 && accepted < 2_900);
}

#[test]
fn spatial_off_pins_rho_at_zero() {
    let sim = generate_dataset(&DesignSpec::standard(1).unwrap(), &mut RngStream::new(3, 0)).unwrap();
    let cfg = FitConfig {
        spatial: false,
        n_iter: 60,
        burn_in: 20,
        ..FitConfig::for_model(3).unwrap()
    };
    let mut s = Sampler::new(&sim.dataset, &cfg).unwrap();
    assert!(!s.update_rho(0).unwrap());
    let chain = run_chain(&sim.dataset, &cfg).unwrap();
    for name in chain.names.iter().filter(|n| n.starts_with("rho")) {
        assert!(chain.column(name).unwrap().iter().all(|&r| r == 0.0));
    }
    assert!(chain.acceptance("g").is_none());
}

#[test]
fn coefficients_with_a_zero_latent_field() {
    let graph = grid(1, 1, GridVariant::Grid1);
    let n = 30;
    let y1: Vec<f64> = (0..n * 6).map(|k| 2.0 + ((k * 37) % 11) as f64 / 10.0 - 0.5).collect();
    let y2: Vec<f64> = (0..n * 6).map(|k| -1.0 + ((k * 17) % 7) as f64 / 7.0 - 0.4).collect();
    let data = dataset(
        graph,
        &[ResponseKind::Continuous, ResponseKind::Continuous],
        DMatrix::from_element(n, 1, 1.0),
        vec![y1.clone(), y2.clone()],
    );
    let cfg = only(pooled_config(false), &["coefficients"]);
    let mut s = Sampler::new(&data, &cfg).unwrap();
    let st = s.state_mut();
    set_covariance(st, 0.5, 1.0, 0.3);
    for p in &mut st.patients {
        p.mu = vec![0.0; 6];
    }
    let (mut a1, mut a2, mut b2) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..4_000 {
        s.update_coefficients().unwrap();
        let st = s.state();
        assert_eq!(st.b_resp(0), 1.0);
        a1.push(st.a_resp(0));
        a2.push(st.a_resp(1));
        b2.push(st.b_resp(1));
    }
    assert!((mean(&a1) - mean(&y1)).abs() < 0.01);
    assert!((mean(&a2) - mean(&y2)).abs() < 0.01);
    // The slope has a zero regressor: its conditional is the N(0, w²) prior.
    let w = s.config().prior.w;
    assert!(mean(&b2).abs() < 4.0 * w / (b2.len() as f64).sqrt());
    assert!((variance(&b2).sqrt() / w - 1.0).abs() < 0.05);
}

#[test]
fn alpha_update_without_spatial_covariates_is_a_no_op() {
    let data = gaussian(matching_graph(), DMatrix::from_element(1, 1, 1.0), vec![2.0; 6]);
    let mut s = Sampler::new(&data, &pooled_config(false)).unwrap();
    s.update_alpha().unwrap();
    assert!(s.state().alpha.is_empty());
}

#[test]
fn hyperparameter_walks_settle_near_target_acceptance() {
    let sim = generate_dataset(&DesignSpec::standard(3).unwrap(), &mut RngStream::new(5, 0)).unwrap();
    let cfg = FitConfig {
        n_iter: 3_000,
        burn_in: 1_000,
        seed: 9,
        ..FitConfig::for_model(5).unwrap()
    };
    let chain = run_chain(&sim.dataset, &cfg).unwrap();
    for group in ["c[y]", "d[y]", "e", "f", "g", "h"] {
        let rate = chain.acceptance(group).unwrap();
        assert!((0.25..=0.55).contains(&rate), "{group}: {rate}");
    }
    let rho = chain.acceptance("rho").unwrap();
    assert!(rho > 0.1 && rho < 0.95);
    assert!(chain.retained_deviance().iter().all(|d| d.is_finite()));
}

#[test]
fn parameter_names_follow_the_model_variant() {
    let sim = generate_dataset(&DesignSpec::standard(4).unwrap(), &mut RngStream::new(2, 0)).unwrap();
    let data = &sim.dataset;
    let pooled = Sampler::new(data, &FitConfig::for_model(4).unwrap()).unwrap().parameter_names();
    for name in ["beta[x1]", "a[missing]", "b[missing]", "a[y]", "sigma2[y]", "tau2", "rho"] {
        assert!(pooled.iter().any(|n| n == name), "missing {name}");
    }
    assert!(!pooled.iter().any(|n| n == "b[y]"));
    let full = Sampler::new(data, &FitConfig::for_model(5).unwrap()).unwrap().parameter_names();
    let pid = &data.patient_ids()[0];
    for name in [format!("sigma2[y,{pid}]"), format!("tau2[{pid}]"), format!("rho[{pid}]"), "e".into(), "h".into()] {
        assert!(full.contains(&name), "missing {name}");
    }
    assert_eq!(
        FitConfig { pooling: VariancePooling::Pooled, ..FitConfig::for_model(5).unwrap() }.model_number(),
        Some(4)
    );
}
