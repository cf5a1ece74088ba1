//! Gaussian Markov random field numerics for the CAR prior with precision
//! `Q(ρ) = M − ρD`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mouthgraph::MouthGraph;

/// Upper end of the admissible ρ range; ρ = 1 is the improper intrinsic CAR.
pub const RHO_MAX: f64 = 1.0 - 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Clamp ρ into `[0, RHO_MAX]`.
pub fn clip_rho(rho: f64) -> f64 {
    rho.clamp(0.0, RHO_MAX)
}

/// Degree/adjacency data for one graph plus the cached spectrum of
/// `M^{-1/2} D M^{-1/2}`, which turns `log det Q(ρ)` into an O(S) sum.
#[derive(Debug, Clone)]
pub struct CarStructure {
    degrees: Vec<f64>,
    edges: Vec<(usize, usize)>,
    eigenvalues: Vec<f64>,
    log_degree_sum: f64,
    degree_sum: f64,
}

impl CarStructure {
    pub fn new(graph: &MouthGraph) -> Self {
        Self::from_parts(graph.degrees(), graph.edges().to_vec())
    }

    /// Build from degrees and an undirected edge list. Every degree must be
    /// the number of incident edges and at least one.
    pub fn from_parts(degrees: Vec<f64>, edges: Vec<(usize, usize)>) -> Self {
        let n = degrees.len();
        let inv_sqrt: Vec<f64> = degrees.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut normalized = DMatrix::<f64>::zeros(n, n);
        for &(a, b) in &edges {
            let v = inv_sqrt[a] * inv_sqrt[b];
            normalized[(a, b)] = v;
            normalized[(b, a)] = v;
        }
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(normalized).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| a.total_cmp(b));
        let log_degree_sum = degrees.iter().map(|m| m.ln()).sum();
        let degree_sum = degrees.iter().sum();
        CarStructure {
            degrees,
            edges,
            eigenvalues,
            log_degree_sum,
            degree_sum,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.degrees.len()
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Largest index distance between adjacent sites.
    pub fn bandwidth(&self) -> usize {
        self.edges.iter().map(|&(a, b)| a.abs_diff(b)).max().unwrap_or(0)
    }

    /// Eigenvalues of `M^{-1/2} D M^{-1/2}`, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn check_rho(rho: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Domain(format!("rho must lie in [0, 1), got {rho}")));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_sites() {
            return Err(Error::Dimension {
                expected: self.n_sites(),
                got: len,
            });
        }
        Ok(())
    }

    /// Dense `M − ρD`.
    pub fn precision(&self, rho: f64) -> Result<DMatrix<f64>> {
        Self::check_rho(rho)?;
        let mut q = DMatrix::zeros(self.n_sites(), self.n_sites());
        self.add_scaled_precision(rho, 1.0, &mut q);
        Ok(q)
    }

    /// `target += scale · (M − ρD)` without range checks on ρ.
    pub fn add_scaled_precision(&self, rho: f64, scale: f64, target: &mut DMatrix<f64>) {
        for (s, m) in self.degrees.iter().enumerate() {
            target[(s, s)] += scale * m;
        }
        let off = -scale * rho;
        for &(a, b) in &self.edges {
            target[(a, b)] += off;
            target[(b, a)] += off;
        }
    }

    /// Sparse product `(M − ρD) v`.
    pub fn precision_mul(&self, rho: f64, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.degrees.iter().zip(v).map(|(m, x)| m * x).collect();
        for &(a, b) in &self.edges {
            out[a] -= rho * v[b];
            out[b] -= rho * v[a];
        }
        out
    }

    /// `1'(M − ρD) = (1 − ρ) m'`, so `1'Q v = (1 − ρ) Σ m(s) v(s)`.
    pub fn ones_precision_dot(&self, rho: f64, v: &[f64]) -> f64 {
        (1.0 - rho) * self.degrees.iter().zip(v).map(|(m, x)| m * x).sum::<f64>()
    }

    /// `1'Q(ρ)1 = (1 − ρ) Σ m(s)`.
    pub fn ones_precision_ones(&self, rho: f64) -> f64 {
        (1.0 - rho) * self.degree_sum
    }

    /// `r'(M − ρD) r`, evaluated over the edge list.
    pub fn quadratic_form(&self, r: &[f64], rho: f64) -> Result<f64> {
        self.check_len(r.len())?;
        Ok(self.quadratic_form_unchecked(r, rho))
    }

    pub(crate) fn quadratic_form_unchecked(&self, r: &[f64], rho: f64) -> f64 {
        let diag: f64 = self.degrees.iter().zip(r).map(|(m, x)| m * x * x).sum();
        let cross: f64 = self.edges.iter().map(|&(a, b)| r[a] * r[b]).sum();
        diag - 2.0 * rho * cross
    }

    /// `log det (M − ρD) = Σ log m(s) + Σ log(1 − ρλ_k)`.
    pub fn log_det(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        let mut acc = self.log_degree_sum;
        for &lam in &self.eigenvalues {
            let t = 1.0 - rho * lam;
            if t <= 0.0 {
                return Err(Error::Domain(format!(
                    "1 - rho*lambda = {t} is not positive at rho = {rho}"
                )));
            }
            acc += t.ln();
        }
        Ok(acc)
    }

    /// Log density of `r ~ N(0, τ² Q(ρ)^{-1})`.
    pub fn log_density(&self, r: &[f64], rho: f64, tau2: f64) -> Result<f64> {
        if !(tau2 > 0.0) {
            return Err(Error::Domain(format!("tau2 must be positive, got {tau2}")));
        }
        self.check_len(r.len())?;
        let n = self.n_sites() as f64;
        let log_det = self.log_det(rho)?;
        let quad = self.quadratic_form_unchecked(r, rho);
        Ok(-0.5 * n * (LN_2PI + tau2.ln()) + 0.5 * log_det - quad / (2.0 * tau2))
    }

    /// Sum over patients of `log N(r_i; 0, τ_i² Q(ρ)^{-1})` at a shared ρ.
    pub fn log_density_many<'a, I>(&self, residuals: I, rho: f64) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let log_det = self.log_det(rho)?;
        let n = self.n_sites() as f64;
        let mut acc = 0.0;
        for (r, tau2) in residuals {
            let quad = self.quadratic_form_unchecked(r, rho);
            acc += -0.5 * n * (LN_2PI + tau2.ln()) + 0.5 * log_det - quad / (2.0 * tau2);
        }
        Ok(acc)
    }
}

/// Canonical-form Gaussian `N(Q^{-1} b, Q^{-1})`.
#[derive(Debug, Clone)]
pub struct PrecisionGaussian {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl PrecisionGaussian {
    pub fn new(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if precision.nrows() != precision.ncols() || precision.nrows() != shift.len() {
            return Err(Error::Dimension {
                expected: precision.nrows(),
                got: shift.len(),
            });
        }
        Ok(PrecisionGaussian { precision, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Cholesky factor of the precision, with a diagnostic error on failure.
    pub fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        factor_spd(self.precision.clone(), "precision_gaussian")
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self.factor()?.solve(&self.shift))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.factor()?;
        Ok(sample_from_factor(&chol, &self.shift, rng))
    }
}

/// Cholesky-factor a symmetric positive-definite matrix.
pub fn factor_spd(matrix: DMatrix<f64>, block: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = matrix.nrows();
    let min_diag = (0..n).map(|i| matrix[(i, i)]).fold(f64::INFINITY, f64::min);
    let max_abs = matrix.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let finite = matrix.iter().all(|v| v.is_finite());
    Cholesky::new(matrix).ok_or_else(|| {
        Error::numerical(
            block,
            format!(
                "Cholesky failed: matrix not positive definite (n = {n}, min diagonal = {min_diag:.3e}, max |entry| = {max_abs:.3e}, finite = {finite})"
            ),
        )
    })
}

/// Draw from `N(Q^{-1} b, Q^{-1})` given `Q = L L'`: solve for the mean and
/// add `L'^{-1} z` with standard normal `z`.
pub fn sample_from_factor<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    shift: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = shift.len();
    let mean = chol.solve(shift);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + noise
}

/// Symmetric positive-definite matrix stored as its lower band.
///
/// Entry `(i, j)` with `i - bw <= j <= i` lives at `i * (bw + 1) + j + bw - i`.
#[derive(Debug, Clone)]
pub struct BandSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        BandSpd {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Reset every stored entry to zero.
    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) is outside bandwidth {}", self.bw);
        i * (self.bw + 1) + j + self.bw - i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Add `v` to the symmetric pair `(i, j)`, `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j);
        self.data[k] += v;
    }

    /// `self += scale · (M − ρD)`. The graph bandwidth must fit.
    pub fn add_car(&mut self, car: &CarStructure, rho: f64, scale: f64) {
        for (s, m) in car.degrees.iter().enumerate() {
            self.add(s, s, scale * m);
        }
        for &(a, b) in &car.edges {
            self.add(a, b, -scale * rho);
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place banded Cholesky `A = L L'`.
    pub fn factor(mut self, block: &str) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut sum = self.data[i * w + j + bw - i];
                for k in lo..j {
                    sum -= self.data[i * w + k + bw - i] * self.data[j * w + k + bw - j];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::numerical(
                            block,
                            format!("banded Cholesky failed at row {i}: pivot {sum:.3e} (n = {n}, bandwidth = {bw})"),
                        ));
                    }
                    self.data[i * w + bw] = sum.sqrt();
                } else {
                    self.data[i * w + j + bw - i] = sum / self.data[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { l: self })
    }
}

/// Lower-triangular banded factor produced by [`BandSpd::factor`].
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: BandSpd,
}

impl BandCholesky {
    fn l(&self, i: usize, j: usize) -> f64 {
        self.l.data[i * (self.l.bw + 1) + j + self.l.bw - i]
    }

    /// Overwrite `x` with `L^{-1} x`.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) {
        let bw = self.l.bw;
        for i in 0..self.l.n {
            let mut v = x[i];
            for k in i.saturating_sub(bw)..i {
                v -= self.l(i, k) * x[k];
            }
            x[i] = v / self.l(i, i);
        }
    }

    /// Overwrite `x` with `L'^{-1} x`.
    pub fn solve_upper_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.l.n, self.l.bw);
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                v -= self.l(k, i) * x[k];
            }
            x[i] = v / self.l(i, i);
        }
    }

    /// `A^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.l.n).map(|i| 2.0 * self.l(i, i).ln()).sum()
    }

    /// Draw from `N(A^{-1} b, A^{-1})`: `L'^{-1}(L^{-1} b + z)`.
    pub fn sample<R: Rng + ?Sized>(&self, shift: &[f64], rng: &mut R) -> Vec<f64> {
        let mut x = shift.to_vec();
        self.solve_lower_in_place(&mut x);
        for v in x.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
        self.solve_upper_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn banded_cholesky_matches_dense() {
        let g = MouthGraph::build(3, 2, GridVariant::Grid3).unwrap();
        let car = CarStructure::new(&g);
        let bw = g.edges().iter().map(|&(a, b)| a.abs_diff(b)).max().unwrap();
        let mut band = BandSpd::zeros(g.n_sites(), bw);
        band.add_car(&car, 0.7, 0.5);
        for s in 0..g.n_sites() {
            band.add(s, s, 0.1 * s as f64);
        }
        let dense = band.to_dense();
        let chol = factor_spd(dense.clone(), "test").unwrap();
        let b: Vec<f64> = (0..g.n_sites()).map(|k| (k as f64 * 0.37).sin()).collect();
        let fact = band.factor("test").unwrap();
        let x = fact.solve(&b);
        let want = chol.solve(&DVector::from_vec(b));
        for (a, w) in x.iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-12);
        }
        let dense_ld: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        assert!((fact.log_det() - dense_ld).abs() < 1e-10);
    }

    #[test]
    fn banded_cholesky_rejects_indefinite() {
        let mut band = BandSpd::zeros(3, 1);
        band.add(0, 0, 1.0);
        band.add(1, 1, 1.0);
        band.add(2, 2, 1.0);
        band.add(1, 0, 2.0);
        assert!(matches!(band.factor("blk"), Err(Error::Numerical { .. })));
    }

    use super::*;
    use crate::mouthgraph::GridVariant;
    use crate::stochastic::RngStream;

    fn path(n: usize) -> CarStructure {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let mut deg = vec![0.0; n];
        for &(a, b) in &edges {
            deg[a] += 1.0;
            deg[b] += 1.0;
        }
        CarStructure::from_parts(deg, edges)
    }

    #[test]
    fn precision_examples() {
        let p2 = path(2);
        assert_eq!(p2.precision(0.0).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(
            p2.precision(0.5).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0])
        );
        let p3 = path(3);
        assert_eq!(
            p3.precision(0.9).unwrap(),
            DMatrix::from_row_slice(3, 3, &[1.0, -0.9, 0.0, -0.9, 2.0, -0.9, 0.0, -0.9, 1.0])
        );
        assert!(matches!(p2.precision(1.0), Err(Error::Domain(_))));
        assert!(matches!(p2.precision(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn quadratic_form_examples() {
        let p2 = path(2);
        assert!((p2.quadratic_form(&[1.0, -1.0], 0.5).unwrap() - 3.0).abs() < 1e-15);
        let eps = 1e-6;
        assert!((p2.quadratic_form(&[1.0, 1.0], 1.0 - eps).unwrap() - 2.0 * eps).abs() < 1e-12);
        let p3 = path(3);
        for rho in [0.0, 0.3, 0.99] {
            assert_eq!(p3.quadratic_form(&[1.0, 0.0, 0.0], rho).unwrap(), 1.0);
        }
        assert!(matches!(p3.quadratic_form(&[1.0], 0.1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_density_at_zero_residual() {
        let g = MouthGraph::build(2, 1, GridVariant::Grid1).unwrap();
        let car = CarStructure::new(&g);
        let r = vec![0.0; 12];
        let tau2 = 1.7;
        let ld = car.log_density(&r, 0.4, tau2).unwrap();
        let expected = -6.0 * (LN_2PI + tau2.ln()) + 0.5 * car.log_det(0.4).unwrap();
        assert!((ld - expected).abs() < 1e-12);
        assert!(car.log_density(&r, 0.4, 0.0).is_err());
    }

    #[test]
    fn log_det_at_zero_is_log_degrees() {
        let g = MouthGraph::build(7, 1, GridVariant::Grid1).unwrap();
        let car = CarStructure::new(&g);
        let expected: f64 = g.degrees().iter().map(|m| m.ln()).sum();
        assert!((car.log_det(0.0).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn spectrum_bounded_by_one() {
        for grid in [GridVariant::Grid1, GridVariant::Grid2, GridVariant::Grid3] {
            let g = MouthGraph::build(7, 4, grid).unwrap();
            let car = CarStructure::new(&g);
            let max = car.eigenvalues().last().copied().unwrap();
            assert!(max <= 1.0 + 1e-12, "{grid}: {max}");
        }
    }

    #[test]
    fn precision_mul_matches_dense() {
        let g = MouthGraph::build(3, 1, GridVariant::Grid3).unwrap();
        let car = CarStructure::new(&g);
        let v: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = car.precision(0.7).unwrap() * DVector::from_column_slice(&v);
        let sparse = car.precision_mul(0.7, &v);
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-12);
        }
        let ones = vec![1.0; 18];
        let direct: f64 = dense.iter().sum();
        assert!((car.ones_precision_dot(0.7, &v) - direct).abs() < 1e-12);
        assert!((car.ones_precision_ones(0.7) - car.quadratic_form(&ones, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scalar_gaussian_sample_moments() {
        let g = PrecisionGaussian::new(
            DMatrix::from_element(1, 1, 4.0),
            DVector::from_element(1, 4.0),
        )
        .unwrap();
        let mut rng = RngStream::new(11, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| g.sample(&mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 4.0 * 0.5 / (n as f64).sqrt());
        // sd of the sample variance ≈ σ² √(2/n)
        assert!((var - 0.25).abs() < 4.0 * 0.25 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn factor_failure_reports_diagnostics() {
        let g = PrecisionGaussian::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let mut rng = RngStream::new(1, 0);
        let err = g.sample(&mut rng).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert!(err.to_string().contains("min diagonal"));
    }
}
