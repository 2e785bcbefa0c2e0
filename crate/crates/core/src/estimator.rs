//! Closed-form channel estimators and their diagnostics.
//!
//! All noise arguments are the per-element complex noise power of the
//! observation (`N0 = 2σ²`); with that choice `R(R + N0·I)^-1` is the linear
//! MMSE filter for `Y = H + Z`.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{complex_gaussian, derive_seed, sample_rng, CovarianceSet};
use crate::error::{Error, Result};
use crate::numerics::{
    hermitian_sqrt, kron, pairwise_sum, psd_eigen, unvec, vec, ComplexMatrix, HermitianEigen, C64,
};

/// NMSE reported for a perfect estimate.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// Above this MN the full-array oracle is only a test aid.
pub const ORACLE_RECOMMENDED_DIM: usize = 16;

const TAG_DIAG_NOISE: u64 = 0x5641_5244;

/// Where a filter pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterSource {
    ClosedForm,
    Learned,
}

/// Vertical (M×M) and horizontal (N×N) subspace weighting matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterPair {
    pub w_v: ComplexMatrix,
    pub w_h: ComplexMatrix,
    /// Noise power the filters were designed for.
    pub noise_var: f64,
    pub source: FilterSource,
}

impl FilterPair {
    pub fn new(w_v: ComplexMatrix, w_h: ComplexMatrix, noise_var: f64, source: FilterSource) -> Result<Self> {
        if !w_v.is_square() || !w_h.is_square() {
            return Err(Error::Dimension("subspace filters must be square".into()));
        }
        Ok(Self {
            w_v,
            w_h,
            noise_var,
            source,
        })
    }

    /// Identity filters (the LS estimator in both subspaces).
    pub fn identity(m: usize, n: usize) -> Self {
        Self {
            w_v: ComplexMatrix::identity(m),
            w_h: ComplexMatrix::identity(n),
            noise_var: 0.0,
            source: FilterSource::ClosedForm,
        }
    }

    pub fn m(&self) -> usize {
        self.w_v.rows()
    }

    pub fn n(&self) -> usize {
        self.w_h.rows()
    }

    /// Largest row energy Σ_m |W[i,m]|² across both filters.
    pub fn max_row_energy(&self) -> f64 {
        self.w_v
            .row_energies()
            .into_iter()
            .chain(self.w_h.row_energies())
            .fold(0.0, f64::max)
    }

    fn check_shape(&self, y: &ComplexMatrix) -> Result<()> {
        if y.shape() != (self.m(), self.n()) {
            return Err(Error::Dimension(format!(
                "observation {}x{} for filters {}x{}",
                y.rows(),
                y.cols(),
                self.m(),
                self.n()
            )));
        }
        Ok(())
    }

    /// Principal square roots for geometric combining. Learned filters are
    /// replaced by their Hermitian part first.
    pub fn geometric(&self) -> Result<GeometricFilters> {
        let (v, h) = match self.source {
            FilterSource::ClosedForm => (self.w_v.clone(), self.w_h.clone()),
            FilterSource::Learned => (self.w_v.hermitian_part(), self.w_h.hermitian_part()),
        };
        let sqrt_v = hermitian_sqrt(&v).inspect_err(|e| {
            log::warn!("vertical filter has no principal square root: {e}");
        })?;
        let sqrt_h = hermitian_sqrt(&h).inspect_err(|e| {
            log::warn!("horizontal filter has no principal square root: {e}");
        })?;
        Ok(GeometricFilters {
            sqrt_h_t: sqrt_h.transpose(),
            sqrt_v,
            sqrt_h,
        })
    }
}

/// Square roots of a filter pair, precomputed for repeated geometric
/// combining.
#[derive(Clone, Debug)]
pub struct GeometricFilters {
    pub sqrt_v: ComplexMatrix,
    pub sqrt_h: ComplexMatrix,
    sqrt_h_t: ComplexMatrix,
}

impl GeometricFilters {
    /// `W_v^½ · Y · (W_h^½)ᵀ`.
    pub fn apply(&self, y: &ComplexMatrix) -> ComplexMatrix {
        self.sqrt_v.matmul(y).matmul(&self.sqrt_h_t)
    }

    /// `W_h^½ ⊗ W_v^½`.
    pub fn operator(&self) -> ComplexMatrix {
        kron(&self.sqrt_h, &self.sqrt_v)
    }
}

/// `R(R + noise_var·I)^-1`, evaluated spectrally so the result is exactly
/// Hermitian. With `noise_var = 0` this is the projection onto range(R).
pub fn genie_filter(r: &ComplexMatrix, noise_var: f64) -> Result<ComplexMatrix> {
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance {noise_var}")));
    }
    let eig = psd_eigen(r)?;
    Ok(mmse_from_eigen(&eig, noise_var))
}

fn mmse_from_eigen(eig: &HermitianEigen, noise_var: f64) -> ComplexMatrix {
    if noise_var == 0.0 {
        log::warn!("noiseless MMSE filter: returning the range projection");
        let tol = 1e-12 * eig.values.last().copied().unwrap_or(0.0).max(1.0);
        return eig.reconstruct_with(|l| if l > tol { 1.0 } else { 0.0 });
    }
    eig.reconstruct_with(|l| l / (l + noise_var))
}

/// Closed-form MMSE filters for both subspaces.
pub fn subspace_filters(cov: &CovarianceSet, noise_var: f64) -> Result<FilterPair> {
    Ok(FilterPair {
        w_v: genie_filter(&cov.r_v, noise_var)?,
        w_h: genie_filter(&cov.r_h, noise_var)?,
        noise_var,
        source: FilterSource::ClosedForm,
    })
}

/// `W_v · Y`.
pub fn estimate_vertical(fp: &FilterPair, y: &ComplexMatrix) -> Result<ComplexMatrix> {
    fp.check_shape(y)?;
    Ok(fp.w_v.matmul(y))
}

/// `(W_h · Yᵀ)ᵀ = Y · W_hᵀ`.
pub fn estimate_horizontal(fp: &FilterPair, y: &ComplexMatrix) -> Result<ComplexMatrix> {
    fp.check_shape(y)?;
    Ok(y.matmul(&fp.w_h.transpose()))
}

/// Arithmetic combining `0.5(Y·W_hᵀ + W_v·Y)`.
pub fn estimate_arithmetic(fp: &FilterPair, y: &ComplexMatrix) -> Result<ComplexMatrix> {
    fp.check_shape(y)?;
    Ok(arithmetic_combine(&fp.w_v, &fp.w_h.transpose(), y))
}

/// Arithmetic combining with a pre-transposed horizontal filter.
pub(crate) fn arithmetic_combine(w_v: &ComplexMatrix, w_h_t: &ComplexMatrix, y: &ComplexMatrix) -> ComplexMatrix {
    (&w_v.matmul(y) + &y.matmul(w_h_t)).scale(0.5)
}

/// Geometric combining `W_v^½ · Y · (W_h^½)ᵀ`.
pub fn estimate_geometric(fp: &FilterPair, y: &ComplexMatrix) -> Result<ComplexMatrix> {
    fp.check_shape(y)?;
    Ok(fp.geometric()?.apply(y))
}

/// Least-squares estimate: the observation itself.
pub fn estimate_ls(y: &ComplexMatrix) -> ComplexMatrix {
    y.clone()
}

/// Effective MN×MN operator of arithmetic combining,
/// `0.5(I_N ⊗ W_v + W_h ⊗ I_M)`.
pub fn arithmetic_operator(fp: &FilterPair) -> ComplexMatrix {
    let a = kron(&ComplexMatrix::identity(fp.n()), &fp.w_v);
    let b = kron(&fp.w_h, &ComplexMatrix::identity(fp.m()));
    (&a + &b).scale(0.5)
}

/// Full-array MMSE estimator for a Kronecker covariance, applied in the
/// joint eigenbasis without forming the MN×MN filter.
#[derive(Clone, Debug)]
pub struct KroneckerGenie {
    u_v: ComplexMatrix,
    u_v_h: ComplexMatrix,
    u_h_conj: ComplexMatrix,
    u_h_t: ComplexMatrix,
    /// gains[p][q] = λ_p μ_q / (λ_p μ_q + N0)
    gains: Vec<f64>,
    mode_power: Vec<f64>,
    noise_var: f64,
    n: usize,
}

impl KroneckerGenie {
    pub fn new(cov: &CovarianceSet, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0) {
            return Err(Error::InvalidArgument("genie estimator needs positive noise".into()));
        }
        let ev = psd_eigen(&cov.r_v)?;
        let eh = psd_eigen(&cov.r_h)?;
        let n = cov.n();
        let mut gains = Vec::with_capacity(cov.m() * n);
        let mut mode_power = Vec::with_capacity(cov.m() * n);
        for &lv in &ev.values {
            for &lh in &eh.values {
                let p = lv * lh;
                mode_power.push(p);
                gains.push(p / (p + noise_var));
            }
        }
        Ok(Self {
            u_v_h: ev.vectors.adjoint(),
            u_v: ev.vectors,
            u_h_conj: eh.vectors.conj(),
            u_h_t: eh.vectors.transpose(),
            gains,
            mode_power,
            noise_var,
            n,
        })
    }

    pub fn apply(&self, y: &ComplexMatrix) -> ComplexMatrix {
        let mut modes = self.u_v_h.matmul(y).matmul(&self.u_h_conj);
        for (z, g) in modes.as_mut_slice().iter_mut().zip(&self.gains) {
            *z *= *g;
        }
        self.u_v.matmul(&modes).matmul(&self.u_h_t)
    }

    /// Expected NMSE in dB: Σ λN0/(λ+N0) / Σ λ over the Kronecker modes.
    pub fn analytic_nmse_db(&self) -> f64 {
        let err: f64 = self
            .mode_power
            .iter()
            .map(|&p| p * self.noise_var / (p + self.noise_var))
            .sum();
        let pow: f64 = self.mode_power.iter().sum();
        10.0 * (err / pow).log10()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Applies `W_genie` to vec(Y) for a full MN×MN covariance.
pub fn ordinary_oracle(r_full: &ComplexMatrix, noise_var: f64, y: &ComplexMatrix) -> Result<ComplexMatrix> {
    let dim = y.rows() * y.cols();
    if r_full.shape() != (dim, dim) {
        return Err(Error::Dimension(format!(
            "covariance {}x{} for a {}x{} observation",
            r_full.rows(),
            r_full.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if dim > ORACLE_RECOMMENDED_DIM {
        log::warn!("full-array oracle at MN = {dim}; intended for MN <= {ORACLE_RECOMMENDED_DIM}");
    }
    let w = genie_filter(r_full, noise_var)?;
    unvec(&w.apply(&vec(y)), y.rows(), y.cols())
}

/// Running sums for NMSE over many samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NmseAccumulator {
    pub error_energy: f64,
    pub channel_energy: f64,
}

impl NmseAccumulator {
    pub fn add(&mut self, estimate: &ComplexMatrix, truth: &ComplexMatrix) {
        self.error_energy += (estimate - truth).norm_sqr();
        self.channel_energy += truth.norm_sqr();
    }

    pub fn merge(&mut self, other: &Self) {
        self.error_energy += other.error_energy;
        self.channel_energy += other.channel_energy;
    }

    /// Deterministic sum over an ordered list of partial accumulators.
    pub fn combine(parts: &[Self]) -> Self {
        let e: Vec<f64> = parts.iter().map(|p| p.error_energy).collect();
        let c: Vec<f64> = parts.iter().map(|p| p.channel_energy).collect();
        Self {
            error_energy: pairwise_sum(&e),
            channel_energy: pairwise_sum(&c),
        }
    }

    pub fn linear(&self) -> Result<f64> {
        if !(self.channel_energy > 0.0) {
            return Err(Error::InvalidArgument("NMSE of a zero-power channel".into()));
        }
        Ok(self.error_energy / self.channel_energy)
    }

    pub fn db(&self) -> Result<f64> {
        Ok(to_db(self.linear()?))
    }
}

/// 10·log10 with the perfect-estimate floor.
pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `10·log10(Σ‖Ĥ−H‖² / Σ‖H‖²)`.
pub fn nmse_db(estimates: &[ComplexMatrix], truths: &[ComplexMatrix]) -> Result<f64> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(Error::Dimension(format!(
            "{} estimates for {} channels",
            estimates.len(),
            truths.len()
        )));
    }
    let mut acc = NmseAccumulator::default();
    for (e, t) in estimates.iter().zip(truths) {
        if e.shape() != t.shape() {
            return Err(Error::Dimension("estimate and channel shapes differ".into()));
        }
        acc.add(e, t);
    }
    acc.db()
}

/// Deviation of combined estimates from the full MMSE estimate.
#[derive(Clone, Debug)]
pub struct DeviationMetrics {
    pub d_a: f64,
    pub d_g: f64,
    /// `(1/4MN)·Re(yᴴ L (P+Q) y)`.
    pub decomposition: f64,
    /// `|D_a − D_g − decomposition|`.
    pub identity_residual: f64,
}

/// Operators shared by every deviation evaluation for one filter pair.
///
/// With `A = I⊗W_v`, `B = W_h⊗I` and `W = W_genie`:
/// `Δa = (A+B)/2 − W`, `Δg = A^½B^½ − W`, `L = (A^½ − B^½)²`,
/// `P = A + B − 2W`, `Q = 2(A^½B^½ − W)`. Deviations use the Gram form
/// `yᴴΔᴴΔy`. For commuting Hermitian operators `Δa = Δg + L/2`, which gives
/// `D_a − D_g = (1/4MN)·yᴴL(P+Q)y`.
#[derive(Clone, Debug)]
pub struct DeviationOperators {
    pub delta_a: ComplexMatrix,
    pub delta_g: ComplexMatrix,
    pub l: ComplexMatrix,
    pub p: ComplexMatrix,
    pub q: ComplexMatrix,
    lpq: ComplexMatrix,
    m: usize,
    n: usize,
}

impl DeviationOperators {
    pub fn new(fp: &FilterPair, w_genie: &ComplexMatrix) -> Result<Self> {
        let (m, n) = (fp.m(), fp.n());
        let dim = m * n;
        if w_genie.shape() != (dim, dim) {
            return Err(Error::Dimension(format!(
                "genie filter {}x{} for MN = {dim}",
                w_genie.rows(),
                w_genie.cols()
            )));
        }
        if dim > crate::channel::MAX_FULL_DIM {
            return Err(Error::TooLarge(format!("deviation metrics at MN = {dim}")));
        }
        let geo = fp.geometric()?;
        let a = kron(&ComplexMatrix::identity(n), &fp.w_v);
        let b = kron(&fp.w_h, &ComplexMatrix::identity(m));
        let a_half = kron(&ComplexMatrix::identity(n), &geo.sqrt_v);
        let b_half = kron(&geo.sqrt_h, &ComplexMatrix::identity(m));
        let ab_half = a_half.matmul(&b_half);
        let delta_a = &(&a + &b).scale(0.5) - w_genie;
        let delta_g = &ab_half - w_genie;
        let diff = &a_half - &b_half;
        let l = diff.matmul(&diff);
        let p = &(&a + &b) - &w_genie.scale(2.0);
        let q = delta_g.scale(2.0);
        let lpq = l.matmul(&(&p + &q));
        Ok(Self {
            delta_a,
            delta_g,
            l,
            p,
            q,
            lpq,
            m,
            n,
        })
    }

    pub fn evaluate(&self, y: &ComplexMatrix) -> Result<DeviationMetrics> {
        if y.shape() != (self.m, self.n) {
            return Err(Error::Dimension("observation does not match filters".into()));
        }
        let yv = vec(y);
        let scale = 1.0 / (self.m * self.n) as f64;
        let energy = |op: &ComplexMatrix| op.apply(&yv).iter().map(|z| z.norm_sqr()).sum::<f64>();
        let d_a = scale * energy(&self.delta_a);
        let d_g = scale * energy(&self.delta_g);
        let quad: C64 = yv
            .iter()
            .zip(self.lpq.apply(&yv))
            .map(|(a, b)| a.conj() * b)
            .sum();
        let decomposition = 0.25 * scale * quad.re;
        Ok(DeviationMetrics {
            d_a,
            d_g,
            decomposition,
            identity_residual: (d_a - d_g - decomposition).abs(),
        })
    }
}

/// D_a, D_g and the L/P/Q decomposition for one observation.
pub fn deviation_metrics(fp: &FilterPair, w_genie: &ComplexMatrix, y: &ComplexMatrix) -> Result<DeviationMetrics> {
    DeviationOperators::new(fp, w_genie)?.evaluate(y)
}

/// Per-element second moments of the noise pathway through the filters.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMoments {
    pub m: usize,
    pub n: usize,
    pub count: usize,
    /// Σ|Z_a|², Σ|W_v Z|², Σ|Z W_hᵀ|² per element, row-major.
    pub sum_a: Vec<f64>,
    pub sum_v: Vec<f64>,
    pub sum_h: Vec<f64>,
}

impl NoiseMoments {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            count: 0,
            sum_a: vec![0.0; m * n],
            sum_v: vec![0.0; m * n],
            sum_h: vec![0.0; m * n],
        }
    }

    pub fn add(&mut self, w_v: &ComplexMatrix, w_h_t: &ComplexMatrix, z: &ComplexMatrix) {
        let zv = w_v.matmul(z);
        let zh = z.matmul(w_h_t);
        for (idx, (a, b)) in zv.as_slice().iter().zip(zh.as_slice()).enumerate() {
            self.sum_v[idx] += a.norm_sqr();
            self.sum_h[idx] += b.norm_sqr();
            self.sum_a[idx] += ((a + b) * 0.5).norm_sqr();
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (dst, src) in [
            (&mut self.sum_a, &other.sum_a),
            (&mut self.sum_v, &other.sum_v),
            (&mut self.sum_h, &other.sum_h),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self.count += other.count;
    }
}

/// Noise-pathway variances and the arithmetic-combining region diagnostics,
/// one entry per array element (row-major M×N).
#[derive(Clone, Debug)]
pub struct VarianceReport {
    pub m: usize,
    pub n: usize,
    pub n0: f64,
    pub samples: usize,
    /// Measured variance of the arithmetic-combined noise.
    pub var_a: Vec<f64>,
    pub var_v: Vec<f64>,
    pub var_h: Vec<f64>,
    /// x + y from the realized filter entries.
    pub rho: Vec<f64>,
    /// ρ·N0/4.
    pub lower: Vec<f64>,
    /// N0.
    pub upper: f64,
    /// Σ_m |W_v[i,m]|².
    pub x: Vec<f64>,
    /// Σ_n |W_h[j,n]|².
    pub y: Vec<f64>,
    /// Re(W_v[i,i]·conj(W_h[j,j])).
    pub d: Vec<f64>,
    /// Predicted VAR[Z_a]/σ².
    pub z: Vec<f64>,
    /// Measured VAR[Z_a]/σ².
    pub z_measured: Vec<f64>,
    /// z < 2x and z < 2y.
    pub effective: Vec<bool>,
    /// x/3 + 2d/3 < y < 3x − 2d.
    pub in_effective_range: Vec<bool>,
}

impl VarianceReport {
    fn from_moments(fp: &FilterPair, n0: f64, moments: &NoiseMoments) -> Self {
        let (m, n) = (fp.m(), fp.n());
        let sigma2 = n0 / 2.0;
        let count = moments.count.max(1) as f64;
        let xs = fp.w_v.row_energies();
        let ys = fp.w_h.row_energies();
        let mut report = Self {
            m,
            n,
            n0,
            samples: moments.count,
            var_a: moments.sum_a.iter().map(|s| s / count).collect(),
            var_v: moments.sum_v.iter().map(|s| s / count).collect(),
            var_h: moments.sum_h.iter().map(|s| s / count).collect(),
            rho: Vec::with_capacity(m * n),
            lower: Vec::with_capacity(m * n),
            upper: n0,
            x: Vec::with_capacity(m * n),
            y: Vec::with_capacity(m * n),
            d: Vec::with_capacity(m * n),
            z: Vec::with_capacity(m * n),
            z_measured: Vec::with_capacity(m * n),
            effective: Vec::with_capacity(m * n),
            in_effective_range: Vec::with_capacity(m * n),
        };
        for i in 0..m {
            for j in 0..n {
                let x = xs[i];
                let y = ys[j];
                let d = (fp.w_v[(i, i)] * fp.w_h[(j, j)].conj()).re;
                let rho = x + y;
                let var_pred = sigma2 / 2.0 * x + sigma2 / 2.0 * y + sigma2 * d;
                let z = var_pred / sigma2;
                report.rho.push(rho);
                report.lower.push(rho * n0 / 4.0);
                report.x.push(x);
                report.y.push(y);
                report.d.push(d);
                report.z.push(z);
                report.z_measured.push(report.var_a[i * n + j] / sigma2);
                report.effective.push(z < 2.0 * x && z < 2.0 * y);
                report
                    .in_effective_range
                    .push(x / 3.0 + 2.0 * d / 3.0 < y && y < 3.0 * x - 2.0 * d);
            }
        }
        report
    }

    /// Fraction of elements with lower < var_a ≤ upper·(1 + slack).
    pub fn bracket_fraction(&self, slack: f64) -> f64 {
        let hits = self
            .var_a
            .iter()
            .zip(&self.lower)
            .filter(|(&v, &lo)| v > lo && v <= self.upper * (1.0 + slack))
            .count();
        hits as f64 / self.var_a.len() as f64
    }

    pub fn effective_fraction(&self) -> f64 {
        self.effective.iter().filter(|&&e| e).count() as f64 / self.effective.len() as f64
    }

    pub fn mean_var_a(&self) -> f64 {
        self.var_a.iter().sum::<f64>() / self.var_a.len() as f64
    }

    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }

    /// Largest |z − ((x+y)/2 + d)|.
    pub fn z_identity_residual(&self) -> f64 {
        (0..self.z.len())
            .map(|k| (self.z[k] - ((self.x[k] + self.y[k]) / 2.0 + self.d[k])).abs())
            .fold(0.0, f64::max)
    }
}

/// Diagnostics using the noise realizations `Y − H` of a batch.
pub fn variance_diagnostics(fp: &FilterPair, batch: &crate::channel::ChannelBatch) -> Result<VarianceReport> {
    if (batch.m, batch.n) != (fp.m(), fp.n()) {
        return Err(Error::Dimension("batch does not match filters".into()));
    }
    let w_h_t = fp.w_h.transpose();
    let mut moments = NoiseMoments::new(fp.m(), fp.n());
    for (y, h) in batch.y.iter().zip(&batch.h) {
        moments.add(&fp.w_v, &w_h_t, &(y - h));
    }
    Ok(VarianceReport::from_moments(fp, batch.n0, &moments))
}

/// Diagnostics from `count` fresh noise draws at power `n0`.
pub fn variance_diagnostics_sampled(fp: &FilterPair, n0: f64, count: usize, seed: u64) -> Result<VarianceReport> {
    const CHUNK: usize = 1024;
    if count == 0 {
        return Err(Error::InvalidArgument("no noise samples".into()));
    }
    let (m, n) = (fp.m(), fp.n());
    let w_h_t = fp.w_h.transpose();
    let base = derive_seed(seed, TAG_DIAG_NOISE);
    let parts: Vec<NoiseMoments> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = NoiseMoments::new(m, n);
            for k in c * CHUNK..((c + 1) * CHUNK).min(count) {
                let mut rng: ChaCha8Rng = sample_rng(base, k as u64);
                let z = complex_gaussian(&mut rng, m, n, n0);
                acc.add(&fp.w_v, &w_h_t, &z);
            }
            acc
        })
        .collect();
    let mut moments = NoiseMoments::new(m, n);
    for p in &parts {
        moments.merge(p);
    }
    Ok(VarianceReport::from_moments(fp, n0, &moments))
}

/// ρ per element using expected squared filter entries over several
/// filter realizations.
pub fn rho_expected(filters: &[FilterPair]) -> Result<Vec<f64>> {
    let first = filters
        .first()
        .ok_or_else(|| Error::InvalidArgument("no filters".into()))?;
    let (m, n) = (first.m(), first.n());
    let mut xs = vec![0.0; m];
    let mut ys = vec![0.0; n];
    for fp in filters {
        if (fp.m(), fp.n()) != (m, n) {
            return Err(Error::Dimension("filter sizes differ".into()));
        }
        for (acc, e) in xs.iter_mut().zip(fp.w_v.row_energies()) {
            *acc += e;
        }
        for (acc, e) in ys.iter_mut().zip(fp.w_h.row_energies()) {
            *acc += e;
        }
    }
    let k = filters.len() as f64;
    Ok((0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (xs[i] + ys[j]) / k)
        .collect())
}

/// Complexity ratio of full-array over subspace training,
/// `M⁴N⁴ / (MN⁴ + NM⁴)`.
pub fn cost_saving(m: usize, n: usize) -> f64 {
    let (m, n) = (m as f64, n as f64);
    m.powi(4) * n.powi(4) / (m * n.powi(4) + n * m.powi(4))
}

/// One CSV row of per-run metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub estimator: String,
    pub snr_db: f64,
    pub iteration: Option<usize>,
    pub nmse_db: f64,
    pub var_a: Option<f64>,
    pub rho: Option<f64>,
    pub effective_fraction: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "run_id,estimator,snr_db,iteration,nmse_db,var_a,rho,effective_fraction,nmse_linear";

    pub fn new(run_id: &str, estimator: &str, snr_db: f64, iteration: Option<usize>, nmse_db: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            estimator: estimator.to_string(),
            snr_db,
            iteration,
            nmse_db,
            var_a: None,
            rho: None,
            effective_fraction: None,
        }
    }

    pub fn with_variance(mut self, report: &VarianceReport) -> Self {
        self.var_a = Some(report.mean_var_a());
        self.rho = Some(report.mean_rho());
        self.effective_fraction = Some(report.effective_fraction());
        self
    }
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{:.6},{},{},{},{:.9e}",
            self.run_id,
            self.estimator,
            self.snr_db,
            opt(&self.iteration),
            self.nmse_db,
            self.var_a.map(|v| format!("{v:.6e}")).unwrap_or_default(),
            self.rho.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.effective_fraction.map(|v| format!("{v:.4}")).unwrap_or_default(),
            10f64.powf(self.nmse_db / 10.0)
        )
    }
}
