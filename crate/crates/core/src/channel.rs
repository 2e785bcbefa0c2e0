//! Spatial covariance synthesis for uniform planar arrays and correlated
//! Rayleigh channel sampling with AWGN observations.
//!
//! Channels follow the Kronecker model `H = R_v^½ · H_w · (R_h^½)ᵀ`, where the
//! vertical (M×M) and horizontal (N×N) correlation matrices come from a
//! Laplacian power-angle distribution around the direction of arrival.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    hermitian_eigen, hermitian_sqrt, integrate_periodic, kron, ComplexMatrix, C64,
    DEFAULT_QUADRATURE_NODES, PSD_CLAMP,
};

/// Largest MN for which the full MN×MN covariance is materialized.
pub const MAX_FULL_DIM: usize = 4096;

/// The Laplacian weight is integrated out to where it falls below e^-32.
const LAPLACIAN_SUPPORT: f64 = 32.0;

const TAG_CHANNEL: u64 = 0x4348_414e;
const TAG_NOISE: u64 = 0x4e4f_4953;

const BATCH_MAGIC: &[u8; 4] = b"TAIB";
const BATCH_VERSION: u32 = 1;

/// Array geometry and angular statistics. Angles are in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialConfig {
    /// Vertical element count.
    pub m: usize,
    /// Horizontal element count.
    pub n: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
    pub spread_v: f64,
    pub spread_h: f64,
    /// Vertical direction of arrival, in (0, π).
    pub doa_v: f64,
    /// Horizontal direction of arrival, in (-π/2, π/2).
    pub doa_h: f64,
}

impl SpatialConfig {
    /// 8×16 half-wavelength panel with spreads π/180 (vertical) and π/90
    /// (horizontal), arriving from θ = 20°, φ = 50°.
    pub fn reference() -> Self {
        Self {
            m: 8,
            n: 16,
            spacing: 0.5,
            spread_v: PI / 180.0,
            spread_h: PI / 90.0,
            doa_v: 50f64.to_radians(),
            doa_h: 20f64.to_radians(),
        }
    }

    pub fn with_size(mut self, m: usize, n: usize) -> Self {
        self.m = m;
        self.n = n;
        self
    }

    pub fn with_doa(mut self, doa_v: f64, doa_h: f64) -> Self {
        self.doa_v = doa_v;
        self.doa_h = doa_h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("array needs at least one element per axis".into()));
        }
        if !(self.spread_v > 0.0 && self.spread_h > 0.0) {
            return Err(Error::InvalidArgument("angular spreads must be positive".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::InvalidArgument("element spacing must be positive".into()));
        }
        if !(self.doa_h > -PI / 2.0 && self.doa_h < PI / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "horizontal DoA {} rad outside (-π/2, π/2)",
                self.doa_h
            )));
        }
        if !(self.doa_v > 0.0 && self.doa_v < PI) {
            return Err(Error::InvalidArgument(format!(
                "vertical DoA {} rad outside (0, π)",
                self.doa_v
            )));
        }
        Ok(())
    }
}

/// Correlation between elements `i` and `j` of a uniform linear array.
pub fn spatial_correlation(i: usize, j: usize, spread: f64, doa: f64, spacing: f64) -> C64 {
    spatial_correlation_with_nodes(i, j, spread, doa, spacing, DEFAULT_QUADRATURE_NODES)
        .expect("default quadrature node count is valid")
}

/// [`spatial_correlation`] with an explicit Simpson node count.
///
/// The Laplacian weight has a kink at zero offset, so each side is integrated
/// separately over its effective support (at most [-π, π]).
pub fn spatial_correlation_with_nodes(
    i: usize,
    j: usize,
    spread: f64,
    doa: f64,
    spacing: f64,
    nodes: usize,
) -> Result<C64> {
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!("angular spread {spread} must be positive")));
    }
    let decay = SQRT_2 / spread;
    let norm = 1.0 / (SQRT_2 * spread);
    // 2π/λ·Δd with Δd = (i - j)·spacing·λ
    let phase = 2.0 * PI * (i as f64 - j as f64) * spacing;
    let integrand =
        |phi: f64| C64::from_polar(norm * (-decay * phi.abs()).exp(), phase * (doa + phi).sin());
    let support = (LAPLACIAN_SUPPORT / decay).min(PI);
    let half = (nodes / 2).max(2);
    let left = integrate_periodic(integrand, -support, 0.0, half)?;
    let right = integrate_periodic(integrand, 0.0, support, half)?;
    Ok(left + right)
}

/// Closed-form mass of the Laplacian weight over [-π, π].
pub fn laplacian_mass(spread: f64) -> f64 {
    1.0 - (-SQRT_2 * PI / spread).exp()
}

/// L×L Toeplitz correlation matrix of a uniform linear array.
pub fn correlation_matrix(len: usize, spread: f64, doa: f64, spacing: f64) -> ComplexMatrix {
    let lags: Vec<C64> = (0..len)
        .map(|lag| spatial_correlation(lag, 0, spread, doa, spacing))
        .collect();
    ComplexMatrix::from_fn(len, len, |i, j| {
        if i >= j {
            lags[i - j]
        } else {
            lags[j - i].conj()
        }
    })
}

/// Vertical and horizontal covariance factors, optionally with the full
/// Kronecker covariance.
#[derive(Clone, Debug)]
pub struct CovarianceSet {
    pub r_v: ComplexMatrix,
    pub r_h: ComplexMatrix,
    /// `R_h ⊗ R_v`, when requested.
    pub r_full: Option<ComplexMatrix>,
}

impl CovarianceSet {
    pub fn new(r_v: ComplexMatrix, r_h: ComplexMatrix) -> Self {
        Self {
            r_v,
            r_h,
            r_full: None,
        }
    }

    /// Uncorrelated channel with unit power per element.
    pub fn white(m: usize, n: usize) -> Self {
        Self::new(ComplexMatrix::identity(m), ComplexMatrix::identity(n))
    }

    pub fn m(&self) -> usize {
        self.r_v.rows()
    }

    pub fn n(&self) -> usize {
        self.r_h.rows()
    }

    /// `R_h ⊗ R_v`, computed on demand.
    pub fn full(&self) -> Result<ComplexMatrix> {
        if let Some(r) = &self.r_full {
            return Ok(r.clone());
        }
        let dim = self.m() * self.n();
        if dim > MAX_FULL_DIM {
            return Err(Error::TooLarge(format!("full covariance of dimension {dim}")));
        }
        Ok(kron(&self.r_h, &self.r_v))
    }

    /// Mean per-element channel power, trace(R_v)·trace(R_h)/(MN).
    pub fn element_power(&self) -> f64 {
        self.r_v.trace().re * self.r_h.trace().re / (self.m() * self.n()) as f64
    }
}

/// Builds `R_v` from (spread_v, doa_v) and `R_h` from (spread_h, doa_h).
pub fn build_covariances(cfg: &SpatialConfig, include_full: bool) -> Result<CovarianceSet> {
    cfg.validate()?;
    if include_full && cfg.m * cfg.n > MAX_FULL_DIM {
        return Err(Error::TooLarge(format!(
            "full covariance for a {}x{} array exceeds {MAX_FULL_DIM}",
            cfg.m, cfg.n
        )));
    }
    let r_v = correlation_matrix(cfg.m, cfg.spread_v, cfg.doa_v, cfg.spacing);
    let r_h = correlation_matrix(cfg.n, cfg.spread_h, cfg.doa_h, cfg.spacing);
    for (name, r) in [("vertical", &r_v), ("horizontal", &r_h)] {
        let min = hermitian_eigen(r)?.min_value();
        if min < PSD_CLAMP {
            log::error!("{name} covariance is indefinite");
            return Err(Error::NotPsd(min));
        }
    }
    let r_full = include_full.then(|| kron(&r_h, &r_v));
    Ok(CovarianceSet { r_v, r_h, r_full })
}

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for sample `index` of the stream identified by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Circularly-symmetric complex Gaussian matrix with per-entry variance `var`.
pub fn complex_gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, var: f64) -> ComplexMatrix {
    let sd = (var / 2.0).sqrt();
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re * sd, im * sd)
    })
}

/// Covariance factors with their square roots, ready for sampling.
#[derive(Clone, Debug)]
pub struct ChannelModel {
    pub cov: CovarianceSet,
    sqrt_v: ComplexMatrix,
    sqrt_h_t: ComplexMatrix,
}

impl ChannelModel {
    pub fn new(cov: CovarianceSet) -> Result<Self> {
        let sqrt_v = hermitian_sqrt(&cov.r_v)?;
        let sqrt_h_t = hermitian_sqrt(&cov.r_h)?.transpose();
        Ok(Self {
            cov,
            sqrt_v,
            sqrt_h_t,
        })
    }

    pub fn from_config(cfg: &SpatialConfig) -> Result<Self> {
        Self::new(build_covariances(cfg, false)?)
    }

    /// Colors a white draw: `R_v^½ · H_w · (R_h^½)ᵀ`.
    pub fn color(&self, white: &ComplexMatrix) -> ComplexMatrix {
        self.sqrt_v.matmul(white).matmul(&self.sqrt_h_t)
    }

    /// The white matrix `H_w` behind sample `index`.
    pub fn white_draw(&self, seed: u64, index: u64) -> ComplexMatrix {
        let mut rng = sample_rng(derive_seed(seed, TAG_CHANNEL), index);
        complex_gaussian(&mut rng, self.cov.m(), self.cov.n(), 1.0)
    }

    /// Channel sample `index` of the stream `seed`.
    pub fn channel(&self, seed: u64, index: u64) -> ComplexMatrix {
        self.color(&self.white_draw(seed, index))
    }
}

/// Noise sample `index` of the stream `seed`, per-element variance `n0`.
pub fn noise_draw(m: usize, n: usize, n0: f64, seed: u64, index: u64) -> ComplexMatrix {
    let mut rng = sample_rng(derive_seed(seed, TAG_NOISE), index);
    complex_gaussian(&mut rng, m, n, n0)
}

/// Draws `k` channel matrices; sample `i` depends only on `(seed, i)`.
pub fn sample_channels(cov: &CovarianceSet, k: usize, seed: u64) -> Result<Vec<ComplexMatrix>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let model = ChannelModel::new(cov.clone())?;
    Ok((0..k as u64)
        .into_par_iter()
        .map(|i| model.channel(seed, i))
        .collect())
}

/// Per-element noise power for a unit-power channel. `+∞` dB means noiseless.
pub fn noise_power(snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("SNR {snr_db} dB")));
    }
    Ok(10f64.powf(-snr_db / 10.0))
}

/// Channels together with noisy observations `Y = H + Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    pub m: usize,
    pub n: usize,
    pub h: Vec<ComplexMatrix>,
    pub y: Vec<ComplexMatrix>,
    /// Per-element complex noise variance, N0 = 2σ².
    pub n0: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelBatch {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Noise realizations `Y_k - H_k`.
    pub fn noise(&self) -> Vec<ComplexMatrix> {
        self.y.iter().zip(&self.h).map(|(y, h)| y - h).collect()
    }

    /// Writes the documented binary layout: magic, version, M, N, K, N0,
    /// seed, then H and Y as row-major interleaved little-endian f64 pairs.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        w.write_all(&BATCH_VERSION.to_le_bytes())?;
        w.write_all(&(self.m as u32).to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.n0.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for mat in self.h.iter().chain(&self.y) {
            for z in mat.as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a batch written by [`ChannelBatch::write_to`]. The SNR is
    /// recovered from N0.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BATCH_MAGIC {
            return Err(Error::Format("not a channel batch file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != BATCH_VERSION {
            return Err(Error::Format(format!("unsupported batch version {version}")));
        }
        let m = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let n0 = read_f64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let mut read_block = || -> Result<Vec<ComplexMatrix>> {
            (0..k)
                .map(|_| {
                    let data = (0..m * n)
                        .map(|_| Ok(C64::new(read_f64(&mut r)?, read_f64(&mut r)?)))
                        .collect::<Result<Vec<_>>>()?;
                    ComplexMatrix::from_vec(m, n, data)
                })
                .collect()
        };
        let h = read_block()?;
        let y = read_block()?;
        let snr_db = if n0 > 0.0 { -10.0 * n0.log10() } else { f64::INFINITY };
        Ok(Self {
            m,
            n,
            h,
            y,
            n0,
            snr_db,
            seed,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Adds AWGN at `snr_db` to every channel. Noise sample `i` depends only on
/// `(seed, i)`.
pub fn observe(h: &[ComplexMatrix], snr_db: f64, seed: u64) -> Result<ChannelBatch> {
    let n0 = noise_power(snr_db)?;
    let (m, n) = h.first().map(|x| x.shape()).unwrap_or((0, 0));
    if h.iter().any(|x| x.shape() != (m, n)) {
        return Err(Error::Dimension("channels in a batch must share a shape".into()));
    }
    let y = h
        .par_iter()
        .enumerate()
        .map(|(i, hk)| {
            if n0 == 0.0 {
                hk.clone()
            } else {
                hk + &noise_draw(m, n, n0, seed, i as u64)
            }
        })
        .collect();
    Ok(ChannelBatch {
        m,
        n,
        h: h.to_vec(),
        y,
        n0,
        snr_db,
        seed,
    })
}

/// Vertical view (columns are M-vectors) and horizontal view (columns are
/// N-vectors) of one observation.
pub fn stack_subspaces(y: &ComplexMatrix) -> (ComplexMatrix, ComplexMatrix) {
    (y.clone(), y.transpose())
}

/// Inverse of [`stack_subspaces`].
pub fn unstack_subspaces(vertical: &ComplexMatrix, horizontal: &ComplexMatrix) -> Result<ComplexMatrix> {
    if horizontal.shape() != (vertical.cols(), vertical.rows()) {
        return Err(Error::Dimension("subspace views do not match".into()));
    }
    let back = horizontal.transpose();
    if back.max_abs_diff(vertical) != 0.0 {
        return Err(Error::InvalidArgument("subspace views disagree".into()));
    }
    Ok(back)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::vec;

    #[test]
    fn zero_lag_matches_laplacian_mass() {
        let spread = PI / 90.0;
        let r = spatial_correlation(3, 3, spread, 0.4, 0.5);
        assert!((r.re - laplacian_mass(spread)).abs() < 1e-9, "{r}");
        assert!(r.im.abs() < 1e-12);
    }

    #[test]
    fn correlation_is_hermitian_in_indices() {
        for (i, j) in [(0, 5), (2, 7), (6, 1)] {
            let a = spatial_correlation(i, j, PI / 180.0, 0.35, 0.5);
            let b = spatial_correlation(j, i, PI / 180.0, 0.35, 0.5);
            assert!((a - b.conj()).norm() < 1e-14);
        }
    }

    #[test]
    fn correlation_decays_with_distance() {
        let theta = 20f64.to_radians();
        let r00 = spatial_correlation(0, 0, PI / 90.0, theta, 0.5);
        let r07 = spatial_correlation(0, 7, PI / 90.0, theta, 0.5);
        assert!(r07.norm() < r00.re);
    }

    #[test]
    fn quadrature_converged_at_default_nodes() {
        for spread in [PI / 180.0, PI / 90.0] {
            for doa in [-60f64, 20.0, 50.0, 89.0] {
                for lag in 0..16 {
                    let a = spatial_correlation_with_nodes(lag, 0, spread, doa.to_radians(), 0.5, DEFAULT_QUADRATURE_NODES)
                        .unwrap();
                    let b = spatial_correlation_with_nodes(lag, 0, spread, doa.to_radians(), 0.5, 2 * DEFAULT_QUADRATURE_NODES)
                        .unwrap();
                    assert!((a - b).norm() < 1e-8, "lag {lag} doa {doa}: {}", (a - b).norm());
                }
            }
        }
    }

    #[test]
    fn single_element_covariance() {
        let cfg = SpatialConfig::reference().with_size(1, 4);
        let cov = build_covariances(&cfg, false).unwrap();
        assert_eq!(cov.r_v.shape(), (1, 1));
        assert!((cov.r_v[(0, 0)].re - laplacian_mass(cfg.spread_v)).abs() < 1e-9);
    }

    #[test]
    fn reference_covariances_are_psd() {
        let cov = build_covariances(&SpatialConfig::reference(), false).unwrap();
        for r in [&cov.r_v, &cov.r_h] {
            assert!(r.is_hermitian(1e-12));
            assert!(hermitian_eigen(r).unwrap().min_value() >= -1e-10);
            let d = r.diag_real();
            assert!(d.iter().all(|&x| (x - d[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn full_covariance_is_kronecker() {
        let cfg = SpatialConfig::reference().with_size(2, 2);
        let cov = build_covariances(&cfg, true).unwrap();
        assert_eq!(cov.r_full.as_ref().unwrap(), &kron(&cov.r_h, &cov.r_v));
        let big = SpatialConfig::reference().with_size(64, 128);
        assert!(matches!(build_covariances(&big, true), Err(Error::TooLarge(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SpatialConfig::reference();
        cfg.doa_h = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SpatialConfig::reference();
        cfg.spread_v = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SpatialConfig::reference();
        cfg.m = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn white_channels_have_unit_power() {
        let h = sample_channels(&CovarianceSet::white(2, 3), 100_000, 5).unwrap();
        let p: f64 = h.iter().map(|x| x.norm_sqr()).sum::<f64>() / (h.len() * 6) as f64;
        assert!((p - 1.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn vec_form_of_coloring() {
        let cfg = SpatialConfig::reference().with_size(3, 4);
        let model = ChannelModel::from_config(&cfg).unwrap();
        let white = model.white_draw(9, 2);
        let h = model.color(&white);
        let op = kron(
            &hermitian_sqrt(&model.cov.r_h).unwrap(),
            &hermitian_sqrt(&model.cov.r_v).unwrap(),
        );
        let lhs = vec(&h);
        let rhs = op.apply(&vec(&white));
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let h = sample_channels(&CovarianceSet::white(2, 2), 4, 1).unwrap();
        let b = observe(&h, f64::INFINITY, 2).unwrap();
        assert_eq!(b.n0, 0.0);
        assert_eq!(b.y, b.h);
        assert!(observe(&h, f64::NAN, 2).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cov = build_covariances(&SpatialConfig::reference().with_size(2, 3), false).unwrap();
        let a = observe(&sample_channels(&cov, 50, 4).unwrap(), 3.0, 8).unwrap();
        let b = observe(&sample_channels(&cov, 50, 4).unwrap(), 3.0, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stacking_views() {
        let y = ComplexMatrix::from_fn(2, 3, |i, j| C64::new(i as f64, j as f64));
        let (v, h) = stack_subspaces(&y);
        assert_eq!(h, y.transpose());
        assert_eq!(v[(1, 2)], h[(2, 1)]);
        assert_eq!(unstack_subspaces(&v, &h).unwrap(), y);
    }

    #[test]
    fn batch_file_roundtrip() {
        let cov = CovarianceSet::white(2, 3);
        let b = observe(&sample_channels(&cov, 5, 1).unwrap(), 10.0, 2).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 8 + 8 + 2 * 5 * 6 * 16);
        let back = ChannelBatch::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.h, b.h);
        assert_eq!(back.y, b.y);
        assert!((back.snr_db - 10.0).abs() < 1e-12);
        assert!(ChannelBatch::read_from(&b"XXXX"[..]).is_err());
    }
}
