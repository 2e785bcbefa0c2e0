//! Turbo iterations: each pass filters both subspaces with learned models,
//! combines arithmetically and feeds the estimate to the next pass.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{arithmetic_combine, FilterPair, FilterSource, NmseAccumulator};
use crate::learning::{
    meta_for, train_subspace, window_covariance, ConvergenceReport, NnModel, ReferenceMode, Subspace, SubspaceData,
    TrainConfig, Window, WindowSource,
};
use crate::channel::derive_seed;
use crate::numerics::{pairwise_sum, ComplexMatrix};

/// Relative Monte-Carlo slack of the monotonicity audit.
pub const AUDIT_TOLERANCE: f64 = 0.01;

/// Distance in dB beyond which a dedicated start stage counts as mismatched.
pub const SNR_MISMATCH_DB: f64 = 1.0;

const MANIFEST: &str = "manifest.toml";
const MANIFEST_VERSION: u32 = 1;
const COMBINING: &str = "arithmetic";
const TAG_ITERATION: u64 = 0x4954_4552;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainOrigin {
    Dedicated,
    Universal,
}

impl ChainOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainOrigin::Dedicated => "dedicated",
            ChainOrigin::Universal => "universal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dedicated" => Ok(ChainOrigin::Dedicated),
            "universal" => Ok(ChainOrigin::Universal),
            other => Err(Error::Format(format!("unknown chain origin {other:?}"))),
        }
    }
}

/// One Turbo pass.
#[derive(Clone, Debug)]
pub struct ChainStage {
    pub model_v: NnModel,
    pub model_h: NnModel,
    /// Mean per-element residual power after this pass, on validation data.
    pub effective_var: f64,
    pub nmse_db: f64,
}

impl ChainStage {
    /// Learned filters for a window of observations.
    pub fn filters(&self, y: &[ComplexMatrix]) -> Result<FilterPair> {
        let w_v = self.model_v.forward(&window_covariance(y, Subspace::Vertical)?)?;
        let w_h = self.model_h.forward(&window_covariance(y, Subspace::Horizontal)?)?;
        FilterPair::new(w_v, w_h, f64::NAN, FilterSource::Learned)
    }

    /// Arithmetic-combined estimates for a window.
    pub fn apply(&self, y: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let fp = self.filters(y)?;
        let w_h_t = fp.w_h.transpose();
        Ok(y.iter().map(|yk| arithmetic_combine(&fp.w_v, &w_h_t, yk)).collect())
    }

    /// SNR of the observations this stage was trained on.
    pub fn input_snr_db(&self) -> f64 {
        self.model_v.meta.input_snr_db()
    }
}

/// Ordered per-iteration models.
#[derive(Clone, Debug)]
pub struct ModelChain {
    pub stages: Vec<ChainStage>,
    pub origin: ChainOrigin,
    pub window: usize,
}

impl ModelChain {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Runs stages `start..` over one window.
    pub fn run(&self, y: Vec<ComplexMatrix>, start: usize) -> Result<Vec<Vec<ComplexMatrix>>> {
        let mut outputs = Vec::with_capacity(self.len().saturating_sub(start));
        let mut current = y;
        for stage in &self.stages[start.min(self.len())..] {
            current = stage.apply(&current)?;
            outputs.push(current.clone());
        }
        Ok(outputs)
    }

    /// Writes a manifest and one file per model into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut stages = Vec::with_capacity(self.len());
        for (i, s) in self.stages.iter().enumerate() {
            let (fv, fh) = (format!("stage{i}_vertical.bin"), format!("stage{i}_horizontal.bin"));
            s.model_v.save(&dir.join(&fv))?;
            s.model_h.save(&dir.join(&fh))?;
            stages.push(StageEntry {
                iteration: i,
                effective_var: s.effective_var,
                nmse_db: s.nmse_db,
                input_snr_db: s.input_snr_db(),
                model_v: fv,
                model_h: fh,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            combining: COMBINING.to_string(),
            origin: self.origin.as_str().to_string(),
            window: self.window,
            iterations: self.len(),
            stages,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.combining != COMBINING {
            return Err(Error::Format(format!("unsupported combining {:?}", manifest.combining)));
        }
        if manifest.stages.len() != manifest.iterations {
            return Err(Error::Format("iteration count disagrees with stage list".into()));
        }
        let mut stages = Vec::with_capacity(manifest.iterations);
        for e in &manifest.stages {
            stages.push(ChainStage {
                model_v: NnModel::load(&dir.join(&e.model_v))?,
                model_h: NnModel::load(&dir.join(&e.model_h))?,
                effective_var: e.effective_var,
                nmse_db: e.nmse_db,
            });
        }
        Ok(Self {
            stages,
            origin: ChainOrigin::parse(&manifest.origin)?,
            window: manifest.window,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    combining: String,
    origin: String,
    window: usize,
    iterations: usize,
    stages: Vec<StageEntry>,
}

#[derive(Serialize, Deserialize)]
struct StageEntry {
    iteration: usize,
    effective_var: f64,
    nmse_db: f64,
    input_snr_db: f64,
    model_v: String,
    model_h: String,
}

/// A source whose observations have passed through the given stages.
pub struct ChainedSource<'a> {
    inner: &'a dyn WindowSource,
    stages: &'a [ChainStage],
}

impl<'a> ChainedSource<'a> {
    pub fn new(inner: &'a dyn WindowSource, stages: &'a [ChainStage]) -> Self {
        Self { inner, stages }
    }
}

impl WindowSource for ChainedSource<'_> {
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn window_size(&self) -> usize {
        self.inner.window_size()
    }

    fn window(&self, index: usize) -> Result<Window> {
        let mut w = self.inner.window(index)?;
        if self.stages.is_empty() {
            return Ok(w);
        }
        for stage in self.stages {
            w.y = stage.apply(&w.y)?;
        }
        w.reference = None;
        Ok(w)
    }

    fn space(&self) -> crate::learning::SourceSpace {
        self.inner.space()
    }
}

/// Convergence results of one Turbo pass.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub iteration: usize,
    pub vertical: ConvergenceReport,
    pub horizontal: ConvergenceReport,
    pub effective_var: f64,
    pub nmse_db: f64,
}

#[derive(Clone, Debug)]
pub struct TurboTraining {
    pub chain: ModelChain,
    pub reports: Vec<StageReport>,
    /// Set when a pass failed its checks and the chain was cut before it.
    pub truncated_at: Option<usize>,
}

/// Trains `iterations` passes. Pass `i` sees the raw source filtered by
/// passes `0..i`; labels never change. Every pass trains fresh models. Stops before the first pass whose
/// models fail the convergence predicates.
pub fn turbo_train(
    source: &dyn WindowSource,
    origin: ChainOrigin,
    iterations: usize,
    cfg: &TrainConfig,
) -> Result<TurboTraining> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    let base_cfg = match origin {
        ChainOrigin::Dedicated => cfg.clone(),
        ChainOrigin::Universal => cfg.for_universal(),
    };
    base_cfg.validate()?;
    let mut stages: Vec<ChainStage> = Vec::with_capacity(iterations);
    let mut reports = Vec::with_capacity(iterations);
    let mut truncated_at = None;
    for it in 0..iterations {
        let it_cfg = TrainConfig {
            seed: derive_seed(base_cfg.seed, TAG_ITERATION + it as u64),
            ..base_cfg.clone()
        };
        let chained = ChainedSource::new(source, &stages);
        let reference = match (it, origin) {
            (0, ChainOrigin::Dedicated) => ReferenceMode::PerWindow,
            (0, ChainOrigin::Universal) => ReferenceMode::PerWindowReported,
            (_, ChainOrigin::Dedicated) => ReferenceMode::Pooled,
            (_, ChainOrigin::Universal) => ReferenceMode::None,
        };
        let data = SubspaceData::collect(&chained, &it_cfg, reference)?;
        let out_v = train_subspace(&data, Subspace::Vertical, &it_cfg, meta_for(source, Subspace::Vertical, it as u32))?;
        let out_h =
            train_subspace(&data, Subspace::Horizontal, &it_cfg, meta_for(source, Subspace::Horizontal, it as u32))?;
        let mut stage = ChainStage {
            model_v: out_v.model,
            model_h: out_h.model,
            effective_var: f64::NAN,
            nmse_db: f64::NAN,
        };
        let (var, nmse) = validation_residual(&chained, &stage, data.n_train, data.vertical.len())?;
        stage.effective_var = var;
        stage.nmse_db = nmse;
        log::info!(
            "iteration {it}: effective var {var:.4e}, nmse {nmse:.3} dB, rel dist v {:?} h {:?}",
            out_v.report.rel_distance,
            out_h.report.rel_distance
        );
        let passed = out_v.report.passed && out_h.report.passed;
        reports.push(StageReport {
            iteration: it,
            vertical: out_v.report,
            horizontal: out_h.report,
            effective_var: var,
            nmse_db: nmse,
        });
        if !passed {
            log::warn!("iteration {it} failed its convergence checks; chain truncated to {it} passes");
            truncated_at = Some(it);
            break;
        }
        stages.push(stage);
    }
    if stages.is_empty() {
        return Err(Error::Diverged("the first Turbo pass did not converge".into()));
    }
    Ok(TurboTraining {
        chain: ModelChain {
            stages,
            origin,
            window: base_cfg.window,
        },
        reports,
        truncated_at,
    })
}

/// Residual power per element and NMSE of `stage` on windows `[from, to)`.
fn validation_residual(source: &dyn WindowSource, stage: &ChainStage, from: usize, to: usize) -> Result<(f64, f64)> {
    let parts: Vec<(NmseAccumulator, usize)> = (from..to)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let win = source.window(w)?;
            let est = stage.apply(&win.y)?;
            let mut acc = NmseAccumulator::default();
            for (e, h) in est.iter().zip(&win.h) {
                acc.add(e, h);
            }
            Ok((acc, est.len()))
        })
        .collect::<Result<_>>()?;
    let (m, n) = source.shape();
    let samples: usize = parts.iter().map(|p| p.1).sum();
    let acc = NmseAccumulator::combine(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
    Ok((acc.error_energy / (samples * m * n) as f64, acc.db()?))
}

/// Per-element power sums of residual real parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMoments {
    pub count: usize,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub s4: Vec<f64>,
}

impl ResidualMoments {
    pub fn new(elements: usize) -> Self {
        Self {
            count: 0,
            s1: vec![0.0; elements],
            s2: vec![0.0; elements],
            s3: vec![0.0; elements],
            s4: vec![0.0; elements],
        }
    }

    pub fn add(&mut self, estimate: &ComplexMatrix, truth: &ComplexMatrix) {
        for (k, (e, t)) in estimate.as_slice().iter().zip(truth.as_slice()).enumerate() {
            let x = e.re - t.re;
            let x2 = x * x;
            self.s1[k] += x;
            self.s2[k] += x2;
            self.s3[k] += x2 * x;
            self.s4[k] += x2 * x2;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (dst, src) in [
            (&mut self.s1, &other.s1),
            (&mut self.s2, &other.s2),
            (&mut self.s3, &other.s3),
            (&mut self.s4, &other.s4),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self.count += other.count;
    }

    fn central(n: f64, s1: f64, s2: f64, s3: f64, s4: f64) -> (f64, f64, f64, f64) {
        let mu = s1 / n;
        let m2 = s2 / n - mu * mu;
        let m3 = s3 / n - 3.0 * mu * s2 / n + 2.0 * mu.powi(3);
        let m4 = s4 / n - 4.0 * mu * s3 / n + 6.0 * mu * mu * s2 / n - 3.0 * mu.powi(4);
        (mu, m2, m3, m4)
    }

    /// Mean and variance of all real parts pooled together.
    pub fn pooled_mean_var(&self) -> (f64, f64) {
        let n = (self.count * self.s1.len()) as f64;
        let (mu, m2, _, _) = Self::central(n, pairwise_sum(&self.s1), pairwise_sum(&self.s2), 0.0, 0.0);
        (mu, m2)
    }

    /// Excess kurtosis of all real parts pooled together.
    pub fn pooled_excess_kurtosis(&self) -> f64 {
        let n = (self.count * self.s1.len()) as f64;
        let (_, m2, _, m4) = Self::central(
            n,
            pairwise_sum(&self.s1),
            pairwise_sum(&self.s2),
            pairwise_sum(&self.s3),
            pairwise_sum(&self.s4),
        );
        m4 / (m2 * m2) - 3.0
    }

    /// Mean over elements of each element's own skewness and excess
    /// kurtosis.
    pub fn standardized_shape(&self) -> (f64, f64) {
        let n = self.count as f64;
        let e = self.s1.len() as f64;
        let mut skew = 0.0;
        let mut kurt = 0.0;
        for k in 0..self.s1.len() {
            let (_, m2, m3, m4) = Self::central(n, self.s1[k], self.s2[k], self.s3[k], self.s4[k]);
            skew += m3 / m2.powf(1.5) / e;
            kurt += (m4 / (m2 * m2) - 3.0) / e;
        }
        (skew, kurt)
    }
}

/// NMSE and residual statistics after every pass of a chain.
#[derive(Clone, Debug)]
pub struct ChainEvaluation {
    pub start: usize,
    pub samples: usize,
    /// NMSE of the raw observations.
    pub input_nmse_db: f64,
    /// Mean per-element power of the raw noise.
    pub input_var: f64,
    /// NMSE after each executed pass.
    pub nmse_db: Vec<f64>,
    /// Mean per-element residual power after each executed pass.
    pub residual_var: Vec<f64>,
    /// Moments of the raw noise followed by those after each pass.
    pub moments: Vec<ResidualMoments>,
}

impl ChainEvaluation {
    pub fn final_nmse_db(&self) -> f64 {
        self.nmse_db.last().copied().unwrap_or(self.input_nmse_db)
    }

    /// `iteration,nmse_db,residual_var` with the raw input as iteration 0.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,nmse_db,residual_var\n");
        let _ = writeln!(out, "0,{:.6},{:.6e}", self.input_nmse_db, self.input_var);
        for (i, (n, v)) in self.nmse_db.iter().zip(&self.residual_var).enumerate() {
            let _ = writeln!(out, "{},{n:.6},{v:.6e}", self.start + i + 1);
        }
        out
    }
}

/// Runs the chain from `start` over `windows` windows of `source`.
pub fn evaluate_chain(chain: &ModelChain, source: &dyn WindowSource, windows: usize, start: usize) -> Result<ChainEvaluation> {
    if windows == 0 {
        return Err(Error::InvalidArgument("no evaluation windows".into()));
    }
    if start >= chain.len() {
        return Err(Error::InvalidArgument(format!("start {start} beyond a chain of {}", chain.len())));
    }
    if source.window_size() != chain.window {
        return Err(Error::Config("evaluation window differs from the chain window".into()));
    }
    let (m, n) = source.shape();
    let passes = chain.len() - start;
    let parts: Vec<(Vec<NmseAccumulator>, Vec<ResidualMoments>)> = (0..windows)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let win = source.window(w)?;
            let mut accs = vec![NmseAccumulator::default(); passes + 1];
            let mut moms = vec![ResidualMoments::new(m * n); passes + 1];
            for (y, h) in win.y.iter().zip(&win.h) {
                accs[0].add(y, h);
                moms[0].add(y, h);
            }
            let outputs = chain.run(win.y, start)?;
            for (p, est) in outputs.iter().enumerate() {
                for (e, h) in est.iter().zip(&win.h) {
                    accs[p + 1].add(e, h);
                    moms[p + 1].add(e, h);
                }
            }
            Ok((accs, moms))
        })
        .collect::<Result<_>>()?;
    let mut nmse = Vec::with_capacity(passes + 1);
    let mut var = Vec::with_capacity(passes + 1);
    let mut moments = Vec::with_capacity(passes + 1);
    let mut samples = 0;
    for p in 0..=passes {
        let acc = NmseAccumulator::combine(&parts.iter().map(|x| x.0[p]).collect::<Vec<_>>());
        let mut mom = ResidualMoments::new(m * n);
        for x in &parts {
            mom.merge(&x.1[p]);
        }
        samples = mom.count;
        nmse.push(acc.db()?);
        var.push(acc.error_energy / (mom.count * m * n) as f64);
        moments.push(mom);
    }
    Ok(ChainEvaluation {
        start,
        samples,
        input_nmse_db: nmse[0],
        input_var: var[0],
        nmse_db: nmse[1..].to_vec(),
        residual_var: var[1..].to_vec(),
        moments,
    })
}

/// Starting pass for an estimated input SNR.
pub fn select_start(chain: &ModelChain, snr_est_db: f64) -> usize {
    if chain.origin == ChainOrigin::Universal {
        let (lo, hi) = chain.stages[0].model_v.meta.snr_db;
        if snr_est_db < lo - SNR_MISMATCH_DB || snr_est_db > hi + SNR_MISMATCH_DB {
            log::warn!("SNR estimate {snr_est_db} dB outside the universal range [{lo}, {hi}] dB");
        }
        return 0;
    }
    let (best, dist) = chain
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| (i, (s.input_snr_db() - snr_est_db).abs()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    if dist > SNR_MISMATCH_DB {
        log::warn!("SNR estimate {snr_est_db} dB is {dist:.2} dB from the nearest trained stage");
    }
    best
}

/// One row of an inference trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub nmse_db: Option<f64>,
    pub residual_var: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub start: usize,
    pub estimates: Vec<ComplexMatrix>,
    pub trace: Vec<TraceRow>,
}

/// Runs the chain on observations, in windows of `chain.window`. With
/// `truths` the trace carries NMSE and residual power per pass.
pub fn turbo_infer(
    chain: &ModelChain,
    y: &[ComplexMatrix],
    snr_est_db: f64,
    truths: Option<&[ComplexMatrix]>,
) -> Result<Inference> {
    if chain.is_empty() {
        return Err(Error::InvalidArgument("empty chain".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    if let Some(t) = truths {
        if t.len() != y.len() {
            return Err(Error::Dimension("one channel per observation required".into()));
        }
    }
    let start = select_start(chain, snr_est_db);
    let passes = chain.len() - start;
    let chunks: Vec<&[ComplexMatrix]> = y.chunks(chain.window).collect();
    let outputs: Vec<Vec<Vec<ComplexMatrix>>> = chunks
        .par_iter()
        .map(|c| chain.run(c.to_vec(), start))
        .collect::<Result<_>>()?;
    let mut estimates = Vec::with_capacity(y.len());
    for out in &outputs {
        estimates.extend(out[passes - 1].iter().cloned());
    }
    let mut trace = Vec::with_capacity(passes);
    for p in 0..passes {
        let (nmse_db, residual_var) = match truths {
            Some(t) => {
                let mut acc = NmseAccumulator::default();
                let est = outputs.iter().flat_map(|o| o[p].iter());
                for (e, h) in est.zip(t) {
                    acc.add(e, h);
                }
                let (m, n) = y[0].shape();
                (Some(acc.db()?), Some(acc.error_energy / (y.len() * m * n) as f64))
            }
            None => (None, None),
        };
        trace.push(TraceRow {
            iteration: start + p,
            nmse_db,
            residual_var,
        });
    }
    Ok(Inference { start, estimates, trace })
}

/// Histogram of residual real parts with a moment-fitted Gaussian.
#[derive(Clone, Debug)]
pub struct PdfReport {
    pub centers: Vec<f64>,
    pub density: Vec<f64>,
    pub fitted: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Excess kurtosis of the pooled values.
    pub excess_kurtosis: f64,
    /// Mean per-element shape when every element is standardized by its own
    /// moments. Equal to the pooled values for raw input.
    pub standardized_skewness: f64,
    pub standardized_kurtosis: f64,
    /// Largest |empirical − fitted| density over the bins.
    pub max_abs_dev: f64,
    /// Jarque–Bera statistic of the standardized shape with one degree of
    /// freedom per channel sample, asymptotically χ²(2) under normality.
    pub jarque_bera: f64,
    pub samples: usize,
}

/// χ²(2) critical value at the 1% level.
pub const JB_CRITICAL_1PCT: f64 = 9.21;

impl PdfReport {
    pub fn is_normal_at_1pct(&self) -> bool {
        self.jarque_bera < JB_CRITICAL_1PCT
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,density,fitted_density\n");
        for ((c, d), f) in self.centers.iter().zip(&self.density).zip(&self.fitted) {
            let _ = writeln!(out, "{c:.6e},{d:.6e},{f:.6e}");
        }
        out
    }
}

/// Residual PDF over `[mean − 5σ, mean + 5σ]` split into `bins` bins.
pub fn residual_pdf(estimates: &[ComplexMatrix], truths: &[ComplexMatrix], bins: usize) -> Result<PdfReport> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::Dimension("one estimate per channel required".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("at least one bin".into()));
    }
    let values: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .flat_map(|(e, t)| e.as_slice().iter().zip(t.as_slice()).map(|(a, b)| a.re - b.re).collect::<Vec<_>>())
        .collect();
    let mut report = pdf_of(&values, bins)?;
    let mut moments = ResidualMoments::new(truths[0].rows() * truths[0].cols());
    for (e, t) in estimates.iter().zip(truths) {
        if e.shape() != t.shape() || t.shape() != truths[0].shape() {
            return Err(Error::Dimension("estimate and channel shapes differ".into()));
        }
        moments.add(e, t);
    }
    let (skew, kurt) = moments.standardized_shape();
    report.standardized_skewness = skew;
    report.standardized_kurtosis = kurt;
    report.jarque_bera = jarque_bera(estimates.len() as f64, skew, kurt);
    Ok(report)
}

fn jarque_bera(n: f64, skew: f64, kurt: f64) -> f64 {
    n / 6.0 * (skew * skew + kurt * kurt / 4.0)
}

/// Histogram and moment fit for raw values.
pub fn pdf_of(values: &[f64], bins: usize) -> Result<PdfReport> {
    let n = values.len() as f64;
    if values.len() < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2 = pairwise_sum(&dev.iter().map(|d| d * d).collect::<Vec<_>>()) / n;
    let m3 = pairwise_sum(&dev.iter().map(|d| d * d * d).collect::<Vec<_>>()) / n;
    let m4 = pairwise_sum(&dev.iter().map(|d| (d * d) * (d * d)).collect::<Vec<_>>()) / n;
    if !(m2 > 0.0) {
        return Err(Error::InvalidArgument("residuals have zero variance".into()));
    }
    let sd = m2.sqrt();
    let skewness = m3 / (m2 * sd);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let lo = mean - 5.0 * sd;
    let width = 10.0 * sd / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * m2).sqrt();
    let fitted: Vec<f64> = centers
        .iter()
        .map(|c| norm * (-(c - mean) * (c - mean) / (2.0 * m2)).exp())
        .collect();
    let max_abs_dev = density.iter().zip(&fitted).map(|(d, f)| (d - f).abs()).fold(0.0, f64::max);
    Ok(PdfReport {
        centers,
        density,
        fitted,
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        standardized_skewness: skewness,
        standardized_kurtosis: excess_kurtosis,
        max_abs_dev,
        jarque_bera: jarque_bera(n, skewness, excess_kurtosis),
        samples: values.len(),
    })
}

/// Consecutive-pass error comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub iteration: usize,
    /// Mean ‖X_i − H‖² of the pass input.
    pub before: f64,
    /// Mean ‖X_{i+1} − H‖² of the pass output.
    pub after: f64,
    pub holds: bool,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub flagged: Vec<usize>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Checks that every pass reduces the channel error on fresh data, within
/// [`AUDIT_TOLERANCE`].
pub fn monotonicity_audit(chain: &ModelChain, source: &dyn WindowSource, windows: usize) -> Result<AuditReport> {
    let eval = evaluate_chain(chain, source, windows, 0)?;
    let (m, n) = source.shape();
    let per_sample = (m * n) as f64;
    let mut before = eval.input_var * per_sample;
    let mut rows = Vec::with_capacity(chain.len());
    let mut flagged = Vec::new();
    for (i, v) in eval.residual_var.iter().enumerate() {
        let after = v * per_sample;
        let holds = after <= before * (1.0 + AUDIT_TOLERANCE);
        if !holds {
            flagged.push(i);
        }
        rows.push(AuditRow {
            iteration: i,
            before,
            after,
            holds,
        });
        before = after;
    }
    Ok(AuditReport { rows, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{complex_gaussian, sample_rng, SpatialConfig};
    use crate::learning::{DedicatedSource, WindowStats};

    fn small() -> (DedicatedSource, TrainConfig) {
        let cfg = TrainConfig {
            window: 64,
            samples: 64 * 60,
            max_steps: 800,
            patience: 200,
            ..TrainConfig::default()
        };
        let src = DedicatedSource::new(&SpatialConfig::reference().with_size(4, 4), 0.0, 21, 64).unwrap();
        (src, cfg)
    }

    #[test]
    fn window_covariance_matches_training_statistics() {
        let (src, _) = small();
        let w = src.window(0).unwrap();
        for sub in Subspace::BOTH {
            let s = WindowStats::from_window(&w.y, &w.h, sub).unwrap();
            assert_eq!(window_covariance(&w.y, sub).unwrap(), s.cyy);
        }
    }

    #[test]
    fn single_pass_chain_is_one_combining_step() {
        let (src, cfg) = small();
        let tr = turbo_train(&src, ChainOrigin::Dedicated, 1, &cfg).unwrap();
        assert_eq!(tr.chain.len(), 1);
        let w = src.window(100).unwrap();
        let inf = turbo_infer(&tr.chain, &w.y, 0.0, Some(&w.h)).unwrap();
        assert_eq!(inf.start, 0);
        assert_eq!(inf.estimates, tr.chain.stages[0].apply(&w.y).unwrap());
        assert_eq!(inf.trace.len(), 1);
        assert!(inf.trace[0].nmse_db.unwrap() < -3.0);
    }

    #[test]
    fn audit_flags_corrupted_stage_and_chain_roundtrips() {
        let (src, cfg) = small();
        let tr = turbo_train(&src, ChainOrigin::Dedicated, 3, &cfg).unwrap();
        assert_eq!(tr.chain.len(), 3);
        let fresh = DedicatedSource::new(&SpatialConfig::reference().with_size(4, 4), 0.0, 77, 64).unwrap();
        let audit = monotonicity_audit(&tr.chain, &fresh, 20).unwrap();
        assert!(audit.passed(), "{audit:?}");

        let mut bad = tr.chain.clone();
        bad.stages[1].model_v = NnModel::zeros(4);
        bad.stages[1].model_h = NnModel::zeros(4);
        let audit = monotonicity_audit(&bad, &fresh, 20).unwrap();
        assert_eq!(audit.flagged, vec![1]);

        let dir = tempfile::tempdir().unwrap();
        tr.chain.save(dir.path()).unwrap();
        let back = ModelChain::load(dir.path()).unwrap();
        let w = fresh.window(0).unwrap();
        assert_eq!(back.run(w.y.clone(), 0).unwrap(), tr.chain.run(w.y, 0).unwrap());
        assert_eq!(back.origin, ChainOrigin::Dedicated);
    }

    #[test]
    fn dedicated_start_follows_snr_estimate() {
        let (src, cfg) = small();
        let tr = turbo_train(&src, ChainOrigin::Dedicated, 2, &cfg).unwrap();
        let chain = tr.chain;
        assert_eq!(select_start(&chain, 0.0), 0);
        let later = chain.stages[1].input_snr_db();
        assert_eq!(select_start(&chain, later), 1);
        let universal = ModelChain {
            origin: ChainOrigin::Universal,
            ..chain
        };
        assert_eq!(select_start(&universal, later), 0);
    }

    #[test]
    fn evaluation_is_thread_count_independent() {
        let (src, cfg) = small();
        let chain = turbo_train(&src, ChainOrigin::Dedicated, 1, &cfg).unwrap().chain;
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| evaluate_chain(&chain, &src, 12, 0).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.nmse_db, b.nmse_db);
        assert_eq!(a.moments, b.moments);
    }

    #[test]
    fn awgn_pdf_fit() {
        let mut rng = sample_rng(3, 0);
        let z: Vec<ComplexMatrix> = (0..2000).map(|_| complex_gaussian(&mut rng, 4, 4, 1.0)).collect();
        let zero = vec![ComplexMatrix::zeros(4, 4); z.len()];
        let pdf = residual_pdf(&z, &zero, 60).unwrap();
        assert!((pdf.variance - 0.5).abs() < 0.01, "{}", pdf.variance);
        assert!(pdf.excess_kurtosis.abs() < 0.1);
        assert!(pdf.max_abs_dev < 0.03);
        assert!(pdf.to_csv().lines().count() == 61);

        let mut mom = ResidualMoments::new(16);
        for e in &z {
            mom.add(e, &ComplexMatrix::zeros(4, 4));
        }
        assert!((mom.pooled_mean_var().1 - pdf.variance).abs() < 1e-9);
        assert!((mom.pooled_excess_kurtosis() - pdf.excess_kurtosis).abs() < 1e-6);
    }

    #[test]
    fn pdf_detects_heavy_tails() {
        let mut rng = sample_rng(4, 0);
        // Scale mixture of two Gaussians has positive excess kurtosis.
        let values: Vec<f64> = (0..20_000)
            .map(|i| {
                let z = complex_gaussian(&mut rng, 1, 1, 2.0)[(0, 0)].re;
                if i % 2 == 0 { z } else { 3.0 * z }
            })
            .collect();
        let pdf = pdf_of(&values, 40).unwrap();
        assert!(pdf.excess_kurtosis > 1.0);
        assert!(!pdf.is_normal_at_1pct());
    }
}
