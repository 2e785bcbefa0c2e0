//! Experiment configuration, runners and CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{build_covariances, derive_seed, SpatialConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_horizontal, estimate_vertical, subspace_filters, KroneckerGenie, MetricsRow, NmseAccumulator,
};
use crate::learning::{DedicatedSource, TrainConfig, UniversalSource, UniversalSpace, WindowSource};
use crate::turbo::{evaluate_chain, residual_pdf, turbo_train, ChainOrigin, ModelChain, PdfReport};

/// Slack of the estimator ordering checks.
pub const ORDER_SLACK_DB: f64 = 0.1;
/// Slack of the per-iteration monotonicity check.
pub const ITERATION_SLACK_DB: f64 = 0.05;
/// Channel samples used per histogram.
pub const PDF_SAMPLES: usize = 10_000;
/// Training samples under `--paper-scale`.
pub const FULL_SCALE_TRAINING_SAMPLES: usize = 500_000;

const TAG_EVAL: u64 = 0x4556_414c;
const TAG_TRAIN: u64 = 0x5452_4e44;
const TAG_UNIVERSAL: u64 = 0x554e_4956;

/// Estimators a run can include.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ls,
    VOnly,
    HOnly,
    Arithmetic,
    Geometric,
    Genie,
    TurboDedicated,
    TurboUniversal,
}

impl Estimator {
    pub const CLOSED_FORM: [Estimator; 6] = [
        Estimator::Ls,
        Estimator::VOnly,
        Estimator::HOnly,
        Estimator::Arithmetic,
        Estimator::Geometric,
        Estimator::Genie,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ls => "ls",
            Estimator::VOnly => "v_only",
            Estimator::HOnly => "h_only",
            Estimator::Arithmetic => "arithmetic",
            Estimator::Geometric => "geometric",
            Estimator::Genie => "genie",
            Estimator::TurboDedicated => "turbo_dedicated",
            Estimator::TurboUniversal => "turbo_universal",
        }
    }

    pub fn is_closed_form(self) -> bool {
        Self::CLOSED_FORM.contains(&self)
    }
}

/// Array geometry in degrees, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialSpec {
    pub m: usize,
    pub n: usize,
    pub spacing: f64,
    pub spread_v_deg: f64,
    pub spread_h_deg: f64,
    pub doa_v_deg: f64,
    pub doa_h_deg: f64,
}

impl Default for SpatialSpec {
    fn default() -> Self {
        Self {
            m: 8,
            n: 16,
            spacing: 0.5,
            spread_v_deg: 1.0,
            spread_h_deg: 2.0,
            doa_v_deg: 50.0,
            doa_h_deg: 20.0,
        }
    }
}

impl SpatialSpec {
    pub fn to_config(&self) -> Result<SpatialConfig> {
        let cfg = SpatialConfig {
            m: self.m,
            n: self.n,
            spacing: self.spacing,
            spread_v: self.spread_v_deg.to_radians(),
            spread_h: self.spread_h_deg.to_radians(),
            doa_v: self.doa_v_deg.to_radians(),
            doa_h: self.doa_h_deg.to_radians(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A named universal training space in degrees and dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniversalSpec {
    pub name: String,
    pub doa_v_deg: [f64; 2],
    pub doa_h_deg: [f64; 2],
    pub snr_db: [f64; 2],
}

impl UniversalSpec {
    pub fn to_space(&self) -> UniversalSpace {
        UniversalSpace {
            doa_v: (self.doa_v_deg[0].to_radians(), self.doa_v_deg[1].to_radians()),
            doa_h: (self.doa_h_deg[0].to_radians(), self.doa_h_deg[1].to_radians()),
            snr_db: (self.snr_db[0], self.snr_db[1]),
        }
    }
}

/// One experiment, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub spatial: SpatialSpec,
    pub snr_db: Vec<f64>,
    pub estimators: Vec<Estimator>,
    /// Turbo passes per chain.
    pub iterations: usize,
    /// Monte-Carlo channel samples per evaluation, rounded up to whole
    /// windows.
    pub k_eval: usize,
    pub train: TrainConfig,
    pub universal: Vec<UniversalSpec>,
    /// Bins per residual histogram.
    pub pdf_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 1,
            spatial: SpatialSpec::default(),
            snr_db: vec![0.0],
            estimators: Estimator::CLOSED_FORM.to_vec(),
            iterations: 4,
            k_eval: 50_000,
            train: TrainConfig::default(),
            universal: Vec::new(),
            pdf_bins: 80,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_eval < 1000 {
            return Err(Error::Config("k_eval must be at least 1000".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_db must be a nonempty list of finite values".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.estimators.contains(&Estimator::TurboUniversal) && self.universal.is_empty() {
            return Err(Error::Config("turbo_universal needs a [[universal]] space".into()));
        }
        for u in &self.universal {
            u.to_space().validate()?;
        }
        self.spatial.to_config()?;
        self.train.validate()
    }

    /// Switches to the full-scale training set.
    pub fn paper_scale(mut self) -> Self {
        self.train.samples = FULL_SCALE_TRAINING_SAMPLES;
        self
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    fn eval_windows(&self) -> usize {
        self.k_eval.div_ceil(self.train.window)
    }
}

/// Provenance of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

/// Rows, check annotations and provenance of one run.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    /// Failed property checks, one line each.
    pub violations: Vec<String>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            rows: Vec::new(),
            violations: Vec::new(),
            provenance: Provenance::of(cfg)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let p = &self.provenance;
        let mut out = format!("# config_hash={} seed={} version={}\n", p.config_hash, p.seed, p.version);
        out.push_str(MetricsRow::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn find(&self, estimator: &str, snr_db: f64, iteration: Option<usize>) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.snr_db == snr_db && r.iteration == iteration)
    }
}

/// NMSE of every closed-form estimator on one shared Monte-Carlo batch.
pub fn evaluate_closed_form(
    spatial: &SpatialConfig,
    snr_db: f64,
    windows: usize,
    window: usize,
    seed: u64,
) -> Result<BTreeMap<Estimator, f64>> {
    let source = DedicatedSource::new(spatial, snr_db, seed, window)?;
    let cov = build_covariances(spatial, false)?;
    let n0 = source.n0();
    let fp = subspace_filters(&cov, n0)?;
    let geo = fp.geometric()?;
    let genie = KroneckerGenie::new(&cov, n0)?;
    let w_h_t = fp.w_h.transpose();
    let parts: Vec<[NmseAccumulator; 6]> = (0..windows)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let win = source.window(w)?;
            let mut acc = [NmseAccumulator::default(); 6];
            for (y, h) in win.y.iter().zip(&win.h) {
                let v = estimate_vertical(&fp, y)?;
                let hz = estimate_horizontal(&fp, y)?;
                let a = (&v + &hz).scale(0.5);
                acc[0].add(y, h);
                acc[1].add(&v, h);
                acc[2].add(&y.matmul(&w_h_t), h);
                acc[3].add(&a, h);
                acc[4].add(&geo.apply(y), h);
                acc[5].add(&genie.apply(y), h);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (k, est) in Estimator::CLOSED_FORM.iter().enumerate() {
        let acc = NmseAccumulator::combine(&parts.iter().map(|p| p[k]).collect::<Vec<_>>());
        out.insert(*est, acc.db()?);
    }
    Ok(out)
}

fn train_cfg_for(cfg: &ExperimentConfig, tag: u64, snr_db: f64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed ^ cfg.train.seed, tag ^ snr_db.to_bits()),
        ..cfg.train.clone()
    }
}

/// Trains a dedicated chain at `snr_db`.
pub fn train_dedicated_chain(cfg: &ExperimentConfig, snr_db: f64) -> Result<ModelChain> {
    let spatial = cfg.spatial.to_config()?;
    let tc = train_cfg_for(cfg, TAG_TRAIN, snr_db);
    let source = DedicatedSource::new(&spatial, snr_db, tc.seed, tc.window)?;
    log::info!("training dedicated chain at {snr_db} dB");
    Ok(turbo_train(&source, ChainOrigin::Dedicated, cfg.iterations, &tc)?.chain)
}

/// Trains a universal chain over `spec`.
pub fn train_universal_chain(cfg: &ExperimentConfig, spec: &UniversalSpec, iterations: usize) -> Result<ModelChain> {
    let spatial = cfg.spatial.to_config()?;
    let tc = train_cfg_for(cfg, TAG_UNIVERSAL ^ hash_name(&spec.name), 0.0);
    let source = UniversalSource::new(&spatial, spec.to_space(), tc.seed, tc.window)?;
    log::info!("training universal chain {:?}", spec.name);
    Ok(turbo_train(&source, ChainOrigin::Universal, iterations, &tc)?.chain)
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn eval_source(cfg: &ExperimentConfig, snr_db: f64) -> Result<DedicatedSource> {
    DedicatedSource::new(
        &cfg.spatial.to_config()?,
        snr_db,
        derive_seed(cfg.seed, TAG_EVAL ^ snr_db.to_bits()),
        cfg.train.window,
    )
}

/// Per-pass NMSE of `chain` on the evaluation batch at `snr_db`.
pub fn chain_trace(cfg: &ExperimentConfig, chain: &ModelChain, snr_db: f64) -> Result<Vec<f64>> {
    let source = eval_source(cfg, snr_db)?;
    Ok(evaluate_chain(chain, &source, cfg.eval_windows(), 0)?.nmse_db)
}

fn check_ordering(report: &mut ExperimentReport, snr_db: f64, nmse: &BTreeMap<Estimator, f64>) {
    let get = |e: Estimator| nmse.get(&e).copied();
    let pairs = [
        (Estimator::Genie, Estimator::Geometric),
        (Estimator::Geometric, Estimator::Arithmetic),
    ];
    for (lo, hi) in pairs {
        if let (Some(a), Some(b)) = (get(lo), get(hi)) {
            if a > b + ORDER_SLACK_DB {
                report
                    .violations
                    .push(format!("{snr_db} dB: {} {a:.3} above {} {b:.3}", lo.name(), hi.name()));
            }
        }
    }
    if let (Some(a), Some(v), Some(h)) = (get(Estimator::Arithmetic), get(Estimator::VOnly), get(Estimator::HOnly)) {
        if a > v.min(h) + ORDER_SLACK_DB {
            report.violations.push(format!("{snr_db} dB: arithmetic {a:.3} above single-subspace {:.3}", v.min(h)));
        }
    }
    if let (Some(v), Some(h), Some(ls)) = (get(Estimator::VOnly), get(Estimator::HOnly), get(Estimator::Ls)) {
        if v.min(h) > ls + ORDER_SLACK_DB {
            report.violations.push(format!("{snr_db} dB: single-subspace above LS"));
        }
    }
    if let Some(ls) = get(Estimator::Ls) {
        if (ls + snr_db).abs() > ORDER_SLACK_DB {
            report.violations.push(format!("{snr_db} dB: LS {ls:.3} dB differs from -SNR"));
        }
    }
    if let Some(g) = get(Estimator::Genie) {
        for (e, v) in nmse {
            if *v < g - ORDER_SLACK_DB {
                report.violations.push(format!("{snr_db} dB: {} {v:.3} below genie {g:.3}", e.name()));
            }
        }
    }
}

/// NMSE per estimator across the SNR grid.
pub fn run_nmse_vs_snr(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let spatial = cfg.spatial.to_config()?;
    let mut report = ExperimentReport::new(cfg)?;
    let universal = if cfg.estimators.contains(&Estimator::TurboUniversal) {
        Some(train_universal_chain(cfg, &cfg.universal[0], cfg.iterations)?)
    } else {
        None
    };
    for &snr in &cfg.snr_db {
        let closed = evaluate_closed_form(
            &spatial,
            snr,
            cfg.eval_windows(),
            cfg.train.window,
            derive_seed(cfg.seed, TAG_EVAL ^ snr.to_bits()),
        )?;
        let mut nmse = BTreeMap::new();
        for &e in &cfg.estimators {
            let value = match e {
                e if e.is_closed_form() => closed[&e],
                Estimator::TurboDedicated => {
                    let chain = train_dedicated_chain(cfg, snr)?;
                    *chain_trace(cfg, &chain, snr)?.last().expect("nonempty chain")
                }
                Estimator::TurboUniversal => {
                    let chain = universal.as_ref().expect("trained above");
                    *chain_trace(cfg, chain, snr)?.last().expect("nonempty chain")
                }
                _ => unreachable!(),
            };
            nmse.insert(e, value);
            report.rows.push(MetricsRow::new(&cfg.run_id, e.name(), snr, None, value));
        }
        check_ordering(&mut report, snr, &nmse);
    }
    Ok(report)
}

/// Dedicated Turbo NMSE per pass, with the genie bound, at every SNR.
pub fn run_nmse_vs_iteration(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let spatial = cfg.spatial.to_config()?;
    let cov = build_covariances(&spatial, false)?;
    let mut report = ExperimentReport::new(cfg)?;
    for &snr in &cfg.snr_db {
        let chain = train_dedicated_chain(cfg, snr)?;
        let trace = chain_trace(cfg, &chain, snr)?;
        if chain.len() < cfg.iterations {
            report
                .violations
                .push(format!("{snr} dB: chain truncated to {} of {} passes", chain.len(), cfg.iterations));
        }
        for (i, v) in trace.iter().enumerate() {
            report.rows.push(MetricsRow::new(&cfg.run_id, "turbo_dedicated", snr, Some(i), *v));
            if i > 0 && *v > trace[i - 1] + ITERATION_SLACK_DB {
                report.violations.push(format!("{snr} dB: pass {i} NMSE rose to {v:.3}"));
            }
        }
        let genie = KroneckerGenie::new(&cov, crate::channel::noise_power(snr)?)?.analytic_nmse_db();
        report.rows.push(MetricsRow::new(&cfg.run_id, "genie", snr, None, genie));
        if trace.iter().any(|v| *v < genie - ITERATION_SLACK_DB) {
            report.violations.push(format!("{snr} dB: a pass beat the genie bound"));
        }
    }
    Ok(report)
}

/// Dedicated against every configured universal space at the first SNR.
pub fn run_universal_comparison(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.universal.is_empty() {
        return Err(Error::Config("universal comparison needs at least one [[universal]] space".into()));
    }
    let snr = cfg.snr_db[0];
    let mut report = ExperimentReport::new(cfg)?;
    let dedicated = chain_trace(cfg, &train_dedicated_chain(cfg, snr)?, snr)?;
    for (i, v) in dedicated.iter().enumerate() {
        report.rows.push(MetricsRow::new(&cfg.run_id, "turbo_dedicated", snr, Some(i), *v));
    }
    let best = *dedicated.last().expect("nonempty chain");
    for spec in &cfg.universal {
        let trace = chain_trace(cfg, &train_universal_chain(cfg, spec, cfg.iterations)?, snr)?;
        let name = format!("turbo_universal_{}", spec.name);
        for (i, v) in trace.iter().enumerate() {
            report.rows.push(MetricsRow::new(&cfg.run_id, &name, snr, Some(i), *v));
        }
        let loss = trace.last().expect("nonempty chain") - best;
        report.rows.push(MetricsRow::new(&cfg.run_id, &format!("loss_{}", spec.name), snr, None, loss));
    }
    Ok(report)
}

/// Histogram reports per pass, the raw observation first.
pub fn run_pdf_tracking(cfg: &ExperimentConfig) -> Result<Vec<PdfReport>> {
    cfg.validate()?;
    let snr = cfg.snr_db[0];
    let chain = train_dedicated_chain(cfg, snr)?;
    let source = eval_source(cfg, snr)?;
    let windows = PDF_SAMPLES.min(cfg.k_eval).div_ceil(cfg.train.window);
    let per_window: Vec<(Vec<Vec<_>>, Vec<_>)> = (0..windows)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let win = source.window(w)?;
            let mut stages = vec![win.y.clone()];
            stages.extend(chain.run(win.y, 0)?);
            Ok((stages, win.h))
        })
        .collect::<Result<_>>()?;
    let truths: Vec<_> = per_window.iter().flat_map(|p| p.1.iter().cloned()).collect();
    (0..=chain.len())
        .map(|stage| {
            let est: Vec<_> = per_window.iter().flat_map(|p| p.0[stage].iter().cloned()).collect();
            residual_pdf(&est, &truths, cfg.pdf_bins)
        })
        .collect()
}

/// `M, N, ratio` lines of the training cost saving.
pub fn cost_table(sizes: &[(usize, usize)]) -> String {
    let mut out = String::from("m,n,cost_saving\n");
    for &(m, n) in sizes {
        let _ = writeln!(out, "{m},{n},{:.3}", crate::estimator::cost_saving(m, n));
    }
    out
}

/// `dir/name`, creating `dir`.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

/// Exit codes of [`cli`].
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const CHECK: i32 = 3;
}

#[derive(Parser, Debug)]
#[command(name = "turbo-ai", version, about = "Learned subspace MMSE channel estimation experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte-Carlo loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fail with exit code 3 when a property check is violated.
    #[arg(long, global = true)]
    check: bool,
    /// Train on the full-scale sample count.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train single-pass subspace models at the first configured SNR.
    Train,
    /// Train a dedicated Turbo chain per configured SNR.
    TurboTrain,
    /// Evaluate a stored chain.
    Eval {
        #[arg(long)]
        chain: PathBuf,
        /// Estimated input SNR in dB; defaults to the first configured SNR.
        #[arg(long)]
        snr_est: Option<f64>,
    },
    /// Run an NMSE sweep.
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::Snr)]
        kind: SweepKind,
    },
    /// Residual histograms per Turbo pass.
    Pdf,
    /// Print the training cost saving table.
    Cost {
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Write a channel batch file.
    ExportBatch {
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[arg(long)]
        snr: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Snr,
    Iteration,
    Universal,
}

enum Outcome {
    Done,
    Violations(Vec<String>),
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    if let Some(t) = parsed.threads {
        if t == 0 {
            eprintln!("--threads must be positive");
            return exit::USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let needs_config = !matches!(parsed.command, Command::Cost { .. } | Command::ExportBatch { .. });
    let cfg = match (&parsed.config, needs_config) {
        (Some(path), _) => match ExperimentConfig::load(path) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("error: {e}");
                return exit::USAGE;
            }
        },
        (None, true) => {
            eprintln!("error: this command requires --config <path>");
            return exit::USAGE;
        }
        (None, false) => None,
    };
    let cfg = cfg.map(|mut c| {
        if let Some(s) = parsed.seed {
            c.seed = s;
        }
        if parsed.paper_scale {
            c = c.paper_scale();
        }
        c
    });
    match run_command(&parsed, cfg) {
        Ok(Outcome::Done) => exit::OK,
        Ok(Outcome::Violations(v)) => {
            for line in &v {
                eprintln!("check violation: {line}");
            }
            if parsed.check && !v.is_empty() {
                exit::CHECK
            } else {
                exit::OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::RUNTIME
        }
    }
}

fn run_command(cli: &Cli, cfg: Option<ExperimentConfig>) -> Result<Outcome> {
    let out = &cli.out;
    match &cli.command {
        Command::Cost { m, n } => {
            if *m == 0 || *n == 0 {
                return Err(Error::InvalidArgument("array sizes must be positive".into()));
            }
            print!("{}", cost_table(&[(*m, *n)]));
            Ok(Outcome::Done)
        }
        Command::ExportBatch { k, snr } => {
            let (spatial, seed, default_snr) = match &cfg {
                Some(c) => (c.spatial.to_config()?, c.seed, c.snr_db[0]),
                None => (SpatialConfig::reference(), cli.seed.unwrap_or(1), 0.0),
            };
            let cov = build_covariances(&spatial, false)?;
            let h = crate::channel::sample_channels(&cov, *k, seed)?;
            let batch = crate::channel::observe(&h, snr.unwrap_or(default_snr), derive_seed(seed, TAG_EVAL))?;
            let path = output_path(out, "batch.bin")?;
            batch.write_to(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            println!("{}", path.display());
            Ok(Outcome::Done)
        }
        Command::Train => {
            let cfg = cfg.expect("config checked");
            let snr = cfg.snr_db[0];
            let tc = train_cfg_for(&cfg, TAG_TRAIN, snr);
            let source = DedicatedSource::new(&cfg.spatial.to_config()?, snr, tc.seed, tc.window)?;
            let data = crate::learning::SubspaceData::collect(&source, &tc, crate::learning::ReferenceMode::PerWindow)?;
            let mut violations = Vec::new();
            for sub in crate::learning::Subspace::BOTH {
                let meta = crate::learning::meta_for(&source, sub, 0);
                let outcome = crate::learning::train_subspace(&data, sub, &tc, meta)?;
                let path = output_path(out, &format!("model_{}.bin", sub.label()))?;
                outcome.model.save(&path)?;
                println!(
                    "{}: residual {:.4e} noise {:.4e} rel_distance {:?} max_row_energy {:.3} passed {}",
                    sub.label(),
                    outcome.report.residual,
                    outcome.report.noise_energy,
                    outcome.report.rel_distance,
                    outcome.report.max_row_energy,
                    outcome.report.passed
                );
                if !outcome.report.passed {
                    violations.push(format!("{} model failed its convergence checks", sub.label()));
                }
            }
            Ok(Outcome::Violations(violations))
        }
        Command::TurboTrain => {
            let cfg = cfg.expect("config checked");
            let mut violations = Vec::new();
            for &snr in &cfg.snr_db {
                let chain = train_dedicated_chain(&cfg, snr)?;
                let dir = out.join(format!("chain_{snr}dB"));
                chain.save(&dir)?;
                let audit = crate::turbo::monotonicity_audit(&chain, &eval_source(&cfg, snr)?, cfg.eval_windows())?;
                println!("{}: {} passes, audit flagged {:?}", dir.display(), chain.len(), audit.flagged);
                if chain.len() < cfg.iterations {
                    violations.push(format!("{snr} dB: chain truncated to {} passes", chain.len()));
                }
                if !audit.passed() {
                    violations.push(format!("{snr} dB: monotonicity audit flagged {:?}", audit.flagged));
                }
            }
            Ok(Outcome::Violations(violations))
        }
        Command::Eval { chain, snr_est } => {
            let cfg = cfg.expect("config checked");
            let chain = ModelChain::load(chain)?;
            let snr = snr_est.unwrap_or(cfg.snr_db[0]);
            let start = crate::turbo::select_start(&chain, snr);
            let eval = evaluate_chain(&chain, &eval_source(&cfg, snr)?, cfg.eval_windows(), start)?;
            let path = output_path(out, "trace.csv")?;
            std::fs::write(&path, eval.trace_csv())?;
            print!("{}", eval.trace_csv());
            let violations = eval
                .nmse_db
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[1] > w[0] + ITERATION_SLACK_DB)
                .map(|(i, w)| format!("pass {} NMSE rose to {:.3}", start + i + 1, w[1]))
                .collect();
            Ok(Outcome::Violations(violations))
        }
        Command::Sweep { kind } => {
            let cfg = cfg.expect("config checked");
            let (report, name) = match kind {
                SweepKind::Snr => (run_nmse_vs_snr(&cfg)?, "nmse_vs_snr.csv"),
                SweepKind::Iteration => (run_nmse_vs_iteration(&cfg)?, "nmse_vs_iteration.csv"),
                SweepKind::Universal => (run_universal_comparison(&cfg)?, "universal_comparison.csv"),
            };
            let path = output_path(out, name)?;
            report.write_csv(&path)?;
            println!("{}", path.display());
            Ok(Outcome::Violations(report.violations))
        }
        Command::Pdf => {
            let cfg = cfg.expect("config checked");
            let reports = run_pdf_tracking(&cfg)?;
            let mut summary = String::from("iteration,variance,excess_kurtosis,standardized_kurtosis,max_abs_dev\n");
            let mut violations = Vec::new();
            for (i, r) in reports.iter().enumerate() {
                std::fs::write(output_path(out, &format!("pdf_iteration{i}.csv"))?, r.to_csv())?;
                let _ = writeln!(
                    summary,
                    "{i},{:.6e},{:.5},{:.5},{:.5e}",
                    r.variance, r.excess_kurtosis, r.standardized_kurtosis, r.max_abs_dev
                );
                if r.standardized_kurtosis.abs() >= 0.1 {
                    violations.push(format!("iteration {i}: excess kurtosis {:.4}", r.standardized_kurtosis));
                }
                if i > 0 && r.variance >= reports[i - 1].variance {
                    violations.push(format!("iteration {i}: residual variance did not decrease"));
                }
            }
            std::fs::write(output_path(out, "pdf_summary.csv")?, &summary)?;
            print!("{summary}");
            Ok(Outcome::Violations(violations))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_hash() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let other = ExperimentConfig {
            seed: 2,
            ..cfg.clone()
        };
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("k_eval = 10").is_err());
        assert!(ExperimentConfig::from_toml("snr_db = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("estimators = [\"turbo_universal\"]").is_err());
        let cfg = ExperimentConfig::from_toml("seed = 5\n[spatial]\nm = 4\nn = 4\n").unwrap();
        assert_eq!(cfg.spatial.m, 4);
        assert_eq!(cfg.spatial.spread_h_deg, 2.0);
    }

    #[test]
    fn closed_form_sweep_orders_and_is_reproducible() {
        let cfg = ExperimentConfig {
            spatial: SpatialSpec {
                m: 4,
                n: 8,
                ..SpatialSpec::default()
            },
            snr_db: vec![0.0, 10.0],
            k_eval: 20_000,
            ..ExperimentConfig::default()
        };
        let a = run_nmse_vs_snr(&cfg).unwrap();
        assert!(a.violations.is_empty(), "{:?}", a.violations);
        let b = run_nmse_vs_snr(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("# config_hash="));
    }

    #[test]
    fn cost_table_lists_sizes() {
        let t = cost_table(&[(4, 8), (8, 16)]);
        assert!(t.contains("8,16,455.111"));
    }
}
