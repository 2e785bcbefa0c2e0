use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbo_ai::channel::*;
use turbo_ai::estimator::*;
use turbo_ai::harness::{run_nmse_vs_snr, ExperimentConfig};
use turbo_ai::learning::*;
use turbo_ai::numerics::*;
use turbo_ai::turbo::*;

const EVAL_WINDOWS: usize = 50_000usize.div_ceil(DEFAULT_WINDOW);
const KURTOSIS_WINDOWS: usize = 100_000usize.div_ceil(DEFAULT_WINDOW);
const AUDIT_WINDOWS: usize = 40;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Verdict>, id: usize, name: &'static str, started: Instant, pass: bool, detail: String) {
    println!(
        "criterion {id:>2} {} {name}: {detail} ({:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    out.push(Verdict { id, name, pass, detail });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn reference_filters(cfg: &SpatialConfig, snr_db: f64) -> (CovarianceSet, FilterPair, f64) {
    let cov = build_covariances(cfg, true).unwrap();
    let n0 = noise_power(snr_db).unwrap();
    let fp = subspace_filters(&cov, n0).unwrap();
    (cov, fp, n0)
}

fn closed_form_identities() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut products: f64 = 0.0;
    let mut combined: f64 = 0.0;
    for &(m, n) in &[(1, 1), (2, 3), (4, 8), (8, 16), (8, 16)] {
        let w_v = random_matrix(&mut rng, m, m);
        let w_h = random_matrix(&mut rng, n, n);
        let y = random_matrix(&mut rng, m, n);
        let op_v = kron(&ComplexMatrix::identity(n), &w_v);
        let op_h = kron(&w_h, &ComplexMatrix::identity(m));
        products = products
            .max(max_diff(&vec(&w_v.matmul(&y)), &op_v.apply(&vec(&y))))
            .max(max_diff(&vec(&y.matmul(&w_h.transpose())), &op_h.apply(&vec(&y))));
        let r_v = w_v.matmul(&w_v.adjoint());
        let r_h = w_h.matmul(&w_h.adjoint());
        let fp = subspace_filters(&CovarianceSet::new(r_v, r_h), 0.7).unwrap();
        let a = estimate_arithmetic(&fp, &y).unwrap();
        let g = estimate_geometric(&fp, &y).unwrap();
        combined = combined
            .max(max_diff(&vec(&a), &arithmetic_operator(&fp).apply(&vec(&y))))
            .max(max_diff(&vec(&g), &fp.geometric().unwrap().operator().apply(&vec(&y))));
    }

    let spatial = SpatialConfig::reference();
    let (cov, fp, n0) = reference_filters(&spatial, 0.0);
    let genie = genie_filter(&cov.full().unwrap(), n0).unwrap();
    let ops = DeviationOperators::new(&fp, &genie).unwrap();
    let batch = observe(&sample_channels(&cov, 20, 102).unwrap(), 0.0, 103).unwrap();
    let decomposition = batch
        .y
        .iter()
        .map(|y| ops.evaluate(y).unwrap().identity_residual)
        .fold(0.0, f64::max);
    let z = variance_diagnostics_sampled(&fp, n0, 2000, 104).unwrap().z_identity_residual();
    let pass = products <= 1e-9 && combined <= 1e-9 && decomposition <= 1e-9 && z <= 1e-12;
    (
        pass,
        format!("products {products:.1e}, combining {combined:.1e}, decomposition {decomposition:.1e}, z {z:.1e}"),
    )
}

fn oracle_equivalence() -> (bool, String) {
    let spatial = SpatialConfig::reference().with_size(2, 2);
    let (cov, fp, n0) = reference_filters(&spatial, 0.0);
    let r_full = cov.full().unwrap();
    let geo = fp.geometric().unwrap();
    let a_op = arithmetic_operator(&fp);
    let g_op = geo.operator();
    let batch = observe(&sample_channels(&cov, 10_000, 201).unwrap(), 0.0, 202).unwrap();
    let mut agree: f64 = 0.0;
    let mut acc = [NmseAccumulator::default(); 3];
    for (y, h) in batch.y.iter().zip(&batch.h) {
        let a = estimate_arithmetic(&fp, y).unwrap();
        let g = estimate_geometric(&fp, y).unwrap();
        agree = agree
            .max(max_diff(&vec(&a), &a_op.apply(&vec(y))))
            .max(max_diff(&vec(&g), &g_op.apply(&vec(y))));
        acc[0].add(&ordinary_oracle(&r_full, n0, y).unwrap(), h);
        acc[1].add(&g, h);
        acc[2].add(&a, h);
    }
    let [genie, geometric, arithmetic] = acc.map(|a| a.db().unwrap());
    let pass = agree <= 1e-9 && genie <= geometric + 0.1 && geometric <= arithmetic + 0.1;
    (
        pass,
        format!("operator agreement {agree:.1e}; genie {genie:.3} geometric {geometric:.3} arithmetic {arithmetic:.3} dB"),
    )
}

fn variance_bracket() -> (bool, String) {
    let (_, fp, n0) = reference_filters(&SpatialConfig::reference(), 0.0);
    let report = variance_diagnostics_sampled(&fp, n0, 100_000, 301).unwrap();
    let fraction = report.bracket_fraction(0.0);
    (
        fraction >= 0.99,
        format!(
            "{:.2}% of elements inside (rho N0/4, N0], mean var {:.4}, mean rho {:.4}",
            100.0 * fraction,
            report.mean_var_a(),
            report.mean_rho()
        ),
    )
}

fn gradient_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut model = NnModel::new(2, 0.3, &mut rng).unwrap();
    for b in model.params.blocks_mut() {
        for v in b.iter_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let src = DedicatedSource::new(&SpatialConfig::reference().with_size(2, 2), 0.0, 402, 32).unwrap();
    let stats: Vec<WindowStats> = (0..4)
        .map(|i| {
            let w = src.window(i).unwrap();
            WindowStats::from_window(&w.y, &w.h, Subspace::Horizontal).unwrap()
        })
        .collect();
    let batch: Vec<&WindowStats> = stats.iter().collect();
    let (_, grad) = loss_and_grad(&model, &batch).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for block in 0..4 {
        for i in 0..model.params.blocks()[block].len() {
            let mut plus = model.clone();
            plus.params.blocks_mut()[block][i] += step;
            let mut minus = model.clone();
            minus.params.blocks_mut()[block][i] -= step;
            let fd = (loss_and_grad(&plus, &batch).unwrap().0 - loss_and_grad(&minus, &batch).unwrap().0) / (2.0 * step);
            let an = grad.blocks()[block][i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

fn turbo_trace(chain: &ModelChain, source: &dyn WindowSource) -> Vec<f64> {
    evaluate_chain(chain, source, EVAL_WINDOWS, 0).unwrap().nmse_db
}

fn fmt_trace(trace: &[f64]) -> String {
    trace.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn universal(base: &SpatialConfig, space: UniversalSpace, iterations: usize, seed: u64) -> TurboTraining {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let source = UniversalSource::new(base, space, seed, cfg.window).unwrap();
    turbo_train(&source, ChainOrigin::Universal, iterations, &cfg).unwrap()
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();
    let spatial = SpatialConfig::reference();
    let deg = f64::to_radians;

    let t = Instant::now();
    let (pass, detail) = closed_form_identities();
    record(&mut verdicts, 1, "closed-form identities", t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = oracle_equivalence();
    record(&mut verdicts, 2, "oracle equivalence", t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = variance_bracket();
    record(&mut verdicts, 3, "noise variance bracket", t, pass, detail);

    let t = Instant::now();
    let worst_grad = gradient_check();
    let train_cfg = TrainConfig {
        seed: 501,
        ..TrainConfig::default()
    };
    let train_source = DedicatedSource::new(&spatial, 0.0, 501, train_cfg.window).unwrap();
    let dedicated = turbo_train(&train_source, ChainOrigin::Dedicated, 4, &train_cfg).unwrap();
    let first = &dedicated.reports[0];
    let pass = first.vertical.passed && first.horizontal.passed && worst_grad <= 1e-4;
    record(
        &mut verdicts,
        4,
        "dedicated training convergence",
        t,
        pass,
        format!(
            "vertical residual {:.3e}/{:.3e} distance {:.3}, horizontal residual {:.3e}/{:.3e} distance {:.3}, gradient error {worst_grad:.1e}",
            first.vertical.residual,
            first.vertical.noise_energy,
            first.vertical.rel_distance.unwrap_or(f64::NAN),
            first.horizontal.residual,
            first.horizontal.noise_energy,
            first.horizontal.rel_distance.unwrap_or(f64::NAN),
        ),
    );

    let t = Instant::now();
    let eval0 = DedicatedSource::new(&spatial, 0.0, 502, DEFAULT_WINDOW).unwrap();
    let genie0 = KroneckerGenie::new(&build_covariances(&spatial, false).unwrap(), noise_power(0.0).unwrap())
        .unwrap()
        .analytic_nmse_db();
    let trace = turbo_trace(&dedicated.chain, &eval0);
    let dedicated_final = *trace.last().unwrap();
    let gap = dedicated_final - genie0;
    let monotone = trace.windows(2).all(|w| w[1] <= w[0] + 0.05);
    record(
        &mut verdicts,
        5,
        "dedicated Turbo gap to genie",
        t,
        dedicated.chain.len() == 4 && gap <= 0.5 && monotone,
        format!("passes {} NMSE [{}] dB, genie {genie0:.3} dB, gap {gap:.3} dB", dedicated.chain.len(), fmt_trace(&trace)),
    );

    let t = Instant::now();
    let sweep = ExperimentConfig {
        run_id: "acceptance".into(),
        seed: 601,
        snr_db: vec![0.0, 5.0, 10.0, 15.0],
        ..ExperimentConfig::default()
    };
    let report = run_nmse_vs_snr(&sweep).unwrap();
    let summary = sweep
        .snr_db
        .iter()
        .map(|&s| {
            let get = |e: &str| report.find(e, s, None).unwrap().nmse_db;
            format!(
                "{s} dB: genie {:.2} geo {:.2} arith {:.2} v {:.2} h {:.2} ls {:.2}",
                get("genie"),
                get("geometric"),
                get("arithmetic"),
                get("v_only"),
                get("h_only"),
                get("ls")
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    record(
        &mut verdicts,
        6,
        "estimator ordering across SNR",
        t,
        report.violations.is_empty(),
        if report.violations.is_empty() { summary } else { format!("{summary}; {}", report.violations.join("; ")) },
    );

    let t = Instant::now();
    let snr_only = universal(&spatial, UniversalSpace::snr_only(&spatial, (0.0, 15.0)), 4, 701);
    let full = universal(
        &spatial,
        UniversalSpace {
            doa_v: (deg(30.0), deg(90.0)),
            doa_h: (deg(-60.0), deg(60.0)),
            snr_db: (0.0, 15.0),
        },
        4,
        702,
    );
    let snr_trace = turbo_trace(&snr_only.chain, &eval0);
    let full_trace = turbo_trace(&full.chain, &eval0);
    let snr_loss = snr_trace.last().unwrap() - dedicated_final;
    let full_final = *full_trace.last().unwrap();
    let full_loss = full_final - dedicated_final;
    let pass = (0.5..=2.5).contains(&snr_loss) && (2.5..=5.5).contains(&full_loss) && full_final <= -8.0;
    record(
        &mut verdicts,
        7,
        "universal training margins",
        t,
        pass,
        format!(
            "SNR-only [{}] loss {snr_loss:.3} dB; full sector [{}] loss {full_loss:.3} dB",
            fmt_trace(&snr_trace),
            fmt_trace(&full_trace)
        ),
    );

    let t = Instant::now();
    let spot = universal(
        &spatial,
        UniversalSpace {
            doa_v: (deg(40.0), deg(60.0)),
            doa_h: (deg(10.0), deg(30.0)),
            snr_db: (0.0, 15.0),
        },
        3,
        801,
    );
    let eval07 = DedicatedSource::new(&spatial, 0.7, 802, DEFAULT_WINDOW).unwrap();
    let genie07 = KroneckerGenie::new(&build_covariances(&spatial, false).unwrap(), noise_power(0.7).unwrap())
        .unwrap()
        .analytic_nmse_db();
    let spot_trace = turbo_trace(&spot.chain, &eval07);
    let spot_gap = spot_trace.last().unwrap() - genie07;
    record(
        &mut verdicts,
        8,
        "universal spot check at 0.7 dB",
        t,
        spot.chain.len() == 3 && spot_gap <= 3.5,
        format!("[{}] dB, genie {genie07:.3} dB, gap {spot_gap:.3} dB", fmt_trace(&spot_trace)),
    );

    let t = Instant::now();
    let (small, large) = (cost_saving(4, 8), cost_saving(8, 16));
    record(
        &mut verdicts,
        9,
        "training cost saving",
        t,
        (50.0..=60.0).contains(&small) && (450.0..=460.0).contains(&large),
        format!("(4,8) {small:.2}, (8,16) {large:.2}"),
    );

    let t = Instant::now();
    let eval = evaluate_chain(&dedicated.chain, &eval0, KURTOSIS_WINDOWS, 0).unwrap();
    let kurtosis: Vec<f64> = eval.moments.iter().map(|m| m.standardized_shape().1).collect();
    record(
        &mut verdicts,
        10,
        "residual Gaussianity",
        t,
        kurtosis.iter().all(|k| k.abs() < 0.1),
        format!("excess kurtosis per pass [{}] over {} samples", fmt_trace(&kurtosis), eval.samples),
    );

    let t = Instant::now();
    let fresh = DedicatedSource::new(&spatial, 0.0, 1101, DEFAULT_WINDOW).unwrap();
    let mut flagged = Vec::new();
    for (name, chain) in [
        ("dedicated", &dedicated.chain),
        ("snr-only", &snr_only.chain),
        ("full sector", &full.chain),
        ("spot", &spot.chain),
    ] {
        let audit = monotonicity_audit(chain, &fresh, AUDIT_WINDOWS).unwrap();
        if !audit.passed() {
            flagged.push(format!("{name} {:?}", audit.flagged));
        }
    }
    let mut corrupted = dedicated.chain.clone();
    let middle = corrupted.len() / 2;
    corrupted.stages[middle].model_v = NnModel::zeros(corrupted.stages[middle].model_v.dim);
    corrupted.stages[middle].model_h = NnModel::zeros(corrupted.stages[middle].model_h.dim);
    let injected = monotonicity_audit(&corrupted, &fresh, AUDIT_WINDOWS).unwrap();
    record(
        &mut verdicts,
        11,
        "monotonicity audit",
        t,
        flagged.is_empty() && injected.flagged == vec![middle],
        format!("trained chains flagged {flagged:?}, corrupted pass {middle} flagged as {:?}", injected.flagged),
    );

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{} {} ({})", v.id, v.name, v.detail))
        .collect();
    println!("{} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
