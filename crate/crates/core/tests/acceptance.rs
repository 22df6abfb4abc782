//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! with the measured values, then asserts.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use engine_health::context::{fit_context, ContextOptions, CovarianceKind};
use engine_health::correction::{
    fit_correction, fit_correction_with_stats, smooth_residuals, ResidualRow, ResidualStage, ResidualTable,
    SmoothingScope,
};
use engine_health::detect::{percentile, DetectionMode};
use engine_health::eval::{score, DetectionScore, TruthLabeling};
use engine_health::inject::{inject, signature_set, AmplitudeRange};
use engine_health::pipeline::{project, test_pipeline, train_pipeline, verdicts, ModelBundle, PipelineConfig};
use engine_health::schema::{split_train_test, DataTable, NormalizationCoefficients, RowKey, ENVIRONMENTAL};
use engine_health::som::{batch_epoch, distance_to_map, SomModel};
use engine_health::synth::{generate, GeneratorConfig};

fn report(n: u32, name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!(
        "criterion {n:>2} {name:<32} {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn single_series(n: usize) -> ResidualTable {
    let key = |t: usize| RowKey {
        engine_id: 1,
        timestamp: t as i64,
    };
    ResidualTable {
        variables: vec!["EXH".into()],
        stage: ResidualStage::Rescaled,
        rows: (0..n)
            .map(|t| ResidualRow {
                key: key(t),
                span: (key(t), key(t)),
                values: vec![(t as f64 * 0.37).sin()],
            })
            .collect(),
    }
}

#[test]
fn criterion_01_smoothing_arithmetic() {
    let start = Instant::now();
    let mut counts = Vec::new();
    for n in [2000, 472] {
        for scope in [SmoothingScope::Engine, SmoothingScope::Global] {
            counts.push(smooth_residuals(&single_series(n), 7, scope).unwrap().len());
        }
    }
    let elapsed = start.elapsed();
    let pass = counts == [1994, 1994, 466, 466] && elapsed < Duration::from_secs(1);
    assert!(report(1, "smoothing arithmetic", pass, format!("counts {counts:?}, {elapsed:.2?}")));
}

#[test]
fn criterion_02_correction_recovery() {
    let start = Instant::now();
    let (table, truth) = generate(&GeneratorConfig::new(16, 2000, 5, 21).with_noise(0.0)).unwrap();
    let model = fit_correction(&table, &truth.regime_labels, 5).unwrap();
    let mut max_err = 0.0f64;
    for (fit, tru) in model.coefficients.iter().zip(&truth.coefficients) {
        let (a, b) = (fit.reference_aligned().flatten(), tru.reference_aligned().flatten());
        for (x, y) in a.iter().zip(&b) {
            max_err = max_err.max((x - y).abs());
        }
    }

    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let (table, truth) = generate(&GeneratorConfig::new(16, 2000, 5, 100 + seed).with_noise(0.05)).unwrap();
        let fit = fit_correction_with_stats(&table, &truth.regime_labels, 5).unwrap();
        for ((est, se), tru) in fit.model.coefficients.iter().zip(&fit.std_errors).zip(&truth.coefficients) {
            let (est, se, tru) = (est.flatten(), se.flatten(), tru.reference_aligned().flatten());
            for ((e, s), t) in est.iter().zip(&se).zip(&tru) {
                // Reference levels are fixed at zero and carry no error.
                if *s == 0.0 {
                    continue;
                }
                total += 1;
                inside += usize::from((e - t).abs() <= 3.0 * s);
            }
        }
    }
    let coverage = inside as f64 / total as f64;
    let elapsed = start.elapsed();
    let pass = max_err <= 1e-6 && coverage >= 0.95 && elapsed < Duration::from_secs(30);
    assert!(report(
        2,
        "correction recovery",
        pass,
        format!("noiseless max error {max_err:.2e}, 3-SE coverage {coverage:.4} of {total}, {elapsed:.2?}")
    ));
}

fn exhaustive_scan(x: &[f64], prototypes: &[Vec<f64>]) -> (f64, usize) {
    let mut best_d = f64::INFINITY;
    let mut best_u = 0;
    for u in 0..prototypes.len() {
        let mut d = 0.0;
        for j in 0..x.len() {
            d += (x[j] - prototypes[u][j]) * (x[j] - prototypes[u][j]);
        }
        if d < best_d {
            best_d = d;
            best_u = u;
        }
    }
    (best_d, best_u)
}

fn protocol_bundle(seed: u64) -> (ModelBundle, DataTable) {
    let (table, _) = generate(&GeneratorConfig::protocol_scale(seed)).unwrap();
    let (train, test) = split_train_test(&table, 2000, seed).unwrap();
    let bundle = train_pipeline(
        &train,
        &PipelineConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    (bundle, test)
}

#[test]
fn criterion_03_distance_oracle() {
    let (bundle, _) = protocol_bundle(3);
    assert_eq!((bundle.som.rows, bundle.som.cols), (7, 7));
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..bundle.som.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = distance_to_map(&x, &bundle.som).unwrap();
        let want = exhaustive_scan(&x, &bundle.som.prototypes);
        if got.0.to_bits() != want.0.to_bits() || got.1 != want.1 {
            mismatches += 1;
        }
    }
    assert!(report(3, "distance oracle", mismatches == 0, format!("{mismatches} mismatches of 1000")));
}

#[test]
fn criterion_04_percentile_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for i in 0..500 {
        let n = rng.random_range(1..=5000usize);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let p = [50u64, 95, 99][i % 3];
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((p as usize * n + 99) / 100).max(1);
        if percentile(&xs, p as f64).unwrap().to_bits() != sorted[rank - 1].to_bits() {
            mismatches += 1;
        }
    }
    assert!(report(4, "percentile oracle", mismatches == 0, format!("{mismatches} mismatches of 500")));
}

#[test]
fn criterion_05_global_false_alarm_control() {
    let start = Instant::now();
    let mut rates = Vec::new();
    let mut min_rows = usize::MAX;
    for seed in 0..20 {
        let (table, _) = generate(&GeneratorConfig::protocol_scale(500 + seed).with_rows(3300)).unwrap();
        let (train, test) = split_train_test(&table, 2000, seed).unwrap();
        let bundle = train_pipeline(
            &train,
            &PipelineConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let v = test_pipeline(&test, &bundle, DetectionMode::Global).unwrap();
        min_rows = min_rows.min(v.len());
        rates.push(v.iter().filter(|r| !r.verdict.healthy).count() as f64 / v.len() as f64);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let elapsed = start.elapsed();
    let pass = (0.002..=0.03).contains(&mean) && min_rows >= 1000 && elapsed < Duration::from_secs(60);
    assert!(report(
        5,
        "global false-alarm control",
        pass,
        format!("mean flag rate {:.2}% over 20 seeds, >= {min_rows} test rows, {elapsed:.2?}", 100.0 * mean)
    ));
}

/// Inject each default signature at 3-4 residual standard deviations into
/// the held-out part of a 2472-row table and score both decision rules.
fn detection_run(seed: u64, labeling: TruthLabeling) -> Vec<(String, DetectionScore, DetectionScore)> {
    let (bundle, test) = protocol_bundle(seed);
    let sigs = signature_set(AmplitudeRange { min: 3.0, max: 4.0 });
    sigs.iter()
        .enumerate()
        .map(|(i, sig)| {
            let raw = bundle.raw_signature(sig).unwrap();
            let (corrupted, record) = inject(&test, &raw, 30, seed * 100 + i as u64).unwrap();
            let proj = project(&corrupted, &bundle).unwrap();
            let rec = std::slice::from_ref(&record);
            let g = score(&verdicts(&proj, &bundle.thresholds, DetectionMode::Global), rec, labeling).unwrap();
            let l = score(&verdicts(&proj, &bundle.thresholds, DetectionMode::Local), rec, labeling).unwrap();
            (sig.name.clone(), g, l)
        })
        .collect()
}

#[test]
fn criterion_06_end_to_end_detection() {
    let start = Instant::now();
    let rows = detection_run(6, TruthLabeling::default());
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    for (name, g, l) in &rows {
        let ok = g.tpr >= 0.95 && g.pfa <= 0.35 && l.tpr >= 0.95;
        pass &= ok;
        println!(
            "    {name:<10} anomalies {:>3}  global tpr {:.3} pfa {:.3}  local tpr {:.3} pfa {:.3}{}",
            g.anomalous_rows,
            g.tpr,
            g.pfa,
            l.tpr,
            l.pfa,
            if ok { "" } else { "  <- below tolerance" }
        );
    }
    let min_tpr = rows.iter().map(|r| r.1.tpr.min(r.2.tpr)).fold(1.0, f64::min);
    let max_pfa = rows.iter().map(|r| r.1.pfa).fold(0.0, f64::max);
    assert!(report(
        6,
        "end-to-end detection",
        pass,
        format!("min tpr {min_tpr:.3}, max global pfa {max_pfa:.3}, {elapsed:.2?}")
    ));
}

#[test]
fn criterion_07_local_global_degeneracy() {
    let (table, _) = generate(&GeneratorConfig::protocol_scale(7)).unwrap();
    let (train, test) = split_train_test(&table, 2000, 7).unwrap();
    let cfg = PipelineConfig {
        seed: 7,
        min_local_count: usize::MAX,
        ..Default::default()
    };
    let bundle = train_pipeline(&train, &cfg).unwrap();
    let max_count = bundle.thresholds.local_counts.iter().max().copied().unwrap_or(0);
    let g = test_pipeline(&test, &bundle, DetectionMode::Global).unwrap();
    let l = test_pipeline(&test, &bundle, DetectionMode::Local).unwrap();
    let differ = g
        .iter()
        .zip(&l)
        .filter(|(a, b)| {
            a.key != b.key
                || a.verdict.healthy != b.verdict.healthy
                || a.verdict.threshold_used.to_bits() != b.verdict.threshold_used.to_bits()
        })
        .count();
    let pass = differ == 0 && g.len() == l.len() && bundle.thresholds.fallback_count() == bundle.som.units();
    assert!(report(
        7,
        "local == global degeneracy",
        pass,
        format!("{differ} differing verdicts of {}, largest unit count {max_count}", g.len())
    ));
}

#[test]
fn criterion_08_som_kmeans_degeneracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let protos: Vec<Vec<f64>> = points.iter().step_by(11).take(9).cloned().collect();
    let model = SomModel::new(3, 3, protos.clone()).unwrap();
    let som = batch_epoch(&model, &points, 0.0);

    // One Lloyd step: every center moves to the mean of its members.
    let mut sums = vec![vec![0.0; 3]; 9];
    let mut counts = vec![0usize; 9];
    for x in &points {
        let nearest = (0..9)
            .min_by(|&a, &b| {
                let da: f64 = x.iter().zip(&protos[a]).map(|(p, q)| (p - q).powi(2)).sum();
                let db: f64 = x.iter().zip(&protos[b]).map(|(p, q)| (p - q).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        counts[nearest] += 1;
        for j in 0..3 {
            sums[nearest][j] += x[j];
        }
    }
    let mut max_diff = 0.0f64;
    for u in 0..9 {
        for j in 0..3 {
            let lloyd = if counts[u] == 0 { protos[u][j] } else { sums[u][j] / counts[u] as f64 };
            max_diff = max_diff.max((lloyd - som.prototypes[u][j]).abs());
        }
    }
    assert!(report(8, "SOM radius 0 == Lloyd step", max_diff <= 1e-10, format!("max difference {max_diff:.2e}")));
}

#[test]
fn criterion_09_em_monotonicity() {
    let mut fits = 0;
    let mut worst = 0.0f64;
    let mut check = |trace: &[f64]| {
        fits += 1;
        for w in trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    };
    // The environmental data of every synthetic table used by this suite.
    let mut tables: Vec<DataTable> = [3, 6, 7, 1000]
        .iter()
        .map(|&s| generate(&GeneratorConfig::protocol_scale(s)).unwrap().0)
        .collect();
    tables.extend((0..20).map(|s| generate(&GeneratorConfig::protocol_scale(500 + s).with_rows(3300)).unwrap().0));
    for (i, table) in tables.iter().enumerate() {
        let (train, _) = split_train_test(table, 2000, i as u64).unwrap();
        let norm = NormalizationCoefficients::fit(&train).unwrap();
        let env = norm.apply(&train).unwrap().columns(&ENVIRONMENTAL).unwrap();
        for covariance in [CovarianceKind::Full, CovarianceKind::Diagonal] {
            for k in [1, 3, 5] {
                let opts = ContextOptions {
                    k,
                    covariance,
                    seed: i as u64,
                    ..Default::default()
                };
                check(&fit_context(&env, &ENVIRONMENTAL, &opts).unwrap().model.log_likelihood_trace);
            }
        }
    }
    let pass = worst <= 1e-9;
    assert!(report(
        9,
        "EM monotonicity",
        pass,
        format!("{fits} fits, largest decrease {worst:.2e}")
    ));
}

fn cli_run(dir: &std::path::Path) -> Vec<Vec<u8>> {
    let bin = env!("CARGO_BIN_EXE_engine-health");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .current_dir(dir)
            .args(["--seed", "10"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["generate", "--out", "data.csv"]);
    run(&["split", "--input", "data.csv", "--train", "2000", "--train-out", "train.csv", "--test-out", "test.csv"]);
    run(&["train", "--input", "train.csv", "--out", "bundle.json"]);
    run(&[
        "inject", "--input", "test.csv", "--signature", "Defect 7", "--bundle", "bundle.json", "--out", "bad.csv",
        "--record", "record.json",
    ]);
    run(&["detect", "--input", "bad.csv", "--bundle", "bundle.json", "--out", "global.csv", "--plot", "plot.svg"]);
    run(&["--mode", "local", "detect", "--input", "bad.csv", "--bundle", "bundle.json", "--out", "local.csv"]);
    run(&["eval", "--case", "record.json,global.csv,local.csv", "--out", "report.csv"]);
    ["bundle.json", "bad.csv", "global.csv", "local.csv", "plot.svg", "report.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn criterion_10_reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (cli_run(a.path()), cli_run(b.path()));
    let identical = ra.iter().zip(&rb).filter(|(x, y)| x == y).count();
    assert!(report(
        10,
        "byte-identical reruns",
        identical == ra.len(),
        format!("{identical} of {} artifacts identical", ra.len())
    ));
}
