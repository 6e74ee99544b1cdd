//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) before asserting.
//!
//! Tests share one lock so that the timed criteria never compete for the CPU
//! with the r₀ sweep, which is trained once and reused by criteria 5–7.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use lsepool_cli::{
    cmd_sweep_r0, cmd_train, load_split, sweep_run_dir, RunConfig, SweepRow, CHECKPOINT_FILE, HISTORY_FILE,
};
use lsepool_core::data::Split;
use lsepool_core::gradcheck::{run_suite, tiny_model_config, SuiteConfig, OPS};
use lsepool_core::graph::Graph;
use lsepool_core::metrics::{binarize, continuous_dice, evaluate, roc_auc, MetricsReport};
use lsepool_core::model::{load_checkpoint, Model};
use lsepool_core::pooling::{nor_log_complement, pool_avg, pool_gm, pool_lse_lba, pool_max, pool_nor};
use lsepool_core::tensor::Tensor;
use lsepool_core::train::predict_all;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line, then fails the test if it did not pass.
fn verdict(n: u32, title: &str, checks: &[(bool, String)]) {
    let passed = checks.iter().all(|(ok, _)| *ok);
    let detail: Vec<String> = checks
        .iter()
        .map(|(ok, d)| format!("{}{d}", if *ok { "" } else { "✗ " }))
        .collect();
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "criterion {n}: {}  {title}  [{}]",
        if passed { "PASS" } else { "FAIL" },
        detail.join("; ")
    );
    assert!(passed, "criterion {n} ({title}) failed: {}", detail.join("; "));
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let report = run_suite(&SuiteConfig::standard()).unwrap();
    let elapsed = start.elapsed();
    let _ = write!(std::io::stderr(), "{}", report.render());
    let params = Model::<f64>::build(tiny_model_config(0)).unwrap().param_count();
    let names: Vec<&str> = report.ops.iter().map(|o| o.op.as_str()).collect();
    let worst = report.ops.iter().map(|o| o.worst_rel_err).fold(0.0, f64::max);
    verdict(
        1,
        "finite-difference gradient checks",
        &[
            (
                report.passed(),
                format!(
                    "{}/{} ops, worst rel err {worst:.2e} ≤ {:.0e}",
                    report.ops.len() - report.failures().len(),
                    report.ops.len(),
                    report.tolerance
                ),
            ),
            (report.tolerance <= 1e-4, format!("tolerance {:.0e}", report.tolerance)),
            (report.ops.iter().all(|o| o.seeds == 5), "5 seeds".into()),
            (
                names == OPS && names.contains(&"pool_lse_lba") && names.contains(&"model_end_to_end"),
                "op coverage".into(),
            ),
            (params <= 2000, format!("end-to-end model {params} params")),
            (
                elapsed < Duration::from_secs(120),
                format!("{:.1} s", elapsed.as_secs_f64()),
            ),
        ],
    );
}

#[test]
fn criterion_2_boundary_identities() {
    let _g = serial();
    let (mut zero, mut one, mut constant) = (0.0f64, 0.0f64, 0.0f64);
    for r0 in [0.0f64, 5.0, 10.0] {
        for beta in [-2.0f64, 0.0, 2.0] {
            zero = zero.max(pool_lse_lba(&[0.0; 256], r0, beta).unwrap().p.abs());
            one = one.max((pool_lse_lba(&[1.0; 256], r0, beta).unwrap().p - 1.0).abs());
            for c in [1e-6, 0.013, 0.25, 0.5, 0.75, 0.999] {
                constant = constant.max((pool_lse_lba(&[c; 256], r0, beta).unwrap().p - c).abs());
            }
        }
    }
    verdict(
        2,
        "pooling boundary identities",
        &[
            (zero <= 1e-12, format!("zeros err {zero:.1e}")),
            (one <= 1e-12, format!("ones err {one:.1e}")),
            (constant <= 1e-9, format!("constant err {constant:.1e}")),
        ],
    );
}

#[test]
fn criterion_3_sandwich_and_monotonicity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // (r0, β) pairs in increasing order of r_eff = r0 + e^β
    let mut grid: Vec<(f64, f64)> = [0.0, 5.0, 10.0]
        .iter()
        .flat_map(|&r0| [-2.0, 0.0, 2.0].map(|b| (r0, b)))
        .collect();
    grid.sort_by(|a, b| (a.0 + a.1.exp()).total_cmp(&(b.0 + b.1.exp())));
    let (mut sandwich, mut monotone, mut weights) = (true, true, 0.0f64);
    let mut negative = false;
    for _ in 0..100 {
        let s: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let avg = pool_avg(&s).unwrap().p;
        let max = pool_max(&s).unwrap().p;
        let mut last = f64::NEG_INFINITY;
        for &(r0, beta) in &grid {
            let r = pool_lse_lba(&s, r0, beta).unwrap();
            sandwich &= avg <= r.p && r.p <= max;
            monotone &= r.p > last;
            last = r.p;
            negative |= r.grad_s.iter().any(|&w| w < 0.0);
            weights = weights.max((r.grad_s.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(
        3,
        "sandwich, monotonicity in r_eff, softmax weights",
        &[
            (sandwich, "avg ≤ p ≤ max on 100 maps".into()),
            (monotone, "p strictly increasing over 9 sharpness values".into()),
            (!negative, "weights ≥ 0".into()),
            (weights <= 1e-10, format!("|Σw − 1| ≤ {weights:.1e}")),
        ],
    );
}

#[test]
fn criterion_4_numerical_stability() {
    let _g = serial();
    let side = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r0 = 150.0;
    let beta0 = 8f64.ln();
    let map = Tensor::<f64>::uniform([1, 1, side, side], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let s = g.param(map);
    let beta = g.param(Tensor::full([1, 1, 1, 1], beta0));
    let p = g.pool_lse_lba(s, r0, beta).unwrap();
    let loss = g.sum(p);
    let pv = g.value(p).data()[0];
    let grads = g.backward(loss).unwrap();
    let large_ok = pv.is_finite() && grads.get(s).unwrap().is_finite() && grads.get(beta).unwrap().is_finite();

    // generalized mean of values ≤ 1e-4 at r = 40: the true value is the
    // constant itself, but 1e-4^40 = 1e-160 is below f32's range
    let small = vec![1e-4f32; side * side];
    let gm32 = pool_gm(&small, 40.0).unwrap().p;
    let lse_small = pool_lse_lba(&small, 40.0 - 1.0, 0.0).unwrap().p;
    // the same underflow in f64 needs values ≤ 1e-9 (1e-360)
    let gm64 = pool_gm(&vec![1e-9f64; side * side], 40.0).unwrap().p;

    // noisy-OR of 4096 × 0.01: 1 − 0.99^4096 = 1 − 1.3e-18
    let nor_input = vec![0.01f64; 4096];
    let nor = pool_nor(&nor_input).unwrap().p;
    let log_c = nor_log_complement(&nor_input).unwrap();
    let lse_nor = pool_lse_lba(&nor_input, r0, beta0).unwrap();

    verdict(
        4,
        "numerical stability",
        &[
            (
                large_ok,
                format!("512×512, r_eff {:.1}: p = {pv:.6}, gradients finite", r0 + 8.0),
            ),
            (gm32 == 0.0, format!("naive GM f32 (1e-4, r=40) = {gm32}")),
            (gm64 == 0.0, format!("naive GM f64 (1e-9, r=40) = {gm64}")),
            (
                (lse_small - 1e-4).abs() <= 1e-9,
                format!("LSE-LBA on same input = {lse_small:e}"),
            ),
            (nor == 1.0, format!("naive noisy-OR = {nor}")),
            (
                (log_c - -41.166_175_655_941_903).abs() <= 1e-10,
                format!("log complement = {log_c:.12}"),
            ),
            (
                lse_nor.p.is_finite() && (lse_nor.p - 0.01).abs() <= 1e-12,
                format!("LSE-LBA on same input = {}", lse_nor.p),
            ),
        ],
    );
}

struct SweepOutcome {
    rows: Vec<SweepRow>,
    /// Test-set report of the r₀ = 5 model on the configured τ grid.
    report: MetricsReport,
    /// Same model scored on a different τ grid.
    report_other_taus: MetricsReport,
    training_seconds: f64,
    sweep_seconds: f64,
}

fn sweep_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_sweep")
}

fn run_sweep() -> Result<SweepOutcome, String> {
    let cfg = RunConfig::default();
    let out = sweep_dir();
    lsepool_cli::prepare_output(&out, true).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut log = Vec::new();
    let rows = cmd_sweep_r0(&cfg, &out, 1, &mut log).map_err(|e| e.to_string())?;
    let sweep_seconds = start.elapsed().as_secs_f64();
    let _ = std::io::stderr().write_all(&log);

    let dir = sweep_run_dir(&out, 5.0);
    let history = fs::read_to_string(dir.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let training_seconds = history
        .lines()
        .last()
        .and_then(|l| l.rsplit(',').next())
        .and_then(|v| v.parse().ok())
        .ok_or("history has no wall time")?;

    let model = load_checkpoint::<f32>(&dir.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let test = load_split(&cfg, Split::Test).map_err(|e| e.to_string())?;
    let preds = predict_all(&model, &test, 32).map_err(|e| e.to_string())?;
    let report = evaluate(&test, &preds, &cfg.taus, &cfg.alphas).map_err(|e| e.to_string())?;
    let report_other_taus = evaluate(&test, &preds, &[0.25, 0.65], &cfg.alphas).map_err(|e| e.to_string())?;
    Ok(SweepOutcome {
        rows,
        report,
        report_other_taus,
        training_seconds,
        sweep_seconds,
    })
}

fn sweep() -> &'static Result<SweepOutcome, String> {
    static SWEEP: OnceLock<Result<SweepOutcome, String>> = OnceLock::new();
    SWEEP.get_or_init(run_sweep)
}

fn rows_for(rows: &[SweepRow], class: &str) -> Vec<SweepRow> {
    let mut v: Vec<SweepRow> = rows.iter().filter(|r| r.class == class).cloned().collect();
    v.sort_by(|a, b| a.r0.total_cmp(&b.r0));
    v
}

#[test]
fn criterion_5_toy_learning() {
    let _g = serial();
    let s = match sweep() {
        Ok(s) => s,
        Err(e) => return verdict(5, "toy learning", &[(false, format!("sweep failed: {e}"))]),
    };
    let main: Vec<&SweepRow> = s.rows.iter().filter(|r| r.r0 == 5.0).collect();
    let mut checks: Vec<(bool, String)> = main
        .iter()
        .map(|r| {
            let auc = r.auc.unwrap_or(f64::NAN);
            (auc >= 0.9, format!("{} AUC {auc:.4}", r.class))
        })
        .collect();
    let pooled = s.report.pooled_dice().unwrap_or(f64::NAN);
    let class_mean = s.report.mean_dice().unwrap_or(f64::NAN);
    checks.push((pooled >= 0.2, format!("DICE over positives {pooled:.3}")));
    checks.push((class_mean >= 0.2, format!("class-mean DICE {class_mean:.3}")));
    let steps = main.first().map_or(usize::MAX, |r| r.steps);
    checks.push((steps <= 2000, format!("{steps} Adam steps")));
    checks.push((
        s.training_seconds < 15.0 * 60.0,
        format!(
            "r0=5 training {:.0} s (sweep of 3: {:.0} s)",
            s.training_seconds, s.sweep_seconds
        ),
    ));
    verdict(5, "toy learning at r0 = 5", &checks);
}

#[test]
fn criterion_6_sharpness_prior() {
    let _g = serial();
    let s = match sweep() {
        Ok(s) => s,
        Err(e) => return verdict(6, "sharpness prior", &[(false, format!("sweep failed: {e}"))]),
    };
    let focal = rows_for(&s.rows, "focal");
    let areas: Vec<f64> = focal.iter().map(|r| r.activated_area.unwrap_or(f64::NAN)).collect();
    let decreasing = areas.len() == 3 && areas.windows(2).all(|w| w[1] < w[0]);
    let positives = focal.first().map_or(0, |r| r.positives);
    let shown: Vec<String> = focal
        .iter()
        .zip(&areas)
        .map(|(r, a)| format!("r0={} {a:.3}", r.r0))
        .collect();
    verdict(
        6,
        "focal activated area decreases with r0",
        &[
            (decreasing, shown.join(" > ")),
            (positives >= 50, format!("{positives} focal test positives")),
        ],
    );
}

#[test]
fn criterion_7_threshold_sensitivity() {
    let _g = serial();
    let s = match sweep() {
        Ok(s) => s,
        Err(e) => return verdict(7, "τ-sensitivity", &[(false, format!("sweep failed: {e}"))]),
    };
    let mut spreads = Vec::new();
    let mut best = 0.0f64;
    for c in &s.report.classes {
        let acc: Vec<f64> = c.iobb.iter().filter(|e| e.alpha == 0.5).map(|e| e.accuracy).collect();
        let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
        best = best.max(hi - lo);
        spreads.push(format!("{} IoBB {lo:.3}..{hi:.3} over {} τ", c.name, acc.len()));
    }
    let dice_same = s
        .report
        .classes
        .iter()
        .zip(&s.report_other_taus.classes)
        .all(|(a, b)| a.dice.is_some() && a.dice == b.dice);
    let mut checks = vec![(best >= 0.2, format!("max spread {best:.3} ≥ 0.2"))];
    checks.extend(spreads.into_iter().map(|d| (true, d)));
    checks.push((dice_same, "DICE identical under a different τ grid".into()));
    verdict(7, "IoBB varies with τ, DICE does not", &checks);
}

#[test]
fn criterion_8_metric_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut auc_exact = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(2..25);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut wins = 0.0;
        for i in (0..n).filter(|&i| labels[i] == 1) {
            for j in (0..n).filter(|&j| labels[j] == 0) {
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let brute = wins / (pos * (n as f64 - pos));
        auc_exact += (roc_auc(&scores, &labels).unwrap() == brute) as usize;
    }

    let mut dice_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(4..500);
        let a: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        b[0] = 1.0;
        let inter: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let classic = 2.0 * inter / (a.iter().sum::<f64>() + b.iter().sum::<f64>());
        dice_err = dice_err.max((continuous_dice(&a, &b).unwrap() - classic).abs());
    }

    let mut monotone = true;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let (t1, t2): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (loose, tight) = (binarize(&s, lo), binarize(&s, hi));
        monotone &= tight.iter().zip(&loose).all(|(t, l)| !*t || *l);
    }

    verdict(
        8,
        "metric oracles",
        &[
            (auc_exact == 100, format!("AUC == pairwise count on {auc_exact}/100")),
            (
                dice_err <= 1e-12,
                format!("DICE vs set overlap err {dice_err:.1e} on 50 pairs"),
            ),
            (monotone, "binarize monotone in τ on 1000 draws".into()),
        ],
    );
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("input_size", "32"),
        ("image_size", "32"),
        ("levels", "2"),
        ("channels_per_level", "8,8"),
        ("saliency_resolution", "8"),
        ("focal_radius_range", "2,3"),
        ("n_train", "48"),
        ("n_val", "16"),
        ("n_test", "16"),
        ("max_epochs", "3"),
        ("augment", "true"),
        ("record_wall_time", "false"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cmd_train(&cfg, d.path(), &mut Vec::new()).unwrap();
    }
    let read = |name: &str| dirs.each_ref().map(|d| fs::read(d.path().join(name)).unwrap());
    let [h1, h2] = read(HISTORY_FILE);
    let [c1, c2] = read(CHECKPOINT_FILE);
    verdict(
        9,
        "repeated training is byte-identical",
        &[
            (h1 == h2 && !h1.is_empty(), format!("history.csv ({} bytes)", h1.len())),
            (c1 == c2 && !c1.is_empty(), format!("checkpoint ({} bytes)", c1.len())),
        ],
    );
}
