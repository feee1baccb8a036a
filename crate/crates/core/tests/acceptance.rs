//! Acceptance criteria. Every test prints one `PASS`/`FAIL` line (written
//! past the output capture) and then asserts.

mod common;

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use flecs_cgd::compress::{CompressorSpec, NormOrder};
use flecs_cgd::harness::{self, selftest, RunConfig, SyntheticKind, TraceRow, Variant};
use flecs_cgd::linalg::TruncationBand;
use flecs_cgd::objective::{BatchSpec, Shard};
use flecs_cgd::oracles::{finite_diff_gradient, finite_diff_hvp, jacobi_eigen, relative_error};
use flecs_cgd::protocol::{sample_sketch, SketchKind};
use flecs_cgd::server::{direction_fedsonia, direction_truncated, HessianUpdate};
use flecs_cgd::{DenseMatrix, DenseVector};
use rand::Rng;

fn verdict(n: u32, title: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    report(&format!("[criterion {n:>2}] {tag} {title}: {detail}"));
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn oracle_shards() -> Vec<(Shard, DenseVector)> {
    let mut rng = rng(101);
    (0..20)
        .map(|_| {
            let shard = random_logistic(&mut rng, 20, 50, 1e-3);
            let w = gaussian_vec(&mut rng, 20) * 0.5;
            (shard, w)
        })
        .collect()
}

#[test]
fn criterion_01_gradient_oracle() {
    let shards = oracle_shards();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (shard, w) in &shards {
        let analytic = shard.full_gradient(w).unwrap();
        let fd = finite_diff_gradient(shard, w, 1e-6).unwrap();
        worst = worst.max(relative_error(&analytic, &fd, 1e-12));
    }
    let t = start.elapsed();
    verdict(
        1,
        "gradient vs central differences",
        worst <= 1e-6 && t < Duration::from_secs(1),
        format!("max rel err {worst:.2e} (tol 1e-6) over 20 shards, {}", secs(t)),
    );
}

#[test]
fn criterion_02_hessian_sketch_oracle() {
    let shards = oracle_shards();
    let mut rng = rng(102);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (shard, w) in &shards {
        let s = gaussian_mat(&mut rng, 20, 4);
        let hs = shard.hessian_sketch(w, &s, BatchSpec::Full, &mut rng).unwrap();
        for j in 0..s.ncols() {
            let col = s.column(j).into_owned();
            let fd = finite_diff_hvp(shard, w, &col, 1e-5).unwrap();
            worst = worst.max(relative_error(&hs.column(j).into_owned(), &fd, 1e-12));
        }
    }
    let t = start.elapsed();
    verdict(
        2,
        "Hessian-sketch columns vs differenced gradients",
        worst <= 1e-5 && t < Duration::from_secs(1),
        format!("max rel err {worst:.2e} (tol 1e-5), {}", secs(t)),
    );
}

#[test]
fn criterion_03_compressor_contract() {
    let start = Instant::now();
    let results = selftest::compressor_suite(64, NormOrder::Inf, 100, 100_000, 103).unwrap();
    let t = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).map(|r| r.to_string()).collect();
    let worst_z = results
        .iter()
        .filter_map(|r| r.detail.split("max|z| = ").nth(1)?.split(',').next()?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    verdict(
        3,
        "dithering s=64 p=inf unbiased, second moment stable",
        failed.is_empty() && t < Duration::from_secs(30),
        format!(
            "10 vectors x 1e5 draws, worst max|z| {worst_z:.2}, {} failing, {}{}",
            failed.len(),
            secs(t),
            if failed.is_empty() { String::new() } else { format!(" [{}]", failed.join("; ")) }
        ),
    );
}

#[test]
fn criterion_04_error_feedback_moment() {
    let start = Instant::now();
    let results = selftest::error_feedback_suite(&[0.25, 1.0], 50, 100_000, 104).unwrap();
    let t = start.elapsed();
    let pass = results.iter().all(|r| r.pass) && t < Duration::from_secs(30);
    let details: Vec<String> = results.iter().map(|r| format!("{} {}", r.name, r.detail)).collect();
    verdict(4, "E[h+] = (1-gamma) h + gamma g", pass, format!("{}, {}", details.join("; "), secs(t)));
}

fn identity_cfg(memory: usize, update: HessianUpdate) -> RunConfig {
    RunConfig {
        memory,
        hessian_update: update,
        grad_compressor: CompressorSpec::identity(),
        hess_compressor: CompressorSpec::identity(),
        rounds: 1,
        global_seed: 5,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_05_sr1_secant() {
    let d = 30;
    let mut rng = rng(105);
    let mut worst = 0.0f64;
    let mut min_mid_eig = f64::INFINITY;
    for &m in &[1usize, 4, 8] {
        for _trial in 0..3 {
            let hs: Vec<DenseMatrix> = (0..3).map(|_| random_spd(&mut rng, d)).collect();
            let shards: Vec<Shard> = hs.iter().map(|h| quadratic(h.clone(), gaussian_vec(&mut rng, d))).collect();
            let cfg = identity_cfg(m, HessianUpdate::Lsr1);
            let mut sim = harness::Simulation::new(&cfg, shards).unwrap();
            sim.step().unwrap();

            let s0 = sample_sketch(&cfg.sketch_spec(), d, 0).unwrap();
            let y_avg = hs.iter().fold(DenseMatrix::zeros(d, m), |acc, h| acc + h * &s0) / hs.len() as f64;
            for (h, b) in hs.iter().zip(&sim.server.b) {
                let (eigs, _) = jacobi_eigen(&(s0.transpose() * h * &s0));
                min_mid_eig = eigs.iter().fold(min_mid_eig, |a, &l| a.min(l.abs()));
                let y = h * &s0;
                worst = worst.max((b * &s0 - &y).norm() / y.norm());
            }
            let b_avg = sim.server.average_hessian();
            worst = worst.max((b_avg * &s0 - &y_avg).norm() / y_avg.norm());
        }
    }
    let no_skip = min_mid_eig >= cfg_omega();
    verdict(
        5,
        "L-SR1 secant B1 S0 = Y0",
        worst <= 1e-8 && no_skip,
        format!("max rel residual {worst:.2e} (tol 1e-8), smallest |eig(S^T H S)| {min_mid_eig:.2e} vs skip floor {:.0e}", cfg_omega()),
    );
}

fn cfg_omega() -> f64 {
    RunConfig::default().omega_trunc
}

#[test]
fn criterion_06_direct_update_recovery() {
    let d = 20;
    let mut rng = rng(106);
    let mut worst = 0.0f64;
    for trial in 0..4 {
        let hs: Vec<DenseMatrix> = (0..2)
            .map(|i| {
                if (trial + i) % 2 == 0 {
                    random_spd(&mut rng, d)
                } else {
                    // invertible but indefinite
                    let eigs: Vec<f64> = (0..d)
                        .map(|j| rng.random_range(0.5..4.0) * if j % 3 == 0 { -1.0 } else { 1.0 })
                        .collect();
                    with_spectrum(&mut rng, &eigs)
                }
            })
            .collect();
        let shards: Vec<Shard> = hs.iter().map(|h| quadratic(h.clone(), gaussian_vec(&mut rng, d))).collect();
        let cfg = RunConfig {
            beta: 1.0,
            global_seed: trial as u64,
            ..identity_cfg(d, HessianUpdate::Direct)
        };
        let mut sim = harness::Simulation::new(&cfg, shards).unwrap();
        sim.step().unwrap();
        for (h, b) in hs.iter().zip(&sim.server.b) {
            worst = worst.max((b - h).norm() / h.norm());
        }
    }
    verdict(
        6,
        "direct update recovers H with m=d, beta=1",
        worst <= 1e-8,
        format!("max ||B - H||/||H|| {worst:.2e} (tol 1e-8) over 8 workers"),
    );
}

type DirectionMap<'a> = Box<dyn Fn(&DenseVector) -> DenseVector + 'a>;

fn random_spectrum_matrix(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> DenseMatrix {
    let eigs: Vec<f64> = (0..d)
        .map(|_| {
            let mag = 10f64.powf(rng.random_range(-9.0..10.0));
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    with_spectrum(rng, &eigs)
}

#[test]
fn criterion_07_operator_bounds() {
    let band = TruncationBand::new(1e-5, 1e8).unwrap();
    let (lo, hi) = (1.0 / band.upper(), 1.0 / band.lower());
    let rho = 1.0 / band.upper();
    let mut rng = rng(107);
    let mut rq_min = f64::INFINITY;
    let mut rq_max = 0.0f64;
    let mut worst_descent = f64::NEG_INFINITY;
    for state in 0..100 {
        let d = rng.random_range(3..16);
        let m = rng.random_range(1..=d.min(5));
        let b = random_spectrum_matrix(&mut rng, d);
        let mut y = gaussian_mat(&mut rng, d, m);
        if state % 5 == 0 && m > 1 {
            // rank-deficient Ỹ
            let c0 = y.column(0).into_owned();
            y.set_column(m - 1, &(c0 * 2.0));
        }
        let mid = random_spectrum_matrix(&mut rng, m);
        let directions: [DirectionMap; 2] = [
            Box::new(|g| direction_truncated(&b, g, band).unwrap()),
            Box::new(|g| direction_fedsonia(&y, &mid, g, band, rho).unwrap()),
        ];
        for dir in &directions {
            for i in 0..d {
                let e = DenseVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 });
                let rq = -dir(&e)[i];
                rq_min = rq_min.min(rq);
                rq_max = rq_max.max(rq);
            }
            for _ in 0..5 {
                let g = gaussian_vec(&mut rng, d);
                let p = dir(&g);
                worst_descent = worst_descent.max(p.dot(&g) / g.norm_squared());
            }
        }
    }
    let in_band = rq_min >= lo * (1.0 - 1e-9) && rq_max <= hi * (1.0 + 1e-9);
    verdict(
        7,
        "direction map Rayleigh quotients in [1/Omega, 1/omega], descent",
        in_band && worst_descent < 0.0,
        format!(
            "100 states x 2 rules: RQ in [{rq_min:.3e}, {rq_max:.3e}] vs [{lo:.0e}, {hi:.0e}], max <p,g>/|g|^2 = {worst_descent:.3e}"
        ),
    );
}

fn convex_base() -> RunConfig {
    RunConfig {
        synthetic: SyntheticKind::Gaussian,
        synthetic_rows: 2000,
        synthetic_dim: 50,
        n_workers: 4,
        reg_mu: 1e-2,
        global_seed: 8,
        ..RunConfig::default()
    }
}

fn plateau(rows: &[TraceRow], from: usize) -> f64 {
    let tail = &rows[from..];
    tail.iter().map(|r| r.grad_sq_norm).sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_08_strongly_convex_convergence() {
    let start = Instant::now();
    let base = convex_base();
    let shards = harness::load_shards(&base).unwrap();

    // exact oracles, identity compression: full-width coordinate sketches
    let mut hits = Vec::new();
    for direction in [flecs_cgd::server::DirectionKind::Truncated, flecs_cgd::server::DirectionKind::Fedsonia] {
        let cfg = RunConfig {
            memory: 50,
            sketch: SketchKind::Coordinate,
            direction,
            grad_compressor: CompressorSpec::identity(),
            hess_compressor: CompressorSpec::identity(),
            rounds: 200,
            ..base.clone()
        };
        let rows = harness::run_with_shards(&cfg, shards.clone()).unwrap();
        hits.push((direction, rows.iter().find(|r| r.grad_sq_norm <= 1e-10).map(|r| r.k)));
    }

    // minibatch gradients give sigma > 0 and an O(alpha) floor
    let noisy = |alpha: f64| RunConfig {
        memory: 50,
        sketch: SketchKind::Coordinate,
        direction: flecs_cgd::server::DirectionKind::Fedsonia,
        batch: BatchSpec::Minibatch(100),
        alpha,
        rounds: 1500,
        ..base.clone()
    };
    let (p_full, p_half) = std::thread::scope(|s| {
        let a = s.spawn(|| harness::run_with_shards(&noisy(0.1), shards.clone()).unwrap());
        let b = s.spawn(|| harness::run_with_shards(&noisy(0.05), shards.clone()).unwrap());
        (plateau(&a.join().unwrap(), 500), plateau(&b.join().unwrap(), 500))
    });
    let ratio = p_full / p_half;
    let t = start.elapsed();

    let converged = hits.iter().all(|(_, k)| k.is_some());
    let pass = converged && (1.5..=8.0).contains(&ratio) && t < Duration::from_secs(120);
    let hit_text: Vec<String> = hits
        .iter()
        .map(|(dir, k)| match k {
            Some(k) => format!("{dir:?} hits 1e-10 at k={k}"),
            None => format!("{dir:?} never reaches 1e-10"),
        })
        .collect();
    verdict(
        8,
        "strongly convex convergence and O(alpha) plateau",
        pass,
        format!(
            "{}; plateau alpha=0.1 {p_full:.3e}, alpha=0.05 {p_half:.3e}, ratio {ratio:.2} (want [1.5, 8]), {}",
            hit_text.join(", "),
            secs(t)
        ),
    );
}

/// a9a from `FLECS_A9A` or `data/a9a` at the workspace root, else the
/// a9a-shaped one-hot surrogate.
fn a9a_config() -> (RunConfig, String) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let candidates = std::env::var_os("FLECS_A9A")
        .map(PathBuf::from)
        .into_iter()
        .chain([root.join("data/a9a")]);
    let base = RunConfig {
        n_workers: 4,
        memory: 1,
        direction: flecs_cgd::server::DirectionKind::Fedsonia,
        hessian_update: HessianUpdate::Lsr1,
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
        omega_trunc: 1e-5,
        omega_trunc_max: 1e8,
        rho: None,
        rounds: 200,
        ..RunConfig::default()
    };
    for path in candidates {
        if path.is_file() {
            let label = format!("a9a from {}", path.display());
            return (
                RunConfig {
                    data_path: Some(path),
                    dim: Some(123),
                    ..base
                },
                label,
            );
        }
    }
    (
        RunConfig {
            synthetic: SyntheticKind::Onehot123,
            synthetic_rows: 32561,
            ..base
        },
        "a9a not found, one-hot surrogate 32561x123".to_string(),
    )
}

/// Cumulative uplink bits at the first row with objective <= `tau`.
fn bits_to_reach(rows: &[TraceRow], tau: f64) -> Option<f64> {
    rows.iter().find(|r| r.objective <= tau).map(|r| r.uplink_bits)
}

#[test]
fn criterion_09_compression_trend() {
    let start = Instant::now();
    let (cfg, source) = a9a_config();
    let runs = harness::compare(&cfg, &[Variant::Cgd, Variant::Flecs]).unwrap();
    let (cgd, flecs) = (&runs[0].1, &runs[1].1);
    let f0 = cgd[0].objective;
    let best = |rows: &[TraceRow]| rows.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    let floor = best(cgd).max(best(flecs));

    // every objective value either run visits strictly below F(w0) and
    // reachable by both
    let mut thresholds: Vec<f64> = cgd
        .iter()
        .chain(flecs.iter())
        .map(|r| r.objective)
        .filter(|&v| v < f0 && v >= floor)
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut worst_ratio = 0.0f64;
    let mut violations = 0;
    for &tau in &thresholds {
        let (a, b) = (bits_to_reach(cgd, tau).unwrap(), bits_to_reach(flecs, tau).unwrap());
        worst_ratio = worst_ratio.max(a / b);
        if a >= b {
            violations += 1;
        }
    }
    let t = start.elapsed();
    let last = |rows: &[TraceRow]| rows.last().unwrap().objective;
    verdict(
        9,
        "CGD needs fewer uplink bits than FLECS at every shared threshold",
        !thresholds.is_empty() && violations == 0 && t < Duration::from_secs(300),
        format!(
            "{source}; F(w0) {f0:.6}, best cgd {:.6} flecs {:.6}, final cgd {:.4} flecs {:.4}; {} thresholds in [{floor:.6}, {f0:.6}), {violations} violations, worst bits ratio {worst_ratio:.3}, {}",
            best(cgd),
            best(flecs),
            last(cgd),
            last(flecs),
            thresholds.len(),
            secs(t)
        ),
    );
}

/// `ceil(log2(s + 1))` by counting.
fn bits_for_levels(s: u64) -> u64 {
    let mut b = 0;
    while (1u64 << b) < s + 1 {
        b += 1;
    }
    b
}

fn closed_form_vector(d: u64, spec: &str) -> u64 {
    let float_bits = spec
        .split("float_bits=")
        .nth(1)
        .map(|v| v.parse().unwrap())
        .unwrap_or(32);
    if spec == "identity" || spec.starts_with("identity,") {
        return float_bits * d;
    }
    let s: u64 = spec.split("s=").nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    float_bits + d * (1 + bits_for_levels(s))
}

fn bits_line(out: &str, key: &str) -> u64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in output:\n{out}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn criterion_10_bit_accounting() {
    let cases: [(u64, u64, &str, &str); 10] = [
        (123, 1, "dither:s=64,p=inf", "dither:s=64,p=inf"),
        (123, 2, "dither:s=64,p=inf", "dither:s=64,p=inf"),
        (123, 1, "dither:s=128,p=inf", "dither:s=128,p=inf"),
        (50, 4, "identity", "dither:s=64,p=2"),
        (1000, 8, "dither:s=1,p=2", "dither:s=3,p=inf"),
        (10, 10, "dither:s=255,p=inf", "identity"),
        (7, 1, "identity", "identity"),
        (300, 3, "dither:s=64,p=inf,float_bits=64", "dither:s=16,p=2"),
        (20958, 1, "dither:s=64,p=inf", "dither:s=64,p=inf"),
        (5000, 2, "dither:s=7,p=2", "identity,float_bits=16"),
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    let mut reference = (0, 0);
    for (i, (d, m, grad, hess)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bits{i}.toml"));
        std::fs::write(
            &path,
            format!("dim = {d}\nmemory = {m}\ngrad_compressor = \"{grad}\"\nhess_compressor = \"{hess}\"\n"),
        )
        .unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_flecs-cgd")).arg("bits").arg(&path).output().unwrap();
        assert!(out.status.success(), "bits failed: {}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();

        let hess_part = m * closed_form_vector(*d, hess) + 32 * m * m;
        let want_up = closed_form_vector(*d, grad) + hess_part;
        let want_flecs = 32 * d + hess_part;
        let want_down = 32 * d + 32 * d * m;
        let got = (
            bits_line(&text, "uplink_bits"),
            bits_line(&text, "uplink_bits_uncompressed_gradient"),
            bits_line(&text, "downlink_bits"),
        );
        if got != (want_up, want_flecs, want_down) {
            mismatches.push(format!("case {i}: got {got:?}, want {:?}", (want_up, want_flecs, want_down)));
        }
        if i == 0 {
            reference = (got.0, got.1);
        }
    }
    verdict(
        10,
        "bits subcommand matches the closed form",
        mismatches.is_empty() && reference == (2064, 4984),
        format!(
            "10 combinations, {} mismatches; d=123 m=1: CGD {} bits vs FLECS {} bits{}",
            mismatches.len(),
            reference.0,
            reference.1,
            if mismatches.is_empty() { String::new() } else { format!(" [{}]", mismatches.join("; ")) }
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for parallel in [false, true] {
        let cfg = RunConfig {
            synthetic_rows: 600,
            synthetic_dim: 20,
            n_workers: 6,
            memory: 3,
            batch: BatchSpec::Minibatch(40),
            rounds: 40,
            global_seed: 11,
            parallel,
            ..RunConfig::default()
        };
        let path = dir.path().join(format!("run_{parallel}.toml"));
        std::fs::write(&path, cfg.to_text()).unwrap();
        for rep in 0..2 {
            let csv = dir.path().join(format!("trace_{parallel}_{rep}.csv"));
            let status = Command::new(env!("CARGO_BIN_EXE_flecs-cgd"))
                .arg("run")
                .arg(&path)
                .arg("--out")
                .arg(&csv)
                .status()
                .unwrap();
            assert!(status.success());
            outputs.push(((parallel, rep), std::fs::read(&csv).unwrap()));
        }
    }
    let first = &outputs[0].1;
    let same = outputs.iter().all(|(_, bytes)| bytes == first);
    verdict(
        11,
        "byte-identical CSVs across reruns and worker parallelism",
        same && !first.is_empty(),
        format!(
            "4 runs (serial x2, parallel x2), {} bytes each, identical = {same}",
            first.len()
        ),
    );
}
