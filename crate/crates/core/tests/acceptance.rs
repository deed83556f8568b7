//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness capture) before asserting.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use dgbs::cli;
use dgbs::experiment::{self, DriftModel, LockOptions, PidConfig};
use dgbs::hafnian::{self, DetectionPattern, Method, ReducedKernel};
use dgbs::linalg::{c, CMatrix, CVector};
use dgbs::metrics::{self, Normalization};
use dgbs::probability::{self, ModelKind, ModelSpec, Setup, DEFAULT_BUDGET};
use dgbs::random;
use dgbs::reconstruction::{self as rec, ReconstructionOptions, ScanPlan};
use dgbs::state::{output_state, AMatrix, Efficiencies, GammaVector, GaussianState, SourceConfig};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{name}]: {verdict} ({detail})");
}

// ---------------------------------------------------------------- hafnians

/// Sum over all matchings of `0..n`, vertex `i` left unmatched only when
/// `loops` is given (weight `loops[i]`).
fn matchings(m: &CMatrix, loops: Option<&[Complex64]>, rest: &mut Vec<usize>) -> Complex64 {
    let Some(i) = rest.pop() else {
        return c(1.0, 0.0);
    };
    let mut total = c(0.0, 0.0);
    if let Some(l) = loops {
        total += l[i] * matchings(m, loops, rest);
    }
    for pos in 0..rest.len() {
        let j = rest.remove(pos);
        total += m[(i, j)] * matchings(m, loops, rest);
        rest.insert(pos, j);
    }
    rest.push(i);
    total
}

fn brute_hafnian(m: &CMatrix, loops: Option<&[Complex64]>) -> Complex64 {
    let mut rest: Vec<usize> = (0..m.nrows()).collect();
    matchings(m, loops, &mut rest)
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let mut m = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let z = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            m[(i, j)] = z;
            m[(j, i)] = z;
        }
    }
    m
}

#[test]
fn c1_hafnian_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for size in [2usize, 4, 6, 8] {
        for _ in 0..100 {
            let m = random_symmetric(size, &mut rng);
            let loops: Vec<Complex64> = (0..size)
                .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let want = brute_hafnian(&m, None);
            let want_loop = brute_hafnian(&m, Some(&loops));
            let kernel = ReducedKernel::new(m.clone(), CVector::from_vec(loops.clone())).unwrap();
            for method in [Method::Auto, Method::Enumerate, Method::PowerTrace] {
                let h = hafnian::hafnian_with(&m, method).unwrap();
                let lh = hafnian::loop_hafnian_with(&kernel, method).unwrap();
                worst = worst.max((h - want).norm() / want.norm());
                worst = worst.max((lh - want_loop).norm() / want_loop.norm());
            }
            let lh = hafnian::loop_hafnian(&kernel).unwrap();
            worst = worst.max((lh - want_loop).norm() / want_loop.norm());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-10 && elapsed < Duration::from_secs(10);
    report(1, "hafnian", ok, format!("max relative error {worst:.2e}, {elapsed:.2?}"));
    assert!(ok);
}

// ---------------------------------------------------------- fock oracle

#[test]
fn c2_engine_matches_fock_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..50 {
        // Alternate between the full source, squeezer only and coherent only.
        let (d, squeezer, coherent) = match trial % 5 {
            0 => (2, Some([0, 1]), None),
            1 => (2, None, Some(0)),
            _ => (3, Some([0, 1]), Some(2)),
        };
        let config = SourceConfig {
            r: rng.random_range(0.0..0.5),
            alpha_mag: rng.random_range(0.0..1.0),
            phi: rng.random_range(-PI..PI),
            squeezer_ports: squeezer,
            coherent_port: coherent,
            efficiencies: Efficiencies::default(),
        };
        let t = random::subunitary(d, d, &mut rng);
        let state = output_state(&config, &t).unwrap();
        let cutoff = dgbs::fock::cutoff_for_loss(&config, d, 1e-9, 60).unwrap().max(7);
        let patterns: Vec<DetectionPattern> = (0..=4).flat_map(|n| probability::all_patterns(d, n)).collect();
        let oracle = dgbs::fock::oracle_probabilities(&config, &t, &patterns, cutoff, 1e-8).unwrap();
        for (pattern, o) in patterns.iter().zip(&oracle) {
            let e = probability::pattern_probability(&state, pattern, ModelSpec::full()).unwrap();
            worst = worst.max((o.probability - e).abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-6 && elapsed < Duration::from_secs(120);
    report(
        2,
        "oracle",
        ok,
        format!("{checked} patterns, max |difference| {worst:.2e}, {elapsed:.2?}"),
    );
    assert!(ok);
}

// --------------------------------------------------------------- k-order

fn k0_term(state: &GaussianState, n: &DetectionPattern) -> f64 {
    let g = state.gamma_vector().top();
    let mut prod = 1.0;
    for (j, &nj) in n.counts().iter().enumerate() {
        prod *= g[j].norm_sqr().powi(nj as i32);
    }
    state.vacuum_probability() * prod / n.factorial_product()
}

#[test]
fn c3_korder_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact: f64 = 0.0;
    let mut at_n: f64 = 0.0;
    let mut k0: f64 = 0.0;
    let mut truncation_matters = false;
    for trial in 0..20 {
        let d = 2 + trial % 5;
        let state = random::physical_state(d, &mut rng);
        for photons in 1..=5 {
            let patterns = probability::all_patterns(d, photons);
            let full: Vec<f64> = patterns
                .iter()
                .map(|n| probability::pattern_probability(&state, n, ModelSpec::full()).unwrap())
                .collect();
            let scale = full.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let mut errors = Vec::new();
            for k in 0..=photons {
                let e = patterns
                    .iter()
                    .zip(&full)
                    .map(|(n, &p)| (probability::pattern_probability(&state, n, ModelSpec::korder(k)).unwrap() - p).abs())
                    .fold(0.0, f64::max);
                errors.push(e / scale);
            }
            at_n = at_n.max(errors[photons]);
            truncation_matters |= errors[0] > 1e-6;
            for (n, &p) in patterns.iter().zip(&full) {
                let kn = probability::pattern_probability(&state, n, ModelSpec::korder(photons)).unwrap();
                exact = exact.max((kn - p).abs() / p.max(f64::MIN_POSITIVE));
                let z = probability::pattern_probability(&state, n, ModelSpec::korder(0)).unwrap();
                let want = k0_term(&state, n);
                k0 = k0.max((z - want).abs() / want.max(f64::MIN_POSITIVE));
            }
        }
    }
    let ok = exact <= 1e-12 && at_n == 0.0 && k0 < 1e-10 && truncation_matters;
    report(
        3,
        "k-order",
        ok,
        format!("korder(N) vs full {exact:.2e}, error at k=N {at_n:.2e}, k=0 vs product of loops {k0:.2e}"),
    );
    assert!(ok);
}

// -------------------------------------------------------- reconstruction

fn noiseless_round_trip(s1: &GaussianState, s2: &GaussianState) -> (f64, f64) {
    let mut plan = ScanPlan::uniform(1, 12, 1e7);
    plan.collisions = true;
    let records = rec::expected_records(s1, Some(s2), &plan).unwrap();
    let opts = ReconstructionOptions {
        min_fringe_significance: 0.0,
        ..Default::default()
    };
    let result = rec::reconstruct(&records, &opts).unwrap();
    let truth = rec::gauged_truth(s1, Some(s2), None);
    let err = rec::max_entry_error(&result, &truth);
    let tvd = rec::threefold_tvd(
        &result.a,
        &result.gamma_vector(),
        &truth.a,
        &GammaVector::from_real(&truth.gamma),
        DEFAULT_BUDGET,
    )
    .unwrap();
    (err, tvd)
}

fn displaced_pair(d: usize, rng: &mut ChaCha8Rng) -> (GaussianState, GaussianState) {
    let s1 = random::physical_state(d, rng);
    let alpha: Vec<Complex64> = (0..d)
        .map(|_| c(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
        .collect();
    let delta = s1.delta() + GaussianState::coherent(&alpha).delta();
    let s2 = GaussianState::new(s1.sigma().clone(), delta).unwrap();
    (s1, s2)
}

fn lab_scale() -> (GaussianState, GaussianState) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (cfg, t) = random::lab_scale_setup(&mut rng);
    let s1 = output_state(&cfg, &t).unwrap();
    let s2 = output_state(&cfg.with_coherent_port(Some(3)), &t).unwrap();
    (s1, s2)
}

#[test]
fn c4_noiseless_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut err, mut tvd): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let (s1, s2) = displaced_pair(6, &mut rng);
        let (e, t) = noiseless_round_trip(&s1, &s2);
        err = err.max(e);
        tvd = tvd.max(t);
    }
    let (s1, s2) = lab_scale();
    let (e15, t15) = noiseless_round_trip(&s1, &s2);
    let elapsed = start.elapsed();
    let ok = err.max(e15) < 1e-8 && tvd.max(t15) < 1e-8 && elapsed < Duration::from_secs(300);
    report(
        4,
        "noiseless reconstruction",
        ok,
        format!("d=6: error {err:.2e}, threefold TVD {tvd:.2e}; d=15: error {e15:.2e}, TVD {t15:.2e}; {elapsed:.2?}"),
    );
    assert!(ok);
}

fn fourfold_tvd(a: &AMatrix, g: &GammaVector, b: &AMatrix, h: &GammaVector) -> f64 {
    let p = probability::distribution_from_kernel(a, g, 4, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
    let q = probability::distribution_from_kernel(b, h, 4, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
    metrics::tvd(&p, &q).unwrap()
}

fn shot_noise_tvd(s1: &GaussianState, s2: &GaussianState, pulses: f64, seed: u64) -> f64 {
    let plan = ScanPlan::uniform(5, 20, pulses);
    let expected = rec::expected_records(s1, Some(s2), &plan).unwrap();
    let noisy = rec::sample_records(&expected, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let result = rec::reconstruct(&noisy, &ReconstructionOptions::default()).unwrap();
    let truth = rec::gauged_truth(s1, Some(s2), None);
    fourfold_tvd(&result.a, &result.gamma_vector(), &truth.a, &GammaVector::from_real(&truth.gamma))
}

#[test]
fn c5_reconstruction_under_shot_noise() {
    let (s1, s2) = lab_scale();
    let tvd = shot_noise_tvd(&s1, &s2, 1e7, 5);
    let reference = shot_noise_tvd(&s1, &s2, 1e9, 5);
    let ok = tvd < 0.05;
    report(
        5,
        "shot-noise reconstruction",
        ok,
        format!("fourfold TVD {tvd:.4} at 1e7 pulses per setting, bound 0.05; {reference:.4} at 1e9"),
    );
    assert!(ok, "fourfold TVD {tvd} at 1e7 pulses per setting");
}

// ---------------------------------------------------------------- models

fn trend_setup(n_alpha: f64, rng_seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let eta = 0.1;
    let source = SourceConfig {
        r: 0.3,
        alpha_mag: n_alpha.sqrt(),
        phi: 0.0,
        squeezer_ports: Some([0, 1]),
        coherent_port: Some(2),
        efficiencies: Efficiencies {
            coupling: eta,
            grating: 1.0,
            propagation: 1.0,
            detection: 1.0,
        },
    };
    Setup {
        source,
        transfer: random::lossy_haar_transfer(15, eta, &mut rng),
    }
}

const N_ALPHA: [f64; 4] = [0.0, 0.15, 0.7, 2.2];

#[test]
fn c6_classical_model_trend() {
    let tvds: Vec<f64> = N_ALPHA
        .iter()
        .map(|&n| {
            let setup = trend_setup(n, 6);
            let full = setup.enumerate_distribution(2, true, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
            let classical = setup
                .enumerate_distribution(2, true, ModelSpec::new(ModelKind::Classical), DEFAULT_BUDGET)
                .unwrap();
            metrics::tvd(&full, &classical).unwrap()
        })
        .collect();
    let ok = tvds.windows(2).all(|w| w[1] < w[0]);
    report(6, "classical trend", ok, format!("twofold TVD at <n_alpha> {N_ALPHA:?}: {tvds:.4?}"));
    assert!(ok);
}

#[test]
fn c7_likelihood_trend() {
    let kinds = [ModelKind::Full, ModelKind::Korder { k: 4 }, ModelKind::Korder { k: 0 }];
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let mut l4 = Vec::new();
        let mut l0 = Vec::new();
        for &n in &[0.7, 2.2] {
            let state = trend_setup(n, 7).state_for(ModelKind::Full).unwrap();
            let samples =
                experiment::sample_conditioned(&state, ModelSpec::full(), 4, 6, 500, seed, DEFAULT_BUDGET).unwrap();
            let tables = metrics::tables_for_state(&state, &kinds, &samples, DEFAULT_BUDGET).unwrap();
            let k4 = metrics::likelihood_ratio(&samples, &tables[1], &tables[0], Normalization::FixedN);
            let k0 = metrics::likelihood_ratio(&samples, &tables[2], &tables[0], Normalization::FixedN);
            l4.push(k4.log_l);
            l0.push(k0.log_l);
        }
        // Nearer to 1 means a smaller |ln L|.
        let holds = l4[1].abs() < l4[0].abs() && l0[0] < l4[0] && l0[1] < l4[1];
        ok &= holds;
        lines.push(format!("seed {seed}: ln L4 {:.2}/{:.2}, ln L0 {:.2}/{:.2}", l4[0], l4[1], l0[0], l0[1]));
    }
    report(7, "likelihood trend", ok, lines.join("; "));
    assert!(ok);
}

// ------------------------------------------------------------------ lock

#[test]
fn c8_phase_lock() {
    let (state, _) = lab_scale();
    let base = PidConfig::default();
    let pairs = experiment::auto_error_pairs(&state, base.setpoint, experiment::DEFAULT_AUTO_PAIRS).unwrap();
    let signal = experiment::build_error_signal(&state, &pairs).unwrap();
    let drift = DriftModel::default();
    let opts = LockOptions::default();
    let (kp, ki) = experiment::default_gain_grid();
    let (pid, _) = experiment::tune_pid(&drift, &base, &signal, &opts, &[1, 2], &kp, &ki).unwrap();
    let trace = experiment::pid_lock(&drift, &pid, &signal, &opts, 8).unwrap();
    let bound = PI / 50.0;
    let ok = !trace.diverged && trace.residual_std <= bound && trace.unlocked_span >= PI;
    report(
        8,
        "phase lock",
        ok,
        format!(
            "kp {} ki {}: residual std {:.4} (bound {bound:.4}) over {} s, unlocked span {:.2} rad",
            pid.kp, pid.ki, trace.residual_std, opts.duration, trace.unlocked_span
        ),
    );
    assert!(ok);
}

// ------------------------------------------------------------------- cli

fn write_config(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let run = dir.join("run.json");
    std::fs::write(
        &run,
        r#"{
  "version": 1,
  "source": {"r": 0.3, "alpha_mag": 0.45, "squeezer_ports": [0, 1], "coherent_port": 2,
             "efficiencies": {"coupling": 0.5, "grating": 1.0, "propagation": 1.0, "detection": 1.0}},
  "transfer": {"kind": "haar", "modes": 6, "seed": 3},
  "seed": 9,
  "probs": {"photons": 3, "models": ["full", "korder:1", "classical"]},
  "simulate": {"pulses": 300000, "n_max": 4,
               "scan": {"windows": 2, "per_window": 12, "pulses": 1e7, "second_input_port": 3}},
  "reconstruct": {"options": {"optimizer": {"restarts": 2}}},
  "compare": {"model_a": "korder:1", "model_b": "full", "samples": 80, "min_photons": 2, "max_photons": 3},
  "lock": {"options": {"duration": 5.0, "settle": 1.0}, "auto_pairs": 4}
}"#,
    )
    .unwrap();
    let oracle = dir.join("oracle.json");
    std::fs::write(
        &oracle,
        r#"{"version": 1,
            "source": {"r": 0.3, "alpha_mag": 0.6, "phi": 0.2, "squeezer_ports": [0, 1], "coherent_port": 2},
            "transfer": {"kind": "haar", "modes": 3, "seed": 1, "eta": 0.5},
            "seed": 9,
            "oracle": {"max_photons": 3}}"#,
    )
    .unwrap();
    (run, oracle)
}

#[test]
fn c9_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (run, oracle) = write_config(dir.path());
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for cmd in ["probs", "simulate", "reconstruct", "compare", "lock", "oracle"] {
        let cfg = if cmd == "oracle" { &oracle } else { &run };
        let mut files = Vec::new();
        for copy in ["a", "b"] {
            let out = dir.path().join(format!("{cmd}_{copy}"));
            let go = |c: &str| {
                cli::run([
                    "dgbs",
                    c,
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                ])
            };
            if cmd == "reconstruct" {
                assert_eq!(go("simulate"), cli::EXIT_OK);
            }
            assert_eq!(go(cmd), cli::EXIT_OK, "{cmd}");
            files.push(cli::primary_outputs(&out).unwrap());
        }
        assert!(!files[0].is_empty());
        if files[0].len() != files[1].len() {
            mismatches.push(format!("{cmd}: file lists differ"));
        }
        for (x, y) in files[0].iter().zip(&files[1]) {
            compared += 1;
            if x.file_name() != y.file_name() || std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
                mismatches.push(format!("{cmd}: {}", x.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    let ok = mismatches.is_empty();
    report(9, "cli determinism", ok, format!("{compared} output files compared, mismatches {mismatches:?}"));
    assert!(ok);
}
