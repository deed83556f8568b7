use std::path::{Path, PathBuf};
use std::process::Command;

use dgbs::cli::{self, EXIT_DOMAIN, EXIT_OK, EXIT_USAGE};
use serde_json::Value;

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "version": 1,
  "source": {{"r": 0.3, "alpha_mag": 0.45, "squeezer_ports": [0, 1], "coherent_port": 2,
              "efficiencies": {{"coupling": 0.5, "grating": 1.0, "propagation": 1.0, "detection": 1.0}}}},
  "transfer": {{"kind": "haar", "modes": 6, "seed": 3}},
  "seed": 11,
  "probs": {{"photons": 2, "models": ["full", "full", "classical", "korder:0"]}},
  "simulate": {{"pulses": 200000, "n_max": 3,
               "scan": {{"windows": 3, "per_window": 12, "pulses": 1e7, "second_input_port": 3,
                         "collisions": true, "noiseless": true}}}},
  "reconstruct": {{"options": {{"min_fringe_significance": 0.0}}}},
  "compare": {{"model_a": "full", "model_b": "full", "samples": 60, "min_photons": 2, "max_photons": 3}},
  "lock": {{"options": {{"duration": 4.0, "settle": 1.0}}, "auto_pairs": 4}},
  "oracle": {{"max_photons": 2}}
  {extra}
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &str, cfg: &Path, out: &Path, more: &[&str]) -> i32 {
    let mut args = vec![
        "dgbs".to_string(),
        cmd.into(),
        "--config".into(),
        cfg.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(more.iter().map(|s| s.to_string()));
    cli::run(args)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn oracle_config(dir: &Path) -> PathBuf {
    let path = dir.join("oracle.json");
    std::fs::write(
        &path,
        r#"{"version": 1,
            "source": {"r": 0.25, "alpha_mag": 0.5, "phi": 0.4, "squeezer_ports": [0, 1], "coherent_port": 2},
            "transfer": {"kind": "haar", "modes": 3, "seed": 5, "eta": 0.6},
            "oracle": {"max_photons": 3}}"#,
    )
    .unwrap();
    path
}

#[test]
fn every_command_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let oracle = oracle_config(dir.path());
    for cmd in ["probs", "simulate", "reconstruct", "compare", "lock", "oracle"] {
        let cfg = if cmd == "oracle" { &oracle } else { &cfg };
        let (a, b) = (dir.path().join(format!("{cmd}_a")), dir.path().join(format!("{cmd}_b")));
        if cmd == "reconstruct" {
            for o in [&a, &b] {
                assert_eq!(run("simulate", cfg, o, &[]), EXIT_OK);
            }
        }
        assert_eq!(run(cmd, cfg, &a, &[]), EXIT_OK, "{cmd}");
        assert_eq!(run(cmd, cfg, &b, &[]), EXIT_OK, "{cmd}");
        let fa = cli::primary_outputs(&a).unwrap();
        let fb = cli::primary_outputs(&b).unwrap();
        assert_eq!(fa.len(), fb.len());
        assert!(!fa.is_empty());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{cmd}: {}", x.display());
        }
    }
}

#[test]
fn outputs_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("probs");
    assert_eq!(run("probs", &cfg, &out, &[]), EXIT_OK);
    let hash = summary(&out)["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for f in cli::primary_outputs(&out).unwrap() {
        let text = std::fs::read_to_string(&f).unwrap();
        assert!(text.contains(&hash), "{}", f.display());
    }
    let other = dir.path().join("probs_seed");
    assert_eq!(run("probs", &cfg, &other, &["--seed", "12"]), EXIT_OK);
    assert_ne!(summary(&other)["config_hash"].as_str().unwrap(), hash);
}

#[test]
fn probs_tables_and_tvd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(run("probs", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert_eq!(s["patterns"], 15);
    let tvd: Vec<(u64, u64, f64)> = s["tvd"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["a"].as_u64().unwrap(), r["b"].as_u64().unwrap(), r["tvd"].as_f64().unwrap()))
        .collect();
    assert_eq!(tvd.len(), 6);
    assert_eq!(tvd[0], (0, 1, 0.0));
    assert!(tvd[1].2 > 0.0);
    let rows = std::fs::read_to_string(out.join("probs_0_full.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 15);
}

#[test]
fn simulate_then_reconstruct_recovers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(run("simulate", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert_eq!(s["scan"]["settings"], serde_json::json!(["blocked", "input1", "input2"]));
    let clicks = dgbs::experiment::read_clicks_csv(std::fs::File::open(out.join("clicks.csv")).unwrap(), 6).unwrap();
    assert_eq!(clicks.len() as u64, s["clicks"].as_u64().unwrap());
    assert_eq!(run("reconstruct", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert!(s["max_entry_error"].as_f64().unwrap() < 1e-8, "{s}");
    assert!(s["threefold_tvd"].as_f64().unwrap() < 1e-8, "{s}");
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("reconstruction.json")).unwrap()).unwrap();
    assert_eq!(r["config_hash"], s["config_hash"]);
    assert_eq!(r["result"]["d"], 6);
}

#[test]
fn compare_identical_models_gives_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(run("compare", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert_eq!(s["l"], 1.0);
    assert_eq!(s["samples"], 60);
    let out = dir.path().join("k0");
    assert_eq!(run("compare", &cfg, &out, &["--model", "korder", "--k", "0"]), EXIT_OK);
    assert_eq!(summary(&out)["model_a"], "korder(0)");
}

#[test]
fn lock_without_drift_stays_at_setpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#", "lock": {"drift": {"components": [], "step": 0.01},
                    "options": {"duration": 3.0, "settle": 0.0, "pulses_per_update": null}}"#,
    );
    let text = std::fs::read_to_string(&cfg).unwrap();
    // The later "lock" key replaces the earlier one only if duplicates are
    // rejected; drop the first one instead.
    let text = text.replacen(r#""lock": {"options": {"duration": 4.0, "settle": 1.0}, "auto_pairs": 4},"#, "", 1);
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run("lock", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert!(s["residual_std"].as_f64().unwrap() < 1e-12, "{s}");
    assert_eq!(s["unlocked_span"], 0.0);
    assert_eq!(s["diverged"], false);
}

#[test]
fn oracle_agrees_with_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(run("oracle", &cfg, &out, &[]), EXIT_OK);
    let s = summary(&out);
    assert_eq!(s["agree"], true);
    assert_eq!(s["patterns"], 1 + 3 + 6 + 10);
    assert!(s["max_abs_difference"].as_f64().unwrap() < 1e-6);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli::run(["dgbs", "probs"]), EXIT_USAGE);
    assert_eq!(cli::run(["dgbs", "nonsense"]), EXIT_USAGE);
    let cfg = config(dir.path(), "");
    assert_eq!(run("probs", &cfg, &out, &["--model", "quantum"]), EXIT_USAGE);
    let bad = config(dir.path(), r#", "unexpected": 1"#);
    assert_eq!(run("probs", &bad, &out, &[]), EXIT_USAGE);
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let base = config(dir.path(), "");
    let out = dir.path().join("out");
    // A missing records file is a usage problem.
    assert_eq!(run("reconstruct", &base, &out, &[]), EXIT_USAGE);
    // One sign of a single-pair error signal locks, the other runs away.
    let mut codes = Vec::new();
    for sign in ["1.0", "-1.0"] {
        let text = std::fs::read_to_string(&base).unwrap().replacen(
            r#""lock": {"options": {"duration": 4.0, "settle": 1.0}, "auto_pairs": 4},"#,
            &format!(
                r#""lock": {{"options": {{"duration": 6.0, "initial_offset": 0.05}},
                           "pairs": [{{"j": 0, "k": 1, "sign": {sign}}}]}},"#
            ),
            1,
        );
        let cfg = dir.path().join(format!("lock{sign}.json"));
        std::fs::write(&cfg, text).unwrap();
        codes.push(run("lock", &cfg, &out, &[]));
    }
    codes.sort();
    assert_eq!(codes, vec![EXIT_OK, EXIT_DOMAIN]);
}

#[test]
fn binary_honours_thread_count_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let exe = env!("CARGO_BIN_EXE_dgbs");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(exe)
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("DGBS_THREADS", threads)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(std::fs::read(out.join("clicks.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let status = Command::new(exe).arg("probs").status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(exe)
        .args(["probs", "--config"])
        .arg(&cfg)
        .env("DGBS_THREADS", "many")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
