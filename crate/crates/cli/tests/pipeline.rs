use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

fn config(dir: &Path) -> Value {
    json!({
        "output_dir": dir.join("out"),
        "master_seed": 5,
        "world": {
            "drift": 0.1,
            "noise": 0.3,
            "world": {
                "width": 4, "height": 4, "goal": [3, 0], "pits": [[2, 3], [3, 3]],
                "starts": [[0, 3]], "discount": 0.9
            }
        },
        "grid": { "axis": "noise", "start": 0.0, "stop": 0.6, "count": 5 },
        "groundtruth": 2,
        "targets": { "count": 3 },
        "behavior": { "kind": "noisy", "policy": "target_01", "act_prob": 0.7 },
        "n": 120,
        "rollouts": { "num_rollouts": 4, "horizon": 20, "with_backups": true },
        "selectors": ["random", "td_squared", "lstd_tournament:vanilla", "lstd_tournament", "regression_antos"],
        "bootstrap_reps": 7,
        "sweeps": {
            "gap": { "radii": [1, 2] },
            "coverage": { "lambdas": [0.0, 1.0], "off_behavior": { "kind": "uniform" } }
        }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn opesel(args: &[&str], cfg: &Path, cache: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_opesel"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env("OPESEL_CACHE_DIR", cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

fn run_all(cfg: &Path, cache: &Path, extra: &[&str]) {
    for stage in [&["gen"][..], &["sample"], &["cache"], &["select"]] {
        let args: Vec<&str> = stage.iter().chain(extra).copied().collect();
        let (code, out) = opesel(&args, cfg, cache);
        assert_eq!(code, 0, "{stage:?}: {out}");
    }
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn schema_errors_exit_2_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg["bogus"] = json!(1);
    let path = write_config(tmp.path(), &cfg);
    let (code, out) = opesel(&["gen"], &path, &tmp.path().join("cache"));
    assert_eq!(code, 2, "{out}");
    assert!(!tmp.path().join("out").exists());

    let mut cfg = config(tmp.path());
    cfg["rollouts"]["num_rollouts"] = json!(3);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(opesel(&["sample"], &path, &tmp.path().join("cache")).0, 2);

    let mut cfg = config(tmp.path());
    cfg["rollouts"]["with_backups"] = json!(false);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(opesel(&["select"], &path, &tmp.path().join("cache")).0, 2);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn degenerate_grid_exits_3_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg["grid"] = json!({ "axis": "noise", "start": 0.3, "stop": 0.3, "count": 1 });
    cfg["groundtruth"] = json!(0);
    cfg["sweeps"] = json!({});
    let path = write_config(tmp.path(), &cfg);
    let cache = tmp.path().join("cache");
    let (code, out) = opesel(&["gen"], &path, &cache);
    assert_eq!(code, 3, "{out}");
    // Nothing downstream may use a grid that failed its check.
    assert_eq!(opesel(&["sample"], &path, &cache).0, 4);
    assert_eq!(opesel(&["gen", "--force"], &path, &cache).0, 0);
    assert_eq!(opesel(&["sample"], &path, &cache).0, 0);
}

#[test]
fn pipeline_is_idempotent_and_job_count_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let path = write_config(tmp.path(), &config(tmp.path()));
    run_all(&path, &cache, &["--jobs", "1"]);
    let out = tmp.path().join("out");
    let gen = read(out.join("gen/models.json"));
    let report = read(out.join("reports/select/report.csv"));
    let data = read(out.join("data/main/transitions.bin"));

    // Cache root comes from the environment, one directory per dataset.
    let entries: Vec<_> = std::fs::read_dir(&cache).unwrap().collect();
    assert_eq!(entries.len(), 2);
    assert!(!out.join("cache").exists());

    run_all(&path, &cache, &["--jobs", "3"]);
    assert_eq!(read(out.join("gen/models.json")), gen);
    assert_eq!(read(out.join("data/main/transitions.bin")), data);
    assert_eq!(read(out.join("reports/select/report.csv")), report);

    let (code, printed) = opesel(&["select", "--jobs", "2", "--force"], &path, &cache);
    assert_eq!(code, 0, "{printed}");
    assert_eq!(read(out.join("reports/select/report.csv")), report);

    // One row per target, replicate and selector (tournament variants count separately).
    let rows = String::from_utf8(report).unwrap().lines().count() - 1;
    assert_eq!(rows, 3 * 7 * 5);
    let (code, printed) = opesel(&["report"], &path, &cache);
    assert_eq!(code, 0);
    assert!(printed.contains("lstd_tournament:normalized_diff"), "{printed}");
}

#[test]
fn stale_or_tampered_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let path = write_config(tmp.path(), &config(tmp.path()));
    assert_eq!(opesel(&["select"], &path, &cache).0, 4);
    run_all(&path, &cache, &[]);

    // A different dataset size invalidates the sampled data.
    let mut cfg = config(tmp.path());
    cfg["n"] = json!(150);
    let changed = write_config(&tmp.path().join("changed"), &cfg);
    assert_eq!(opesel(&["select"], &changed, &cache).0, 4);

    // More rollouts need a cache that was never built.
    let mut cfg = config(tmp.path());
    cfg["rollouts"]["num_rollouts"] = json!(8);
    let changed = write_config(&tmp.path().join("changed2"), &cfg);
    assert_eq!(opesel(&["select"], &changed, &cache).0, 4);

    let bin = tmp.path().join("out/data/main/transitions.bin");
    let mut bytes = read(bin.clone());
    bytes[3] ^= 0x10;
    std::fs::write(&bin, bytes).unwrap();
    let (code, out) = opesel(&["select"], &path, &cache);
    assert_eq!(code, 4, "{out}");
}

#[test]
fn sweeps_need_their_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let path = write_config(tmp.path(), &config(tmp.path()));
    run_all(&path, &cache, &[]);
    assert_eq!(opesel(&["sweep", "gap"], &path, &cache).0, 0);
    assert_eq!(opesel(&["sweep", "coverage"], &path, &cache).0, 0);
    assert_eq!(opesel(&["sweep", "misspec"], &path, &cache).0, 2);
    let gap = String::from_utf8(read(tmp.path().join("out/reports/sweep_gap/aggregate.csv"))).unwrap();
    assert!(gap.contains("main_gap1") && gap.contains("main_gap2"));
    let coverage = String::from_utf8(read(tmp.path().join("out/reports/sweep_coverage/targets.csv"))).unwrap();
    assert!(coverage.contains("lambda0") && coverage.contains("lambda1"));
}

#[test]
fn trajectory_datasets_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg["mode"] = json!("trajectory");
    cfg["sweeps"] = json!({});
    let path = write_config(tmp.path(), &cfg);
    run_all(&path, &tmp.path().join("cache"), &[]);
    let manifest: Value = serde_json::from_slice(&read(tmp.path().join("out/data/main/manifest.json"))).unwrap();
    assert_eq!(manifest["n"], json!(120));
}

#[test]
fn default_config_passes_sanity() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut cfg: Value = serde_json::from_slice(&read(shipped)).unwrap();
    for seed in 0..10 {
        let tmp = tempfile::tempdir().unwrap();
        cfg["output_dir"] = json!(tmp.path().join("out"));
        cfg["master_seed"] = json!(seed);
        let path = write_config(tmp.path(), &cfg);
        let (code, out) = opesel(&["gen"], &path, &tmp.path().join("cache"));
        assert_eq!(code, 0, "seed {seed}: {out}");
        let sanity: Value = serde_json::from_slice(&read(tmp.path().join("out/gen/sanity.json"))).unwrap();
        assert_eq!(sanity["degenerate_in_models"], json!(false));
        assert_eq!(sanity["degenerate_in_policies"], json!(false));
    }
}
