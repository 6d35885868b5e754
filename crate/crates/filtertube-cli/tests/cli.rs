use std::path::{Path, PathBuf};
use std::process::Command;

use filtertube_cli::config::ExperimentConfig;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_filtertube"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("filtertube-cli-test-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

const SMALL: &str = r#"
system = "double_integrator"
controller = "async"
horizon = 5
steps = 8
runs = 3

[async]
memory_size = 3
cadence = 3
compare = true
"#;

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn unknown_key_is_config_error() {
    let d = scratch("badkey");
    let cfg = write_config(&d, "system = \"double_integrator\"\nhorizon = 5\nhorizon_len = 3\n");
    let out = bin().args(["closedloop", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
}

#[test]
fn manifest_lists_every_output_with_hash() {
    let d = scratch("manifest");
    let cfg = write_config(&d, SMALL);
    let out_dir = d.join("out");
    let out = bin().args(["async", "--jobs", "2", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    let mut listed: Vec<String> = files.iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    listed.sort();
    let mut on_disk: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for f in files {
        let data = std::fs::read(out_dir.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex(&data));
    }
    assert_eq!(m["config_sha256"].as_str().unwrap(), hex(SMALL.as_bytes()));
    assert_eq!(m["seeds"].as_array().unwrap().len(), 3);
    let lambda = std::fs::read_to_string(out_dir.join("lambda.csv")).unwrap();
    assert!(lambda.starts_with("run_id,step,secondary_slot,lambda0,lambda1,lambda2"));
}

#[test]
fn rerun_is_identical_apart_from_timings() {
    let d = scratch("idem");
    let cfg = write_config(&d, SMALL);
    let run = |sub: &str| {
        let o = d.join(sub);
        let out = bin().args(["closedloop", "--seed", "9", "--config"]).arg(&cfg).arg("--out").arg(&o).output().unwrap();
        assert!(out.status.success());
        o
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["steps.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |p: PathBuf| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                for s in v["steps"].as_array_mut().unwrap() {
                    s["solve_time"] = serde_json::Value::Null;
                    s["secondary_time"] = serde_json::Value::Null;
                }
                v
            })
            .collect()
    };
    assert_eq!(strip(a.join("runs.jsonl")), strip(b.join("runs.jsonl")));
}

#[test]
fn roa_writes_fraction_table() {
    let d = scratch("roa");
    let cfg = write_config(
        &d,
        "system = \"double_integrator\"\nhorizon = 5\n[roa]\ngrid = { nx = 15, ny = 15 }\nhorizons = [5]\n[[roa.sweeps]]\nparam = \"sigma_w\"\nvalues = [0.1, 0.3]\n",
    );
    let o = d.join("out");
    let out = bin().args(["roa", "--config"]).arg(&cfg).arg("--out").arg(&o).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(o.join("roa.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let frac: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&frac));
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
