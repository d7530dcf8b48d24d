use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agc_core::raster::{ids, write_ascii_grid, GridGeometry, RasterGrid};

fn agc(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_agc"));
    cmd.args(args).env_remove("AGC_DATA_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("agc runs")
}

fn ok(args: &[&str]) -> Output {
    let out = agc(args, &[]);
    assert!(
        out.status.success(),
        "agc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Ridged 60x60 region with forest, grass and a lake, plus a run config.
fn fixture(dir: &Path) -> PathBuf {
    let geo = GridGeometry::new(1000.0, 3200.0, 20.0, 60, 60).unwrap();
    let dem = RasterGrid::from_fn(geo, -9999.0, |r, c| {
        let (x, y) = (c as f64 * 20.0, r as f64 * 20.0);
        120.0 + 35.0 * (x / 150.0).sin().abs() + 20.0 * (y / 230.0).cos() + 0.02 * x
    });
    let lc = RasterGrid::from_fn(geo, 255.0, |r, c| {
        if (r as i64 - 40).pow(2) + (c as i64 - 15).pow(2) < 36 {
            ids::WATER as f64
        } else if c > 35 {
            ids::MIXED_FOREST as f64
        } else {
            ids::TEMPERATE_GRASSLAND as f64
        }
    });
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    write_ascii_grid(&dem, data.join("dem.asc")).unwrap();
    write_ascii_grid(&lc, data.join("landcover.asc")).unwrap();
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"seed = 11

[paths]
dem = "data/dem.asc"
landcover = "data/landcover.asc"
output = "out"

[sampling]
k = 4
budget = 24
d_min_m = 40.0

[sampling.satellites]
elevation_start = 25.0
elevation_stop = 85.0
elevation_step = 30.0
azimuth_start = 0.0
azimuth_stop = 180.0
azimuth_step = 180.0
altitudes_km = [550.0]

[diffusion.export]
tile_size = 32
"#,
    )
    .unwrap();
    cfg
}

fn prepare(cfg: &Path, out: &Path, threads: &str) {
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for stage in ["ingest", "terrain"] {
        ok(&["--config", c, "--out", o, "--threads", threads, stage]);
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    prepare(&cfg, &out, "2");
    for f in ["dem.agt", "landcover.agt", "slope.agt", "weiss.agt", "reflect.agt", "ingest.json", "terrain.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    ok(&["--config", c, "cluster"]);
    let clusters: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("clusters.json")).unwrap()).unwrap();
    assert_eq!(clusters["clusters"].as_array().unwrap().len(), 4);

    ok(&["--config", c, "sample", "--preset", "los", "-S", "30"]);
    let design: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("design.json")).unwrap()).unwrap();
    let quota: u64 = design["combinations"].as_array().unwrap().iter().map(|q| q["quota"].as_u64().unwrap()).sum();
    let drawn = design["points"].as_array().unwrap().len() as u64;
    let short: u64 = design["shortfalls"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["quota"].as_u64().unwrap() - s["drawn"].as_u64().unwrap())
        .sum();
    assert_eq!(quota, 30);
    assert_eq!(drawn + short, 30);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count() as u64, drawn + 1);

    let t = ok(&["--config", c, "trace", "--point", "0", "--elev", "25", "--az", "180"]);
    let rec: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    assert_eq!(rec["point_id"], 0);
    assert!(rec["verdict"] == "LOS" || rec["verdict"] == "NLOS");
    assert!(rec["profile"].is_array());

    ok(&["--config", c, "estimate"]);
    let est: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    let failures: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(est.len() + failures.len(), drawn as usize);
    assert!(!est.is_empty());

    ok(&["--config", c, "map"]);
    let csv = fs::read_to_string(out.join("obstruction.csv")).unwrap();
    assert!(csv.starts_with("elev_deg,links,nlos,rate,mean_excess_db"));
    assert!(fs::read_dir(out.join("maps")).unwrap().count() >= 1);

    ok(&["--config", c, "export-tiles"]);
    let tiles = out.join("tiles");
    let agx = fs::read_dir(&tiles).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "agx")).count();
    assert!(agx >= 1);

    ok(&["--config", c, "import-preds", tiles.to_str().unwrap()]);
    let index: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("predictions/index.json")).unwrap()).unwrap();
    assert!(!index.is_empty());
    assert!(out.join("predictions").join(index[0]["file"].as_str().unwrap()).exists());

    let lock: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.lock.json")).unwrap()).unwrap();
    for stage in ["ingest", "terrain", "cluster", "sample", "estimate", "map", "export-tiles", "import-preds"] {
        assert_eq!(lock["stages"][stage]["seed"], 11, "{stage}");
    }
    assert_eq!(lock["stages"]["sample"]["config"]["sampling"]["budget"], 30);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();
    let mut artifacts = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "4")] {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        prepare(&cfg, &out, threads);
        ok(&["--config", c, "--out", o, "--threads", threads, "--seed", "5", "sample"]);
        ok(&["--config", c, "--out", o, "--threads", threads, "estimate"]);
        artifacts.push(
            ["manifest.csv", "design.json", "estimates.json", "report.json", "slope.agt", "dem.agt"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert!(artifacts[0] == artifacts[1]);
    // a different seed draws a different design
    let o = dir.path().join("a");
    ok(&["--config", c, "--out", o.to_str().unwrap(), "--seed", "6", "sample"]);
    assert_ne!(fs::read(o.join("manifest.csv")).unwrap(), artifacts[0][0]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();

    let out = agc(&["ingest", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(agc(&["--help"], &[]).status.code(), Some(0));

    let out = agc(&["--config", c, "--set", "sampling.k=0", "ingest"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[sampling]"));

    let out = agc(&["--config", c, "--dem", "/nonexistent/dem.asc", "ingest"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // later stage before its inputs exist
    let out = agc(&["--config", c, "--out", dir.path().join("empty").to_str().unwrap(), "estimate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("agc sample"));

    prepare(&cfg, &dir.path().join("out"), "2");
    ok(&["--config", c, "sample"]);
    let out = agc(&["--config", c, "trace", "--point", "9999", "--elev", "25", "--az", "180"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_on_series() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let series: String = (0..10).map(|i| format!("{}\n", (i * 7 % 10) as f64)).collect();
    fs::write(&a, format!("value\n{series}")).unwrap();
    fs::write(&b, format!("value\n{series}")).unwrap();
    let out = ok(&["metrics", "pearson", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "r=1.0 p=0.0 n=10");
    let out = ok(&["metrics", "sign", a.to_str().unwrap(), b.to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sign_agreement"], 1.0);

    fs::write(&b, "value\n".to_string() + &"3\n".repeat(10)).unwrap();
    let out = agc(&["metrics", "pearson", a.to_str().unwrap(), b.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_dir_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    // config moved away from the data; the environment points back at it
    let elsewhere = dir.path().join("configs");
    fs::create_dir_all(&elsewhere).unwrap();
    let moved = elsewhere.join("run.toml");
    fs::copy(&cfg, &moved).unwrap();
    let out = agc(&["--config", moved.to_str().unwrap(), "ingest"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = agc(&["--config", moved.to_str().unwrap(), "ingest"], &[("AGC_DATA_DIR", dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/dem.agt").exists());
}
