use std::path::Path;
use std::process::{Command, Output};

fn flexmesh(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexmesh"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn forward_manifest_lists_every_site() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexmesh(&["forward", "--dp", "2", "--tp", "2", "--pp", "1", "--model", "toy", "--seed", "0"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("activations/manifest.json")).unwrap()).unwrap();
    let modules: Vec<&str> = manifest
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["module"].as_str().unwrap())
        .collect();
    let want = flexmesh::parallel::ToyTransformerConfig::default().site_names();
    assert_eq!(modules, want.iter().map(String::as_str).collect::<Vec<_>>());
    let ledger: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ledger.json")).unwrap()).unwrap();
    assert!(ledger.is_object());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_mesh = flexmesh(&["forward", "--tp", "3"], dir.path());
    assert_eq!(bad_mesh.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_mesh.stderr).contains("config"));
    assert_eq!(flexmesh(&["profile", "--model", "toy"], dir.path()).status.code(), Some(2));
    assert_eq!(flexmesh(&["induction", "--threshold", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(flexmesh(&["forward", "--mesh", "2,2"], dir.path()).status.code(), Some(2));
    assert_eq!(flexmesh(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(flexmesh(&["lens", "infer"], dir.path()).status.code(), Some(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"k": 10, "tp": 3}"#).unwrap();
    let out = dir.path().join("a");
    let o = flexmesh(&["induction", "--config", cfg.to_str().unwrap(), "--tp", "2"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // k=10 from the file gives a 20-token sequence and 19 losses.
    assert_eq!(csv_rows(&out.join("per_token_loss.csv")).len(), 19);
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let o = flexmesh(&["induction", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn induction_scores_do_not_depend_on_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let mut grids = Vec::new();
    for mesh in ["1,1,1", "2,2,1"] {
        let out = dir.path().join(mesh);
        let o = flexmesh(&["induction", "--mesh", mesh], &out);
        assert!(o.status.success());
        let rows = csv_rows(&out.join("induction_scores.csv"));
        grids.push(rows.iter().map(|r| r[2].parse::<f64>().unwrap()).collect::<Vec<_>>());
        let heads: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("induction_heads.json")).unwrap()).unwrap();
        let heads = heads.as_array().unwrap();
        assert_eq!(heads.len(), 1);
        assert_eq!((heads[0]["layer"].as_u64(), heads[0]["head"].as_u64()), (Some(1), Some(0)));
    }
    for (a, b) in grids[0].iter().zip(&grids[1]) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn lens_train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexmesh(&["lens", "train", "--steps", "40"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = csv_rows(&dir.path().join("lens_loss.csv"));
    assert_eq!(curve.len(), 41);
    for layer in 1..curve[0].len() {
        let first: f64 = curve[0][layer].parse().unwrap();
        let last: f64 = curve[40][layer].parse().unwrap();
        assert!(last < first, "layer column {layer}: {first} -> {last}");
    }

    let o = flexmesh(&["lens", "infer"], dir.path());
    assert!(o.status.success());
    let tuned = csv_rows(&dir.path().join("lens_grid.csv"));
    let labels: Vec<&str> = tuned.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["POS", "TOK", "TGT", "L0", "L1", "L2", "L3", "OUT"]);
    assert!(std::fs::read_to_string(dir.path().join("lens_grid.txt")).unwrap().starts_with("POS"));

    let logit_dir = dir.path().join("logit");
    let o = flexmesh(&["lens", "infer", "--identity-probes"], &logit_dir);
    assert!(o.status.success());
    let logit = csv_rows(&logit_dir.join("lens_grid.csv"));
    // Probes never change the model's own predictions.
    assert_eq!(logit.last(), tuned.last());
}

#[test]
fn profile_rows_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexmesh(&["profile"], dir.path());
    assert!(o.status.success());
    let rows = csv_rows(&dir.path().join("table.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["no_hooks", "device", "pinned", "pageable"]);
    let times: Vec<f64> = rows.iter().map(|r| r[9].parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[0] < w[1]));
    let hook_gathers: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(hook_gathers, ["0", "16", "16", "16"]);
    assert_eq!(csv_rows(&dir.path().join("summary.csv")).len(), 4);

    let o = flexmesh(&["profile", "--calibrate", "1,2,3,4"], &dir.path().join("cal"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("residual"));
    let rows = csv_rows(&dir.path().join("cal/summary.csv"));
    let fitted: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for (got, want) in fitted.iter().zip([1.0, 2.0, 3.0, 4.0]) {
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}
