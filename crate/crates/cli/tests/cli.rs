//! End-to-end CLI checks over a tiny scene: synthesis determinism, exit
//! codes, train/extract/scoremap/eval round trip.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_BIN_EXE_refneus"));
    assert!(p.exists(), "binary missing at {}", p.display());
    p.pop();
    p.push("refneus");
    p
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("refneus_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn refneus")
}

fn tiny_spec(dir: &Path) -> PathBuf {
    let spec = serde_json::json!({
        "shape": "sphere",
        "view_count": 8,
        "image_size": 24,
        "seed": 3
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    path
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "total_iters": 50,
        "rays_per_batch": 48,
        "n_coarse": 10,
        "n_fine": 6,
        "warmup_iters": 20,
        "mesh_update_period": 25,
        "mesh_res_intermediate": 24,
        "checkpoint_period": 25,
        "network_preset": "desk",
        "seed": 9
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_complete() {
    let dir = workdir("synth");
    let spec = tiny_spec(&dir);
    let out1 = dir.join("a");
    let out2 = dir.join("b");
    for out in [&out1, &out2] {
        let r = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for name in ["manifest.json", "gt_mesh.ply", "run_manifest.json"] {
        assert!(out1.join(name).exists(), "missing {name}");
    }
    for i in 0..8 {
        let rel = format!("images/view_{i:03}.png");
        let a = std::fs::read(out1.join(&rel)).unwrap();
        let b = std::fs::read(out2.join(&rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
        assert!(out1.join(format!("normals/view_{i:03}.png")).exists());
        assert!(out1.join(format!("masks/view_{i:03}.png")).exists());
    }
}

#[test]
fn invalid_inputs_exit_with_usage_code() {
    let dir = workdir("usage");
    // unknown flag -> clap exits 2
    let r = run(&["synth", "--bogus"]);
    assert_eq!(r.status.code(), Some(2));
    // invalid shape name in the spec
    let bad = dir.join("bad_spec.json");
    std::fs::write(&bad, r#"{"shape": "dodecahedron"}"#).unwrap();
    let r = run(&["synth", "--spec", bad.to_str().unwrap(), "--out", dir.join("x").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    // malformed train config
    let bad_cfg = dir.join("bad_cfg.json");
    std::fs::write(&bad_cfg, r#"{"total_iters": 0}"#).unwrap();
    let r = run(&[
        "train",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--scene",
        dir.to_str().unwrap(),
        "--out",
        dir.join("y").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn train_extract_scoremap_eval_roundtrip() {
    let dir = workdir("pipeline");
    let spec = tiny_spec(&dir);
    let scene = dir.join("scene");
    let r = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let cfg = tiny_config(&dir);
    let train_out = dir.join("run");
    let r = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--ablate",
        "rs=on,vis=on,ref=on",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = train_out.join("final.rnkp");
    assert!(ckpt.exists());
    assert!(train_out.join("train_log.ndjson").exists());
    assert!(train_out.join("run_manifest.json").exists());

    // the resolved ablation toggles are echoed into the run config
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["use_reflection_score"], true);

    // extraction at two resolutions, both readable
    for (res, name) in [(24u32, "m24.ply"), (48u32, "m48.ply")] {
        let out = dir.join(name);
        let r = run(&[
            "extract",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--res",
            &res.to_string(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(out.exists());
    }
    // determinism of extraction
    let out_a = dir.join("det_a.ply");
    let out_b = dir.join("det_b.ply");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "extract",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--res",
            "24",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success());
    }
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());

    // score map for a valid view plus sidecar with the toggle echo
    let smap = dir.join("score.png");
    let r = run(&[
        "scoremap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--view",
        "0",
        "--out",
        smap.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(smap.exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("score.json")).unwrap()).unwrap();
    assert_eq!(sidecar["gamma"], 5.0);
    assert_eq!(sidecar["ablation"], "rs=on,vis=on,ref=on");

    // out-of-range view -> usage error
    let r = run(&[
        "scoremap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--view",
        "99",
        "--out",
        smap.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // eval from the checkpoint: all four metrics present
    let results = dir.join("results.json");
    let r = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--res",
        "32",
        "--out",
        results.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&results).unwrap()).unwrap();
    for key in ["accuracy", "completeness", "mae_deg", "psnr_db"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);

    // gt mesh evaluated against itself: exact zeros for the geometry terms,
    // nulls for the image metrics
    let self_results = dir.join("self.json");
    let r = run(&[
        "eval",
        "--mesh",
        scene.join("gt_mesh.ply").to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        self_results.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&self_results).unwrap()).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), 0.0);
    assert_eq!(report["completeness"].as_f64().unwrap(), 0.0);
    assert!(report["mae_deg"].is_null());
    assert!(report["psnr_db"].is_null());
}
