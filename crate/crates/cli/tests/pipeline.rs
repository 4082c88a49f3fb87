use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 5,
  "scene": { "n_train": 3, "n_test": 2 },
  "train": { "epochs": 2, "warmup_epochs": 1, "batch_size": 2 },
  "stage1": {
    "k_groups": 4,
    "arch": { "embed_dim": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1,
              "pointnet_hidden": 16, "max_points_per_token": 16, "feat2d_dim": 32 }
  },
  "stage2": { "train": { "base_lr": 0.0001 } },
  "probe": { "epochs": 40 }
}"#;

fn sam3d(config: &Path, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sam3d"));
    cmd.arg("--config").arg(config).arg("--out-dir").arg(out).args(args);
    cmd.output().expect("binary runs")
}

fn ok(config: &Path, out: &Path, args: &[&str]) -> String {
    let o = sam3d(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs generate, tokenize, stage1, stage2, probe and report under `root`.
fn pipeline(root: &Path) -> PathBuf {
    let config = root.join("config.json");
    fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    ok(&config, &data, &["scene"]);
    let (train, test) = (data.join("train"), data.join("test"));
    for tok in ["sam", "knn"] {
        let out = ok(&config, &root.join(format!("audit_{tok}")), &["tokenize", "--scenes", s(&train), "--tokenizer", tok]);
        assert!(out.contains("mean purity"));
    }
    ok(&config, &root.join("s1"), &["stage1", "--scenes", s(&train)]);
    ok(&config, &root.join("s1_flat"), &["stage1", "--scenes", s(&train), "--no-reweight"]);
    let teacher = root.join("s1/checkpoint");
    ok(&config, &root.join("s2"), &["stage2", "--scenes", s(&train), "--teacher-ckpt", s(&teacher)]);
    let weights = root.join("s1/weights");
    let probe = |name: &str, tag: &str, ckpt: Option<&Path>| {
        let mut args = vec!["probe", "--tag", tag, "--train", s(&train), "--test", s(&test), "--weights", s(&weights)];
        if let Some(c) = ckpt {
            args.extend(["--ckpt", s(c)]);
        }
        ok(&config, &root.join(name), &args);
    };
    probe("p_scratch", "scratch", None);
    probe("p_s1", "stage1", Some(&teacher));
    probe("p_s1_flat", "stage1", Some(&root.join("s1_flat/checkpoint")));
    probe("p_s2", "stage2", Some(&root.join("s2/checkpoint")));
    let matrix = root.join("matrix.json");
    fs::write(
        &matrix,
        r#"[
  {"tokenizer": "sam", "reweight": true, "stage2": false, "stage1": "s1", "probe": "p_s1"},
  {"tokenizer": "sam", "reweight": false, "stage2": false, "stage1": "s1_flat", "probe": "p_s1_flat"},
  {"tokenizer": "sam", "reweight": true, "stage2": true, "stage1": "s1", "stage2_run": "s2", "probe": "p_s2"}
]"#,
    )
    .unwrap();
    let summary = ok(&config, &root.join("report"), &["report", "--matrix", s(&matrix)]);
    assert!(summary.contains("3 of 8 cells present"), "{summary}");
    root.to_path_buf()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_is_deterministic_and_reports_missing_cells() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));

    for rel in [
        "report/report.csv",
        "report/report.txt",
        "audit_knn/audit.csv",
        "p_s2/eval.json",
        "s1/checkpoint/param.enc.0.attn.wq.bin",
        "s2/checkpoint/param.pred.w2.bin",
        "s2/checkpoint/adam_v.mask_query.bin",
        "s1/weights/weights.json",
    ] {
        assert_eq!(read(&ra.join(rel)), read(&rb.join(rel)), "{rel} differs between runs");
    }

    let csv = String::from_utf8(read(&ra.join("report/report.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tokenizer,reweight,stage2,probe_accuracy,purity,tail_cosine,final_l_distill,final_l_final,status");
    assert_eq!(lines.len(), 9);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",missing")).count(), 5);
    let sam_s2 = lines.iter().find(|l| l.starts_with("sam,on,on,")).unwrap();
    let fields: Vec<&str> = sam_s2.split(',').collect();
    assert_eq!(fields[4], "1.000000", "SAM tokens are pure");
    assert!(fields.iter().take(8).all(|f| !f.is_empty()), "{sam_s2}");
    let knn_audit = String::from_utf8(read(&ra.join("audit_knn/audit.csv"))).unwrap();
    assert!(knn_audit.starts_with("scene_id,mode,n_tokens,purity,dropped\n"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("config.json");
    fs::write(&config, CONFIG.replace("\"epochs\": 2", "\"epochs\": 3")).unwrap();
    let data = root.path().join("data");
    ok(&config, &data, &["scene"]);
    let train = data.join("train");
    ok(&config, &root.path().join("full"), &["stage1", "--scenes", s(&train)]);
    ok(&config, &root.path().join("split"), &["stage1", "--scenes", s(&train), "--stop-after", "1"]);
    ok(&config, &root.path().join("split"), &["stage1", "--scenes", s(&train), "--resume"]);
    for rel in ["checkpoint/param.proj.w.bin", "checkpoint/adam_m.pn.w1.bin", "checkpoint/checkpoint.json"] {
        assert_eq!(read(&root.path().join("full").join(rel)), read(&root.path().join("split").join(rel)), "{rel}");
    }
}

#[test]
fn errors_exit_nonzero() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("config.json");
    fs::write(&config, CONFIG).unwrap();
    let out = root.path().join("out");
    let missing = root.path().join("nowhere");
    for args in [
        vec!["stage1", "--scenes", s(&missing)],
        vec!["tokenize", "--scenes", s(&missing)],
        vec!["probe", "--tag", "stage1", "--train", s(&missing), "--test", s(&missing)],
        vec!["scene", "--layout", "spiral"],
        vec!["report", "--matrix", s(&missing)],
    ] {
        let o = sam3d(&config, &out, &args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    let bad = root.path().join("bad.json");
    fs::write(&bad, r#"{"stage3": {}}"#).unwrap();
    assert!(!sam3d(&bad, &out, &["scene"]).status.success());
    // a stage-2 mask ratio of one masks every token
    let data = root.path().join("data");
    ok(&config, &data, &["scene", "--n-train", "2", "--n-test", "1"]);
    ok(&config, &root.path().join("s1"), &["stage1", "--scenes", s(&data.join("train")), "--epochs", "1"]);
    let o = sam3d(
        &config,
        &root.path().join("s2"),
        &["stage2", "--scenes", s(&data.join("train")), "--teacher-ckpt", s(&root.path().join("s1/checkpoint")), "--mask-ratio", "1.0"],
    );
    assert!(!o.status.success());
}

#[test]
fn short_flag_names_are_accepted() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("config.json");
    fs::write(&config, CONFIG).unwrap();
    let data = root.path().join("data");
    let o = Command::new(env!("CARGO_BIN_EXE_sam3d"))
        .args(["--config", s(&config), "--out", s(&data), "scene", "--n-scenes", "2", "--n-test", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = data.join("train");
    let audit = root.path().join("reports/knn.csv");
    ok(
        &config,
        &root.path().join("tok"),
        &["tokenize", "--scenes", s(&train), "--mode", "knn", "--n", "4", "--k", "8", "--audit", s(&audit)],
    );
    let csv = fs::read_to_string(&audit).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("4")), "{csv}");
    // a huge minimum drops every region, leaving nothing to tokenize
    let o = sam3d(&config, &root.path().join("tok"), &["tokenize", "--scenes", s(&train), "--min-points", "1000000"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no tokens"));

    ok(&config, &root.path().join("s1"), &["stage1", "--scenes", s(&train), "--epochs", "1"]);
    let teacher = root.path().join("s1/checkpoint");
    for (dir, flag) in [("s2_on", "on"), ("s2_off", "off")] {
        ok(
            &config,
            &root.path().join(dir),
            &["stage2", "--scenes", s(&train), "--teacher-ckpt", s(&teacher), "--init-from-teacher", flag, "--epochs", "1"],
        );
    }
    let summary = |dir: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(root.path().join(dir).join("summary.json")).unwrap()).unwrap()
    };
    assert_eq!(summary("s2_on")["options"]["init_from_teacher"], true);
    assert_eq!(summary("s2_off")["options"]["init_from_teacher"], false);
    ok(&config, &root.path().join("s1p"), &["stage1", "--scenes", s(&train), "--epochs", "1", "--paper-defaults"]);
    assert_eq!(summary("s1p")["config"]["batch_size"], 64);
    assert_eq!(summary("s1p")["config"]["seed"], 5);
}
