// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use visedit_core::toyvlm::{ModelConfig, ToyVlm};

fn visedit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visedit"))
        .args(args)
        .env("VISEDIT_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn visedit")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 16,
        ..Default::default()
    }
}

const TINY: [&str; 8] = [
    "--set",
    "model.layers=2",
    "--set",
    "model.d_model=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.d_ff=16",
];

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.ckpt");
    ToyVlm::<f32>::init(tiny(), 3).unwrap().save(&p).unwrap();
    p
}

#[test]
fn unknown_key_exits_with_config_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlr_rate = 0.1\n").unwrap();
    let out = visedit(root.path(), &["--config", cfg.to_str().unwrap(), "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_rate"));
    let out = visedit(root.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn show_config_echoes_every_block() {
    let root = tempfile::tempdir().unwrap();
    let out = visedit(root.path(), &["show-config", "--set", "seed=11"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for block in [
        "[model]",
        "[pretrain]",
        "[data]",
        "[attribution]",
        "[vead]",
        "[train]",
        "[paths]",
    ] {
        assert!(text.contains(block), "{block} missing");
    }
    assert!(text.starts_with("seed = 11"));
}

#[test]
fn edit_eval_without_adapter_is_a_prerequisite_error() {
    let root = tempfile::tempdir().unwrap();
    let out = visedit(root.path(), &["edit-eval"]);
    assert_eq!(out.status.code(), Some(2));
    let ck = tiny_checkpoint(root.path());
    let set = format!("paths.pretrain_ckpt={}", ck.display());
    let out = visedit(root.path(), &["edit-eval", "--set", &set]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.vead_ckpt"));
    let out = visedit(
        root.path(),
        &[
            "edit-eval",
            "--set",
            &set,
            "--set",
            "paths.vead_ckpt=/nonexistent/v.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/v.ckpt"));
    // No run directory for a failed prerequisite.
    let runs = fs::read_dir(root.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("edit-eval")
        })
        .count();
    assert_eq!(runs, 0);
}

#[test]
fn attribute_emits_one_heatmap_per_layer() {
    let root = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(root.path());
    let set = format!("paths.pretrain_ckpt={}", ck.display());
    let args = [
        "attribute",
        "--set",
        &set,
        "--set",
        "attribution.samples=8",
        "--set",
        "attribution.draws=2",
    ];
    let dir = run_dir(&visedit(root.path(), &args));
    let pgm: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    assert_eq!(pgm.len(), 2);
    let header = b"P5\n4 4\n255\n";
    for p in &pgm {
        let bytes = fs::read(p).unwrap();
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 16);
    }
    let bars = fs::read_to_string(dir.join("bars.csv")).unwrap();
    assert_eq!(bars.lines().count(), 1 + 2 * 2);
    assert!(dir.join("effective_config.toml").exists());

    let again = run_dir(&visedit(root.path(), &args));
    assert_ne!(again, dir);
    for f in ["bars.csv", "heatmap_l01.pgm", "heatmap_l02.pgm", "calibration.json"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let wrong = run_dir(&visedit(
        root.path(),
        &[
            "attribute",
            "--mode",
            "wrong-token",
            "--set",
            &set,
            "--set",
            "attribution.samples=8",
        ],
    ));
    assert!(wrong.join("control.json").exists());
    assert!(wrong.join("bars_wrong.csv").exists());
}

#[test]
fn gen_data_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--set", "data.vqa_samples=50"];
    let a = run_dir(&visedit(root.path(), &args));
    let b = run_dir(&visedit(root.path(), &args));
    assert_ne!(a, b);
    for f in ["vqa.jsonl", "manifest.json", "effective_config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("vqa.jsonl")).unwrap().lines().count(), 50);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    for kv in [
        "pretrain.max_steps=20",
        "pretrain.eval_every=10",
        "pretrain.heldout=20",
        "data.vqa_samples=10",
        "data.n_train=6",
        "data.n_eval=4",
        "vead.l_e=1",
        "vead.d_a=8",
        "train.max_iters=6",
        "train.checkpoint_every=3",
        "train.n_s=4",
        "attribution.samples=8",
        "attribution.draws=2",
        "baseline.max_steps=2",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    let with = |cmd: &str, extra: &[String]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(args.iter().cloned());
        v.extend(extra.iter().cloned());
        v
    };
    let call = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        run_dir(&visedit(root.path(), &refs))
    };

    let pre = call(with("pretrain", &[]));
    let ck = pre.join("model.ckpt");
    assert!(ck.exists() && pre.join("pretrain_report.json").exists());
    let p_ck = vec!["--set".to_string(), format!("paths.pretrain_ckpt={}", ck.display())];

    let data = call(with("gen-data", &p_ck));
    assert_eq!(
        fs::read_to_string(data.join("edit_train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6 * 5
    );
    let mut p_data = p_ck.clone();
    p_data.extend(["--set".to_string(), format!("paths.data_dir={}", data.display())]);

    let tv = call(with("train-vead", &p_data));
    for f in [
        "vead.ckpt",
        "loss_curve.jsonl",
        "vead_000003.ckpt",
        "vead_000006.ckpt",
        "calibration.json",
    ] {
        assert!(tv.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(tv.join("loss_curve.jsonl")).unwrap().lines().count(),
        6
    );

    let mut p_all = p_data.clone();
    p_all.extend([
        "--set".to_string(),
        format!("paths.vead_ckpt={}", tv.join("vead.ckpt").display()),
    ]);
    let ev = call(with("edit-eval", &p_all));
    for f in [
        "metrics_none.json",
        "metrics_vead.json",
        "metrics_ft-l.json",
        "table.csv",
        "intensity.json",
    ] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics_vead.json")).unwrap()).unwrap();
    assert_eq!(report["t_loc"], 1.0);
    assert_eq!(report["n_cases"], 4);

    let post = call(with(
        "attribute",
        &[p_all.clone(), vec!["--mode".into(), "post-edit".into()]].concat(),
    ));
    assert!(post.join("ae_rel_l02.pgm").exists() && post.join("predictions.json").exists());

    let sw = call(with(
        "sweep-layers",
        &[p_data.clone(), vec!["--set".into(), "sweep.max_iters=2".into()]].concat(),
    ));
    assert_eq!(fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().count(), 1 + 2);

    let ab = call(with(
        "ablate",
        &[
            p_data,
            vec![
                "--set".into(),
                "ablate.max_iters=2".into(),
                "--set".into(),
                "ablate.variants=[\"full\", \"-CA\"]".into(),
            ],
        ]
        .concat(),
    ));
    assert_eq!(
        fs::read_to_string(ab.join("ablation.csv")).unwrap().lines().count(),
        1 + 2
    );
}
