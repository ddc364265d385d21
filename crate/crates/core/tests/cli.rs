use std::path::Path;
use std::process::{Command, Output};

use psp::skeleton::{load_dataset, sequence_files, PyramidSpec};
use psp::train::{attention_and_embeddings, load_checkpoint, EpochMetrics};

fn psp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psp"))
        .args(args)
        .env_remove("PSP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = psp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    for args in [&["train", "--bogus"][..], &["synth", "--classes", "2", "--nope", "1"], &["--wat"]] {
        assert_eq!(psp(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn synth_writes_one_file_per_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["synth", "--classes", "4", "--per-class", "10", "--frames", "16", "--out", s(&out)]);
    assert_eq!(sequence_files(&out).unwrap().len(), 40);
    let seqs = load_dataset(&out).unwrap();
    assert_eq!(seqs.len(), 40);
    assert!(seqs.iter().all(|q| q.n_frames() == 16 && q.n_joints == 25));
    PyramidSpec::load(&out.join("pyramid.json")).unwrap();
}

#[test]
fn train_eval_dump_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--classes", "3", "--per-class", "6", "--frames", "10", "--joints", "6", "--out", s(&data)]);
    ok(&["split", "--fraction", "0.5", "--seed", "3", "--data", s(&data)]);
    let cfg = root.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"preset":"tiny","total_epochs":2,"lr_drop_epochs":[],"warmup_epochs":1,"target_t":6,
            "batch_size_labeled":4,"batch_size_unlabeled":4,"checkpoint_every":1,"model":{"classes":3}}"#,
    )
    .unwrap();
    let run = root.join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let lines: Vec<EpochMetrics> = std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(stdout.lines().count(), 2);
    for key in ["epoch", "lr", "L_reg", "L_con", "L_z", "L_h", "L_g", "test_acc"] {
        assert!(stdout.contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(run.join("checkpoint_epoch1/manifest.json").is_file());
    let ckpt = run.join("checkpoint");

    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)])).unwrap();
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let dumps = root.join("dumps");
    ok(&[
        "dump", "--checkpoint", s(&ckpt), "--kinds", "attention,embeddings,metrics,predictions", "--data", s(&data),
        "--out", s(&dumps), "--samples", "2",
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dumps.join("attention/manifest.json")).unwrap()).unwrap();
    assert!(!manifest["entries"].as_array().unwrap().is_empty());

    // the written maps and embeddings equal a fresh recomputation
    let state = load_checkpoint(&ckpt).unwrap();
    let seqs = load_dataset(&data).unwrap();
    let take: Vec<_> = seqs.iter().take(2).collect();
    let batch = psp::skeleton::Batch::from_sequences(&take, state.config.target_t, None, state.config.motion).unwrap();
    let (maps, emb) = attention_and_embeddings(&state.model, &batch, &state.config.hyper.coefficients()).unwrap();
    let (_, _, joint) = maps.iter().find(|(name, _, _)| *name == "polymerized_joint").unwrap();
    let file = dumps.join(format!("attention/{}_motion_h1_polymerized_joint.csv", batch.ids[0]));
    let mut rdr = csv::Reader::from_path(&file).unwrap();
    let n = joint.shape()[2];
    let heads = joint.shape()[1];
    let off = ((2 * heads) + 1) * n * n; // row M + 0 (motion of sample 0), head 1
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        for j in 0..n {
            let v: f64 = rec[j + 1].parse().unwrap();
            assert_eq!(v.to_bits(), joint.data()[off + i * n + j].to_bits());
        }
    }
    let mut rdr = csv::Reader::from_path(dumps.join("embeddings.csv")).unwrap();
    let first = rdr.records().next().unwrap().unwrap();
    let (_, body) = &emb[0];
    assert_eq!(&first[1], "body");
    for (k, want) in body.data()[..body.shape()[1]].iter().enumerate() {
        assert_eq!(first[k + 3].parse::<f64>().unwrap().to_bits(), want.to_bits());
    }

    let preds = std::fs::read_to_string(dumps.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count() - 1, eval["total"].as_u64().unwrap() as usize);
    let metrics: Vec<EpochMetrics> =
        serde_json::from_str(&std::fs::read_to_string(dumps.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, lines);
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--classes", "2", "--per-class", "4", "--frames", "8", "--joints", "6", "--out", s(&data)]);
    let cfg = root.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"preset":"tiny","total_epochs":1,"lr_drop_epochs":[],"warmup_epochs":0,"target_t":4,"label_fraction":0.5,
            "batch_size_labeled":2,"batch_size_unlabeled":4,"model":{"classes":2}}"#,
    )
    .unwrap();
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_psp"));
        c.args(["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&root.join(out))]);
        match seed {
            Some(v) => c.env("PSP_SEED", v),
            None => c.env_remove("PSP_SEED"),
        };
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        load_checkpoint(&root.join(out).join("checkpoint")).unwrap().config.seed
    };
    assert_eq!(run(None, "a"), 0);
    assert_eq!(run(Some("42"), "b"), 42);
    let bad = Command::new(env!("CARGO_BIN_EXE_psp"))
        .args(["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&root.join("c"))])
        .env("PSP_SEED", "x")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"preset":"tiny","learning_rate":0.1}"#).unwrap();
    let out = psp(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
}
