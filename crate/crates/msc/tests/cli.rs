use std::path::Path;
use std::process::{Command, Output};

fn msc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msc")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"{
  "data": {"manifest": "data/manifest.json", "n_subjects": 20, "split": {"folds": 5, "holdout_frac": 0.2}},
  "objective": {"terms": ["RR", "XX"]},
  "train": {"epochs": 2, "checkpoint_k": 2},
  "eval": {"probe": {"trials": 4, "c_min": 1e-6, "c_max": 1e3, "l1_min": 0.0, "l1_max": 1.0, "seed": 0, "max_iter": 200, "tol": 1e-6}},
  "saliency": {"steps": 8, "min_cluster_size": 4, "dims": "top-beta", "top_beta": 2, "top_k": 8}
}"#;

#[test]
fn list_prints_fifteen_nodes_and_five_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&msc(&["list"], dir.path()));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("taxonomy\t")).count(), 15);
    assert_eq!(lines.iter().filter(|l| l.starts_with("baseline\t")).count(), 5);
    assert!(lines.contains(&"taxonomy\tCR-RR-XX-CC") || lines.iter().any(|l| l.ends_with("CR-RR-XX-CC")));
}

#[test]
fn full_pipeline_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("config.json"), CONFIG).unwrap();
    // The manifest does not exist yet, so synth runs on the default data
    // section with the same subject count.
    std::fs::write(root.join("synth.json"), r#"{"data": {"n_subjects": 20, "split": {"folds": 5, "holdout_frac": 0.2}}}"#).unwrap();
    ok(&msc(&["synth", "--config", "synth.json", "--out", "data"], root));
    assert!(root.join("data/manifest.json").exists() && root.join("data/atlas.mscv").exists());

    ok(&msc(&["pretrain", "--config", "config.json", "--fold", "1", "--out", "exp"], root));
    let exp = root.join("exp");
    for f in ["config.json", "metrics.csv"] {
        assert!(exp.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(exp.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_loss,\"RR(1,2)\",\"RR(2,1)\",\"XX(1,2)\",\"XX(2,1)\"\n"), "{metrics}");
    assert_eq!(metrics.lines().count(), 3);

    let probe = ok(&msc(&["probe", "exp", "--task", "2way"], root));
    assert!(probe.starts_with("selected checkpoint"));
    let results = std::fs::read_to_string(exp.join("results_2way.csv")).unwrap();
    let rows: Vec<&str> = results.lines().collect();
    assert_eq!(rows[0], "model,fold,modality,task,metric_val,metric_test,checkpoint_id");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("RR-XX,1,m1,2way,"));

    ok(&msc(&["align", "exp"], root));
    let cka = std::fs::read_to_string(exp.join("cka.csv")).unwrap();
    assert!(cka.starts_with("model,fold,cka\nRR-XX,1,"));

    ok(&msc(&["saliency", "exp"], root));
    for f in ["clusters.json", "dice.json", "links.json", "links.csv"] {
        assert!(exp.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(exp.join("links.csv")).unwrap().starts_with("roi_m1,roi_m2,weight,rank"));
    assert!(std::fs::read_dir(exp.join("saliency")).unwrap().count() >= 2);

    ok(&msc(&["report", "exp", "--out", "rep"], root));
    let report = std::fs::read_to_string(root.join("rep/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(root.join("rep/report.png").exists() && root.join("rep/report_cka.csv").exists());
}

#[test]
fn errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = msc(&["probe", "nowhere"], root);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));

    std::fs::write(root.join("bad.json"), r#"{"objective": {"terms": ["RR", "QQ"]}}"#).unwrap();
    let out = msc(&["pretrain", "--config", "bad.json", "--out", "x"], root);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("QQ") && err.contains("CR-RR-XX-CC") && err.contains("Supervised"), "{err}");

    std::fs::write(root.join("missing.json"), r#"{"data": {"manifest": "absent/manifest.json"}}"#).unwrap();
    let out = msc(&["pretrain", "--config", "missing.json", "--out", "x"], root);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth"));
}

#[test]
fn cc_alone_warns_and_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = r#"{"data": {"n_subjects": 20}, "objective": {"terms": ["CC"]}, "train": {"epochs": 1, "batch_size": 4}}"#;
    std::fs::write(root.join("cc.json"), cfg).unwrap();
    let out = msc(&["pretrain", "--config", "cc.json", "--out", "cc"], root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("random projection"));
    assert!(root.join("cc/metrics.csv").exists());
}
