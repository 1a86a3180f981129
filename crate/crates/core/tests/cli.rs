use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
[network]
d_model = 16
n_blocks = 1
n_heads = 2
[data.source]
kind = "synthetic"
classes = ["q", "g", "w"]
jets_per_class = 40
seed = 3
[distill]
epochs = 2
batch_size = 16
[finetune]
epochs = 2
batch_size = 32
label_fraction = 0.5
[finetune.grid]
decays = [0.7]
base_lrs = [1e-3]
[anomaly]
background = ["q", "g"]
k = 5
[anomaly.gmm]
components = 2
restarts = 2
"#;

fn jetdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jetdistill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = jetdistill(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn pretrain_probe_finetune_score_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["pretrain", "--config", &cfg, "--out", &s(&a), "--quiet"]);
    ok(&["pretrain", "--config", &cfg, "--out", &s(&b), "--quiet"]);
    for f in [
        "metrics.csv",
        "student/manifest.json",
        "teacher/manifest.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    // The snapshot reruns the same experiment.
    let snap = s(&a.join("config.toml"));
    let c = tmp.path().join("c");
    ok(&["pretrain", "--config", &snap, "--out", &s(&c), "--quiet"]);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(c.join("metrics.csv")).unwrap()
    );

    let probe = tmp.path().join("probe");
    let out = ok(&[
        "probe",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--k",
        "5",
        "--out",
        &s(&probe),
    ]);
    assert!(out.starts_with("accuracy "));
    for f in ["metrics.json", "embeddings.npy", "labels.npy", "roc_q.csv"] {
        assert!(probe.join(f).exists(), "{f}");
    }

    let ft = tmp.path().join("ft");
    ok(&[
        "finetune",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--out",
        &s(&ft),
    ]);
    let ev = tmp.path().join("ev");
    ok(&[
        "evaluate",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&ft.join("finetuned")),
        "--out",
        &s(&ev),
    ]);
    assert!(ev.join("metrics.json").exists());
    ok(&[
        "finetune",
        "--config",
        &cfg,
        "--scratch",
        "--out",
        &s(&tmp.path().join("scratch")),
    ]);

    let sc = tmp.path().join("score");
    let out = ok(&[
        "score",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--checkpoint",
        &s(&b),
        "--select",
        "best",
        "--metric",
        "knn,gmm",
        "--out",
        &s(&sc),
    ]);
    assert_eq!(out.lines().count(), 2);
    for f in [
        "scores_knn.csv",
        "scores_gmm.csv",
        "anomaly_auc.json",
        "selection.json",
    ] {
        assert!(sc.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(sc.join("scores_knn.csv")).unwrap();
    assert!(header.starts_with("jet_id,label,score"));

    let ins = tmp.path().join("inspect");
    ok(&[
        "inspect",
        "augment",
        "--config",
        &cfg,
        "--jet",
        "0,3",
        "--out",
        &s(&ins),
    ]);
    ok(&[
        "inspect",
        "attention",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--out",
        &s(&ins),
    ]);
    ok(&[
        "inspect",
        "project2d",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--out",
        &s(&ins.join("pca.csv")),
    ]);
    for f in [
        "augment_jet0.csv",
        "augment_jet3.csv",
        "attention_jet0.csv",
        "pca.csv",
    ] {
        assert!(ins.join(f).exists(), "{f}");
    }
}

#[test]
fn generated_directory_feeds_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = ok(&[
        "generate",
        "--classes",
        "q,t",
        "--jets-per-class",
        "20",
        "--seed",
        "4",
        "--out",
        &s(&data),
    ]);
    assert!(out.starts_with("40 jets"));
    let text = format!(
        "[network]\nd_model = 16\nn_blocks = 1\nn_heads = 2\n[data.source]\nkind = \"dir\"\npath = \"{}\"\n[distill]\nepochs = 1\nbatch_size = 8\n",
        data.display()
    );
    let cfg = write_config(tmp.path(), "dir.toml", &text);
    ok(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        &s(&tmp.path().join("run")),
        "--repeat",
        "2",
        "--quiet",
    ]);
    assert!(tmp.path().join("run/rep_1/student/manifest.json").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = write_config(
        tmp.path(),
        "missing.toml",
        "[data.source]\nkind = \"dir\"\npath = \"/nonexistent/jets\"\n",
    );
    let run = tmp.path().join("never");
    let out = jetdistill(&["pretrain", "--config", &missing, "--out", &s(&run)]);
    assert!(!out.status.success());
    assert!(!run.exists());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let typo = write_config(tmp.path(), "typo.toml", "[distill]\nepoch = 3\n");
    let out = jetdistill(&["pretrain", "--config", &typo]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let a = tmp.path().join("a");
    ok(&["pretrain", "--config", &cfg, "--out", &s(&a), "--quiet"]);
    let wide = write_config(
        tmp.path(),
        "wide.toml",
        &TINY.replace("d_model = 16", "d_model = 24"),
    );
    let out = jetdistill(&["probe", "--config", &wide, "--checkpoint", &s(&a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("24"));

    let out = jetdistill(&[
        "score",
        "--config",
        &cfg,
        "--checkpoint",
        &s(&a),
        "--checkpoint",
        &s(&a),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--select best"));
}
