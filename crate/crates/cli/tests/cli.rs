use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcmcs_core::ablation::AblationReport;
use dcmcs_core::data::load_dataset;
use dcmcs_core::report::MetricsReport;
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set",
    "model.hidden_dims=[16]",
    "--set",
    "model.latent_dim=8",
    "--set",
    "model.semantic_hidden=8",
    "--set",
    "model.instance_dim=8",
    "--set",
    "batch_size=128",
    "--pretrain-epochs",
    "2",
    "--joint-epochs",
    "2",
];

fn dcmcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmcs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dcmcs(args);
    assert!(
        out.status.success(),
        "dcmcs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = dcmcs(args);
    assert!(
        !out.status.success(),
        "dcmcs {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(tmp: &TempDir, name: &str) -> PathBuf {
    let dir = tmp.path().join(name);
    ok(&["generate", name, "--out", s(&dir)]);
    dir
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--quiet"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_bundled_recipes() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "synthetic3d-like");
    let ds = load_dataset(&data).unwrap();
    assert_eq!((ds.n_samples(), ds.n_views(), ds.n_clusters()), (600, 3, 3));

    let again = tmp.path().join("again");
    ok(&["generate", "synthetic3d-like", "--out", s(&again)]);
    assert_eq!(
        load_dataset(&again).unwrap().fingerprint(),
        ds.fingerprint()
    );

    let other = tmp.path().join("other");
    ok(&[
        "generate",
        "synthetic3d-like",
        "--out",
        s(&other),
        "--seed",
        "9",
    ]);
    assert_ne!(
        load_dataset(&other).unwrap().fingerprint(),
        ds.fingerprint()
    );

    let imb = generate(&tmp, "imbalanced-views");
    let spec: toml::Table =
        toml::from_str(&fs::read_to_string(imb.join("spec.toml")).unwrap()).unwrap();
    let noise: Vec<f64> = spec["noise"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_float().unwrap())
        .collect();
    let last = noise[noise.len() - 1];
    for &n in &noise[..noise.len() - 1] {
        assert!((last - 10.0 * n).abs() < 1e-12);
    }
}

#[test]
fn generate_from_recipe_file_and_rejects_unknown() {
    let tmp = TempDir::new().unwrap();
    let recipe = tmp.path().join("r.toml");
    fs::write(
        &recipe,
        "name = \"small\"\nn_samples = 40\nn_clusters = 2\nlatent_dim = 2\nview_dims = [3, 5]\nnoise = [0.1, 0.2]\nseparation = 3.0\nseed = 1\n",
    )
    .unwrap();
    let out = tmp.path().join("small");
    ok(&["generate", s(&recipe), "--out", s(&out)]);
    assert_eq!(load_dataset(&out).unwrap().view_dims(), vec![3, 5]);
    assert!(fails(&["generate", "no-such-recipe", "--out", s(&out)]).contains("no-such-recipe"));
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "synthetic3d-like");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train(&data, &a, &["--seed", "1"]);
    train(&data, &b, &["--seed", "1"]);
    for f in [
        "metrics.json",
        "labels.txt",
        "checkpoint/params.bin",
        "checkpoint/optimizer.bin",
    ] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let report =
        MetricsReport::from_json(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.seed, 1);
    assert!(report.metrics.is_some());
    let labels = fs::read_to_string(a.join("labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 600);
    assert!(labels.lines().all(|l| l.parse::<usize>().unwrap() < 3));
    let epochs = fs::read_to_string(a.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 4);
    assert!(a.join("run_manifest.toml").exists());

    // Replaying the manifest reproduces the run.
    let c = tmp.path().join("c");
    let manifest = a.join("run_manifest.toml");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&c),
        "--quiet",
        "--from-manifest",
        s(&manifest),
    ]);
    assert_eq!(read(&a.join("metrics.json")), read(&c.join("metrics.json")));

    // Evaluating the final checkpoint reproduces the in-training metrics.
    let e = tmp.path().join("e");
    ok(&[
        "eval",
        "--checkpoint",
        s(&a.join("checkpoint")),
        "--data",
        s(&data),
        "--out",
        s(&e),
        "--export-features",
    ]);
    assert_eq!(read(&a.join("metrics.json")), read(&e.join("metrics.json")));
    assert_eq!(read(&a.join("labels.txt")), read(&e.join("labels.txt")));
    assert_eq!(read(&e.join("features/c_hat.bin")).len(), 600 * 3 * 4);
    assert_eq!(read(&e.join("features/h_hat.bin")).len(), 600 * 8 * 4);
}

#[test]
fn zero_joint_epochs_runs_only_pretraining() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "synthetic3d-like");
    let out = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--quiet"];
    args.extend_from_slice(&TINY[..TINY.len() - 2]);
    args.extend_from_slice(&["--joint-epochs", "0"]);
    ok(&args);
    let epochs = fs::read_to_string(out.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    assert!(epochs.lines().all(|l| l.contains("\"pretrain\"")));
    let e = tmp.path().join("e");
    ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint")),
        "--data",
        s(&data),
        "--out",
        s(&e),
    ]);
    assert_eq!(
        read(&out.join("metrics.json")),
        read(&e.join("metrics.json"))
    );
}

#[test]
fn unlabelled_csv_import_gets_labels_but_no_metrics() {
    let tmp = TempDir::new().unwrap();
    let mut views = Vec::new();
    for (v, dim) in [2usize, 3].into_iter().enumerate() {
        let path = tmp.path().join(format!("v{v}.csv"));
        let rows: String = (0..30)
            .map(|i| {
                let centre = (i % 2) as f64 * 5.0;
                let row: Vec<String> = (0..dim)
                    .map(|j| format!("{}", centre + 0.01 * ((i * 7 + j * 3) % 11) as f64))
                    .collect();
                row.join(",") + "\n"
            })
            .collect();
        fs::write(&path, rows).unwrap();
        views.push(path);
    }
    let data = tmp.path().join("data");
    ok(&[
        "import-csv",
        "--view",
        s(&views[0]),
        "--view",
        s(&views[1]),
        "--clusters",
        "2",
        "--out",
        s(&data),
    ]);
    let ds = load_dataset(&data).unwrap();
    assert!(ds.labels().is_none());

    let out = tmp.path().join("run");
    train(&data, &out, &["--set", "batch_size=16"]);
    let e = tmp.path().join("e");
    ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint")),
        "--data",
        s(&data),
        "--out",
        s(&e),
    ]);
    let report =
        MetricsReport::from_json(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    assert!(report.metrics.is_none());
    let text = fs::read_to_string(e.join("metrics.json")).unwrap();
    assert!(text.contains("\"metrics\": null"));
    assert_eq!(
        fs::read_to_string(e.join("labels.txt"))
            .unwrap()
            .lines()
            .count(),
        30
    );
}

#[test]
fn invalid_inputs_fail_before_training() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "synthetic3d-like");
    let out = tmp.path().join("never");

    let err = fails(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--set",
        "loss.tau9=1",
    ]);
    assert!(err.contains("tau9"), "{err}");
    let err = fails(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--precision",
        "16",
    ]);
    assert!(err.contains("precision"), "{err}");
    let err = fails(&[
        "train",
        "--data",
        s(&tmp.path().join("missing")),
        "--out",
        s(&out),
    ]);
    assert!(err.contains("missing"), "{err}");
    let err = fails(&[
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--arms",
        "full,bogus",
    ]);
    assert!(err.contains("bogus"), "{err}");
    assert!(
        !out.exists(),
        "output directory created by a rejected command"
    );

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = -1.0\n").unwrap();
    let err = fails(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "synthetic3d-like");
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let recipe = tmp.path().join("r.toml");
    fs::write(
        &recipe,
        "name = \"narrow\"\nn_samples = 30\nn_clusters = 3\nlatent_dim = 2\nview_dims = [4, 4, 4]\nnoise = [0.1, 0.1, 0.1]\nseparation = 3.0\nseed = 1\n",
    )
    .unwrap();
    let narrow = tmp.path().join("narrow");
    ok(&["generate", s(&recipe), "--out", s(&narrow)]);
    let err = fails(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--data",
        s(&narrow),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert!(err.contains("20"), "{err}");
}

#[test]
fn ablate_writes_parseable_table() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, "imbalanced-views");
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--arms",
        "full,without-rc",
        "--seeds",
        "0,1",
    ];
    args.extend_from_slice(TINY);
    let stdout = String::from_utf8(ok(&args).stdout).unwrap();
    assert!(stdout.contains("without-rc"));
    let text = fs::read_to_string(out.join("ablation.json")).unwrap();
    let report = AblationReport::from_json(&text).unwrap();
    assert_eq!(report.to_json(), text);
    assert_eq!(report.arms.len(), 2);
    for arm in &report.arms {
        let seeds: Vec<u64> = arm.runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![0, 1]);
    }
    assert_eq!(
        fs::read_to_string(out.join("ablation.txt")).unwrap(),
        report.render_table()
    );
}
