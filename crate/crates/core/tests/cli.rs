use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scgplvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scgplvm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_sim(dir: &Path, seed: &str) {
    let out = scgplvm(&[
        "--threads", "1", "simulate", "--seed", seed, "--n-cells-per-batch", "60", "--n-genes", "40", "--out", p(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_defaults_write_desk_scale_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scgplvm(&["simulate", "--out", p(tmp.path())]);
    assert!(out.status.success());
    let counts = fs::read_to_string(tmp.path().join("counts.csv")).unwrap();
    let mut lines = counts.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 501);
    assert_eq!(lines.count(), 2000);
    let meta = fs::read_to_string(tmp.path().join("meta.csv")).unwrap();
    assert_eq!(meta.lines().count(), 2001);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_sim(a.path(), "42");
    small_sim(b.path(), "42");
    for f in ["counts.csv", "meta.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn simulate_rejects_bad_de_prob_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scgplvm(&["simulate", "--de-prob", "1.5", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("de_prob"));
}

#[test]
fn simulate_reads_json_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    fs::write(&cfg, r#"{"n_cells_per_batch": 10, "n_genes": 7, "n_batches": 3}"#).unwrap();
    let out_dir = tmp.path().join("run");
    let out = scgplvm(&["simulate", "--config", p(&cfg), "--format", "mtx", "--out", p(&out_dir)]);
    assert!(out.status.success());
    let mtx = fs::read_to_string(out_dir.join("counts.mtx")).unwrap();
    assert!(mtx.starts_with("%%shape 30 7"));

    fs::write(&cfg, "{not json").unwrap();
    let out = scgplvm(&["simulate", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_two_epochs_exports_n_by_ten_embedding() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let out = scgplvm(&["simulate", "--out", p(&sim)]);
    assert!(out.status.success());
    let run = tmp.path().join("train");
    let out = scgplvm(&[
        "train",
        "--data",
        p(&sim.join("counts.csv")),
        "--meta",
        p(&sim.join("meta.csv")),
        "--preset",
        "proposed",
        "--epochs",
        "2",
        "--out",
        p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let emb = fs::read_to_string(run.join("embedding.csv")).unwrap();
    let mut lines = emb.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 11);
    assert_eq!(lines.count(), 2000);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 7);
    assert!(run.join("checkpoints/final.json").exists());
}

#[test]
fn gaussian_preset_manifest_records_log_gaussian_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    small_sim(&sim, "3");
    let run = tmp.path().join("train");
    let out = scgplvm(&[
        "train",
        "--data",
        p(&sim.join("counts.csv")),
        "--meta",
        p(&sim.join("meta.csv")),
        "--preset",
        "gaussian_likelihood",
        "--epochs",
        "1",
        "--out",
        p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["pipeline"]["kind"], "log_gaussian");
    assert_eq!(manifest["config"]["preset"], "gaussian_likelihood");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn train_missing_data_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scgplvm(&[
        "train",
        "--data",
        p(&tmp.path().join("absent.csv")),
        "--meta",
        p(&tmp.path().join("absent_meta.csv")),
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_ideal(dir: &Path, nan: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let emb = dir.join("emb.csv");
    let meta = dir.join("meta.csv");
    let mut e = String::from("cell_id,z1,z2\n");
    let mut m = String::from("cell_id,batch,celltype\n");
    for t in 0..3 {
        for i in 0..40 {
            let id = format!("c{t}_{i}");
            let x = if nan && t == 1 && i == 0 { "NaN".to_string() } else { (10 * t).to_string() };
            e.push_str(&format!("{id},{x},{}\n", 5 * t));
            m.push_str(&format!("{id},b{},t{t}\n", i % 2));
        }
    }
    fs::write(&emb, e).unwrap();
    fs::write(&meta, m).unwrap();
    (emb, meta)
}

#[test]
fn eval_ideal_embedding_scores_high() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, meta) = write_ideal(tmp.path(), false);
    let run = tmp.path().join("eval");
    let out = scgplvm(&["eval", "--embedding", p(&emb), "--meta", p(&meta), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let avg_bio: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("avg_bio "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(avg_bio >= 0.95, "{stdout}");
    assert!(stdout.contains("avg_batch"));
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["clustering_meta"]["knn"], 15);
    assert_eq!(report["clustering_meta"]["resolution"], 1.0);
}

#[test]
fn eval_rejects_nan_and_unknown_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, meta) = write_ideal(tmp.path(), true);
    let out = scgplvm(&["eval", "--embedding", p(&emb), "--meta", p(&meta), "--out", p(&tmp.path().join("a"))]);
    assert_eq!(out.status.code(), Some(2));

    let (emb, meta) = write_ideal(tmp.path(), false);
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.lines().take(100).collect::<Vec<_>>().join("\n")).unwrap();
    let out = scgplvm(&["eval", "--embedding", p(&emb), "--meta", p(&meta), "--out", p(&tmp.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_small_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    small_sim(tmp.path(), "5");
    let out = scgplvm(&[
        "gradcheck",
        "--data",
        p(&tmp.path().join("counts.csv")),
        "--meta",
        p(&tmp.path().join("meta.csv")),
        "--preset",
        "learned_library",
        "--batch-size",
        "16",
        "--n-params",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_rel_error"));
}
