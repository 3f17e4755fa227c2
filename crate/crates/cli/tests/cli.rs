use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use espresso_core::audio_features::{write_wav_pcm16, AudioClip};
use espresso_core::corpus::load_catalog;
use espresso_core::numerics::load_model;
use espresso_core::retrieval::{build_index, query_response};
use espresso_core::text_encoder::load_embedding_table;
use tempfile::TempDir;

fn espresso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_espresso"))
        .args(args)
        .env_remove("ESPRESSO_PORT")
        .env_remove("ESPRESSO_CATALOG")
        .env_remove("ESPRESSO_MODEL")
        .env_remove("ESPRESSO_EMBEDDINGS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = espresso(&["synth", "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn train(&self, extra: &[&str]) -> Output {
        let (c, p, e, m) = (self.path("catalog.json"), self.path("pairs.json"), self.path("embeddings.txt"), self.path("model.json"));
        let mut args = vec!["train", "--catalog", &c, "--pairs", &p, "--embeddings", &e, "--out", &m];
        args.extend_from_slice(extra);
        espresso(&args)
    }

    fn query(&self, piece: &str, text: &str, format: &str) -> Output {
        espresso(&[
            "query",
            "--model",
            &self.path("model.json"),
            "--catalog",
            &self.path("catalog.json"),
            "--embeddings",
            &self.path("embeddings.txt"),
            "--piece",
            piece,
            "--text",
            text,
            "--format",
            format,
        ])
    }

    fn first_text(&self) -> String {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(self.path("pairs.json")).unwrap()).unwrap();
        v["pairs"][0]["text"].as_str().unwrap().to_string()
    }
}

#[test]
fn train_without_pca_writes_no_pca_block() {
    let f = Fixture::new();
    let out = f.train(&["--pca", "off"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("model.json")).unwrap()).unwrap();
    assert!(v.get("pca").is_none_or(|p| p.is_null()));
    assert_eq!(v["trained_on"]["core"], 30);
    assert!(v["trained_on"].get("pitchfork").is_none());
}

#[test]
fn augmentation_adds_auxiliary_pairs() {
    let f = Fixture::new();
    let out = f.train(&["--augment", "pitchfork,musiccaps"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let model = load_model(f.path("model.json")).unwrap();
    assert_eq!(model.trained_on["core"], 30);
    assert_eq!(model.trained_on["pitchfork"], 20);
    assert_eq!(model.trained_on["musiccaps"], 20);
}

#[test]
fn pca_is_capped_by_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    fs::write(
        p("catalog.json"),
        r#"{"schema_version":1,"pieces":[{"piece_id":"a","title":"A","performance_ids":["a1","a2","a3"]}],
        "performances":[
          {"performance_id":"a1","piece_id":"a","artist_label":"x","features":[1,2,3,4,5,6,7,1]},
          {"performance_id":"a2","piece_id":"a","artist_label":"y","features":[2,1,3,4,5,6,7,2]},
          {"performance_id":"a3","piece_id":"a","artist_label":"z","features":[3,3,1,4,5,6,7,3]}]}"#,
    )
    .unwrap();
    fs::write(
        p("pairs.json"),
        r#"{"schema_version":1,"pairs":[
          {"text":"calm","target_features":[1,2,3,4,5,6,7,1],"source":"core","piece_id":"a","performance_id":"a1"},
          {"text":"bright","target_features":[2,1,3,4,5,6,7,2],"source":"core","piece_id":"a","performance_id":"a2"},
          {"text":"dark","target_features":[3,3,1,4,5,6,7,3],"source":"core","piece_id":"a","performance_id":"a3"}]}"#,
    )
    .unwrap();
    fs::write(p("emb.txt"), "calm 1 0 0 0\nbright 0 1 0 0\ndark 0 0 1 0.5\n").unwrap();
    let out = espresso(&[
        "train", "--catalog", &p("catalog.json"), "--pairs", &p("pairs.json"), "--embeddings", &p("emb.txt"), "--pca", "0.95",
        "--out", &p("model.json"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let model = load_model(p("model.json")).unwrap();
    assert!(model.pca.unwrap().output_dim() <= 2);
}

#[test]
fn query_table_lists_every_performance() {
    let f = Fixture::new();
    assert!(f.train(&[]).status.success());
    let out = f.query("piece01", &f.first_text(), "table");
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.contains("piece01-perf")).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].trim_start().starts_with("1 "));
}

#[test]
fn document_format_matches_library_output() {
    let f = Fixture::new();
    assert!(f.train(&[]).status.success());
    let text = f.first_text();
    let out = f.query("piece01", &text, "document");
    assert!(out.status.success(), "{}", stderr(&out));

    let model = load_model(f.path("model.json")).unwrap();
    let catalog = load_catalog(f.path("catalog.json")).unwrap();
    let table = load_embedding_table(f.path("embeddings.txt"), None).unwrap();
    let index = build_index(&catalog, &model).unwrap();
    let direct = query_response(&index, &model, &table, "piece01", &text).unwrap();
    assert_eq!(stdout(&out), serde_json::to_string_pretty(&direct).unwrap() + "\n");
}

#[test]
fn query_errors_exit_1() {
    let f = Fixture::new();
    assert!(f.train(&[]).status.success());
    let out = f.query("nosuchpiece", "anything", "table");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nosuchpiece"));
    let out = f.query("piece01", "zzzz", "table");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("zzzz"));
}

#[test]
fn usage_errors_exit_2_without_touching_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let m = model.to_str().unwrap();
    for args in [
        vec!["train", "--catalog", "c", "--pairs", "p", "--embeddings", "e", "--out", m, "--pca", "1.5"],
        vec!["train", "--catalog", "c", "--pairs", "p", "--embeddings", "e", "--out", m, "--ridge", "-1"],
        vec!["train", "--catalog", "c", "--pairs", "p", "--embeddings", "e", "--out", m, "--augment", "reddit"],
        vec!["evaluate", "--catalog", "c", "--pairs", "p", "--embeddings", "e", "--table2"],
        vec!["onsets", "--audio", m, "--frame", "1000"],
        vec!["frobnicate"],
    ] {
        let out = espresso(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
    assert!(!model.exists());
}

#[test]
fn missing_inputs_exit_1() {
    let out = espresso(&["train", "--catalog", "/nonexistent/c.json", "--pairs", "p", "--embeddings", "e", "--out", "m"]);
    assert_eq!(out.status.code(), Some(1));
    let out = espresso(&["serve", "--catalog", "/nonexistent/c.json", "--model", "m", "--embeddings", "e"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_reads_paths_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_espresso"))
        .arg("serve")
        .env("ESPRESSO_CATALOG", "/nonexistent/from-env.json")
        .env("ESPRESSO_MODEL", "m")
        .env("ESPRESSO_EMBEDDINGS", "e")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("from-env.json"));
}

#[test]
fn evaluate_is_deterministic() {
    let f = Fixture::new();
    let run = |csv: &str| {
        let out = espresso(&[
            "evaluate", "--catalog", &f.path("catalog.json"), "--pairs", &f.path("pairs.json"), "--embeddings",
            &f.path("embeddings.txt"), "--grid", "--seed", "7", "--csv", csv,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        (stdout(&out), fs::read(csv).unwrap())
    };
    let a = run(&f.path("a.csv"));
    let b = run(&f.path("b.csv"));
    assert_eq!(a, b);
    let csv = String::from_utf8(a.1).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("augment_pitchfork,augment_musiccaps,pca,standardize,ridge_lambda,top1,top2,mrr,n_queries\n"));
    assert!(a.0.contains("random baseline"));
}

#[test]
fn single_configuration_evaluation() {
    let f = Fixture::new();
    let report = f.path("report.json");
    let out = espresso(&[
        "evaluate", "--catalog", &f.path("catalog.json"), "--pairs", &f.path("pairs.json"), "--embeddings",
        &f.path("embeddings.txt"), "--pca", "off", "--augment", "musiccaps", "--report", &report,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 1);
    assert_eq!(v["reports"][0]["per_fold"].as_array().unwrap().len(), 6);
    assert_eq!(v["reports"][0]["config"]["augment_musiccaps"], true);
    assert_eq!(v["random_baseline"]["trials"], 10000);
}

const SR: u32 = 44_100;

fn write_clip(path: &Path, samples: Vec<f32>) {
    write_wav_pcm16(path, &AudioClip::new(samples, SR).unwrap()).unwrap();
}

fn clicks(seconds: f64) -> Vec<f32> {
    let n = (seconds * f64::from(SR)) as usize;
    (0..n).map(|i| if i % (SR as usize / 4) < 44 { 0.8 } else { 0.0 }).collect()
}

#[test]
fn onsets_single_file() {
    let dir = tempfile::tempdir().unwrap();
    let click = dir.path().join("click.wav");
    write_clip(&click, clicks(10.0));
    let out = espresso(&["onsets", "--audio", click.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let d: f64 = stdout(&out).trim().parse().unwrap();
    assert!((d - 4.0).abs() <= 0.2, "{d}");

    let silent = dir.path().join("silent.wav");
    write_clip(&silent, vec![0.0; 3 * SR as usize]);
    let out = espresso(&["onsets", "--audio", silent.to_str().unwrap()]);
    assert_eq!(stdout(&out).trim(), "0.0000");

    let short = dir.path().join("short.wav");
    write_clip(&short, vec![0.0; SR as usize / 2]);
    let out = espresso(&["onsets", "--audio", short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("clip too short"));
}

#[test]
fn onsets_batch_patch() {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().into();
    write_clip(&root.join("a.wav"), clicks(4.0));
    fs::write(
        root.join("catalog.json"),
        r#"{"schema_version":1,"pieces":[{"piece_id":"p","title":"P","performance_ids":["p1","p2","p3"]}],
        "performances":[
          {"performance_id":"p1","piece_id":"p","artist_label":"x","features":[1,1,1,1,1,1,1,9],"audio_path":"a.wav"},
          {"performance_id":"p2","piece_id":"p","artist_label":"y","features":[1,1,1,1,1,1,1,9],"audio_path":"missing.wav"},
          {"performance_id":"p3","piece_id":"p","artist_label":"z","features":[1,1,1,1,1,1,1,9]}]}"#,
    )
    .unwrap();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let out = espresso(&[
        "onsets",
        "--catalog",
        &s(root.join("catalog.json")),
        "--patch-out",
        &s(root.join("patch.json")),
        "--patched-catalog",
        &s(root.join("patched.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("missing.wav"));
    let patch: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("patch.json")).unwrap()).unwrap();
    let d = patch["onset_density"]["p1"].as_f64().unwrap();
    assert!((d - 4.0).abs() <= 0.3, "{d}");
    assert!(patch["onset_density"].get("p2").is_none());
    let patched = load_catalog(root.join("patched.json")).unwrap();
    assert_eq!(patched.performance("p1").unwrap().features.onset_density(), d);
    assert_eq!(patched.performance("p3").unwrap().features.onset_density(), 9.0);
}
