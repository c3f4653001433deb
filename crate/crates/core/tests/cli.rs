use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lexmap::encoder::read_model;
use lexmap::volume_space::read_volume;

fn lexmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexmap"))
        .args(args)
        .env_remove("LEXMAP_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = lexmap(args);
    assert!(o.status.success(), "lexmap {args:?} failed: {}", stderr(&o));
    o
}

struct World {
    dir: tempfile::TempDir,
}

impl World {
    fn new(docs: usize) -> World {
        let dir = tempfile::tempdir().unwrap();
        let w = World { dir };
        ok(&["synth", "--docs", &docs.to_string(), "--seed", "4", "-o", &w.s("w")]);
        w
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }
}

fn provenance(path: &Path) -> serde_json::Value {
    serde_json::from_str(&read_model(path).unwrap().provenance).unwrap()
}

#[test]
fn help_lists_every_subcommand_with_units() {
    for sub in ["features", "fit", "predict", "evaluate", "contrast", "synth"] {
        let o = ok(&[sub, "--help"]);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--seed") && text.contains("--threads") && text.contains("--config"), "{sub}");
        assert!(text.contains("[path"), "{sub} help lacks units");
    }
    let fit = String::from_utf8_lossy(&ok(&["fit", "--help"]).stdout).into_owned();
    for flag in ["--voxel-size", "--h ", "--bbox", "--mask", "--atlas", "--labels", "--loss", "--lambda"] {
        assert!(fit.contains(flag), "fit help lacks {flag}");
    }
    assert!(fit.contains("[mm") && fit.contains("[voxels"));
    let eval = String::from_utf8_lossy(&ok(&["evaluate", "--help"]).stdout).into_owned();
    assert!(eval.contains("--folds") && eval.contains("--test-fraction") && eval.contains("[fraction"));
}

#[test]
fn errors_name_the_offending_field() {
    let o = lexmap(&["fit", "--bogus", "-o", "x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"));

    let o = lexmap(&["fit", "--corpus", "/nonexistent/c.jsonl", "--vocab", "/nonexistent/v.txt", "-o", "m"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`corpus`"), "{}", stderr(&o));

    let w = World::new(30);
    let o = lexmap(&["evaluate", "--corpus", &w.s("w/corpus.jsonl"), "--vocab", &w.s("w/vocab.txt"), "--test-fraction", "1.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("test_fraction"), "{}", stderr(&o));

    std::fs::write(w.p("bad.toml"), "voxel_sise = 3\n").unwrap();
    let o = lexmap(&["fit", "--config", &w.s("bad.toml"), "-o", "m"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`config`") && stderr(&o).contains("voxel_sise"), "{}", stderr(&o));

    let o = lexmap(&["fit", "--corpus", &w.s("w/corpus.jsonl"), "--vocab", &w.s("w/vocab.txt"), "--voxel-size", "-2", "-o", &w.s("m")]);
    assert!(stderr(&o).contains("voxel_size"), "{}", stderr(&o));

    let o = lexmap(&["fit", "--corpus", &w.s("w/corpus.jsonl"), "--vocab", &w.s("w/vocab.txt"), "--loss", "label", "-o", &w.s("m")]);
    assert!(stderr(&o).contains("`atlas`"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let w = World::new(40);
    let cfg = format!(
        "corpus = \"{}\"\nvocab = \"{}\"\nvoxel_size = 12.0\nbbox = [0.0, 0.0, 0.0, 48.0, 48.0, 48.0]\nlambda = 0.5\nloss = \"ridge\"\n",
        w.s("w/corpus.jsonl"),
        w.s("w/vocab.txt")
    );
    std::fs::write(w.p("run.toml"), cfg).unwrap();

    ok(&["fit", "--config", &w.s("run.toml"), "-o", &w.s("a.lxm")]);
    let a = provenance(&w.p("a.lxm"));
    assert_eq!(a["space"]["voxel_size"], 12.0);
    assert_eq!(a["loss"], "ridge");
    assert_eq!(a["lambda"]["fixed"], 0.5);
    assert_eq!(a["space"]["h"], 1.0);
    assert_eq!(a["seed"], 0);

    ok(&["fit", "--config", &w.s("run.toml"), "--voxel-size", "16", "--h", "0.5", "--seed", "3", "-o", &w.s("b.lxm")]);
    let b = provenance(&w.p("b.lxm"));
    assert_eq!(b["space"]["voxel_size"], 16.0);
    assert_eq!(b["space"]["h"], 0.5);
    assert_eq!(b["seed"], 3);
    assert_eq!(read_model(&w.p("b.lxm")).unwrap().m, 27);
}

#[test]
fn pipeline_and_empty_text_prediction() {
    let w = World::new(60);
    let space = ["--bbox", "0,0,0,48,48,48", "--voxel-size", "12"];
    let corpus = w.s("w/corpus.jsonl");
    let vocab = w.s("w/vocab.txt");

    ok(&["features", "--corpus", &corpus, "--vocab", &vocab, "-o", &w.s("f.bin")]);
    assert!(w.p("f.bin.json").exists());

    let (feats, empty, contrast) = (w.s("f.bin"), w.s("empty.txt"), w.s("c.nii"));
    let mut fit = vec!["fit", "--corpus", &corpus, "--vocab", &vocab, "--features", &feats];
    let model = w.s("m.lxm");
    fit.extend(["--loss", "lad", "--lambda", "1,0.1", "-o", &model]);
    fit.extend(space);
    ok(&fit);
    let m = read_model(&w.p("m.lxm")).unwrap();
    assert!(m.lambda == 1.0 || m.lambda == 0.1);

    std::fs::write(w.p("empty.txt"), "").unwrap();
    let out = w.s("empty.lxv");
    let mut pred = vec!["predict", "--model", &model, "--vocab", &vocab, "--text", &empty, "-o", &out];
    pred.extend(space);
    ok(&pred);
    let vol = read_volume(&w.p("empty.lxv")).unwrap();
    let vv = 12f64.powi(3);
    for (v, b) in vol.values.iter().zip(&m.intercept) {
        assert!((v - b / vv).abs() <= 1e-6 * (b / vv).abs().max(1e-12), "{v} vs {}", b / vv);
    }

    let mut con = vec!["contrast", "--model", &model, "--corpus", &corpus, "--vocab", &vocab, "--term", "term2", "-o", &contrast];
    con.extend(space);
    ok(&con);
    assert!(w.p("c.nii").exists());

    // a different partition is rejected
    let mut bad = pred[..pred.len() - 2].to_vec();
    bad.extend(["--voxel-size", "16"]);
    let o = lexmap(&bad);
    assert!(!o.status.success() && stderr(&o).contains("partition"));
}

#[test]
fn synth_is_deterministic_and_evaluate_prints_json() {
    let a = World::new(25);
    let b = World::new(25);
    for f in ["corpus.jsonl", "vocab.txt", "labels.txt", "truth.json"] {
        assert_eq!(std::fs::read(a.p("w").join(f)).unwrap(), std::fs::read(b.p("w").join(f)).unwrap(), "{f}");
    }
    // the atlas header echoes the (different) output directory
    assert_eq!(read_volume(&a.p("w/atlas.lxv")).unwrap(), read_volume(&b.p("w/atlas.lxv")).unwrap());
    let o = ok(&[
        "evaluate", "--corpus", &a.s("w/corpus.jsonl"), "--vocab", &a.s("w/vocab.txt"),
        "--bbox", "0,0,0,48,48,48", "--voxel-size", "16", "--folds", "2", "--test-fraction", "0.2",
        "--model", "ridge", "--model", "baseline", "--lambda", "1",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 2);
    assert_eq!(report["provenance"]["folds"], 2);
    assert_eq!(report["config"]["n_folds"], 2);
}
