use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aan_core::data::{read_manifest, read_score_file, write_feature_file, write_score_file, FeatureSequence, ScoreMatrix, Split};
use serde_json::Value;

fn aan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn aan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad json line {l:?}: {e}")))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus, quick enough to train for a few epochs.
fn small_corpus(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "synth",
        "--out",
        s(dir),
        "--videos",
        "20",
        "--min-frames",
        "12",
        "--max-frames",
        "24",
    ];
    args.extend_from_slice(extra);
    let out = aan(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--batch-size", "4"];
    args.extend_from_slice(extra);
    aan(&args)
}

fn dir_snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = aan(&["synth", "--seed", "7", "--videos", "20", "--out", s(d)]);
        assert_eq!(code(&out), 0);
    }
    let (sa, sb) = (dir_snapshot(&a), dir_snapshot(&b));
    assert!(sa.len() > 40);
    assert_eq!(sa, sb);
}

#[test]
fn synth_rejects_a_single_attribute() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aan(&["synth", "--n-attributes", "1", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 attributes"));
}

#[test]
fn synth_default_manifest_lists_every_video() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aan(&["synth", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 0);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["command"], "synth");
    assert_eq!(lines[0]["config"]["videos"], 250);
    let corpus = read_manifest(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(corpus.videos.len(), 250);
    assert_eq!(corpus.split(Split::Train).count(), 200);
    assert_eq!(corpus.split(Split::Val).count(), 50);
}

#[test]
fn synth_into_unwritable_path_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, b"x").unwrap();
    let out = aan(&["synth", "--videos", "4", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = aan(&["gradcheck", "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn build_prior_prints_conditional_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let prior_path = tmp.path().join("prior.json");
    let out = aan(&["build-prior", "--manifest", s(&manifest), "--out", s(&prior_path)]);
    assert_eq!(code(&out), 0);
    let lines = json_lines(&out);
    let p = lines[1]["p"].as_array().unwrap();
    assert_eq!(p.len(), 8);
    for (i, row) in p.iter().enumerate() {
        let row = row.as_array().unwrap();
        let diag = row[i].as_f64().unwrap();
        assert!(diag == 0.0 || diag == 1.0, "P_ii is 1 for occurring attributes");
        assert!(row.iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }
    assert!(prior_path.is_file());
}

#[test]
fn training_reduces_loss_and_writes_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let run = tmp.path().join("run");
    let out = train(&manifest, &run, &["--epochs", "6", "--lr", "3e-3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines[0]["command"], "train");
    assert_eq!(lines[0]["config"]["learning_rate"], 3e-3);
    let summary = lines.last().unwrap();
    assert!(summary["final_train_loss"].as_f64().unwrap() < summary["first_train_loss"].as_f64().unwrap());
    assert!(run.join("best.aanc").is_file() && run.join("final.aanc").is_file());
    let log = fs::read_to_string(run.join("train.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn extractor_only_ablation_is_selectable() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let out = train(&manifest, &tmp.path().join("run"), &["--epochs", "1", "--ablation", "extractor-only"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json_lines(&out)[0]["config"]["model"]["variant"], "extractor-only");
}

#[test]
fn missing_manifest_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(&tmp.path().join("nope.json"), &tmp.path().join("run"), &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));
}

#[test]
fn diverging_training_is_a_numerical_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let out = train(&manifest, &tmp.path().join("run"), &["--epochs", "5", "--lr", "1e300"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn resumed_run_logs_match_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let whole = tmp.path().join("whole");
    let split = tmp.path().join("split");
    assert_eq!(code(&train(&manifest, &whole, &["--epochs", "4"])), 0);
    assert_eq!(code(&train(&manifest, &split, &["--epochs", "2"])), 0);
    let ckpt = split.join("final.aanc");
    let out = train(&manifest, &split, &["--resume", s(&ckpt), "--epochs", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(whole.join("train.ndjson")).unwrap(),
        fs::read_to_string(split.join("train.ndjson")).unwrap()
    );
    assert_eq!(fs::read(whole.join("final.aanc")).unwrap(), fs::read(split.join("final.aanc")).unwrap());
}

fn eval(args: &[&str]) -> (i32, Vec<Value>) {
    let mut full = vec!["eval"];
    full.extend_from_slice(args);
    let out = aan(&full);
    let c = code(&out);
    (c, if c == 0 { json_lines(&out) } else { Vec::new() })
}

#[test]
fn eval_reports_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&manifest, &run, &["--epochs", "2"])), 0);
    let ckpt = run.join("final.aanc");
    let base = ["--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--conditional", "--tau", "0,20,40"];
    let (c1, a) = eval(&base);
    let (c2, b) = eval(&base);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a[1], b[1]);
    let conditional = a[1]["conditional"].as_array().unwrap();
    assert_eq!(conditional.len(), 3);
    for (entry, tau) in conditional.iter().zip([0, 20, 40]) {
        assert_eq!(entry["tau"], tau);
        for key in ["precision", "f1", "map"] {
            assert!(entry[key].is_number(), "{key} missing");
        }
    }
    let mut parallel = base.to_vec();
    parallel.extend_from_slice(&["--jobs", "3"]);
    let (c3, p) = eval(&parallel);
    assert_eq!(c3, 0);
    assert_eq!(a[1], p[1]);
}

#[test]
fn perfect_score_files_give_unit_map() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let corpus = read_manifest(&manifest).unwrap();
    let scores = tmp.path().join("scores");
    fs::create_dir_all(&scores).unwrap();
    for v in corpus.split(Split::Val) {
        let m = ScoreMatrix {
            frames: v.frames(),
            classes: corpus.class_count,
            scores: v.dense.data.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect(),
        };
        write_score_file(&scores.join(format!("{}.aans", v.id())), &m).unwrap();
    }
    let (c, lines) = eval(&["--manifest", s(&manifest), "--scores", s(&scores)]);
    assert_eq!(c, 0);
    assert_eq!(lines[1]["map"], 1.0);
}

#[test]
fn predicted_scores_reproduce_checkpoint_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&manifest, &run, &["--epochs", "2", "--precision", "f32"])), 0);
    let ckpt = run.join("final.aanc");
    let scores = tmp.path().join("scores");
    let out = aan(&["predict", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&scores)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&out)[1]["written"], 20);
    for e in fs::read_dir(&scores).unwrap() {
        let m = read_score_file(&e.unwrap().path()).unwrap();
        assert!(m.scores.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let (_, from_scores) = eval(&["--manifest", s(&manifest), "--scores", s(&scores), "--conditional"]);
    let (_, from_ckpt) = eval(&["--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--conditional"]);
    assert_eq!(from_scores[1], from_ckpt[1]);
}

#[test]
fn predict_rejects_mismatched_feature_width() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&manifest, &run, &["--epochs", "1"])), 0);
    let wrong = tmp.path().join("wide.aanf");
    write_feature_file(&wrong, &FeatureSequence::new("w", 5, 48, vec![0.1; 5 * 48]).unwrap()).unwrap();
    let out = aan(&[
        "predict",
        "--checkpoint",
        s(&run.join("final.aanc")),
        "--features",
        s(&wrong),
        "--out",
        s(&tmp.path().join("w.aans")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_rejects_incompatible_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_corpus(&tmp.path().join("c"), &[]);
    let other = small_corpus(&tmp.path().join("d"), &["--dim", "16"]);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&manifest, &run, &["--epochs", "1"])), 0);
    let (c, _) = eval(&["--manifest", s(&other), "--checkpoint", s(&run.join("final.aanc"))]);
    assert_eq!(c, 2);
}

#[test]
fn gradcheck_passes_and_reports_every_operation() {
    let out = aan(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    let checks = &lines[1..lines.len() - 1];
    assert!(checks.len() >= 15);
    for c in checks {
        assert!(c["name"].is_string());
        assert!(c["max_rel_err"].as_f64().unwrap() <= 1e-5);
    }
    assert!(checks.iter().any(|c| c["name"] == "total_loss"));
    assert_eq!(lines.last().unwrap()["failed"], 0);
}

#[test]
fn gradcheck_with_a_broken_backward_fails() {
    let out = aan(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&out), 1);
}
