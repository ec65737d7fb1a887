use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use aan_core::checks::{gradient_suite, SuiteConfig};
use aan_core::data::{
    generate_synthetic_corpus, read_feature_file, read_manifest, read_score_file, write_corpus_dir, write_score_file,
    Corpus, ScoreMatrix, Split, SynthSpec, VideoRecord,
};
use aan_core::graph::{corpus_prior, Variant};
use aan_core::metrics::{action_conditional_metrics, class_curves, per_frame_map, EvalRun, VideoScores};
use aan_core::train::{checkpoint_scalar_bytes, decode_checkpoint, predict_scores, save_checkpoint, ModelState, TrainConfig};
use aan_core::{Error, Scalar};
use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::{
    Ablation, EvalArgs, GradcheckArgs, Precision, PredictArgs, PriorArgs, Profile, SynthArgs, TrainArgs,
};
use crate::Outcome;

fn emit(value: Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf()).into()
        } else {
            anyhow::Error::from(e).context(format!("reading {}", path.display()))
        }
    })
}

fn load_corpus(manifest: &Path) -> Result<Corpus> {
    read_manifest(manifest).with_context(|| format!("loading corpus {}", manifest.display()))
}

macro_rules! override_fields {
    ($target:expr, $src:expr; $($field:ident => $dst:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field { $target.$dst = v; } )*
    };
}

pub fn synth(a: SynthArgs) -> Result<Outcome> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    override_fields!(spec, a;
        seed => seed, videos => videos, n_attributes => attributes, classes => classes, dim => dim,
        min_frames => min_frames, max_frames => max_frames, noise_sigma => noise_sigma,
        occlusion => occlusion, planted_pairs => planted_pairs, pair_rate => pair_rate,
        val_fraction => val_fraction, test_fraction => test_fraction,
    );
    emit(json!({"command": "synth", "config": spec}))?;
    let synth = generate_synthetic_corpus(&spec)?;
    let manifest = write_corpus_dir(&a.out, &synth.corpus).with_context(|| format!("writing {}", a.out.display()))?;
    let record = json!({"spec": spec, "planted_pairs": synth.planted_pairs});
    fs::write(a.out.join("synth.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    let corpus = &synth.corpus;
    let (train, val, test) = spec.split_counts();
    info!("wrote {} videos to {}", corpus.videos.len(), a.out.display());
    emit(json!({
        "manifest": manifest,
        "videos": corpus.videos.len(),
        "splits": {"train": train, "val": val, "test": test},
        "frames": corpus.videos.iter().map(VideoRecord::frames).sum::<usize>(),
        "attributes": corpus.attribute_count(),
        "classes": corpus.class_count,
        "class_to_attributes": corpus.attribute_map.class_to_attributes,
        "planted_pairs": synth.planted_pairs,
    }))?;
    Ok(Outcome::Done)
}

pub fn build_prior(a: PriorArgs) -> Result<Outcome> {
    emit(json!({"command": "build-prior", "config": {"manifest": a.manifest, "out": a.out, "split": "train"}}))?;
    let corpus = load_corpus(&a.manifest)?;
    let prior = corpus_prior(&corpus)?;
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&prior)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let n = prior.attributes;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| prior.get(i, j)).collect()).collect();
    emit(json!({"attributes": n, "totals": prior.totals, "p": rows}))?;
    Ok(Outcome::Done)
}

fn resolve_train_config(a: &TrainArgs, corpus: &Corpus) -> Result<TrainConfig> {
    let base = match (&a.config, a.profile) {
        (Some(p), _) => read_json(p)?,
        (None, Profile::Desk) => TrainConfig::desk(),
        (None, Profile::Paper) => TrainConfig::paper(),
    };
    let mut cfg = base.fit_to(corpus);
    if let Some(ab) = a.ablation {
        cfg.model.variant = match ab {
            Ablation::Full => Variant::Full,
            Ablation::ExtractorOnly => Variant::ExtractorOnly,
            Ablation::LinearBaseline => Variant::LinearBaseline,
        };
    }
    cfg.model.disable_attention |= a.disable_attention;
    cfg.model.disable_temporal |= a.disable_temporal;
    override_fields!(cfg, a;
        lr => learning_rate, batch_size => batch_size, epochs => max_epochs, seed => seed,
        attribute_loss_weight => attribute_loss_weight,
    );
    if a.max_frames.is_some() {
        cfg.max_frames = a.max_frames;
    }
    if a.clip_grad_norm.is_some() {
        cfg.clip_grad_norm = a.clip_grad_norm;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let corpus = load_corpus(&a.manifest)?;
    match &a.resume {
        Some(path) => {
            let bytes = read_bytes(path)?;
            let ignored = a.config.is_some()
                || a.ablation.is_some()
                || a.disable_attention
                || a.disable_temporal
                || a.lr.is_some()
                || a.batch_size.is_some()
                || a.max_frames.is_some()
                || a.seed.is_some()
                || a.attribute_loss_weight.is_some()
                || a.clip_grad_norm.is_some();
            if ignored {
                warn!("resuming keeps the checkpoint's config; only --epochs is applied");
            }
            match checkpoint_scalar_bytes(&bytes)? {
                4 => resume::<f32>(&bytes, &a, &corpus),
                _ => resume::<f64>(&bytes, &a, &corpus),
            }
        }
        None => {
            let cfg = resolve_train_config(&a, &corpus)?;
            match a.precision {
                Precision::F32 => fit(ModelState::<f32>::new(cfg, &corpus)?, &corpus, &a.out, false),
                Precision::F64 => fit(ModelState::<f64>::new(cfg, &corpus)?, &corpus, &a.out, false),
            }
        }
    }
}

fn resume<S: Scalar>(bytes: &[u8], a: &TrainArgs, corpus: &Corpus) -> Result<Outcome> {
    let mut state = decode_checkpoint::<S>(bytes)?;
    state.check_corpus(corpus)?;
    if let Some(e) = a.epochs {
        state.config.max_epochs = e;
    }
    fit(state, corpus, &a.out, true)
}

fn precision_name<S: Scalar>() -> &'static str {
    if S::BYTES == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn fit<S: Scalar>(mut state: ModelState<S>, corpus: &Corpus, out: &Path, resumed: bool) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = json!({
        "command": "train",
        "precision": precision_name::<S>(),
        "start_epoch": state.epoch,
        "config": state.config,
    });
    emit(resolved.clone())?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    let log_path = out.join("train.ndjson");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;

    let mut best = if resumed { state.scheduler.best } else { None };
    let (mut first, mut last) = (None, None);
    while state.epoch < state.config.max_epochs {
        let entry = state.fit_epoch(corpus)?;
        writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        info!(
            "epoch {:>3}  train {:.5}  monitor {:.5}  lr {:.3e}  {:.1}s",
            entry.epoch,
            entry.train.total,
            entry.monitor.total,
            entry.learning_rate,
            (entry.train.elapsed + entry.monitor.elapsed).as_secs_f64()
        );
        first.get_or_insert(entry.train.total);
        last = Some(entry.train.total);
        if best.is_none_or(|b| entry.monitor.total < b) {
            best = Some(entry.monitor.total);
            save_checkpoint(&state, &out.join("best.aanc"))?;
        }
    }
    save_checkpoint(&state, &out.join("final.aanc"))?;
    emit(json!({
        "epochs": state.epoch,
        "first_train_loss": first,
        "final_train_loss": last,
        "best_monitor_loss": best,
        "learning_rate": state.scheduler.learning_rate,
        "best_checkpoint": out.join("best.aanc"),
        "final_checkpoint": out.join("final.aanc"),
    }))?;
    Ok(Outcome::Done)
}

fn score_with_checkpoint<S: Scalar>(
    bytes: &[u8],
    corpus: &Corpus,
    videos: &[&VideoRecord],
    jobs: usize,
) -> Result<Vec<Vec<f32>>> {
    let state = decode_checkpoint::<S>(bytes)?;
    state.check_corpus(corpus)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let scores = pool.install(|| {
        videos
            .par_iter()
            .map(|v| predict_scores(&state.model, &v.features))
            .collect::<aan_core::Result<Vec<_>>>()
    })?;
    Ok(scores)
}

fn score_files(dir: &Path, corpus: &Corpus, videos: &[&VideoRecord]) -> Result<Vec<Vec<f32>>> {
    videos
        .iter()
        .map(|v| {
            let m = read_score_file(&dir.join(format!("{}.aans", v.id())))?;
            if m.frames != v.frames() || m.classes != corpus.class_count {
                return Err(Error::Shape {
                    op: "score file",
                    lhs: vec![m.frames, m.classes],
                    rhs: vec![v.frames(), corpus.class_count],
                }
                .into());
            }
            Ok(m.scores)
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    let split: Split = a.split.parse()?;
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()).into());
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("--threshold must lie in [0, 1], got {}", a.threshold)).into());
    }
    emit(json!({"command": "eval", "config": {
        "manifest": a.manifest, "checkpoint": a.checkpoint, "scores": a.scores, "split": split,
        "conditional": a.conditional, "tau": a.tau, "threshold": a.threshold, "jobs": a.jobs,
    }}))?;
    let corpus = load_corpus(&a.manifest)?;
    let videos: Vec<&VideoRecord> = corpus.split(split).collect();
    let scores = match (&a.checkpoint, &a.scores) {
        (Some(ckpt), _) => {
            let bytes = read_bytes(ckpt)?;
            match checkpoint_scalar_bytes(&bytes)? {
                4 => score_with_checkpoint::<f32>(&bytes, &corpus, &videos, a.jobs)?,
                _ => score_with_checkpoint::<f64>(&bytes, &corpus, &videos, a.jobs)?,
            }
        }
        (None, Some(dir)) => score_files(dir, &corpus, &videos)?,
        (None, None) => unreachable!("clap requires one score source"),
    };
    let run = EvalRun::new(
        corpus.class_count,
        videos
            .iter()
            .zip(scores)
            .map(|(v, s)| VideoScores {
                video_id: v.id().to_string(),
                scores: s.into_iter().map(f64::from).collect(),
                labels: v.dense.clone(),
                mask: v.features.mask.clone(),
            })
            .collect(),
    )?;
    let map = per_frame_map(&run);
    info!("{:?} split: per-frame mAP {:.4} over {} videos", split, map.map, videos.len());
    let conditional: Vec<_> = if a.conditional {
        a.tau
            .iter()
            .map(|&tau| action_conditional_metrics(&run, tau, a.threshold))
            .collect()
    } else {
        Vec::new()
    };
    for c in &conditional {
        info!("tau {:>3}: P_AC {:.4}  F1_AC {:.4}  mAP_AC {:.4}", c.tau, c.precision, c.f1, c.map);
    }
    if let Some(path) = &a.curves {
        fs::write(path, serde_json::to_string(&class_curves(&run))? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    emit(json!({
        "split": split,
        "videos": videos.len(),
        "map": map.map,
        "per_class": map.per_class,
        "skipped_classes": map.skipped_classes,
        "conditional": conditional,
    }))?;
    Ok(Outcome::Done)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let mut cfg = SuiteConfig::default();
    override_fields!(cfg, a;
        seed => seed, videos => videos, frames => frames, feature_dim => feature_dim,
        hidden_dim => hidden_dim, attributes => attributes, classes => classes, blocks => blocks,
        heads => heads, step => step, tolerance => tolerance,
    );
    cfg.inject_fault = a.inject_fault;
    emit(json!({"command": "gradcheck", "config": cfg}))?;
    let checks = gradient_suite(&cfg)?;
    let mut failed = 0;
    let mut worst = 0f64;
    for c in &checks {
        if !c.report.passed {
            failed += 1;
            warn!("{} failed: max relative error {:.3e}", c.name, c.report.max_rel_err);
        }
        worst = worst.max(c.report.max_rel_err);
        emit(serde_json::to_value(c)?)?;
    }
    emit(json!({"checks": checks.len(), "failed": failed, "max_rel_err": worst}))?;
    Ok(if failed == 0 {
        Outcome::Done
    } else {
        Outcome::CheckFailed
    })
}

fn predict_all<S: Scalar>(bytes: &[u8], a: &PredictArgs) -> Result<usize> {
    let state = decode_checkpoint::<S>(bytes)?;
    let classes = state.config.model.classes;
    let write = |features: &aan_core::data::FeatureSequence, path: &Path| -> Result<()> {
        let scores = predict_scores(&state.model, features)?;
        let matrix = ScoreMatrix {
            frames: features.frames,
            classes,
            scores,
        };
        write_score_file(path, &matrix).with_context(|| format!("writing {}", path.display()))
    };
    match (&a.features, &a.manifest) {
        (Some(f), _) => {
            write(&read_feature_file(f)?, &a.out)?;
            Ok(1)
        }
        (None, Some(m)) => {
            let corpus = load_corpus(m)?;
            state.check_corpus(&corpus)?;
            let split: Option<Split> = a.split.as_deref().map(str::parse).transpose()?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let mut n = 0;
            for v in corpus.videos.iter().filter(|v| split.is_none_or(|s| v.split == s)) {
                write(&v.features, &a.out.join(format!("{}.aans", v.id())))?;
                n += 1;
            }
            Ok(n)
        }
        (None, None) => unreachable!("clap requires one feature source"),
    }
}

pub fn predict(a: PredictArgs) -> Result<Outcome> {
    emit(json!({"command": "predict", "config": {
        "checkpoint": a.checkpoint, "features": a.features, "manifest": a.manifest,
        "split": a.split, "out": a.out,
    }}))?;
    let bytes = read_bytes(&a.checkpoint)?;
    let written = match checkpoint_scalar_bytes(&bytes)? {
        4 => predict_all::<f32>(&bytes, &a)?,
        _ => predict_all::<f64>(&bytes, &a)?,
    };
    emit(json!({"written": written, "out": a.out}))?;
    Ok(Outcome::Done)
}
