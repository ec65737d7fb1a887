use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attributes::batch_anchors;
use crate::data::{make_batches, BatchPlan, Corpus, FeatureSequence, Split};
use crate::error::{Error, Result};
use crate::graph::{corpus_prior, total_loss, Model, TensorKind};
use crate::metrics::{EvalRun, VideoScores};
use crate::numerics::{sigmoid_scalar, AdamConfig, AdamState, Mode, Tape, Tensor};
use crate::params::Bindings;
use crate::rng;
use crate::scalar::Scalar;
use crate::train::config::TrainConfig;
use crate::train::scheduler::PlateauScheduler;

/// Everything needed to continue training: parameters, optimizer moments,
/// schedule and the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: TrainConfig,
    pub model: Model<S>,
    pub optimizer: AdamState<S>,
    pub scheduler: PlateauScheduler,
    pub epoch: usize,
}

/// Mean losses of one pass over a split, weighted by valid frames.
#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub split: Split,
    pub mode: Mode,
    pub batches: usize,
    pub frames: usize,
    pub total: f64,
    pub action: f64,
    pub attributes: Option<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl PartialEq for EpochReport {
    fn eq(&self, other: &Self) -> bool {
        (self.split, self.mode, self.batches, self.frames) == (other.split, other.mode, other.batches, other.frames)
            && self.total.to_bits() == other.total.to_bits()
            && self.action.to_bits() == other.action.to_bits()
            && self.attributes.map(f64::to_bits) == other.attributes.map(f64::to_bits)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: EpochReport,
    /// Pass that drives the schedule: validation when that split is
    /// non-empty, otherwise the train split in eval mode.
    pub monitor: EpochReport,
    pub next_learning_rate: f64,
}

impl<S: Scalar> ModelState<S> {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let prior = corpus_prior(corpus)?;
        let model = Model::init(config.model.clone(), &prior, config.seed)?;
        let state = Self {
            optimizer: AdamState::new(AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            }),
            scheduler: PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience),
            model,
            epoch: 0,
            config,
        };
        state.check_corpus(corpus)?;
        Ok(state)
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let m = &self.config.model;
        let pairs = [
            ("feature dimension", m.feature_dim, corpus.feature_dim),
            ("attribute count", m.attributes, corpus.attribute_count()),
            ("class count", m.classes, corpus.class_count),
        ];
        for (what, model, data) in pairs {
            if model != data {
                return Err(Error::Shape {
                    op: what,
                    lhs: vec![model],
                    rhs: vec![data],
                });
            }
        }
        Ok(())
    }

    /// FNV-1a over every stored tensor's bytes; `kind` restricts the set.
    pub fn fingerprint(&self, kind: Option<TensorKind>) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.model.visit(|name, k, t| {
            if kind.is_none_or(|want| want == k) {
                h = rng::hash_str(name) ^ h.rotate_left(7);
                for v in t.data() {
                    for b in v.as_f64().to_le_bytes() {
                        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        });
        h
    }

    /// One optimizer step per batch over the train split.
    pub fn train_epoch(&mut self, corpus: &Corpus) -> Result<EpochReport> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let indices = corpus.split_indices(Split::Train);
        let plan = BatchPlan {
            mode: Mode::Train,
            batch_size: cfg.batch_size,
            max_frames: cfg.max_frames,
            seed: cfg.seed,
            epoch: self.epoch as u64,
        };
        self.optimizer.set_learning_rate(self.scheduler.learning_rate);
        let mut acc = Accumulator::default();
        for (bi, batch) in make_batches::<S>(corpus, &indices, &plan)?.iter().enumerate() {
            let mut tape = Tape::new();
            let mut bindings = Bindings::trainable();
            let out = self
                .model
                .forward(&mut tape, &mut bindings, &batch.features, &batch.mask, batch.videos(), Mode::Train)?;
            let anchors = batch_anchors::<S>(
                &corpus.anchors,
                &batch.video_ids,
                Mode::Train,
                cfg.seed,
                plan.epoch,
                cfg.model.unit_anchors,
            );
            let parts = total_loss(
                &mut tape,
                out.logits,
                &batch.targets,
                out.attributes,
                &anchors,
                &batch.mask,
                S::of(cfg.attribute_loss_weight),
            )?;
            let total = tape.value(parts.total).item().as_f64();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: bi,
                    videos: batch.video_ids.clone(),
                });
            }
            acc.add(
                batch.valid_frames(),
                total,
                tape.value(parts.action).item().as_f64(),
                parts.attributes.map(|a| tape.value(a).item().as_f64()),
            );
            let mut grads = tape.backward(parts.total)?;
            let mut named = bindings.collect(&mut grads);
            if let Some(max_norm) = cfg.clip_grad_norm {
                clip_by_norm(&mut named, max_norm);
            }
            let mut params: HashMap<String, &mut Tensor<S>> = self.model.parameters_mut().into_iter().collect();
            let updates: Vec<_> = named
                .iter()
                .filter_map(|(n, g)| params.remove(n).map(|p| (n.as_str(), p, g)))
                .collect();
            self.optimizer.step(updates)?;
            if let Some(stats) = &out.stats {
                self.model.extractor.update_running(stats);
            }
        }
        Ok(acc.report(Split::Train, Mode::Train, started.elapsed()))
    }

    /// Losses over `split` with running statistics; parameters untouched.
    pub fn eval_epoch(&self, corpus: &Corpus, split: Split) -> Result<EpochReport> {
        let started = Instant::now();
        let cfg = &self.config;
        let indices = corpus.split_indices(split);
        if indices.is_empty() {
            return Err(Error::Corpus(format!("{split:?} split is empty")));
        }
        let plan = BatchPlan {
            mode: Mode::Eval,
            batch_size: cfg.batch_size,
            max_frames: None,
            seed: cfg.seed,
            epoch: self.epoch as u64,
        };
        let mut acc = Accumulator::default();
        for batch in make_batches::<S>(corpus, &indices, &plan)? {
            let mut tape = Tape::new();
            let out = self.model.forward(
                &mut tape,
                &mut Bindings::frozen(),
                &batch.features,
                &batch.mask,
                batch.videos(),
                Mode::Eval,
            )?;
            let anchors = batch_anchors::<S>(
                &corpus.anchors,
                &batch.video_ids,
                Mode::Eval,
                cfg.seed,
                plan.epoch,
                cfg.model.unit_anchors,
            );
            let parts = total_loss(
                &mut tape,
                out.logits,
                &batch.targets,
                out.attributes,
                &anchors,
                &batch.mask,
                S::of(cfg.attribute_loss_weight),
            )?;
            acc.add(
                batch.valid_frames(),
                tape.value(parts.total).item().as_f64(),
                tape.value(parts.action).item().as_f64(),
                parts.attributes.map(|a| tape.value(a).item().as_f64()),
            );
        }
        Ok(acc.report(split, Mode::Eval, started.elapsed()))
    }

    pub fn run_epoch(&mut self, corpus: &Corpus, split: Split, mode: Mode) -> Result<EpochReport> {
        match (mode, split) {
            (Mode::Train, Split::Train) => self.train_epoch(corpus),
            (Mode::Train, other) => Err(Error::Config(format!("cannot train on the {other:?} split"))),
            (Mode::Eval, s) => self.eval_epoch(corpus, s),
        }
    }

    /// Train epoch, monitoring pass, schedule update.
    pub fn fit_epoch(&mut self, corpus: &Corpus) -> Result<EpochLog> {
        let learning_rate = self.scheduler.learning_rate;
        let train = self.train_epoch(corpus)?;
        let monitor_split = if corpus.split(Split::Val).next().is_some() {
            Split::Val
        } else {
            Split::Train
        };
        let monitor = self.eval_epoch(corpus, monitor_split)?;
        let next_learning_rate = self.scheduler.step(monitor.total);
        let log = EpochLog {
            epoch: self.epoch,
            learning_rate,
            train,
            monitor,
            next_learning_rate,
        };
        self.epoch += 1;
        Ok(log)
    }
}

#[derive(Default)]
struct Accumulator {
    batches: usize,
    frames: usize,
    total: f64,
    action: f64,
    attributes: Option<f64>,
}

impl Accumulator {
    fn add(&mut self, frames: usize, total: f64, action: f64, attributes: Option<f64>) {
        let w = frames as f64;
        self.batches += 1;
        self.frames += frames;
        self.total += w * total;
        self.action += w * action;
        if let Some(a) = attributes {
            *self.attributes.get_or_insert(0.0) += w * a;
        }
    }

    fn report(self, split: Split, mode: Mode, elapsed: Duration) -> EpochReport {
        let n = self.frames.max(1) as f64;
        EpochReport {
            split,
            mode,
            batches: self.batches,
            frames: self.frames,
            total: self.total / n,
            action: self.action / n,
            attributes: self.attributes.map(|a| a / n),
            elapsed,
        }
    }
}

fn clip_by_norm<S: Scalar>(grads: &mut [(String, Tensor<S>)], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::of(max_norm / norm);
        for (_, g) in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Per-frame sigmoid scores `[T, C]` of one video, rounded to 32-bit so
/// they match what a score file stores.
pub fn predict_scores<S: Scalar>(model: &Model<S>, video: &FeatureSequence) -> Result<Vec<f32>> {
    if video.dim != model.config.feature_dim {
        return Err(Error::Shape {
            op: "predict",
            lhs: vec![video.frames, video.dim],
            rhs: vec![model.config.feature_dim],
        });
    }
    let features = Tensor::new(
        [video.frames, video.dim],
        video.features.iter().map(|&v| S::of(v as f64)).collect(),
    )?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &mut Bindings::frozen(), &features, &video.mask, 1, Mode::Eval)?;
    Ok(tape
        .value(out.logits)
        .data()
        .iter()
        .map(|&z| sigmoid_scalar(z).as_f64() as f32)
        .collect())
}

/// Scores for every video of `split`, paired with their labels.
pub fn evaluate<S: Scalar>(model: &Model<S>, corpus: &Corpus, split: Split) -> Result<EvalRun> {
    let videos = corpus
        .split(split)
        .map(|v| {
            Ok(VideoScores {
                video_id: v.id().to_string(),
                scores: predict_scores(model, &v.features)?.into_iter().map(f64::from).collect(),
                labels: v.dense.clone(),
                mask: v.features.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalRun::new(corpus.class_count, videos)
}
