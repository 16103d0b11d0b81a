//! Training loop, combined objectives, checkpoints and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{Dataset, Episode, QaSample, QuestionType};
use crate::focus::AttentionVariant;
use crate::glance::{loss_certainty, loss_semantic_diversity, loss_temporal_overlap, MemoryBank};
use crate::model::{GlanceFocus, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::{Forward, Mode};
use crate::seed::derive;
use crate::set_matching::{
    cost_from_predictions, hungarian, matching_cost_matrix, pad_events, supervised_losses, Assignment,
    GroundTruthEvent, Span,
};
use crate::{Error, Result, Scalar};

const SCHEDULE_STREAM: u64 = 1;
const QUESTION_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Question answering plus certainty and diversity regularizers.
    #[default]
    #[serde(rename = "uns")]
    Unsupervised,
    /// Question answering plus matched event classification and span losses.
    #[serde(rename = "sup")]
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Event memories `N`.
    pub memories: usize,
    /// Event classes; `None` reads the count off the vocabulary.
    pub classes: Option<usize>,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lambda_cert: f64,
    pub lambda_cls: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    /// Weight of no-event targets in the supervised classification loss.
    pub eos_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub variant: AttentionVariant,
    /// Questions drawn per episode per epoch; 0 uses all of them.
    pub questions_per_episode: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unsupervised,
            memories: 8,
            classes: None,
            model_dim: 64,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            lambda_cert: 1.0,
            lambda_cls: 1.0,
            lambda_iou: 1.0,
            lambda_l1: 5.0,
            eos_weight: 1.0,
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            grad_clip: Some(1.0),
            variant: AttentionVariant::Cascade,
            questions_per_episode: 1,
            data: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cert", self.lambda_cert),
            ("lambda_cls", self.lambda_cls),
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
            ("eos_weight", self.eos_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::contract(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if self.mode == TrainMode::Unsupervised && self.memories < 2 {
            return Err(Error::contract("unsupervised training needs at least 2 memories"));
        }
        Ok(())
    }

    /// Model shape for this configuration on `data`.
    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig> {
        let feature_dim = data
            .feature_dim()
            .ok_or_else(|| Error::contract("dataset has no episodes"))?;
        let config = ModelConfig {
            feature_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            memories: self.memories,
            classes: self.classes.unwrap_or_else(|| data.vocab.classes()),
            no_event_class: self.mode == TrainMode::Supervised,
            vocab_size: data.vocab.tokens.len(),
            answers: data.vocab.answers.len(),
            variant: self.variant,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Checks that `data` can be fed to a model of shape `config`.
pub fn check_compatible(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let mismatch = |what: &str, want: usize, got: usize| {
        Err(Error::contract(format!("data {what} is {got}, model expects {want}")))
    };
    if data.vocab.tokens.len() != config.vocab_size {
        return mismatch("vocabulary size", config.vocab_size, data.vocab.tokens.len());
    }
    if data.vocab.answers.len() != config.answers {
        return mismatch("answer count", config.answers, data.vocab.answers.len());
    }
    for e in &data.episodes {
        if e.features.cols() != config.feature_dim {
            return mismatch(&format!("feature dim of episode {}", e.id), config.feature_dim, e.features.cols());
        }
    }
    Ok(())
}

/// Loss components of one step, each already averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub qa: f64,
    pub cert: f64,
    /// Semantic diversity (unsupervised) or matched classification (supervised).
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossRecord {
    /// Weighted sum of the components under `config`.
    pub fn recombine(&self, config: &TrainConfig) -> f64 {
        self.qa
            + config.lambda_cert * self.cert
            + config.lambda_cls * self.cls
            + config.lambda_iou * self.iou
            + config.lambda_l1 * self.l1
    }

    fn is_finite(&self) -> bool {
        [self.qa, self.cert, self.cls, self.iou, self.l1, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossRecord, w: f64) {
        self.qa += w * other.qa;
        self.cert += w * other.cert;
        self.cls += w * other.cls;
        self.iou += w * other.iou;
        self.l1 += w * other.l1;
        self.total += w * other.total;
    }

    fn mean(records: &[LossRecord]) -> LossRecord {
        let mut out = LossRecord::default();
        let w = 1.0 / records.len().max(1) as f64;
        records.iter().for_each(|r| out.accumulate(r, w));
        out
    }
}

/// One sample's objective on a tape.
pub struct Objective<'t, F: Scalar> {
    pub total: Var<'t, F>,
    pub record: LossRecord,
    /// Matching used by the supervised losses.
    pub assignment: Option<Assignment>,
}

/// Builds the combined objective for `episode` answering `questions`.
pub fn objective<'t, F: Scalar>(
    model: &GlanceFocus<F>,
    fwd: &Forward<'t, '_, F>,
    config: &TrainConfig,
    episode: &Episode,
    questions: &[&QaSample],
) -> Result<Objective<'t, F>> {
    let tape = fwd.tape();
    let glimpse = model.glimpse(fwd, &episode.features)?;
    let zero = || tape.constant(Tensor::scalar(F::zero()));

    let mut qa = zero();
    for q in questions {
        let out = model.answer(fwd, &glimpse, &q.question)?;
        qa = qa.add(out.logits.cross_entropy(&[q.answer])?)?;
    }
    if !questions.is_empty() {
        qa = qa.scale(F::lit(1.0 / questions.len() as f64));
    }

    let bank = &glimpse.bank;
    let (cert, cls, iou, l1, assignment) = match config.mode {
        TrainMode::Unsupervised => (
            loss_certainty(bank)?,
            loss_semantic_diversity(bank)?,
            loss_temporal_overlap(bank)?,
            zero(),
            None,
        ),
        TrainMode::Supervised => {
            let gt = padded_ground_truth(episode, bank.len())?;
            let cost = matching_cost_matrix(&gt, bank, config.lambda_cls, config.lambda_l1)?;
            let assignment = hungarian(&cost)?;
            let (cls, l1) = supervised_losses(&gt, bank, &assignment, config.eos_weight)?;
            (zero(), cls, zero(), l1, Some(assignment))
        }
    };

    let total = qa
        .add(cert.scale(F::lit(config.lambda_cert)))?
        .add(cls.scale(F::lit(config.lambda_cls)))?
        .add(iou.scale(F::lit(config.lambda_iou)))?
        .add(l1.scale(F::lit(config.lambda_l1)))?;
    let record = LossRecord {
        qa: qa.item().as_f64(),
        cert: cert.item().as_f64(),
        cls: cls.item().as_f64(),
        iou: iou.item().as_f64(),
        l1: l1.item().as_f64(),
        total: total.item().as_f64(),
    };
    Ok(Objective {
        total,
        record,
        assignment,
    })
}

fn padded_ground_truth(episode: &Episode, n: usize) -> Result<Vec<GroundTruthEvent>> {
    let gt = episode
        .ground_truth()
        .ok_or_else(|| Error::contract(format!("episode {} has no event labels", episode.id)))?;
    pad_events(&gt, n)
}

/// Position of an interrupted run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Index into the epoch's shuffled episode order.
    pub cursor: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

pub struct Trainer<F: Scalar> {
    pub config: TrainConfig,
    pub model: GlanceFocus<F>,
    pub adam: AdamState<F>,
    pub progress: Progress,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if config.mode == TrainMode::Supervised && !data.is_labeled() {
            return Err(Error::contract("supervised training requires event labels"));
        }
        let model_config = config.model_config(data)?;
        check_compatible(&model_config, data)?;
        let model = GlanceFocus::new(model_config, config.seed)?;
        let adam = AdamState::new(model.store.iter().map(|(_, t)| t));
        Ok(Self {
            config,
            model,
            adam,
            progress: Progress::default(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    /// Shuffled episode indices for `epoch`.
    pub fn epoch_order(&self, epoch: usize, episodes: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..episodes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.config.seed, &[SCHEDULE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Questions trained on for `episode` during `epoch`.
    pub fn epoch_questions<'e>(&self, epoch: usize, episode: &'e Episode) -> Vec<&'e QaSample> {
        let k = self.config.questions_per_episode;
        if k == 0 || k >= episode.qas.len() {
            return episode.qas.iter().collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(
            self.config.seed,
            &[QUESTION_STREAM, epoch as u64, episode.id],
        ));
        let mut picked = rand::seq::index::sample(&mut rng, episode.qas.len(), k).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| &episode.qas[i]).collect()
    }

    /// One optimizer step on `batch`, with gradients averaged over samples.
    pub fn step(&mut self, batch: &[(&Episode, Vec<&QaSample>)]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let w = 1.0 / batch.len() as f64;
        let mut record = LossRecord::default();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.model.store.len()];
        for (i, (episode, questions)) in batch.iter().enumerate() {
            let tape = Tape::new();
            let mode = Mode::Train {
                dropout: self.config.dropout,
                seed: derive(self.config.seed, &[DROPOUT_STREAM, self.progress.step, i as u64]),
            };
            let fwd = Forward::new(&tape, &self.model.store, mode);
            let obj = objective(&self.model, &fwd, &self.config, episode, questions)?;
            if !obj.record.is_finite() {
                return Err(Error::NonFinite(format!(
                    "episode {} at step {}: {:?}",
                    episode.id, self.progress.step, obj.record
                )));
            }
            record.accumulate(&obj.record, w);
            let mut g = tape.backward(obj.total.scale(F::lit(w)))?;
            for (acc, g) in grads.iter_mut().zip(fwd.param_grads(&mut g)) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    (_, None) => {}
                }
            }
        }
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        adam_step(&mut self.model.store.tensors_mut(), &grads, &mut self.adam, self.config.lr)?;
        self.progress.step += 1;
        Ok(record)
    }

    /// Runs up to `max_steps` scheduled steps, crossing epoch boundaries.
    pub fn train_steps(&mut self, data: &Dataset, max_steps: usize) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while out.len() < max_steps && !self.is_finished() {
            out.push(self.scheduled_step(data)?);
        }
        Ok(out)
    }

    /// Finishes the current epoch; returns the mean of its step records.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<LossRecord> {
        if self.is_finished() {
            return Err(Error::contract("training already finished"));
        }
        let epoch = self.progress.epoch;
        let mut records = Vec::new();
        while self.progress.epoch == epoch {
            records.push(self.scheduled_step(data)?);
        }
        Ok(LossRecord::mean(&records))
    }

    fn scheduled_step(&mut self, data: &Dataset) -> Result<LossRecord> {
        let n = data.episodes.len();
        if n == 0 {
            return Err(Error::contract("training set is empty"));
        }
        let Progress { epoch, cursor, .. } = self.progress;
        if cursor >= n {
            return Err(Error::contract(format!("cursor {cursor} beyond {n} training episodes")));
        }
        let order = self.epoch_order(epoch, n);
        let end = (cursor + self.config.batch_size).min(n);
        let batch: Vec<(&Episode, Vec<&QaSample>)> = order[cursor..end]
            .iter()
            .map(|&i| {
                let e = &data.episodes[i];
                (e, self.epoch_questions(epoch, e))
            })
            .collect();
        let record = self.step(&batch)?;
        self.progress.cursor = end;
        if end == n {
            self.progress.epoch += 1;
            self.progress.cursor = 0;
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (prefix, list) in [
            ("param.", self.model.store.iter().map(|(_, t)| t).collect::<Vec<_>>()),
            ("adam.m.", self.adam.m.iter().collect()),
            ("adam.v.", self.adam.v.iter().collect()),
        ] {
            for ((name, _), t) in self.model.store.iter().zip(list) {
                tensors.push((format!("{prefix}{name}"), t.cast::<f64>()));
            }
        }
        Checkpoint {
            train: self.config.clone(),
            model: self.model.config.clone(),
            progress: self.progress,
            adam_t: self.adam.t,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = GlanceFocus::new(ckpt.model.clone(), ckpt.train.seed)?;
        let adam = AdamState::new(model.store.iter().map(|(_, t)| t));
        let mut trainer = Self {
            config: ckpt.train.clone(),
            model,
            adam,
            progress: Progress::default(),
        };
        trainer.restore(ckpt)?;
        Ok(trainer)
    }

    /// Overwrites parameters, optimizer state and progress from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let table: BTreeMap<&str, &Tensor<f64>> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = 3 * self.model.store.len();
        if table.len() != ckpt.tensors.len() {
            return Err(Error::contract("checkpoint has duplicate tensor names"));
        }
        if table.len() != expected {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                table.len()
            )));
        }
        let names: Vec<String> = self.model.store.iter().map(|(n, _)| n.to_string()).collect();
        let fetch = |key: String, like: &Tensor<F>| -> Result<Tensor<F>> {
            let t = table
                .get(key.as_str())
                .ok_or_else(|| Error::contract(format!("checkpoint is missing tensor {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::ShapeMismatch {
                    name: key,
                    expected: like.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.cast())
        };
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in names.iter().zip(self.model.store.iter().map(|(_, t)| t)) {
            params.push(fetch(format!("param.{name}"), p)?);
            m.push(fetch(format!("adam.m.{name}"), p)?);
            v.push(fetch(format!("adam.v.{name}"), p)?);
        }
        for (dst, src) in self.model.store.tensors_mut().into_iter().zip(params) {
            *dst = src;
        }
        self.adam = AdamState { m, v, t: ckpt.adam_t };
        self.progress = ckpt.progress;
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GFCK1";

/// Everything needed to resume a run or rebuild its model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub progress: Progress,
    pub adam_t: u64,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    train: TrainConfig,
    model: ModelConfig,
    progress: Progress,
    adam_t: u64,
    tensors: usize,
}

impl Checkpoint {
    /// Layout: magic, `u64` header length, JSON header, then per tensor a
    /// `u32` name length, name, `u32` rank, `u64` extents and `f64` values,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            train: self.train.clone(),
            model: self.model.clone(),
            progress: self.progress,
            adam_t: self.adam_t,
            tensors: self.tensors.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {:?}, expected GFCK1", String::from_utf8_lossy(magic))));
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.error(at, format!("bad header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors);
        for _ in 0..header.tensors {
            let at = r.pos;
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.error(at, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(at, format!("tensor {name} extents {shape:?} exceed the file")))?;
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(at, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.error(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            train: header.train,
            model: header.model,
            progress: header.progress,
            adam_t: header.adam_t,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(self.pos, format!("truncated: wanted {n} bytes, {} left", self.remaining())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A memory's predicted class distribution (including no-event) and span.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedEvents {
    pub probs: Tensor<f64>,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// One answer id per question of the episode, in order.
    pub answers: Vec<usize>,
    /// Memory predictions when the model has a no-event class.
    pub events: Option<PredictedEvents>,
}

pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Prediction>;
}

/// Deterministic (dropout-free) inference with a trained model.
pub struct ModelPredictor<'a, F: Scalar> {
    pub model: &'a GlanceFocus<F>,
}

impl<F: Scalar> ModelPredictor<'_, F> {
    pub fn bank_predictions(bank: &MemoryBank<'_, F>) -> PredictedEvents {
        let (probs, spans) = bank.predictions();
        PredictedEvents {
            probs: probs.cast(),
            spans,
        }
    }
}

impl<F: Scalar> Predictor for ModelPredictor<'_, F> {
    fn predict(&self, episode: &Episode) -> Result<Prediction> {
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &self.model.store, Mode::Eval);
        let glimpse = self.model.glimpse(&fwd, &episode.features)?;
        let answers = episode
            .qas
            .iter()
            .map(|q| Ok(self.model.answer(&fwd, &glimpse, &q.question)?.answer()))
            .collect::<Result<_>>()?;
        let events = self
            .model
            .config
            .no_event_class
            .then(|| Self::bank_predictions(&glimpse.bank));
        Ok(Prediction { answers, events })
    }
}

/// Answers each question type with its most frequent training answer.
#[derive(Clone, Debug, PartialEq)]
pub struct MajorityBaseline {
    pub per_type: BTreeMap<QuestionType, usize>,
    pub fallback: usize,
}

impl MajorityBaseline {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let mut counts: BTreeMap<QuestionType, BTreeMap<usize, usize>> = BTreeMap::new();
        let mut all: BTreeMap<usize, usize> = BTreeMap::new();
        for q in data.episodes.iter().flat_map(|e| &e.qas) {
            *counts.entry(q.kind).or_default().entry(q.answer).or_default() += 1;
            *all.entry(q.answer).or_default() += 1;
        }
        // Ties go to the lowest answer id.
        let top = |m: &BTreeMap<usize, usize>| {
            m.iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&a, _)| a)
        };
        let fallback = top(&all).ok_or_else(|| Error::contract("no questions to fit a baseline on"))?;
        let per_type = counts
            .iter()
            .map(|(&k, m)| (k, top(m).expect("non-empty counts")))
            .collect();
        Ok(Self { per_type, fallback })
    }
}

impl Predictor for MajorityBaseline {
    fn predict(&self, episode: &Episode) -> Result<Prediction> {
        Ok(Prediction {
            answers: episode
                .qas
                .iter()
                .map(|q| self.per_type.get(&q.kind).copied().unwrap_or(self.fallback))
                .collect(),
            events: None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: Tally,
    pub per_type: BTreeMap<QuestionType, Tally>,
    /// Fraction of ground-truth events whose matched memory predicts their class.
    pub event_accuracy: Option<f64>,
    /// Mean `|Δcenter| + |Δwidth|` over matched ground-truth events.
    pub temporal_l1: Option<f64>,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    /// Pooled accuracy over the order-dependent question types.
    pub fn ordering_accuracy(&self) -> f64 {
        let mut t = Tally::default();
        for (k, v) in &self.per_type {
            if k.is_ordering() {
                t.correct += v.correct;
                t.total += v.total;
            }
        }
        t.accuracy()
    }

    /// `metric<TAB>value` lines; per-type lines only when `per_type` is set.
    pub fn lines(&self, per_type: bool) -> Vec<String> {
        let mut out = vec![
            format!("accuracy\t{}", self.accuracy()),
            format!("questions\t{}", self.overall.total),
        ];
        if per_type {
            for (k, v) in &self.per_type {
                out.push(format!("accuracy/{}\t{}", k.tag(), v.accuracy()));
                out.push(format!("questions/{}\t{}", k.tag(), v.total));
            }
        }
        if let Some(a) = self.event_accuracy {
            out.push(format!("event_accuracy\t{a}"));
        }
        if let Some(l1) = self.temporal_l1 {
            out.push(format!("temporal_l1\t{l1}"));
        }
        out
    }
}

/// Matching weights used to pair predicted memories with ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
}

impl From<&TrainConfig> for MatchWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda_cls: c.lambda_cls,
            lambda_l1: c.lambda_l1,
        }
    }
}

/// Scores `predictor` on every question of `data`. Event metrics are
/// reported when the predictor emits memory predictions and `data` is labeled.
pub fn evaluate(data: &Dataset, predictor: &dyn Predictor, weights: MatchWeights) -> Result<Metrics> {
    if data.qa_count() == 0 {
        return Err(Error::contract("evaluation set has no questions"));
    }
    let mut m = Metrics::default();
    let mut events = Tally::default();
    let mut l1_sum = 0.0;
    let mut any_events = false;
    for e in &data.episodes {
        let p = predictor.predict(e)?;
        if p.answers.len() != e.qas.len() {
            return Err(Error::contract(format!(
                "predictor gave {} answers for {} questions of episode {}",
                p.answers.len(),
                e.qas.len(),
                e.id
            )));
        }
        for (q, &a) in e.qas.iter().zip(&p.answers) {
            let hit = usize::from(a == q.answer);
            m.overall.correct += hit;
            m.overall.total += 1;
            let t = m.per_type.entry(q.kind).or_default();
            t.correct += hit;
            t.total += 1;
        }
        if let (Some(pred), Some(_)) = (&p.events, &e.events) {
            any_events = true;
            let gt = padded_ground_truth(e, pred.spans.len())?;
            let cost = cost_from_predictions(&gt, &pred.probs, &pred.spans, weights.lambda_cls, weights.lambda_l1)?;
            let assignment = hungarian(&cost)?;
            for (g, &j) in gt.iter().zip(&assignment.perm) {
                let Some(class) = g.class else { continue };
                let predicted = crate::focus::argmax(pred.probs.row(j));
                events.correct += usize::from(predicted == class);
                events.total += 1;
                let s = pred.spans[j];
                l1_sum += (s.center - g.span.center).abs() + (s.width - g.span.width).abs();
            }
        }
    }
    if any_events {
        m.event_accuracy = Some(events.accuracy());
        m.temporal_l1 = Some(if events.total == 0 { 0.0 } else { l1_sum / events.total as f64 });
    }
    Ok(m)
}

/// Evaluates a model with the matching weights of `config`.
pub fn evaluate_model<F: Scalar>(data: &Dataset, model: &GlanceFocus<F>, config: &TrainConfig) -> Result<Metrics> {
    evaluate(data, &ModelPredictor { model }, config.into())
}
