//! Synthetic multi-event episodes: planted events over prototype features,
//! templated questions with oracle answers, and their on-disk formats.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::seed::splitmix64;
use crate::set_matching::{GroundTruthEvent, Span};
use crate::{Error, Result};

const MAX_ATTEMPTS: usize = 1000;
/// Number of equal time bins addressed by what-at questions.
pub const TIME_BINS: usize = 4;
const FEATURE_MAGIC: &[u8; 4] = b"GFV1";
const FEATURE_HEADER: usize = 12;

/// Seed of episode `id` under master seed `seed`.
pub fn episode_seed(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id))
}

/// Deterministic 10% held-out split keyed on the episode id.
pub fn is_heldout(id: u64) -> bool {
    splitmix64(id).is_multiple_of(10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub noise: f64,
    pub seed: u64,
    pub width_min: f64,
    pub width_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 40,
            dim: 32,
            classes: 5,
            events_min: 2,
            events_max: 4,
            noise: 0.05,
            seed: 0,
            width_min: 0.1,
            width_max: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if self.frames == 0 || self.dim == 0 || self.classes == 0 {
            return bad("frames, dim and classes must be positive".into());
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return bad(format!(
                "event range [{}, {}] must satisfy 1 <= min <= max",
                self.events_min, self.events_max
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a finite value >= 0", self.noise));
        }
        if !(0.0 < self.width_min && self.width_min <= self.width_max && self.width_max <= 1.0) {
            return bad(format!(
                "width range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.width_min, self.width_max
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    pub span: Span,
}

impl Event {
    pub fn ground_truth(&self) -> GroundTruthEvent {
        GroundTruthEvent::event(self.class, self.span)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    WhatAt,
    WhatAfter,
    WhatBefore,
    FirstEvent,
    LastEvent,
    CountEvents,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::WhatAt,
        QuestionType::WhatAfter,
        QuestionType::WhatBefore,
        QuestionType::FirstEvent,
        QuestionType::LastEvent,
        QuestionType::CountEvents,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            QuestionType::WhatAt => "what-at",
            QuestionType::WhatAfter => "what-after",
            QuestionType::WhatBefore => "what-before",
            QuestionType::FirstEvent => "first-event",
            QuestionType::LastEvent => "last-event",
            QuestionType::CountEvents => "count-events",
        }
    }

    /// Whether the answer depends on the temporal order of two events.
    pub fn is_ordering(self) -> bool {
        matches!(self, QuestionType::WhatAfter | QuestionType::WhatBefore)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    #[serde(rename = "q")]
    pub question: Vec<usize>,
    #[serde(rename = "a")]
    pub answer: usize,
    #[serde(rename = "type")]
    pub kind: QuestionType,
}

/// Question tokens and answer strings, each indexed by position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
}

const WORDS: [&str; 8] = ["what", "at", "after", "before", "first", "last", "how", "many"];

impl Vocabulary {
    pub fn new(classes: usize, max_events: usize) -> Self {
        let class_names = (0..classes).map(class_name);
        let tokens = WORDS
            .iter()
            .map(|w| w.to_string())
            .chain((0..TIME_BINS).map(|b| format!("t{b}")))
            .chain(class_names.clone())
            .collect();
        let answers = class_names.chain((1..=max_events).map(|k| k.to_string())).collect();
        Self { tokens, answers }
    }

    pub fn token(&self, s: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == s)
    }

    /// Number of event classes, read off the leading class answers.
    pub fn classes(&self) -> usize {
        self.answers
            .iter()
            .enumerate()
            .take_while(|(i, a)| **a == class_name(*i))
            .count()
    }

    pub fn answer(&self, s: &str) -> Option<usize> {
        self.answers.iter().position(|t| t == s)
    }

    fn validate(&self) -> Result<()> {
        for (what, list) in [("token", &self.tokens), ("answer", &self.answers)] {
            let mut seen = HashMap::new();
            for (i, s) in list.iter().enumerate() {
                if let Some(j) = seen.insert(s.as_str(), i) {
                    return Err(Error::contract(format!("duplicate {what} `{s}` at ids {j} and {i}")));
                }
            }
        }
        Ok(())
    }
}

fn class_name(c: usize) -> String {
    format!("c{c}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    /// `T×D` frame features.
    pub features: Tensor<f32>,
    /// Planted events sorted by center; `None` for unlabeled data.
    pub events: Option<Vec<Event>>,
    pub qas: Vec<QaSample>,
}

impl Episode {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn ground_truth(&self) -> Option<Vec<GroundTruthEvent>> {
        self.events
            .as_ref()
            .map(|ev| ev.iter().map(Event::ground_truth).collect())
    }
}

/// Index of the event whose span contains the center of frame `t`.
pub fn frame_owner(events: &[Event], t: usize, frames: usize) -> Option<usize> {
    let x = (t as f64 + 0.5) / frames as f64;
    events.iter().position(|e| {
        let (s, end) = e.span.interval();
        s <= x && x < end
    })
}

/// Episode factory holding the per-class feature prototypes.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    /// `(C+1)×D`; row `C` is the background.
    pub prototypes: Tensor<f64>,
    pub vocab: Vocabulary,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5052_4f54_4f54_5950));
        let n = (config.classes + 1) * config.dim;
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let prototypes = Tensor::new(vec![config.classes + 1, config.dim], data)?;
        let vocab = Vocabulary::new(config.classes, config.events_max);
        Ok(Self {
            config,
            prototypes,
            vocab,
        })
    }

    pub fn episode(&self, id: u64) -> Result<Episode> {
        self.generate_episode(id, episode_seed(self.config.seed, id))
    }

    pub fn generate_episode(&self, id: u64, seed: u64) -> Result<Episode> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(cfg.events_min..=cfg.events_max);
        let events = self.sample_events(&mut rng, k)?;
        let (t, d) = (cfg.frames, cfg.dim);
        let mut data = Vec::with_capacity(t * d);
        for frame in 0..t {
            let proto = frame_owner(&events, frame, t).map_or(cfg.classes, |e| events[e].class);
            for &p in self.prototypes.row(proto) {
                let noise: f64 = if cfg.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                data.push((p + cfg.noise * noise) as f32);
            }
        }
        let qas = generate_qa(&events, &self.vocab);
        Ok(Episode {
            id,
            features: Tensor::new(vec![t, d], data)?,
            events: Some(events),
            qas,
        })
    }

    fn sample_events(&self, rng: &mut ChaCha8Rng, k: usize) -> Result<Vec<Event>> {
        let cfg = &self.config;
        let gap = 1.0 / cfg.frames as f64;
        'attempt: for _ in 0..MAX_ATTEMPTS {
            let mut events: Vec<Event> = (0..k)
                .map(|_| {
                    let width = rng.random_range(cfg.width_min..=cfg.width_max);
                    let center = rng.random_range(width / 2.0..=1.0 - width / 2.0);
                    Event {
                        class: rng.random_range(0..cfg.classes),
                        span: Span { center, width },
                    }
                })
                .collect();
            events.sort_by(|a, b| a.span.center.total_cmp(&b.span.center));
            for pair in events.windows(2) {
                if pair[1].span.interval().0 - pair[0].span.interval().1 < gap {
                    continue 'attempt;
                }
            }
            for e in 0..events.len() {
                if !(0..cfg.frames).any(|t| frame_owner(&events, t, cfg.frames) == Some(e)) {
                    continue 'attempt;
                }
            }
            return Ok(events);
        }
        Err(Error::Generation(format!(
            "could not place {k} disjoint events of width [{}, {}] over {} frames in {MAX_ATTEMPTS} attempts",
            cfg.width_min, cfg.width_max, cfg.frames
        )))
    }
}

/// Every applicable template instantiated against the (center-sorted)
/// event list; templates with undefined or ambiguous answers are skipped.
pub fn generate_qa(events: &[Event], vocab: &Vocabulary) -> Vec<QaSample> {
    let tok = |s: &str| vocab.token(s).expect("template word in vocabulary");
    let class_answer = |c: usize| vocab.answer(&class_name(c)).expect("class in answers");
    let mut out = Vec::new();
    if events.is_empty() {
        return out;
    }
    for b in 0..TIME_BINS {
        let inside: Vec<&Event> = events
            .iter()
            .filter(|e| time_bin(e.span.center) == b)
            .collect();
        if let [e] = inside[..] {
            out.push(QaSample {
                question: vec![tok("what"), tok("at"), tok(&format!("t{b}"))],
                answer: class_answer(e.class),
                kind: QuestionType::WhatAt,
            });
        }
    }
    let mut classes: Vec<usize> = events.iter().map(|e| e.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for (kind, word, step) in [
        (QuestionType::WhatAfter, "after", 1isize),
        (QuestionType::WhatBefore, "before", -1),
    ] {
        for &c in &classes {
            let at: Vec<usize> = (0..events.len()).filter(|&i| events[i].class == c).collect();
            let [i] = at[..] else { continue };
            let j = i as isize + step;
            if j < 0 || j as usize >= events.len() {
                continue;
            }
            out.push(QaSample {
                question: vec![tok("what"), tok(word), tok(&class_name(c))],
                answer: class_answer(events[j as usize].class),
                kind,
            });
        }
    }
    out.push(QaSample {
        question: vec![tok("what"), tok("first")],
        answer: class_answer(events[0].class),
        kind: QuestionType::FirstEvent,
    });
    out.push(QaSample {
        question: vec![tok("what"), tok("last")],
        answer: class_answer(events[events.len() - 1].class),
        kind: QuestionType::LastEvent,
    });
    if let Some(a) = vocab.answer(&events.len().to_string()) {
        out.push(QaSample {
            question: vec![tok("how"), tok("many")],
            answer: a,
            kind: QuestionType::CountEvents,
        });
    }
    out
}

/// Time bin of a normalized position.
pub fn time_bin(x: f64) -> usize {
    ((x * TIME_BINS as f64) as usize).min(TIME_BINS - 1)
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let (t, d) = (features.rows(), features.cols());
    let mut bytes = Vec::with_capacity(FEATURE_HEADER + 4 * features.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    for extent in [t, d] {
        let e = u32::try_from(extent).map_err(|_| Error::contract(format!("extent {extent} exceeds u32")))?;
        bytes.extend_from_slice(&e.to_le_bytes());
    }
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let err = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(err(0, "bad magic, expected GFV1".into()));
    }
    if bytes.len() < FEATURE_HEADER {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    let extent = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (t, d) = (extent(4), extent(8));
    if t == 0 || d == 0 {
        return Err(err(4, format!("zero extent {t}x{d}")));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| err(4, format!("extent {t}x{d} overflows")))?;
    let available = bytes.len() - FEATURE_HEADER;
    if available < payload {
        return Err(err(bytes.len(), format!("truncated payload: {available} of {payload} bytes")));
    }
    if available > payload {
        return Err(err(FEATURE_HEADER + payload, "trailing bytes after payload".into()));
    }
    let data = bytes[FEATURE_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(vec![t, d], data)?)
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    c: usize,
    center: f64,
    width: f64,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    id: u64,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    events: Option<Vec<EventRecord>>,
    qas: Vec<QaSample>,
}

/// Rounds to nine significant digits.
fn round9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Annotation entry for one episode; features live in separate files.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub frames: usize,
    pub events: Option<Vec<Event>>,
    pub qas: Vec<QaSample>,
}

impl From<&Episode> for Annotation {
    fn from(e: &Episode) -> Self {
        Self {
            id: e.id,
            frames: e.frames(),
            events: e.events.clone(),
            qas: e.qas.clone(),
        }
    }
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        let record = EpisodeRecord {
            id: a.id,
            frames: a.frames,
            events: a.events.as_ref().map(|ev| {
                ev.iter()
                    .map(|e| EventRecord {
                        c: e.class,
                        center: round9(e.span.center),
                        width: round9(e.span.width),
                    })
                    .collect()
            }),
            qas: a.qas.clone(),
        };
        let line = serde_json::to_string(&record).expect("annotation record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let r: EpisodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let events = match r.events {
            None => None,
            Some(ev) => Some(
                ev.into_iter()
                    .map(|e| {
                        Span::new(e.center, e.width)
                            .map(|span| Event { class: e.c, span })
                            .map_err(|err| parse_err(err.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        out.push(Annotation {
            id: r.id,
            frames: r.frames,
            events,
            qas: r.qas,
        });
    }
    Ok(out)
}

/// A generated corpus as laid out on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub generator: Option<GeneratorConfig>,
    pub episodes: Vec<Episode>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const FEATURES_DIR: &str = "features";

pub fn feature_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{id:06}.gfv"))
}

impl Dataset {
    /// Generates episodes `ids` with `generator`.
    pub fn generate(generator: &Generator, ids: impl IntoIterator<Item = u64>) -> Result<Self> {
        let episodes = ids.into_iter().map(|id| generator.episode(id)).collect::<Result<_>>()?;
        Ok(Self {
            vocab: generator.vocab.clone(),
            generator: Some(generator.config.clone()),
            episodes,
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.episodes.iter().all(|e| e.events.is_some())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.episodes.first().map(|e| e.features.cols())
    }

    pub fn qa_count(&self) -> usize {
        self.episodes.iter().map(|e| e.qas.len()).sum()
    }

    /// Drops the event labels, keeping features and questions.
    pub fn unlabeled(mut self) -> Self {
        self.episodes.iter_mut().for_each(|e| e.events = None);
        self
    }

    /// Splits by [`is_heldout`] into `(train, heldout)`.
    pub fn split(&self) -> (Dataset, Dataset) {
        let pick = |held: bool| Dataset {
            vocab: self.vocab.clone(),
            generator: self.generator.clone(),
            episodes: self
                .episodes
                .iter()
                .filter(|e| is_heldout(e.id) == held)
                .cloned()
                .collect(),
        };
        (pick(false), pick(true))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join(FEATURES_DIR);
        fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for e in &self.episodes {
            write_features(&feature_path(dir, e.id), &e.features)?;
        }
        let annotations: Vec<Annotation> = self.episodes.iter().map(Annotation::from).collect();
        write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        if let Some(g) = &self.generator {
            write_json(&dir.join(GENERATOR_FILE), g)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        vocab.validate()?;
        let generator_path = dir.join(GENERATOR_FILE);
        let generator = if generator_path.exists() {
            Some(read_json(&generator_path)?)
        } else {
            None
        };
        let mut episodes = Vec::new();
        for a in read_annotations(&dir.join(ANNOTATIONS_FILE))? {
            let path = feature_path(dir, a.id);
            let features = read_features(&path)?;
            if features.rows() != a.frames {
                return Err(Error::ShapeMismatch {
                    name: path.display().to_string(),
                    expected: vec![a.frames],
                    found: vec![features.rows()],
                });
            }
            for qa in &a.qas {
                if qa.answer >= vocab.answers.len() || qa.question.iter().any(|&t| t >= vocab.tokens.len()) {
                    return Err(Error::contract(format!("episode {} has ids outside the vocabulary", a.id)));
                }
            }
            episodes.push(Episode {
                id: a.id,
                features,
                events: a.events,
                qas: a.qas,
            });
        }
        Ok(Self {
            vocab,
            generator,
            episodes,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
