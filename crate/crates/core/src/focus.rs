//! Focusing stage: sorted memory prompts, joint encoding with frames and the
//! question, and the question → memory → frame → answer attention cascade.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::glance::MemoryBank;
use crate::numerics::{Tensor, Var};
use crate::params::{Forward, ParamId, ParamStore};
use crate::transformer::{sinusoidal_pe, Attended, AttentionConfig, Decoder, Encoder, Linear, MultiHeadAttention};
use crate::{Error, Result, Scalar};

/// Memories reordered by predicted center with positions added.
#[derive(Clone, Debug)]
pub struct MemoryPrompt<'t, F: Scalar> {
    /// `M̃ + P_t`, `N×D`.
    pub prompts: Var<'t, F>,
    /// `P_t`, row `i` is the positional code of rank `i`.
    pub positions: Tensor<F>,
    /// `order[i]` is the original index of the memory at rank `i`.
    pub order: Vec<usize>,
}

/// Stable sort of the memories by predicted center, then positional codes
/// added by rank.
pub fn build_memory_prompt<'t, F: Scalar>(bank: &MemoryBank<'t, F>) -> Result<MemoryPrompt<'t, F>> {
    let centers: Vec<F> = bank.spans.value().data().chunks(2).map(|s| s[0]).collect();
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[a].partial_cmp(&centers[b]).unwrap_or(std::cmp::Ordering::Equal));
    let positions = sinusoidal_pe(bank.len(), bank.memories.cols())?;
    let sorted = bank.memories.gather_rows(&order)?;
    let prompts = sorted.add(bank.memories.tape().constant(positions.clone()))?;
    Ok(MemoryPrompt {
        prompts,
        positions,
        order,
    })
}

/// Token embedding followed by an affine projection into the model width.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embedding: ParamId,
    pub projector: Linear,
    pub vocab_size: usize,
}

impl QuestionEncoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, vocab_size: usize, dim: usize) -> Self {
        Self {
            embedding: store.xavier("question.embedding", vocab_size, dim),
            projector: Linear::new(store, "question.projector", dim, dim),
            vocab_size,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, fwd: &Forward<'t, '_, F>, tokens: &[usize]) -> Result<Var<'t, F>> {
        if tokens.is_empty() {
            return Err(Error::contract("question has no tokens"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let embedded = fwd.param(self.embedding).gather_rows(tokens)?;
        self.projector.forward(fwd, embedded)
    }
}

/// How the focus decoder reaches the frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Question attends memories, the selected memories attend frames.
    #[default]
    Cascade,
    /// Question attends frames directly (single standard cross-attention).
    Direct,
}

/// Cross block of one focus decoder layer.
#[derive(Clone, Debug)]
pub struct FocusCross {
    pub memory: Option<MultiHeadAttention>,
    pub frame: MultiHeadAttention,
    pub answer: MultiHeadAttention,
}

impl FocusCross {
    pub fn focus_on_memory<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        question: Var<'t, F>,
        memories: Var<'t, F>,
    ) -> Result<Attended<'t, F>> {
        let mha = self
            .memory
            .as_ref()
            .ok_or_else(|| Error::contract("direct variant has no memory level"))?;
        mha.forward(fwd, question, memories, None)
    }

    pub fn focus_on_frame<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        selected: Var<'t, F>,
        frames: Var<'t, F>,
    ) -> Result<Attended<'t, F>> {
        self.frame.forward(fwd, selected, frames, None)
    }
}

/// Encoded segments returned by [`Focus::encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t, F: Scalar> {
    pub frames: Var<'t, F>,
    pub memories: Var<'t, F>,
    pub question: Var<'t, F>,
}

#[derive(Clone, Debug)]
pub struct FocusOutput<'t, F: Scalar> {
    /// `1×|A|` answer scores.
    pub logits: Var<'t, F>,
    /// Decoded answer queries, `N×D`.
    pub answers: Var<'t, F>,
    /// Last-layer question → memory weights, `[h, L, N]` (cascade only).
    pub memory_attention: Option<Tensor<F>>,
    /// Last-layer weights of the level that reads the frames, `[h, L, T]`.
    pub frame_attention: Tensor<F>,
}

impl<F: Scalar> FocusOutput<'_, F> {
    pub fn answer(&self) -> usize {
        argmax(self.logits.value().data())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Focus {
    pub segments: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder<FocusCross>,
    pub answer_queries: ParamId,
    pub head: Linear,
    pub variant: AttentionVariant,
}

const VIDEO: usize = 0;
const MEMORY: usize = 1;
const QUESTION: usize = 2;

impl Focus {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &AttentionConfig,
        memories: usize,
        answers: usize,
        variant: AttentionVariant,
    ) -> Result<Self> {
        if answers == 0 {
            return Err(Error::contract("answer vocabulary is empty"));
        }
        let (d, h) = (cfg.model_dim, cfg.heads);
        Ok(Self {
            segments: store.xavier("focus.segments", 3, d),
            encoder: Encoder::new(store, "focus.encoder", cfg),
            decoder: Decoder::new(store, "focus.decoder", cfg, |s, name| FocusCross {
                memory: (variant == AttentionVariant::Cascade)
                    .then(|| MultiHeadAttention::new(s, &format!("{name}.memory"), d, h)),
                frame: MultiHeadAttention::new(s, &format!("{name}.frame"), d, h),
                answer: MultiHeadAttention::new(s, &format!("{name}.answer"), d, h),
            }),
            answer_queries: store.xavier("focus.answer_queries", memories, d),
            head: Linear::new(store, "focus.head", d, answers),
            variant,
        })
    }

    /// One encoder pass over `[frames; prompts; question]`, each tagged with
    /// its segment embedding, split back into the three parts.
    pub fn encode<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        video: Var<'t, F>,
        prompt: &MemoryPrompt<'t, F>,
        question: Var<'t, F>,
    ) -> Result<Encoded<'t, F>> {
        let d = video.cols();
        if prompt.prompts.cols() != d || question.cols() != d {
            return Err(Error::contract(format!(
                "focus inputs disagree on width: video {:?}, prompts {:?}, question {:?}",
                video.shape(),
                prompt.prompts.shape(),
                question.shape()
            )));
        }
        let seg = fwd.param(self.segments);
        let tag = |x: Var<'t, F>, k: usize| -> Result<Var<'t, F>> { Ok(x.add_row(seg.slice_rows(k, 1)?)?) };
        let (t, n, l) = (video.rows(), prompt.prompts.rows(), question.rows());
        let joint = fwd.tape().concat_rows(&[
            tag(video, VIDEO)?,
            tag(prompt.prompts, MEMORY)?,
            tag(question, QUESTION)?,
        ])?;
        let out = self.encoder.forward(fwd, joint, None)?;
        Ok(Encoded {
            frames: out.slice_rows(0, t)?,
            memories: out.slice_rows(t, n)?,
            question: out.slice_rows(t + n, l)?,
        })
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        video: Var<'t, F>,
        prompt: &MemoryPrompt<'t, F>,
        question: Var<'t, F>,
    ) -> Result<FocusOutput<'t, F>> {
        let enc = self.encode(fwd, video, prompt, question)?;
        let mut memory_attention = None;
        let mut frame_attention = None;
        let answers = self.decoder.forward(fwd, fwd.param(self.answer_queries), |cross, a| {
            let frames = match self.variant {
                AttentionVariant::Cascade => {
                    let m = cross.focus_on_memory(fwd, enc.question, enc.memories)?;
                    memory_attention = Some(m);
                    cross.focus_on_frame(fwd, m.output, enc.frames)?
                }
                AttentionVariant::Direct => cross.focus_on_frame(fwd, enc.question, enc.frames)?,
            };
            frame_attention = Some(frames);
            Ok(cross.answer.forward(fwd, a, frames.output, None)?.output)
        })?;
        let last = answers.slice_rows(answers.rows() - 1, 1)?;
        Ok(FocusOutput {
            logits: self.head.forward(fwd, last)?,
            answers,
            memory_attention: memory_attention.map(|m| m.weights()),
            frame_attention: frame_attention.expect("decoder has at least one layer").weights(),
        })
    }
}

const EXPORT_MAGIC: &str = "GF-ATTN";
const EXPORT_VERSION: &str = "v1";

/// Both focus attention levels of one inference, plus memory order and spans.
///
/// Values are kept in single precision; nine significant digits make the
/// text form round-trip them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub heads: usize,
    pub question_len: usize,
    pub memories: usize,
    pub frames: usize,
    /// `[h, L, N]` row-major.
    pub memory: Vec<f32>,
    /// `[h, L, T]` row-major.
    pub frame: Vec<f32>,
    pub order: Vec<usize>,
    /// `(center, width)` per memory in original index order.
    pub spans: Vec<(f32, f32)>,
}

impl AttentionExport {
    pub fn from_output<F: Scalar>(output: &FocusOutput<'_, F>, bank: &MemoryBank<'_, F>, order: &[usize]) -> Result<Self> {
        let memory = output
            .memory_attention
            .as_ref()
            .ok_or_else(|| Error::contract("attention export needs the cascade variant"))?;
        let &[h, l, n] = memory.shape() else {
            return Err(Error::contract("memory attention must be [h, L, N]"));
        };
        let t = output.frame_attention.shape()[2];
        let (_, spans) = bank.predictions();
        Ok(Self {
            heads: h,
            question_len: l,
            memories: n,
            frames: t,
            memory: memory.data().iter().map(|v| v.as_f64() as f32).collect(),
            frame: output.frame_attention.data().iter().map(|v| v.as_f64() as f32).collect(),
            order: order.to_vec(),
            spans: spans.iter().map(|s| (s.center as f32, s.width as f32)).collect(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{EXPORT_MAGIC} {EXPORT_VERSION} {} {} {} {}\n",
            self.heads, self.question_len, self.memories, self.frames
        );
        for (values, width) in [(&self.memory, self.memories), (&self.frame, self.frames)] {
            for row in values.chunks(width) {
                let line: Vec<String> = row.iter().map(|v| fmt9(*v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        let order: Vec<String> = self.order.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "order {}", order.join(" "));
        let spans: Vec<String> = self
            .spans
            .iter()
            .map(|(c, w)| format!("{} {}", fmt9(*c), fmt9(*w)))
            .collect();
        let _ = writeln!(out, "spans {}", spans.join(" "));
        out
    }

    /// Parses the text form; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines.first().map_or(vec![], |l| l.split(' ').collect());
        if header.len() != 6 || header[0] != EXPORT_MAGIC || header[1] != EXPORT_VERSION {
            return Err(err(1, format!("expected header `{EXPORT_MAGIC} {EXPORT_VERSION} h L N T`")));
        }
        let mut dims = [0usize; 4];
        for (d, s) in dims.iter_mut().zip(&header[2..]) {
            *d = s.parse().map_err(|_| err(1, format!("bad extent `{s}`")))?;
        }
        let [h, l, n, t] = dims;
        let rows = h * l;
        if lines.len() != 1 + 2 * rows + 2 {
            return Err(err(lines.len(), format!("expected {} lines, found {}", 3 + 2 * rows, lines.len())));
        }
        let floats = |idx: usize, s: &str, expect: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = s
                .split(' ')
                .filter(|x| !x.is_empty())
                .map(|x| x.parse::<f32>().map_err(|_| err(idx + 1, format!("bad value `{x}`"))))
                .collect::<Result<_>>()?;
            if v.len() != expect {
                return Err(err(idx + 1, format!("expected {expect} values, found {}", v.len())));
            }
            Ok(v)
        };
        let mut memory = Vec::with_capacity(rows * n);
        let mut frame = Vec::with_capacity(rows * t);
        for r in 0..rows {
            memory.extend(floats(1 + r, lines[1 + r], n)?);
            frame.extend(floats(1 + rows + r, lines[1 + rows + r], t)?);
        }
        let order_idx = 1 + 2 * rows;
        let order_line = lines[order_idx]
            .strip_prefix("order")
            .ok_or_else(|| err(order_idx + 1, "expected `order` line".into()))?;
        let order: Vec<usize> = order_line
            .split(' ')
            .filter(|x| !x.is_empty())
            .map(|x| x.parse().map_err(|_| err(order_idx + 1, format!("bad index `{x}`"))))
            .collect::<Result<_>>()?;
        if order.len() != n {
            return Err(err(order_idx + 1, format!("expected {n} indices")));
        }
        let spans_line = lines[order_idx + 1]
            .strip_prefix("spans")
            .ok_or_else(|| err(order_idx + 2, "expected `spans` line".into()))?;
        let flat = floats(order_idx + 1, spans_line, 2 * n)?;
        Ok(Self {
            heads: h,
            question_len: l,
            memories: n,
            frames: t,
            memory,
            frame,
            order,
            spans: flat.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Nine significant digits in scientific notation.
fn fmt9(v: f32) -> String {
    format!("{v:.8e}")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_check, scalar_fn, NumericsError, Tape};
    use crate::params::Mode;

    fn cfg(d: usize) -> AttentionConfig {
        AttentionConfig {
            model_dim: d,
            heads: 4,
            dropout: 0.0,
            layers: 2,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bank_with_centers<'t>(tape: &'t Tape<f64>, rng: &mut ChaCha8Rng, centers: &[f64], d: usize) -> MemoryBank<'t, f64> {
        let n = centers.len();
        let spans = centers.iter().flat_map(|&c| [c, 0.1]).collect();
        MemoryBank::from_parts(
            tape.constant(random(rng, n, d)),
            tape.constant(random(rng, n, 3)),
            tape.constant(Tensor::new(vec![n, 2], spans).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn prompt_sort_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let order = |c: &[f64], rng: &mut ChaCha8Rng| build_memory_prompt(&bank_with_centers(&tape, rng, c, 8)).unwrap().order;
        assert_eq!(order(&[0.7, 0.2, 0.5], &mut rng), vec![1, 2, 0]);
        assert_eq!(order(&[0.1, 0.2, 0.3], &mut rng), vec![0, 1, 2]);
        assert_eq!(order(&[0.5, 0.5], &mut rng), vec![0, 1]);

        let bank = bank_with_centers(&tape, &mut rng, &[0.9, 0.1, 0.4, 0.4], 8);
        let p = build_memory_prompt(&bank).unwrap();
        assert_eq!(p.positions, sinusoidal_pe(4, 8).unwrap());
        let mem = bank.memories.to_tensor();
        let prompts = p.prompts.to_tensor();
        for (rank, &orig) in p.order.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(prompts.get(rank, c), mem.get(orig, c) + p.positions.get(rank, c));
            }
        }
    }

    fn build(rng: &mut ChaCha8Rng, d: usize, n: usize, answers: usize, variant: AttentionVariant) -> (ParamStore<f64>, Focus, QuestionEncoder) {
        let mut store = ParamStore::with_seed(rng.random());
        let focus = Focus::new(&mut store, &cfg(d), n, answers, variant).unwrap();
        let question = QuestionEncoder::new(&mut store, 12, d);
        (store, focus, question)
    }

    #[test]
    fn encode_shapes_and_cross_segment_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, focus, _) = build(&mut rng, 16, 4, 5, AttentionVariant::Cascade);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &store, Mode::Eval);
        let video = tape.constant(random(&mut rng, 8, 16));
        let prompt = build_memory_prompt(&bank_with_centers(&tape, &mut rng, &[0.1, 0.3, 0.6, 0.8], 16)).unwrap();
        let q = random(&mut rng, 5, 16);
        let enc = focus.encode(&fwd, video, &prompt, tape.constant(q.clone())).unwrap();
        assert_eq!(enc.frames.shape(), vec![8, 16]);
        assert_eq!(enc.memories.shape(), vec![4, 16]);
        assert_eq!(enc.question.shape(), vec![5, 16]);
        let zeroed = focus
            .encode(&fwd, video, &prompt, tape.constant(Tensor::zeros(&[5, 16])))
            .unwrap();
        assert_ne!(enc.frames.to_tensor(), zeroed.frames.to_tensor());
        let again = focus.encode(&fwd, video, &prompt, tape.constant(q)).unwrap();
        assert_eq!(enc.frames.to_tensor(), again.frames.to_tensor());
        let narrow = tape.constant(Tensor::zeros(&[5, 8]));
        assert!(focus.encode(&fwd, video, &prompt, narrow).is_err());
    }

    #[test]
    fn cascade_levels_shapes_and_degenerate_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, focus, _) = build(&mut rng, 16, 4, 5, AttentionVariant::Cascade);
        let cross = &focus.decoder.layers[0].cross;
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &store, Mode::Eval);
        let l = tape.constant(random(&mut rng, 5, 16));
        let m = tape.constant(random(&mut rng, 4, 16));
        let x = tape.constant(random(&mut rng, 8, 16));
        let mf = cross.focus_on_memory(&fwd, l, m).unwrap();
        assert_eq!(mf.output.shape(), vec![5, 16]);
        assert_eq!(mf.weights().shape(), &[4, 5, 4]);
        let xf = cross.focus_on_frame(&fwd, mf.output, x).unwrap();
        assert_eq!(xf.output.shape(), vec![5, 16]);
        assert_eq!(xf.weights().shape(), &[4, 5, 8]);
        for w in [mf.weights(), xf.weights()] {
            let k = w.shape()[2];
            for row in w.data().chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let single = cross.focus_on_memory(&fwd, l, m.slice_rows(2, 1).unwrap()).unwrap();
        assert!(single.weights().data().iter().all(|&w| w == 1.0));
        let out = single.output.to_tensor();
        for r in 1..5 {
            for c in 0..16 {
                assert!((out.get(r, c) - out.get(0, c)).abs() < 1e-12);
            }
        }
        let one_frame = cross.focus_on_frame(&fwd, mf.output, x.slice_rows(0, 1).unwrap()).unwrap();
        assert!(one_frame.weights().data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn answer_head_shapes_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, focus, qenc) = build(&mut rng, 16, 4, 5, AttentionVariant::Cascade);
        let video = random(&mut rng, 8, 16);
        let run = |store: &ParamStore<f64>, rng: &mut ChaCha8Rng| {
            let tape = Tape::new();
            let fwd = Forward::new(&tape, store, Mode::Eval);
            let prompt = build_memory_prompt(&bank_with_centers(&tape, rng, &[0.1, 0.3, 0.6, 0.8], 16)).unwrap();
            let q = qenc.forward(&fwd, &[1, 4, 2]).unwrap();
            let out = focus.forward(&fwd, tape.constant(video.clone()), &prompt, q).unwrap();
            (out.logits.to_tensor(), out.answers.shape(), out.answer())
        };
        let (logits, answers, _) = run(&store, &mut rng);
        assert_eq!(logits.shape(), &[1, 5]);
        assert_eq!(answers, vec![4, 16]);
        store.get_mut(focus.head.weight).data_mut().fill(0.0);
        store.get_mut(focus.head.bias).data_mut().fill(0.0);
        let (logits, _, answer) = run(&store, &mut rng);
        assert!(logits.data().iter().all(|&x| x == 0.0));
        assert_eq!(answer, 0);
        assert!(Focus::new(&mut ParamStore::<f64>::new(), &cfg(16), 4, 0, AttentionVariant::Cascade).is_err());
    }

    #[test]
    fn argmax_ties_and_rescaling() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let v: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            assert_eq!(argmax(&v), argmax(&scaled));
        }
    }

    #[test]
    fn question_encoder_rejects_bad_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, _, qenc) = build(&mut rng, 16, 4, 5, AttentionVariant::Cascade);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &store, Mode::Eval);
        assert_eq!(qenc.forward(&fwd, &[0, 11]).unwrap().shape(), vec![2, 16]);
        assert!(qenc.forward(&fwd, &[12]).is_err());
        assert!(qenc.forward(&fwd, &[]).is_err());
    }

    #[test]
    fn cascade_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, focus, _) = build(&mut rng, 8, 3, 4, AttentionVariant::Cascade);
        let video = random(&mut rng, 5, 8);
        let question = random(&mut rng, 2, 8);
        let memories = random(&mut rng, 3, 8);
        let spans = Tensor::new(vec![3, 2], vec![0.6, 0.1, 0.2, 0.1, 0.4, 0.1]).unwrap();
        let to_num = |e: Error| match e {
            Error::Numerics(n) => n,
            other => panic!("{other}"),
        };
        let (store, focus, video, question, memories, spans) = (&store, &focus, &video, &question, &memories, &spans);
        let check = |which: usize| {
            scalar_fn(move |tape: &Tape<f64>, v| -> std::result::Result<_, NumericsError> {
                let fwd = Forward::new(tape, store, Mode::Eval);
                let pick = |k: usize, t: &Tensor<f64>| if k == which { v } else { tape.constant(t.clone()) };
                let mem = pick(0, memories);
                let bank = MemoryBank::from_parts(mem, mem, tape.constant(spans.clone())).map_err(to_num)?;
                let prompt = build_memory_prompt(&bank).map_err(to_num)?;
                let out = focus
                    .forward(&fwd, pick(1, video), &prompt, pick(2, question))
                    .map_err(to_num)?;
                out.logits.cross_entropy(&[2])
            })
        };
        for (which, x) in [(0, memories), (1, video), (2, question)] {
            let err = finite_diff_check(check(which), x, 1e-5).unwrap();
            assert!(err < 1e-3, "input {which}: {err}");
        }
    }

    #[test]
    fn export_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, focus, qenc) = build(&mut rng, 16, 4, 5, AttentionVariant::Cascade);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &store, Mode::Eval);
        let bank = bank_with_centers(&tape, &mut rng, &[0.8, 0.3, 0.6, 0.1], 16);
        let prompt = build_memory_prompt(&bank).unwrap();
        let q = qenc.forward(&fwd, &[3, 1, 0]).unwrap();
        let out = focus.forward(&fwd, tape.constant(random(&mut rng, 9, 16)), &prompt, q).unwrap();
        let export = AttentionExport::from_output(&out, &bank, &prompt.order).unwrap();
        let text = export.to_text();
        let values: usize = text.lines().skip(1).take(2 * 4 * 3).map(|l| l.split(' ').count()).sum();
        assert_eq!(values, 4 * 3 * (4 + 9));
        for (vals, k) in [(&export.memory, 4), (&export.frame, 9)] {
            for row in vals.chunks(k) {
                assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.txt");
        export.write(&path).unwrap();
        let back = AttentionExport::read(&path).unwrap();
        assert_eq!(back, export);
        assert!(back.memory.iter().zip(&export.memory).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_text(), text);
        assert_eq!(back.order, vec![3, 1, 2, 0]);

        let broken = text.replacen("GF-ATTN", "GF-ATTX", 1);
        assert!(AttentionExport::parse(&broken, &path).is_err());
        assert!(AttentionExport::read(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn direct_variant_has_no_memory_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, focus, qenc) = build(&mut rng, 16, 4, 5, AttentionVariant::Direct);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &store, Mode::Eval);
        let bank = bank_with_centers(&tape, &mut rng, &[0.8, 0.3, 0.6, 0.1], 16);
        let prompt = build_memory_prompt(&bank).unwrap();
        let q = qenc.forward(&fwd, &[3, 1]).unwrap();
        let out = focus.forward(&fwd, tape.constant(random(&mut rng, 9, 16)), &prompt, q).unwrap();
        assert!(out.memory_attention.is_none());
        assert_eq!(out.frame_attention.shape(), &[4, 2, 9]);
        assert!(AttentionExport::from_output(&out, &bank, &prompt.order).is_err());
    }
}
