//! Glancing stage: learned memory queries decode encoded frames into a bank
//! of event memories with class and span predictions.


use crate::numerics::{Tensor, Var, PROB_EPS};
use crate::params::{Forward, ParamId, ParamStore};
use crate::set_matching::{Span, IOU_EPS};
use crate::transformer::{AttentionConfig, Decoder, Encoder, Linear, MultiHeadAttention};
use crate::{Error, Result, Scalar};

/// Event memories with their per-memory predictions.
#[derive(Clone, Copy, Debug)]
pub struct MemoryBank<'t, F: Scalar> {
    /// `N×D`.
    pub memories: Var<'t, F>,
    /// `N×C'` unnormalized class scores.
    pub class_logits: Var<'t, F>,
    /// `N×2`, columns `(center, width)`, each in `[0, 1]`.
    pub spans: Var<'t, F>,
}

impl<'t, F: Scalar> MemoryBank<'t, F> {
    pub fn from_parts(memories: Var<'t, F>, class_logits: Var<'t, F>, spans: Var<'t, F>) -> Result<Self> {
        let n = memories.rows();
        if class_logits.rows() != n || spans.shape() != [n, 2] {
            return Err(Error::contract(format!(
                "memory bank parts disagree: memories {:?}, logits {:?}, spans {:?}",
                memories.shape(),
                class_logits.shape(),
                spans.shape()
            )));
        }
        Ok(Self {
            memories,
            class_logits,
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.memories.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class probability rows and predicted spans as plain values.
    pub fn predictions(&self) -> (Tensor<F>, Vec<Span>) {
        let mut probs = self.class_logits.to_tensor();
        let c = probs.cols();
        for row in probs.data_mut().chunks_mut(c) {
            crate::numerics::softmax_in_place(row);
        }
        let spans = self
            .spans
            .value()
            .data()
            .chunks(2)
            .map(|s| Span {
                center: s[0].as_f64(),
                width: s[1].as_f64(),
            })
            .collect();
        (probs, spans)
    }
}

/// Parameters of the glancing stage.
#[derive(Clone, Debug)]
pub struct Glance {
    pub queries: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder<MultiHeadAttention>,
    pub classifier: Linear,
    pub temporal: [Linear; 3],
}

impl Glance {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &AttentionConfig,
        memories: usize,
        classes: usize,
    ) -> Self {
        let d = cfg.model_dim;
        let heads = cfg.heads;
        Self {
            queries: store.xavier("glance.queries", memories, d),
            encoder: Encoder::new(store, "glance.encoder", cfg),
            decoder: Decoder::new(store, "glance.decoder", cfg, |s, name| {
                MultiHeadAttention::new(s, name, d, heads)
            }),
            classifier: Linear::new(store, "glance.classifier", d, classes),
            temporal: [
                Linear::new(store, "glance.temporal0", d, d),
                Linear::new(store, "glance.temporal1", d, d),
                Linear::new(store, "glance.temporal2", d, 2),
            ],
        }
    }

    /// Encodes `video` (`T×D`) and decodes the memory queries against it.
    /// Returns the encoded frames alongside the bank.
    pub fn forward<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        video: Var<'t, F>,
    ) -> Result<MemoryBank<'t, F>> {
        let encoded = self.encoder.forward(fwd, video, None)?;
        let memories = self.decoder.forward(fwd, fwd.param(self.queries), |mha, q| {
            Ok(mha.forward(fwd, q, encoded, None)?.output)
        })?;
        let class_logits = self.classifier.forward(fwd, memories)?;
        let h = self.temporal[0].forward(fwd, memories)?.relu();
        let h = self.temporal[1].forward(fwd, h)?.relu();
        let spans = self.temporal[2].forward(fwd, h)?.sigmoid();
        MemoryBank::from_parts(memories, class_logits, spans)
    }
}

/// Mean per-memory entropy of the class distributions.
pub fn loss_certainty<'t, F: Scalar>(bank: &MemoryBank<'t, F>) -> Result<Var<'t, F>> {
    let logits = bank.class_logits;
    let plogp = logits.softmax_rows().mul(logits.log_softmax_rows())?;
    Ok(plogp.sum().scale(F::lit(-1.0 / bank.len() as f64)))
}

/// Negative entropy `Σ p̄ ln p̄` of the mean class distribution.
pub fn loss_semantic_diversity<'t, F: Scalar>(bank: &MemoryBank<'t, F>) -> Result<Var<'t, F>> {
    let mean = bank.class_logits.softmax_rows().mean_over_rows();
    Ok(mean.mul(mean.ln_clamped(F::lit(PROB_EPS)))?.sum())
}

/// `N×N` matrix of soft temporal IoU between predicted spans.
pub fn soft_iou_matrix<'t, F: Scalar>(spans: Var<'t, F>) -> Result<Var<'t, F>> {
    let n = spans.rows();
    let center = spans.slice_cols(0, 1)?;
    let half = spans.slice_cols(1, 1)?.scale(F::lit(0.5));
    let start = center.sub(half)?.clamp(F::zero(), F::one());
    let end = center.add(half)?.clamp(F::zero(), F::one());
    let (s, e) = (start.repeat_cols(n)?, end.repeat_cols(n)?);
    let (st, et) = (s.transpose()?, e.transpose()?);
    let inter = e.minimum(et)?.sub(s.maximum(st)?)?.relu();
    let len = e.sub(s)?;
    let union = len.add(len.transpose()?)?.sub(inter)?;
    Ok(inter.div(union.add_scalar(F::lit(IOU_EPS)))?)
}

/// Mean soft IoU over ordered pairs of distinct memories.
pub fn loss_temporal_overlap<'t, F: Scalar>(bank: &MemoryBank<'t, F>) -> Result<Var<'t, F>> {
    let n = bank.len();
    if n < 2 {
        return Err(Error::contract(format!("temporal overlap needs at least 2 memories, got {n}")));
    }
    let off_diagonal = (0..n * n)
        .map(|k| if k / n == k % n { F::zero() } else { F::one() })
        .collect();
    let iou = soft_iou_matrix(bank.spans)?.mul_const(off_diagonal)?;
    Ok(iou.sum().scale(F::lit(1.0 / (n * (n - 1)) as f64)))
}

pub fn loss_diversity<'t, F: Scalar>(bank: &MemoryBank<'t, F>, lambda_cls: f64, lambda_iou: f64) -> Result<Var<'t, F>> {
    let cls = loss_semantic_diversity(bank)?.scale(F::lit(lambda_cls));
    let iou = loss_temporal_overlap(bank)?.scale(F::lit(lambda_iou));
    Ok(cls.add(iou)?)
}
