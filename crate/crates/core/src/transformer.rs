//! Multi-head attention and pre-norm encoder/decoder stacks.
//!
//! Every block is a set of [`ParamId`]s into a shared [`ParamStore`]; the
//! forward methods bind them onto the tape of the current [`Forward`].

use serde::{Deserialize, Serialize};

use crate::numerics::{AttentionMask, Tensor, Var, LAYERNORM_EPS};
use crate::params::{Forward, ParamId, ParamStore};
use crate::{Error, Result, Scalar};

/// Shape of an attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub layers: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::contract("model_dim, heads and layers must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Feed-forward hidden width.
    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// Affine map `x·W + b` with `W` of shape `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), in_dim, out_dim),
            bias: store.zeros(format!("{name}.bias"), &[1, out_dim]),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, fwd: &Forward<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.matmul(fwd.param(self.weight))?.add_row(fwd.param(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[1, dim]),
            bias: store.zeros(format!("{name}.bias"), &[1, dim]),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, fwd: &Forward<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.layernorm(fwd.param(self.gain), fwd.param(self.bias), F::lit(LAYERNORM_EPS))?)
    }
}

/// Output of an attention block, keeping a handle on the softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended<'t, F: Scalar> {
    pub output: Var<'t, F>,
    core: Var<'t, F>,
}

impl<F: Scalar> Attended<'_, F> {
    /// Per-head weights, shape `[heads, Lq, Lk]`.
    pub fn weights(&self) -> Tensor<F> {
        self.core
            .attention_weights()
            .expect("attention core node carries weights")
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, &format!("{name}.o"), dim, dim),
        }
    }

    /// Scaled dot-product attention of `query` rows over `context` rows.
    ///
    /// Scale is `1/sqrt(D/h)`; masked keys get exactly zero weight. Dropout (in
    /// training mode) is applied to the weights.
    pub fn forward<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        query: Var<'t, F>,
        context: Var<'t, F>,
        mask: Option<&AttentionMask>,
    ) -> Result<Attended<'t, F>> {
        if query.cols() != context.cols() {
            return Err(crate::numerics::NumericsError::Shape {
                op: "multi_head_attention",
                lhs: query.shape(),
                rhs: context.shape(),
            }
            .into());
        }
        let q = self.query.forward(fwd, query)?;
        let k = self.key.forward(fwd, context)?;
        let v = self.value.forward(fwd, context)?;
        let keep = fwd.dropout_keep(self.heads * query.rows() * context.rows());
        let core = fwd.tape().attention(q, k, v, self.heads, mask, keep)?;
        Ok(Attended {
            output: self.output.forward(fwd, core)?,
            core,
        })
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, fwd: &Forward<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.inner.forward(fwd, x)?.relu();
        self.outer.forward(fwd, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm self-attention stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub out_norm: LayerNorm,
}

impl Encoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.model_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_dim()),
                }
            })
            .collect();
        Self {
            layers,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d),
        }
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        x: Var<'t, F>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, F>> {
        let mut h = x;
        for layer in &self.layers {
            let normed = layer.attn_norm.forward(fwd, h)?;
            let attended = layer.attn.forward(fwd, normed, normed, mask)?.output;
            h = h.add(attended)?;
            let normed = layer.ff_norm.forward(fwd, h)?;
            let ff = fwd.dropout(layer.ff.forward(fwd, normed)?)?;
            h = h.add(ff)?;
        }
        self.out_norm.forward(fwd, h)
    }
}

/// Decoder layer whose cross-attention block `C` is pluggable.
#[derive(Clone, Debug)]
pub struct DecoderLayer<C> {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross: C,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm decoder stack: self-attention, cross block, feed-forward.
#[derive(Clone, Debug)]
pub struct Decoder<C> {
    pub layers: Vec<DecoderLayer<C>>,
    pub out_norm: LayerNorm,
}

impl<C> Decoder<C> {
    /// `make_cross(store, prefix)` builds the cross block of each layer.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &AttentionConfig,
        mut make_cross: impl FnMut(&mut ParamStore<F>, &str) -> C,
    ) -> Self {
        let d = cfg.model_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.heads),
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d),
                    cross: make_cross(store, &format!("{p}.cross")),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_dim()),
                }
            })
            .collect();
        Self {
            layers,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d),
        }
    }

    /// Runs the stack on `queries`; `cross(block, normed_queries)` supplies
    /// the cross-attention result of each layer.
    pub fn forward<'t, F: Scalar>(
        &self,
        fwd: &Forward<'t, '_, F>,
        queries: Var<'t, F>,
        mut cross: impl FnMut(&C, Var<'t, F>) -> Result<Var<'t, F>>,
    ) -> Result<Var<'t, F>> {
        let mut h = queries;
        for layer in &self.layers {
            let normed = layer.self_norm.forward(fwd, h)?;
            h = h.add(layer.self_attn.forward(fwd, normed, normed, None)?.output)?;
            let normed = layer.cross_norm.forward(fwd, h)?;
            h = h.add(cross(&layer.cross, normed)?)?;
            let normed = layer.ff_norm.forward(fwd, h)?;
            h = h.add(fwd.dropout(layer.ff.forward(fwd, normed)?)?)?;
        }
        self.out_norm.forward(fwd, h)
    }
}

/// Standard sinusoidal table: row `p` holds `sin(p/10000^(2i/D))` at even
/// columns `2i` and the matching cosine at odd columns.
pub fn sinusoidal_pe<F: Scalar>(positions: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::contract(format!("positional dimension {dim} must be even")));
    }
    if positions == 0 {
        return Err(Error::contract("positional table needs at least one position"));
    }
    let mut data = Vec::with_capacity(positions * dim);
    for p in 0..positions {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(F::lit(angle.sin()));
            data.push(F::lit(angle.cos()));
        }
    }
    Ok(Tensor::new(vec![positions, dim], data)?)
}
