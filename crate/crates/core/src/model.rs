//! The full two-stage model: frame projection, glance, memory prompting and
//! focus.

use serde::{Deserialize, Serialize};

use crate::focus::{build_memory_prompt, AttentionVariant, Focus, FocusOutput, MemoryPrompt, QuestionEncoder};
use crate::glance::{Glance, MemoryBank};
use crate::numerics::{Tensor, Var};
use crate::params::{Forward, ParamStore};
use crate::transformer::{sinusoidal_pe, AttentionConfig, Linear};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Number of event memories `N`.
    pub memories: usize,
    /// Event classes `C`, excluding the no-event class.
    pub classes: usize,
    /// Adds the no-event class `C` to the classifier.
    pub no_event_class: bool,
    pub vocab_size: usize,
    pub answers: usize,
    pub variant: AttentionVariant,
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            dropout: self.dropout,
            layers: self.layers,
        }
    }

    /// Width of the class logits.
    pub fn class_logits(&self) -> usize {
        self.classes + usize::from(self.no_event_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::contract(format!("model_dim {} must be even", self.model_dim)));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("memories", self.memories),
            ("classes", self.classes),
            ("vocab_size", self.vocab_size),
            ("answers", self.answers),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Glance-stage results for one video, reusable across its questions.
#[derive(Clone, Debug)]
pub struct Glimpse<'t, F: Scalar> {
    /// Projected frames with positional codes, `T×D`.
    pub video: Var<'t, F>,
    pub bank: MemoryBank<'t, F>,
    pub prompt: MemoryPrompt<'t, F>,
}

#[derive(Clone, Debug)]
pub struct GlanceFocus<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub input: Linear,
    pub glance: Glance,
    pub question: QuestionEncoder,
    pub focus: Focus,
}

impl<F: Scalar> GlanceFocus<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.attention();
        let d = config.model_dim;
        let mut store = ParamStore::with_seed(seed);
        let input = Linear::new(&mut store, "input", config.feature_dim, d);
        let glance = Glance::new(&mut store, &cfg, config.memories, config.class_logits());
        let question = QuestionEncoder::new(&mut store, config.vocab_size, d);
        let focus = Focus::new(&mut store, &cfg, config.memories, config.answers, config.variant)?;
        Ok(Self {
            config,
            store,
            input,
            glance,
            question,
            focus,
        })
    }

    pub fn glimpse<'t>(&self, fwd: &Forward<'t, '_, F>, features: &Tensor<f32>) -> Result<Glimpse<'t, F>> {
        if features.cols() != self.config.feature_dim || features.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                name: "frame features".into(),
                expected: vec![features.rows(), self.config.feature_dim],
                found: features.shape().to_vec(),
            });
        }
        let frames = fwd.constant(features.cast());
        let positions = fwd.constant(sinusoidal_pe(features.rows(), self.config.model_dim)?);
        let video = self.input.forward(fwd, frames)?.add(positions)?;
        let bank = self.glance.forward(fwd, video)?;
        let prompt = build_memory_prompt(&bank)?;
        Ok(Glimpse { video, bank, prompt })
    }

    pub fn answer<'t>(&self, fwd: &Forward<'t, '_, F>, glimpse: &Glimpse<'t, F>, tokens: &[usize]) -> Result<FocusOutput<'t, F>> {
        let question = self.question.forward(fwd, tokens)?;
        self.focus.forward(fwd, glimpse.video, &glimpse.prompt, question)
    }
}
