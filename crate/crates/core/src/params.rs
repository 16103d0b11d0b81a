//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::seed::{derive, name_hash};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Random initializations draw from a stream keyed on `seed` and the
    /// parameter name, so they do not depend on construction order.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform matrix: `U(-a, a)` with `a = sqrt(6 / (rows + cols))`.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, &[name_hash(&name)]));
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(vec![rows, cols], data).expect("positive extents"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, F::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.tensors.iter_mut().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// How a forward pass treats parameters and dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Parameters are constants, dropout is off.
    Eval,
    /// Parameters receive gradients; dropout at `dropout` driven by `seed`.
    Train { dropout: f64, seed: u64 },
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Forward<'t, 'p, F: Scalar> {
    tape: &'t Tape<F>,
    store: &'p ParamStore<F>,
    bound: RefCell<Vec<Option<Var<'t, F>>>>,
    trainable: bool,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t, 'p, F: Scalar> Forward<'t, 'p, F> {
    pub fn new(tape: &'t Tape<F>, store: &'p ParamStore<F>, mode: Mode) -> Self {
        let (trainable, dropout, seed) = match mode {
            Mode::Eval => (false, 0.0, 0),
            Mode::Train { dropout, seed } => (true, dropout, seed),
        };
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.trainable
    }

    /// Tape leaf for a parameter; created on first use and reused afterwards.
    pub fn param(&self, id: ParamId) -> Var<'t, F> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `var` as parameter `id` for the rest of this pass. Must happen
    /// before the parameter is first used.
    pub fn bind(&self, id: ParamId, var: Var<'t, F>) -> Result<()> {
        let expected = self.store.get(id).shape();
        if var.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: self.store.name(id).to_string(),
                expected: expected.to_vec(),
                found: var.shape(),
            });
        }
        let mut bound = self.bound.borrow_mut();
        if bound[id.0].is_some() {
            return Err(Error::contract(format!(
                "parameter {} is already bound",
                self.store.name(id)
            )));
        }
        bound[id.0] = Some(var);
        Ok(())
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(value)
    }

    /// Inverted-dropout multipliers for `n` elements, or `None` when inactive.
    pub fn dropout_keep(&self, n: usize) -> Option<Vec<F>> {
        if !self.trainable || self.dropout <= 0.0 {
            return None;
        }
        let p = self.dropout;
        let scale = F::lit(1.0 / (1.0 - p));
        let mut rng = self.rng.borrow_mut();
        Some(
            (0..n)
                .map(|_| if rng.random_bool(p) { F::zero() } else { scale })
                .collect(),
        )
    }

    pub fn dropout(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let n = x.value().len();
        match self.dropout_keep(n) {
            Some(keep) => Ok(x.mul_const(keep)?),
            None => Ok(x),
        }
    }

    /// Gradient per parameter (indexed by [`ParamId`]); `None` where unused.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Option<Vec<F>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}
