//! Named parameter storage, initialization and per-parameter gradient checks.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{GradCheck, GradCheckOptions, InputCheck};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Like [`ParamStore::bind`], but parameters rejected by `trainable`
    /// become constants.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| tape.leaf(t.clone(), trainable(n)))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// A [`ParamStore`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Per-parameter gradients in store order. Constants get zeros.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.shape(v).to_vec()),
            })
            .collect()
    }
}

/// Uniform Xavier/Glorot initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.gen_range(-limit..limit))
}

/// Finite-difference check of the gradients of `loss` with respect to every
/// parameter accepted by `select`, holding the rest fixed.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    opts: &GradCheckOptions,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = opts.analytic_tape();
    let bound = store.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic = bound.grads(&tape, &grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_with(&mut tape, |_| false);
        let out = loss(&mut tape, &bound)?;
        tape.value(out).item()
    };

    let mut probe = store.clone();
    let mut inputs = Vec::new();
    for (k, (name, tensor)) in store.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let n = tensor.numel();
        let stride = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = (0usize, 0.0f64, 0.0f64);
        let mut scale = 1e-8f64;
        for j in (0..n).step_by(stride) {
            let orig = tensor.data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k].data()[j];
            scale = scale.max(a.abs()).max(numeric.abs());
            if (a - numeric).abs() >= (worst.1 - worst.2).abs() {
                worst = (j, a, numeric);
            }
        }
        inputs.push(InputCheck {
            name: name.to_string(),
            rel_error: (worst.1 - worst.2).abs() / scale,
            worst_index: worst.0,
            analytic: worst.1,
            numeric: worst.2,
        });
    }
    Ok(GradCheck { inputs })
}
