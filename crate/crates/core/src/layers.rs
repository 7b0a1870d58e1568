//! Small building blocks shared by the real and complex networks.

use rand::Rng;

use crate::error::Result;
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// `x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    /// `{prefix}.w` is Xavier-uniform `[fan_in, fan_out]`, `{prefix}.b` zeros.
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        store.insert(format!("{prefix}.w"), xavier_uniform(rng, fan_in, fan_out));
        store.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Affine {
            w: bound.var(&format!("{prefix}.w"))?,
            b: bound.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    /// Unit gain, zero bias.
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) {
        store.insert(format!("{prefix}.gain"), Tensor::ones([dim]));
        store.insert(format!("{prefix}.bias"), Tensor::zeros([dim]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: bound.var(&format!("{prefix}.gain"))?,
            bias: bound.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, eps)
    }
}

/// Standard sinusoidal position table, `[t, d]`.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn([t, d], |ix| {
        let (pos, i) = (ix[0] as f64, ix[1]);
        let rate = 10000f64.powf((i - i % 2) as f64 / d as f64);
        if i % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}
