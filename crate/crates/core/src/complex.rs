//! The complex denoiser: coupled real and imaginary paths with per-path
//! self-attention, cross-path attention and complex fully connected layers,
//! ending in a complex mask.

use rand::Rng;

use crate::attention::{gsa_attention, multi_head_attention, AttentionConfig, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_encoding, Affine, LayerNorm};
use crate::model::ModelSpec;
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Complex affine map `y = x W + b` with `W = W_r + i W_i`, `b = b_r + i b_i`.
#[derive(Clone, Copy, Debug)]
pub struct ComplexFc {
    pub w_r: Var,
    pub w_i: Var,
    pub b_r: Var,
    pub b_i: Var,
}

impl ComplexFc {
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        store.insert(format!("{prefix}.w_r"), xavier_uniform(rng, fan_in, fan_out));
        store.insert(format!("{prefix}.w_i"), xavier_uniform(rng, fan_in, fan_out));
        store.insert(format!("{prefix}.b_r"), Tensor::zeros([fan_out]));
        store.insert(format!("{prefix}.b_i"), Tensor::zeros([fan_out]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(ComplexFc {
            w_r: bound.var(&format!("{prefix}.w_r"))?,
            w_i: bound.var(&format!("{prefix}.w_i"))?,
            b_r: bound.var(&format!("{prefix}.b_r"))?,
            b_i: bound.var(&format!("{prefix}.b_i"))?,
        })
    }
}

/// `y_r = x_r W_r - x_i W_i + b_r`, `y_i = x_r W_i + x_i W_r + b_i`.
pub fn complex_fc(tape: &mut Tape, x_r: Var, x_i: Var, fc: &ComplexFc) -> Result<(Var, Var)> {
    if tape.shape(x_r) != tape.shape(x_i) {
        return Err(Error::shape("complex_fc", tape.shape(x_r), tape.shape(x_i)));
    }
    let rr = tape.matmul(x_r, fc.w_r)?;
    let ii = tape.matmul(x_i, fc.w_i)?;
    let ri = tape.matmul(x_r, fc.w_i)?;
    let ir = tape.matmul(x_i, fc.w_r)?;
    let y_r = tape.sub(rr, ii)?;
    let y_r = tape.add(y_r, fc.b_r)?;
    let y_i = tape.add(ri, ir)?;
    let y_i = tape.add(y_i, fc.b_i)?;
    Ok((y_r, y_i))
}

/// One attention block with its residual layer norm.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub attn: AttentionParams,
    pub ln: LayerNorm,
}

impl AttentionBlock {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, sigma: f64, rng: &mut impl Rng) -> Result<()> {
        cfg.init(store, &format!("{prefix}.attn"), sigma, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln"), cfg.model_dim);
        Ok(())
    }

    fn bind(bound: &Bound, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(AttentionBlock {
            attn: AttentionParams::bind(bound, &format!("{prefix}.attn"), cfg)?,
            ln: LayerNorm::bind(bound, &format!("{prefix}.ln"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ComplexLayerParams {
    pub real: AttentionBlock,
    pub imag: AttentionBlock,
    /// Queries from the real path, keys and values from the imaginary path.
    pub cross_l: AttentionBlock,
    /// Queries from the imaginary path, keys and values from the real path.
    pub cross_r: AttentionBlock,
    pub cfc: ComplexFc,
}

impl ComplexLayerParams {
    /// Parameters `{prefix}.{real,imag,cross_l,cross_r}.{attn,ln}.*` and
    /// `{prefix}.cfc.*`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for part in ["real", "imag", "cross_l", "cross_r"] {
            AttentionBlock::init(store, &format!("{prefix}.{part}"), cfg, sigma, rng)?;
        }
        ComplexFc::init(store, &format!("{prefix}.cfc"), cfg.model_dim, cfg.model_dim, rng);
        Ok(())
    }

    pub fn bind(bound: &Bound, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        let block = |part: &str| AttentionBlock::bind(bound, &format!("{prefix}.{part}"), cfg);
        Ok(ComplexLayerParams {
            real: block("real")?,
            imag: block("imag")?,
            cross_l: block("cross_l")?,
            cross_r: block("cross_r")?,
            cfc: ComplexFc::bind(bound, &format!("{prefix}.cfc"))?,
        })
    }
}

/// Self-attention on each path, cross attention between the normalized
/// paths, then a complex fully connected layer.
pub fn complex_layer(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    p: &ComplexLayerParams,
    h_r: Var,
    h_i: Var,
    eps: f64,
) -> Result<(Var, Var)> {
    if tape.shape(h_r) != tape.shape(h_i) {
        return Err(Error::shape("complex_layer", tape.shape(h_r), tape.shape(h_i)));
    }
    let a_r = gsa_attention(tape, cfg, &p.real.attn, h_r)?.output;
    let sum_r = tape.add(h_r, a_r)?;
    let n1_r = p.real.ln.apply(tape, sum_r, eps)?;
    let a_i = gsa_attention(tape, cfg, &p.imag.attn, h_i)?.output;
    let sum_i = tape.add(h_i, a_i)?;
    let n1_i = p.imag.ln.apply(tape, sum_i, eps)?;

    let c_l = multi_head_attention(tape, cfg, &p.cross_l.attn, n1_r, n1_i)?.output;
    let sum_l = tape.add(n1_r, c_l)?;
    let n2_r = p.cross_l.ln.apply(tape, sum_l, eps)?;
    let c_r = multi_head_attention(tape, cfg, &p.cross_r.attn, n1_i, n1_r)?.output;
    let sum_rr = tape.add(n1_i, c_r)?;
    let n2_i = p.cross_r.ln.apply(tape, sum_rr, eps)?;

    complex_fc(tape, n2_r, n2_i, &p.cfc)
}

#[derive(Clone, Debug)]
pub struct ComplexParams {
    pub in_r: Affine,
    pub in_i: Affine,
    pub layers: Vec<ComplexLayerParams>,
    pub out_r: Affine,
    pub out_i: Affine,
}

/// Adds `complex.in_{r,i}.*`, `complex.layers.<l>.*` and `complex.out_{r,i}.*`.
pub fn init_complex(store: &mut ParamStore, spec: &ModelSpec, sigma_init: f64, rng: &mut impl Rng) -> Result<()> {
    let cfg = spec.attention()?;
    Affine::init(store, "complex.in_r", spec.input_dim, spec.model_dim, rng);
    Affine::init(store, "complex.in_i", spec.input_dim, spec.model_dim, rng);
    for l in 0..spec.num_layers {
        ComplexLayerParams::init(store, &format!("complex.layers.{l}"), &cfg, sigma_init, rng)?;
    }
    Affine::init(store, "complex.out_r", spec.model_dim, spec.input_dim, rng);
    Affine::init(store, "complex.out_i", spec.model_dim, spec.input_dim, rng);
    Ok(())
}

impl ComplexParams {
    pub fn bind(bound: &Bound, spec: &ModelSpec) -> Result<Self> {
        let cfg = spec.attention()?;
        Ok(ComplexParams {
            in_r: Affine::bind(bound, "complex.in_r")?,
            in_i: Affine::bind(bound, "complex.in_i")?,
            layers: (0..spec.num_layers)
                .map(|l| ComplexLayerParams::bind(bound, &format!("complex.layers.{l}"), &cfg))
                .collect::<Result<_>>()?,
            out_r: Affine::bind(bound, "complex.out_r")?,
            out_i: Affine::bind(bound, "complex.out_i")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ComplexMask {
    pub m_r: Var,
    pub m_i: Var,
}

/// Unbounded complex mask `[B, T, F]` from the noisy real and imaginary
/// planes `[B, T, F]`.
pub fn predict_complex_mask(
    tape: &mut Tape,
    spec: &ModelSpec,
    p: &ComplexParams,
    y_r: Var,
    y_i: Var,
) -> Result<ComplexMask> {
    let shape = tape.shape(y_r).to_vec();
    if shape.len() != 3 || shape[2] != spec.input_dim || tape.shape(y_i) != shape.as_slice() {
        return Err(Error::shape("predict_complex_mask", &shape, tape.shape(y_i)));
    }
    let cfg = spec.attention()?;
    let x_r = spec.input_compression.apply(tape, y_r)?;
    let x_i = spec.input_compression.apply(tape, y_i)?;
    let mut h_r = p.in_r.apply(tape, x_r)?;
    let mut h_i = p.in_i.apply(tape, x_i)?;
    if spec.positional_encoding {
        let pe = tape.constant(sinusoidal_encoding(shape[1], spec.model_dim));
        h_r = tape.add(h_r, pe)?;
        h_i = tape.add(h_i, pe)?;
    }
    for layer in &p.layers {
        (h_r, h_i) = complex_layer(tape, &cfg, layer, h_r, h_i, spec.layer_norm_eps)?;
    }
    Ok(ComplexMask {
        m_r: p.out_r.apply(tape, h_r)?,
        m_i: p.out_i.apply(tape, h_i)?,
    })
}

/// `X_r = |Y_r| M_r - |Y_i| M_i`, `X_i = |Y_r| M_i + |Y_i| M_r`.
///
/// With `signed` the component magnitudes are replaced by `Y_r`, `Y_i`
/// themselves, giving the ordinary complex product `Y M`.
pub fn apply_complex_mask(tape: &mut Tape, y_r: Var, y_i: Var, m: &ComplexMask, signed: bool) -> Result<(Var, Var)> {
    let shape = tape.shape(y_r).to_vec();
    for v in [y_i, m.m_r, m.m_i] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape("apply_complex_mask", &shape, tape.shape(v)));
        }
    }
    let (a, b) = if signed {
        (y_r, y_i)
    } else {
        (tape.abs(y_r), tape.abs(y_i))
    };
    let am_r = tape.mul(a, m.m_r)?;
    let bm_i = tape.mul(b, m.m_i)?;
    let am_i = tape.mul(a, m.m_i)?;
    let bm_r = tape.mul(b, m.m_r)?;
    Ok((tape.sub(am_r, bm_i)?, tape.add(am_i, bm_r)?))
}
