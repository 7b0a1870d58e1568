//! The real denoiser: a stack of post-norm Transformer encoder layers that
//! maps a noisy magnitude spectrogram to a time-frequency mask.

use rand::Rng;

use crate::attention::{gsa_attention, AttentionConfig, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_encoding, Affine, LayerNorm};
use crate::model::ModelSpec;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ff1: Affine,
    pub ff2: Affine,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl EncoderLayerParams {
    /// Parameters `{prefix}.attn.*`, `{prefix}.ff1.*`, `{prefix}.ff2.*`,
    /// `{prefix}.ln1.*` and `{prefix}.ln2.*`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        attn: &AttentionConfig,
        ff_dim: usize,
        sigma_init: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = attn.model_dim;
        attn.init(store, &format!("{prefix}.attn"), sigma_init, rng)?;
        Affine::init(store, &format!("{prefix}.ff1"), d, ff_dim, rng);
        Affine::init(store, &format!("{prefix}.ff2"), ff_dim, d, rng);
        LayerNorm::init(store, &format!("{prefix}.ln1"), d);
        LayerNorm::init(store, &format!("{prefix}.ln2"), d);
        Ok(())
    }

    pub fn bind(bound: &Bound, prefix: &str, attn: &AttentionConfig) -> Result<Self> {
        Ok(EncoderLayerParams {
            attn: AttentionParams::bind(bound, &format!("{prefix}.attn"), attn)?,
            ff1: Affine::bind(bound, &format!("{prefix}.ff1"))?,
            ff2: Affine::bind(bound, &format!("{prefix}.ff2"))?,
            ln1: LayerNorm::bind(bound, &format!("{prefix}.ln1"))?,
            ln2: LayerNorm::bind(bound, &format!("{prefix}.ln2"))?,
        })
    }
}

/// `x1 = LN(h + attn(h))`, `out = LN(x1 + FF2(relu(FF1(x1))))`.
pub fn encoder_layer(tape: &mut Tape, cfg: &AttentionConfig, p: &EncoderLayerParams, h: Var, eps: f64) -> Result<Var> {
    let a = gsa_attention(tape, cfg, &p.attn, h)?.output;
    let r1 = tape.add(h, a)?;
    let x1 = p.ln1.apply(tape, r1, eps)?;
    let f1 = p.ff1.apply(tape, x1)?;
    let f1 = tape.relu(f1);
    let f2 = p.ff2.apply(tape, f1)?;
    let r2 = tape.add(x1, f2)?;
    p.ln2.apply(tape, r2, eps)
}

#[derive(Clone, Debug)]
pub struct RealEncoderParams {
    pub input: Affine,
    pub layers: Vec<EncoderLayerParams>,
    pub output: Affine,
}

/// Adds `in.*`, `layers.<l>.*` and `out.*` to `store`.
pub fn init_real_encoder(store: &mut ParamStore, spec: &ModelSpec, sigma_init: f64, rng: &mut impl Rng) -> Result<()> {
    let attn = spec.attention()?;
    Affine::init(store, "in", spec.input_dim, spec.model_dim, rng);
    for l in 0..spec.num_layers {
        EncoderLayerParams::init(store, &format!("layers.{l}"), &attn, spec.ff_dim, sigma_init, rng)?;
    }
    Affine::init(store, "out", spec.model_dim, spec.input_dim, rng);
    Ok(())
}

impl RealEncoderParams {
    pub fn bind(bound: &Bound, spec: &ModelSpec) -> Result<Self> {
        let attn = spec.attention()?;
        Ok(RealEncoderParams {
            input: Affine::bind(bound, "in")?,
            layers: (0..spec.num_layers)
                .map(|l| EncoderLayerParams::bind(bound, &format!("layers.{l}"), &attn))
                .collect::<Result<_>>()?,
            output: Affine::bind(bound, "out")?,
        })
    }
}

/// Mask `[B, T, F]` for a noisy magnitude spectrogram `[B, T, F]`.
pub fn predict_mask(tape: &mut Tape, spec: &ModelSpec, p: &RealEncoderParams, noisy_mag: Var) -> Result<Var> {
    let shape = tape.shape(noisy_mag).to_vec();
    if shape.len() != 3 || shape[2] != spec.input_dim {
        return Err(Error::shape("predict_mask", &shape, &[0, 0, spec.input_dim]));
    }
    if let Some(bad) = tape.value(noisy_mag).data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("magnitudes must be nonnegative, found {bad}")));
    }
    let attn = spec.attention()?;
    let x = spec.input_compression.apply(tape, noisy_mag)?;
    let mut h = p.input.apply(tape, x)?;
    if spec.positional_encoding {
        let pe = tape.constant(sinusoidal_encoding(shape[1], spec.model_dim));
        h = tape.add(h, pe)?;
    }
    for layer in &p.layers {
        h = encoder_layer(tape, &attn, layer, h, spec.layer_norm_eps)?;
    }
    let logits = p.output.apply(tape, h)?;
    Ok(if spec.linear_mask { logits } else { tape.sigmoid(logits) })
}

/// `|X| = M |Y|`.
pub fn apply_mask(tape: &mut Tape, noisy_mag: Var, mask: Var) -> Result<Var> {
    if tape.shape(noisy_mag) != tape.shape(mask) {
        return Err(Error::shape("apply_mask", tape.shape(noisy_mag), tape.shape(mask)));
    }
    tape.mul(noisy_mag, mask)
}
