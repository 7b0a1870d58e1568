//! Model description, parameter initialization and the per-utterance
//! forward pass from a noisy spectrogram to an estimated waveform.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionScheme};
use crate::checkpoint::Checkpoint;
use crate::complex::{self, ComplexParams};
use crate::encoder::{self, RealEncoderParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::signal::{istft, stft, tape_istft, unit_phase, Spectrogram, StftBasis, StftConfig, Waveform};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Magnitude mask from a stack of encoder layers; noisy phase is reused.
    RealEncoder,
    /// Dual real/imaginary paths producing a complex mask.
    ComplexDecoder,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::RealEncoder => "real",
            Topology::ComplexDecoder => "complex",
        })
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "real" | "real-encoder" | "encoder" => Ok(Topology::RealEncoder),
            "complex" | "complex-decoder" => Ok(Topology::ComplexDecoder),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

/// Elementwise transform applied to network inputs before the first
/// projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputCompression {
    None,
    /// `sign(x) ln(1 + |x|)`
    Log1p,
}

impl fmt::Display for InputCompression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputCompression::None => "none",
            InputCompression::Log1p => "log1p",
        })
    }
}

impl FromStr for InputCompression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InputCompression::None),
            "log1p" => Ok(InputCompression::Log1p),
            other => Err(Error::Config(format!("unknown input compression {other:?}"))),
        }
    }
}

impl InputCompression {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            InputCompression::None => Ok(x),
            InputCompression::Log1p => {
                let sign = tape.value(x).map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                let a = tape.abs(x);
                let a1 = tape.add_scalar(a, 1.0);
                let l = tape.ln(a1);
                let s = tape.constant(sign);
                tape.mul(l, s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub topology: Topology,
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Frequency bins per frame.
    pub input_dim: usize,
    pub scheme: AttentionScheme,
    /// `None` follows the scheme's default.
    pub abs_scores: Option<bool>,
    pub per_head_sigma: bool,
    pub sigma_min: f64,
    /// Initial attention width; `None` uses a quarter of the training
    /// sequence length in frames.
    pub sigma_init: Option<f64>,
    pub positional_encoding: bool,
    /// Unbounded mask for the real model instead of a sigmoid.
    pub linear_mask: bool,
    /// Use signed `Y_r`, `Y_i` in the complex mask instead of magnitudes.
    pub complex_mask_signed: bool,
    pub input_compression: InputCompression,
    pub layer_norm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk(Topology::RealEncoder, AttentionScheme::GaussianWeighted)
    }
}

impl ModelSpec {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(topology: Topology, scheme: AttentionScheme) -> Self {
        ModelSpec {
            topology,
            num_layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            input_dim: 129,
            scheme,
            abs_scores: None,
            per_head_sigma: false,
            sigma_min: 0.1,
            sigma_init: None,
            positional_encoding: false,
            linear_mask: false,
            complex_mask_signed: false,
            input_compression: InputCompression::None,
            layer_norm_eps: 1e-5,
        }
    }

    /// Full-size reference configuration: 10 encoder layers for the real
    /// model, 6 for the complex one, width 1024.
    pub fn reference(topology: Topology, scheme: AttentionScheme) -> Self {
        ModelSpec {
            num_layers: match topology {
                Topology::RealEncoder => 10,
                Topology::ComplexDecoder => 6,
            },
            model_dim: 1024,
            heads: 8,
            ff_dim: 4096,
            ..Self::desk(topology, scheme)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("model.layers must be >= 1".into());
        }
        if self.input_dim == 0 {
            return fail("model.input_dim must be >= 1".into());
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model.dim {} must be a positive multiple of model.heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ff_dim < self.model_dim {
            return fail(format!(
                "model.ff_dim {} must be >= model.dim {}",
                self.ff_dim, self.model_dim
            ));
        }
        if !(self.sigma_min > 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("model.sigma_min and model.layer_norm_eps must be > 0".into());
        }
        if let Some(s) = self.sigma_init {
            if !(s > self.sigma_min) {
                return fail(format!(
                    "model.sigma_init {s} must exceed model.sigma_min {}",
                    self.sigma_min
                ));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::new(self.model_dim, self.heads, self.scheme)?;
        cfg.abs_scores = self.abs_enabled();
        cfg.per_head_sigma = self.per_head_sigma;
        cfg.sigma_min = self.sigma_min;
        Ok(cfg)
    }

    /// Initial sigma for sequences of `frames` frames.
    pub fn initial_sigma(&self, frames: usize) -> f64 {
        self.sigma_init
            .unwrap_or_else(|| (frames as f64 / 4.0).max(2.0 * self.sigma_min))
    }

    pub fn abs_enabled(&self) -> bool {
        self.abs_scores.unwrap_or_else(|| self.scheme.default_abs())
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for model.{key}")))
        }
        match key {
            "topology" => self.topology = value.parse()?,
            "layers" => self.num_layers = parse(key, value)?,
            "dim" => self.model_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "scheme" => self.scheme = value.parse()?,
            "abs_scores" => {
                self.abs_scores = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "per_head_sigma" => self.per_head_sigma = parse(key, value)?,
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "sigma_init" => {
                self.sigma_init = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "positional_encoding" => self.positional_encoding = parse(key, value)?,
            "linear_mask" => self.linear_mask = parse(key, value)?,
            "complex_mask_signed" => self.complex_mask_signed = parse(key, value)?,
            "input_compression" => self.input_compression = value.parse()?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key model.{other}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` pairs, accepted back by [`ModelSpec::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("topology", self.topology.to_string()),
            ("layers", self.num_layers.to_string()),
            ("dim", self.model_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("scheme", self.scheme.to_string()),
            (
                "abs_scores",
                self.abs_scores.map_or_else(|| "auto".to_string(), |a| a.to_string()),
            ),
            ("per_head_sigma", self.per_head_sigma.to_string()),
            ("sigma_min", self.sigma_min.to_string()),
            (
                "sigma_init",
                self.sigma_init.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            ),
            ("positional_encoding", self.positional_encoding.to_string()),
            ("linear_mask", self.linear_mask.to_string()),
            ("complex_mask_signed", self.complex_mask_signed.to_string()),
            ("input_compression", self.input_compression.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
        ]
    }

    /// `model.`-prefixed entries for a checkpoint header.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect()
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let mut spec = ModelSpec::default();
        let mut seen = false;
        for (k, v) in meta {
            if let Some(key) = k.strip_prefix("model.") {
                spec.set(key, v)?;
                seen = true;
            }
        }
        if !seen {
            return Err(Error::Checkpoint("checkpoint has no model description".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// A model description together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

enum BoundNet {
    Real(RealEncoderParams),
    Complex(ComplexParams),
}

impl Model {
    /// Fresh parameters; `frames` is the training sequence length used for
    /// the automatic sigma initialization.
    pub fn init(spec: ModelSpec, frames: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let sigma = spec.initial_sigma(frames);
        match spec.topology {
            Topology::RealEncoder => encoder::init_real_encoder(&mut params, &spec, sigma, rng)?,
            Topology::ComplexDecoder => complex::init_complex(&mut params, &spec, sigma, rng)?,
        }
        Ok(Model { spec, params })
    }

    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut meta = self.spec.to_meta();
        meta.extend(extra.iter().cloned());
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::from_meta(&c.meta)?;
        let mut reference = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match spec.topology {
            Topology::RealEncoder => encoder::init_real_encoder(&mut reference, &spec, 1.0, &mut rng)?,
            Topology::ComplexDecoder => complex::init_complex(&mut reference, &spec, 1.0, &mut rng)?,
        }
        for (name, t) in reference.iter() {
            let got = c
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if c.params.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                c.params.len(),
                reference.len()
            )));
        }
        Ok(Model {
            spec,
            params: c.params.clone(),
        })
    }

    /// Names of the attention width parameters.
    pub fn sigma_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.ends_with(".sigma_raw"))
            .map(str::to_string)
            .collect()
    }

    fn bind_net(&self, bound: &Bound) -> Result<BoundNet> {
        Ok(match self.spec.topology {
            Topology::RealEncoder => BoundNet::Real(RealEncoderParams::bind(bound, &self.spec)?),
            Topology::ComplexDecoder => BoundNet::Complex(ComplexParams::bind(bound, &self.spec)?),
        })
    }

    /// Estimated clean spectrum `(real, imag)`, each `[T, F]`, from a noisy
    /// spectrogram.
    pub fn estimate_spectrum(&self, tape: &mut Tape, bound: &Bound, noisy: &Spectrogram) -> Result<(Var, Var)> {
        let (t, f) = (noisy.frames(), noisy.bins());
        if f != self.spec.input_dim {
            return Err(Error::shape("estimate_spectrum", &[t, f], &[t, self.spec.input_dim]));
        }
        match self.bind_net(bound)? {
            BoundNet::Real(p) => {
                let mag = noisy.magnitude().reshape([1, t, f])?;
                let mag = tape.constant(mag);
                let mask = encoder::predict_mask(tape, &self.spec, &p, mag)?;
                let est = encoder::apply_mask(tape, mag, mask)?;
                let est = tape.reshape(est, &[t, f])?;
                let (cos, sin) = unit_phase(noisy);
                let cos = tape.constant(cos);
                let sin = tape.constant(sin);
                Ok((tape.mul(est, cos)?, tape.mul(est, sin)?))
            }
            BoundNet::Complex(p) => {
                let yr = tape.constant(noisy.real.reshape([1, t, f])?);
                let yi = tape.constant(noisy.imag.reshape([1, t, f])?);
                let m = complex::predict_complex_mask(tape, &self.spec, &p, yr, yi)?;
                let (xr, xi) = complex::apply_complex_mask(tape, yr, yi, &m, self.spec.complex_mask_signed)?;
                Ok((tape.reshape(xr, &[t, f])?, tape.reshape(xi, &[t, f])?))
            }
        }
    }

    /// Estimated waveform `[len]` on the tape, through the differentiable
    /// inverse STFT.
    pub fn estimate_waveform(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        noisy: &Spectrogram,
        basis: &StftBasis,
    ) -> Result<Var> {
        let (re, im) = self.estimate_spectrum(tape, bound, noisy)?;
        tape_istft(tape, basis, re, im)
    }

    /// Inference: denoise a waveform without recording gradients.
    pub fn enhance(&self, noisy: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
        let spec = stft(noisy, cfg)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_with(&mut tape, |_| false);
        let (re, im) = self.estimate_spectrum(&mut tape, &bound, &spec)?;
        let out = spec.with_planes(tape.value(re).clone(), tape.value(im).clone())?;
        istft(&out, noisy.sample_rate)
    }

    /// Mask values for the real model on a noisy spectrogram, `[T, F]`.
    pub fn real_mask(&self, noisy: &Spectrogram) -> Result<Tensor> {
        if self.spec.topology != Topology::RealEncoder {
            return Err(Error::Contract("real_mask needs the real topology".into()));
        }
        let (t, f) = (noisy.frames(), noisy.bins());
        let mut tape = Tape::new();
        let bound = self.params.bind_with(&mut tape, |_| false);
        let p = RealEncoderParams::bind(&bound, &self.spec)?;
        let mag = tape.constant(noisy.magnitude().reshape([1, t, f])?);
        let mask = encoder::predict_mask(&mut tape, &self.spec, &p, mag)?;
        tape.value(mask).reshape([t, f])
    }
}
