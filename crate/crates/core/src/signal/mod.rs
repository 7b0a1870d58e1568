//! Waveforms, noisy-mixture construction, STFT analysis/synthesis and WAV IO.

mod stft;
pub mod wav;

pub use stft::{
    istft, recombine_with_noisy_phase, stft, tape_istft, tape_stft, unit_phase, Spectrogram, StftBasis, StftConfig,
    WindowKind,
};

use crate::error::{Error, Result};

/// Highest SNR honored by [`mix`]; larger requests (including +inf) are capped.
pub const MAX_SNR_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `clean + g * noise` with `g` chosen so that
/// `10 log10(E_clean / E(g * noise)) == snr_db`.
pub fn mix(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() {
        return Err(Error::Domain(format!(
            "clean and noise lengths differ: {} vs {}",
            clean.len(),
            noise.len()
        )));
    }
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Domain(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if snr_db.is_nan() {
        return Err(Error::Domain("snr_db is NaN".into()));
    }
    let (ec, en) = (clean.energy(), noise.energy());
    if ec == 0.0 {
        return Err(Error::Domain("clean signal has zero energy".into()));
    }
    if en == 0.0 {
        return Err(Error::Domain("noise signal has zero energy".into()));
    }
    let snr = snr_db.min(MAX_SNR_DB);
    let gain = (ec / (en * 10f64.powf(snr / 10.0))).sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(c, n)| c + gain * n)
        .collect();
    Waveform::new(samples, clean.sample_rate)
}

/// `10 log10(E_clean / E(noisy - clean))`.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let residual: f64 = clean.iter().zip(noisy).map(|(c, y)| (y - c) * (y - c)).sum();
    10.0 * (energy(clean) / residual).log10()
}
