//! Deterministic synthetic clean/noise signals and paired datasets on disk.
//!
//! A dataset directory holds `clean/<id>.wav`, `noisy/<id>.wav` and a
//! `manifest.tsv` with columns `id`, `clean`, `noisy`, `snr_db` (paths
//! relative to the directory).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::{mix, wav, Waveform};

/// Largest absolute sample value after joint normalization.
pub const PEAK: f64 = 0.9;
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CleanKind {
    /// Sums of amplitude-modulated linear chirps.
    ChirpMixture,
    /// Sequences of short harmonic notes with vibrato.
    HarmonicTones,
    /// Brief resonant noise bursts; correlated over a few milliseconds only.
    FilteredNoiseBursts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    /// Several overlapping harmonic "talkers".
    BabbleSurrogate,
}

macro_rules! named_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

named_enum!(CleanKind, "clean kind",
    CleanKind::ChirpMixture => "chirp-mixture",
    CleanKind::HarmonicTones => "harmonic-tones",
    CleanKind::FilteredNoiseBursts => "filtered-noise-bursts");

named_enum!(NoiseKind, "noise kind",
    NoiseKind::White => "white",
    NoiseKind::Pink => "pink",
    NoiseKind::BabbleSurrogate => "babble-surrogate");

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecipe {
    pub num_utterances: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
    pub snr_db: Vec<f64>,
}

impl SynthRecipe {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 || self.snr_db.is_empty() {
            return Err(Error::Config("recipe needs at least one utterance and one snr".into()));
        }
        if self.sample_rate == 0 || self.samples() == 0 {
            return Err(Error::Config(format!(
                "duration {} s at {} Hz gives no samples",
                self.duration_s, self.sample_rate
            )));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr values must be finite".into()));
        }
        Ok(())
    }
}

/// One clean/noisy pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn raised_cosine(t: f64, ramp: f64, len: f64) -> f64 {
    if t < 0.0 || t > len {
        0.0
    } else if t < ramp {
        0.5 * (1.0 - (PI * t / ramp).cos())
    } else if t > len - ramp {
        0.5 * (1.0 - (PI * (len - t) / ramp).cos())
    } else {
        1.0
    }
}

fn chirp_mixture(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let dur = n as f64 / sr;
    for _ in 0..rng.gen_range(2..=3) {
        let f0 = rng.gen_range(150.0..2500.0);
        let f1 = rng.gen_range(150.0..2500.0);
        let amp = rng.gen_range(0.2..1.0);
        let rate = rng.gen_range(2.0..5.0);
        let psi = rng.gen_range(0.0..2.0 * PI);
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let phase = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
            let env = 0.5 * (1.0 - (2.0 * PI * rate * t + psi).cos());
            *o += amp * env * phase.sin();
        }
    }
    out
}

fn harmonic_tones(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let dur = n as f64 / sr;
    let mut start = rng.gen_range(0.0..0.05);
    while start < dur {
        let len = rng.gen_range(0.12..0.35);
        let f0 = rng.gen_range(110.0..280.0);
        let harmonics = ((4000.0 / f0) as usize).clamp(1, 10);
        let vib = rng.gen_range(4.0..6.0);
        let first = (start * sr) as usize;
        let last = (((start + len) * sr) as usize).min(n);
        let mut phase = 0.0;
        for (i, o) in out.iter_mut().enumerate().take(last).skip(first) {
            let t = i as f64 / sr - start;
            let f = f0 * (1.0 + 0.02 * (2.0 * PI * vib * t).sin());
            phase += 2.0 * PI * f / sr;
            let env = raised_cosine(t, 0.01, len);
            let s: f64 = (1..=harmonics).map(|k| (k as f64 * phase).sin() / k as f64).sum();
            *o += env * s;
        }
        start += len + rng.gen_range(0.03..0.12);
    }
    out
}

fn filtered_noise_bursts(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let dur = n as f64 / sr;
    let mut start = rng.gen_range(0.0..0.02);
    while start < dur {
        let len = rng.gen_range(0.015..0.06);
        let fc: f64 = rng.gen_range(300.0..3000.0);
        let r: f64 = 0.98;
        let (a1, a2) = (2.0 * r * (2.0 * PI * fc / sr).cos(), -r * r);
        let (mut y1, mut y2) = (0.0, 0.0);
        let first = (start * sr) as usize;
        let last = (((start + len) * sr) as usize).min(n);
        for (i, o) in out.iter_mut().enumerate().take(last).skip(first) {
            let x: f64 = rng.sample(StandardNormal);
            let y = (1.0 - r) * x + a1 * y1 + a2 * y2;
            (y2, y1) = (y1, y);
            let t = i as f64 / sr - start;
            *o += (PI * t / len).sin().powi(2) * y;
        }
        start += len + rng.gen_range(0.02..0.12);
    }
    out
}

pub fn clean_signal(kind: CleanKind, n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    match kind {
        CleanKind::ChirpMixture => chirp_mixture(n, sr, rng),
        CleanKind::HarmonicTones => harmonic_tones(n, sr, rng),
        CleanKind::FilteredNoiseBursts => filtered_noise_bursts(n, sr, rng),
    }
}

fn rms_normalized(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

pub fn noise_signal(kind: NoiseKind, n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::Pink => {
            // Kellet's economy filter on white noise
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::BabbleSurrogate => {
            let mut out = vec![0.0; n];
            for _ in 0..6 {
                let talker = rms_normalized(harmonic_tones(n, sample_rate as f64, rng));
                let level = rng.gen_range(0.5..1.0);
                out.iter_mut().zip(talker).for_each(|(o, t)| *o += level * t);
            }
            out
        }
    }
}

/// Scales both signals by the same factor so neither exceeds [`PEAK`].
fn normalize_jointly(clean: &mut [f64], noisy: &mut [f64]) {
    let peak = clean.iter().chain(noisy.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK {
        let g = PEAK / peak;
        clean.iter_mut().chain(noisy.iter_mut()).for_each(|v| *v *= g);
    }
}

/// All `num_utterances x |snr_db|` pairs of a recipe. `stream` separates
/// independent splits drawn from the same seed.
pub fn synthesize(recipe: &SynthRecipe, seed: u64, stream: u64) -> Result<Vec<Utterance>> {
    recipe.validate()?;
    let n = recipe.samples();
    let sr = recipe.sample_rate;
    let per_utt: Vec<Result<Vec<Utterance>>> = (0..recipe.num_utterances)
        .into_par_iter()
        .map(|u| {
            let mut rng = stream_rng(seed, (stream << 32) | u as u64);
            let clean = Waveform::new(clean_signal(recipe.clean_kind, n, sr, &mut rng), sr)?;
            let noise = Waveform::new(noise_signal(recipe.noise_kind, n, sr, &mut rng), sr)?;
            recipe
                .snr_db
                .iter()
                .map(|&snr| {
                    let mut noisy = mix(&clean, &noise, snr)?.samples;
                    let mut c = clean.samples.clone();
                    normalize_jointly(&mut c, &mut noisy);
                    Ok(Utterance {
                        id: format!("u{u:04}_snr{snr}"),
                        clean: Waveform::new(c, sr)?,
                        noisy: Waveform::new(noisy, sr)?,
                        snr_db: snr,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_utt {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub snr_db: f64,
}

/// Writes WAVs and the manifest under `dir`.
pub fn write_dataset(dir: &Path, utterances: &[Utterance]) -> Result<Vec<ManifestEntry>> {
    for sub in ["clean", "noisy"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries: Vec<ManifestEntry> = utterances
        .par_iter()
        .map(|u| {
            let clean = PathBuf::from("clean").join(format!("{}.wav", u.id));
            let noisy = PathBuf::from("noisy").join(format!("{}.wav", u.id));
            wav::write(dir.join(&clean), &u.clean)?;
            wav::write(dir.join(&noisy), &u.noisy)?;
            Ok(ManifestEntry {
                id: u.id.clone(),
                clean,
                noisy,
                snr_db: u.snr_db,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::from("id\tclean\tnoisy\tsnr_db\n");
    for e in &entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.clean.display(),
            e.noisy.display(),
            e.snr_db
        ));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("id\tclean\tnoisy\tsnr_db") {
        return Err(Error::Config(format!("{}: bad manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("{}: bad manifest row {l:?}", path.display())));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                clean: PathBuf::from(f[1]),
                noisy: PathBuf::from(f[2]),
                snr_db: f[3]
                    .parse()
                    .map_err(|_| Error::Config(format!("{}: bad snr {:?}", path.display(), f[3])))?,
            })
        })
        .collect()
}

/// Reads every pair listed in `dir`'s manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<Utterance>> {
    read_manifest(dir)?
        .into_par_iter()
        .map(|e| {
            Ok(Utterance {
                clean: wav::read(dir.join(&e.clean))?,
                noisy: wav::read(dir.join(&e.noisy))?,
                id: e.id,
                snr_db: e.snr_db,
            })
        })
        .collect()
}
