//! Short-time Fourier transform with Hann windows and reflection padding.
//!
//! Frames start at `t * hop - fft_size / 2` in the original signal; indices
//! outside the signal are reflected back in. The frame count is
//! `ceil(len / hop)`, so it depends only on the signal length.
//!
//! Synthesis windows every inverse frame again and divides the overlap-add
//! by the summed squared window, so any configuration whose hop divides the
//! frame at least twice reconstructs exactly.
//!
//! Two routes compute the same transforms: [`stft`] / [`istft`] use an FFT on
//! plain data, while [`tape_stft`] / [`tape_istft`] express the transform as
//! gathers and dense DFT matrix products on a [`Tape`] so that losses on the
//! time-domain signal backpropagate into spectral estimates.

use std::f64::consts::PI;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, NO_INDEX};

use super::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            _ => Err(Error::Config(format!("unknown window {s:?}"))),
        }
    }
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
        }
    }

    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 256,
            hop: 64,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let c = StftConfig {
            fft_size,
            hop,
            window: WindowKind::Hann,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft_size must be a power of two >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "hop must be in 1..={}, got {}",
                self.fft_size, self.hop
            )));
        }
        Ok(())
    }

    /// Overlap-add inversion needs `fft_size / hop` to be an integer >= 2.
    pub fn check_invertible(&self) -> Result<()> {
        self.validate()?;
        if !self.fft_size.is_multiple_of(self.hop) || self.fft_size / self.hop < 2 {
            return Err(Error::Config(format!(
                "hop {} does not satisfy the overlap-add condition for a {}-point hann window",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Source sample for every `(frame, n)` position, row-major `[T, N]`.
    fn frame_indices(&self, len: usize) -> Vec<usize> {
        let n = self.fft_size;
        let half = (n / 2) as isize;
        let frames = self.frames(len);
        let mut idx = Vec::with_capacity(frames * n);
        for t in 0..frames {
            for k in 0..n {
                idx.push(reflect((t * self.hop + k) as isize - half, len));
            }
        }
        idx
    }

    /// Output sample for every `(frame, n)` position, `NO_INDEX` where the
    /// position falls in the padding.
    fn overlap_indices(&self, len: usize) -> Vec<usize> {
        let n = self.fft_size;
        let half = n / 2;
        let frames = self.frames(len);
        let mut idx = Vec::with_capacity(frames * n);
        for t in 0..frames {
            for k in 0..n {
                let p = t * self.hop + k;
                idx.push(if p >= half && p - half < len {
                    p - half
                } else {
                    NO_INDEX
                });
            }
        }
        idx
    }

    /// Summed squared synthesis window at every output sample.
    fn envelope(&self, len: usize) -> Vec<f64> {
        let w = self.window.coefficients(self.fft_size);
        let mut env = vec![0.0; len];
        for (j, &o) in self.overlap_indices(len).iter().enumerate() {
            if o != NO_INDEX {
                let wk = w[j % self.fft_size];
                env[o] += wk * wk;
            }
        }
        env
    }
}

/// Maps any integer position into `0..len` by mirror reflection without
/// repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Complex STFT frames stored as separate real and imaginary planes `[T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub orig_len: usize,
}

impl Spectrogram {
    pub fn config(&self) -> StftConfig {
        StftConfig {
            fft_size: self.fft_size,
            hop: self.hop,
            window: self.window,
        }
    }

    pub fn frames(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.real.shape()[1]
    }

    pub fn magnitude(&self) -> Tensor {
        self.real
            .zip_map(&self.imag, |r, i| r.hypot(i))
            .expect("real/imag planes share a shape")
    }

    /// Same metadata, new planes.
    pub fn with_planes(&self, real: Tensor, imag: Tensor) -> Result<Spectrogram> {
        if real.shape() != self.real.shape() || imag.shape() != self.real.shape() {
            return Err(Error::shape("spectrogram planes", real.shape(), self.real.shape()));
        }
        Ok(Spectrogram {
            real,
            imag,
            ..self.clone()
        })
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::Domain("cannot transform an empty waveform".into()));
    }
    let n = cfg.fft_size;
    let bins = cfg.bins();
    let frames = cfg.frames(w.len());
    let window = cfg.window.coefficients(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let idx = cfg.frame_indices(w.len());
    let mut real = Vec::with_capacity(frames * bins);
    let mut imag = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for k in 0..n {
            buf[k] = Complex::new(w.samples[idx[t * n + k]] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            real.push(c.re);
            imag.push(c.im);
        }
    }
    Ok(Spectrogram {
        real: Tensor::new([frames, bins], real)?,
        imag: Tensor::new([frames, bins], imag)?,
        fft_size: n,
        hop: cfg.hop,
        window: cfg.window,
        orig_len: w.len(),
    })
}

/// Overlap-add inverse. The imaginary parts of the DC and Nyquist bins are
/// ignored, as for any real-signal inverse transform.
pub fn istft(s: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
    let cfg = s.config();
    cfg.check_invertible()?;
    check_planes(s)?;
    let n = cfg.fft_size;
    let bins = cfg.bins();
    let window = cfg.window.coefficients(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let targets = cfg.overlap_indices(s.orig_len);
    let env = cfg.envelope(s.orig_len);
    let mut out = vec![0.0; s.orig_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..s.frames() {
        let re = &s.real.data()[t * bins..][..bins];
        let im = &s.imag.data()[t * bins..][..bins];
        for k in 0..bins {
            let imk = if k == 0 || k == n / 2 { 0.0 } else { im[k] };
            buf[k] = Complex::new(re[k], imk);
            if k > 0 && k < n / 2 {
                buf[n - k] = Complex::new(re[k], -imk);
            }
        }
        ifft.process(&mut buf);
        for k in 0..n {
            let o = targets[t * n + k];
            if o != NO_INDEX {
                out[o] += buf[k].re / n as f64 * window[k];
            }
        }
    }
    for (v, e) in out.iter_mut().zip(&env) {
        *v = if *e > 1e-12 { *v / e } else { 0.0 };
    }
    Waveform::new(out, sample_rate)
}

fn check_planes(s: &Spectrogram) -> Result<()> {
    let cfg = s.config();
    let expect = [cfg.frames(s.orig_len), cfg.bins()];
    if s.real.shape() != expect || s.imag.shape() != expect {
        return Err(Error::shape("spectrogram", s.real.shape(), &expect));
    }
    Ok(())
}

/// `clean_mag * (noisy / |noisy|)`, with `|noisy|` floored at `1e-12`.
pub fn recombine_with_noisy_phase(clean_mag: &Tensor, noisy: &Spectrogram) -> Result<Spectrogram> {
    if clean_mag.shape() != noisy.real.shape() {
        return Err(Error::shape(
            "recombine_with_noisy_phase",
            clean_mag.shape(),
            noisy.real.shape(),
        ));
    }
    let (cos, sin) = unit_phase(noisy);
    noisy.with_planes(
        clean_mag.zip_map(&cos, |m, c| m * c)?,
        clean_mag.zip_map(&sin, |m, s| m * s)?,
    )
}

/// Unit-modulus phase planes of a spectrogram.
pub fn unit_phase(s: &Spectrogram) -> (Tensor, Tensor) {
    let mag = s.magnitude().map(|m| m.max(1e-12));
    (
        s.real.zip_map(&mag, |r, m| r / m).unwrap(),
        s.imag.zip_map(&mag, |i, m| i / m).unwrap(),
    )
}

/// Dense DFT matrices and index maps for one `(config, length)` pair.
#[derive(Clone, Debug)]
pub struct StftBasis {
    pub cfg: StftConfig,
    pub len: usize,
    window: Tensor,
    /// `[N, F]` forward basis: real part `cos`, imaginary part `-sin`.
    fwd_cos: Tensor,
    fwd_sin: Tensor,
    /// `[F, N]` inverse basis including the one-sided doubling and `1/N`.
    inv_cos: Tensor,
    inv_sin: Tensor,
    frame_idx: Vec<usize>,
    ola_idx: Vec<usize>,
    inv_env: Tensor,
}

impl StftBasis {
    pub fn new(cfg: StftConfig, len: usize) -> Result<Self> {
        cfg.validate()?;
        if len == 0 {
            return Err(Error::Domain("cannot transform an empty waveform".into()));
        }
        let n = cfg.fft_size;
        let f = cfg.bins();
        let angle = |k: usize, t: usize| 2.0 * PI * ((k * t) % n) as f64 / n as f64;
        let fwd_cos = Tensor::from_fn([n, f], |i| angle(i[1], i[0]).cos());
        let fwd_sin = Tensor::from_fn([n, f], |i| -angle(i[1], i[0]).sin());
        let weight = |k: usize| if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
        let inv_cos = Tensor::from_fn([f, n], |i| weight(i[0]) * angle(i[0], i[1]).cos());
        let inv_sin = Tensor::from_fn([f, n], |i| -weight(i[0]) * angle(i[0], i[1]).sin());
        let env = cfg.envelope(len);
        let inv_env = Tensor::new(
            [len],
            env.iter().map(|&e| if e > 1e-12 { 1.0 / e } else { 0.0 }).collect(),
        )?;
        Ok(StftBasis {
            window: Tensor::new([n], cfg.window.coefficients(n))?,
            fwd_cos,
            fwd_sin,
            inv_cos,
            inv_sin,
            frame_idx: cfg.frame_indices(len),
            ola_idx: cfg.overlap_indices(len),
            inv_env,
            cfg,
            len,
        })
    }

    pub fn frames(&self) -> usize {
        self.cfg.frames(self.len)
    }
}

/// STFT of a `[len]` signal on the tape; returns `(real, imag)` planes `[T, F]`.
pub fn tape_stft(tape: &mut Tape, basis: &StftBasis, x: Var) -> Result<(Var, Var)> {
    if tape.shape(x) != [basis.len] {
        return Err(Error::shape("tape_stft", tape.shape(x), &[basis.len]));
    }
    let frames = tape.gather(x, basis.frame_idx.clone(), &[basis.frames(), basis.cfg.fft_size])?;
    let w = tape.constant(basis.window.clone());
    let windowed = tape.mul(frames, w)?;
    let c = tape.constant(basis.fwd_cos.clone());
    let s = tape.constant(basis.fwd_sin.clone());
    Ok((tape.matmul(windowed, c)?, tape.matmul(windowed, s)?))
}

/// Overlap-add inverse on the tape from `[T, F]` planes to a `[len]` signal.
pub fn tape_istft(tape: &mut Tape, basis: &StftBasis, real: Var, imag: Var) -> Result<Var> {
    basis.cfg.check_invertible()?;
    let expect = [basis.frames(), basis.cfg.bins()];
    for v in [real, imag] {
        if tape.shape(v) != expect {
            return Err(Error::shape("tape_istft", tape.shape(v), &expect));
        }
    }
    let c = tape.constant(basis.inv_cos.clone());
    let s = tape.constant(basis.inv_sin.clone());
    let a = tape.matmul(real, c)?;
    let b = tape.matmul(imag, s)?;
    let frames = tape.add(a, b)?;
    let w = tape.constant(basis.window.clone());
    let windowed = tape.mul(frames, w)?;
    let summed = tape.scatter_add(windowed, basis.ola_idx.clone(), &[basis.len])?;
    let inv_env = tape.constant(basis.inv_env.clone());
    tape.mul(summed, inv_env)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};

    fn random_wave(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn frame_count_and_bins() {
        let cfg = StftConfig::default();
        let s = stft(&random_wave(1000, 1), &cfg).unwrap();
        assert_eq!(s.real.shape(), &[16, 129]);
        assert_eq!(cfg.frames(32_000), 500);
    }

    #[test]
    fn dc_lands_in_bin_zero() {
        let w = Waveform::new(vec![0.5; 1024], 16_000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        let mag = s.magnitude();
        for t in 0..s.frames() {
            let row = &mag.data()[t * 129..][..129];
            let total: f64 = row.iter().map(|m| m * m).sum();
            // Hann leaks DC into bin 1 only
            assert!((row[0] * row[0] + row[1] * row[1]) / total > 1.0 - 1e-12);
            assert!(row[0] > row[1]);
        }
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let k0 = 20;
        let x: Vec<f64> = (0..2048)
            .map(|i| (2.0 * PI * k0 as f64 * i as f64 / 256.0).sin())
            .collect();
        let s = stft(&Waveform::new(x.clone(), 16_000).unwrap(), &cfg).unwrap();
        // interior frame: compare against a direct DFT of the windowed frame
        let t = 10;
        let start = t * cfg.hop - 128;
        let w = WindowKind::Hann.coefficients(256);
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..256 {
            let a = 2.0 * PI * (k0 * n) as f64 / 256.0;
            re += x[start + n] * w[n] * a.cos();
            im -= x[start + n] * w[n] * a.sin();
        }
        assert!((s.real.at(&[t, k0]) - re).abs() < 1e-9);
        assert!((s.imag.at(&[t, k0]) - im).abs() < 1e-9);
        let mag = s.magnitude();
        let row = &mag.data()[t * 129..][..129];
        let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, k0);
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = random_wave(3000, 2);
        let s = stft(&x, &cfg).unwrap();
        let w = WindowKind::Hann.coefficients(256);
        let idx = cfg.frame_indices(x.len());
        for t in 0..s.frames() {
            let frame_energy: f64 = (0..256).map(|n| (x.samples[idx[t * 256 + n]] * w[n]).powi(2)).sum();
            let mut spec = 0.0;
            for k in 0..129 {
                let p = s.real.at(&[t, k]).powi(2) + s.imag.at(&[t, k]).powi(2);
                spec += if k == 0 || k == 128 { p } else { 2.0 * p };
            }
            assert!((spec / 256.0 - frame_energy).abs() < 1e-9 * frame_energy.max(1.0));
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        for len in [1000, 4096, 16000] {
            for hop in [64, 128] {
                let cfg = StftConfig::new(256, hop).unwrap();
                let x = random_wave(len, len as u64 + hop as u64);
                let y = istft(&stft(&x, &cfg).unwrap(), 16_000).unwrap();
                assert_eq!(y.len(), len);
                let e = max_diff(&x.samples, &y.samples);
                assert!(e < 1e-8, "len={len} hop={hop}: {e}");
            }
        }
    }

    #[test]
    fn short_signals_round_trip() {
        for len in [1, 2, 5, 100, 129] {
            let cfg = StftConfig::default();
            let x = random_wave(len, 9);
            let y = istft(&stft(&x, &cfg).unwrap(), 16_000).unwrap();
            assert!(max_diff(&x.samples, &y.samples) < 1e-8, "len={len}");
        }
    }

    #[test]
    fn zero_spectrogram_gives_silence_and_istft_is_linear() {
        let cfg = StftConfig::default();
        let a = stft(&random_wave(2000, 3), &cfg).unwrap();
        let b = stft(&random_wave(2000, 4), &cfg).unwrap();
        let zero = a
            .with_planes(
                Tensor::zeros(a.real.shape().to_vec()),
                Tensor::zeros(a.real.shape().to_vec()),
            )
            .unwrap();
        assert!(istft(&zero, 16_000).unwrap().samples.iter().all(|&v| v == 0.0));
        let (ca, cb) = (0.7, -1.3);
        let comb = a
            .with_planes(
                a.real.zip_map(&b.real, |x, y| ca * x + cb * y).unwrap(),
                a.imag.zip_map(&b.imag, |x, y| ca * x + cb * y).unwrap(),
            )
            .unwrap();
        let lhs = istft(&comb, 16_000).unwrap();
        let (ya, yb) = (istft(&a, 16_000).unwrap(), istft(&b, 16_000).unwrap());
        let rhs: Vec<f64> = ya
            .samples
            .iter()
            .zip(&yb.samples)
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        assert!(max_diff(&lhs.samples, &rhs) < 1e-9);
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let (x, y) = (random_wave(1500, 5), random_wave(1500, 6));
        let (ca, cb) = (2.0, -0.5);
        let z = Waveform::new(
            x.samples.iter().zip(&y.samples).map(|(a, b)| ca * a + cb * b).collect(),
            16_000,
        )
        .unwrap();
        let (sx, sy, sz) = (
            stft(&x, &cfg).unwrap(),
            stft(&y, &cfg).unwrap(),
            stft(&z, &cfg).unwrap(),
        );
        for (plane_x, plane_y, plane_z) in [(&sx.real, &sy.real, &sz.real), (&sx.imag, &sy.imag, &sz.imag)] {
            let expect = plane_x.zip_map(plane_y, |a, b| ca * a + cb * b).unwrap();
            assert!(max_diff(expect.data(), plane_z.data()) < 1e-9);
        }
    }

    #[test]
    fn non_invertible_configs_are_rejected() {
        let s = stft(&random_wave(500, 7), &StftConfig::new(256, 256).unwrap()).unwrap();
        assert!(matches!(istft(&s, 16_000), Err(Error::Config(_))));
        let s = stft(&random_wave(500, 7), &StftConfig::new(256, 96).unwrap()).unwrap();
        assert!(matches!(istft(&s, 16_000), Err(Error::Config(_))));
        assert!(StftConfig::new(200, 50).is_err());
        assert!(StftConfig::new(256, 0).is_err());
        let empty = Waveform::new(vec![], 16_000).unwrap();
        assert!(stft(&empty, &StftConfig::default()).is_err());
    }

    #[test]
    fn noisy_phase_recombination() {
        let s = stft(&random_wave(1200, 8), &StftConfig::default()).unwrap();
        let mag = s.magnitude();
        let back = recombine_with_noisy_phase(&mag, &s).unwrap();
        assert!(max_diff(back.real.data(), s.real.data()) < 1e-9);
        assert!(max_diff(back.imag.data(), s.imag.data()) < 1e-9);
        let zero = recombine_with_noisy_phase(&Tensor::zeros(mag.shape().to_vec()), &s).unwrap();
        assert!(zero.real.data().iter().chain(zero.imag.data()).all(|&v| v == 0.0));
        let target = mag.map(|m| (m * 1.7).sin().abs());
        let out = recombine_with_noisy_phase(&target, &s).unwrap().magnitude();
        for ((o, t), n) in out.data().iter().zip(target.data()).zip(mag.data()) {
            if *n > 1e-6 {
                assert!((o - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn taped_transforms_match_fft_route() {
        for (len, hop) in [(700, 64), (1024, 128)] {
            let cfg = StftConfig::new(256, hop).unwrap();
            let x = random_wave(len, 10);
            let plain = stft(&x, &cfg).unwrap();
            let basis = StftBasis::new(cfg, len).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([len], x.samples.clone()).unwrap());
            let (re, im) = tape_stft(&mut tape, &basis, xv).unwrap();
            assert!(max_diff(tape.value(re).data(), plain.real.data()) < 1e-9);
            assert!(max_diff(tape.value(im).data(), plain.imag.data()) < 1e-9);
            let y = tape_istft(&mut tape, &basis, re, im).unwrap();
            assert!(max_diff(tape.value(y).data(), &x.samples) < 1e-8);
            let yp = istft(&plain, 16_000).unwrap();
            assert!(max_diff(tape.value(y).data(), &yp.samples) < 1e-9);
        }
    }

    #[test]
    fn taped_istft_gradient() {
        let cfg = StftConfig::new(16, 4).unwrap();
        let len = 37;
        let basis = StftBasis::new(cfg, len).unwrap();
        let frames = basis.frames();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0));
        let target = rand_t(&[len]);
        let report = check_gradients(
            &[("re", rand_t(&[frames, 9])), ("im", rand_t(&[frames, 9]))],
            &GradCheckOptions::default(),
            |tape, v| {
                let y = tape_istft(tape, &basis, v[0], v[1])?;
                let t = tape.constant(target.clone());
                let d = tape.sub(y, t)?;
                let d2 = tape.square(d);
                Ok(tape.sum(d2))
            },
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report}");
        let report = check_gradients(&[("x", rand_t(&[len]))], &GradCheckOptions::default(), |tape, v| {
            let (re, im) = tape_stft(tape, &basis, v[0])?;
            let a = tape.square(re);
            let b = tape.square(im);
            let s = tape.add(a, b)?;
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report}");
    }
}
