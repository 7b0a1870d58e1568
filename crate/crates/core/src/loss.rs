//! Time-domain training losses and evaluation metrics.
//!
//! The training loss is a negative signal-to-distortion ratio,
//! `-10 log10((|ref|^2 + eps) / (|ref - est|^2 + eps))`, optionally combined
//! with a perceptual term supplied through [`PerceptualLoss`]:
//! `combined = sdr + alpha * perceptual`. No perceptual term ships with the
//! crate; without one the combined loss is the SDR loss itself.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const SDR_EPS: f64 = 1e-8;
/// Weight of the perceptual term in the combined loss.
pub const DEFAULT_ALPHA: f64 = 3.2;
/// Reported SDR values are clamped to `+-SDR_CAP_DB`.
pub const SDR_CAP_DB: f64 = 60.0;
pub const SSNR_FRAME: usize = 256;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
const SILENT_FRAME_ENERGY: f64 = 1e-10;

const DB_PER_NEPER: f64 = 10.0 / std::f64::consts::LN_10;

/// An extra differentiable loss term on the estimated waveform.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;

    fn loss(&self, tape: &mut Tape, est: Var, reference: &Tensor) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Use the scale-invariant SDR variant.
    pub si_sdr: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            si_sdr: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub sdr_loss: f64,
    /// `None` when no perceptual term is configured.
    pub pesq_hook_loss: Option<f64>,
    pub combined: f64,
    pub alpha: f64,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sdr_loss={:.6} ", self.sdr_loss)?;
        match self.pesq_hook_loss {
            Some(p) => write!(f, "pesq_hook_loss={p:.6} ")?,
            None => write!(f, "pesq_hook_loss=inactive ")?,
        }
        write!(f, "combined={:.6} alpha={}", self.combined, self.alpha)
    }
}

fn check_reference(tape: &Tape, est: Var, reference: &Tensor) -> Result<()> {
    if tape.shape(est) != reference.shape() {
        return Err(Error::shape("sdr_loss", tape.shape(est), reference.shape()));
    }
    if reference.sum_squares() == 0.0 {
        return Err(Error::Domain("reference signal has zero energy".into()));
    }
    Ok(())
}

/// Negative SDR in dB; lower is better.
pub fn sdr_loss(tape: &mut Tape, est: Var, reference: &Tensor) -> Result<Var> {
    check_reference(tape, est, reference)?;
    let r = tape.constant(reference.clone());
    let err = tape.sub(r, est)?;
    let sq = tape.square(err);
    let distortion = tape.sum(sq);
    let distortion = tape.add_scalar(distortion, SDR_EPS);
    let log_d = tape.ln(distortion);
    let scaled = tape.scale(log_d, DB_PER_NEPER);
    let signal_db = DB_PER_NEPER * (reference.sum_squares() + SDR_EPS).ln();
    Ok(tape.add_scalar(scaled, -signal_db))
}

/// Negative scale-invariant SDR: the target is the projection of `est` onto
/// the reference.
pub fn si_sdr_loss(tape: &mut Tape, est: Var, reference: &Tensor) -> Result<Var> {
    check_reference(tape, est, reference)?;
    let r = tape.constant(reference.clone());
    let dot = tape.mul(est, r)?;
    let dot = tape.sum(dot);
    let alpha = tape.scale(dot, 1.0 / reference.sum_squares());
    let target = tape.mul(r, alpha)?;
    let t2 = tape.square(target);
    let num = tape.sum(t2);
    let num = tape.add_scalar(num, SDR_EPS);
    let err = tape.sub(target, est)?;
    let e2 = tape.square(err);
    let den = tape.sum(e2);
    let den = tape.add_scalar(den, SDR_EPS);
    let ln_num = tape.ln(num);
    let ln_den = tape.ln(den);
    let diff = tape.sub(ln_den, ln_num)?;
    Ok(tape.scale(diff, DB_PER_NEPER))
}

/// `sdr + alpha * hook`, or the SDR loss node itself when there is no hook.
pub fn combined_loss(
    tape: &mut Tape,
    est: Var,
    reference: &Tensor,
    cfg: &LossConfig,
    hook: Option<&dyn PerceptualLoss>,
) -> Result<(Var, LossReport)> {
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    let sdr = if cfg.si_sdr {
        si_sdr_loss(tape, est, reference)?
    } else {
        sdr_loss(tape, est, reference)?
    };
    let sdr_value = tape.value(sdr).item()?;
    match hook {
        None => Ok((
            sdr,
            LossReport {
                sdr_loss: sdr_value,
                pesq_hook_loss: None,
                combined: sdr_value,
                alpha: cfg.alpha,
            },
        )),
        Some(h) => {
            let p = h.loss(tape, est, reference)?;
            let p_value = tape.value(p).item()?;
            let weighted = tape.scale(p, cfg.alpha);
            let total = tape.add(sdr, weighted)?;
            Ok((
                total,
                LossReport {
                    sdr_loss: sdr_value,
                    pesq_hook_loss: Some(p_value),
                    combined: tape.value(total).item()?,
                    alpha: cfg.alpha,
                },
            ))
        }
    }
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape("metric", &[est.len()], &[reference.len()]));
    }
    Ok(())
}

/// `10 log10(|ref|^2 / |ref - est|^2)` clamped to `+-60` dB.
pub fn eval_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    let signal: f64 = reference.iter().map(|r| r * r).sum();
    if signal == 0.0 {
        return Err(Error::Domain("reference signal has zero energy".into()));
    }
    let noise: f64 = reference.iter().zip(est).map(|(r, e)| (r - e) * (r - e)).sum();
    Ok((10.0 * (signal / noise).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// Mean of per-frame SNRs over non-overlapping `frame`-sample frames, each
/// clamped to `[-10, 35]` dB. Frames with a (near) silent reference are skipped.
pub fn eval_ssnr(est: &[f64], reference: &[f64], frame: usize) -> Result<f64> {
    check_lengths(est, reference)?;
    if frame == 0 {
        return Err(Error::Config("ssnr frame length must be > 0".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.chunks(frame).zip(est.chunks(frame)) {
        let signal: f64 = r.iter().map(|v| v * v).sum();
        if signal < SILENT_FRAME_ENERGY {
            continue;
        }
        let noise: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = 10.0 * (signal / noise).log10();
        total += snr.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("every reference frame is silent".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScores {
    pub sdr_db: f64,
    pub ssnr_db: f64,
}

impl EvalScores {
    pub fn compute(est: &[f64], reference: &[f64]) -> Result<Self> {
        Ok(EvalScores {
            sdr_db: eval_sdr(est, reference)?,
            ssnr_db: eval_ssnr(est, reference, SSNR_FRAME)?,
        })
    }

    /// One line-delimited `key=value` record.
    pub fn record(&self, id: &str) -> String {
        format!("id={id} sdr_db={:.4} ssnr_db={:.4}", self.sdr_db, self.ssnr_db)
    }
}
