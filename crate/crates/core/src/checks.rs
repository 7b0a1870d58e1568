//! Named invariant checks: gradient checks for every op and composite layer,
//! Gaussian-matrix properties, sign preservation, the signal pipeline and the
//! mask formulas. [`run_all`] is what `tgsa verify` prints.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_scores, attention_weights, effective_sigma, gaussian_weight_matrix, gaussian_weights,
    multi_head_attention, AttentionConfig, AttentionParams, AttentionScheme,
};
use crate::complex::{apply_complex_mask, complex_fc, complex_layer, ComplexFc, ComplexLayerParams, ComplexMask};
use crate::encoder::{apply_mask, encoder_layer, EncoderLayerParams};
use crate::error::Result;
use crate::loss::sdr_loss;
use crate::model::{Model, ModelSpec, Topology};
use crate::params::{check_param_gradients, ParamStore};
use crate::signal::{
    istft, measured_snr_db, mix, recombine_with_noisy_phase, stft, tape_istft, tape_stft, StftBasis, StftConfig,
    Waveform,
};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
use crate::tensor::{Fault, Tape, Tensor, Var, NO_INDEX};

/// Tolerance for every finite-difference check in the suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Tolerance for the hand-derived `dG/dsigma`.
pub const SIGMA_DERIVATIVE_TOL: f64 = 1e-6;
pub const SIGN_TRIALS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "checks={} failed={failed}", self.checks.len())
    }
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn opts(fault: Option<Fault>, max_per_input: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        max_per_input,
        fault,
        ..GradCheckOptions::default()
    }
}

fn random(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `±[lo, hi)`, bounded away from the kinks of `abs` and `relu`.
fn random_away_from_zero(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(v * w)` for a fixed, irregular `w`, so that no gradient is trivially
/// constant (a plain sum through a softmax has zero gradient).
fn readout(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(v).to_vec(), |ix| {
        let k = ix.iter().fold(0usize, |a, &i| a * 31 + i + 1);
        ((k as f64) * 0.7).sin() + 0.3
    });
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every primitive on the tape, each checked on its own.
pub fn op_gradients(fault: Option<Fault>) -> Check {
    run("op_gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let r = &mut rng;
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            (
                "add",
                vec![random(&[2, 3, 4], r, -1.0, 1.0), random(&[3, 1], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    readout(t, y)
                }),
            ),
            (
                "sub",
                vec![random(&[3, 4], r, -1.0, 1.0), random(&[4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.sub(v[0], v[1])?;
                    readout(t, y)
                }),
            ),
            (
                "mul",
                vec![random(&[2, 3, 4], r, -1.0, 1.0), random(&[1, 3, 4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    readout(t, y)
                }),
            ),
            (
                "scale",
                vec![random(&[5], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.scale(v[0], -2.5);
                    readout(t, y)
                }),
            ),
            (
                "neg",
                vec![random(&[5], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.neg(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "add_scalar",
                vec![random(&[5], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.add_scalar(v[0], 0.7);
                    let y = t.square(y);
                    readout(t, y)
                }),
            ),
            (
                "exp",
                vec![random(&[6], r, -2.0, 2.0)],
                Box::new(|t, v| {
                    let y = t.exp(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "ln",
                vec![random(&[6], r, 0.5, 3.0)],
                Box::new(|t, v| {
                    let y = t.ln(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "square",
                vec![random(&[6], r, -2.0, 2.0)],
                Box::new(|t, v| {
                    let y = t.square(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "recip",
                vec![random_away_from_zero(&[6], r, 0.5, 2.0)],
                Box::new(|t, v| {
                    let y = t.recip(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "relu",
                vec![random_away_from_zero(&[6], r, 0.1, 2.0)],
                Box::new(|t, v| {
                    let y = t.relu(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "abs",
                vec![random_away_from_zero(&[6], r, 0.1, 2.0)],
                Box::new(|t, v| {
                    let y = t.abs(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "sigmoid",
                vec![random(&[6], r, -3.0, 3.0)],
                Box::new(|t, v| {
                    let y = t.sigmoid(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "softplus",
                vec![random(&[6], r, -3.0, 3.0)],
                Box::new(|t, v| {
                    let y = t.softplus(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "matmul",
                vec![random(&[2, 3, 4], r, -1.0, 1.0), random(&[4, 5], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    readout(t, y)
                }),
            ),
            (
                "softmax_rows",
                vec![random(&[3, 5], r, -2.0, 2.0)],
                Box::new(|t, v| {
                    let y = t.softmax_rows(v[0]);
                    readout(t, y)
                }),
            ),
            (
                "layer_norm",
                vec![
                    random(&[3, 5], r, -2.0, 2.0),
                    random(&[5], r, 0.5, 1.5),
                    random(&[5], r, -0.5, 0.5),
                ],
                Box::new(|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    readout(t, y)
                }),
            ),
            (
                "permute",
                vec![random(&[2, 3, 4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.permute(v[0], &[2, 0, 1])?;
                    readout(t, y)
                }),
            ),
            (
                "transpose_last2",
                vec![random(&[2, 3, 4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.transpose_last2(v[0])?;
                    readout(t, y)
                }),
            ),
            (
                "reshape",
                vec![random(&[2, 6], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.reshape(v[0], &[3, 4])?;
                    readout(t, y)
                }),
            ),
            (
                "concat_last",
                vec![random(&[2, 3], r, -1.0, 1.0), random(&[2, 2], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.concat_last(&[v[0], v[1]])?;
                    readout(t, y)
                }),
            ),
            (
                "sum",
                vec![random(&[4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let s = t.sum(v[0]);
                    Ok(t.square(s))
                }),
            ),
            (
                "mean",
                vec![random(&[4], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let s = t.mean(v[0]);
                    Ok(t.square(s))
                }),
            ),
            (
                "gather",
                vec![random(&[5], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.gather(v[0], vec![4, 0, NO_INDEX, 0, 2, 3], &[2, 3])?;
                    readout(t, y)
                }),
            ),
            (
                "scatter_add",
                vec![random(&[6], r, -1.0, 1.0)],
                Box::new(|t, v| {
                    let y = t.scatter_add(v[0], vec![1, 1, NO_INDEX, 0, 3, 3], &[4])?;
                    readout(t, y)
                }),
            ),
        ];
        let mut worst = (0.0f64, "");
        let mut failed = Vec::new();
        for (name, inputs, build) in &cases {
            let named: Vec<(&str, Tensor)> = inputs.iter().map(|t| (*name, t.clone())).collect();
            let g = check_gradients(&named, &opts(fault, None), build)?;
            if !g.passes(GRAD_TOL) {
                failed.push(*name);
            }
            if g.max_rel_error() >= worst.0 {
                worst = (g.max_rel_error(), name);
            }
        }
        let detail = format!(
            "ops={} max_rel_error={:.3e} worst={} failed=[{}]",
            cases.len(),
            worst.0,
            worst.1,
            failed.join(",")
        );
        Ok((failed.is_empty(), detail))
    })
}

fn small_attention(scheme: AttentionScheme) -> Result<AttentionConfig> {
    AttentionConfig::new(8, 2, scheme)
}

/// One encoder layer for every attention scheme.
pub fn encoder_layer_gradients(fault: Option<Fault>) -> Check {
    run("encoder_layer_gradients", || {
        let mut worst = 0.0f64;
        let mut ok = true;
        for scheme in AttentionScheme::ALL {
            let cfg = small_attention(scheme)?;
            let mut rng = ChaCha8Rng::seed_from_u64(101);
            let mut store = ParamStore::new();
            EncoderLayerParams::init(&mut store, "l", &cfg, 12, 2.0, &mut rng)?;
            let x = random(&[2, 5, 8], &mut rng, -1.0, 1.0);
            let g = check_param_gradients(
                &store,
                |_| true,
                &opts(fault, None),
                |tape, b| {
                    let p = EncoderLayerParams::bind(b, "l", &cfg)?;
                    let h = tape.constant(x.clone());
                    let y = encoder_layer(tape, &cfg, &p, h, 1e-5)?;
                    readout(tape, y)
                },
            )?;
            ok &= g.passes(GRAD_TOL);
            worst = worst.max(g.max_rel_error());
        }
        Ok((ok, format!("schemes=3 max_rel_error={worst:.3e}")))
    })
}

/// One complex layer (self, cross and complex-linear stages) per scheme.
pub fn complex_layer_gradients(fault: Option<Fault>) -> Check {
    run("complex_layer_gradients", || {
        let mut worst = 0.0f64;
        let mut ok = true;
        for scheme in AttentionScheme::ALL {
            let cfg = small_attention(scheme)?;
            let mut rng = ChaCha8Rng::seed_from_u64(102);
            let mut store = ParamStore::new();
            ComplexLayerParams::init(&mut store, "c", &cfg, 2.0, &mut rng)?;
            let xr = random(&[1, 5, 8], &mut rng, -1.0, 1.0);
            let xi = random(&[1, 5, 8], &mut rng, -1.0, 1.0);
            let g = check_param_gradients(
                &store,
                |_| true,
                &opts(fault, None),
                |tape, b| {
                    let p = ComplexLayerParams::bind(b, "c", &cfg)?;
                    let hr = tape.constant(xr.clone());
                    let hi = tape.constant(xi.clone());
                    let (yr, yi) = complex_layer(tape, &cfg, &p, hr, hi, 1e-5)?;
                    let a = readout(tape, yr)?;
                    let sq = tape.square(yi);
                    let c = readout(tape, sq)?;
                    tape.add(a, c)
                },
            )?;
            ok &= g.passes(GRAD_TOL);
            worst = worst.max(g.max_rel_error());
        }
        Ok((ok, format!("schemes=3 max_rel_error={worst:.3e}")))
    })
}

/// A short noisy utterance and its clean reference for end-to-end checks.
fn toy_utterance(seed: u64, len: usize) -> Result<(Waveform, Waveform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<f64> = (0..len)
        .map(|n| 0.5 * (0.3 * n as f64).sin() + 0.2 * (0.05 * n as f64).cos())
        .collect();
    let noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let clean = Waveform::new(clean, 8000)?;
    let noisy = mix(&clean, &Waveform::new(noise, 8000)?, 3.0)?;
    Ok((clean, noisy))
}

fn toy_spec(topology: Topology, scheme: AttentionScheme, bins: usize) -> ModelSpec {
    ModelSpec {
        num_layers: 2,
        model_dim: 8,
        heads: 2,
        ff_dim: 8,
        input_dim: bins,
        ..ModelSpec::desk(topology, scheme)
    }
}

fn model_gradients(name: &'static str, topology: Topology, fault: Option<Fault>) -> Check {
    run(name, || {
        let cfg = StftConfig::new(16, 4)?;
        let len = 48;
        let (clean, noisy) = toy_utterance(103, len)?;
        let spec = stft(&noisy, &cfg)?;
        let basis = StftBasis::new(cfg, len)?;
        let reference = Tensor::new([len], clean.samples.clone())?;
        let mut worst = 0.0f64;
        let mut ok = true;
        for scheme in AttentionScheme::ALL {
            let ms = toy_spec(topology, scheme, cfg.bins());
            let mut rng = ChaCha8Rng::seed_from_u64(104);
            let mut model = Model::init(ms, spec.frames(), &mut rng)?;
            // Zero biases and a first frame with a near-zero imaginary part
            // put whole score rows on the kink of |.| at the raw init, where
            // central differences and the subgradient legitimately differ.
            for (_, t) in model.params.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
            let g = check_param_gradients(
                &model.params,
                |_| true,
                &opts(fault, Some(6)),
                |tape, b| {
                    let est = model.estimate_waveform(tape, b, &spec, &basis)?;
                    sdr_loss(tape, est, &reference)
                },
            )?;
            ok &= g.passes(GRAD_TOL);
            worst = worst.max(g.max_rel_error());
        }
        Ok((ok, format!("layers=2 schemes=3 max_rel_error={worst:.3e}")))
    })
}

/// The full two-layer real model through the inverse STFT and SDR loss.
pub fn real_model_gradients(fault: Option<Fault>) -> Check {
    model_gradients("real_model_gradients", Topology::RealEncoder, fault)
}

/// The full two-layer complex model through the inverse STFT and SDR loss.
pub fn complex_model_gradients(fault: Option<Fault>) -> Check {
    model_gradients("complex_model_gradients", Topology::ComplexDecoder, fault)
}

/// SDR loss of the inverse STFT with respect to the spectral planes, and
/// the forward transform with respect to the signal.
pub fn loss_through_istft_gradients(fault: Option<Fault>) -> Check {
    run("loss_through_istft_gradients", || {
        let cfg = StftConfig::new(16, 4)?;
        let len = 50;
        let basis = StftBasis::new(cfg, len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let shape = [basis.frames(), cfg.bins()];
        let reference = random(&[len], &mut rng, -1.0, 1.0);
        let re = random(&shape, &mut rng, -1.0, 1.0);
        let im = random(&shape, &mut rng, -1.0, 1.0);
        let g1 = check_gradients(&[("real", re), ("imag", im)], &opts(fault, None), |tape, v| {
            let y = tape_istft(tape, &basis, v[0], v[1])?;
            sdr_loss(tape, y, &reference)
        })?;
        let x = random(&[len], &mut rng, -1.0, 1.0);
        let g2 = check_gradients(&[("signal", x)], &opts(fault, None), |tape, v| {
            let (r, i) = tape_stft(tape, &basis, v[0])?;
            let y = tape_istft(tape, &basis, r, i)?;
            let sq = tape.square(y);
            readout(tape, sq)
        })?;
        let worst = g1.max_rel_error().max(g2.max_rel_error());
        Ok((
            g1.passes(GRAD_TOL) && g2.passes(GRAD_TOL),
            format!("max_rel_error={worst:.3e}"),
        ))
    })
}

/// Diagonal, symmetry, strict decay in `|i-j|` and range `(0, 1]`. The
/// widths keep every entry above the underflow threshold.
pub fn gaussian_matrix_properties() -> Check {
    run("gaussian_matrix_properties", || {
        let mut checked = 0;
        for &t in &[1usize, 2, 7, 16, 33] {
            for &sigma in &[1.5, 3.0, 10.0, 100.0] {
                let g = gaussian_weight_matrix(t, sigma)?;
                for i in 0..t {
                    if g.at(&[i, i]) != 1.0 {
                        return Ok((false, format!("diagonal t={t} sigma={sigma} i={i}")));
                    }
                    for j in 0..t {
                        let v = g.at(&[i, j]);
                        if v != g.at(&[j, i]) {
                            return Ok((false, format!("asymmetric t={t} sigma={sigma} ({i},{j})")));
                        }
                        if !(v > 0.0 && v <= 1.0) {
                            return Ok((false, format!("range t={t} sigma={sigma} ({i},{j})={v}")));
                        }
                        if j > i && v >= g.at(&[i, j - 1]) {
                            return Ok((false, format!("not decaying t={t} sigma={sigma} ({i},{j})")));
                        }
                    }
                }
                checked += 1;
            }
        }
        Ok((true, format!("matrices={checked}")))
    })
}

/// `G -> all ones` as `sigma` grows.
pub fn gaussian_wide_limit() -> Check {
    run("gaussian_wide_limit", || {
        // 1 - exp(-(t-1)^2 / sigma^2) stays below 1e-9 up to t = 32.
        let g = gaussian_weight_matrix(32, 1e6)?;
        let err = g.data().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        Ok((err < 1e-9, format!("sigma=1e6 t=32 sup_error={err:.3e}")))
    })
}

/// Tape derivative of every `G[i,j]` against `2 (i-j)^2 / sigma^3 G[i,j]`,
/// and of `sum(G)` for `t = 2, sigma = 1` against `4/e`.
pub fn gaussian_sigma_derivative() -> Check {
    run("gaussian_sigma_derivative", || {
        let mut worst = 0.0f64;
        for &(t, sigma) in &[(6usize, 0.8), (8, 2.5), (5, 7.0)] {
            let mut max_err = 0.0f64;
            let mut scale = 0.0f64;
            for i in 0..t {
                for j in 0..t {
                    let mut tape = Tape::new();
                    let s = tape.param(Tensor::new([1], vec![sigma])?);
                    let g = gaussian_weights(&mut tape, s, t, t)?;
                    let pick = tape.gather(g, vec![i * t + j], &[1])?;
                    let out = tape.sum(pick);
                    let grad = tape.backward(out)?.wrt(s).data()[0];
                    let d = i as f64 - j as f64;
                    let want = 2.0 * d * d / sigma.powi(3) * (-(d * d) / (sigma * sigma)).exp();
                    max_err = max_err.max((grad - want).abs());
                    scale = scale.max(want.abs());
                }
            }
            worst = worst.max(max_err / scale.max(1e-300));
        }
        let mut tape = Tape::new();
        let s = tape.param(Tensor::new([1], vec![1.0])?);
        let g = gaussian_weights(&mut tape, s, 2, 2)?;
        let total = tape.sum(g);
        let grad = tape.backward(total)?.wrt(s).data()[0];
        let want = 4.0 / std::f64::consts::E;
        let sum_err = (grad - want).abs() / want;
        worst = worst.max(sum_err);
        Ok((
            worst < SIGMA_DERIVATIVE_TOL,
            format!("max_rel_error={worst:.3e} dsumG/dsigma(t=2,sigma=1)={grad:.12}"),
        ))
    })
}

fn scores(q: &Tensor, k: &Tensor, scheme: AttentionScheme, sigma: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let s = tape.constant(Tensor::new([1], vec![sigma])?);
    let (c, s) = attention_scores(&mut tape, qv, kv, scheme, Some(s))?;
    let w = attention_weights(&mut tape, s, scheme.default_abs());
    Ok((tape.value(c).clone(), tape.value(s).clone(), tape.value(w).clone()))
}

fn random_qk(rng: &mut impl Rng) -> (Tensor, Tensor, f64) {
    let t = rng.gen_range(2..=16);
    let e = rng.gen_range(1..=2);
    let d = rng.gen_range(1..=4);
    let q = random(&[1, e, t, d], rng, -2.0, 2.0);
    let k = random(&[1, e, t, d], rng, -2.0, 2.0);
    (q, k, rng.gen_range(1.0..20.0))
}

/// Gaussian weighting never changes the sign of a score.
pub fn sign_preservation() -> Check {
    run("sign_preservation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        for trial in 0..SIGN_TRIALS {
            let (q, k, sigma) = random_qk(&mut rng);
            let (c, s, _) = scores(&q, &k, AttentionScheme::GaussianWeighted, sigma)?;
            let bad = c
                .data()
                .iter()
                .zip(s.data())
                .position(|(&c, &s)| (c > 0.0) != (s > 0.0) || (c < 0.0) != (s < 0.0));
            if let Some(at) = bad {
                return Ok((false, format!("trial={trial} sigma={sigma} index={at}")));
            }
        }
        Ok((true, format!("trials={SIGN_TRIALS}")))
    })
}

/// The additive distance bias turns small positive scores negative.
pub fn additive_bias_sign_flip() -> Check {
    run("additive_bias_sign_flip", || {
        let q = Tensor::full([1, 1, 4, 1], 0.5);
        let (c, s, _) = scores(&q, &q, AttentionScheme::AdditiveBias, 1.0)?;
        let flips = c
            .data()
            .iter()
            .zip(s.data())
            .filter(|(&c, &s)| (c > 0.0) != (s > 0.0))
            .count();
        Ok((flips > 0, format!("flipped={flips}/{}", c.numel())))
    })
}

/// Negating the raw scores leaves the Gaussian-weighted attention weights
/// unchanged, bit for bit.
pub fn abs_softmax_negation() -> Check {
    run("abs_softmax_negation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        for trial in 0..200 {
            let (q, k, sigma) = random_qk(&mut rng);
            let neg = q.map(|v| -v);
            let (c0, _, w0) = scores(&q, &k, AttentionScheme::GaussianWeighted, sigma)?;
            let (c1, _, w1) = scores(&neg, &k, AttentionScheme::GaussianWeighted, sigma)?;
            if c0.zip_map(&c1, |a, b| a + b)?.max_abs() != 0.0 {
                return Ok((false, format!("trial={trial}: scores not negated exactly")));
            }
            if w0.data() != w1.data() {
                return Ok((false, format!("trial={trial}: weights differ")));
            }
        }
        Ok((true, "trials=200 bitwise".into()))
    })
}

/// Gradients of Gaussian-weighted attention through `|S|`, with respect to
/// the queries, keys and width. This is the check a broken `abs` backward
/// rule trips.
pub fn sign_preservation_gradients(fault: Option<Fault>) -> Check {
    run("sign_preservation_gradients", || {
        let cfg = small_attention(AttentionScheme::GaussianWeighted)?;
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "a", 3.0, &mut rng)?;
        let x = random(&[1, 6, 8], &mut rng, -1.5, 1.5);
        let g = check_param_gradients(
            &store,
            |_| true,
            &opts(fault, None),
            |tape, b| {
                let p = AttentionParams::bind(b, "a", &cfg)?;
                let h = tape.constant(x.clone());
                let out = multi_head_attention(tape, &cfg, &p, h, h)?;
                let w = readout(tape, out.weights)?;
                let o = readout(tape, out.output)?;
                tape.add(w, o)
            },
        )?;
        let q = random_away_from_zero(&[1, 2, 5, 3], &mut rng, 0.2, 1.5);
        let k = random_away_from_zero(&[1, 2, 5, 3], &mut rng, 0.2, 1.5);
        let raw = Tensor::new([1], vec![1.2])?;
        let g2 = check_gradients(
            &[("q", q), ("k", k), ("sigma_raw", raw)],
            &opts(fault, None),
            |tape, v| {
                let s = effective_sigma(tape, v[2], 0.1);
                let (_, s) = attention_scores(tape, v[0], v[1], AttentionScheme::GaussianWeighted, Some(s))?;
                let w = attention_weights(tape, s, true);
                readout(tape, w)
            },
        )?;
        let worst = g.max_rel_error().max(g2.max_rel_error());
        Ok((
            g.passes(GRAD_TOL) && g2.passes(GRAD_TOL),
            format!("max_rel_error={worst:.3e}"),
        ))
    })
}

fn test_signal(len: usize, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000)
}

/// Analysis then synthesis returns the signal, for the FFT route and for the
/// dense tape route.
pub fn stft_round_trip() -> Check {
    run("stft_round_trip", || {
        let mut worst = 0.0f64;
        for &(n, hop, len) in &[
            (256usize, 64usize, 1000usize),
            (256, 64, 4096),
            (32, 8, 203),
            (16, 4, 50),
        ] {
            let cfg = StftConfig::new(n, hop)?;
            let w = test_signal(len, 109 + len as u64)?;
            let back = istft(&stft(&w, &cfg)?, w.sample_rate)?;
            let err = back
                .samples
                .iter()
                .zip(&w.samples)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(err);
            if n <= 32 {
                let basis = StftBasis::new(cfg, len)?;
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new([len], w.samples.clone())?);
                let (r, i) = tape_stft(&mut tape, &basis, x)?;
                let y = tape_istft(&mut tape, &basis, r, i)?;
                let err = tape
                    .value(y)
                    .data()
                    .iter()
                    .zip(&w.samples)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                worst = worst.max(err);
            }
        }
        Ok((worst < 1e-8, format!("max_abs_error={worst:.3e}")))
    })
}

/// `mix` reaches the requested SNR.
pub fn mix_snr() -> Check {
    run("mix_snr", || {
        let mut worst = 0.0f64;
        for (k, &snr) in [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 30.0].iter().enumerate() {
            let clean = test_signal(4000, 200 + k as u64)?;
            let noise = test_signal(4000, 300 + k as u64)?;
            let noisy = mix(&clean, &noise, snr)?;
            worst = worst.max((measured_snr_db(&clean.samples, &noisy.samples) - snr).abs());
        }
        Ok((worst < 0.01, format!("max_error_db={worst:.3e}")))
    })
}

/// Recombining `|noisy|` with the noisy phase gives back the noisy input.
pub fn noisy_phase_identity() -> Check {
    run("noisy_phase_identity", || {
        let cfg = StftConfig::default();
        let w = test_signal(3000, 110)?;
        let s = stft(&w, &cfg)?;
        let r = recombine_with_noisy_phase(&s.magnitude(), &s)?;
        let plane_err = r
            .real
            .zip_map(&s.real, |a, b| (a - b).abs())?
            .max_abs()
            .max(r.imag.zip_map(&s.imag, |a, b| (a - b).abs())?.max_abs());
        let back = istft(&r, w.sample_rate)?;
        let wave_err = back
            .samples
            .iter()
            .zip(&w.samples)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok((
            plane_err < 1e-9 && wave_err < 1e-9,
            format!("plane_error={plane_err:.3e} wave_error={wave_err:.3e}"),
        ))
    })
}

/// Unit mask is the identity, zero mask silences, and the real model's mask
/// never amplifies a bin.
pub fn real_mask_identities() -> Check {
    run("real_mask_identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let mag = random(&[1, 7, 9], &mut rng, 0.0, 3.0);
        let mut tape = Tape::new();
        let m = tape.constant(mag.clone());
        let one = tape.constant(Tensor::ones([1, 7, 9]));
        let zero = tape.constant(Tensor::zeros([1, 7, 9]));
        let a = apply_mask(&mut tape, m, one)?;
        let b = apply_mask(&mut tape, m, zero)?;
        let identity = tape.value(a) == &mag;
        let silent = tape.value(b).max_abs() == 0.0;

        let cfg = StftConfig::new(16, 4)?;
        let w = test_signal(64, 112)?;
        let spec = stft(&w, &cfg)?;
        let model = Model::init(
            toy_spec(Topology::RealEncoder, AttentionScheme::GaussianWeighted, cfg.bins()),
            spec.frames(),
            &mut rng,
        )?;
        let mask = model.real_mask(&spec)?;
        let bounded = mask.data().iter().all(|&v| (0.0..=1.0).contains(&v));
        let mut tape = Tape::new();
        let bound = model.params.bind_with(&mut tape, |_| false);
        let (re, im) = model.estimate_spectrum(&mut tape, &bound, &spec)?;
        let est = tape.value(re).zip_map(tape.value(im), f64::hypot)?;
        let noisy = spec.magnitude();
        let no_gain = est
            .data()
            .iter()
            .zip(noisy.data())
            .all(|(e, n)| *e <= n * (1.0 + 1e-12) + 1e-15);
        Ok((
            identity && silent && bounded && no_gain,
            format!("identity={identity} zero={silent} mask_in_unit={bounded} no_amplification={no_gain}"),
        ))
    })
}

/// `X_r = |Y_r| M_r - |Y_i| M_i` and `X_i = |Y_r| M_i + |Y_i| M_r`, computed
/// by hand, against the tape, exactly.
pub fn complex_mask_oracle() -> Check {
    run("complex_mask_oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let shape = [1, 3, 4];
        for trial in 0..SIGN_TRIALS {
            let planes: Vec<Tensor> = (0..4).map(|_| random(&shape, &mut rng, -3.0, 3.0)).collect();
            let (yr, yi, mr, mi) = (&planes[0], &planes[1], &planes[2], &planes[3]);
            let mut tape = Tape::new();
            let vars: Vec<Var> = planes.iter().map(|p| tape.constant(p.clone())).collect();
            let m = ComplexMask {
                m_r: vars[2],
                m_i: vars[3],
            };
            let (xr, xi) = apply_complex_mask(&mut tape, vars[0], vars[1], &m, false)?;
            for j in 0..yr.numel() {
                let (a, b) = (yr.data()[j].abs(), yi.data()[j].abs());
                let (p, q) = (mr.data()[j], mi.data()[j]);
                let want_r = a * p - b * q;
                let want_i = a * q + b * p;
                if tape.value(xr).data()[j] != want_r || tape.value(xi).data()[j] != want_i {
                    return Ok((false, format!("trial={trial} index={j}")));
                }
            }
        }
        Ok((true, format!("trials={SIGN_TRIALS} exact")))
    })
}

/// `M = 1 + 0i` with nonnegative components returns the input exactly.
pub fn complex_mask_identity() -> Check {
    run("complex_mask_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(114);
        let yr = random(&[2, 5, 6], &mut rng, 0.0, 4.0);
        let yi = random(&[2, 5, 6], &mut rng, 0.0, 4.0);
        let mut tape = Tape::new();
        let r = tape.constant(yr.clone());
        let i = tape.constant(yi.clone());
        let m = ComplexMask {
            m_r: tape.constant(Tensor::ones([2, 5, 6])),
            m_i: tape.constant(Tensor::zeros([2, 5, 6])),
        };
        let (xr, xi) = apply_complex_mask(&mut tape, r, i, &m, false)?;
        let ok = tape.value(xr) == &yr && tape.value(xi) == &yi;
        Ok((ok, format!("exact={ok}")))
    })
}

/// Complex linear layer against hand complex arithmetic.
pub fn complex_arithmetic() -> Check {
    run("complex_arithmetic", || {
        let eval = |x: (f64, f64), w: (f64, f64), b: (f64, f64)| -> Result<(f64, f64)> {
            let mut store = ParamStore::new();
            store.insert("fc.w_r", Tensor::new([1, 1], vec![w.0])?);
            store.insert("fc.w_i", Tensor::new([1, 1], vec![w.1])?);
            store.insert("fc.b_r", Tensor::new([1], vec![b.0])?);
            store.insert("fc.b_i", Tensor::new([1], vec![b.1])?);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let fc = ComplexFc::bind(&bound, "fc")?;
            let xr = tape.constant(Tensor::new([1, 1], vec![x.0])?);
            let xi = tape.constant(Tensor::new([1, 1], vec![x.1])?);
            let (yr, yi) = complex_fc(&mut tape, xr, xi, &fc)?;
            Ok((tape.value(yr).data()[0], tape.value(yi).data()[0]))
        };
        if eval((0.0, 1.0), (0.0, 1.0), (0.0, 0.0))? != (-1.0, 0.0) {
            return Ok((false, "i*i != -1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(115);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let mut c = || rng.gen_range(-3.0..3.0);
            let (x, w, b) = ((c(), c()), (c(), c()), (c(), c()));
            let got = eval(x, w, b)?;
            let want = (x.0 * w.0 - x.1 * w.1 + b.0, x.0 * w.1 + x.1 * w.0 + b.1);
            worst = worst.max((got.0 - want.0).abs()).max((got.1 - want.1).abs());
        }
        Ok((worst < 1e-12, format!("trials=200 max_abs_error={worst:.3e}")))
    })
}

/// The whole suite, in a fixed order.
pub fn run_all(fault: Option<Fault>) -> Report {
    let checks = vec![
        op_gradients(fault),
        encoder_layer_gradients(fault),
        complex_layer_gradients(fault),
        real_model_gradients(fault),
        complex_model_gradients(fault),
        loss_through_istft_gradients(fault),
        gaussian_matrix_properties(),
        gaussian_wide_limit(),
        gaussian_sigma_derivative(),
        sign_preservation(),
        additive_bias_sign_flip(),
        abs_softmax_negation(),
        sign_preservation_gradients(fault),
        stft_round_trip(),
        mix_snr(),
        noisy_phase_identity(),
        real_mask_identities(),
        complex_mask_oracle(),
        complex_mask_identity(),
        complex_arithmetic(),
    ];
    Report { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_are_distinct() {
        let report = run_all(None);
        assert!(report.passed(), "{report}");
        let mut names: Vec<_> = report.checks.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), report.checks.len());
        assert!(names.len() >= 12);
    }

    #[test]
    fn abs_fault_breaks_the_sign_preservation_gradients() {
        let c = sign_preservation_gradients(Some(Fault::AbsBackwardNegated));
        assert!(!c.passed, "{c}");
        assert!(op_gradients(Some(Fault::AbsBackwardNegated))
            .detail
            .contains("failed=[abs]"));
        assert!(gaussian_matrix_properties().passed);
    }
}
