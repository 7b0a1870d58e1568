//! Multi-head self-attention with distance-aware score schemes.
//!
//! Three schemes share one code path and differ only in how the scaled
//! dot-product scores `C = Q K^T / sqrt(d)` are turned into `S`:
//!
//! * [`AttentionScheme::Vanilla`]: `S = C`.
//! * [`AttentionScheme::AdditiveBias`]: `S = C + B`, `B[i,j] = -(i-j)^2 / sigma^2`.
//! * [`AttentionScheme::GaussianWeighted`]: `S = G * C` elementwise, with
//!   `G[i,j] = exp(-(i-j)^2 / sigma^2)`.
//!
//! The attention weights are `softmax(|S|)` when absolute scores are enabled
//! (the default only for the Gaussian scheme) and `softmax(S)` otherwise.
//! Multiplying by `G > 0` rescales a score without changing its sign, whereas
//! an additive bias can push a positive correlation negative.
//!
//! The width is trained through `sigma = softplus(sigma_raw) + sigma_min`,
//! so it stays strictly positive for any raw value.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tensor::{softplus_inverse, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionScheme {
    Vanilla,
    AdditiveBias,
    GaussianWeighted,
}

impl AttentionScheme {
    pub const ALL: [AttentionScheme; 3] = [
        AttentionScheme::Vanilla,
        AttentionScheme::AdditiveBias,
        AttentionScheme::GaussianWeighted,
    ];

    pub fn uses_sigma(self) -> bool {
        !matches!(self, AttentionScheme::Vanilla)
    }

    /// Whether `|S|` feeds the softmax unless overridden.
    pub fn default_abs(self) -> bool {
        matches!(self, AttentionScheme::GaussianWeighted)
    }

    /// Short label used in tables: O-T, T-AB, T-GSA.
    pub fn label(self) -> &'static str {
        match self {
            AttentionScheme::Vanilla => "O-T",
            AttentionScheme::AdditiveBias => "T-AB",
            AttentionScheme::GaussianWeighted => "T-GSA",
        }
    }
}

impl fmt::Display for AttentionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionScheme::Vanilla => "vanilla",
            AttentionScheme::AdditiveBias => "ab",
            AttentionScheme::GaussianWeighted => "gsa",
        })
    }
}

impl FromStr for AttentionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "o-t" | "ot" => Ok(AttentionScheme::Vanilla),
            "ab" | "t-ab" | "additive" | "additive-bias" => Ok(AttentionScheme::AdditiveBias),
            "gsa" | "t-gsa" | "gaussian" => Ok(AttentionScheme::GaussianWeighted),
            other => Err(Error::Config(format!("unknown attention scheme {other:?}"))),
        }
    }
}

/// Static configuration of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub scheme: AttentionScheme,
    pub abs_scores: bool,
    /// One sigma per head instead of one per layer.
    pub per_head_sigma: bool,
    pub sigma_min: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize, scheme: AttentionScheme) -> Result<Self> {
        if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            heads,
            scheme,
            abs_scores: scheme.default_abs(),
            per_head_sigma: false,
            sigma_min: 0.1,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    fn sigma_len(&self) -> usize {
        if self.per_head_sigma {
            self.heads
        } else {
            1
        }
    }

    /// Adds freshly initialized parameters under `prefix` to `store`.
    /// Projections are Xavier-uniform; `sigma_raw` starts at the value that
    /// gives an effective width of `sigma_init`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, sigma_init: f64, rng: &mut impl Rng) -> Result<()> {
        let d = self.model_dim;
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(format!("{prefix}.{w}"), xavier_uniform(rng, d, d));
        }
        if self.scheme.uses_sigma() {
            store.insert(
                format!("{prefix}.sigma_raw"),
                Tensor::full([self.sigma_len()], sigma_to_raw(sigma_init, self.sigma_min)?),
            );
        }
        Ok(())
    }
}

/// Raw parameter value whose effective width is `sigma`.
pub fn sigma_to_raw(sigma: f64, sigma_min: f64) -> Result<f64> {
    if !(sigma > sigma_min) {
        return Err(Error::Domain(format!(
            "initial sigma {sigma} must exceed sigma_min {sigma_min}"
        )));
    }
    Ok(softplus_inverse(sigma - sigma_min))
}

pub fn raw_to_sigma(raw: f64, sigma_min: f64) -> f64 {
    crate::tensor::softplus(raw) + sigma_min
}

/// Tape handles for one attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub sigma_raw: Option<Var>,
}

impl AttentionParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        let sigma_raw = if cfg.scheme.uses_sigma() {
            Some(bound.var(&format!("{prefix}.sigma_raw"))?)
        } else {
            None
        };
        Ok(AttentionParams {
            w_q: bound.var(&format!("{prefix}.w_q"))?,
            w_k: bound.var(&format!("{prefix}.w_k"))?,
            w_v: bound.var(&format!("{prefix}.w_v"))?,
            w_o: bound.var(&format!("{prefix}.w_o"))?,
            sigma_raw,
        })
    }
}

/// `G[i,j] = exp(-(i-j)^2 / sigma^2)` for a `t x t` sequence.
pub fn gaussian_weight_matrix(t: usize, sigma: f64) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Domain("sequence length must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(Tensor::from_fn([t, t], |ix| {
        let d = ix[0] as f64 - ix[1] as f64;
        (-(d * d) / s2).exp()
    }))
}

/// `-(i-j)^2`, shape `[tq, tk]`.
fn negative_squared_distance(tq: usize, tk: usize) -> Tensor {
    Tensor::from_fn([tq, tk], |ix| {
        let d = ix[0] as f64 - ix[1] as f64;
        -(d * d)
    })
}

/// Effective `sigma = softplus(raw) + sigma_min`, same shape as `raw`.
pub fn effective_sigma(tape: &mut Tape, sigma_raw: Var, sigma_min: f64) -> Var {
    let sp = tape.softplus(sigma_raw);
    tape.add_scalar(sp, sigma_min)
}

/// `-(i-j)^2 / sigma^2` on the tape: `[tq, tk]` for a shared sigma of shape
/// `[1]`, or `[E, tq, tk]` for per-head sigmas of shape `[E]`.
pub fn log_distance_weights(tape: &mut Tape, sigma: Var, tq: usize, tk: usize) -> Result<Var> {
    let n = tape.value(sigma).numel();
    let sigma = if n > 1 { tape.reshape(sigma, &[n, 1, 1])? } else { sigma };
    let s2 = tape.square(sigma);
    let inv = tape.recip(s2);
    let dist = tape.constant(negative_squared_distance(tq, tk));
    tape.mul(dist, inv)
}

/// Gaussian weight matrix on the tape; differentiable in `sigma`.
pub fn gaussian_weights(tape: &mut Tape, sigma: Var, tq: usize, tk: usize) -> Result<Var> {
    let logw = log_distance_weights(tape, sigma, tq, tk)?;
    Ok(tape.exp(logw))
}

/// `S` from `q`, `k` of shape `[B, E, T, d]`. Returns `(C, S)`.
pub fn attention_scores(
    tape: &mut Tape,
    q: Var,
    k: Var,
    scheme: AttentionScheme,
    sigma: Option<Var>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 4 || ks.len() != 4 || qs[..2] != ks[..2] || qs[3] != ks[3] {
        return Err(Error::shape("attention_scores", &qs, &ks));
    }
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    let c = tape.scale(raw, 1.0 / (qs[3] as f64).sqrt());
    let (tq, tk) = (qs[2], ks[2]);
    let s = match scheme {
        AttentionScheme::Vanilla => c,
        AttentionScheme::GaussianWeighted => {
            let sigma = sigma.ok_or_else(|| Error::Contract("gaussian scheme needs sigma".into()))?;
            let g = gaussian_weights(tape, sigma, tq, tk)?;
            tape.mul(c, g)?
        }
        AttentionScheme::AdditiveBias => {
            let sigma = sigma.ok_or_else(|| Error::Contract("additive bias needs sigma".into()))?;
            let b = log_distance_weights(tape, sigma, tq, tk)?;
            tape.add(c, b)?
        }
    };
    Ok((c, s))
}

/// Row-stochastic attention weights from scores.
pub fn attention_weights(tape: &mut Tape, scores: Var, abs_scores: bool) -> Var {
    let s = if abs_scores { tape.abs(scores) } else { scores };
    tape.softmax_rows(s)
}

/// Intermediate values of one attention call, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, T, D]`
    pub output: Var,
    /// `C = Q K^T / sqrt(d)`, `[B, E, T, T]`
    pub raw_scores: Var,
    /// `S` after the scheme is applied
    pub scores: Var,
    /// softmax rows
    pub weights: Var,
}

/// `[B, T, D] -> [B, E, T, d]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, E, T, d] -> [B, T, D]`
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Multi-head attention with queries from `query_in` and keys/values from
/// `kv_in`, both `[B, T, D]`. Self-attention passes the same tensor twice.
pub fn multi_head_attention(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    p: &AttentionParams,
    query_in: Var,
    kv_in: Var,
) -> Result<AttentionOutput> {
    let qs = tape.shape(query_in).to_vec();
    let ks = tape.shape(kv_in).to_vec();
    if qs.len() != 3 || qs[2] != cfg.model_dim || ks.len() != 3 || ks[0] != qs[0] || ks[2] != qs[2] {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let q = tape.matmul(query_in, p.w_q)?;
    let k = tape.matmul(kv_in, p.w_k)?;
    let v = tape.matmul(kv_in, p.w_v)?;
    let q = split_heads(tape, q, cfg.heads)?;
    let k = split_heads(tape, k, cfg.heads)?;
    let v = split_heads(tape, v, cfg.heads)?;
    let sigma = match (cfg.scheme.uses_sigma(), p.sigma_raw) {
        (true, Some(raw)) => Some(effective_sigma(tape, raw, cfg.sigma_min)),
        (true, None) => return Err(Error::Contract(format!("{} scheme requires sigma_raw", cfg.scheme))),
        (false, _) => None,
    };
    let (raw_scores, scores) = attention_scores(tape, q, k, cfg.scheme, sigma)?;
    let weights = attention_weights(tape, scores, cfg.abs_scores);
    let heads_out = tape.matmul(weights, v)?;
    let merged = merge_heads(tape, heads_out)?;
    let output = tape.matmul(merged, p.w_o)?;
    Ok(AttentionOutput {
        output,
        raw_scores,
        scores,
        weights,
    })
}

/// Self-attention over `h: [B, T, D]`.
pub fn gsa_attention(tape: &mut Tape, cfg: &AttentionConfig, p: &AttentionParams, h: Var) -> Result<AttentionOutput> {
    multi_head_attention(tape, cfg, p, h, h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::check_param_gradients;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
    }

    fn store_for(cfg: &AttentionConfig, sigma: f64, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        cfg.init(&mut s, "attn", sigma, &mut rng).unwrap();
        s
    }

    #[test]
    fn gaussian_matrix_values() {
        let g = gaussian_weight_matrix(5, 2.0).unwrap();
        for i in 0..5 {
            assert_eq!(g.at(&[i, i]), 1.0);
        }
        assert!((g.at(&[0, 2]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.at(&[0, 2]) - 0.367879).abs() < 1e-6);
        let wide = gaussian_weight_matrix(4, 1e6).unwrap();
        assert!(wide.data().iter().all(|&v| v >= 1.0 - 1e-9));
    }

    #[test]
    fn gaussian_matrix_domain_errors() {
        assert!(matches!(gaussian_weight_matrix(3, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_weight_matrix(3, -1.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_weight_matrix(0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn taped_gaussian_matches_plain() {
        let mut tape = Tape::new();
        let sigma = tape.constant(Tensor::scalar(2.7));
        let g = gaussian_weights(&mut tape, sigma, 6, 6).unwrap();
        let plain = gaussian_weight_matrix(6, 2.7).unwrap();
        for (a, b) in tape.value(g).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_g_derivative_by_hand() {
        // T=2, sigma=1: two off-diagonal entries exp(-1/sigma^2), each with
        // derivative exp(-1/sigma^2) * 2 / sigma^3.
        let mut tape = Tape::new();
        let sigma = tape.param(Tensor::scalar(1.0));
        let g = gaussian_weights(&mut tape, sigma, 2, 2).unwrap();
        let s = tape.sum(g);
        let grad = tape.backward(s).unwrap().wrt(sigma).item().unwrap();
        let expected = 2.0 * (-1.0f64).exp() * 2.0;
        assert!((grad - expected).abs() < 1e-14, "{grad} vs {expected}");
    }

    #[test]
    fn scores_per_scheme() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 2, 4, 3], 1, 1.0));
        let k = tape.constant(random(&[1, 2, 4, 3], 2, 1.0));
        let wide = tape.constant(Tensor::scalar(1e6));
        let (c, s) = attention_scores(&mut tape, q, k, AttentionScheme::GaussianWeighted, Some(wide)).unwrap();
        let (cv, sv) = (tape.value(c).clone(), tape.value(s).clone());
        for (a, b) in cv.data().iter().zip(sv.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let narrow = tape.constant(Tensor::scalar(0.7));
        let (c, s) = attention_scores(&mut tape, q, k, AttentionScheme::GaussianWeighted, Some(narrow)).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                assert_eq!(tape.value(c).at(&[0, h, i, i]), tape.value(s).at(&[0, h, i, i]));
            }
        }
        let (c, s) = attention_scores(&mut tape, q, k, AttentionScheme::Vanilla, None).unwrap();
        assert_eq!(tape.value(c), tape.value(s));
    }

    #[test]
    fn sign_preserved_by_weighting_but_not_by_bias() {
        // C[0,1] = -1 with g = 0.5 -> -0.5; the additive bias pushes a
        // small positive score below zero.
        let mut tape = Tape::new();
        let sigma_g = (1.0 / 2f64.ln()).sqrt(); // exp(-1/sigma^2) = 0.5
        let sigma = tape.constant(Tensor::scalar(sigma_g));
        let g = gaussian_weights(&mut tape, sigma, 2, 2).unwrap();
        assert!((tape.value(g).at(&[0, 1]) - 0.5).abs() < 1e-15);
        let c = tape.constant(Tensor::new([2, 2], vec![1.0, -1.0, 0.3, 1.0]).unwrap());
        let s = tape.mul(c, g).unwrap();
        assert!((tape.value(s).at(&[0, 1]) + 0.5).abs() < 1e-15);
        let b = log_distance_weights(&mut tape, sigma, 2, 2).unwrap();
        let sb = tape.add(c, b).unwrap();
        assert!(tape.value(c).at(&[1, 0]) > 0.0);
        assert!(tape.value(sb).at(&[1, 0]) < 0.0);
    }

    #[test]
    fn single_frame_output_is_projected_value() {
        for scheme in AttentionScheme::ALL {
            let cfg = AttentionConfig::new(4, 2, scheme).unwrap();
            let store = store_for(&cfg, 2.0, 3);
            let h = random(&[1, 1, 4], 4, 1.0);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let p = AttentionParams::bind(&bound, "attn", &cfg).unwrap();
            let x = tape.constant(h.clone());
            let out = gsa_attention(&mut tape, &cfg, &p, x).unwrap();
            assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
            let v = h.matmul(store.get("attn.w_v").unwrap()).unwrap();
            let expected = v.matmul(store.get("attn.w_o").unwrap()).unwrap();
            for (a, b) in tape.value(out.output).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        for scheme in AttentionScheme::ALL {
            let cfg = AttentionConfig::new(8, 2, scheme).unwrap();
            let store = store_for(&cfg, 1.5, 5);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let p = AttentionParams::bind(&bound, "attn", &cfg).unwrap();
            let x = tape.constant(random(&[2, 7, 8], 6, 2.0));
            let out = gsa_attention(&mut tape, &cfg, &p, x).unwrap();
            for row in tape.value(out.weights).data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    /// Scalar-by-scalar evaluation for B=1, E=1, T=2, D=2 with hand-set weights.
    #[test]
    fn tiny_case_matches_hand_computation() {
        let w_q = [[1.0, 0.5], [-0.5, 1.0]];
        let w_k = [[0.3, -1.0], [0.8, 0.2]];
        let w_v = [[1.0, 2.0], [0.0, -1.0]];
        let w_o = [[0.5, 0.0], [0.25, 1.0]];
        let h = [[0.6, -1.2], [1.5, 0.4]];
        let sigma: f64 = 1.3;
        let mat = |m: [[f64; 2]; 2]| Tensor::new([2, 2], m.iter().flatten().copied().collect()).unwrap();

        let proj = |x: [f64; 2], w: [[f64; 2]; 2]| [x[0] * w[0][0] + x[1] * w[1][0], x[0] * w[0][1] + x[1] * w[1][1]];
        let q: Vec<[f64; 2]> = h.iter().map(|&x| proj(x, w_q)).collect();
        let k: Vec<[f64; 2]> = h.iter().map(|&x| proj(x, w_k)).collect();
        let v: Vec<[f64; 2]> = h.iter().map(|&x| proj(x, w_v)).collect();
        let mut expected = Vec::new();
        for i in 0..2 {
            let mut s = [0.0; 2];
            for j in 0..2 {
                let c = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt();
                let dij = i as f64 - j as f64;
                s[j] = (c * (-(dij * dij) / (sigma * sigma)).exp()).abs();
            }
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            let o = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
            expected.extend(proj(o, w_o));
        }

        let mut cfg = AttentionConfig::new(2, 1, AttentionScheme::GaussianWeighted).unwrap();
        cfg.sigma_min = 0.0;
        let mut store = ParamStore::new();
        store.insert("attn.w_q", mat(w_q));
        store.insert("attn.w_k", mat(w_k));
        store.insert("attn.w_v", mat(w_v));
        store.insert("attn.w_o", mat(w_o));
        store.insert("attn.sigma_raw", Tensor::scalar(softplus_inverse(sigma)));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = AttentionParams::bind(&bound, "attn", &cfg).unwrap();
        let x = tape.constant(Tensor::new([1, 2, 2], h.iter().flatten().copied().collect()).unwrap());
        let out = gsa_attention(&mut tape, &cfg, &p, x).unwrap();
        for (a, b) in tape.value(out.output).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn readout_loss(cfg: &AttentionConfig, h: &Tensor, w: &Tensor) -> impl Fn(&mut Tape, &Bound) -> Result<Var> {
        let cfg = cfg.clone();
        let h = h.clone();
        let w = w.clone();
        move |tape, bound| {
            let p = AttentionParams::bind(bound, "attn", &cfg)?;
            let x = tape.constant(h.clone());
            let out = gsa_attention(tape, &cfg, &p, x)?;
            let w = tape.constant(w.clone());
            let y = tape.mul(out.output, w)?;
            Ok(tape.sum(y))
        }
    }

    #[test]
    fn all_parameters_pass_gradient_check() {
        for scheme in AttentionScheme::ALL {
            for per_head in [false, true] {
                let mut cfg = AttentionConfig::new(6, 2, scheme).unwrap();
                cfg.per_head_sigma = per_head;
                let store = store_for(&cfg, 3.0, 7);
                let h = random(&[2, 5, 6], 8, 1.5);
                let w = random(&[2, 5, 6], 9, 1.0);
                let report = check_param_gradients(
                    &store,
                    |_| true,
                    &GradCheckOptions::default(),
                    readout_loss(&cfg, &h, &w),
                )
                .unwrap();
                assert!(report.passes(1e-4), "{scheme} per_head={per_head}\n{report}");
                // no dead paths
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let loss = readout_loss(&cfg, &h, &w)(&mut tape, &bound).unwrap();
                let grads = tape.backward(loss).unwrap();
                for (name, g) in store.names().zip(bound.grads(&tape, &grads)) {
                    assert!(g.max_abs() > 0.0, "{scheme}: {name} has zero gradient");
                }
            }
        }
    }

    #[test]
    fn sigma_gradient_is_zero_for_single_frame() {
        let cfg = AttentionConfig::new(4, 2, AttentionScheme::GaussianWeighted).unwrap();
        let store = store_for(&cfg, 3.0, 10);
        let h = random(&[1, 1, 4], 11, 1.0);
        let w = random(&[1, 1, 4], 12, 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = readout_loss(&cfg, &h, &w)(&mut tape, &bound).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(bound.var("attn.sigma_raw").unwrap());
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn gaussian_gradient_wrt_sigma_input() {
        let report = check_gradients(
            &[("sigma", Tensor::scalar(1.7))],
            &GradCheckOptions::default(),
            |tape, v| {
                let g = gaussian_weights(tape, v[0], 5, 5)?;
                let w = tape.constant(random(&[5, 5], 13, 1.0));
                let y = tape.mul(g, w)?;
                Ok(tape.sum(y))
            },
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report}");
    }

    #[test]
    fn sigma_round_trips_through_raw() {
        for s in [0.2, 1.0, 3.0, 125.0] {
            let raw = sigma_to_raw(s, 0.1).unwrap();
            assert!((raw_to_sigma(raw, 0.1) - s).abs() < 1e-12 * s.max(1.0));
        }
        assert!(sigma_to_raw(0.05, 0.1).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(
            "gsa".parse::<AttentionScheme>().unwrap(),
            AttentionScheme::GaussianWeighted
        );
        assert_eq!(
            "T-AB".parse::<AttentionScheme>().unwrap(),
            AttentionScheme::AdditiveBias
        );
        assert_eq!("o-t".parse::<AttentionScheme>().unwrap(), AttentionScheme::Vanilla);
        assert!("rope".parse::<AttentionScheme>().is_err());
        assert!(AttentionConfig::new(6, 4, AttentionScheme::Vanilla).is_err());
    }
}
