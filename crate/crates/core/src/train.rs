//! Mini-batch training with per-utterance tapes, validation and
//! checkpoint selection.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attention::raw_to_sigma;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, EvalScores, LossConfig, LossReport, PerceptualLoss};
use crate::model::Model;
use crate::optim::{clip_global_norm, Adam};
use crate::params::{check_param_gradients, Bound};
use crate::signal::{stft, Spectrogram, StftBasis, StftConfig, Waveform};
use crate::synth::Utterance;
use crate::tensor::gradcheck::{GradCheck, GradCheckOptions};
use crate::tensor::{Tape, Tensor, Var};

/// An utterance with its analysis precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub snr_db: f64,
    pub clean: Waveform,
    pub noisy: Waveform,
    pub noisy_spec: Spectrogram,
    pub basis: Arc<StftBasis>,
}

impl Prepared {
    pub fn clean_tensor(&self) -> Tensor {
        Tensor::new([self.clean.len()], self.clean.samples.clone()).expect("nonempty waveform")
    }

    /// Scores of the unprocessed noisy input.
    pub fn input_scores(&self) -> Result<EvalScores> {
        EvalScores::compute(&self.noisy.samples, &self.clean.samples)
    }
}

pub fn prepare(utterances: &[Utterance], cfg: &StftConfig) -> Result<Vec<Prepared>> {
    cfg.check_invertible()?;
    let mut bases: HashMap<usize, Arc<StftBasis>> = HashMap::new();
    for u in utterances {
        if u.clean.len() != u.noisy.len() || u.clean.sample_rate != u.noisy.sample_rate {
            return Err(Error::Domain(format!("{}: clean and noisy do not match", u.id)));
        }
        if !bases.contains_key(&u.noisy.len()) {
            bases.insert(u.noisy.len(), Arc::new(StftBasis::new(*cfg, u.noisy.len())?));
        }
    }
    utterances
        .par_iter()
        .map(|u| {
            Ok(Prepared {
                id: u.id.clone(),
                snr_db: u.snr_db,
                clean: u.clean.clone(),
                noisy: u.noisy.clone(),
                noisy_spec: stft(&u.noisy, cfg)?,
                basis: bases[&u.noisy.len()].clone(),
            })
        })
        .collect()
}

/// Loss of one utterance on `tape`.
pub fn utterance_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    item: &Prepared,
    loss: &LossConfig,
    hook: Option<&dyn PerceptualLoss>,
) -> Result<(Var, LossReport)> {
    let est = model.estimate_waveform(tape, bound, &item.noisy_spec, &item.basis)?;
    combined_loss(tape, est, &item.clean_tensor(), loss, hook)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let hook = if reports.iter().all(|r| r.pesq_hook_loss.is_some()) {
        Some(reports.iter().map(|r| r.pesq_hook_loss.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    LossReport {
        sdr_loss: reports.iter().map(|r| r.sdr_loss).sum::<f64>() / n,
        pesq_hook_loss: hook,
        combined: reports.iter().map(|r| r.combined).sum::<f64>() / n,
        alpha: reports[0].alpha,
    }
}

fn first_non_finite<'a>(names: impl Iterator<Item = &'a str>, tensors: &[Tensor]) -> Option<String> {
    names
        .zip(tensors)
        .find(|(_, t)| !t.all_finite())
        .map(|(n, _)| n.to_string())
}

/// Mean loss and mean parameter gradients (store order) over `items`.
/// Each utterance runs on its own tape; results are summed in item order,
/// so the outcome does not depend on thread scheduling.
pub fn batch_gradients(
    model: &Model,
    items: &[&Prepared],
    loss: &LossConfig,
    hook: Option<&dyn PerceptualLoss>,
) -> Result<(Vec<Tensor>, LossReport)> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_item: Vec<Result<(Vec<Tensor>, LossReport)>> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (l, report) = utterance_loss(model, &mut tape, &bound, item, loss, hook)?;
            if !report.combined.is_finite() {
                return Ok((Vec::new(), report));
            }
            let g = tape.backward(l)?;
            Ok((bound.grads(&tape, &g), report))
        })
        .collect();
    let mut sum: Option<Vec<Tensor>> = None;
    let mut reports = Vec::with_capacity(items.len());
    let scale = 1.0 / items.len() as f64;
    for r in per_item {
        let (grads, report) = r?;
        reports.push(report);
        if grads.is_empty() {
            continue;
        }
        match &mut sum {
            None => sum = Some(grads.into_iter().map(|g| g.map(|v| v * scale)).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y * scale);
                }
            }
        }
    }
    let report = mean_report(&reports);
    let grads = sum.unwrap_or_default();
    Ok((grads, report))
}

/// Effective attention widths per `sigma_raw` parameter.
pub fn effective_sigmas(model: &Model) -> Vec<(String, Vec<f64>)> {
    model
        .sigma_names()
        .into_iter()
        .map(|n| {
            let raw = model.params.get(&n).expect("listed parameter");
            let s = raw
                .data()
                .iter()
                .map(|&r| raw_to_sigma(r, model.spec.sigma_min))
                .collect();
            (n, s)
        })
        .collect()
}

/// Finite-difference check of the mean loss over `items` with respect to
/// every `sigma_raw` parameter.
pub fn sigma_gradient_check(model: &Model, items: &[&Prepared], loss: &LossConfig) -> Result<GradCheck> {
    check_param_gradients(
        &model.params,
        |n| n.ends_with(".sigma_raw"),
        &GradCheckOptions::default(),
        |tape, bound| {
            let mut total: Option<Var> = None;
            for item in items {
                let (l, _) = utterance_loss(model, tape, bound, item, loss, None)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let t = total.ok_or_else(|| Error::Contract("no items".into()))?;
            Ok(tape.scale(t, 1.0 / items.len() as f64))
        },
    )
}

/// Per-utterance scores of the enhanced output.
pub fn evaluate(model: &Model, items: &[Prepared]) -> Result<Vec<EvalScores>> {
    items
        .par_iter()
        .map(|item| {
            let out = model.enhance(&item.noisy, &item.noisy_spec.config())?;
            EvalScores::compute(&out.samples, &item.clean.samples)
        })
        .collect()
}

pub fn mean_sdr(scores: &[EvalScores]) -> f64 {
    scores.iter().map(|s| s.sdr_db).sum::<f64>() / scores.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
    pub grad_norm: f64,
    /// Mean effective sigma per `sigma_raw` parameter after the update.
    pub sigma: Vec<f64>,
}

impl StepRecord {
    pub fn record(&self) -> String {
        let mut s = format!("step={} {} grad_norm={:.6}", self.step, self.loss, self.grad_norm);
        for (i, v) in self.sigma.iter().enumerate() {
            s.push_str(&format!(" sigma{i}={v:.6}"));
        }
        s
    }
}

pub enum TrainEvent<'a> {
    /// Before the update of `step`, with the batch it will use.
    BeforeStep {
        step: usize,
        model: &'a Model,
        batch: &'a [&'a Prepared],
    },
    Step(&'a StepRecord),
    Validated {
        step: usize,
        sdr_db: f64,
        best: bool,
    },
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub best: Model,
    pub best_step: usize,
    pub best_val_sdr: f64,
    pub curve: Vec<StepRecord>,
    pub validations: Vec<(usize, f64)>,
    /// Hex SHA-256 of the batch id sequence.
    pub data_order_hash: String,
}

/// Batch index sequence: the training set is reshuffled every epoch by a
/// generator seeded from `seed`.
pub fn batch_schedule(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    (0..steps)
        .map(|_| {
            (0..batch)
                .map(|_| {
                    if pos == order.len() {
                        order = (0..n).collect();
                        order.shuffle(&mut rng);
                        pos = 0;
                    }
                    pos += 1;
                    order[pos - 1]
                })
                .collect()
        })
        .collect()
}

pub fn train(
    mut model: Model,
    train_set: &[Prepared],
    val_set: &[Prepared],
    cfg: &TrainConfig,
    loss: &LossConfig,
    hook: Option<&dyn PerceptualLoss>,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainRun> {
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    let schedule = batch_schedule(train_set.len(), cfg.batch, cfg.steps, cfg.seed);
    let mut hasher = Sha256::new();
    let lr_scale: Vec<f64> = model
        .params
        .names()
        .map(|n| {
            if n.ends_with(".sigma_raw") {
                cfg.sigma_lr_scale
            } else {
                1.0
            }
        })
        .collect();
    let mut opt = Adam::new(cfg.adam.clone(), &model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);

    for (step, idx) in schedule.iter().enumerate() {
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
        for b in &batch {
            hasher.update(b.id.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(b"--\n");
        let tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        if let Some(name) = first_non_finite(model.params.names(), &tensors) {
            return Err(Error::NonFinite { step, tensor: name });
        }
        observer(TrainEvent::BeforeStep {
            step,
            model: &model,
            batch: &batch,
        })?;
        let (mut grads, report) = batch_gradients(&model, &batch, loss, hook)?;
        if !report.combined.is_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: "loss".into(),
            });
        }
        if let Some(name) = first_non_finite(model.params.names(), &grads) {
            return Err(Error::NonFinite {
                step,
                tensor: format!("grad({name})"),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        opt.update(&mut model.params, &grads, &lr_scale)?;
        let sigma = effective_sigmas(&model)
            .into_iter()
            .map(|(_, s)| s.iter().sum::<f64>() / s.len() as f64)
            .collect();
        let rec = StepRecord {
            step,
            loss: report,
            grad_norm,
            sigma,
        };
        observer(TrainEvent::Step(&rec))?;
        curve.push(rec);

        let done = step + 1;
        if done % cfg.validate_every == 0 || done == cfg.steps {
            let sdr = mean_sdr(&evaluate(&model, val_set)?);
            let is_best = sdr > best.2;
            if is_best {
                best = (model.clone(), done, sdr);
            }
            validations.push((done, sdr));
            observer(TrainEvent::Validated {
                step: done,
                sdr_db: sdr,
                best: is_best,
            })?;
        }
    }
    if cfg.steps == 0 {
        best.2 = mean_sdr(&evaluate(&model, val_set)?);
    }
    let hash = hasher.finalize();
    Ok(TrainRun {
        model,
        best: best.0,
        best_step: best.1,
        best_val_sdr: best.2,
        curve,
        validations,
        data_order_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionScheme;
    use crate::model::{ModelSpec, Topology};
    use crate::synth::{synthesize, CleanKind, NoiseKind, SynthRecipe};

    fn tiny_data(n: usize) -> Vec<Prepared> {
        let recipe = SynthRecipe {
            num_utterances: n,
            duration_s: 0.05,
            sample_rate: 8000,
            clean_kind: CleanKind::HarmonicTones,
            noise_kind: NoiseKind::White,
            snr_db: vec![0.0],
        };
        prepare(&synthesize(&recipe, 5, 0).unwrap(), &StftConfig::new(32, 8).unwrap()).unwrap()
    }

    fn tiny_model(topology: Topology) -> Model {
        let spec = ModelSpec {
            num_layers: 1,
            model_dim: 8,
            heads: 2,
            ff_dim: 8,
            input_dim: 17,
            ..ModelSpec::desk(topology, AttentionScheme::GaussianWeighted)
        };
        Model::init(spec, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            validate_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let s = batch_schedule(5, 2, 5, 1);
        let flat: Vec<usize> = s.concat();
        let mut first: Vec<usize> = flat[..5].to_vec();
        first.sort();
        assert_eq!(first, [0, 1, 2, 3, 4]);
        assert_eq!(s, batch_schedule(5, 2, 5, 1));
        assert_ne!(s, batch_schedule(5, 2, 5, 2));
    }

    #[test]
    fn batch_gradient_is_mean_of_items() {
        let data = tiny_data(2);
        let m = tiny_model(Topology::RealEncoder);
        let loss = LossConfig::default();
        let (g, r) = batch_gradients(&m, &[&data[0], &data[1]], &loss, None).unwrap();
        let (g0, r0) = batch_gradients(&m, &[&data[0]], &loss, None).unwrap();
        let (g1, r1) = batch_gradients(&m, &[&data[1]], &loss, None).unwrap();
        assert!((r.combined - 0.5 * (r0.combined + r1.combined)).abs() < 1e-12);
        for k in 0..g.len() {
            for i in 0..g[k].numel() {
                let want = 0.5 * (g0[k].data()[i] + g1[k].data()[i]);
                assert!((g[k].data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let data = tiny_data(3);
        for topology in [Topology::RealEncoder, Topology::ComplexDecoder] {
            let run = || {
                train(
                    tiny_model(topology),
                    &data,
                    &[],
                    &cfg(4),
                    &LossConfig::default(),
                    None,
                    |_| Ok(()),
                )
                .unwrap()
            };
            let a = run();
            let b = run();
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.model, b.model);
            assert_eq!(a.data_order_hash, b.data_order_hash);
            assert_eq!(a.validations.len(), 2);
            let best = a.validations.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(a.best_val_sdr, best);
            assert_eq!(a.curve[0].sigma.len(), model_sigma_count(topology));
        }
    }

    fn model_sigma_count(t: Topology) -> usize {
        match t {
            Topology::RealEncoder => 1,
            Topology::ComplexDecoder => 4,
        }
    }

    #[test]
    fn nan_parameter_aborts_with_its_name() {
        let data = tiny_data(2);
        let mut m = tiny_model(Topology::RealEncoder);
        m.params.get_mut("layers.0.ff1.w").unwrap().data_mut()[3] = f64::NAN;
        let err = train(m, &data, &[], &cfg(2), &LossConfig::default(), None, |_| Ok(())).unwrap_err();
        match err {
            Error::NonFinite { step, tensor } => {
                assert_eq!(step, 0);
                assert_eq!(tensor, "layers.0.ff1.w");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sigma_check_on_tiny_model() {
        let data = tiny_data(2);
        let m = tiny_model(Topology::RealEncoder);
        let report = sigma_gradient_check(&m, &[&data[0], &data[1]], &LossConfig::default()).unwrap();
        assert_eq!(report.inputs.len(), 1);
        assert!(report.passes(1e-4), "{report}");
    }
}
