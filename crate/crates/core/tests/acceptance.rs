//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgsa::attention::AttentionScheme;
use tgsa::checkpoint::Checkpoint;
use tgsa::checks::{self, Check, GRAD_TOL};
use tgsa::config::{RunConfig, TrainConfig};
use tgsa::harness::{cmd_compare, cmd_synth, COMPARED};
use tgsa::loss::LossConfig;
use tgsa::model::{Model, ModelSpec, Topology};
use tgsa::signal::StftConfig;
use tgsa::synth::{synthesize, CleanKind, NoiseKind, SynthRecipe};
use tgsa::train::{effective_sigmas, prepare, sigma_gradient_check, train, Prepared, TrainEvent};

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[Check], budget: Option<Duration>, elapsed: Duration) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let in_time = budget.is_none_or(|b| elapsed < b);
    let mut detail = format!(
        "checks={} failed={} elapsed_s={:.1}",
        checks.len(),
        failed.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail.push_str(&format!(" [{}]", failed.join("; ")));
    }
    if !in_time {
        detail.push_str(" over time budget");
    }
    Outcome {
        passed: failed.is_empty() && in_time,
        detail,
    }
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let checks = [
        checks::op_gradients(None),
        checks::encoder_layer_gradients(None),
        checks::complex_layer_gradients(None),
        checks::real_model_gradients(None),
        checks::complex_model_gradients(None),
        checks::loss_through_istft_gradients(None),
    ];
    for c in &checks {
        println!("    {c}");
    }
    from_checks(&checks, Some(Duration::from_secs(120)), t0.elapsed())
}

fn gaussian_suite() -> Outcome {
    let t0 = Instant::now();
    let checks = [
        checks::gaussian_matrix_properties(),
        checks::gaussian_wide_limit(),
        checks::gaussian_sigma_derivative(),
    ];
    from_checks(&checks, None, t0.elapsed())
}

fn sign_preservation() -> Outcome {
    let t0 = Instant::now();
    from_checks(
        &[checks::sign_preservation(), checks::additive_bias_sign_flip()],
        None,
        t0.elapsed(),
    )
}

fn abs_softmax() -> Outcome {
    let t0 = Instant::now();
    from_checks(&[checks::abs_softmax_negation()], None, t0.elapsed())
}

fn signal_pipeline() -> Outcome {
    let t0 = Instant::now();
    from_checks(
        &[
            checks::stft_round_trip(),
            checks::mix_snr(),
            checks::noisy_phase_identity(),
        ],
        None,
        t0.elapsed(),
    )
}

fn complex_mask() -> Outcome {
    let t0 = Instant::now();
    from_checks(
        &[checks::complex_mask_oracle(), checks::complex_mask_identity()],
        None,
        t0.elapsed(),
    )
}

fn one_utterance(clean: CleanKind, duration_s: f64) -> Vec<Prepared> {
    let recipe = SynthRecipe {
        num_utterances: 1,
        duration_s,
        sample_rate: 16_000,
        clean_kind: clean,
        noise_kind: NoiseKind::White,
        snr_db: vec![0.0],
    };
    prepare(&synthesize(&recipe, 0, 0).unwrap(), &StftConfig::default()).unwrap()
}

fn toy_learning() -> Outcome {
    let t0 = Instant::now();
    let data = one_utterance(CleanKind::HarmonicTones, 2.0);
    let input = data[0].input_scores().unwrap().sdr_db;
    let cfg = TrainConfig {
        steps: 200,
        batch: 1,
        validate_every: 50,
        ..Default::default()
    };
    let mut passed = true;
    let mut detail = format!("input_sdr_db={input:.3}");
    for topology in [Topology::RealEncoder, Topology::ComplexDecoder] {
        let spec = ModelSpec::desk(topology, AttentionScheme::GaussianWeighted);
        let model = Model::init(spec, data[0].noisy_spec.frames(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let run = train(model, &data, &[], &cfg, &LossConfig::default(), None, |_| Ok(())).unwrap();
        let gain = run.best_val_sdr - input;
        passed &= gain >= 10.0;
        detail.push_str(&format!(" {topology}_gain_db={gain:.3}"));
    }
    let elapsed = t0.elapsed();
    passed &= elapsed < Duration::from_secs(600);
    detail.push_str(&format!(" elapsed_s={:.1}", elapsed.as_secs_f64()));
    Outcome { passed, detail }
}

fn sigma_learning() -> Outcome {
    // broadband bursts decorrelate within a few frames
    let data = one_utterance(CleanKind::FilteredNoiseBursts, 0.5);
    let mut spec = ModelSpec::desk(Topology::RealEncoder, AttentionScheme::GaussianWeighted);
    spec.sigma_init = Some(16.0);
    let model = Model::init(spec, data[0].noisy_spec.frames(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let initial = effective_sigmas(&model);
    let cfg = TrainConfig {
        steps: 150,
        batch: 1,
        validate_every: 1000,
        sigma_lr_scale: 100.0,
        ..Default::default()
    };
    let loss = LossConfig::default();
    let mut spot = Vec::new();
    let run = train(model, &data, &[], &cfg, &loss, None, |e| {
        if let TrainEvent::BeforeStep { step, model, batch } = e {
            if matches!(step, 0 | 50 | 100) {
                spot.push((step, sigma_gradient_check(model, batch, &loss)?.max_rel_error()));
            }
        }
        Ok(())
    })
    .unwrap();
    let trained = effective_sigmas(&run.model);
    let mut passed = spot.len() == 3 && spot.iter().all(|&(_, e)| e < GRAD_TOL);
    let mut detail = String::new();
    for ((name, before), (_, after)) in initial.iter().zip(&trained) {
        for (b, a) in before.iter().zip(after) {
            let moved = (a - b) / b;
            passed &= moved.abs() >= 0.10;
            detail.push_str(&format!("{name}:{b:.3}->{a:.3}({:+.1}%) ", 100.0 * moved));
        }
    }
    for (step, e) in &spot {
        detail.push_str(&format!("fd@{step}={e:.2e} "));
    }
    Outcome {
        passed,
        detail: detail.trim_end().to_string(),
    }
}

fn protocol_reproduction() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        format!("--data.dir={}", tmp.path().join("data").display()),
        format!("--output.dir={}", tmp.path().join("compare").display()),
        "--data.train_utterances=4".into(),
        "--data.eval_utterances=1".into(),
        "--data.duration_s=0.5".into(),
        "--train.steps=40".into(),
        "--train.validate_every=20".into(),
    ])
    .unwrap();
    let mut log = Vec::new();
    cmd_synth(&cfg, &mut log).unwrap();
    let report = cmd_compare(&cfg, &mut log).unwrap();
    let tsv = std::fs::read_to_string(&report.table).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    let columns = 1 + 2 * cfg.data.eval_snr.len();
    let shaped = lines.len() == 1 + COMPARED.len()
        && lines.iter().all(|l| l.split('\t').count() == columns)
        && report.snr_db == cfg.data.eval_snr;
    let census_ok =
        report.census.extra.len() == cfg.model.num_layers && report.census.extra_scalars == cfg.model.num_layers;
    let flagged = String::from_utf8(log)
        .unwrap()
        .lines()
        .any(|l| l.starts_with("flag=tgsa_ge_ot "));
    let means: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}={:.3}", r.scheme.label(), r.mean_sdr_db))
        .collect();
    Outcome {
        passed: shaped && census_ok && flagged,
        detail: format!(
            "table={}x{} census_extra={} {} tgsa_ge_ot={} (soft, seed-sensitive)",
            lines.len() - 1,
            columns - 1,
            report.census.extra_scalars,
            means.join(" "),
            report.tgsa_ge_ot
        ),
    }
}

fn determinism() -> Outcome {
    let data = one_utterance(CleanKind::HarmonicTones, 0.5);
    let cfg = TrainConfig {
        steps: 11,
        batch: 1,
        seed: 3,
        validate_every: 1000,
        ..Default::default()
    };
    let run = || {
        let spec = ModelSpec::desk(Topology::ComplexDecoder, AttentionScheme::GaussianWeighted);
        let model = Model::init(
            spec,
            data[0].noisy_spec.frames(),
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )
        .unwrap();
        train(model, &data, &[], &cfg, &LossConfig::default(), None, |_| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    let diff = (a.curve[10].loss.combined - b.curve[10].loss.combined).abs();

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    let ckpt = a.model.to_checkpoint(&[("k".into(), "v".into())]);
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let bytes_equal = loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    let model = Model::from_checkpoint(&loaded).unwrap();
    let params_equal = model
        .params
        .iter()
        .zip(a.model.params.iter())
        .all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && model.params.len() == a.model.params.len();
    Outcome {
        passed: diff <= 1e-12 && bytes_equal && params_equal && model.spec == a.model.spec,
        detail: format!(
            "step10_loss={:.15} diff={diff:e} checkpoint_bytes_equal={bytes_equal} params_bitwise={params_equal}",
            a.curve[10].loss.combined
        ),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient_integrity", gradient_integrity),
        ("gaussian_matrix_suite", gaussian_suite),
        ("sign_preservation", sign_preservation),
        ("abs_softmax_negation", abs_softmax),
        ("signal_pipeline", signal_pipeline),
        ("complex_mask_fidelity", complex_mask),
        ("toy_learning", toy_learning),
        ("sigma_learning_signal", sigma_learning),
        ("protocol_reproduction", protocol_reproduction),
        ("determinism_and_serialization", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        if !outcome.passed {
            failures += 1;
        }
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name} {}", i + 1, outcome.detail);
    }
    println!("acceptance: {} failed", failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
