//! Flat `key=value` run configuration.
//!
//! Keys are grouped by prefix: `model.*` (see [`ModelSpec::set`]), `train.*`,
//! `data.*`, `loss.*` and `output.*`. A config file holds one `key = value`
//! per line; `#` starts a comment. Command-line overrides take the form
//! `--key=value` and are applied after the file. The `TGSA_SEED`
//! environment variable overrides `train.seed` last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionScheme;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelSpec;
use crate::optim::AdamConfig;
use crate::signal::StftConfig;
use crate::synth::{CleanKind, NoiseKind, SynthRecipe};

pub const SEED_ENV: &str = "TGSA_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Utterances per step.
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Learning-rate multiplier for the attention width parameters.
    pub sigma_lr_scale: f64,
    /// Validation interval in steps; the final step is always validated.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 4,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            sigma_lr_scale: 1.0,
            validate_every: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset root holding `train/` and `eval/`.
    pub dir: PathBuf,
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
    pub train_snr: Vec<f64>,
    pub eval_snr: Vec<f64>,
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_utterances: 8,
            eval_utterances: 2,
            duration_s: 1.0,
            sample_rate: 16_000,
            clean_kind: CleanKind::HarmonicTones,
            noise_kind: NoiseKind::White,
            train_snr: vec![-5.0, 5.0],
            eval_snr: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0],
            fft_size: 256,
            hop: 64,
        }
    }
}

impl DataConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.dir.join("eval")
    }

    pub fn stft(&self) -> Result<StftConfig> {
        let cfg = StftConfig::new(self.fft_size, self.hop)?;
        cfg.check_invertible()?;
        Ok(cfg)
    }

    fn recipe(&self, utterances: usize, snr: &[f64]) -> SynthRecipe {
        SynthRecipe {
            num_utterances: utterances,
            duration_s: self.duration_s,
            sample_rate: self.sample_rate,
            clean_kind: self.clean_kind,
            noise_kind: self.noise_kind,
            snr_db: snr.to_vec(),
        }
    }

    pub fn train_recipe(&self) -> SynthRecipe {
        self.recipe(self.train_utterances, &self.train_snr)
    }

    pub fn eval_recipe(&self) -> SynthRecipe {
        self.recipe(self.eval_utterances, &self.eval_snr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            output: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.lr" => t.adam.lr = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam.eps = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            "train.sigma_lr_scale" => t.sigma_lr_scale = parse(key, value)?,
            "train.validate_every" => t.validate_every = parse(key, value)?,
            "data.dir" => d.dir = PathBuf::from(value),
            "data.train_utterances" => d.train_utterances = parse(key, value)?,
            "data.eval_utterances" => d.eval_utterances = parse(key, value)?,
            "data.duration_s" => d.duration_s = parse(key, value)?,
            "data.sample_rate" => d.sample_rate = parse(key, value)?,
            "data.clean_kind" => d.clean_kind = value.parse()?,
            "data.noise_kind" => d.noise_kind = value.parse()?,
            "data.train_snr" => d.train_snr = parse_list(key, value)?,
            "data.eval_snr" => d.eval_snr = parse_list(key, value)?,
            "data.fft_size" => d.fft_size = parse(key, value)?,
            "data.hop" => d.hop = parse(key, value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.si_sdr" => self.loss.si_sdr = parse(key, value)?,
            "output.dir" => self.output = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.model.to_meta();
        let t = &self.train;
        let d = &self.data;
        let rest: Vec<(&str, String)> = vec![
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.lr", t.adam.lr.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.adam_eps", t.adam.eps.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.sigma_lr_scale", t.sigma_lr_scale.to_string()),
            ("train.validate_every", t.validate_every.to_string()),
            ("data.dir", d.dir.display().to_string()),
            ("data.train_utterances", d.train_utterances.to_string()),
            ("data.eval_utterances", d.eval_utterances.to_string()),
            ("data.duration_s", d.duration_s.to_string()),
            ("data.sample_rate", d.sample_rate.to_string()),
            ("data.clean_kind", d.clean_kind.to_string()),
            ("data.noise_kind", d.noise_kind.to_string()),
            ("data.train_snr", join(&d.train_snr)),
            ("data.eval_snr", join(&d.eval_snr)),
            ("data.fft_size", d.fft_size.to_string()),
            ("data.hop", d.hop.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.si_sdr", self.loss.si_sdr.to_string()),
            ("output.dir", self.output.display().to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `--key=value` (or `key=value`) arguments in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let kv = a.strip_prefix("--").unwrap_or(a);
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {a:?} is not of the form --key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `TGSA_SEED` when `value` is set.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let stft = self.data.stft()?;
        if self.model.input_dim != stft.bins() {
            return Err(Error::Config(format!(
                "model.input_dim {} does not match data.fft_size {} ({} bins)",
                self.model.input_dim,
                self.data.fft_size,
                stft.bins()
            )));
        }
        if self.train.batch == 0 || self.train.validate_every == 0 {
            return Err(Error::Config(
                "train.batch and train.validate_every must be >= 1".into(),
            ));
        }
        if !(self.train.adam.lr > 0.0) || !(self.train.clip_norm > 0.0) || !(self.train.sigma_lr_scale >= 0.0) {
            return Err(Error::Config(
                "train.lr and train.clip_norm must be > 0, train.sigma_lr_scale >= 0".into(),
            ));
        }
        if !(self.loss.alpha >= 0.0) {
            return Err(Error::Config("loss.alpha must be >= 0".into()));
        }
        self.data.train_recipe().validate()?;
        self.data.eval_recipe().validate()
    }

    /// The same run with a different attention scheme and that scheme's
    /// default score handling.
    pub fn with_scheme(&self, scheme: AttentionScheme) -> RunConfig {
        let mut c = self.clone();
        c.model.scheme = scheme;
        c.model.abs_scores = None;
        c
    }
}
