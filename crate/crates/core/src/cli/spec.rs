//! `key = value` experiment files mapping onto [`TrainConfig`] and [`SynthConfig`].
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Relative paths resolve against the file's directory. Every key is
//! optional; [`ExperimentSpec::to_text`] writes all of them in canonical order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::train::{ScheduleConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Lambda breakpoints follow `total_steps` (20% / 80%).
    pub lambda_auto: bool,
    /// EMA decay follows the quantizer kind.
    pub ema_decay_auto: bool,
    /// Bottleneck width follows the subspace width.
    pub bottleneck_auto: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            lambda_auto: true,
            ema_decay_auto: true,
            bottleneck_auto: false,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad list element `{}`", p.trim())))
        .collect()
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}` as a number"))
}

fn parse_auto<T: FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
    if s == "auto" {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

fn parse_none<T: FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
    if s == "none" {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parses spec text; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let mut spec = Self::default();
        spec.train.manifest = base_dir.join(&spec.train.manifest);
        let mut seen: Vec<String> = Vec::new();
        let mut lambda_steps: (Option<u64>, Option<u64>) = (None, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigParse {
                path: origin.to_string(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            spec.set(key, value, base_dir, &mut lambda_steps)
                .map_err(|m| err(format!("{key}: {m}")))?;
        }
        spec.lambda_auto = lambda_steps == (None, None);
        let scaled = ScheduleConfig::scaled(spec.train.total_steps);
        let l = &mut spec.train.loss.lambda;
        if !spec.lambda_auto {
            l.start_step = lambda_steps.0.unwrap_or(scaled.start_step);
            l.end_step = lambda_steps.1.unwrap_or(scaled.end_step);
        }
        spec.resolve();
        Ok(spec)
    }

    /// Re-derives fields that depend on others (the `auto` values).
    pub fn resolve(&mut self) {
        if self.bottleneck_auto {
            self.train.model.bottleneck_dim = Some(self.train.model.default_bottleneck_dim());
        }
        if self.ema_decay_auto {
            self.train.quantizer.ema_decay = self.train.quantizer.kind.default_ema_decay();
        }
        if self.lambda_auto {
            let s = ScheduleConfig::scaled(self.train.total_steps);
            self.train.loss.lambda.start_step = s.start_step;
            self.train.loss.lambda.end_step = s.end_step;
        }
    }

    fn set(
        &mut self,
        key: &str,
        v: &str,
        base: &Path,
        lambda_steps: &mut (Option<u64>, Option<u64>),
    ) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => t.seed = parse_num(v)?,
            "manifest" => {
                let p = PathBuf::from(v);
                t.manifest = if p.is_absolute() { p } else { base.join(p) };
            }
            "synth.n_states" => s.n_states = parse_num(v)?,
            "synth.feature_dim" => s.feature_dim = parse_num(v)?,
            "synth.frames_per_state" => s.frames_per_state = parse_num(v)?,
            "synth.n_sequences" => s.n_sequences = parse_num(v)?,
            "synth.seq_len_min" => s.seq_len_min = parse_num(v)?,
            "synth.seq_len_max" => s.seq_len_max = parse_num(v)?,
            "synth.noise_std" => s.noise_std = parse_num(v)?,
            "synth.seed" => s.seed = parse_num(v)?,
            "model.feature_dim" => t.model.feature_dim = parse_num(v)?,
            "model.hidden_dim" => t.model.hidden_dim = parse_num(v)?,
            "model.embed_dim" => t.model.embed_dim = parse_num(v)?,
            "model.downsample" => t.model.downsample = parse_num(v)?,
            "model.n_residual_units" => t.model.n_residual_units = parse_num(v)?,
            "model.bottleneck_dim" => {
                self.bottleneck_auto = v == "auto";
                if !self.bottleneck_auto {
                    t.model.bottleneck_dim = parse_none(v)?;
                }
            }
            "model.n_subspaces" => t.model.n_subspaces = parse_num(v)?,
            "quantizer.kind" => t.quantizer.kind = v.parse()?,
            "quantizer.sizes" => {
                t.quantizer.sizes = if v == "none" { Vec::new() } else { parse_list(v)? }
            }
            "quantizer.dims" => {
                t.quantizer.dims = if v == "auto" { None } else { Some(parse_list(v)?) }
            }
            "quantizer.ema" => t.quantizer.ema = parse_bool(v)?,
            "quantizer.ema_decay" => {
                let d = parse_auto(v)?;
                self.ema_decay_auto = d.is_none();
                t.quantizer.ema_decay = d.unwrap_or(t.quantizer.ema_decay);
            }
            "quantizer.dead_restart" => t.quantizer.dead_restart = parse_bool(v)?,
            "quantizer.compose_cap" => t.quantizer.compose_cap = parse_num(v)?,
            "loss.alpha" => t.loss.alpha = parse_num(v)?,
            "loss.beta" => t.loss.beta = parse_num(v)?,
            "loss.dual" => t.dual = parse_bool(v)?,
            "loss.lambda_start" => t.loss.lambda.start_value = parse_num(v)?,
            "loss.lambda_end" => t.loss.lambda.end_value = parse_num(v)?,
            "loss.lambda_start_step" => lambda_steps.0 = parse_auto(v)?,
            "loss.lambda_end_step" => lambda_steps.1 = parse_auto(v)?,
            "optim.lr" => t.optimizer.lr = parse_num(v)?,
            "optim.beta1" => t.optimizer.beta1 = parse_num(v)?,
            "optim.beta2" => t.optimizer.beta2 = parse_num(v)?,
            "optim.eps" => t.optimizer.eps = parse_num(v)?,
            "optim.weight_decay" => t.optimizer.weight_decay = parse_num(v)?,
            "train.total_steps" => t.total_steps = parse_num(v)?,
            "train.batch_frames" => t.batch_frames = parse_num(v)?,
            "train.window_frames" => t.window_frames = parse_num(v)?,
            "train.eval_every" => t.eval_every = parse_num(v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let q = &t.quantizer;
        let l = &t.loss.lambda;
        let step = |v: u64| if self.lambda_auto { "auto".to_string() } else { v.to_string() };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("seed", t.seed.to_string());
        kv("manifest", t.manifest.display().to_string());
        kv("synth.n_states", s.n_states.to_string());
        kv("synth.feature_dim", s.feature_dim.to_string());
        kv("synth.frames_per_state", s.frames_per_state.to_string());
        kv("synth.n_sequences", s.n_sequences.to_string());
        kv("synth.seq_len_min", s.seq_len_min.to_string());
        kv("synth.seq_len_max", s.seq_len_max.to_string());
        kv("synth.noise_std", s.noise_std.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("model.feature_dim", t.model.feature_dim.to_string());
        kv("model.hidden_dim", t.model.hidden_dim.to_string());
        kv("model.embed_dim", t.model.embed_dim.to_string());
        kv("model.downsample", t.model.downsample.to_string());
        kv("model.n_residual_units", t.model.n_residual_units.to_string());
        kv(
            "model.bottleneck_dim",
            if self.bottleneck_auto {
                "auto".into()
            } else {
                t.model.bottleneck_dim.map_or("none".into(), |b| b.to_string())
            },
        );
        kv("model.n_subspaces", t.model.n_subspaces.to_string());
        kv("quantizer.kind", q.kind.to_string());
        kv(
            "quantizer.sizes",
            if q.sizes.is_empty() { "none".into() } else { list(&q.sizes) },
        );
        kv("quantizer.dims", q.dims.as_deref().map_or("auto".into(), list));
        kv("quantizer.ema", q.ema.to_string());
        kv(
            "quantizer.ema_decay",
            if self.ema_decay_auto { "auto".into() } else { q.ema_decay.to_string() },
        );
        kv("quantizer.dead_restart", q.dead_restart.to_string());
        kv("quantizer.compose_cap", q.compose_cap.to_string());
        kv("loss.alpha", t.loss.alpha.to_string());
        kv("loss.beta", t.loss.beta.to_string());
        kv("loss.dual", t.dual.to_string());
        kv("loss.lambda_start", l.start_value.to_string());
        kv("loss.lambda_end", l.end_value.to_string());
        kv("loss.lambda_start_step", step(l.start_step));
        kv("loss.lambda_end_step", step(l.end_step));
        kv("optim.lr", t.optimizer.lr.to_string());
        kv("optim.beta1", t.optimizer.beta1.to_string());
        kv("optim.beta2", t.optimizer.beta2.to_string());
        kv("optim.eps", t.optimizer.eps.to_string());
        kv("optim.weight_decay", t.optimizer.weight_decay.to_string());
        kv("train.total_steps", t.total_steps.to_string());
        kv("train.batch_frames", t.batch_frames.to_string());
        kv("train.window_frames", t.window_frames.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        out
    }
}
