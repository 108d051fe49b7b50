//! Flat `key = value` run configuration.
//!
//! Resolution order is profile defaults, then the config file, then
//! command-line overrides. Unknown keys are rejected. The resolved
//! configuration renders back to the same text format so it can be echoed
//! next to every output.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Imputation, PipelineOptions, SplitFractions, SynthOptions, Units};
use crate::error::{Error, Result};
use crate::metrics::RmseMode;
use crate::model::{ModelConfig, OutputMode, Profile};
use crate::train::{AdamConfig, TrainConfig};

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Usage(format!("profile must be desk or paper, got {other:?}"))),
        }
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(OutputMode::Absolute),
            "offset" => Ok(OutputMode::Offset),
            other => Err(Error::Usage(format!("output_mode must be absolute or offset, got {other:?}"))),
        }
    }
}

impl FromStr for RmseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(RmseMode::Euclidean),
            "per_coordinate" => Ok(RmseMode::PerCoordinate),
            other => Err(Error::Usage(format!("rmse_mode must be euclidean or per_coordinate, got {other:?}"))),
        }
    }
}

/// Synthetic dataset family: one kind, or all three interleaved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthSet {
    Kind(crate::data::SynthKind),
    Mixed,
}

impl FromStr for SynthSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(SynthSet::Mixed)
        } else {
            s.parse().map(SynthSet::Kind)
        }
    }
}

impl std::fmt::Display for SynthSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthSet::Kind(k) => write!(f, "{k}"),
            SynthSet::Mixed => f.write_str("mixed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// `ffn_dim` of 0 until resolved means four times the model dimension.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub units: Units,
    pub pipeline: PipelineOptions,
    pub split: SplitFractions,
    pub rmse_mode: RmseMode,
    pub ablation_neighbors: Vec<usize>,
    pub ablation_se: Vec<bool>,
    pub ablation_epochs: usize,
    pub ablation_budget_s: f64,
    pub synth_count: usize,
    pub synth_set: SynthSet,
    pub synth: SynthOptions,
}

fn on_off(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(Error::Usage(format!("expected on/off, got {other:?}"))),
    }
}

fn show_on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Usage(format!("invalid value {s:?} for {key}")))
}

fn list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(|p| f(p.trim())).collect()
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let mut model = ModelConfig::for_profile(profile, 10);
        model.seed = 0;
        model.ffn_dim = 0;
        let train = TrainConfig {
            adam: AdamConfig {
                lr: match profile {
                    Profile::Paper => 0.01,
                    Profile::Desk => DESK_LR,
                },
                ..AdamConfig::default()
            },
            clip_norm: match profile {
                Profile::Paper => None,
                Profile::Desk => Some(DESK_CLIP_NORM),
            },
            ..TrainConfig::default()
        };
        RunConfig {
            profile,
            seed: 0,
            model,
            train,
            units: Units::Feet,
            pipeline: PipelineOptions::default(),
            split: SplitFractions::default(),
            rmse_mode: RmseMode::Euclidean,
            ablation_neighbors: vec![5, 10, 15],
            ablation_se: vec![true, false],
            ablation_epochs: 2,
            ablation_budget_s: 120.0,
            synth_count: 60,
            synth_set: SynthSet::Mixed,
            synth: SynthOptions::default(),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "profile" => {
                let p: Profile = v.parse()?;
                if p != self.profile {
                    return Err(Error::Usage(format!(
                        "profile {v} conflicts with the already selected {}",
                        self.profile_name()
                    )));
                }
            }
            "seed" => self.seed = num(key, v)?,
            "neighbors" => m.agents = num(key, v)?,
            "obs_len" => m.obs_len = num(key, v)?,
            "pred_len" => m.pred_len = num(key, v)?,
            "model_dim" => m.model_dim = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "layers" => m.layers = num(key, v)?,
            "ffn_dim" => m.ffn_dim = num(key, v)?,
            "dropout" => m.dropout = num(key, v)?,
            "se" => m.use_se = on_off(v)?,
            "se_reduction" => m.se_reduction = num(key, v)?,
            "se_on_decoder" => m.se_on_decoder = on_off(v)?,
            "se_bias" => m.se_bias = on_off(v)?,
            "embed_hidden" => {
                m.embed_hidden = match v {
                    "none" => None,
                    n => Some(num(key, n)?),
                }
            }
            "position_scale" => m.position_scale = num(key, v)?,
            "output_mode" => m.output_mode = v.parse()?,
            "epochs" => self.train.epochs = num(key, v)?,
            "batch" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "beta1" => self.train.adam.beta1 = num(key, v)?,
            "beta2" => self.train.adam.beta2 = num(key, v)?,
            "eps" => self.train.adam.eps = num(key, v)?,
            "shuffle" => self.train.shuffle = on_off(v)?,
            "target_loss" => {
                self.train.target_loss = match v {
                    "none" => None,
                    x => Some(num(key, x)?),
                }
            }
            "clip_norm" => {
                self.train.clip_norm = match v {
                    "none" => None,
                    x => Some(num(key, x)?),
                }
            }
            "units" => self.units = v.parse()?,
            "resample_factor" => self.pipeline.resample_factor = num(key, v)?,
            "stride" => self.pipeline.stride = num(key, v)?,
            "imputation" => self.pipeline.imputation = v.parse::<Imputation>()?,
            "split_train" => self.split.train = num(key, v)?,
            "split_val" => self.split.val = num(key, v)?,
            "split_test" => self.split.test = num(key, v)?,
            "rmse_mode" => self.rmse_mode = v.parse()?,
            "ablation_neighbors" => self.ablation_neighbors = list(v, |p| num(key, p))?,
            "ablation_se" => self.ablation_se = list(v, on_off)?,
            "ablation_epochs" => self.ablation_epochs = num(key, v)?,
            "ablation_budget_s" => self.ablation_budget_s = num(key, v)?,
            "synth_count" => self.synth_count = num(key, v)?,
            "synth_kind" => self.synth_set = v.parse()?,
            "synth_noise" => self.synth.noise = num(key, v)?,
            "synth_vehicles" => self.synth.vehicles = num(key, v)?,
            other => return Err(Error::Usage(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    fn profile_name(&self) -> &'static str {
        match self.profile {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    /// Builds the final configuration. `profile` from the command line wins
    /// over a `profile` key in the file.
    pub fn resolve(file: &[(String, String, u64)], flags: &[(String, String)], profile_flag: Option<Profile>) -> Result<Self> {
        let from_file = file.iter().find(|(k, _, _)| k == "profile").map(|(_, v, _)| v.parse::<Profile>()).transpose()?;
        let profile = profile_flag.or(from_file).unwrap_or(Profile::Desk);
        let mut cfg = RunConfig::defaults(profile);
        for (k, v, line) in file {
            if k == "profile" {
                continue;
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Usage(msg) => Error::Usage(format!("config line {line}: {msg}")),
                other => other,
            })?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    fn finish(&mut self) -> Result<()> {
        if self.model.ffn_dim == 0 {
            self.model.ffn_dim = 4 * self.model.model_dim;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.pipeline.agents = self.model.agents;
        self.pipeline.obs_len = self.model.obs_len;
        self.pipeline.pred_len = self.model.pred_len;
        self.synth.agents = self.model.agents;
        self.synth.obs_len = self.model.obs_len;
        self.synth.frames = self.model.obs_len + self.model.pred_len;
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.model.dropout)));
        }
        if self.ablation_neighbors.is_empty() || self.ablation_se.is_empty() {
            return Err(Error::Config("ablation lists must be non-empty".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, one per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::from("# resolved run configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("profile", self.profile_name().into());
        kv("seed", self.seed.to_string());
        kv("neighbors", m.agents.to_string());
        kv("obs_len", m.obs_len.to_string());
        kv("pred_len", m.pred_len.to_string());
        kv("model_dim", m.model_dim.to_string());
        kv("heads", m.heads.to_string());
        kv("layers", m.layers.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("dropout", m.dropout.to_string());
        kv("se", show_on_off(m.use_se).into());
        kv("se_reduction", m.se_reduction.to_string());
        kv("se_on_decoder", show_on_off(m.se_on_decoder).into());
        kv("se_bias", show_on_off(m.se_bias).into());
        kv("embed_hidden", m.embed_hidden.map_or("none".into(), |h| h.to_string()));
        kv("position_scale", m.position_scale.to_string());
        kv(
            "output_mode",
            match m.output_mode {
                OutputMode::Absolute => "absolute",
                OutputMode::Offset => "offset",
            }
            .into(),
        );
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch_size.to_string());
        kv("lr", t.adam.lr.to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("eps", t.adam.eps.to_string());
        kv("shuffle", show_on_off(t.shuffle).into());
        kv("target_loss", t.target_loss.map_or("none".into(), |x| x.to_string()));
        kv("clip_norm", t.clip_norm.map_or("none".into(), |x| x.to_string()));
        kv("units", self.units.to_string());
        kv("resample_factor", self.pipeline.resample_factor.to_string());
        kv("stride", self.pipeline.stride.to_string());
        kv(
            "imputation",
            match self.pipeline.imputation {
                Imputation::HoldLast => "hold_last",
                Imputation::ZeroFill => "zero_fill",
            }
            .into(),
        );
        kv("split_train", self.split.train.to_string());
        kv("split_val", self.split.val.to_string());
        kv("split_test", self.split.test.to_string());
        kv(
            "rmse_mode",
            match self.rmse_mode {
                RmseMode::Euclidean => "euclidean",
                RmseMode::PerCoordinate => "per_coordinate",
            }
            .into(),
        );
        kv(
            "ablation_neighbors",
            self.ablation_neighbors.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        );
        kv(
            "ablation_se",
            self.ablation_se.iter().map(|&b| show_on_off(b)).collect::<Vec<_>>().join(","),
        );
        kv("ablation_epochs", self.ablation_epochs.to_string());
        kv("ablation_budget_s", self.ablation_budget_s.to_string());
        kv("synth_count", self.synth_count.to_string());
        kv("synth_kind", self.synth_set.to_string());
        kv("synth_noise", self.synth.noise.to_string());
        kv("synth_vehicles", self.synth.vehicles.to_string());
        s
    }
}

/// Learning rate used by the desk profile.
pub const DESK_LR: f64 = 1e-3;

/// Global gradient-norm limit used by the desk profile.
pub const DESK_CLIP_NORM: f64 = 1.0;

/// Parses `key = value` lines; `#` starts a comment. Returns `(key, value, line)`.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String, u64)>> {
    let mut out: Vec<(String, String, u64)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| Error::format(Some(line), format!("expected key = value, got {content:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(Some(line), "empty key"));
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::format(Some(line), format!("key {k} already set on line {first}")));
        }
        out.push((k.to_string(), v.to_string(), line));
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> Result<Vec<(String, String, u64)>> {
    let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
    parse_config_text(&text).map_err(|e| match e {
        Error::Format { line, message, .. } => Error::Format {
            path: Some(path.to_path_buf()),
            line,
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_flags() {
        let file = parse_config_text("# comment\nepochs = 7 # trailing\nmodel_dim = 32\nheads = 4\n").unwrap();
        let flags = vec![("epochs".to_string(), "9".to_string())];
        let cfg = RunConfig::resolve(&file, &flags, None).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.model.model_dim, 32);
        assert_eq!(cfg.model.ffn_dim, 128);
        assert_eq!(cfg.profile, Profile::Desk);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let file = parse_config_text("epochs = 3\nlearning_rate = 0.1\n").unwrap();
        let err = RunConfig::resolve(&file, &[], None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert_eq!(err.kind(), crate::ErrorKind::Usage);
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse_config_text("epochs 3"), Err(Error::Format { line: Some(1), .. })));
        assert!(parse_config_text("a = 1\na = 2").is_err());
    }

    #[test]
    fn text_round_trip() {
        let file = parse_config_text("profile = paper\nse = off\nablation_neighbors = 5, 15\n").unwrap();
        let cfg = RunConfig::resolve(&file, &[], None).unwrap();
        assert_eq!(cfg.model.model_dim, 512);
        let again = RunConfig::resolve(&parse_config_text(&cfg.to_text()).unwrap(), &[], None).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.ablation_neighbors, [5, 15]);
        assert!(!again.model.use_se);
    }

    #[test]
    fn profile_flag_overrides_file() {
        let file = parse_config_text("profile = paper\n").unwrap();
        let cfg = RunConfig::resolve(&file, &[], Some(Profile::Desk)).unwrap();
        assert_eq!(cfg.model.model_dim, 64);
    }
}
