//! Run configuration: defaults, key=value file parsing and MTDM_* environment
//! overrides, applied in that order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Regime, Target};
use crate::model::{Ablation, ModelConfig, TrenMode};
use crate::training::{LossWeights, TrainConfig};

pub const ENV_PREFIX: &str = "MTDM_";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub initial_angle_deg: f64,
    pub angle_stride_deg: f64,
    pub mode: TrenMode,
    pub regime: Regime,
    pub no_dm: bool,
    pub no_tren: bool,
    pub no_tln: bool,
    pub no_reset_gate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        RunConfig {
            dim: 200,
            window: 10,
            epochs: 30,
            lr: 0.001,
            clip_norm: 1.0,
            patience: 5,
            dropout: 0.2,
            seed: 0,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            initial_angle_deg: w.initial_angle_deg,
            angle_stride_deg: w.angle_stride_deg,
            mode: TrenMode::Standard,
            regime: Regime::Default,
            no_dm: false,
            no_tren: false,
            no_tln: false,
            no_reset_gate: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dim" => self.dim = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "lambda3" => self.lambda3 = parse_num(key, v)?,
            "lambda4" => self.lambda4 = parse_num(key, v)?,
            "initial_angle_deg" => self.initial_angle_deg = parse_num(key, v)?,
            "angle_stride_deg" => self.angle_stride_deg = parse_num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "standard" => TrenMode::Standard,
                    "recurrent" => TrenMode::Recurrent,
                    _ => {
                        return Err(Error::Config(format!(
                            "mode: expected standard or recurrent, got {v:?}"
                        )))
                    }
                }
            }
            "regime" => {
                self.regime = match v {
                    "default" => Regime::Default,
                    "ground_truth" => Regime::GroundTruth,
                    _ => {
                        return Err(Error::Config(format!(
                            "regime: expected default or ground_truth, got {v:?}"
                        )))
                    }
                }
            }
            "no_dm" => self.no_dm = parse_bool(key, v)?,
            "no_tren" => self.no_tren = parse_bool(key, v)?,
            "no_tln" => self.no_tln = parse_bool(key, v)?,
            "no_reset_gate" => self.no_reset_gate = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a key=value file; '#' starts a comment, blank lines are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply MTDM_* variables; MTDM_DIM=100 overrides `dim`, and so on.
    /// Unknown MTDM_ variables are rejected to catch typos.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            // dataset location is consumed elsewhere, not a config key
            if rest == "ICEWS14" {
                continue;
            }
            self.apply(&rest.to_lowercase(), &value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// The fully resolved configuration in file syntax, suitable for
    /// echoing at startup and re-loading later.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            TrenMode::Standard => "standard",
            TrenMode::Recurrent => "recurrent",
        };
        let regime = match self.regime {
            Regime::Default => "default",
            Regime::GroundTruth => "ground_truth",
        };
        let _ = write!(
            out,
            "dim={}\nwindow={}\nepochs={}\nlr={}\nclip_norm={}\npatience={}\ndropout={}\nseed={}\n\
             lambda1={}\nlambda2={}\nlambda3={}\nlambda4={}\n\
             initial_angle_deg={}\nangle_stride_deg={}\nmode={mode}\nregime={regime}\n\
             no_dm={}\nno_tren={}\nno_tln={}\nno_reset_gate={}\n",
            self.dim,
            self.window,
            self.epochs,
            self.lr,
            self.clip_norm,
            self.patience,
            self.dropout,
            self.seed,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.initial_angle_deg,
            self.angle_stride_deg,
            self.no_dm,
            self.no_tren,
            self.no_tln,
            self.no_reset_gate,
        );
        out
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_dm: self.no_dm,
            no_tren: self.no_tren,
            no_tln: self.no_tln,
            no_reset_gate: self.no_reset_gate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            window: self.window,
            lr: self.lr,
            clip_norm: self.clip_norm,
            patience: self.patience,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                lambda4: self.lambda4,
                initial_angle_deg: self.initial_angle_deg,
                angle_stride_deg: self.angle_stride_deg,
            },
            dropout: self.dropout,
            seed: self.seed,
            mode: self.mode,
            ablation: self.ablation(),
            skip_validation: false,
        }
    }

    pub fn eval_options(&self, target: Target) -> EvalOptions {
        EvalOptions {
            regime: self.regime,
            target,
            window: self.window,
            mode: self.mode,
            ablation: self.ablation(),
            hard_gate: true,
        }
    }

    pub fn model_config(&self, num_entities: usize, num_relations_aug: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(num_entities, num_relations_aug, self.dim);
        mc.dropout = self.dropout;
        mc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_env_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "# comment\ndim = 64\nlr=0.01  # inline").unwrap();
        drop(f);

        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.lr, 0.01);

        cfg.apply_env(vec![
            ("MTDM_DIM".to_string(), "32".to_string()),
            ("OTHER".to_string(), "ignored".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.dim, 32);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("dimension", "5").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
        let err = cfg
            .apply_env(vec![("MTDM_WAT".to_string(), "1".to_string())])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn resolved_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply("mode", "recurrent").unwrap();
        cfg.apply("no_tln", "true").unwrap();
        cfg.apply("lambda4", "0.01").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.conf");
        fs::write(&path, cfg.resolved()).unwrap();
        let mut again = RunConfig::default();
        again.apply_file(&path).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("dim", "many").is_err());
        assert!(cfg.apply("no_dm", "maybe").is_err());
        assert!(cfg.apply("regime", "gt").is_err());
    }
}
