//! Flat key-value run configuration.
//!
//! A config file is TOML without tables: one `key = value` per line. Every
//! key is optional and falls back to the default shown by
//! [`RunConfig::echo`]. Unknown keys are rejected. The environment variable
//! `ADVSHIELD_SEED` overrides `seed`.
//!
//! ```toml
//! seed = 7
//! steps = 30
//! eta = 0.047058823529411764
//! lowpass = false
//! purifiers = ["jpeg:75", "bits:3"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::{LossConfig, LossWeights};
use crate::noise::{AttackConfig, BlurConfig, LowpassConfig};
use crate::purify::Purifier;
use crate::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ADVSHIELD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub eta: f64,
    pub gamma: f64,
    pub steps: usize,
    pub random_start: f64,

    pub proj: bool,
    pub attn: bool,
    pub mtcnn: bool,
    pub id: bool,
    pub lambda_proj: f64,
    pub lambda_attn: f64,
    pub lambda_mtcnn: f64,
    pub lambda_id: f64,

    pub t_var: f64,
    pub t_prob: f64,
    pub beta: f64,
    pub k: f64,
    pub d_cell: f64,
    pub d_min: f64,
    pub d_land: Option<f64>,

    pub blur: bool,
    pub blur_tau: f64,
    pub blur_dilation: usize,
    pub blur_kernel: usize,
    pub blur_sigma: f64,

    pub lowpass: bool,
    pub lowpass_patch: usize,
    pub lowpass_threshold: u16,

    /// Purifier specs such as `jpeg:75`, `bits:3`, `resize:0.5:area`.
    pub purifiers: Vec<String>,

    pub input: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_attack(&AttackConfig::default())
    }
}

impl RunConfig {
    /// Config mirroring `cfg`, with every loss whose weight is nonzero enabled.
    pub fn from_attack(cfg: &AttackConfig) -> Self {
        let (w, defaults) = (cfg.loss.weights, LossWeights::default());
        let pick = |v: f64, d: f64| if v == 0.0 { d } else { v };
        RunConfig {
            seed: cfg.seed,
            eta: cfg.eta,
            gamma: cfg.gamma,
            steps: cfg.steps,
            random_start: cfg.random_start,
            proj: w.proj != 0.0,
            attn: w.attn != 0.0,
            mtcnn: w.mtcnn != 0.0,
            id: w.id != 0.0,
            lambda_proj: pick(w.proj, defaults.proj),
            lambda_attn: pick(w.attn, defaults.attn),
            lambda_mtcnn: pick(w.mtcnn, defaults.mtcnn),
            lambda_id: pick(w.id, defaults.id),
            t_var: cfg.loss.t_var,
            t_prob: cfg.loss.t_prob,
            beta: cfg.loss.beta,
            k: cfg.loss.k,
            d_cell: cfg.loss.d_cell,
            d_min: cfg.loss.d_min,
            d_land: cfg.loss.d_land,
            blur: cfg.blur.enabled,
            blur_tau: cfg.blur.tau,
            blur_dilation: cfg.blur.dilation,
            blur_kernel: cfg.blur.kernel,
            blur_sigma: cfg.blur.sigma,
            lowpass: cfg.lowpass.enabled,
            lowpass_patch: cfg.lowpass.patch,
            lowpass_threshold: cfg.lowpass.threshold,
            purifiers: Purifier::standard_grid()
                .iter()
                .map(|p| p.to_string())
                .collect(),
            input: None,
            weights: None,
            output_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Replaces the seed with `value` when present.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))
            })?;
            self.check_seed()?;
        }
        Ok(())
    }

    /// TOML integers are signed, so larger seeds could not be echoed or read back.
    fn check_seed(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed must be at most {}, got {}",
                i64::MAX,
                self.seed
            )));
        }
        Ok(())
    }

    /// Applies `ADVSHIELD_SEED` from the process environment.
    pub fn apply_env(&mut self) -> Result<()> {
        let value = std::env::var(SEED_ENV).ok();
        self.override_seed(value.as_deref())
    }

    /// Loss weights after the toggles: a disabled term gets weight zero.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        if !(self.proj || self.attn || self.mtcnn || self.id) {
            return Err(Error::Config("all losses are disabled".into()));
        }
        LossWeights::new(
            on(self.proj, self.lambda_proj),
            on(self.attn, self.lambda_attn),
            on(self.mtcnn, self.lambda_mtcnn),
            on(self.id, self.lambda_id),
        )
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            eta: self.eta,
            gamma: self.gamma,
            steps: self.steps,
            random_start: self.random_start,
            seed: self.seed,
            blur: BlurConfig {
                enabled: self.blur,
                tau: self.blur_tau,
                dilation: self.blur_dilation,
                kernel: self.blur_kernel,
                sigma: self.blur_sigma,
            },
            lowpass: LowpassConfig {
                enabled: self.lowpass,
                patch: self.lowpass_patch,
                threshold: self.lowpass_threshold,
            },
            loss: LossConfig {
                weights: self.loss_weights()?,
                t_var: self.t_var,
                t_prob: self.t_prob,
                beta: self.beta,
                k: self.k,
                d_cell: self.d_cell,
                d_min: self.d_min,
                d_land: self.d_land,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn purifier_list(&self) -> Result<Vec<Purifier>> {
        self.purifiers.iter().map(|p| p.parse()).collect()
    }

    /// Checks every value and that each configured path exists.
    pub fn validate(&self) -> Result<()> {
        self.check_seed()?;
        self.attack_config()?;
        self.purifier_list()?;
        for (key, path) in [("input", &self.input), ("weights", &self.weights)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{key}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The effective configuration in the same flat format it is read from.
    /// Panics on a seed that [`RunConfig::validate`] rejects.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_echo() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        assert_eq!(cfg.attack_config().unwrap(), AttackConfig::default());
        assert_eq!(cfg.purifier_list().unwrap(), Purifier::standard_grid());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("steps = 5\nlowpass = false\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert!(!cfg.lowpass);
        assert_eq!(cfg.eta, 12.0 / 255.0);
    }

    #[test]
    fn rejects_unknown_keys_and_wrong_types() {
        assert!(RunConfig::parse("stepz = 5").is_err());
        assert!(RunConfig::parse("steps = \"five\"").is_err());
        assert!(RunConfig::parse("[section]\nsteps = 5").is_err());
    }

    #[test]
    fn toggles_zero_weights_and_all_off_is_rejected() {
        let mut cfg = RunConfig::parse("attn = false\nid = false").unwrap();
        let w = cfg.loss_weights().unwrap();
        assert_eq!(w.as_array(), [-1.0, 0.0, 1.0, 0.0]);
        cfg.proj = false;
        cfg.mtcnn = false;
        assert!(cfg.loss_weights().is_err());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        cfg.override_seed(None).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.override_seed(Some("x")).is_err());
        assert!(cfg.override_seed(Some(&u64::MAX.to_string())).is_err());
        cfg.seed = u64::MAX;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let cfg = RunConfig {
            input: Some("/nonexistent/advshield.png".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
