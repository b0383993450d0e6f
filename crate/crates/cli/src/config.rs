//! JSON run configuration for training-type commands.

use std::path::{Path, PathBuf};

use cae_core::cae::{CaeConfig, Tradeoff};
use cae_core::nn::SurrogateMode;
use cae_core::trainer::{EnsembleSpec, FinetuneConfig, PowerDecay, Preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub base_filters: usize,
    pub residual_blocks: usize,
    pub surrogate: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub plateau_threshold: f64,
    pub window: usize,
    pub max_steps: usize,
    pub initial_coeffs: usize,
    pub divergence_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSection {
    pub alpha: f64,
    pub code_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Extra tradeoffs per model, indexed like `ensemble`.
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of PPM/PNG training images; when absent, `synthetic` is used.
    pub data_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub net: NetSection,
    pub train: TrainSection,
    pub ensemble: Vec<PresetSection>,
    pub finetune: FinetuneSection,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (cae, train, spec, ft) = match profile {
            Profile::Desk => (
                CaeConfig::desk(),
                TrainConfig::desk(Tradeoff::Alpha(0.05)),
                EnsembleSpec::desk(),
                FinetuneConfig::desk(),
            ),
            Profile::Paper => (
                CaeConfig::paper(),
                TrainConfig::paper(Tradeoff::Alpha(0.05)),
                EnsembleSpec::paper(),
                FinetuneConfig::paper(),
            ),
        };
        let n = spec.presets.len();
        Self {
            data_dir: None,
            synthetic: Some(SyntheticData {
                count: 24,
                width: 64,
                height: 64,
                seed: 1,
            }),
            out_dir: PathBuf::from("run"),
            seed: 0,
            net: NetSection {
                base_filters: cae.base_filters,
                residual_blocks: cae.residual_blocks,
                surrogate: cae.surrogate.to_string(),
            },
            train: TrainSection {
                batch_size: train.batch_size,
                crop_size: train.crop_size,
                lr: train.lr,
                lr_final: train.lr_final,
                plateau_threshold: train.plateau_threshold,
                window: train.window,
                max_steps: train.max_steps,
                initial_coeffs: train.initial_coeffs,
                divergence_factor: train.divergence_factor,
            },
            ensemble: spec
                .presets
                .iter()
                .map(|p| PresetSection {
                    alpha: p.alpha,
                    code_channels: p.code_channels,
                })
                .collect(),
            finetune: FinetuneSection {
                iterations: ft.iterations,
                batch_size: ft.batch_size,
                crop_size: ft.crop_size,
                alphas: vec![Vec::new(); n],
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data_dir.is_none() && self.synthetic.is_none() {
            return Err(CliError::Config("either data_dir or synthetic must be set".into()));
        }
        if self.finetune.alphas.len() != self.ensemble.len() {
            return Err(CliError::Config(format!(
                "finetune.alphas has {} entries for {} ensemble presets",
                self.finetune.alphas.len(),
                self.ensemble.len()
            )));
        }
        self.spec().validate()?;
        self.train_config(Tradeoff::Alpha(0.05)).validate()?;
        self.cae_config(1)?.validate()?;
        Ok(())
    }

    pub fn surrogate(&self) -> Result<SurrogateMode, CliError> {
        Ok(self.net.surrogate.parse::<SurrogateMode>()?)
    }

    pub fn cae_config(&self, code_channels: usize) -> Result<CaeConfig, CliError> {
        Ok(CaeConfig {
            base_filters: self.net.base_filters,
            residual_blocks: self.net.residual_blocks,
            code_channels,
            surrogate: self.surrogate()?,
        })
    }

    pub fn train_config(&self, tradeoff: Tradeoff) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            crop_size: t.crop_size,
            lr: t.lr,
            lr_final: t.lr_final,
            plateau_threshold: t.plateau_threshold,
            window: t.window,
            max_steps: t.max_steps,
            initial_coeffs: t.initial_coeffs,
            tradeoff,
            seed: self.seed,
            divergence_factor: t.divergence_factor,
        }
    }

    pub fn spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            presets: self
                .ensemble
                .iter()
                .map(|p| Preset {
                    alpha: p.alpha,
                    code_channels: p.code_channels,
                })
                .collect(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            iterations: self.finetune.iterations,
            batch_size: self.finetune.batch_size,
            crop_size: self.finetune.crop_size,
            schedule: PowerDecay::default(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::for_profile(p);
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::for_profile(Profile::Desk).to_json()).unwrap();
        v["train"]["learning_rate"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v.clone()).is_err());
        let mut v2: serde_json::Value = serde_json::from_str(&RunConfig::for_profile(Profile::Desk).to_json()).unwrap();
        v2["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v2).is_err());
    }

    #[test]
    fn inconsistent_finetune_rejected() {
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.finetune.alphas.pop();
        assert!(c.validate().is_err());
    }
}
