use std::path::{Path, PathBuf};

use dyns_core::data::SynthSpec;
use dyns_core::{Error, ModelConfig, Result, ScanBackend, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

/// Width and optimizer presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published widths and learning rate.
    #[default]
    Paper,
    /// Small widths and a larger step for CPU runs on synthetic data.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub validation_fraction: f64,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub rois: usize,
    pub steps: usize,
    pub subjects_per_class: usize,
    pub separation: f64,
    pub switch_rate: f64,
    pub noise_std: f64,
    /// Both classes share templates.
    pub null: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            rois: 16,
            steps: 128,
            subjects_per_class: 40,
            separation: 0.6,
            switch_rate: 4.0,
            noise_std: 0.3,
            null: false,
        }
    }
}

impl SynthSection {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        let mut spec = if self.null {
            SynthSpec::null(self.rois, self.steps, self.subjects_per_class, self.separation, seed)
        } else {
            SynthSpec::planted(self.rois, self.steps, self.subjects_per_class, self.separation, seed)
        };
        spec.switch_rate = self.switch_rate;
        spec.noise_std = self.noise_std;
        spec
    }
}

/// Every tunable, as written to `config.resolved`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub backend: ScanBackend,
    pub variant: Variant,
    /// Dataset directory or manifest; synthetic data is generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, tc) = match preset {
            Preset::Paper => (ModelConfig::default(), TrainConfig::default()),
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk(0)),
        };
        Self {
            preset,
            seed: 0,
            backend: ScanBackend::Sequential,
            variant: Variant::full(),
            data: None,
            model,
            train: TrainSection {
                learning_rate: tc.learning_rate,
                epochs: tc.epochs,
                batch_size: tc.batch_size,
                accumulation_steps: tc.accumulation_steps,
                beta1: tc.beta1,
                beta2: tc.beta2,
                eps: tc.eps,
                validation_fraction: tc.validation_fraction,
                train_fraction: 0.8,
            },
            synth: SynthSection::default(),
        }
    }

    /// Preset defaults overlaid with the file (if any). Returns whether the
    /// file set `seed` explicitly.
    pub fn load(path: Option<&Path>, preset_flag: Option<Preset>) -> Result<(Self, bool)> {
        let file: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let file_preset = match file.get("preset") {
            Some(v) => Some(
                Preset::deserialize(v.clone())
                    .map_err(|e| Error::Config(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let preset = preset_flag.or(file_preset).unwrap_or_default();
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let seed_set = file.contains_key("seed");
        let mut merged = base;
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::try_from(preset).map_err(|e| Error::Config(e.to_string()))?);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok((cfg, seed_set))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            accumulation_steps: self.train.accumulation_steps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            seed: self.seed,
            variant: self.variant,
            backend: self.backend,
            validation_fraction: self.train.validation_fraction,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::preset(Preset::Desk);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[model]\nd_latent = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), None), Err(Error::Config(_))));
    }

    #[test]
    fn file_overrides_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "preset = \"desk\"\nseed = 9\n[train]\nepochs = 3\n").unwrap();
        let (cfg, seed_set) = RunConfig::load(Some(&p), None).unwrap();
        assert!(seed_set);
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.model.d_lat), (9, 3, 16));
    }
}
