//! Run configuration: preset, then TOML file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use priodiff::corpus::{ContinuousConfig, GrammarConfig};
use priodiff::denoiser::TabularConfig;
use priodiff::priority::AgentConfig;
use priodiff::quantizer::ToyVqConfig;
use priodiff::verify::SuiteConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Raised for anything the user can fix in the configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PriorityMode {
    None,
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Final MASK mass; the remainder goes to uniform replacement.
    pub gamma_end: f64,
    /// Score band edges for bands.csv.
    pub band_edges: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            gamma_end: 0.9,
            band_edges: vec![0.0, 0.75, 1.25, 1e9],
        }
    }
}

/// Input files. Unset entries default to the matching artifact in the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub continuous: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    /// Used with the base schedule; priority runs take lengths from reference sequences.
    pub length: usize,
    pub condition: Option<i64>,
    /// Number of generated samples whose full trajectories are exported.
    pub trajectories: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 16,
            length: 12,
            condition: None,
            trajectories: 1,
        }
    }
}

/// `seed`, `categories`, `latent_dim` and `steps` are authoritative and are
/// copied into the nested sections by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub categories: usize,
    pub latent_dim: usize,
    pub steps: usize,
    pub priority: PriorityMode,
    /// Fraction of the corpus held out from denoiser training.
    pub heldout_fraction: f64,
    pub schedule: ScheduleConfig,
    pub paths: PathsConfig,
    pub corpus: GrammarConfig,
    pub continuous: ContinuousConfig,
    pub vq: ToyVqConfig,
    pub agent: AgentConfig,
    pub denoiser: TabularConfig,
    pub generate: GenerateConfig,
    pub verify: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            seed: 0,
            categories: 16,
            latent_dim: 4,
            steps: 10,
            priority: PriorityMode::Static,
            heldout_fraction: 0.1,
            schedule: ScheduleConfig::default(),
            paths: PathsConfig::default(),
            corpus: GrammarConfig::default(),
            continuous: ContinuousConfig::default(),
            vq: ToyVqConfig::default(),
            agent: AgentConfig::default(),
            denoiser: TabularConfig::default(),
            generate: GenerateConfig::default(),
            verify: SuiteConfig::default(),
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                categories: 8192,
                latent_dim: 512,
                steps: 100,
                corpus: GrammarConfig {
                    min_len: 16,
                    max_len: 49,
                    ..GrammarConfig::default()
                },
                generate: GenerateConfig {
                    length: 49,
                    ..GenerateConfig::default()
                },
                ..desk
            },
        }
    }

    /// Preset, overlaid by the file's keys, overlaid by the seed flag.
    pub fn load(preset: Preset, file: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg = match file {
            None => Self::preset(preset),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
                let overlay: toml::Table =
                    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| invalid(e.to_string()))?;
                let merged = merge(base, overlay);
                merged
                    .try_into()
                    .map_err(|e: toml::de::Error| invalid(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        self.corpus.categories = self.categories;
        self.vq.codes = self.categories;
        self.vq.latent_dim = self.latent_dim;
        self.vq.seed = self.seed;
        self.agent.seed = self.seed;
        self.denoiser.seed = self.seed;
        self.verify.seed = self.seed;
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.categories < 2 {
            return Err(invalid("categories must be at least 2"));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.schedule.gamma_end) {
            return Err(invalid("schedule.gamma_end must lie in [0, 1]"));
        }
        if self.schedule.band_edges.len() < 2 || self.schedule.band_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("schedule.band_edges must be at least two increasing values"));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(invalid("heldout_fraction must lie in (0, 1)"));
        }
        if self.corpus.min_len == 0 || self.corpus.min_len > self.corpus.max_len {
            return Err(invalid(format!(
                "corpus length range [{}, {}] is empty",
                self.corpus.min_len, self.corpus.max_len
            )));
        }
        if self.generate.length == 0 {
            return Err(invalid("generate.length must be positive"));
        }
        let paths = [
            ("paths.corpus", &self.paths.corpus),
            ("paths.continuous", &self.paths.continuous),
            ("paths.decoder", &self.paths.decoder),
            ("paths.checkpoint", &self.paths.checkpoint),
        ];
        for (key, path) in paths {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(invalid(format!("{key} = {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn canonical(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn sha256(&self) -> anyhow::Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical()?.as_bytes())))
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let inner = std::mem::take(b);
                *b = merge(inner, o);
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_and_flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\nsteps = 7\n[denoiser]\nepsilon = 0.5\n").unwrap();
        let cfg = RunConfig::load(Preset::Desk, Some(&path), None).unwrap();
        assert_eq!((cfg.seed, cfg.steps, cfg.categories), (5, 7, 16));
        assert_eq!(cfg.denoiser.epsilon, 0.5);
        assert_eq!(cfg.denoiser.time_buckets, TabularConfig::default().time_buckets);
        let cfg = RunConfig::load(Preset::Desk, Some(&path), Some(9)).unwrap();
        assert_eq!((cfg.seed, cfg.denoiser.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "stepz = 7\n").unwrap();
        let err = RunConfig::load(Preset::Desk, Some(&path), None).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::preset(Preset::Desk);
        let mut b = a.clone();
        assert_eq!(a.sha256().unwrap(), b.sha256().unwrap());
        b.seed = 1;
        assert_ne!(a.sha256().unwrap(), b.sha256().unwrap());
    }

    #[test]
    fn canonical_text_round_trips() {
        let a = RunConfig::preset(Preset::Paper);
        let back: RunConfig = toml::from_str(&a.canonical().unwrap()).unwrap();
        assert_eq!(a, back);
    }
}
