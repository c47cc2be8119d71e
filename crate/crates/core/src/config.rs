// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration.
//!
//! A config file only lists what it changes; everything else keeps its
//! default. Unknown keys are errors, and the whole tree is validated before
//! any work starts.

use serde::{Deserialize, Serialize};

use crate::concepts::DEFAULT_MARGIN;
use crate::error::{Error, Result};
use crate::sae::SaeShape;
use crate::steering::DEFAULT_MULTIPLIERS;
use crate::synth::SynthSpec;
use crate::trainer::{Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    /// Multipliers tried per concept.
    pub candidates: Vec<f64>,
    /// Multiplier used when none has been tuned.
    pub default_multiplier: f64,
    pub margin: f64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_MULTIPLIERS.to_vec(),
            default_multiplier: -10.0,
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generator split used for held-out evaluation data.
    pub holdout_split: u32,
    /// Object names or `object:<id>` erased in turn by `seq-eval`.
    pub sequential_order: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout_split: 1,
            sequential_order: ["Bears", "Cats", "Dogs", "Birds", "Horses", "Flowers", "Trees", "Butterfly", "Frogs"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub model: SaeShape,
    pub unsupervised: TrainConfig,
    pub supervised: TrainConfig,
    pub steering: SteeringConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            model: SaeShape {
                d: synth.d,
                ..SaeShape::default()
            },
            synth,
            unsupervised: TrainConfig::unsupervised(),
            supervised: TrainConfig::supervised(),
            steering: SteeringConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a partial config on top of the defaults and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        let mut base = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, over);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the generator and both training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.unsupervised.seed = seed;
        self.supervised.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        if self.model.d != self.synth.d {
            return Err(Error::InvalidArgument(format!(
                "model.d = {} but synth.d = {}",
                self.model.d, self.synth.d
            )));
        }
        let phases = [
            ("unsupervised", &self.unsupervised, Phase::Unsupervised),
            ("supervised", &self.supervised, Phase::Supervised),
        ];
        for (name, cfg, phase) in phases {
            if cfg.phase != phase {
                return Err(Error::InvalidArgument(format!(
                    "[{name}] phase must be {:?}",
                    phase.name()
                )));
            }
            cfg.validate()
                .map_err(|e| Error::InvalidArgument(format!("[{name}] {e}")))?;
        }
        let s = &self.steering;
        if s.candidates.is_empty() {
            return Err(Error::InvalidArgument("steering.candidates is empty".into()));
        }
        if let Some(g) = s
            .candidates
            .iter()
            .chain([&s.default_multiplier])
            .find(|g| !(g.is_finite() && **g < 0.0))
        {
            return Err(Error::InvalidArgument(format!("steering multiplier {g} must be negative")));
        }
        if !(s.margin.is_finite() && s.margin > 0.0) {
            return Err(Error::InvalidArgument("steering.margin must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_phase_defaults() {
        let cfg = RunConfig::from_toml("[supervised]\nepochs = 3\n[supervised.weights]\ngamma = 0.0\n").unwrap();
        assert_eq!(cfg.supervised.epochs, 3);
        assert_eq!(cfg.supervised.learning_rate, 3e-4);
        assert_eq!(cfg.supervised.weights.gamma, 0.0);
        assert_eq!(cfg.supervised.weights.beta, 3.0);
        assert_eq!(cfg.unsupervised.learning_rate, 1e-3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml("[supervised]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[steering]\ncandidates = [-1.0, 2.0]\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd = 7\n").is_err());
        assert!(RunConfig::from_toml("[unsupervised]\nphase = \"supervised\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
