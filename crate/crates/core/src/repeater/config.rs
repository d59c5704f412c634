use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    HeraldOneLink,
    NodePairBell,
    SwapChain,
    Hybrid,
    CavityTransfer,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::HeraldOneLink => "herald-one-link",
            Scenario::NodePairBell => "node-pair-bell",
            Scenario::SwapChain => "swap-chain",
            Scenario::Hybrid => "hybrid",
            Scenario::CavityTransfer => "cavity-transfer",
        }
    }
}

/// Values forced onto every node and link of a topology.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_excite: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_lifetime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dephasing_lifetime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark_count_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_jitter_std: Option<f64>,
}

fn one() -> u64 {
    1
}

fn default_max_restarts() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub scenario: Scenario,
    /// Seconds per write trial.
    pub attempt_period: f64,
    pub max_trials: u64,
    /// Longest a heralded pair may wait, seconds. `None` means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<f64>,
    pub rng_seed: u64,
    /// Independent Monte-Carlo repetitions of the whole scenario.
    #[serde(default = "one")]
    pub repetitions: u64,
    /// Cap on expiry restarts (and on failed swap cycles) per repetition.
    #[serde(default = "default_max_restarts")]
    pub max_restarts: u64,
    #[serde(default)]
    pub overrides: Overrides,
    /// Swap chain: also run the direct link with the same total loss.
    #[serde(default)]
    pub compare_direct: bool,
    /// Keep every write trial in the report's trial stream.
    #[serde(default)]
    pub record_trials: bool,
}

impl ProtocolConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        ProtocolConfig {
            scenario,
            attempt_period: 1e-6,
            max_trials: 1_000_000,
            memory_budget: None,
            rng_seed: seed,
            repetitions: 1,
            max_restarts: default_max_restarts(),
            overrides: Overrides::default(),
            compare_direct: false,
            record_trials: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.attempt_period > 0.0) || !self.attempt_period.is_finite() {
            return Err(Error::Config("attempt_period must be positive".into()));
        }
        if self.max_trials < 1 {
            return Err(Error::Config("max_trials must be at least 1".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if let Some(b) = self.memory_budget {
            if !(b > 0.0) {
                return Err(Error::Config("memory_budget must be positive".into()));
            }
        }
        Ok(())
    }
}
