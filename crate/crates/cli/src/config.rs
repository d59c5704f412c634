//! Run configuration files: strict parsing, preset defaults and the resolved
//! echo that goes into every report.

use std::path::Path;

use qnet_core::channel::{Detector, OpticalLink};
use qnet_core::ensemble::EnsembleParams;
use qnet_core::repeater::{CavityNodeParams, NetworkTopology, Overrides, ProtocolConfig, Scenario};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::presets::{find_preset, DEFAULT_PRESET};
use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Shorthand for the standard topologies; ignored when `topology` is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    /// Elementary links in a swap chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_links: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<OpticalLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<Detector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cavity: Option<CavityNodeParams>,
}

impl Layout {
    pub fn is_empty(&self) -> bool {
        *self == Layout::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_restarts: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_direct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_trials: Option<bool>,
}

impl ProtocolSection {
    pub fn is_empty(&self) -> bool {
        *self == ProtocolSection::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

impl OutputSection {
    pub fn is_empty(&self) -> bool {
        *self == OutputSection::default()
    }
}

fn no_overrides(o: &Overrides) -> bool {
    *o == Overrides::default()
}

/// Contents of a `--config` file. Every field is optional except that a seed
/// must come from here or from `--seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Layout::is_empty")]
    pub layout: Layout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<NetworkTopology>,
    #[serde(default, skip_serializing_if = "ProtocolSection::is_empty")]
    pub protocol: ProtocolSection,
    #[serde(default, skip_serializing_if = "no_overrides")]
    pub overrides: Overrides,
    #[serde(default, skip_serializing_if = "OutputSection::is_empty")]
    pub output: OutputSection,
}

/// Parses config text; errors carry the path to the offending field.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub out: Option<String>,
}

/// A config with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub preset: String,
    pub topology: NetworkTopology,
    pub protocol: ProtocolConfig,
    pub output: OutputSection,
}

impl ResolvedConfig {
    pub fn scenario(&self) -> Scenario {
        self.protocol.scenario
    }

    pub fn seed(&self) -> u64 {
        self.protocol.rng_seed
    }

    pub fn format(&self) -> Format {
        self.output.format.unwrap_or_default()
    }

    /// The resolved config written back in file form. Parsing and resolving
    /// the echo gives the same echo.
    pub fn echo(&self) -> RunConfig {
        let p = &self.protocol;
        RunConfig {
            scenario: Some(p.scenario),
            seed: Some(p.rng_seed),
            preset: Some(self.preset.clone()),
            layout: Layout::default(),
            topology: Some(self.topology.clone()),
            protocol: ProtocolSection {
                attempt_period: Some(p.attempt_period),
                max_trials: Some(p.max_trials),
                memory_budget: p.memory_budget,
                repetitions: Some(p.repetitions),
                max_restarts: Some(p.max_restarts),
                compare_direct: Some(p.compare_direct),
                record_trials: Some(p.record_trials),
            },
            overrides: p.overrides.clone(),
            output: self.output.clone(),
        }
    }

    /// SHA-256 of the echo's JSON with the output section removed, so the
    /// hash names the computation and not where its results were written.
    pub fn hash(&self) -> String {
        let mut echo = self.echo();
        echo.output = OutputSection::default();
        let text = serde_json::to_string(&echo).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn check_layout(layout: &Layout, scenario: Scenario) -> Result<(), CliError> {
    let wrong = |field: &str| {
        Err(CliError::Config(format!(
            "layout.{field} does not apply to scenario {}",
            scenario.name()
        )))
    };
    match scenario {
        Scenario::SwapChain => {}
        _ if layout.chain_links.is_some() => return wrong("chain_links"),
        _ => {}
    }
    match scenario {
        Scenario::CavityTransfer if layout.ensemble.is_some() => wrong("ensemble"),
        Scenario::CavityTransfer if layout.detector.is_some() => wrong("detector"),
        Scenario::HeraldOneLink | Scenario::NodePairBell | Scenario::SwapChain if layout.cavity.is_some() => {
            wrong("cavity")
        }
        _ => Ok(()),
    }
}

/// Fills every default from the preset and checks the result.
pub fn resolve(config: &RunConfig, scenario: Scenario, cli: &CliOverrides) -> Result<ResolvedConfig, CliError> {
    if let Some(s) = config.scenario {
        if s != scenario {
            return Err(CliError::Config(format!(
                "config is for scenario {} but the subcommand runs {}",
                s.name(),
                scenario.name()
            )));
        }
    }
    let seed = cli
        .seed
        .or(config.seed)
        .ok_or_else(|| CliError::Config("a seed is required: set `seed` in the config or pass --seed".into()))?;
    let preset_name = config.preset.clone().unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let preset = find_preset(&preset_name)?;

    let topology = match &config.topology {
        Some(t) => {
            if !config.layout.is_empty() {
                return Err(CliError::Config("give either `layout` or `topology`, not both".into()));
            }
            t.clone()
        }
        None => {
            check_layout(&config.layout, scenario)?;
            let l = &config.layout;
            let ens = l.ensemble.clone().unwrap_or(preset.ensemble.clone());
            let link = l.link.clone().unwrap_or(preset.link.clone());
            let det = l.detector.unwrap_or(preset.detector);
            let cavity = l.cavity.clone().unwrap_or(preset.cavity.clone());
            match scenario {
                Scenario::HeraldOneLink => NetworkTopology::single_link(ens, link, (det, det)),
                Scenario::NodePairBell => NetworkTopology::node_pair(ens, link, (det, det)),
                Scenario::SwapChain => {
                    NetworkTopology::chain(l.chain_links.unwrap_or(preset.chain_links), ens, link, (det, det))
                }
                Scenario::Hybrid => NetworkTopology::hybrid(cavity, ens, link, (det, det)),
                Scenario::CavityTransfer => NetworkTopology::cavity_pair(cavity.clone(), cavity, link),
            }
        }
    };

    let mut output = config.output.clone();
    if cli.format.is_some() {
        output.format = cli.format;
    }
    if cli.out.is_some() {
        output.dir = cli.out.clone();
    }
    let format = output.format.unwrap_or_default();
    output.format = Some(format);

    let s = &config.protocol;
    let protocol = ProtocolConfig {
        scenario,
        attempt_period: s.attempt_period.unwrap_or(preset.attempt_period),
        max_trials: s.max_trials.unwrap_or(preset.max_trials),
        memory_budget: s.memory_budget,
        rng_seed: seed,
        repetitions: s.repetitions.unwrap_or(preset.repetitions),
        max_restarts: s.max_restarts.unwrap_or(preset.max_restarts),
        overrides: config.overrides.clone(),
        compare_direct: s.compare_direct.unwrap_or(scenario == Scenario::SwapChain),
        record_trials: s.record_trials.unwrap_or(format == Format::Csv),
    };
    protocol.validate().map_err(CliError::from_config)?;
    topology.validate().map_err(CliError::from_config)?;
    Ok(ResolvedConfig {
        preset: preset_name,
        topology,
        protocol,
        output,
    })
}
