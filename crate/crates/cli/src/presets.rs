//! Named parameter regimes. Anything a run config leaves out is taken from
//! the selected preset.

use qnet_core::cavity::{cavity_preset, CavityParams, IntegrationSettings, MapMode, PulseSpec};
use qnet_core::channel::{Detector, OpticalLink};
use qnet_core::ensemble::EnsembleParams;
use qnet_core::repeater::CavityNodeParams;
use serde::Serialize;

use crate::CliError;

pub const DEFAULT_PRESET: &str = "fabry-perot";

#[derive(Clone, Debug, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub ensemble: EnsembleParams,
    pub cavity: CavityNodeParams,
    /// One arm between a memory and its detector station.
    pub link: OpticalLink,
    pub detector: Detector,
    pub chain_links: usize,
    pub attempt_period: f64,
    pub max_trials: u64,
    pub repetitions: u64,
    pub max_restarts: u64,
}

fn ensemble() -> EnsembleParams {
    EnsembleParams {
        n_atoms: 100_000,
        p_excite: 0.01,
        write_phase: 0.0,
        memory_lifetime: 10e-6,
        dephasing_lifetime: None,
        readout_efficiency: 0.5,
        ..Default::default()
    }
}

fn cavity_node(cavity: CavityParams) -> CavityNodeParams {
    CavityNodeParams {
        cavity,
        pulse: PulseSpec::Ramp {
            omega_max_over_g: 2.0,
            duration_g: 100.0,
            samples: 2001,
        },
        map_mode: MapMode::Ideal,
        integration: IntegrationSettings::default(),
        // matches the ensemble write amplitude so the hybrid herald is balanced
        emission_probability: 0.01 / 1.01,
        emission_phase: 0.0,
        qubit: (std::f64::consts::FRAC_PI_4, 0.0),
    }
}

fn preset(name: &'static str, summary: &'static str) -> Preset {
    Preset {
        name,
        summary,
        ensemble: ensemble(),
        cavity: cavity_node(cavity_preset(name).expect("cavity table has every preset")),
        // nodes 3 m apart with the station in the middle
        link: OpticalLink {
            length: 1.5,
            attenuation: 0.0,
            extra_phase: 0.0,
            phase_jitter_std: 0.0,
        },
        detector: Detector {
            efficiency: 0.6,
            dark_count_prob: 1e-6,
        },
        chain_links: 2,
        attempt_period: 1e-6,
        max_trials: 10_000_000,
        repetitions: 100,
        max_restarts: 1000,
    }
}

pub fn presets() -> Vec<Preset> {
    vec![
        preset(
            "fabry-perot",
            "Cs ensembles of 1e5 atoms; Cs atom in a Fabry-Perot cavity, (g, kappa, gamma)/2pi = (34, 4.1, 2.6) MHz",
        ),
        preset(
            "microtoroid",
            "Cs ensembles of 1e5 atoms; projected microtoroid cavity, (g, kappa, gamma)/2pi = (580, 0.13, 2.6) MHz",
        ),
    ]
}

pub fn find_preset(name: &str) -> Result<Preset, CliError> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = presets().iter().map(|p| p.name).collect();
        CliError::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
    })
}
