//! Single computations behind `calc` and `verify`.

use std::path::Path;

use qnet_core::cavity::{coupling_g, critical_numbers, regime_check, CavityParams, RegimeCheck, SPEED_OF_LIGHT};
use qnet_core::qstate::{c, CMatrix};
use qnet_core::repeater::connectivity_dimension;
use qnet_core::verify::{
    canonical_chsh_settings, chsh_settings, chsh_value, concurrence, max_chsh, tomography_reconstruct, Analyzer,
    BellState, CountsTable, TwoQubitDensityMatrix, CANONICAL_CHSH_ANGLES,
};
use serde::{Deserialize, Serialize};

use crate::presets::find_preset;
use crate::CliError;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Serialize)]
pub struct CouplingResult {
    /// rad/s
    pub g: f64,
    pub g_over_2pi_hz: f64,
}

/// `omega` in rad/s, or the transition wavelength in meters.
pub fn calc_g(
    dipole: f64,
    omega: Option<f64>,
    wavelength: Option<f64>,
    volume: f64,
    overlap: f64,
) -> Result<CouplingResult, CliError> {
    let omega = match (omega, wavelength) {
        (Some(w), None) => w,
        (None, Some(l)) if l > 0.0 => TWO_PI * SPEED_OF_LIGHT / l,
        (None, Some(l)) => return Err(CliError::Config(format!("wavelength must be positive, got {l}"))),
        _ => return Err(CliError::Config("give exactly one of --omega and --wavelength".into())),
    };
    let g = coupling_g(dipole, omega, volume, overlap).map_err(CliError::from_config)?;
    Ok(CouplingResult {
        g,
        g_over_2pi_hz: g / TWO_PI,
    })
}

#[derive(Debug, Serialize)]
pub struct CriticalResult {
    pub g: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub n0: f64,
    #[serde(rename = "N0")]
    pub big_n0: f64,
    pub regime: RegimeCheck,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

/// Rates in rad/s, or a preset name.
pub fn calc_critical(preset: Option<&str>, rates: Option<(f64, f64, f64)>) -> Result<CriticalResult, CliError> {
    let params = match (preset, rates) {
        (Some(name), None) => find_preset(name)?.cavity.cavity,
        (None, Some((g, k, y))) => CavityParams::resonant(g, k, y),
        _ => {
            return Err(CliError::Config(
                "give either --preset or all of --g, --kappa, --gamma".into(),
            ))
        }
    };
    let (n0, big_n0) = critical_numbers(&params).map_err(CliError::from_config)?;
    Ok(CriticalResult {
        g: params.g,
        kappa: params.kappa,
        gamma: params.gamma,
        n0,
        big_n0,
        regime: regime_check(&params),
        preset: preset.map(str::to_string),
    })
}

/// Exact integers as decimal strings.
#[derive(Debug, Serialize)]
pub struct DimensionResult {
    pub nodes: u64,
    pub qubits: u64,
    pub classical: String,
    pub quantum: String,
}

pub fn calc_dimension(nodes: u64, qubits: u64) -> Result<DimensionResult, CliError> {
    let (cl, q) = connectivity_dimension(nodes, qubits).map_err(CliError::from_config)?;
    Ok(DimensionResult {
        nodes,
        qubits,
        classical: cl.to_string(),
        quantum: q.to_string(),
    })
}

/// A two-qubit state on disk: either a named Bell state or the real and
/// imaginary parts of the 4×4 matrix in the |00⟩, |01⟩, |10⟩, |11⟩ basis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bell: Option<BellState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im: Option<Vec<Vec<f64>>>,
}

impl StateFile {
    pub fn from_state(rho: &TwoQubitDensityMatrix) -> Self {
        let m = rho.matrix();
        let rows = |f: fn(&qnet_core::qstate::C64) -> f64| -> Vec<Vec<f64>> {
            (0..4).map(|i| (0..4).map(|j| f(&m[(i, j)])).collect()).collect()
        };
        StateFile {
            bell: None,
            re: Some(rows(|z| z.re)),
            im: Some(rows(|z| z.im)),
        }
    }

    pub fn to_state(&self) -> Result<TwoQubitDensityMatrix, CliError> {
        match (&self.bell, &self.re) {
            (Some(b), None) if self.im.is_none() => Ok(b.density()),
            (None, Some(re)) => {
                let zero = vec![vec![0.0; 4]; 4];
                let im = self.im.as_ref().unwrap_or(&zero);
                let shaped = |m: &Vec<Vec<f64>>| m.len() == 4 && m.iter().all(|r| r.len() == 4);
                if !shaped(re) || !shaped(im) {
                    return Err(CliError::Config("state matrix must be 4×4".into()));
                }
                let m = CMatrix::from_fn(4, 4, |i, j| c(re[i][j], im[i][j]));
                TwoQubitDensityMatrix::from_matrix(m).map_err(CliError::from)
            }
            _ => Err(CliError::Config(
                "state file needs either `bell` or `re` (with optional `im`)".into(),
            )),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
}

pub fn load_state(path: &Path) -> Result<TwoQubitDensityMatrix, CliError> {
    read_json::<StateFile>(path)?.to_state()
}

#[derive(Debug, Serialize)]
pub struct ConcurrenceResult {
    pub concurrence: f64,
}

pub fn verify_concurrence(rho: &TwoQubitDensityMatrix) -> Result<ConcurrenceResult, CliError> {
    Ok(ConcurrenceResult {
        concurrence: concurrence(rho)?,
    })
}

#[derive(Debug, Serialize)]
pub struct ChshResult {
    /// Analyzer angles (a, a′, b, b′) in radians.
    pub angles: [f64; 4],
    pub chsh: f64,
    /// Largest value over all settings.
    pub max_chsh: f64,
}

pub fn verify_chsh(rho: &TwoQubitDensityMatrix, angles: Option<[f64; 4]>) -> ChshResult {
    let (angles, settings) = match angles {
        Some(a) => (
            a,
            chsh_settings(
                Analyzer::linear(a[0]),
                Analyzer::linear(a[1]),
                Analyzer::linear(a[2]),
                Analyzer::linear(a[3]),
            ),
        ),
        None => (CANONICAL_CHSH_ANGLES, canonical_chsh_settings()),
    };
    ChshResult {
        angles,
        chsh: chsh_value(rho, &settings),
        max_chsh: max_chsh(rho),
    }
}

#[derive(Debug, Serialize)]
pub struct TomographyResult {
    pub state: StateFile,
    pub concurrence: f64,
    pub max_chsh: f64,
    pub negativity: f64,
    pub clipped_mass: f64,
    pub residual: f64,
}

pub fn verify_tomography(path: &Path) -> Result<TomographyResult, CliError> {
    let counts: CountsTable = read_json(path)?;
    let t = tomography_reconstruct(&counts)?;
    Ok(TomographyResult {
        state: StateFile::from_state(&t.state),
        concurrence: concurrence(&t.state)?,
        max_chsh: max_chsh(&t.state),
        negativity: t.negativity,
        clipped_mass: t.clipped_mass,
        residual: t.residual,
    })
}
