use crate::error::{Error, Result};

use super::{cr, tolerances, DensityMatrix, StateVector, C64};

/// A travelling-field mode: a sampled temporal envelope `E(t)` (amplitude
/// per √time) and the photon-number content of that mode.
///
/// The envelope is normalized so that `Σ |E(t_k)|² dt = 1` on its uniform grid.
#[derive(Clone, Debug)]
pub struct Wavepacket {
    dt: f64,
    envelope: Vec<C64>,
    content: DensityMatrix,
}

impl Wavepacket {
    pub fn new(dt: f64, envelope: Vec<C64>, content: DensityMatrix) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::arg("wavepacket grid spacing must be positive"));
        }
        let packet = Wavepacket { dt, envelope, content };
        let norm = packet.envelope_norm();
        if (norm - 1.0).abs() > tolerances().physical {
            return Err(Error::arg(format!("envelope integrates to {norm}, expected 1")));
        }
        Ok(packet)
    }

    /// Rescales `samples` to unit integral before building.
    pub fn normalized(dt: f64, samples: Vec<C64>, content: DensityMatrix) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::arg("wavepacket grid spacing must be positive"));
        }
        let norm: f64 = samples.iter().map(|e| e.norm_sqr()).sum::<f64>() * dt;
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::arg("envelope has zero or non-finite norm"));
        }
        let scale = cr(1.0 / norm.sqrt());
        Self::new(dt, samples.into_iter().map(|e| e * scale).collect(), content)
    }

    pub fn from_pure(dt: f64, samples: Vec<C64>, content: &StateVector) -> Result<Self> {
        Self::normalized(dt, samples, content.to_density())
    }

    /// Gaussian envelope centred in a window of `n` samples.
    pub fn gaussian(dt: f64, n: usize, width: f64, content: DensityMatrix) -> Result<Self> {
        let centre = (n as f64 - 1.0) * dt / 2.0;
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 * dt - centre;
                cr((-(t * t) / (4.0 * width * width)).exp())
            })
            .collect();
        Self::normalized(dt, samples, content)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn envelope(&self) -> &[C64] {
        &self.envelope
    }

    pub fn content(&self) -> &DensityMatrix {
        &self.content
    }

    pub fn envelope_norm(&self) -> f64 {
        self.envelope.iter().map(|e| e.norm_sqr()).sum::<f64>() * self.dt
    }

    /// Temporal-mode overlap `Σ conj(E₁) E₂ dt` on a shared grid.
    pub fn mode_overlap(&self, other: &Wavepacket) -> Result<C64> {
        if (self.dt - other.dt).abs() > 1e-12 * self.dt || self.envelope.len() != other.envelope.len() {
            return Err(Error::arg("wavepackets are sampled on different grids"));
        }
        Ok(self
            .envelope
            .iter()
            .zip(&other.envelope)
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            * cr(self.dt))
    }

    /// Mean photon number of the content, assuming the single subsystem is a field mode.
    pub fn mean_photon_number(&self) -> f64 {
        let d = self.content.dim();
        (0..d).map(|n| n as f64 * self.content.matrix()[(n, n)].re).sum()
    }
}
