//! DLCZ atomic-ensemble memory.
//!
//! The collective spin excitation is a truncated bosonic mode. A write pulse
//! produces the two-mode-squeezed pair state of spin and field 1,
//! a read pulse maps spin excitations into field 2 with a fixed efficiency,
//! and storage is degraded by amplitude damping plus pure dephasing.
//! `dicke_state` builds the exact symmetric atomic states so the bosonic
//! approximation can be checked at small atom numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qstate::{
    c, cr, fock, CVector, DensityMatrix, HilbertSpace, StateVector, SubsystemKind, Wavepacket, C64, DEFAULT_FOCK_CUTOFF,
};

/// Largest accepted excitation probability per write pulse.
pub const MAX_EXCITATION_PROBABILITY: f64 = 0.2;
/// Largest atom number for which `dicke_state` builds the full 2^N space.
pub const MAX_DICKE_ATOMS: usize = 12;

const RETRIEVAL_SAMPLES: usize = 64;

fn default_fock_cutoff() -> usize {
    DEFAULT_FOCK_CUTOFF
}

fn default_retrieval_width() -> f64 {
    20e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    pub n_atoms: u64,
    /// Excitation probability `p` per write pulse.
    pub p_excite: f64,
    /// Write phase `β` in radians.
    pub write_phase: f64,
    /// Population (amplitude-damping) lifetime of the stored excitation, seconds.
    pub memory_lifetime: f64,
    /// Pure-dephasing time, seconds. Defaults to `memory_lifetime`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dephasing_lifetime: Option<f64>,
    /// Probability that a stored excitation is retrieved into field 2.
    pub readout_efficiency: f64,
    /// Highest occupation kept for the spin and field modes.
    #[serde(default = "default_fock_cutoff")]
    pub fock_cutoff: usize,
    /// RMS duration of the retrieved field-2 wavepacket, seconds.
    #[serde(default = "default_retrieval_width")]
    pub retrieval_width: f64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            n_atoms: 100_000,
            p_excite: 0.01,
            write_phase: 0.0,
            memory_lifetime: 10e-6,
            dephasing_lifetime: None,
            readout_efficiency: 0.5,
            fock_cutoff: DEFAULT_FOCK_CUTOFF,
            retrieval_width: default_retrieval_width(),
        }
    }
}

impl EnsembleParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_atoms == 0 {
            return Err(Error::arg("ensemble needs at least one atom"));
        }
        if !(0.0..=MAX_EXCITATION_PROBABILITY).contains(&self.p_excite) {
            return Err(Error::arg(format!(
                "p_excite = {} outside [0, {MAX_EXCITATION_PROBABILITY}]",
                self.p_excite
            )));
        }
        if !(0.0..=1.0).contains(&self.readout_efficiency) {
            return Err(Error::arg("readout_efficiency must lie in [0, 1]"));
        }
        if !(self.memory_lifetime > 0.0) {
            return Err(Error::arg("memory_lifetime must be positive"));
        }
        if let Some(t) = self.dephasing_lifetime {
            if !(t > 0.0) {
                return Err(Error::arg("dephasing_lifetime must be positive"));
            }
        }
        if self.fock_cutoff < 1 {
            return Err(Error::arg("fock_cutoff must be at least 1"));
        }
        if !self.write_phase.is_finite() || !(self.retrieval_width > 0.0) {
            return Err(Error::arg("write_phase must be finite and retrieval_width positive"));
        }
        Ok(())
    }

    pub fn mode_dim(&self) -> usize {
        self.fock_cutoff + 1
    }

    pub fn decoherence(&self) -> DecoherenceModel {
        DecoherenceModel {
            damping_lifetime: self.memory_lifetime,
            dephasing_lifetime: self.dephasing_lifetime.unwrap_or(self.memory_lifetime),
        }
    }
}

/// Storage channel: amplitude damping with survival `e^{-t/τ₁}` followed by
/// dephasing that multiplies `ρ_{mn}` by `e^{-(m-n)² t/τ_φ}`. The two parts
/// commute, and both are semigroups in `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceModel {
    pub damping_lifetime: f64,
    pub dephasing_lifetime: f64,
}

impl DecoherenceModel {
    pub fn damping_only(lifetime: f64) -> Self {
        DecoherenceModel {
            damping_lifetime: lifetime,
            dephasing_lifetime: f64::INFINITY,
        }
    }

    pub fn none() -> Self {
        DecoherenceModel {
            damping_lifetime: f64::INFINITY,
            dephasing_lifetime: f64::INFINITY,
        }
    }

    /// Applies the channel for a storage time `dt` to subsystem `mode`.
    pub fn apply(&self, rho: &DensityMatrix, mode: usize, dt: f64) -> Result<DensityMatrix> {
        if dt < 0.0 || dt.is_nan() {
            return Err(Error::arg(format!("negative storage time {dt}")));
        }
        if dt == 0.0 {
            return Ok(rho.clone());
        }
        let survival = (-dt / self.damping_lifetime).exp();
        let dim = rho.space().dims()[mode];
        let damped = rho.apply_kraus(&fock::loss_kraus(dim, survival), &[mode])?;
        let rate = dt / self.dephasing_lifetime;
        if rate == 0.0 {
            return Ok(damped);
        }
        damped.scale_coherences(mode, |m, n| {
            if m == n {
                return 1.0;
            }
            let d = m as f64 - n as f64;
            (-d * d * rate).exp()
        })
    }
}

/// Joint spin ⊗ field-1 state after a write pulse:
/// `Σ_n (e^{iβ}√p)^n |n_a⟩|n₁⟩`, truncated at the Fock cutoff and normalized.
/// At the default cutoff this keeps the `1`, `e^{iβ}√p`, `e^{2iβ}p` terms.
pub fn write_state(params: &EnsembleParams) -> Result<StateVector> {
    params.validate()?;
    let dim = params.mode_dim();
    let space = HilbertSpace::new(
        vec![dim, dim],
        vec![SubsystemKind::CollectiveSpin, SubsystemKind::Field],
    )?;
    let step = C64::from_polar(params.p_excite.sqrt(), params.write_phase);
    let mut amps = CVector::zeros(dim * dim);
    let mut term = cr(1.0);
    for n in 0..dim {
        amps[n * dim + n] = term;
        term *= step;
    }
    StateVector::normalized(space, amps)
}

/// Maps the excitations of collective mode `spin` into a field mode with
/// efficiency `efficiency`; unretrieved excitations are lost. The subsystem
/// keeps its position and is relabeled as a field mode.
pub fn retrieve(rho: &DensityMatrix, spin: usize, efficiency: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(Error::arg("retrieval efficiency must lie in [0, 1]"));
    }
    let dim = rho.space().dims()[spin];
    rho.apply_kraus(&fock::loss_kraus(dim, efficiency), &[spin])?
        .relabel(spin, SubsystemKind::Field)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Idle,
    /// Spin is entangled with a field-1 mode held by the protocol engine.
    Written,
    Storing,
}

#[derive(Clone, Debug)]
pub struct EnsembleNode {
    params: EnsembleParams,
    spin_state: DensityMatrix,
    last_touched: f64,
    status: NodeStatus,
}

impl EnsembleNode {
    pub fn new(params: EnsembleParams) -> Result<Self> {
        params.validate()?;
        let spin_state = vacuum(params.mode_dim())?;
        Ok(EnsembleNode {
            params,
            spin_state,
            last_touched: 0.0,
            status: NodeStatus::Idle,
        })
    }

    pub fn params(&self) -> &EnsembleParams {
        &self.params
    }

    pub fn spin_state(&self) -> &DensityMatrix {
        &self.spin_state
    }

    pub fn last_touched(&self) -> f64 {
        self.last_touched
    }

    pub fn status(&self) -> NodeStatus {
        self.status
    }

    pub fn is_idle(&self) -> bool {
        self.status == NodeStatus::Idle
            && (self.spin_state.population(&[0]) - 1.0).abs() <= crate::qstate::tolerances().algebraic
    }

    /// Optical-pumping reinitialization back to `|0_a⟩`.
    pub fn reset(&mut self) {
        self.spin_state = vacuum(self.params.mode_dim()).expect("cutoff validated");
        self.status = NodeStatus::Idle;
    }

    /// Loads a spin state, e.g. the reduced state of a heralded pair.
    pub fn store(&mut self, spin_state: DensityMatrix) -> Result<()> {
        if spin_state.space().dims() != [self.params.mode_dim()] {
            return Err(Error::arg("spin state has the wrong dimension"));
        }
        self.spin_state = spin_state;
        self.status = NodeStatus::Storing;
        Ok(())
    }

    pub fn advance_to(&mut self, time: f64) -> Result<()> {
        if time < self.last_touched {
            return Err(Error::ProtocolState(format!(
                "node clock cannot move back from {} to {time}",
                self.last_touched
            )));
        }
        self.last_touched = time;
        Ok(())
    }

    /// Write pulse: returns the spin ⊗ field-1 pair state. The spin is then
    /// owned by whoever holds the joint state; the node is marked written.
    pub fn write_pulse(&mut self) -> Result<StateVector> {
        if !self.is_idle() {
            return Err(Error::ProtocolState(
                "write pulse on a node that has not been reinitialized".into(),
            ));
        }
        let joint = write_state(&self.params)?;
        self.spin_state = joint.to_density().partial_trace(&[0])?;
        self.status = NodeStatus::Written;
        Ok(joint)
    }

    /// Read pulse on the locally held spin state. Returns the field-2
    /// wavepacket; the spin is left in `|0_a⟩`.
    pub fn read_pulse(&mut self) -> Result<Wavepacket> {
        let field = retrieve(&self.spin_state, 0, self.params.readout_efficiency)?;
        let width = self.params.retrieval_width;
        let dt = 8.0 * width / RETRIEVAL_SAMPLES as f64;
        let packet = Wavepacket::gaussian(dt, RETRIEVAL_SAMPLES, width, field)?;
        self.reset();
        Ok(packet)
    }

    /// Stores for `dt` seconds under the node's decoherence model.
    pub fn decohere_memory(&mut self, dt: f64) -> Result<()> {
        if dt < 0.0 || dt.is_nan() {
            return Err(Error::arg(format!("negative storage time {dt}")));
        }
        self.spin_state = self.params.decoherence().apply(&self.spin_state, 0, dt)?;
        self.last_touched += dt;
        Ok(())
    }
}

fn vacuum(dim: usize) -> Result<DensityMatrix> {
    DensityMatrix::basis(HilbertSpace::single(dim, SubsystemKind::CollectiveSpin)?, &[0])
}

/// Symmetric Dicke state of `n_atoms` two-level atoms with `k` in `|s⟩`.
/// Qubit basis: `0 = |g⟩`, `1 = |s⟩`; atom 0 is the most significant digit.
pub fn dicke_state(n_atoms: usize, k: usize) -> Result<StateVector> {
    if k > n_atoms {
        return Err(Error::arg(format!("{k} excitations among {n_atoms} atoms")));
    }
    if n_atoms > MAX_DICKE_ATOMS {
        return Err(Error::Capacity {
            requested: 1usize.checked_shl(n_atoms as u32).unwrap_or(usize::MAX),
            cap: 1 << MAX_DICKE_ATOMS,
        });
    }
    let space = HilbertSpace::new(vec![2; n_atoms], vec![SubsystemKind::Atom; n_atoms])?;
    let dim = space.total_dim();
    let amp = cr(1.0 / fock::binomial(n_atoms, k).sqrt());
    let amps = CVector::from_fn(dim, |i, _| {
        if (i as u64).count_ones() as usize == k {
            amp
        } else {
            c(0.0, 0.0)
        }
    });
    StateVector::new(space, amps)
}

/// Applies the collective raising operator `S† = N^{-1/2} Σ_i σ_i⁺` to a state
/// of `N` two-level atoms.
pub fn collective_raise(state: &StateVector) -> Result<StateVector> {
    let n = state.space().len();
    let dim = state.space().total_dim();
    let scale = cr(1.0 / (n as f64).sqrt());
    let mut out = CVector::zeros(dim);
    for (i, a) in state.amplitudes().iter().enumerate() {
        if a.norm_sqr() == 0.0 {
            continue;
        }
        for atom in 0..n {
            let bit = 1usize << (n - 1 - atom);
            if i & bit == 0 {
                out[i | bit] += a * scale;
            }
        }
    }
    StateVector::new(state.space().clone(), out)
}

/// `|⟨D_k| (S†)^k/√k! |g…g⟩|²`: how closely the bosonic ladder state with
/// `k` quanta reproduces the exact symmetric state at finite `N`.
pub fn bosonic_ladder_overlap(n_atoms: usize, k: usize) -> Result<f64> {
    let exact = dicke_state(n_atoms, k)?;
    let mut ladder = dicke_state(n_atoms, 0)?;
    for _ in 0..k {
        ladder = collective_raise(&ladder)?;
    }
    let overlap = exact.inner(&ladder)? / cr(fock::factorial(k).sqrt());
    Ok(overlap.norm_sqr())
}
