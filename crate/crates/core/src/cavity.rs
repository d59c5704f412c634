//! Single-atom cavity-QED nodes.
//!
//! Atom levels are ordered `|a⟩, |b⟩, |e⟩` and the atom is the first factor of
//! the atom ⊗ cavity space. In the frame rotating at the atomic frequency
//!
//! ```text
//! H = Δ a†a + g (|e⟩⟨b| a + a† |b⟩⟨e|) − (Ω(t) |e⟩⟨a| + Ω*(t) |a⟩⟨e|),   Δ = ω_C − ω_A
//! ```
//!
//! whose dark state is `cos θ |a,0⟩ + sin θ |b,1⟩` with `tan θ = Ω/g`.
//! `κ` is the cavity *field* decay rate: the photon number decays as
//! `e^{−2κt}` and the collapse operator is `√(2κ) a`. Likewise `γ` is the
//! amplitude decay of `|e⟩`, which relaxes into `|b⟩` at population rate `2γ`.
//!
//! Memory qubits use the basis `[|b⟩, |a⟩]` and photon qubits `[|0⟩, |1⟩]`, so
//! the ideal maps of the dark-state protocol are the identity on amplitudes.

use serde::{Deserialize, Serialize};

use crate::channel::OpticalLink;
use crate::error::{Error, Result};
use crate::qstate::{
    cr, fock, CMatrix, DensityMatrix, HilbertSpace, StateVector, SubsystemKind, Wavepacket, C64, DEFAULT_FOCK_CUTOFF,
};

pub const HBAR: f64 = 1.054_571_817e-34;
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Cs D2 line, 852.35 nm.
pub const CS_D2_WAVELENGTH: f64 = 852.347e-9;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Atomic levels of the Λ system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    A = 0,
    B = 1,
    E = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityParams {
    /// Atom-cavity coupling, rad/s. `2g` is the one-photon Rabi frequency.
    pub g: f64,
    /// Cavity field decay rate, rad/s.
    pub kappa: f64,
    /// Atomic dipole decay rate into non-cavity modes, rad/s.
    pub gamma: f64,
    /// Cavity resonance, rad/s.
    pub omega_c: f64,
    /// Atomic resonance, rad/s.
    pub omega_a: f64,
    /// `|ε·μ₀|` in C·m, when `g` derives from the mode geometry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dipole_moment: Option<f64>,
    /// Mode volume `V_m` in m³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarization_overlap: Option<f64>,
}

impl CavityParams {
    /// Resonant cavity at the Cs D2 line with the given rates.
    pub fn resonant(g: f64, kappa: f64, gamma: f64) -> Self {
        let w = TWO_PI * SPEED_OF_LIGHT / CS_D2_WAVELENGTH;
        CavityParams {
            g,
            kappa,
            gamma,
            omega_c: w,
            omega_a: w,
            dipole_moment: None,
            mode_volume: None,
            polarization_overlap: None,
        }
    }

    /// Builds the parameters with `g` computed from the mode geometry.
    pub fn from_physical(
        dipole_moment: f64,
        omega_c: f64,
        omega_a: f64,
        mode_volume: f64,
        polarization_overlap: f64,
        kappa: f64,
        gamma: f64,
    ) -> Result<Self> {
        let g = coupling_g(dipole_moment, omega_c, mode_volume, polarization_overlap)?;
        let p = CavityParams {
            g,
            kappa,
            gamma,
            omega_c,
            omega_a,
            dipole_moment: Some(dipole_moment),
            mode_volume: Some(mode_volume),
            polarization_overlap: Some(polarization_overlap),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn detuning(&self) -> f64 {
        self.omega_c - self.omega_a
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("g", self.g), ("kappa", self.kappa), ("gamma", self.gamma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.detuning().is_finite() {
            return Err(Error::arg("cavity detuning must be finite"));
        }
        if let (Some(mu), Some(v)) = (self.dipole_moment, self.mode_volume) {
            let overlap = self.polarization_overlap.unwrap_or(1.0);
            let expect = coupling_g(mu, self.omega_c, v, overlap)?;
            if (self.g - expect).abs() > 1e-6 * expect {
                return Err(Error::arg(format!(
                    "g = {} disagrees with the mode geometry ({expect})",
                    self.g
                )));
            }
        }
        Ok(())
    }

    /// Like `validate` but admits zero rates, for closed-system and
    /// decoupled-cavity checks of the integrators.
    pub(crate) fn validate_dynamics(&self) -> Result<()> {
        for (name, v) in [("g", self.g), ("kappa", self.kappa), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if !self.detuning().is_finite() {
            return Err(Error::arg("cavity detuning must be finite"));
        }
        Ok(())
    }

    /// Largest rate the integrators must resolve.
    pub fn fastest_rate(&self, pulse: &ControlPulse) -> f64 {
        [self.g, self.kappa, self.gamma, self.detuning().abs(), pulse.max_abs()]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Named parameter regimes.
#[derive(Clone, Debug, PartialEq)]
pub struct CavityPreset {
    pub name: &'static str,
    pub params: CavityParams,
    /// `(n₀, N₀)` the regime is meant to reach, when one is quoted.
    pub target_critical: Option<(f64, f64)>,
}

pub fn cavity_presets() -> Vec<CavityPreset> {
    let mhz = |f: f64| TWO_PI * f * 1e6;
    vec![
        // Cs in a Fabry-Perot cavity, (g, κ, γ)/2π = (34, 4.1, 2.6) MHz
        CavityPreset {
            name: "fabry-perot",
            params: CavityParams::resonant(mhz(34.0), mhz(4.1), mhz(2.6)),
            target_critical: None,
        },
        // projected microtoroid regime
        CavityPreset {
            name: "microtoroid",
            params: CavityParams::resonant(mhz(580.0), mhz(0.13), mhz(2.6)),
            target_critical: Some((2e-5, 1e-6)),
        },
    ]
}

pub fn cavity_preset(name: &str) -> Result<CavityParams> {
    cavity_presets()
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| p.params)
        .ok_or_else(|| Error::Config(format!("unknown cavity preset `{name}`")))
}

/// `g = overlap · √(μ₀² ω_C / (2 ħ ε₀ V_m))`, SI units.
pub fn coupling_g(dipole_moment: f64, omega_c: f64, mode_volume: f64, polarization_overlap: f64) -> Result<f64> {
    if !(mode_volume > 0.0) {
        return Err(Error::arg(format!("mode volume must be positive, got {mode_volume}")));
    }
    if !(dipole_moment > 0.0) || !(omega_c > 0.0) {
        return Err(Error::arg("dipole moment and cavity frequency must be positive"));
    }
    if !(0.0..=1.0).contains(&polarization_overlap) {
        return Err(Error::arg("polarization overlap must lie in [0, 1]"));
    }
    Ok(
        polarization_overlap
            * (dipole_moment * dipole_moment * omega_c / (2.0 * HBAR * EPSILON_0 * mode_volume)).sqrt(),
    )
}

/// Critical photon and atom numbers `(n₀, N₀) = (γ²/g², κγ/g²)`.
pub fn critical_numbers(params: &CavityParams) -> Result<(f64, f64)> {
    params.validate()?;
    let g2 = params.g * params.g;
    Ok((params.gamma * params.gamma / g2, params.kappa * params.gamma / g2))
}

/// The two rate hierarchies the node is judged against, reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeCheck {
    /// `g > κ` and `g > γ`.
    pub strong_coupling: bool,
    /// `g > κ > γ`: coherent coupling beats the channel rate, which beats loss.
    pub interface_hierarchy: bool,
    pub g_over_kappa: f64,
    pub g_over_gamma: f64,
    pub kappa_over_gamma: f64,
}

pub fn regime_check(params: &CavityParams) -> RegimeCheck {
    let (g, k, y) = (params.g, params.kappa, params.gamma);
    RegimeCheck {
        strong_coupling: g > k && g > y,
        interface_hierarchy: g > k && k > y,
        g_over_kappa: g / k,
        g_over_gamma: g / y,
        kappa_over_gamma: k / y,
    }
}

/// `(cos θ, sin θ)` of the dark state for control amplitude `omega`.
pub fn dark_state_angle(omega: f64, g: f64) -> Result<(f64, f64)> {
    if !(g > 0.0) {
        return Err(Error::arg("dark state needs g > 0"));
    }
    if !(omega >= 0.0) {
        return Err(Error::arg("control amplitude must be non-negative"));
    }
    let r = omega / g;
    let cos = 1.0 / (1.0 + r * r).sqrt();
    let sin = r * cos;
    Ok((cos, sin))
}

/// Dark state `cos θ |a,0⟩ + sin θ |b,1⟩` in the atom ⊗ cavity space.
pub fn dark_state(omega: f64, g: f64, fock_cutoff: usize) -> Result<StateVector> {
    let (cos, sin) = dark_state_angle(omega, g)?;
    let space = atom_cavity_space(fock_cutoff)?;
    let d = fock_cutoff + 1;
    let mut amps = crate::qstate::CVector::zeros(3 * d);
    amps[Level::A as usize * d] = cr(cos);
    amps[Level::B as usize * d + 1] = cr(sin);
    StateVector::new(space, amps)
}

fn atom_cavity_space(fock_cutoff: usize) -> Result<HilbertSpace> {
    HilbertSpace::new(
        vec![3, fock_cutoff + 1],
        vec![SubsystemKind::Atom, SubsystemKind::Field],
    )
}

/// Control field `Ω(t)` sampled on a uniform grid starting at `start`.
/// Between samples it is interpolated linearly; outside the grid it holds
/// the first or last sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPulse {
    start: f64,
    dt: f64,
    samples: Vec<C64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Control ramps off → on, mapping `|a⟩|0⟩ → |b⟩|1⟩`.
    Emit,
    /// Control ramps on → off, mapping `|b⟩|1⟩ → |a⟩|0⟩`.
    Absorb,
}

impl ControlPulse {
    pub fn new(dt: f64, samples: Vec<C64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::arg("pulse grid spacing must be positive"));
        }
        if samples.len() < 2 {
            return Err(Error::arg("pulse needs at least two samples"));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::arg("pulse samples must be finite"));
        }
        Ok(ControlPulse {
            start: 0.0,
            dt,
            samples,
        })
    }

    pub fn from_real(dt: f64, samples: &[f64]) -> Result<Self> {
        Self::new(dt, samples.iter().map(|&s| cr(s)).collect())
    }

    /// `n` samples of `f` over `[0, duration]`.
    pub fn from_fn(duration: f64, n: usize, f: impl Fn(f64) -> C64) -> Result<Self> {
        if n < 2 {
            return Err(Error::arg("pulse needs at least two samples"));
        }
        let dt = duration / (n - 1) as f64;
        Self::new(dt, (0..n).map(|k| f(k as f64 * dt)).collect())
    }

    /// `Ω_max sin²(πt / 2T)`: a smooth off → on ramp.
    pub fn emission_ramp(omega_max: f64, duration: f64, n: usize) -> Result<Self> {
        Self::from_fn(duration, n, |t| {
            let s = (std::f64::consts::FRAC_PI_2 * t / duration).sin();
            cr(omega_max * s * s)
        })
    }

    /// Time reverse of `emission_ramp`.
    pub fn absorption_ramp(omega_max: f64, duration: f64, n: usize) -> Result<Self> {
        Ok(Self::emission_ramp(omega_max, duration, n)?.time_reversed())
    }

    /// Same grid, samples in reverse order.
    pub fn time_reversed(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.reverse();
        ControlPulse {
            start: self.start,
            dt: self.dt,
            samples,
        }
    }

    pub fn delayed(mut self, start: f64) -> Self {
        self.start = start;
        self
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[C64] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.samples.len() - 1) as f64
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.norm()))
    }

    pub fn at(&self, t: f64) -> C64 {
        let x = (t - self.start) / self.dt;
        if x <= 0.0 {
            return self.samples[0];
        }
        let last = self.samples.len() - 1;
        if x >= last as f64 {
            return self.samples[last];
        }
        let k = x.floor() as usize;
        let f = x - k as f64;
        self.samples[k] * (1.0 - f) + self.samples[k + 1] * f
    }

    /// Whether `|Ω|` never decreases (emit) or never increases (absorb).
    pub fn is_monotone(&self, direction: Direction) -> bool {
        let tol = 1e-12 * self.max_abs().max(f64::MIN_POSITIVE);
        self.samples.windows(2).all(|w| {
            let d = w[1].norm() - w[0].norm();
            match direction {
                Direction::Emit => d >= -tol,
                Direction::Absorb => d <= tol,
            }
        })
    }

    /// Whether `other` is this pulse reversed on the same grid.
    pub fn is_time_reverse_of(&self, other: &ControlPulse) -> bool {
        self.samples.len() == other.samples.len()
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt
            && self
                .samples
                .iter()
                .zip(other.samples.iter().rev())
                .all(|(a, b)| (a - b).norm() <= 1e-12 * self.max_abs().max(1.0))
    }
}

/// Pulse description for configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PulseSpec {
    /// `sin²` ramp, rising for emission and falling for absorption.
    Ramp {
        /// Peak `Ω` in units of `g`.
        omega_max_over_g: f64,
        /// Duration in units of `1/g`.
        duration_g: f64,
        #[serde(default = "default_pulse_samples")]
        samples: usize,
    },
    /// Explicit real samples in rad/s with spacing `dt` seconds, given for
    /// emission; absorption plays them backwards.
    Samples { dt: f64, values: Vec<f64> },
}

fn default_pulse_samples() -> usize {
    2001
}

impl PulseSpec {
    pub fn build(&self, g: f64, direction: Direction) -> Result<ControlPulse> {
        match self {
            PulseSpec::Ramp {
                omega_max_over_g,
                duration_g,
                samples,
            } => {
                let p = ControlPulse::emission_ramp(omega_max_over_g * g, duration_g / g, *samples)?;
                Ok(match direction {
                    Direction::Emit => p,
                    Direction::Absorb => p.time_reversed(),
                })
            }
            PulseSpec::Samples { dt, values } => {
                let p = ControlPulse::from_real(*dt, values)?;
                Ok(match direction {
                    Direction::Emit => p,
                    Direction::Absorb => p.time_reversed(),
                })
            }
        }
    }
}

/// Density matrix over atom ⊗ cavity mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomCavityState {
    pub state: DensityMatrix,
}

impl AtomCavityState {
    pub fn basis(level: Level, photons: usize, fock_cutoff: usize) -> Result<Self> {
        if photons > fock_cutoff {
            return Err(Error::arg(format!("{photons} photons above cutoff {fock_cutoff}")));
        }
        Ok(AtomCavityState {
            state: DensityMatrix::basis(atom_cavity_space(fock_cutoff)?, &[level as usize, photons])?,
        })
    }

    pub fn from_density(state: DensityMatrix) -> Result<Self> {
        let dims = state.space().dims();
        if dims.len() != 2 || dims[0] != 3 {
            return Err(Error::arg("atom-cavity state must be atom(3) ⊗ cavity"));
        }
        Ok(AtomCavityState { state })
    }

    pub fn fock_dim(&self) -> usize {
        self.state.space().dims()[1]
    }

    pub fn mean_photon_number(&self) -> f64 {
        let d = self.fock_dim();
        self.state
            .expectation_on(&fock::number(d), &[1])
            .map(|z| z.re)
            .unwrap_or(0.0)
    }

    pub fn level_population(&self, level: Level) -> f64 {
        (0..self.fock_dim())
            .map(|n| self.state.population(&[level as usize, n]))
            .sum()
    }
}

/// Output of `evolve_lindblad`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<AtomCavityState>,
    /// `∫ 2κ ⟨a†a⟩ dt`: probability emitted through the cavity mirror.
    pub emitted: Vec<f64>,
    /// `∫ 2γ P_e dt`: probability scattered into non-cavity modes.
    pub scattered: Vec<f64>,
    pub max_excited_population: f64,
    pub max_trace_error: f64,
}

impl Trajectory {
    pub fn last(&self) -> &AtomCavityState {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

struct Operators {
    number: CMatrix,
    coupling: CMatrix,
    drive: CMatrix,
    excited: CMatrix,
    cavity_jump: CMatrix,
    atom_jump: CMatrix,
}

impl Operators {
    fn new(d: usize) -> Self {
        let atom = |i: usize, j: usize| {
            let mut m = CMatrix::zeros(3, 3);
            m[(i, j)] = cr(1.0);
            m
        };
        let id_a = CMatrix::identity(3, 3);
        let id_c = CMatrix::identity(d, d);
        let a = fock::annihilation(d);
        let (ia, ib, ie) = (Level::A as usize, Level::B as usize, Level::E as usize);
        let sigma_eb_a = atom(ie, ib).kronecker(&a);
        Operators {
            number: id_a.kronecker(&fock::number(d)),
            coupling: &sigma_eb_a + sigma_eb_a.adjoint(),
            drive: atom(ie, ia).kronecker(&id_c),
            excited: atom(ie, ie).kronecker(&id_c),
            cavity_jump: id_a.kronecker(&a),
            atom_jump: atom(ib, ie).kronecker(&id_c),
        }
    }
}

fn check_step(params: &CavityParams, pulse: &ControlPulse, dt: f64) -> Result<()> {
    let rate = params.fastest_rate(pulse);
    let bound = if rate > 0.0 { 0.1 / rate } else { f64::INFINITY };
    if !(dt > 0.0) || dt > bound {
        return Err(Error::Stability { dt, bound });
    }
    Ok(())
}

fn step_count(t_span: (f64, f64), dt: f64) -> Result<(usize, f64)> {
    let span = t_span.1 - t_span.0;
    if !(span >= 0.0) || !span.is_finite() {
        return Err(Error::arg("time span must be finite and ordered"));
    }
    let n = (span / dt - 1e-9).ceil().max(0.0) as usize;
    Ok((n, if n == 0 { 0.0 } else { span / n as f64 }))
}

/// Integrates the master equation
/// `dρ/dt = −i[H,ρ] + 2κ D[a]ρ + 2γ D[|b⟩⟨e|]ρ` with fixed-step RK4 and
/// records every step. `dt` is rounded down so the steps tile `t_span`.
pub fn evolve_lindblad(
    initial: &AtomCavityState,
    params: &CavityParams,
    pulse: &ControlPulse,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory> {
    integrate_lindblad(initial, params, pulse, t_span, dt, 1)
}

/// `evolve_lindblad` recording every `stride`-th step (and the final one).
pub fn integrate_lindblad(
    initial: &AtomCavityState,
    params: &CavityParams,
    pulse: &ControlPulse,
    t_span: (f64, f64),
    dt: f64,
    stride: usize,
) -> Result<Trajectory> {
    params.validate_dynamics()?;
    check_step(params, pulse, dt)?;
    let (n_steps, h) = step_count(t_span, dt)?;
    let d = initial.fock_dim();
    let ops = Operators::new(d);
    let space = initial.state.space().clone();
    let (g, kappa, gamma, delta) = (params.g, params.kappa, params.gamma, params.detuning());
    let i = C64::i();

    let static_h =
        &ops.number * cr(delta) + &ops.coupling * cr(g) - (&ops.number * cr(kappa) + &ops.excited * cr(gamma)) * i;
    let jumps = [
        (&ops.cavity_jump * cr((2.0 * kappa).sqrt())),
        (&ops.atom_jump * cr((2.0 * gamma).sqrt())),
    ];
    let jumps_adj: Vec<CMatrix> = jumps.iter().map(|j| j.adjoint()).collect();
    let drive_adj = ops.drive.adjoint();
    let number_diag: Vec<f64> = (0..3 * d).map(|k| ops.number[(k, k)].re).collect();
    let excited_diag: Vec<f64> = (0..3 * d).map(|k| ops.excited[(k, k)].re).collect();

    // derivative of (ρ, emitted, scattered)
    let rhs = |t: f64, rho: &CMatrix| -> (CMatrix, f64, f64) {
        let omega = pulse.at(t);
        let h_eff = &static_h - (&ops.drive * omega + &drive_adj * omega.conj());
        let mut out = (&h_eff * rho - rho * h_eff.adjoint()) * (-i);
        for (j, ja) in jumps.iter().zip(&jumps_adj) {
            out += j * rho * ja;
        }
        let n: f64 = (0..3 * d).map(|k| number_diag[k] * rho[(k, k)].re).sum();
        let pe: f64 = (0..3 * d).map(|k| excited_diag[k] * rho[(k, k)].re).sum();
        (out, 2.0 * kappa * n, 2.0 * gamma * pe)
    };

    let mut rho = initial.state.matrix().clone();
    let (mut emitted, mut scattered) = (0.0, 0.0);
    let mut t = t_span.0;
    let mut traj = Trajectory {
        times: vec![t],
        states: vec![initial.clone()],
        emitted: vec![0.0],
        scattered: vec![0.0],
        max_excited_population: (0..3 * d).map(|k| excited_diag[k] * rho[(k, k)].re).sum(),
        max_trace_error: 0.0,
    };
    let stride = stride.max(1);
    for step in 1..=n_steps {
        let (k1, e1, s1) = rhs(t, &rho);
        let (k2, e2, s2) = rhs(t + h / 2.0, &(&rho + &k1 * cr(h / 2.0)));
        let (k3, e3, s3) = rhs(t + h / 2.0, &(&rho + &k2 * cr(h / 2.0)));
        let (k4, e4, s4) = rhs(t + h, &(&rho + &k3 * cr(h)));
        rho += (k1 + (k2 + k3) * cr(2.0) + k4) * cr(h / 6.0);
        emitted += h / 6.0 * (e1 + 2.0 * (e2 + e3) + e4);
        scattered += h / 6.0 * (s1 + 2.0 * (s2 + s3) + s4);
        t = t_span.0 + step as f64 * h;
        let pe: f64 = (0..3 * d).map(|k| excited_diag[k] * rho[(k, k)].re).sum();
        traj.max_excited_population = traj.max_excited_population.max(pe);
        let tr = rho.trace();
        traj.max_trace_error = traj.max_trace_error.max((tr - cr(1.0)).norm());
        if step % stride == 0 || step == n_steps {
            traj.times.push(t);
            traj.states.push(AtomCavityState {
                state: DensityMatrix::from_raw(space.clone(), rho.clone())?,
            });
            traj.emitted.push(emitted);
            traj.scattered.push(scattered);
        }
    }
    Ok(traj)
}

/// Single-excitation amplitudes `(c_a, c_e, c_c)` on `|a,0⟩, |e,0⟩, |b,1⟩`.
/// `|b,0⟩` is stationary and carries the rest of the norm.
pub type Amplitudes = [C64; 3];

/// Output of the single-excitation integrator.
#[derive(Clone, Debug)]
pub struct AmplitudeRun {
    /// Grid of the output field, spacing `dt`.
    pub dt: f64,
    pub start: f64,
    /// Outgoing field `ξ_out = ξ_in + √(2κ) c_c` in √(1/s) on the grid.
    pub output: Vec<C64>,
    pub last: Amplitudes,
    pub max_excited_population: f64,
}

impl AmplitudeRun {
    /// `∫ |ξ_out|² dt` by the trapezoidal rule.
    pub fn output_probability(&self) -> f64 {
        trapezoid(&self.output, self.dt)
    }
}

fn trapezoid(f: &[C64], dt: f64) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    let inner: f64 = f.iter().map(|z| z.norm_sqr()).sum();
    dt * (inner - 0.5 * (f[0].norm_sqr() + f[f.len() - 1].norm_sqr()))
}

/// Integrates the non-Hermitian single-excitation equations with an optional
/// incoming field sampled at spacing `dt / 2` (so RK4 midpoints fall on
/// samples). The output is recorded at spacing `dt / 2` as well, i.e. on the
/// same grid as the input.
pub fn integrate_amplitudes(
    params: &CavityParams,
    pulse: &ControlPulse,
    start: f64,
    n_steps: usize,
    dt: f64,
    initial: Amplitudes,
    input: Option<&[C64]>,
) -> Result<AmplitudeRun> {
    params.validate_dynamics()?;
    check_step(params, pulse, dt)?;
    if let Some(x) = input {
        if x.len() != 2 * n_steps + 1 {
            return Err(Error::arg(format!(
                "input field has {} samples, expected {}",
                x.len(),
                2 * n_steps + 1
            )));
        }
    }
    let (g, kappa, gamma, delta) = (params.g, params.kappa, params.gamma, params.detuning());
    let i = C64::i();
    let root = (2.0 * kappa).sqrt();
    let xi = |k: usize| input.map_or(C64::new(0.0, 0.0), |x| x[k]);
    let rhs = |t: f64, c: &Amplitudes, x: C64| -> Amplitudes {
        let w = pulse.at(t);
        [
            i * w.conj() * c[1],
            i * w * c[0] - i * g * c[2] - gamma * c[1],
            -i * g * c[1] - (i * delta + kappa) * c[2] - root * x,
        ]
    };
    let add =
        |c: &Amplitudes, k: &Amplitudes, s: f64| -> Amplitudes { [c[0] + k[0] * s, c[1] + k[1] * s, c[2] + k[2] * s] };
    let mut c = initial;
    let mut output = Vec::with_capacity(2 * n_steps + 1);
    output.push(xi(0) + root * c[2]);
    let mut max_pe = c[1].norm_sqr();
    for step in 0..n_steps {
        let t = start + step as f64 * dt;
        let (x0, xm, x1) = (xi(2 * step), xi(2 * step + 1), xi(2 * step + 2));
        let k1 = rhs(t, &c, x0);
        let mid1 = add(&c, &k1, dt / 2.0);
        let k2 = rhs(t + dt / 2.0, &mid1, xm);
        let mid2 = add(&c, &k2, dt / 2.0);
        let k3 = rhs(t + dt / 2.0, &mid2, xm);
        let k4 = rhs(t + dt, &add(&c, &k3, dt), x1);
        let prev = c[2];
        for j in 0..3 {
            c[j] += (k1[j] + (k2[j] + k3[j]) * 2.0 + k4[j]) * (dt / 6.0);
        }
        // cubic Hermite value at the midpoint
        let end_slope = rhs(t + dt, &c, x1)[2];
        let c_mid = (prev + c[2]) * 0.5 + (k1[2] - end_slope) * (dt / 8.0);
        output.push(xm + root * c_mid);
        output.push(x1 + root * c[2]);
        max_pe = max_pe.max(c[1].norm_sqr());
    }
    Ok(AmplitudeRun {
        dt: dt / 2.0,
        start,
        output,
        last: c,
        max_excited_population: max_pe,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    Ideal,
    Integrated,
}

/// Step and tail used by the integrated maps. `None` picks
/// `dt = 0.02 / fastest rate` and a tail of `20/κ` after the pulse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSettings {
    pub dt: Option<f64>,
    pub tail: Option<f64>,
}

impl IntegrationSettings {
    fn resolve(&self, params: &CavityParams, pulse: &ControlPulse) -> Result<(f64, f64)> {
        let dt = self.dt.unwrap_or(0.02 / params.fastest_rate(pulse));
        let tail = match self.tail {
            Some(t) => t,
            None if params.kappa > 0.0 => 20.0 / params.kappa,
            None => return Err(Error::arg("cavity with κ = 0 cannot exchange photons")),
        };
        Ok((dt, tail))
    }
}

#[derive(Clone, Debug)]
pub struct MapOutput {
    /// Photon qubit for emission, memory qubit for absorption.
    pub output: DensityMatrix,
    /// Probability that the excitation is transferred (emitted into the cavity
    /// output mode, or stored in `|a⟩`).
    pub success_probability: f64,
    /// Probability lost by scattering from `|e⟩`.
    pub scattered_probability: f64,
    pub max_excited_population: f64,
    /// Emitted envelope (emission in integrated mode).
    pub envelope: Option<Wavepacket>,
    /// Amplitude of the transferred excitation; its phase is the phase of
    /// the map.
    pub transfer_amplitude: C64,
}

pub fn memory_qubit_space() -> HilbertSpace {
    HilbertSpace::single(2, SubsystemKind::Atom).expect("dimension 2")
}

pub fn photon_qubit_space() -> HilbertSpace {
    HilbertSpace::single(2, SubsystemKind::Field).expect("dimension 2")
}

/// Qubit state left by a map that moves the `|1⟩` component with amplitude
/// `amp` and leaves the `|0⟩` component alone; everything not transferred
/// ends in `|0⟩` with an orthogonal environment.
fn damped_qubit(input: &StateVector, amp: C64, space: HilbertSpace) -> Result<DensityMatrix> {
    let (c0, c1) = (input.amplitudes()[0], input.amplitudes()[1]);
    let moved = c1 * amp;
    let p1 = moved.norm_sqr();
    let m = CMatrix::from_row_slice(
        2,
        2,
        &[
            cr(c0.norm_sqr() + c1.norm_sqr() - p1),
            c0 * moved.conj(),
            moved * c0.conj(),
            cr(p1),
        ],
    );
    DensityMatrix::new(space, m)
}

fn check_qubit(input: &StateVector) -> Result<()> {
    if input.space().dims() != [2] {
        return Err(Error::arg("expected a single qubit"));
    }
    Ok(())
}

/// Emission run from `|a,0⟩` over the pulse plus a tail, on the amplitude
/// integrator. Returns the run and the number of steps.
fn emission_run(params: &CavityParams, pulse: &ControlPulse, settings: &IntegrationSettings) -> Result<AmplitudeRun> {
    let (dt, tail) = settings.resolve(params, pulse)?;
    let span = pulse.duration() + tail;
    let (n, h) = step_count((0.0, span), dt)?;
    integrate_amplitudes(
        params,
        &pulse.clone().delayed(0.0),
        0.0,
        n,
        h,
        [cr(1.0), cr(0.0), cr(0.0)],
        None,
    )
}

/// Dark-state mapping between a memory qubit and a photon qubit.
///
/// Emission takes `c₀|b⟩ + c₁|a⟩` to `c₀|0⟩ + c₁|1⟩`; absorption is the
/// inverse. In integrated mode the `|a⟩`/`|1⟩` component moves with the
/// amplitude computed from the dynamics, and the output is the resulting
/// (generally mixed) qubit. Absorption in integrated mode takes as input the
/// time reverse of the photon the same node would emit under the reversed
/// pulse, i.e. a mode-matched photon.
pub fn adiabatic_map(
    direction: Direction,
    pulse: &ControlPulse,
    params: &CavityParams,
    input: &StateVector,
    mode: MapMode,
) -> Result<MapOutput> {
    adiabatic_map_with(direction, pulse, params, input, mode, &IntegrationSettings::default())
}

pub fn adiabatic_map_with(
    direction: Direction,
    pulse: &ControlPulse,
    params: &CavityParams,
    input: &StateVector,
    mode: MapMode,
    settings: &IntegrationSettings,
) -> Result<MapOutput> {
    check_qubit(input)?;
    if !pulse.is_monotone(direction) {
        return Err(Error::arg(format!(
            "{direction:?} needs a monotone {} control pulse",
            match direction {
                Direction::Emit => "off-to-on",
                Direction::Absorb => "on-to-off",
            }
        )));
    }
    let out_space = match direction {
        Direction::Emit => photon_qubit_space(),
        Direction::Absorb => memory_qubit_space(),
    };
    match mode {
        MapMode::Ideal => Ok(MapOutput {
            output: StateVector::new(out_space, input.amplitudes().clone())?.to_density(),
            success_probability: 1.0,
            scattered_probability: 0.0,
            max_excited_population: 0.0,
            envelope: None,
            transfer_amplitude: cr(1.0),
        }),
        MapMode::Integrated => {
            params.validate()?;
            match direction {
                Direction::Emit => {
                    let (dt, tail) = settings.resolve(params, pulse)?;
                    let span = pulse.duration() + tail;
                    let lindblad = integrate_lindblad(
                        &AtomCavityState::basis(Level::A, 0, DEFAULT_FOCK_CUTOFF)?,
                        params,
                        &pulse.clone().delayed(0.0),
                        (0.0, span),
                        dt,
                        usize::MAX,
                    )?;
                    let eta = *lindblad.emitted.last().expect("non-empty");
                    let run = emission_run(params, pulse, settings)?;
                    let envelope = Wavepacket::normalized(
                        run.dt,
                        run.output.clone(),
                        DensityMatrix::basis(photon_qubit_space(), &[1])?,
                    )
                    .ok();
                    // the photon mode is defined by the emitted envelope, so
                    // the amplitude in that mode is real
                    let amp = cr(eta.clamp(0.0, 1.0).sqrt());
                    Ok(MapOutput {
                        output: damped_qubit(input, amp, out_space)?,
                        success_probability: eta,
                        scattered_probability: *lindblad.scattered.last().expect("non-empty"),
                        max_excited_population: lindblad.max_excited_population,
                        envelope,
                        transfer_amplitude: amp,
                    })
                }
                Direction::Absorb => {
                    let reversed = pulse.time_reversed();
                    let emitted = emission_run(params, &reversed, settings)?;
                    let incoming: Vec<C64> = emitted.output.iter().rev().map(|z| z.conj()).collect();
                    let span = emitted.dt * (incoming.len() - 1) as f64;
                    let packet = Wavepacket::normalized(
                        emitted.dt,
                        incoming,
                        DensityMatrix::basis(photon_qubit_space(), &[1])?,
                    )?;
                    // the absorb pulse ends where the reversed emission window ends
                    let aligned = pulse.clone().delayed(span - pulse.duration());
                    let result = absorb_wavepacket(params, &aligned, &packet, 0.0)?;
                    Ok(MapOutput {
                        output: damped_qubit(input, result.amplitude, out_space)?,
                        success_probability: result.amplitude.norm_sqr(),
                        scattered_probability: result.scattered,
                        max_excited_population: result.max_excited_population,
                        envelope: None,
                        transfer_amplitude: result.amplitude,
                    })
                }
            }
        }
    }
}

/// Result of driving a node with an incoming single-photon wavepacket.
#[derive(Clone, Copy, Debug)]
pub struct Absorption {
    /// Final amplitude of `|a,0⟩` per unit incoming photon amplitude.
    pub amplitude: C64,
    pub reflected: f64,
    pub scattered: f64,
    pub max_excited_population: f64,
}

/// Feeds the envelope of `packet` (starting at `arrival`) into a node in
/// `|b,0⟩` while `pulse` drives it. The packet grid spacing must be half the
/// integration step, which must satisfy the stability bound.
pub fn absorb_wavepacket(
    params: &CavityParams,
    pulse: &ControlPulse,
    packet: &Wavepacket,
    arrival: f64,
) -> Result<Absorption> {
    absorb_envelope(params, pulse, packet.envelope(), packet.dt(), arrival)
}

fn absorb_envelope(
    params: &CavityParams,
    pulse: &ControlPulse,
    envelope: &[C64],
    sample_dt: f64,
    arrival: f64,
) -> Result<Absorption> {
    let mut env = envelope.to_vec();
    if env.len().is_multiple_of(2) {
        env.push(C64::new(0.0, 0.0));
    }
    let n_steps = (env.len() - 1) / 2;
    let run = integrate_amplitudes(
        params,
        pulse,
        arrival,
        n_steps,
        2.0 * sample_dt,
        [cr(0.0); 3],
        Some(&env),
    )?;
    let incoming = trapezoid(&env, sample_dt);
    let reflected = run.output_probability();
    let stored = run.last[0].norm_sqr();
    let scale = if incoming > 0.0 { 1.0 / incoming.sqrt() } else { 0.0 };
    let left = run.last[1].norm_sqr() + run.last[2].norm_sqr();
    Ok(Absorption {
        amplitude: run.last[0] * scale,
        reflected: reflected / incoming.max(f64::MIN_POSITIVE),
        scattered: ((incoming - reflected - stored - left) / incoming.max(f64::MIN_POSITIVE)).max(0.0),
        max_excited_population: run.max_excited_population / incoming.max(f64::MIN_POSITIVE),
    })
}

/// Stored amplitude at B with B's pulse started at the delay that maximizes
/// it. A ramp does not emit a time-symmetric photon, so mirroring A's pulse
/// about the emission window is generally not the best alignment.
fn matched_absorption(params: &CavityParams, pulse: &ControlPulse, field: &[C64], dt: f64) -> Result<C64> {
    let window = dt * (field.len() - 1) as f64;
    let duration = pulse.duration();
    // zero-pad so that B's pulse always finishes inside the integration
    let pad = 2 * (duration / dt).ceil() as usize + 2;
    let mut env = field.to_vec();
    env.resize(field.len() + pad, C64::new(0.0, 0.0));
    let stored = |delay: f64| -> Result<C64> {
        Ok(absorb_envelope(params, &pulse.clone().delayed(delay), &env, dt, 0.0)?.amplitude)
    };
    let (lo, hi) = (-duration, window);
    let n = 48;
    let step = (hi - lo) / n as f64;
    let mut best = (lo, stored(lo)?);
    for k in 1..=n {
        let d = lo + k as f64 * step;
        let a = stored(d)?;
        if a.norm() > best.1.norm() {
            best = (d, a);
        }
    }
    // golden-section refinement inside the neighbouring grid cells
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (stored(x1)?, stored(x2)?);
    for _ in 0..40 {
        if f1.norm() > f2.norm() {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = stored(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = stored(x2)?;
        }
    }
    for cand in [f1, f2] {
        if cand.norm() > best.1.norm() {
            best.1 = cand;
        }
    }
    // absorb_envelope normalizes to one incoming photon; undo that so the
    // result includes emission efficiency and link loss
    Ok(best.1 * trapezoid(&env, dt).sqrt())
}

#[derive(Clone, Debug)]
pub struct TransferOutput {
    /// Memory qubit at B.
    pub state: DensityMatrix,
    /// Fidelity of `state` to the input memory qubit.
    pub fidelity: f64,
    /// Probability that the `|a⟩` excitation arrives in B's memory.
    pub success_probability: f64,
    /// Fidelity on the branch where no excitation was lost.
    pub conditional_fidelity: f64,
    /// Phase picked up by the transferred excitation, radians.
    pub transfer_phase: f64,
}

/// Emit at A, propagate through `link`, absorb at B.
///
/// In ideal mode the pulses must be an exact time-reversed pair on the same
/// grid. In integrated mode B is driven by A's actual output field (pulse
/// plus decay tail) with B's pulse timed for the largest stored amplitude;
/// the transfer amplitude includes whatever mode mismatch remains.
#[allow(clippy::too_many_arguments)]
pub fn transfer_node_to_node(
    state: &StateVector,
    pulses: (&ControlPulse, &ControlPulse),
    link: &OpticalLink,
    params_a: &CavityParams,
    params_b: &CavityParams,
    mode: MapMode,
    settings: &IntegrationSettings,
) -> Result<TransferOutput> {
    check_qubit(state)?;
    link.validate()?;
    let (out_a, in_b) = pulses;
    if !out_a.is_monotone(Direction::Emit) || !in_b.is_monotone(Direction::Absorb) {
        return Err(Error::arg("transfer needs an off-to-on pulse at A and on-to-off at B"));
    }
    let link_amp = C64::from_polar(link.transmissivity().sqrt(), link.extra_phase);
    let amp = match mode {
        MapMode::Ideal => {
            if !in_b.is_time_reverse_of(out_a) {
                return Err(Error::arg("ideal transfer needs B's pulse to be A's pulse reversed"));
            }
            link_amp
        }
        MapMode::Integrated => {
            params_a.validate()?;
            params_b.validate()?;
            let emitted = emission_run(params_a, out_a, settings)?;
            let field: Vec<C64> = emitted
                .output
                .iter()
                .map(|z| z * link.transmissivity().sqrt())
                .collect();
            // B's drive phase multiplies the stored amplitude directly; it is
            // chosen to cancel the fixed phase of the emit-absorb sequence, so
            // only the link phase is left, as in ideal mode
            let stored = matched_absorption(params_b, in_b, &field, emitted.dt)?;
            C64::from_polar(stored.norm(), link.extra_phase)
        }
    };
    let space = memory_qubit_space();
    let out = damped_qubit(state, amp, space.clone())?;
    let target = StateVector::new(space.clone(), state.amplitudes().clone())?;
    let fidelity = out.fidelity_pure(&target)?;
    // branch with no excitation lost: |b⟩ → |b⟩, |a⟩ → amp |a⟩
    let kept = nalgebra::DVector::from_vec(vec![state.amplitudes()[0], state.amplitudes()[1] * amp]);
    let kept_norm = kept.norm();
    let conditional_fidelity = if kept_norm > 0.0 {
        (target.amplitudes().dotc(&kept).norm() / kept_norm).powi(2)
    } else {
        0.0
    };
    Ok(TransferOutput {
        state: out,
        fidelity,
        success_probability: amp.norm_sqr(),
        conditional_fidelity,
        transfer_phase: amp.arg(),
    })
}

/// Stores a coherent field `|α⟩`, `|α|² = n̄`, in an ideal single-atom memory
/// and reads it back. The memory holds at most one excitation: any further
/// photons pass the atom and are lost. `store` and `retrieve` are the
/// amplitudes with which the one-photon component is mapped.
#[derive(Clone, Debug)]
pub struct CoherentRoundTrip {
    pub mean_photon_number: f64,
    /// Memory qubit after storage, basis `[|b⟩, |a⟩]`.
    pub stored: DensityMatrix,
    /// Retrieved photon qubit.
    pub retrieved: DensityMatrix,
    /// `⟨α|ρ_out|α⟩` with `|α⟩` truncated to `{|0⟩, |1⟩}` and renormalized.
    pub overlap_with_qubit_projection: f64,
    /// `⟨α|ρ_out|α⟩` against the full coherent state.
    pub overlap_with_input: f64,
}

pub fn coherent_state_round_trip(nbar: f64, store: C64, retrieve: C64) -> Result<CoherentRoundTrip> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::arg("mean photon number must be non-negative"));
    }
    if store.norm() > 1.0 + 1e-12 || retrieve.norm() > 1.0 + 1e-12 {
        return Err(Error::arg("map amplitudes cannot exceed one"));
    }
    let alpha = nbar.sqrt();
    let c0 = (-nbar / 2.0).exp();
    let c1 = c0 * alpha;
    let p0 = c0 * c0;
    // n = 0 → |b⟩, n ≥ 1 → |a⟩ with n − 1 photons lost; only n ∈ {0, 1}
    // share an environment, so only they stay coherent
    let mut m = CMatrix::zeros(2, 2);
    let s2 = store.norm_sqr();
    m[(0, 0)] = cr(p0 + (1.0 - p0) * (1.0 - s2));
    m[(1, 1)] = cr((1.0 - p0) * s2);
    m[(0, 1)] = cr(c0 * c1) * store.conj();
    m[(1, 0)] = m[(0, 1)].conj();
    let stored = DensityMatrix::new(memory_qubit_space(), m)?;
    let (b, a) = (stored.matrix()[(0, 0)].re, stored.matrix()[(1, 1)].re);
    let coh = stored.matrix()[(0, 1)];
    let r2 = retrieve.norm_sqr();
    let out = CMatrix::from_row_slice(
        2,
        2,
        &[
            cr(b + a * (1.0 - r2)),
            coh * retrieve.conj(),
            coh.conj() * retrieve,
            cr(a * r2),
        ],
    );
    let retrieved = DensityMatrix::new(photon_qubit_space(), out)?;
    let q = StateVector::normalized(photon_qubit_space(), nalgebra::DVector::from_vec(vec![cr(c0), cr(c1)]))?;
    let overlap_q = retrieved.fidelity_pure(&q)?;
    let v = nalgebra::DVector::from_vec(vec![cr(c0), cr(c1)]);
    let full = (v.adjoint() * retrieved.matrix() * &v)[(0, 0)].re;
    Ok(CoherentRoundTrip {
        mean_photon_number: nbar,
        stored,
        retrieved,
        overlap_with_qubit_projection: overlap_q,
        overlap_with_input: full,
    })
}

/// Output of the two-pulse polarization sequence.
#[derive(Clone, Debug)]
pub struct PolarizationPair {
    /// Atom ⊗ photon 1 after the first pulse; atom basis `[|b+⟩, |b−⟩]`,
    /// photon basis `[|σ+⟩, |σ−⟩]`.
    pub intermediate: StateVector,
    /// Photons 1 ⊗ 2 after the second pulse.
    pub photons: Option<StateVector>,
    /// Atom state after the sequence, basis `[|a⟩, |b+⟩, |b−⟩]`.
    pub atom: DensityMatrix,
}

/// Ideal two-time sequence on an atom with ground levels `|a⟩, |b±⟩`
/// coupled through the two circular cavity modes: the first pulse maps
/// `|a⟩ → (|b+⟩|σ+⟩ + |b−⟩|σ−⟩)/√2`, the second maps `|b±⟩ → |a⟩|σ∓⟩`.
/// With `second_pulse = false` the sequence stops after the first photon.
pub fn polarization_pair_sequence(second_pulse: bool) -> Result<PolarizationPair> {
    let s = 0.5f64.sqrt();
    let qubits = |kind_a, kind_b| HilbertSpace::new(vec![2, 2], vec![kind_a, kind_b]);
    let intermediate = StateVector::from_slice(
        qubits(SubsystemKind::Atom, SubsystemKind::Field)?,
        &[cr(s), cr(0.0), cr(0.0), cr(s)],
    )?;
    let atom_space = HilbertSpace::single(3, SubsystemKind::Atom)?;
    if !second_pulse {
        let reduced = intermediate.to_density().partial_trace(&[0])?;
        let mut m = CMatrix::zeros(3, 3);
        for i in 0..2 {
            for j in 0..2 {
                m[(i + 1, j + 1)] = reduced.matrix()[(i, j)];
            }
        }
        return Ok(PolarizationPair {
            intermediate,
            photons: None,
            atom: DensityMatrix::new(atom_space, m)?,
        });
    }
    // |b+⟩|σ+⟩ → |a⟩|σ+⟩|σ−⟩ and |b−⟩|σ−⟩ → |a⟩|σ−⟩|σ+⟩
    let photons = StateVector::from_slice(
        qubits(SubsystemKind::Field, SubsystemKind::Field)?,
        &[cr(0.0), cr(s), cr(s), cr(0.0)],
    )?;
    Ok(PolarizationPair {
        intermediate,
        photons: Some(photons),
        atom: DensityMatrix::basis(atom_space, &[0])?,
    })
}

/// Sends both photons of a polarization pair through loss channels.
/// Returns the coincidence probability and the state conditioned on both
/// photons arriving. Each photon is a qutrit `[vac, σ+, σ−]` internally.
pub fn lossy_photon_pair(photons: &StateVector, transmissivities: (f64, f64)) -> Result<(f64, DensityMatrix)> {
    if photons.space().dims() != [2, 2] {
        return Err(Error::arg("expected two polarization qubits"));
    }
    let kraus = |t: f64| -> Result<Vec<CMatrix>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::arg("transmissivity must lie in [0, 1]"));
        }
        let mut keep = CMatrix::zeros(3, 3);
        keep[(1, 1)] = cr(t.sqrt());
        keep[(2, 2)] = cr(t.sqrt());
        keep[(0, 0)] = cr(1.0);
        let mut lose_p = CMatrix::zeros(3, 3);
        lose_p[(0, 1)] = cr((1.0 - t).sqrt());
        let mut lose_m = CMatrix::zeros(3, 3);
        lose_m[(0, 2)] = cr((1.0 - t).sqrt());
        Ok(vec![keep, lose_p, lose_m])
    };
    let space = HilbertSpace::new(vec![3, 3], vec![SubsystemKind::Field; 2])?;
    let mut amps = nalgebra::DVector::zeros(9);
    for i in 0..2 {
        for j in 0..2 {
            amps[(i + 1) * 3 + (j + 1)] = photons.amplitudes()[i * 2 + j];
        }
    }
    let rho = StateVector::new(space, amps)?
        .to_density()
        .apply_kraus(&kraus(transmissivities.0)?, &[0])?
        .apply_kraus(&kraus(transmissivities.1)?, &[1])?;
    let mut both = CMatrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            let (ri, rj) = ((i / 2 + 1) * 3 + i % 2 + 1, (j / 2 + 1) * 3 + j % 2 + 1);
            both[(i, j)] = rho.matrix()[(ri, rj)];
        }
    }
    let p = both.trace().re;
    let conditional = DensityMatrix::from_raw(photons.space().clone(), both)?.renormalized()?;
    Ok((p, conditional))
}
