//! Two-qubit entanglement verification: concurrence, CHSH correlators,
//! simulated counting records and linear-inversion tomography.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::ensemble::DecoherenceModel;
use crate::error::{Error, Result};
use crate::qstate::{
    c, cr, hermitian_eigen, pauli_x, pauli_y, pauli_z, tolerances, CMatrix, CVector, DensityMatrix, HilbertSpace,
    StateVector, SubsystemKind,
};
use crate::rng::RngStream;

/// A density matrix on exactly two qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoQubitDensityMatrix(DensityMatrix);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BellState {
    PhiPlus,
    PhiMinus,
    PsiPlus,
    PsiMinus,
}

impl BellState {
    pub fn state_vector(self) -> StateVector {
        let s = 0.5f64.sqrt();
        let amps = match self {
            BellState::PhiPlus => [s, 0.0, 0.0, s],
            BellState::PhiMinus => [s, 0.0, 0.0, -s],
            BellState::PsiPlus => [0.0, s, s, 0.0],
            BellState::PsiMinus => [0.0, s, -s, 0.0],
        };
        StateVector::from_slice(two_qubit_space(), &amps.map(cr)).expect("normalized")
    }

    pub fn density(self) -> TwoQubitDensityMatrix {
        TwoQubitDensityMatrix(self.state_vector().to_density())
    }
}

pub fn two_qubit_space() -> HilbertSpace {
    HilbertSpace::qubits(2).expect("two qubits fit")
}

impl TwoQubitDensityMatrix {
    /// Wraps a validated state whose space is 2 ⊗ 2.
    pub fn new(rho: DensityMatrix) -> Result<Self> {
        if rho.space().dims() != [2, 2] {
            return Err(Error::arg(format!("expected a two-qubit state, got {}", rho.space())));
        }
        rho.validate()?;
        Ok(TwoQubitDensityMatrix(rho))
    }

    pub fn from_matrix(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != 4 || matrix.ncols() != 4 {
            return Err(Error::arg(format!(
                "expected a 4x4 matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Self::new(DensityMatrix::new(two_qubit_space(), matrix)?)
    }

    pub fn from_pure(psi: &StateVector) -> Result<Self> {
        Self::new(psi.to_density())
    }

    pub fn product(a: &DensityMatrix, b: &DensityMatrix) -> Result<Self> {
        Self::new(a.tensor(b)?)
    }

    pub fn maximally_mixed() -> Self {
        TwoQubitDensityMatrix(DensityMatrix::maximally_mixed(two_qubit_space()))
    }

    pub fn as_density(&self) -> &DensityMatrix {
        &self.0
    }

    pub fn into_density(self) -> DensityMatrix {
        self.0
    }

    pub fn matrix(&self) -> &CMatrix {
        self.0.matrix()
    }

    /// Reduced state of qubit 0 or 1.
    pub fn reduced(&self, qubit: usize) -> Result<DensityMatrix> {
        self.0.partial_trace(&[qubit])
    }

    /// `(U ⊗ V) ρ (U ⊗ V)†`.
    pub fn local_unitary(&self, u: &CMatrix, v: &CMatrix) -> Result<Self> {
        let uv = u.kronecker(v);
        Ok(TwoQubitDensityMatrix(self.0.apply_unitary(&uv, &[0, 1])?))
    }
}

/// Projects two subsystems of `rho` onto their {0, 1} occupations and
/// renormalizes. Returns the two-qubit state and the weight that was kept.
pub fn restrict_to_qubits(rho: &DensityMatrix, first: usize, second: usize) -> Result<(TwoQubitDensityMatrix, f64)> {
    if first == second {
        return Err(Error::arg("restriction needs two distinct subsystems"));
    }
    let reduced = rho.partial_trace(&[first, second])?;
    // partial_trace keeps subsystems in ascending order
    let reduced = if first > second {
        reduced.permute(&[1, 0])?
    } else {
        reduced
    };
    let dims = reduced.space().dims().to_vec();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::arg("restricted subsystems need at least two levels"));
    }
    let index = |a: usize, b: usize| a * dims[1] + b;
    let keep = [index(0, 0), index(0, 1), index(1, 0), index(1, 1)];
    let block = CMatrix::from_fn(4, 4, |i, j| reduced.matrix()[(keep[i], keep[j])]);
    let weight = block.trace().re;
    let state = DensityMatrix::from_raw(two_qubit_space(), block)?.renormalized()?;
    Ok((TwoQubitDensityMatrix::new(state.hermitized())?, weight))
}

/// Concurrence of a pure two-qubit state, `|⟨ψ|σy⊗σy|ψ*⟩|`.
pub fn pure_concurrence(psi: &CVector) -> f64 {
    // σy⊗σy maps (a, b, c, d) to (-d, c, b, -a)
    let flipped = [-psi[3].conj(), psi[2].conj(), psi[1].conj(), -psi[0].conj()];
    let overlap: crate::qstate::C64 = (0..4).map(|i| psi[i].conj() * flipped[i]).sum();
    overlap.norm().min(1.0)
}

/// Eigenvalues of ρ below this are roundoff and are dropped before the
/// decomposition is formed; their square roots would otherwise leave a
/// floor near 1e-8.
const EIGEN_FLOOR: f64 = 1e-13;

/// Wootters concurrence `max(0, λ1 − λ2 − λ3 − λ4)`, with λ the decreasing
/// square roots of the eigenvalues of `ρ (σy⊗σy) ρ* (σy⊗σy)`. They are
/// computed as the singular values of `τ = Wᵀ (σy⊗σy) W`, W holding the
/// subnormalized eigenvectors `√p_i |v_i⟩` of ρ.
pub fn concurrence(rho: &TwoQubitDensityMatrix) -> Result<f64> {
    let (vals, vecs) = hermitian_eigen(rho.matrix());
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tolerances().psd_clip {
        return Err(Error::StateValidity(format!("negative eigenvalue {min:e}")));
    }
    let kept: Vec<usize> = (0..4).filter(|&i| vals[i] > EIGEN_FLOOR).collect();
    let mut w = CMatrix::zeros(4, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        w.set_column(col, &(vecs.column(i) * cr(vals[i].sqrt())));
    }
    let yy = pauli_y().kronecker(&pauli_y());
    let tau = w.transpose() * yy * &w;
    let mut lambda: Vec<f64> = tau.singular_values().iter().copied().collect();
    lambda.resize(4, 0.0);
    lambda.sort_by(|a, b| b.total_cmp(a));
    Ok((lambda[0] - lambda[1] - lambda[2] - lambda[3]).clamp(0.0, 1.0))
}

/// Polarization analyzer: dichotomic observable
/// `cos 2θ Z + sin 2θ (cos φ X + sin φ Y)`, whose +1 eigenvector is
/// `cos θ |0⟩ + e^{iφ} sin θ |1⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyzer {
    pub angle: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Analyzer {
    pub fn linear(angle: f64) -> Self {
        Analyzer { angle, phase: 0.0 }
    }

    pub fn z() -> Self {
        Analyzer::linear(0.0)
    }

    pub fn x() -> Self {
        Analyzer::linear(FRAC_PI_4)
    }

    pub fn y() -> Self {
        Analyzer {
            angle: FRAC_PI_4,
            phase: std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.angle.is_finite() || !self.phase.is_finite() {
            return Err(Error::arg("analyzer angles must be finite"));
        }
        Ok(())
    }

    pub fn observable(&self) -> CMatrix {
        let (s2, c2) = (2.0 * self.angle).sin_cos();
        let (sp, cp) = self.phase.sin_cos();
        pauli_z() * cr(c2) + (pauli_x() * cr(cp) + pauli_y() * cr(sp)) * cr(s2)
    }

    /// Projectors onto the +1 and −1 outcomes.
    pub fn projectors(&self) -> [CMatrix; 2] {
        let o = self.observable();
        let id = CMatrix::identity(2, 2);
        [(&id + &o) * cr(0.5), (&id - &o) * cr(0.5)]
    }
}

/// Product setting: one analyzer per side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSetting {
    pub a: Analyzer,
    pub b: Analyzer,
}

impl MeasurementSetting {
    pub fn new(a: Analyzer, b: Analyzer) -> Self {
        MeasurementSetting { a, b }
    }

    pub fn validate(&self) -> Result<()> {
        self.a.validate()?;
        self.b.validate()
    }

    /// Joint projectors in outcome order (+,+), (+,−), (−,+), (−,−).
    pub fn projectors(&self) -> [CMatrix; 4] {
        let [ap, am] = self.a.projectors();
        let [bp, bm] = self.b.projectors();
        [
            ap.kronecker(&bp),
            ap.kronecker(&bm),
            am.kronecker(&bp),
            am.kronecker(&bm),
        ]
    }
}

/// Linear analyzer angles (a, a′, b, b′) that reach 2√2 on Φ+.
pub const CANONICAL_CHSH_ANGLES: [f64; 4] = [
    0.0,
    FRAC_PI_4,
    std::f64::consts::PI / 8.0,
    3.0 * std::f64::consts::PI / 8.0,
];

/// The four settings (a,b), (a,b′), (a′,b), (a′,b′).
pub fn chsh_settings(a: Analyzer, a2: Analyzer, b: Analyzer, b2: Analyzer) -> [MeasurementSetting; 4] {
    [
        MeasurementSetting::new(a, b),
        MeasurementSetting::new(a, b2),
        MeasurementSetting::new(a2, b),
        MeasurementSetting::new(a2, b2),
    ]
}

pub fn canonical_chsh_settings() -> [MeasurementSetting; 4] {
    let [a, a2, b, b2] = CANONICAL_CHSH_ANGLES.map(Analyzer::linear);
    chsh_settings(a, a2, b, b2)
}

/// `E(a, b) = Tr(ρ A ⊗ B)`.
pub fn correlator(rho: &TwoQubitDensityMatrix, setting: &MeasurementSetting) -> f64 {
    let op = setting.a.observable().kronecker(&setting.b.observable());
    rho.0.expectation(&op).re
}

/// `S = |E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|` for settings ordered as in
/// [`chsh_settings`].
pub fn chsh_value(rho: &TwoQubitDensityMatrix, settings: &[MeasurementSetting; 4]) -> f64 {
    let e: Vec<f64> = settings.iter().map(|s| correlator(rho, s)).collect();
    (e[0] - e[1] + e[2] + e[3]).abs()
}

/// Largest CHSH value over all analyzer choices, `2√(m1 + m2)` with m the two
/// largest eigenvalues of `TᵀT`, `T_ij = Tr(ρ σi ⊗ σj)`.
pub fn max_chsh(rho: &TwoQubitDensityMatrix) -> f64 {
    let paulis = [pauli_x(), pauli_y(), pauli_z()];
    let t = DMatrix::<f64>::from_fn(3, 3, |i, j| rho.0.expectation(&paulis[i].kronecker(&paulis[j])).re);
    let m = t.transpose() * t;
    let mut vals: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    2.0 * (vals[0] + vals[1]).max(0.0).sqrt()
}

/// Born probabilities of the four joint outcomes of one setting.
pub fn born_probabilities(rho: &TwoQubitDensityMatrix, setting: &MeasurementSetting) -> [f64; 4] {
    setting.projectors().map(|p| rho.0.expectation(&p).re.clamp(0.0, 1.0))
}

/// Simulated counting record: outcome counts per setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsTable {
    pub settings: Vec<MeasurementSetting>,
    /// Outcome counts in the order (+,+), (+,−), (−,+), (−,−).
    pub counts: Vec<[u64; 4]>,
    pub shots: Vec<u64>,
}

impl CountsTable {
    pub fn validate(&self) -> Result<()> {
        if self.settings.len() != self.counts.len() || self.counts.len() != self.shots.len() {
            return Err(Error::arg("counts table columns have different lengths"));
        }
        for (i, (row, &n)) in self.counts.iter().zip(&self.shots).enumerate() {
            if row.iter().sum::<u64>() != n {
                return Err(Error::arg(format!("setting {i}: counts do not sum to shots")));
            }
            self.settings[i].validate()?;
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Result<Vec<[f64; 4]>> {
        self.validate()?;
        self.counts
            .iter()
            .zip(&self.shots)
            .map(|(row, &n)| {
                if n == 0 {
                    return Err(Error::arg("setting with zero shots"));
                }
                Ok(row.map(|k| k as f64 / n as f64))
            })
            .collect()
    }
}

/// Multinomial sampling of `shots` events per setting.
pub fn simulate_counts(
    rho: &TwoQubitDensityMatrix,
    settings: &[MeasurementSetting],
    shots: u64,
    rng: &mut RngStream,
) -> Result<CountsTable> {
    if shots == 0 {
        return Err(Error::arg("shots must be at least 1"));
    }
    let mut counts = Vec::with_capacity(settings.len());
    for s in settings {
        s.validate()?;
        let probs = born_probabilities(rho, s);
        // sequential conditional binomials
        let mut row = [0u64; 4];
        let mut left = shots;
        let mut mass = 1.0;
        for k in 0..3 {
            let q = if mass > 0.0 {
                (probs[k] / mass).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let draw = Binomial::new(left, q)
                .map_err(|e| Error::arg(format!("binomial: {e}")))?
                .sample(rng);
            row[k] = draw;
            left -= draw;
            mass -= probs[k];
        }
        row[3] = left;
        counts.push(row);
    }
    Ok(CountsTable {
        settings: settings.to_vec(),
        counts,
        shots: vec![shots; settings.len()],
    })
}

/// The nine Pauli-basis product settings (X, Y, Z on each side).
pub fn pauli_settings() -> Vec<MeasurementSetting> {
    let bases = [Analyzer::x(), Analyzer::y(), Analyzer::z()];
    bases
        .iter()
        .flat_map(|&a| bases.iter().map(move |&b| MeasurementSetting::new(a, b)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tomography {
    pub state: TwoQubitDensityMatrix,
    /// Hermitian unit-trace linear-inversion estimate before projection.
    pub linear_estimate: DensityMatrix,
    /// `max(0, −λ_min)` of the linear-inversion estimate.
    pub negativity: f64,
    /// Total negative eigenvalue mass removed by the PSD projection.
    pub clipped_mass: f64,
    /// Euclidean norm of the least-squares residual.
    pub residual: f64,
}

fn pauli_basis() -> Vec<CMatrix> {
    let single = [CMatrix::identity(2, 2), pauli_x(), pauli_y(), pauli_z()];
    single
        .iter()
        .flat_map(|a| single.iter().map(move |b| a.kronecker(b)))
        .collect()
}

/// Linear inversion from observed frequencies, then PSD projection.
pub fn tomography_from_frequencies(settings: &[MeasurementSetting], frequencies: &[[f64; 4]]) -> Result<Tomography> {
    if settings.len() != frequencies.len() {
        return Err(Error::arg("one frequency row per setting is required"));
    }
    let basis = pauli_basis();
    let rows = 4 * settings.len();
    let mut a = DMatrix::<f64>::zeros(rows, 16);
    let mut f = nalgebra::DVector::<f64>::zeros(rows);
    for (s, (setting, freq)) in settings.iter().zip(frequencies).enumerate() {
        setting.validate()?;
        for (o, proj) in setting.projectors().iter().enumerate() {
            for (k, sigma) in basis.iter().enumerate() {
                a[(4 * s + o, k)] = 0.25 * (proj * sigma).trace().re;
            }
            f[4 * s + o] = freq[o];
        }
    }
    let svd = a.clone().svd(true, true);
    let largest = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&v| v > 1e-10 * largest).count();
    if rank < 16 {
        return Err(Error::arg(format!(
            "settings are not informationally complete (rank {rank} of 16)"
        )));
    }
    let r = svd
        .solve(&f, 1e-12 * largest)
        .map_err(|e| Error::arg(format!("least squares: {e}")))?;
    let residual = (&a * &r - &f).norm();
    let mut m = CMatrix::zeros(4, 4);
    for (k, sigma) in basis.iter().enumerate() {
        m += sigma * cr(0.25 * r[k]);
    }
    let estimate = DensityMatrix::from_raw(two_qubit_space(), m)?
        .hermitized()
        .renormalized()?;
    let negativity = (-estimate.min_eigenvalue()).max(0.0);
    let (projected, clipped_mass) = estimate.clip_psd()?;
    Ok(Tomography {
        state: TwoQubitDensityMatrix::new(projected.hermitized())?,
        linear_estimate: estimate,
        negativity,
        clipped_mass,
        residual,
    })
}

pub fn tomography_reconstruct(counts: &CountsTable) -> Result<Tomography> {
    tomography_from_frequencies(&counts.settings, &counts.frequencies()?)
}

/// One point of a decoherence curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub t: f64,
    pub concurrence: f64,
    /// `|⟨0|ρ_A|1⟩|` and `|⟨0|ρ_B|1⟩|`.
    pub local_coherence: [f64; 2],
    /// `|⟨01|ρ|10⟩|`, the single-excitation coherence.
    pub coherence_01_10: f64,
    /// `|⟨00|ρ|11⟩|`.
    pub coherence_00_11: f64,
    pub max_chsh: f64,
}

/// Applies `model` to both qubits for each time in `times` and records the
/// concurrence and coherences.
pub fn concurrence_decay_curve(
    initial: &TwoQubitDensityMatrix,
    model: &DecoherenceModel,
    times: &[f64],
) -> Result<Vec<DecayPoint>> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("time grid must be increasing"));
    }
    times
        .iter()
        .map(|&t| {
            let rho = model.apply(initial.as_density(), 0, t)?;
            let rho = TwoQubitDensityMatrix::new(model.apply(&rho, 1, t)?.hermitized())?;
            let local = [0, 1].map(|q| rho.reduced(q).map(|r| r.matrix()[(0, 1)].norm()).unwrap_or(0.0));
            Ok(DecayPoint {
                t,
                concurrence: concurrence(&rho)?,
                local_coherence: local,
                coherence_01_10: rho.matrix()[(1, 2)].norm(),
                coherence_00_11: rho.matrix()[(0, 3)].norm(),
                max_chsh: max_chsh(&rho),
            })
        })
        .collect()
}

/// Single-qubit pure state `cos θ |0⟩ + e^{iφ} sin θ |1⟩`.
pub fn qubit_state(theta: f64, phi: f64) -> StateVector {
    let space = HilbertSpace::single(2, SubsystemKind::Atom).expect("qubit");
    StateVector::from_slice(space, &[cr(theta.cos()), c(phi.cos(), phi.sin()) * theta.sin()]).expect("normalized")
}

#[cfg(test)]
mod tests;
