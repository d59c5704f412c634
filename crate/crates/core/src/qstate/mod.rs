//! Dense linear algebra over small tensor products of truncated bosonic
//! modes and finite-level atoms.
//!
//! Subsystems are ordered; index `0` is the most significant digit of the
//! flattened basis index, so `|i j⟩` of a `(d0, d1)` space sits at
//! `i * d1 + j`, matching the Kronecker product convention.

use std::cell::Cell;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub mod fock;
pub mod random;
mod wavepacket;

pub use wavepacket::Wavepacket;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const DEFAULT_DIMENSION_CAP: usize = 4096;
/// Default Fock cutoff: occupations `0..=2` per field or collective mode.
pub const DEFAULT_FOCK_CUTOFF: usize = 2;

pub const MIN_OUTCOME_PROBABILITY: f64 = 1e-15;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Numeric tolerances shared by every check in the crate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Algebraic identities: hermiticity, unitarity, trace.
    pub algebraic: f64,
    /// Physical normalizations: envelopes, POVM completeness.
    pub physical: f64,
    /// Most negative eigenvalue still treated as positive semidefinite.
    pub psd_clip: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            algebraic: 1e-10,
            physical: 1e-8,
            psd_clip: 1e-9,
        }
    }
}

thread_local! {
    static TOLERANCES: Cell<Tolerances> = Cell::new(Tolerances::default());
}

/// Tolerances in effect on the current thread.
pub fn tolerances() -> Tolerances {
    TOLERANCES.with(|t| t.get())
}

/// Run `f` with `tol` installed on the current thread, restoring the
/// previous setting afterwards.
pub fn with_tolerances<R>(tol: Tolerances, f: impl FnOnce() -> R) -> R {
    let previous = TOLERANCES.with(|t| t.replace(tol));
    struct Restore(Tolerances);
    impl Drop for Restore {
        fn drop(&mut self) {
            TOLERANCES.with(|t| t.set(self.0));
        }
    }
    let _guard = Restore(previous);
    f()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsystemKind {
    Atom,
    CollectiveSpin,
    Field,
}

#[derive(Clone, Debug)]
pub struct HilbertSpace {
    dims: Vec<usize>,
    kinds: Vec<SubsystemKind>,
    cap: usize,
}

impl PartialEq for HilbertSpace {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.kinds == other.kinds
    }
}

impl fmt::Display for HilbertSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .dims
            .iter()
            .zip(&self.kinds)
            .map(|(d, k)| format!("{k:?}({d})"))
            .collect();
        write!(f, "[{}]", parts.join(" ⊗ "))
    }
}

impl HilbertSpace {
    pub fn new(dims: Vec<usize>, kinds: Vec<SubsystemKind>) -> Result<Self> {
        Self::with_cap(dims, kinds, DEFAULT_DIMENSION_CAP)
    }

    pub fn with_cap(dims: Vec<usize>, kinds: Vec<SubsystemKind>, cap: usize) -> Result<Self> {
        if dims.len() != kinds.len() {
            return Err(Error::arg(format!(
                "{} dimensions but {} labels",
                dims.len(),
                kinds.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::arg("subsystem dimensions must be at least 1"));
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        if total > cap {
            return Err(Error::Capacity { requested: total, cap });
        }
        Ok(HilbertSpace { dims, kinds, cap })
    }

    pub fn single(dim: usize, kind: SubsystemKind) -> Result<Self> {
        Self::new(vec![dim], vec![kind])
    }

    pub fn qubits(n: usize) -> Result<Self> {
        Self::new(vec![2; n], vec![SubsystemKind::Atom; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn kinds(&self) -> &[SubsystemKind] {
        &self.kinds
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn concat(&self, other: &HilbertSpace) -> Result<Self> {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        let mut kinds = self.kinds.clone();
        kinds.extend_from_slice(&other.kinds);
        Self::with_cap(dims, kinds, self.cap.max(other.cap))
    }

    /// Space made of the listed subsystems, in the listed order.
    pub fn select(&self, which: &[usize]) -> Result<Self> {
        self.check_indices(which)?;
        Self::with_cap(
            which.iter().map(|&i| self.dims[i]).collect(),
            which.iter().map(|&i| self.kinds[i]).collect(),
            self.cap,
        )
    }

    pub fn with_kind(&self, index: usize, kind: SubsystemKind) -> Result<Self> {
        self.check_indices(&[index])?;
        let mut out = self.clone();
        out.kinds[index] = kind;
        Ok(out)
    }

    pub(crate) fn check_indices(&self, which: &[usize]) -> Result<()> {
        for (n, &i) in which.iter().enumerate() {
            if i >= self.dims.len() {
                return Err(Error::arg(format!(
                    "subsystem index {i} out of range for {} subsystems",
                    self.dims.len()
                )));
            }
            if which[..n].contains(&i) {
                return Err(Error::arg(format!("subsystem index {i} repeated")));
            }
        }
        Ok(())
    }

    /// Flattened index of a digit tuple.
    pub fn index_of(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&digit, &d)| acc * d + digit)
    }

    /// Digit tuple of a flattened index.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    /// For a split of the subsystems into `targets` (in the given order) and
    /// the rest (in original order), returns `table[rest][sub]` = flattened
    /// full index.
    fn split_table(&self, targets: &[usize]) -> Vec<Vec<usize>> {
        let rest: Vec<usize> = (0..self.len()).filter(|i| !targets.contains(i)).collect();
        let sub_dim: usize = targets.iter().map(|&i| self.dims[i]).product();
        let rest_dim: usize = rest.iter().map(|&i| self.dims[i]).product();
        let mut table = vec![vec![0usize; sub_dim]; rest_dim];
        let mut digits = vec![0usize; self.len()];
        for (r, row) in table.iter_mut().enumerate() {
            let mut rr = r;
            for &i in rest.iter().rev() {
                digits[i] = rr % self.dims[i];
                rr /= self.dims[i];
            }
            for (s, slot) in row.iter_mut().enumerate() {
                let mut ss = s;
                for &i in targets.iter().rev() {
                    digits[i] = ss % self.dims[i];
                    ss /= self.dims[i];
                }
                *slot = self.index_of(&digits);
            }
        }
        table
    }
}

/// Index map from `space` into the same space with subsystem `mode` enlarged
/// to `new_dim`.
fn padded_layout(space: &HilbertSpace, mode: usize, new_dim: usize) -> Result<(HilbertSpace, Vec<usize>)> {
    space.check_indices(&[mode])?;
    if new_dim < space.dims[mode] {
        return Err(Error::arg(format!(
            "cannot shrink subsystem {mode} from {} to {new_dim}",
            space.dims[mode]
        )));
    }
    let mut dims = space.dims.clone();
    dims[mode] = new_dim;
    let target = HilbertSpace::with_cap(dims, space.kinds.clone(), space.cap)?;
    let map = (0..space.total_dim())
        .map(|i| target.index_of(&space.digits(i)))
        .collect();
    Ok((target, map))
}

/// Full-space matrix of `op` acting on `targets` (in that order) and the
/// identity elsewhere.
pub fn embed_operator(space: &HilbertSpace, op: &CMatrix, targets: &[usize]) -> Result<CMatrix> {
    space.check_indices(targets)?;
    let sub_dim: usize = targets.iter().map(|&i| space.dims[i]).product();
    if op.nrows() != sub_dim || op.ncols() != sub_dim {
        return Err(Error::arg(format!(
            "operator is {}x{} but targets span dimension {sub_dim}",
            op.nrows(),
            op.ncols()
        )));
    }
    let n = space.total_dim();
    let mut full = CMatrix::zeros(n, n);
    for row in space.split_table(targets) {
        for (s1, &i) in row.iter().enumerate() {
            for (s2, &j) in row.iter().enumerate() {
                full[(i, j)] = op[(s1, s2)];
            }
        }
    }
    Ok(full)
}

/// Largest element modulus.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn is_unitary(u: &CMatrix, tol: f64) -> bool {
    u.is_square() && {
        let prod = u.adjoint() * u;
        max_abs(&(prod - CMatrix::identity(u.nrows(), u.ncols()))) <= tol
    }
}

pub fn hermiticity_error(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// Eigen-decomposition of a Hermitian matrix (symmetrized first).
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let h = (m + m.adjoint()) * cr(0.5);
    let eig = h.symmetric_eigen();
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

/// Applies `f` to the eigenvalues of a Hermitian matrix.
pub fn hermitian_function(m: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (vals, vecs) = hermitian_eigen(m);
    let n = vals.len();
    let mut scaled = vecs.clone();
    for (j, v) in vals.iter().enumerate() {
        let fv = cr(f(*v));
        for i in 0..n {
            scaled[(i, j)] *= fv;
        }
    }
    scaled * vecs.adjoint()
}

pub fn sqrt_psd(m: &CMatrix) -> CMatrix {
    hermitian_function(m, |v| v.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    space: HilbertSpace,
    amplitudes: CVector,
}

impl StateVector {
    pub fn new(space: HilbertSpace, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != space.total_dim() {
            return Err(Error::arg(format!(
                "{} amplitudes for a space of dimension {}",
                amplitudes.len(),
                space.total_dim()
            )));
        }
        Ok(StateVector { space, amplitudes })
    }

    /// Builds and normalizes.
    pub fn normalized(space: HilbertSpace, amplitudes: CVector) -> Result<Self> {
        let mut s = Self::new(space, amplitudes)?;
        s.normalize()?;
        Ok(s)
    }

    pub fn from_slice(space: HilbertSpace, amplitudes: &[C64]) -> Result<Self> {
        Self::new(space, CVector::from_column_slice(amplitudes))
    }

    pub fn basis(space: HilbertSpace, digits: &[usize]) -> Result<Self> {
        if digits.len() != space.len() || digits.iter().zip(space.dims()).any(|(d, n)| d >= n) {
            return Err(Error::arg(format!("basis label {digits:?} invalid for {space}")));
        }
        let mut amps = CVector::zeros(space.total_dim());
        amps[space.index_of(digits)] = cr(1.0);
        Self::new(space, amps)
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn amplitude(&self, digits: &[usize]) -> C64 {
        self.amplitudes[self.space.index_of(digits)]
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if n < MIN_OUTCOME_PROBABILITY {
            return Err(Error::StateValidity("cannot normalize a zero vector".into()));
        }
        self.amplitudes /= cr(n);
        Ok(())
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.space != other.space {
            return Err(Error::arg("inner product across different spaces"));
        }
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    pub fn tensor(&self, other: &StateVector) -> Result<StateVector> {
        let space = self.space.concat(&other.space)?;
        Ok(StateVector {
            space,
            amplitudes: self.amplitudes.kronecker(&other.amplitudes),
        })
    }

    /// Embeds the state in a space where subsystem `mode` holds `new_dim` levels.
    pub fn pad_mode(&self, mode: usize, new_dim: usize) -> Result<StateVector> {
        let (space, map) = padded_layout(&self.space, mode, new_dim)?;
        let mut amplitudes = CVector::zeros(space.total_dim());
        for (i, &j) in map.iter().enumerate() {
            amplitudes[j] = self.amplitudes[i];
        }
        Ok(StateVector { space, amplitudes })
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix {
            space: self.space.clone(),
            matrix: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }

    pub fn apply_unitary(&self, u: &CMatrix, targets: &[usize]) -> Result<StateVector> {
        if !is_unitary(u, tolerances().algebraic) {
            return Err(Error::arg("operator is not unitary"));
        }
        self.apply_operator(u, targets)
    }

    /// Applies an arbitrary (not necessarily unitary) operator; no renormalization.
    pub fn apply_operator(&self, op: &CMatrix, targets: &[usize]) -> Result<StateVector> {
        let full = embed_operator(&self.space, op, targets)?;
        Ok(StateVector {
            space: self.space.clone(),
            amplitudes: full * &self.amplitudes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    space: HilbertSpace,
    matrix: CMatrix,
}

/// Result of a sampled POVM measurement.
#[derive(Clone, Debug)]
pub struct PovmOutcome {
    pub outcome: usize,
    pub posterior: DensityMatrix,
    /// Exact Born probability of the sampled outcome.
    pub probability: f64,
    /// Exact Born probabilities of every outcome.
    pub probabilities: Vec<f64>,
}

/// One branch of a POVM: its Born probability and, if nonzero, the
/// normalized post-measurement state.
#[derive(Clone, Debug)]
pub struct PovmBranch {
    pub probability: f64,
    pub posterior: Option<DensityMatrix>,
}

impl DensityMatrix {
    /// Validated constructor: Hermitian, unit trace and PSD within tolerance.
    pub fn new(space: HilbertSpace, matrix: CMatrix) -> Result<Self> {
        let rho = Self::from_raw(space, matrix)?;
        rho.validate()?;
        Ok(rho)
    }

    /// Shape-checked constructor without physical validation.
    pub fn from_raw(space: HilbertSpace, matrix: CMatrix) -> Result<Self> {
        let n = space.total_dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::arg(format!(
                "matrix is {}x{} for a space of dimension {n}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(DensityMatrix { space, matrix })
    }

    pub fn basis(space: HilbertSpace, digits: &[usize]) -> Result<Self> {
        Ok(StateVector::basis(space, digits)?.to_density())
    }

    pub fn maximally_mixed(space: HilbertSpace) -> Self {
        let n = space.total_dim();
        DensityMatrix {
            space,
            matrix: CMatrix::identity(n, n) * cr(1.0 / n as f64),
        }
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn element(&self, row: &[usize], col: &[usize]) -> C64 {
        self.matrix[(self.space.index_of(row), self.space.index_of(col))]
    }

    pub fn population(&self, digits: &[usize]) -> f64 {
        self.element(digits, digits).re
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigen(&self.matrix).0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = tolerances();
        let herm = hermiticity_error(&self.matrix);
        if herm > tol.algebraic {
            return Err(Error::StateValidity(format!("not Hermitian (error {herm:e})")));
        }
        let tr = self.trace();
        if (tr - cr(1.0)).norm() > tol.algebraic {
            return Err(Error::StateValidity(format!("trace {tr} differs from 1")));
        }
        let min = self.min_eigenvalue();
        if min < -tol.psd_clip {
            return Err(Error::StateValidity(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn expectation(&self, op: &CMatrix) -> C64 {
        (&self.matrix * op).trace()
    }

    /// Expectation of an operator acting on `targets`.
    pub fn expectation_on(&self, op: &CMatrix, targets: &[usize]) -> Result<C64> {
        Ok(self.expectation(&embed_operator(&self.space, op, targets)?))
    }

    pub fn tensor(&self, other: &DensityMatrix) -> Result<DensityMatrix> {
        let space = self.space.concat(&other.space)?;
        Ok(DensityMatrix {
            space,
            matrix: self.matrix.kronecker(&other.matrix),
        })
    }

    /// Reduced state on `keep`; kept subsystems retain their original order.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        if keep.is_empty() {
            return Err(Error::arg("partial trace must keep at least one subsystem"));
        }
        self.space.check_indices(keep)?;
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        let traced: Vec<usize> = (0..self.space.len()).filter(|i| !keep.contains(i)).collect();
        // table[kept][traced] is the split with `traced` as the "rest"
        let table = self.space.split_table(&traced);
        let kept_space = self.space.select(&keep)?;
        let n = kept_space.total_dim();
        let mut out = CMatrix::zeros(n, n);
        for (a, row_a) in table.iter().enumerate() {
            for (b, row_b) in table.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for (&i, &j) in row_a.iter().zip(row_b) {
                    acc += self.matrix[(i, j)];
                }
                out[(a, b)] = acc;
            }
        }
        Ok(DensityMatrix {
            space: kept_space,
            matrix: out,
        })
    }

    /// Traces out a single subsystem.
    pub fn trace_out(&self, index: usize) -> Result<DensityMatrix> {
        let keep: Vec<usize> = (0..self.space.len()).filter(|&i| i != index).collect();
        self.space.check_indices(&[index])?;
        self.partial_trace(&keep)
    }

    /// Reorders subsystems so that new subsystem `k` is old subsystem `order[k]`.
    pub fn permute(&self, order: &[usize]) -> Result<DensityMatrix> {
        if order.len() != self.space.len() {
            return Err(Error::arg("permutation must list every subsystem"));
        }
        self.space.check_indices(order)?;
        let new_space = self.space.select(order)?;
        let n = self.dim();
        let map: Vec<usize> = (0..n)
            .map(|new_idx| {
                let new_digits = new_space.digits(new_idx);
                let mut old = vec![0; order.len()];
                for (k, &o) in order.iter().enumerate() {
                    old[o] = new_digits[k];
                }
                self.space.index_of(&old)
            })
            .collect();
        let matrix = CMatrix::from_fn(n, n, |i, j| self.matrix[(map[i], map[j])]);
        Ok(DensityMatrix {
            space: new_space,
            matrix,
        })
    }

    pub fn apply_unitary(&self, u: &CMatrix, targets: &[usize]) -> Result<DensityMatrix> {
        if !is_unitary(u, tolerances().algebraic) {
            return Err(Error::arg("operator is not unitary"));
        }
        let full = embed_operator(&self.space, u, targets)?;
        Ok(self.conjugate_full(&full))
    }

    /// `op ρ op†` for a full-space operator, no renormalization.
    pub fn conjugate_full(&self, op: &CMatrix) -> DensityMatrix {
        DensityMatrix {
            space: self.space.clone(),
            matrix: op * &self.matrix * op.adjoint(),
        }
    }

    /// Applies the channel `ρ → Σ K ρ K†` with Kraus operators acting on `targets`.
    pub fn apply_kraus(&self, kraus: &[CMatrix], targets: &[usize]) -> Result<DensityMatrix> {
        let n = self.dim();
        let mut out = CMatrix::zeros(n, n);
        for k in kraus {
            let full = embed_operator(&self.space, k, targets)?;
            out += &full * &self.matrix * full.adjoint();
        }
        Ok(DensityMatrix {
            space: self.space.clone(),
            matrix: out,
        })
    }

    /// Multiplies every element `ρ[i,j]` by `factor(n_i, n_j)`, where `n` is
    /// the occupation of subsystem `mode` in the row/column basis state.
    pub fn scale_coherences(&self, mode: usize, factor: impl Fn(usize, usize) -> f64) -> Result<DensityMatrix> {
        self.space.check_indices(&[mode])?;
        let n = self.dim();
        let occ: Vec<usize> = (0..n).map(|i| self.space.digits(i)[mode]).collect();
        let matrix = CMatrix::from_fn(n, n, |i, j| self.matrix[(i, j)] * factor(occ[i], occ[j]));
        Ok(DensityMatrix {
            space: self.space.clone(),
            matrix,
        })
    }

    /// Embeds the state in a space where subsystem `mode` holds `new_dim` levels.
    pub fn pad_mode(&self, mode: usize, new_dim: usize) -> Result<DensityMatrix> {
        let (space, map) = padded_layout(&self.space, mode, new_dim)?;
        let n = space.total_dim();
        let mut matrix = CMatrix::zeros(n, n);
        for (i, &a) in map.iter().enumerate() {
            for (j, &b) in map.iter().enumerate() {
                matrix[(a, b)] = self.matrix[(i, j)];
            }
        }
        Ok(DensityMatrix { space, matrix })
    }

    /// Changes the role tag of one subsystem (e.g. a collective spin whose
    /// excitation has been mapped into a field mode).
    pub fn relabel(&self, index: usize, kind: SubsystemKind) -> Result<DensityMatrix> {
        Ok(DensityMatrix {
            space: self.space.with_kind(index, kind)?,
            matrix: self.matrix.clone(),
        })
    }

    /// Divides by the trace.
    pub fn renormalized(&self) -> Result<DensityMatrix> {
        let tr = self.trace().re;
        if tr < MIN_OUTCOME_PROBABILITY {
            return Err(Error::DegenerateMeasurement {
                threshold: MIN_OUTCOME_PROBABILITY,
            });
        }
        Ok(DensityMatrix {
            space: self.space.clone(),
            matrix: &self.matrix / cr(tr),
        })
    }

    /// Restores exact Hermiticity by averaging with the adjoint.
    pub fn hermitized(&self) -> DensityMatrix {
        DensityMatrix {
            space: self.space.clone(),
            matrix: (&self.matrix + self.matrix.adjoint()) * cr(0.5),
        }
    }

    /// Projects onto the PSD cone by clipping negative eigenvalues to zero and
    /// renormalizing. Returns the state and the clipped (negative) mass.
    /// Never applied implicitly.
    pub fn clip_psd(&self) -> Result<(DensityMatrix, f64)> {
        let (vals, vecs) = hermitian_eigen(&self.matrix);
        let clipped: f64 = vals.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        let n = vals.len();
        let mut scaled = vecs.clone();
        for (j, v) in vals.iter().enumerate() {
            for i in 0..n {
                scaled[(i, j)] *= cr(v.max(0.0));
            }
        }
        let m = scaled * vecs.adjoint();
        let rho = DensityMatrix {
            space: self.space.clone(),
            matrix: m,
        }
        .renormalized()?;
        Ok((rho, clipped))
    }

    /// Exact outcome probabilities and posteriors for a POVM given by
    /// full-space effects. Effects must sum to the identity.
    pub fn povm_branches(&self, effects: &[CMatrix]) -> Result<Vec<PovmBranch>> {
        let n = self.dim();
        if effects.is_empty() {
            return Err(Error::arg("POVM has no effects"));
        }
        let mut sum = CMatrix::zeros(n, n);
        for e in effects {
            if e.nrows() != n || e.ncols() != n {
                return Err(Error::arg("POVM effect has the wrong dimension"));
            }
            sum += e;
        }
        let completeness = max_abs(&(sum - CMatrix::identity(n, n)));
        if completeness > tolerances().physical {
            return Err(Error::arg(format!(
                "POVM effects do not sum to identity (error {completeness:e})"
            )));
        }
        effects
            .iter()
            .map(|e| {
                let p = self.expectation(e).re.max(0.0);
                let posterior = if p >= MIN_OUTCOME_PROBABILITY {
                    let root = sqrt_psd(e);
                    let m = &root * &self.matrix * &root / cr(p);
                    Some(
                        DensityMatrix {
                            space: self.space.clone(),
                            matrix: m,
                        }
                        .hermitized(),
                    )
                } else {
                    None
                };
                Ok(PovmBranch {
                    probability: p,
                    posterior,
                })
            })
            .collect()
    }

    /// Samples a POVM outcome with Born probabilities.
    pub fn measure_povm(&self, effects: &[CMatrix], rng: &mut RngStream) -> Result<PovmOutcome> {
        let branches = self.povm_branches(effects)?;
        let probabilities: Vec<f64> = branches.iter().map(|b| b.probability).collect();
        if probabilities.iter().all(|p| *p < MIN_OUTCOME_PROBABILITY) {
            return Err(Error::DegenerateMeasurement {
                threshold: MIN_OUTCOME_PROBABILITY,
            });
        }
        let weights: Vec<f64> = probabilities
            .iter()
            .map(|&p| if p >= MIN_OUTCOME_PROBABILITY { p } else { 0.0 })
            .collect();
        let outcome = rng.categorical(&weights).ok_or(Error::DegenerateMeasurement {
            threshold: MIN_OUTCOME_PROBABILITY,
        })?;
        let branch = &branches[outcome];
        Ok(PovmOutcome {
            outcome,
            posterior: branch.posterior.clone().expect("sampled branch has weight"),
            probability: branch.probability,
            probabilities,
        })
    }

    /// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`.
    pub fn fidelity(&self, other: &DensityMatrix) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::arg(format!(
                "fidelity between {} and {}",
                self.space, other.space
            )));
        }
        let root = sqrt_psd(&self.matrix);
        let inner = &root * &other.matrix * &root;
        let (vals, _) = hermitian_eigen(&inner);
        let s: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
        Ok((s * s).clamp(0.0, 1.0))
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn fidelity_pure(&self, psi: &StateVector) -> Result<f64> {
        if self.space != *psi.space() {
            return Err(Error::arg("fidelity against a state in a different space"));
        }
        let v = psi.amplitudes();
        Ok((v.adjoint() * &self.matrix * v)[(0, 0)].re.clamp(0.0, 1.0))
    }
}

/// Free-function forms of the core operations.
pub fn tensor_product(a: &DensityMatrix, b: &DensityMatrix) -> Result<DensityMatrix> {
    a.tensor(b)
}

pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    rho.partial_trace(keep)
}

pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    rho.fidelity(sigma)
}

pub fn measure_povm(rho: &DensityMatrix, effects: &[CMatrix], rng: &mut RngStream) -> Result<PovmOutcome> {
    rho.measure_povm(effects, rng)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(1.0), cr(0.0)])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), c(0.0, -1.0), c(0.0, 1.0), cr(0.0)])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(1.0), cr(0.0), cr(0.0), cr(-1.0)])
}
