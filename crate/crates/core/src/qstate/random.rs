//! Haar-style random states and unitaries for property checks and sweeps.

use crate::rng::RngStream;

use super::{c, cr, CMatrix, CVector, DensityMatrix, HilbertSpace, StateVector};

fn ginibre(rows: usize, cols: usize, rng: &mut RngStream) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| c(rng.normal(1.0), rng.normal(1.0)))
}

/// Haar-random pure state.
pub fn pure_state(space: HilbertSpace, rng: &mut RngStream) -> StateVector {
    let n = space.total_dim();
    let v = CVector::from_fn(n, |_, _| c(rng.normal(1.0), rng.normal(1.0)));
    StateVector::normalized(space, v).expect("nonzero gaussian vector")
}

/// Full-rank random density matrix (Hilbert-Schmidt measure).
pub fn density_matrix(space: HilbertSpace, rng: &mut RngStream) -> DensityMatrix {
    let n = space.total_dim();
    let g = ginibre(n, n, rng);
    let m = &g * g.adjoint();
    let tr = m.trace().re;
    DensityMatrix::from_raw(space, m / cr(tr))
        .expect("shape matches")
        .hermitized()
}

/// Haar-random unitary via QR with the phase correction of the R diagonal.
pub fn unitary(n: usize, rng: &mut RngStream) -> CMatrix {
    let g = ginibre(n, n, rng);
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / cr(d.norm()) } else { cr(1.0) };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}
