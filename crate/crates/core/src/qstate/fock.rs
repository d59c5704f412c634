//! Truncated bosonic-mode operators.

#[cfg(test)]
use super::max_abs;
use super::{cr, CMatrix, C64};

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Annihilation operator on occupations `0..dim`.
pub fn annihilation(dim: usize) -> CMatrix {
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = cr((n as f64).sqrt());
    }
    a
}

pub fn number(dim: usize) -> CMatrix {
    CMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |n, _| cr(n as f64)))
}

/// `|n⟩ → e^{i φ n} |n⟩`
pub fn phase_shift(dim: usize, phi: f64) -> CMatrix {
    CMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |n, _| {
        C64::from_polar(1.0, phi * n as f64)
    }))
}

/// Projector onto occupation `n`.
pub fn projector(dim: usize, n: usize) -> CMatrix {
    let mut p = CMatrix::zeros(dim, dim);
    p[(n, n)] = cr(1.0);
    p
}

/// Kraus operators of the pure-loss channel with transmissivity `t`
/// (a beamsplitter to a vacuum environment, environment traced out).
/// `K_k |n⟩ = √(C(n,k) t^{n-k} (1-t)^k) |n-k⟩` for `k` lost quanta.
pub fn loss_kraus(dim: usize, t: f64) -> Vec<CMatrix> {
    let t = t.clamp(0.0, 1.0);
    (0..dim)
        .map(|k| {
            let mut m = CMatrix::zeros(dim, dim);
            for n in k..dim {
                let w = binomial(n, k) * t.powi((n - k) as i32) * (1.0 - t).powi(k as i32);
                m[(n - k, n)] = cr(w.sqrt());
            }
            m
        })
        .collect()
}

/// Two-mode beamsplitter on a pair of modes truncated at `dim - 1` quanta each.
///
/// In the Heisenberg picture the creation operators transform as
/// `a† → cos θ a† + e^{iφ} sin θ b†`, `b† → -e^{-iφ} sin θ a† + cos θ b†`,
/// so `|1,0⟩ → cos θ |1,0⟩ + e^{iφ} sin θ |0,1⟩`. Basis index of `|n,m⟩` is
/// `n * dim + m`. Components pushed above the cutoff are dropped; the
/// returned matrix is unitary on the subspace with at most `dim - 1` total
/// quanta and contractive elsewhere.
pub fn beamsplitter(dim: usize, theta: f64, phi: f64) -> CMatrix {
    let (ct, st) = (theta.cos(), theta.sin());
    let ea = C64::from_polar(st, phi);
    let eb = C64::from_polar(-st, -phi);
    let mut u = CMatrix::zeros(dim * dim, dim * dim);
    for n in 0..dim {
        for m in 0..dim {
            // (c a† + ea b†)^n (eb a† + c b†)^m |0,0⟩ / √(n! m!)
            let norm = 1.0 / (factorial(n) * factorial(m)).sqrt();
            for j in 0..=n {
                // j of the a†'s from the first factor go to output a
                let w1 = cr(binomial(n, j)) * cr(ct).powu(j as u32) * ea.powu((n - j) as u32);
                for k in 0..=m {
                    // k of the b†'s from the second factor go to output a
                    let w2 = cr(binomial(m, k)) * eb.powu(k as u32) * cr(ct).powu((m - k) as u32);
                    let out_a = j + k;
                    let out_b = (n - j) + (m - k);
                    if out_a >= dim || out_b >= dim {
                        continue;
                    }
                    let amp = w1 * w2 * cr(norm * (factorial(out_a) * factorial(out_b)).sqrt());
                    u[(out_a * dim + out_b, n * dim + m)] += amp;
                }
            }
        }
    }
    u
}
