use super::*;
use crate::qstate::random;
use proptest::prelude::*;

fn qubit_space() -> HilbertSpace {
    HilbertSpace::single(2, SubsystemKind::Atom).unwrap()
}

#[test]
fn bell_states_have_unit_concurrence() {
    for b in [
        BellState::PhiPlus,
        BellState::PhiMinus,
        BellState::PsiPlus,
        BellState::PsiMinus,
    ] {
        assert!((concurrence(&b.density()).unwrap() - 1.0).abs() < 1e-9, "{b:?}");
    }
}

#[test]
fn product_states_have_zero_concurrence() {
    let a = qubit_state(0.3, 1.1).to_density();
    let b = qubit_state(1.2, -0.4).to_density();
    let rho = TwoQubitDensityMatrix::product(&a, &b).unwrap();
    assert!(concurrence(&rho).unwrap() < 1e-9);
    assert!(concurrence(&TwoQubitDensityMatrix::maximally_mixed()).unwrap() < 1e-9);
}

#[test]
fn werner_state_concurrence_is_linear_above_one_third() {
    // ρ = w|Ψ-⟩⟨Ψ-| + (1-w) I/4 has C = max(0, (3w - 1)/2)
    for w in [0.0, 0.2, 1.0 / 3.0, 0.5, 0.8, 1.0] {
        let m = BellState::PsiMinus.density().matrix() * cr(w) + CMatrix::identity(4, 4) * cr((1.0 - w) / 4.0);
        let rho = TwoQubitDensityMatrix::from_matrix(m).unwrap();
        let oracle = ((3.0 * w - 1.0) / 2.0).max(0.0);
        assert!((concurrence(&rho).unwrap() - oracle).abs() < 1e-9, "w = {w}");
    }
}

#[test]
fn pure_state_concurrence_agrees_with_wootters() {
    let mut rng = RngStream::new(5);
    for _ in 0..20 {
        let psi = random::pure_state(two_qubit_space(), &mut rng);
        let rho = TwoQubitDensityMatrix::from_pure(&psi).unwrap();
        let pure = pure_concurrence(psi.amplitudes());
        assert!((concurrence(&rho).unwrap() - pure).abs() < 1e-8);
        // 2|ad - bc| for a pure state
        let a = psi.amplitudes();
        let det = 2.0 * (a[0] * a[3] - a[1] * a[2]).norm();
        assert!((pure - det).abs() < 1e-12);
    }
}

#[test]
fn non_psd_input_is_rejected() {
    let mut m = BellState::PsiPlus.density().matrix().clone();
    m[(0, 3)] = cr(0.2);
    m[(3, 0)] = cr(0.2);
    assert!(matches!(
        TwoQubitDensityMatrix::from_matrix(m),
        Err(Error::StateValidity(_))
    ));
    let big = DensityMatrix::maximally_mixed(HilbertSpace::qubits(3).unwrap());
    assert!(matches!(TwoQubitDensityMatrix::new(big), Err(Error::Argument(_))));
}

#[test]
fn canonical_angles_reach_tsirelson_on_phi_plus() {
    let s = chsh_value(&BellState::PhiPlus.density(), &canonical_chsh_settings());
    // E(a, b) = cos 2(a - b) for Φ+, four terms of magnitude 1/√2
    let oracle: f64 = {
        let [a, a2, b, b2] = CANONICAL_CHSH_ANGLES;
        let e = |x: f64, y: f64| (2.0 * (x - y)).cos();
        (e(a, b) - e(a, b2) + e(a2, b) + e(a2, b2)).abs()
    };
    assert!((s - 2.0 * 2f64.sqrt()).abs() < 1e-9);
    assert!((s - oracle).abs() < 1e-12);
    assert!((max_chsh(&BellState::PhiPlus.density()) - 2.0 * 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn maximally_mixed_state_has_no_correlations() {
    let rho = TwoQubitDensityMatrix::maximally_mixed();
    let mut rng = RngStream::new(2);
    for _ in 0..50 {
        let mut angle = || Analyzer {
            angle: rng.uniform() * 3.2,
            phase: rng.uniform() * 6.3,
        };
        let settings = chsh_settings(angle(), angle(), angle(), angle());
        assert!(chsh_value(&rho, &settings).abs() < 1e-12);
    }
    assert!(max_chsh(&rho) < 1e-12);
}

#[test]
fn analyzer_projectors_match_their_eigenvector() {
    let an = Analyzer { angle: 0.4, phase: 0.9 };
    let psi = qubit_state(0.4, 0.9);
    let [plus, minus] = an.projectors();
    let v = psi.amplitudes();
    assert!(((v.adjoint() * &plus * v)[(0, 0)].re - 1.0).abs() < 1e-12);
    assert!((v.adjoint() * &minus * v)[(0, 0)].norm() < 1e-12);
}

#[test]
fn restriction_drops_higher_occupations() {
    let space = HilbertSpace::new(
        vec![3, 3],
        vec![SubsystemKind::CollectiveSpin, SubsystemKind::CollectiveSpin],
    )
    .unwrap();
    let amps = [0.0, 0.6, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, (1.0f64 - 0.72).sqrt()];
    let psi = StateVector::from_slice(space, &amps.map(cr)).unwrap();
    let (q, weight) = restrict_to_qubits(&psi.to_density(), 0, 1).unwrap();
    assert!((weight - 0.72).abs() < 1e-12);
    assert!(
        q.as_density()
            .fidelity_pure(&BellState::PsiPlus.state_vector())
            .unwrap()
            > 1.0 - 1e-12
    );
    let (swapped, _) = restrict_to_qubits(&psi.to_density(), 1, 0).unwrap();
    assert!((concurrence(&swapped).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn counts_table_checks_its_sums() {
    let mut table = CountsTable {
        settings: pauli_settings()[..1].to_vec(),
        counts: vec![[1, 2, 3, 4]],
        shots: vec![10],
    };
    assert!(table.validate().is_ok());
    table.shots[0] = 11;
    assert!(table.validate().is_err());
}

#[test]
fn aligned_setting_puts_every_count_in_one_bin() {
    let rho = TwoQubitDensityMatrix::product(
        &qubit_state(0.0, 0.0).to_density(),
        &qubit_state(std::f64::consts::FRAC_PI_2, 0.0).to_density(),
    )
    .unwrap();
    let setting = MeasurementSetting::new(Analyzer::z(), Analyzer::z());
    let t = simulate_counts(&rho, &[setting], 1000, &mut RngStream::new(1)).unwrap();
    assert_eq!(t.counts[0], [0, 1000, 0, 0]);
}

#[test]
fn identical_streams_give_identical_tables() {
    let rho = BellState::PsiPlus.density();
    let a = simulate_counts(&rho, &pauli_settings(), 500, &mut RngStream::new(9)).unwrap();
    let b = simulate_counts(&rho, &pauli_settings(), 500, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rank_deficient_settings_are_rejected() {
    let settings = vec![MeasurementSetting::new(Analyzer::z(), Analyzer::z()); 9];
    let freqs = vec![[0.25; 4]; 9];
    assert!(matches!(
        tomography_from_frequencies(&settings, &freqs),
        Err(Error::Argument(_))
    ));
}

#[test]
fn decay_curve_starts_at_the_initial_concurrence_and_vanishes() {
    let rho = BellState::PsiPlus.density();
    let model = DecoherenceModel::damping_only(1.0);
    let curve = concurrence_decay_curve(&rho, &model, &[0.0, 1.0, 1e3]).unwrap();
    assert!((curve[0].concurrence - 1.0).abs() < 1e-12);
    assert!(curve[2].concurrence < 1e-9);
    assert!(concurrence_decay_curve(&rho, &model, &[1.0, 1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn concurrence_is_local_unitary_invariant(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let rho = TwoQubitDensityMatrix::new(random::density_matrix(two_qubit_space(), &mut rng)).unwrap();
        let pure = TwoQubitDensityMatrix::from_pure(&random::pure_state(two_qubit_space(), &mut rng)).unwrap();
        let u = random::unitary(2, &mut rng);
        let v = random::unitary(2, &mut rng);
        for state in [rho, pure] {
            let moved = state.local_unitary(&u, &v).unwrap();
            prop_assert!((concurrence(&state).unwrap() - concurrence(&moved).unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn product_states_obey_the_classical_bound(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let a = random::density_matrix(qubit_space(), &mut rng);
        let b = random::density_matrix(qubit_space(), &mut rng);
        let rho = TwoQubitDensityMatrix::product(&a, &b).unwrap();
        let mut angle = || Analyzer { angle: rng.uniform() * 3.2, phase: rng.uniform() * 6.3 };
        let settings = chsh_settings(angle(), angle(), angle(), angle());
        prop_assert!(chsh_value(&rho, &settings) <= 2.0 + 1e-9);
    }
}
