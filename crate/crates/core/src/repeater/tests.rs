use super::*;
use crate::channel::{Click, Detector, HeraldModel, OpticalLink};
use crate::ensemble::{DecoherenceModel, EnsembleParams};
use crate::error::Error;
use crate::qstate::{c, cr, fock, max_abs, CMatrix, DensityMatrix, HilbertSpace, StateVector, SubsystemKind};
use crate::rng::RngStream;
use crate::verify::{concurrence, restrict_to_qubits};

fn spins(dims: [usize; 2]) -> HilbertSpace {
    HilbertSpace::new(dims.to_vec(), vec![SubsystemKind::CollectiveSpin; 2]).unwrap()
}

/// `(|01⟩ + e^{iθ}|10⟩)/√2` on two modes of dimension `d`.
fn psi(d: usize, theta: f64) -> DensityMatrix {
    let space = spins([d, d]);
    let mut amps = nalgebra::DVector::from_element(d * d, cr(0.0));
    amps[1] = cr(std::f64::consts::FRAC_1_SQRT_2);
    amps[d] = crate::qstate::C64::from_polar(std::f64::consts::FRAC_1_SQRT_2, theta);
    StateVector::new(space, amps).unwrap().to_density()
}

fn stub_link(
    id: &str,
    ends: (&str, &str),
    p: f64,
    latency: f64,
    state: DensityMatrix,
    model: Option<DecoherenceModel>,
) -> HeraldLink {
    let probabilities = [1.0 - p, p, 0.0, 0.0];
    HeraldLink {
        id: id.into(),
        endpoints: (Endpoint::parse(ends.0).unwrap(), Endpoint::parse(ends.1).unwrap()),
        model: HeraldModel::from_parts(probabilities, [Some(state), None], 0.0).unwrap(),
        latency,
        decoherence: [model, model],
    }
}

fn config(seed: u64) -> ProtocolConfig {
    ProtocolConfig::new(Scenario::HeraldOneLink, seed)
}

fn small_params(p: f64) -> EnsembleParams {
    EnsembleParams {
        p_excite: p,
        memory_lifetime: 1.0,
        ..Default::default()
    }
}

#[test]
fn topology_validation() {
    let good = NetworkTopology::single_link(
        small_params(0.01),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    good.validate().unwrap();

    let mut dup = good.clone();
    dup.nodes[1].id = "a".into();
    assert!(matches!(dup.validate(), Err(Error::Config(_))));

    let mut missing = good.clone();
    missing.links[0].endpoints.0 = "nowhere".into();
    assert!(matches!(missing.validate(), Err(Error::Config(_))));

    let mut suffix = good.clone();
    suffix.links[0].endpoints.0 = "a.u".into();
    assert!(matches!(suffix.validate(), Err(Error::Config(_))));

    let mut one_arm = good.clone();
    one_arm.links.pop();
    assert!(matches!(one_arm.validate(), Err(Error::Config(_))));

    let mut reused = good.clone();
    reused.links[1].endpoints.0 = "a".into();
    assert!(reused.validate().is_err());

    let pair = NetworkTopology::node_pair(
        small_params(0.01),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    pair.validate().unwrap();
    let mut bare = pair.clone();
    bare.links[0].endpoints.0 = "L".into();
    assert!(bare.validate().is_err());

    NetworkTopology::chain(
        3,
        small_params(0.01),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    )
    .validate()
    .unwrap();
}

#[test]
fn topology_serde_is_strict_and_round_trips() {
    let t = NetworkTopology::node_pair(
        small_params(0.02),
        OpticalLink::default(),
        (Detector::ideal(), Detector::ideal()),
    );
    let json = serde_json::to_string(&t).unwrap();
    let back: NetworkTopology = serde_json::from_str(&json).unwrap();
    assert_eq!(back, t);
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    let typo = json.replacen("\"links\"", "\"linkz\"", 1);
    assert!(serde_json::from_str::<NetworkTopology>(&typo).is_err());
}

#[test]
fn event_queue_orders_by_time_node_kind_then_insertion() {
    let mut q = EventQueue::new();
    q.push(2.0, "b", EventKind::Herald, 0);
    q.push(1.0, "z", EventKind::Expired, 1);
    q.push(2.0, "a", EventKind::Expired, 2);
    q.push(2.0, "a", EventKind::Herald, 3);
    q.push(2.0, "a", EventKind::Herald, 4);
    let order: Vec<i32> = std::iter::from_fn(|| q.pop().map(|e| e.3)).collect();
    assert_eq!(order, vec![1, 3, 4, 2, 0]);

    let ev = |t: f64, node: &str, kind, d: &str| Event {
        repetition: 0,
        time: t,
        node: node.into(),
        kind,
        detail: d.into(),
    };
    let mut log = vec![
        ev(1.0, "b", EventKind::Herald, "x"),
        ev(1.0, "a", EventKind::Ready, "first"),
        ev(0.5, "c", EventKind::Herald, "y"),
        ev(1.0, "a", EventKind::Ready, "second"),
    ];
    sort_events(&mut log);
    let details: Vec<&str> = log.iter().map(|e| e.detail.as_str()).collect();
    assert_eq!(details, vec!["y", "first", "second", "x"]);
}

#[test]
fn certain_herald_takes_one_trial() {
    let link = stub_link("s", ("a", "b"), 1.0, 0.25, psi(3, 0.0), None);
    let mut nodes = MemoryBank::new();
    let cfg = config(1);
    let out = attempt_until_heralded(&link, &mut nodes, &cfg, 0.0, &RngStream::new(9), None).unwrap();
    assert_eq!(out.n_trials, 1);
    assert_eq!(out.outcome.which_detector, Click::D1);
    assert!((out.elapsed - (cfg.attempt_period + 0.25)).abs() < 1e-15);
}

#[test]
fn impossible_herald_times_out_after_exactly_max_trials() {
    let link = stub_link("s", ("a", "b"), 0.0, 0.0, psi(3, 0.0), None);
    let mut cfg = config(1);
    cfg.max_trials = 10;
    cfg.record_trials = true;
    let mut log = RunLog::new(0, true);
    let err = attempt_until_heralded(
        &link,
        &mut MemoryBank::new(),
        &cfg,
        0.0,
        &RngStream::new(3),
        Some(&mut log),
    )
    .unwrap_err();
    assert_eq!(err, Error::Timeout { trials: 10 });
    assert_eq!(log.trials.len(), 10);
    assert_eq!(log.trials_on("s"), 10);
    assert!(log.trials.windows(2).all(|w| w[0].time < w[1].time));
    assert_eq!(log.trials.last().unwrap().cumulative_trials, 10);
}

#[test]
fn heralded_memories_hold_their_reduced_states() {
    let topo = NetworkTopology::single_link(
        small_params(0.05),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    let station = &topo.stations().unwrap()[0];
    let link = HeraldLink::from_station(&topo, station).unwrap();
    let mut nodes = memory_bank(&topo).unwrap();
    let cfg = config(4);
    let out = attempt_until_heralded(&link, &mut nodes, &cfg, 0.0, &RngStream::new(4), None).unwrap();
    let state = out.outcome.conditional_state.unwrap();
    for (i, e) in [&link.endpoints.0, &link.endpoints.1].into_iter().enumerate() {
        let node = &nodes[e];
        assert_eq!(node.status(), crate::ensemble::NodeStatus::Storing);
        assert!(max_abs(&(node.spin_state().matrix() - state.partial_trace(&[i]).unwrap().matrix())) < 1e-15);
    }
    // busy memories refuse a new attempt
    let again = attempt_until_heralded(&link, &mut nodes, &cfg, 1.0, &RngStream::new(4), None);
    assert!(matches!(again, Err(Error::ProtocolState(_))));
}

#[test]
fn herald_trial_streams_depend_only_on_trial_index() {
    let topo = NetworkTopology::single_link(
        small_params(0.05),
        OpticalLink::with_transmissivity(0.5).unwrap(),
        (Detector::ideal(), Detector::ideal()),
    );
    let link = HeraldLink::from_station(&topo, &topo.stations().unwrap()[0]).unwrap();
    let rng = RngStream::new(77);
    let cfg = config(0);
    let a = attempt_until_heralded(&link, &mut memory_bank(&topo).unwrap(), &cfg, 0.0, &rng, None).unwrap();
    let b = attempt_until_heralded(&link, &mut MemoryBank::new(), &cfg, 0.0, &rng, None).unwrap();
    assert_eq!(a.n_trials, b.n_trials);
    assert_eq!(a.outcome.which_detector, b.outcome.which_detector);
}

#[test]
fn stored_pair_budget() {
    let pair = StoredPair {
        link: "x".into(),
        state: psi(3, 0.0),
        heralded_at: 1.0,
        click: Click::D1,
        n_trials: 3,
        decoherence: [None, None],
    };
    pair.check_budget(1.5, Some(0.5)).unwrap();
    assert!(matches!(
        pair.check_budget(1.6, Some(0.5)),
        Err(Error::MemoryExpired { .. })
    ));
    pair.check_budget(100.0, None).unwrap();
    assert!(pair.state_at(0.5).is_err());
}

#[test]
fn simultaneous_heralds_without_decay_give_the_product_state() {
    let (u, l) = (psi(3, 0.3), psi(3, -1.1));
    let upper = stub_link("su", ("L.u", "R.u"), 1.0, 0.0, u.clone(), None);
    let lower = stub_link("sl", ("L.l", "R.l"), 1.0, 0.0, l.clone(), None);
    let mut log = RunLog::new(0, false);
    let q = prepare_node_qubit(
        &upper,
        &lower,
        &mut MemoryBank::new(),
        &config(2),
        0.0,
        &RngStream::new(2),
        &mut log,
    )
    .unwrap();
    let expected = u.tensor(&l).unwrap();
    assert_eq!(q.joint.matrix(), expected.matrix());
    assert_eq!(q.prepared.trials, vec![1, 1]);
}

/// Amplitude damping on one mode written out directly:
/// `ρ'_{nm} = Σ_k √(C(n+k,k) C(m+k,k)) s^{(n+m)/2} (1−s)^k ρ_{n+k,m+k}`.
fn damp_by_hand(rho: &DensityMatrix, mode: usize, s: f64) -> DensityMatrix {
    let space = rho.space().clone();
    let dims = space.dims().to_vec();
    let n = space.total_dim();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (ri, rj) = (space.digits(i), space.digits(j));
            let mut acc = cr(0.0);
            for k in 0..dims[mode] {
                let (a, b) = (ri[mode] + k, rj[mode] + k);
                if a >= dims[mode] || b >= dims[mode] {
                    break;
                }
                let mut si = ri.clone();
                let mut sj = rj.clone();
                si[mode] = a;
                sj[mode] = b;
                let w = (fock::binomial(a, k) * fock::binomial(b, k)).sqrt()
                    * s.powf((ri[mode] + rj[mode]) as f64 / 2.0)
                    * (1.0 - s).powi(k as i32);
                acc += rho.matrix()[(space.index_of(&si), space.index_of(&sj))] * w;
            }
            out[(i, j)] = acc;
        }
    }
    DensityMatrix::new(space, out).unwrap()
}

#[test]
fn stored_pair_decays_as_the_composed_channel() {
    let tau = 3e-6;
    let model = DecoherenceModel::damping_only(tau);
    let wait = 2e-6;
    let (u, l) = (psi(3, 0.0), psi(3, 0.0));
    let upper = stub_link("su", ("L.u", "R.u"), 1.0, 0.0, u.clone(), Some(model));
    let lower = stub_link("sl", ("L.l", "R.l"), 1.0, wait, l.clone(), Some(model));
    let mut log = RunLog::new(0, false);
    let q = prepare_node_qubit(
        &upper,
        &lower,
        &mut MemoryBank::new(),
        &config(2),
        0.0,
        &RngStream::new(5),
        &mut log,
    )
    .unwrap();
    let s = (-wait / tau).exp();
    let aged = damp_by_hand(&damp_by_hand(&u, 0, s), 1, s);
    let expected = aged.tensor(&l).unwrap();
    assert!(max_abs(&(q.joint.matrix() - expected.matrix())) < 1e-9);
    // a Ψ pair under damping on both sides keeps concurrence e^{-t/τ}
    let (qubits, _) = restrict_to_qubits(&q.prepared.states[0], 0, 1).unwrap();
    let c = concurrence(&qubits).unwrap();
    assert!((c - s).abs() < 1e-9, "concurrence {c}");
}

#[test]
fn expired_pair_restarts_and_respects_the_restart_cap() {
    let upper = stub_link("su", ("L.u", "R.u"), 1.0, 0.0, psi(3, 0.0), None);
    let lower = stub_link("sl", ("L.l", "R.l"), 1.0, 5.0, psi(3, 0.0), None);
    let mut cfg = config(2);
    cfg.memory_budget = Some(2.0);
    let mut log = RunLog::new(0, false);
    let q = prepare_node_qubit(
        &upper,
        &lower,
        &mut MemoryBank::new(),
        &cfg,
        0.0,
        &RngStream::new(1),
        &mut log,
    )
    .unwrap();
    assert_eq!(q.prepared.restarts, 2);
    assert_eq!(q.prepared.trials, vec![3, 1]);
    let expired = log.events.iter().filter(|e| e.kind == EventKind::Expired).count();
    assert_eq!(expired, 2);
    assert!(q.ready_time - q.prepared.pairs[0].heralded_at <= 2.0);

    cfg.max_restarts = 1;
    let mut log = RunLog::new(0, false);
    let err = prepare_node_qubit(
        &upper,
        &lower,
        &mut MemoryBank::new(),
        &cfg,
        0.0,
        &RngStream::new(1),
        &mut log,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MemoryExpired { ref pair, .. } if pair == "su"));
}

#[test]
fn ideal_polarization_readout_is_maximally_entangled() {
    let joint = psi(3, 0.4).tensor(&psi(3, -0.2)).unwrap();
    let mut rng = RngStream::new(3);
    let r = polarization_readout(&joint, [1.0; 4], &mut rng).unwrap();
    assert!((concurrence(&r.state).unwrap() - 1.0).abs() < 1e-9);
    assert!((r.coincidence_probability - 0.5).abs() < 1e-12);
    let r84 = polarization_readout(&joint, [0.84; 4], &mut rng).unwrap();
    assert!((r84.coincidence_probability / r.coincidence_probability - 0.84f64.powi(2)).abs() < 1e-12);
    assert!(matches!(
        polarization_readout(&joint, [0.0; 4], &mut rng),
        Err(Error::DegenerateMeasurement { .. })
    ));
}

#[test]
fn polarization_readout_matches_generic_retrieval() {
    let topo = NetworkTopology::single_link(
        small_params(0.08),
        OpticalLink::with_transmissivity(0.6).unwrap(),
        (Detector::new(0.7, 1e-3).unwrap(), Detector::ideal()),
    );
    let link = HeraldLink::from_station(&topo, &topo.stations().unwrap()[0]).unwrap();
    let a = link.model.conditional_state(Click::D1).unwrap().clone();
    let b = link.model.conditional_state(Click::D2).unwrap().clone();
    let joint = DecoherenceModel::damping_only(1.0)
        .apply(&a, 1, 0.3)
        .unwrap()
        .tensor(&b)
        .unwrap();
    let etas = [0.9, 0.7, 0.6, 0.8];
    let r = polarization_readout(&joint, etas, &mut RngStream::new(1)).unwrap();
    let mut fields = joint.clone();
    for (i, &eta) in etas.iter().enumerate() {
        fields = crate::ensemble::retrieve(&fields, i, eta).unwrap();
    }
    let space = fields.space().clone();
    let idx = |q: usize| {
        let (l, r) = (q / 2, q % 2);
        space.index_of(&[1 - l, 1 - r, l, r])
    };
    let block = CMatrix::from_fn(4, 4, |i, j| fields.matrix()[(idx(i), idx(j))]);
    let p = block.trace().re;
    assert!((p - r.coincidence_probability).abs() < 1e-12);
    assert!(max_abs(&(block.unscale(p) - r.state.matrix())) < 1e-12);
}

#[test]
fn perfect_pairs_connect_to_a_bell_pair() {
    let det = (Detector::ideal(), Detector::ideal());
    let mut seen = [false; 2];
    for seed in 0..40 {
        let mut rng = RngStream::new(seed);
        let out = entanglement_swap(Some(&psi(2, 0.0)), Some(&psi(2, 0.0)), (1.0, 1.0), &det, &mut rng).unwrap();
        assert!((out.success_probability - 0.75).abs() < 1e-12);
        if !out.success {
            continue;
        }
        let eff = out.effective.unwrap();
        assert!(psi_fidelity(eff.as_density()).unwrap() >= 1.0 - 1e-9);
        // D1 and D2 herald opposite signs
        let coherence = eff.matrix()[(1, 2)].re;
        let sign = out.click.sign().unwrap();
        assert!((coherence - sign * 0.5).abs() < 1e-9 || (coherence + sign * 0.5).abs() < 1e-9);
        seen[(out.click == Click::D2) as usize] = true;
        // vacuum from the two-photon term stays in the raw state
        assert!((out.single_excitation_weight - 2.0 / 3.0).abs() < 1e-12);
    }
    assert!(seen[0] && seen[1]);
}

#[test]
fn connection_signs_are_opposite_for_the_two_detectors() {
    let model = SwapModel::new((2, 2), (1.0, 1.0), &(Detector::ideal(), Detector::ideal())).unwrap();
    let b = model.branches(&psi(2, 0.0), &psi(2, 0.0)).unwrap();
    let (d1, d2) = (b[1].renormalized().unwrap(), b[2].renormalized().unwrap());
    let (c1, c2) = (d1.matrix()[(1, 2)], d2.matrix()[(1, 2)]);
    assert!((c1 + c2).norm() < 1e-12 && c1.norm() > 0.3);
}

#[test]
fn connection_probability_expansion() {
    let det = (Detector::ideal(), Detector::ideal());
    for eta in [0.2, 0.5, 0.9] {
        let model = SwapModel::new((3, 3), (eta, eta), &det).unwrap();
        let b = model.branches(&psi(3, 0.0), &psi(3, 0.0)).unwrap();
        let p = b[1].trace().re + b[2].trace().re;
        assert!((p - (eta - eta * eta / 4.0)).abs() < 1e-12, "η = {eta}: {p}");
        let total: f64 = b.iter().map(|x| x.trace().re).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

/// Full-space oracle: retrieve both middle memories, pad, beamsplitter,
/// click effect, trace the middle out.
fn swap_oracle(
    left: &DensityMatrix,
    right: &DensityMatrix,
    etas: (f64, f64),
    det: &(Detector, Detector),
    click: Click,
) -> DensityMatrix {
    let joint = left.tensor(right).unwrap();
    let joint = crate::ensemble::retrieve(&joint, 1, etas.0).unwrap();
    let joint = crate::ensemble::retrieve(&joint, 2, etas.1).unwrap();
    let f = left.space().dims()[1] + right.space().dims()[0] - 1;
    let joint = joint.pad_mode(1, f).unwrap().pad_mode(2, f).unwrap();
    let u = fock::beamsplitter(f, std::f64::consts::FRAC_PI_4, 0.0);
    // exact on the populated block; truncation only touches unoccupied inputs
    let joint = joint.apply_kraus(&[u], &[1, 2]).unwrap();
    let effect = CMatrix::from_fn(f * f, f * f, |i, j| {
        if i != j {
            return cr(0.0);
        }
        let (a, b) = (i / f, i % f);
        let (n2, n1) = (det.1.no_click_probability(a), det.0.no_click_probability(b));
        cr(match click {
            Click::None => n2 * n1,
            Click::D1 => n2 * (1.0 - n1),
            Click::D2 => (1.0 - n2) * n1,
            Click::Both => (1.0 - n2) * (1.0 - n1),
        })
    });
    let full = crate::qstate::embed_operator(joint.space(), &effect, &[1, 2]).unwrap();
    let weighted = DensityMatrix::from_raw(joint.space().clone(), full * joint.matrix()).unwrap();
    weighted.partial_trace(&[0, 3]).unwrap()
}

#[test]
fn connection_matches_full_composition_with_vacuum_terms() {
    let det = (Detector::new(0.8, 1e-3).unwrap(), Detector::new(0.6, 2e-3).unwrap());
    let topo = NetworkTopology::single_link(small_params(0.1), OpticalLink::with_transmissivity(0.7).unwrap(), det);
    let link = HeraldLink::from_station(&topo, &topo.stations().unwrap()[0]).unwrap();
    let left = link.model.conditional_state(Click::D1).unwrap().clone();
    let right = DecoherenceModel::damping_only(1.0)
        .apply(link.model.conditional_state(Click::D2).unwrap(), 0, 0.2)
        .unwrap();
    let etas = (0.75, 0.55);
    let model = SwapModel::new((3, 3), etas, &det).unwrap();
    let b = model.branches(&left, &right).unwrap();
    for click in Click::ALL {
        let oracle = swap_oracle(&left, &right, etas, &det, click);
        let diff = max_abs(&(oracle.matrix() - b[click.index()].matrix()));
        assert!(diff < 1e-9, "{click:?}: {diff}");
    }
}

#[test]
fn missing_pair_is_a_protocol_error() {
    let det = (Detector::ideal(), Detector::ideal());
    let mut rng = RngStream::new(0);
    let out = entanglement_swap(Some(&psi(2, 0.0)), None, (1.0, 1.0), &det, &mut rng);
    assert!(matches!(out, Err(Error::ProtocolState(_))));
}

fn hybrid_topology(p_atom: f64, p_ens: f64) -> NetworkTopology {
    let cavity = CavityNodeParams {
        cavity: crate::cavity::cavity_preset("fabry-perot").unwrap(),
        pulse: crate::cavity::PulseSpec::Ramp {
            omega_max_over_g: 0.4,
            duration_g: 100.0,
            samples: 201,
        },
        map_mode: crate::cavity::MapMode::Ideal,
        integration: Default::default(),
        emission_probability: p_atom,
        emission_phase: 0.0,
        qubit: (0.0, 0.0),
    };
    NetworkTopology::hybrid(
        cavity,
        small_params(p_ens),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    )
}

fn hybrid_link(t: &NetworkTopology) -> HeraldLink {
    HeraldLink::from_station(t, &t.stations().unwrap()[0]).unwrap()
}

#[test]
fn balanced_hybrid_herald_is_entangled() {
    let p_e: f64 = 1e-3;
    let c0 = 1.0 / (1.0 + p_e + p_e * p_e).sqrt();
    let (a0, a1) = (c0, c0 * p_e.sqrt());
    // √(1−p_A) a1 = √p_A a0
    let p_a = a1 * a1 / (a0 * a0 + a1 * a1);
    let t = hybrid_topology(p_a, p_e);
    let link = hybrid_link(&t);
    let state = link.model.conditional_state(Click::D1).unwrap();
    let (q, _) = restrict_to_qubits(state, 0, 1).unwrap();
    let c = concurrence(&q).unwrap();
    assert!(c >= 0.999, "concurrence {c}");
}

#[test]
fn one_armed_hybrid_herald_is_a_product() {
    let t = hybrid_topology(0.05, 0.0);
    let link = hybrid_link(&t);
    let state = link.model.conditional_state(Click::D1).unwrap();
    assert!((state.population(&[1, 0]) - 1.0).abs() < 1e-12);
    let (q, _) = restrict_to_qubits(state, 0, 1).unwrap();
    assert!(concurrence(&q).unwrap() < 1e-12);
}

#[test]
fn hybrid_imbalance_follows_projection_algebra() {
    for (p_a, p_e) in [(0.02, 0.01), (0.05, 0.002), (0.001, 0.03)] {
        let t = hybrid_topology(p_a, p_e);
        let link = hybrid_link(&t);
        let r = (1.0 - p_a).sqrt() * p_e.sqrt() / p_a.sqrt();
        for click in [Click::D1, Click::D2] {
            let state = link.model.conditional_state(click).unwrap();
            let s = state.space();
            let (i10, i01) = (s.index_of(&[1, 0]), s.index_of(&[0, 1]));
            let m = state.matrix();
            let w = m[(i10, i10)].re + m[(i01, i01)].re;
            let norm = 1.0 + r * r;
            assert!((m[(i10, i10)].re / w - 1.0 / norm).abs() < 1e-9);
            assert!((m[(i01, i01)].re / w - r * r / norm).abs() < 1e-9);
            // single-excitation block is pure: |ρ_{10,01}|² = ρ_{10,10} ρ_{01,01}
            let coh = m[(i01, i10)];
            assert!((coh.norm() / w - r / norm).abs() < 1e-9);
            let sign = click.sign().unwrap();
            assert!((coh.re.signum() - sign).abs() < 1e-12 || (coh.re.signum() + sign).abs() < 1e-12);
        }
        let coherence = |click| {
            let st = link.model.conditional_state(click).unwrap();
            st.matrix()[(st.space().index_of(&[0, 1]), st.space().index_of(&[1, 0]))]
        };
        let (d1, d2) = (coherence(Click::D1), coherence(Click::D2));
        assert!(d1.re * d2.re < 0.0);
    }
}

#[test]
fn connectivity_dimensions() {
    use num_bigint::BigUint;
    let (c, q) = connectivity_dimension(2, 3).unwrap();
    assert_eq!((c, q), (BigUint::from(16u32), BigUint::from(64u32)));
    let (c, q) = connectivity_dimension(1, 7).unwrap();
    assert_eq!(c, q);
    let (_, q) = connectivity_dimension(5, 10).unwrap();
    assert_eq!(q, BigUint::from(1u64 << 50));
    let (c, q) = connectivity_dimension(10, 30).unwrap();
    assert_eq!(c, BigUint::from(10u64 << 30));
    assert_eq!(q.bits(), 301);
    assert!(connectivity_dimension(0, 3).is_err());
}

#[test]
fn max_of_geometrics() {
    assert!((expected_max_geometric(&[0.2]).unwrap() - 5.0).abs() < 1e-12);
    let p: f64 = 0.1;
    let two = 2.0 / p - 1.0 / (1.0 - (1.0 - p).powi(2));
    assert!((expected_max_geometric(&[p, p]).unwrap() - two).abs() < 1e-12);
    // direct sum Σ_k P(max ≥ k) as a check for unequal probabilities
    let ps = [0.3, 0.05, 0.12];
    let mut sum = 0.0;
    for k in 0..20_000 {
        let all_below: f64 = ps.iter().map(|p| 1.0 - (1.0f64 - p).powi(k)).product();
        sum += 1.0 - all_below;
    }
    assert!((expected_max_geometric(&ps).unwrap() - sum).abs() < 1e-9);
}

fn herald_config(seed: u64, reps: u64) -> ProtocolConfig {
    let mut cfg = ProtocolConfig::new(Scenario::HeraldOneLink, seed);
    cfg.repetitions = reps;
    cfg
}

#[test]
fn scenario_runs_are_deterministic_across_worker_counts() {
    let topo = NetworkTopology::single_link(
        small_params(0.02),
        OpticalLink::with_transmissivity(0.8).unwrap(),
        (Detector::new(0.9, 1e-4).unwrap(), Detector::new(0.9, 1e-4).unwrap()),
    );
    let cfg = herald_config(42, 16);
    let a = serde_json::to_string(&run_simulation_with_workers(&topo, &cfg, Some(1)).unwrap()).unwrap();
    let b = serde_json::to_string(&run_simulation_with_workers(&topo, &cfg, Some(4)).unwrap()).unwrap();
    let c = serde_json::to_string(&run_simulation_with_workers(&topo, &cfg, None).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let other =
        serde_json::to_string(&run_simulation_with_workers(&topo, &herald_config(43, 16), Some(2)).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn herald_scenario_matches_direct_attempts() {
    let topo = NetworkTopology::single_link(
        small_params(0.03),
        OpticalLink::with_transmissivity(0.5).unwrap(),
        (Detector::ideal(), Detector::ideal()),
    );
    let cfg = herald_config(7, 5);
    let report = run_simulation_with_workers(&topo, &cfg, Some(2)).unwrap();
    let link = HeraldLink::from_station(&topo, &topo.stations().unwrap()[0]).unwrap();
    let mut direct = Vec::new();
    for rep in 0..5 {
        let stream = repetition_stream(7, rep).substream_named(&link.id).substream(0);
        let att = attempt_until_heralded(&link, &mut memory_bank(&topo).unwrap(), &cfg, 0.0, &stream, None).unwrap();
        direct.push(att.n_trials);
    }
    let mut hist = std::collections::BTreeMap::new();
    for &n in &direct {
        *hist.entry(n).or_insert(0u64) += 1;
    }
    assert_eq!(report.links[0].trials_to_success, hist);
    assert_eq!(report.links[0].total_trials, direct.iter().sum::<u64>());
    let fid = &report.metrics["fidelity"];
    // multi-excitation admixture is first order in p
    assert!(fid.min > 1.0 - 3.0 * 0.03 && fid.max < 1.0);
}

#[test]
fn scenario_topology_mismatch_is_a_config_error() {
    let topo = NetworkTopology::single_link(
        small_params(0.02),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    for scenario in [
        Scenario::NodePairBell,
        Scenario::SwapChain,
        Scenario::Hybrid,
        Scenario::CavityTransfer,
    ] {
        let mut cfg = herald_config(1, 1);
        cfg.scenario = scenario;
        assert!(
            matches!(run_simulation_with_workers(&topo, &cfg, Some(1)), Err(Error::Config(_))),
            "{scenario:?}"
        );
    }
    let mut cfg = herald_config(1, 1);
    cfg.overrides.p_excite = Some(0.9);
    assert!(matches!(
        run_simulation_with_workers(&topo, &cfg, Some(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn overrides_reach_every_node() {
    let topo = NetworkTopology::node_pair(
        small_params(0.02),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    let o = Overrides {
        p_excite: Some(0.05),
        detector_efficiency: Some(0.5),
        phase_jitter_std: Some(0.1),
        ..Default::default()
    };
    let t = topo.with_overrides(&o);
    for n in &t.nodes {
        match &n.kind {
            NodeKind::EnsemblePair {
                upper,
                lower,
                detectors,
            } => {
                assert_eq!(upper.p_excite, 0.05);
                assert_eq!(lower.p_excite, 0.05);
                assert_eq!(detectors.0.efficiency, 0.5);
            }
            NodeKind::DetectorStation { detectors } => assert_eq!(detectors.1.efficiency, 0.5),
            _ => unreachable!(),
        }
    }
    assert!(t.links.iter().all(|l| l.link.phase_jitter_std == 0.1));
}

#[test]
fn node_pair_scenario_reports_the_reference_block() {
    let topo = NetworkTopology::node_pair(
        small_params(0.01),
        OpticalLink::lossless(),
        (Detector::ideal(), Detector::ideal()),
    );
    let mut cfg = ProtocolConfig::new(Scenario::NodePairBell, 11);
    cfg.repetitions = 4;
    let report = run_simulation_with_workers(&topo, &cfg, Some(2)).unwrap();
    let r = report.reference.as_ref().unwrap();
    assert_eq!(r.published_concurrence, 0.9);
    assert!(r.simulated_polarization_concurrence > 0.9);
    assert!(r.simulated_chsh_max > 2.0);
    assert!(r.imperfection_budget.contains_key("p_excite"));
    assert!(report
        .events
        .windows(2)
        .all(|w| (w[0].repetition, w[0].time) <= (w[1].repetition, w[1].time)));
}

#[test]
fn chain_scenario_connects_and_reports_rates() {
    let topo = NetworkTopology::chain(
        2,
        small_params(0.02),
        OpticalLink::with_transmissivity(0.8).unwrap(),
        (Detector::ideal(), Detector::ideal()),
    );
    let mut cfg = ProtocolConfig::new(Scenario::SwapChain, 3);
    cfg.repetitions = 8;
    cfg.compare_direct = true;
    let report = run_simulation_with_workers(&topo, &cfg, Some(3)).unwrap();
    assert_eq!(report.stages.len(), 1);
    assert_eq!(report.links.len(), 2);
    let rc = report.rate_comparison.as_ref().unwrap();
    assert!(rc.direct_rate.is_some());
    assert!((rc.total_transmissivity - 0.8f64.powi(4)).abs() < 1e-12);
    assert!(report.metrics["effective_fidelity"].min > 0.99);
}

#[test]
fn hybrid_scenario_runs() {
    let t = hybrid_topology(0.01, 0.01);
    let mut cfg = ProtocolConfig::new(Scenario::Hybrid, 5);
    cfg.repetitions = 3;
    let report = run_simulation_with_workers(&t, &cfg, Some(1)).unwrap();
    assert!(report.metrics["concurrence"].min > 0.9);
}

#[test]
fn ideal_cavity_transfer_scenario() {
    let node = CavityNodeParams {
        cavity: crate::cavity::cavity_preset("fabry-perot").unwrap(),
        pulse: crate::cavity::PulseSpec::Ramp {
            omega_max_over_g: 0.4,
            duration_g: 100.0,
            samples: 201,
        },
        map_mode: crate::cavity::MapMode::Ideal,
        integration: Default::default(),
        emission_probability: 0.0,
        emission_phase: 0.0,
        qubit: (0.3, 1.2),
    };
    let t = NetworkTopology::cavity_pair(node.clone(), node, OpticalLink::lossless());
    let cfg = ProtocolConfig::new(Scenario::CavityTransfer, 0);
    let report = run_simulation_with_workers(&t, &cfg, Some(1)).unwrap();
    assert!((report.metrics["fidelity"].mean - 1.0).abs() < 1e-12);
    assert_eq!(report.events.len(), 2);
    let _ = c(0.0, 0.0);
}
