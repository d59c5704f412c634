use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::cavity::{
    adiabatic_map_with, memory_qubit_space, transfer_node_to_node, Direction, MapMode, TransferOutput,
};
use crate::channel::{Click, Detector, HeraldModel, HeraldOutcome, HeraldSource};
use crate::ensemble::{DecoherenceModel, EnsembleNode};
use crate::error::{Error, Result};
use crate::qstate::{
    cr, fock, CMatrix, DensityMatrix, HilbertSpace, StateVector, SubsystemKind, C64, MIN_OUTCOME_PROBABILITY,
};
use crate::rng::RngStream;
use crate::verify::{restrict_to_qubits, two_qubit_space, TwoQubitDensityMatrix};

use super::config::ProtocolConfig;
use super::events::{Event, EventKind, EventQueue};
use super::topology::{CavityNodeParams, Endpoint, NetworkTopology, NodeKind, Station};

/// One write trial on one link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub repetition: u64,
    pub link: String,
    /// Time the outcome is known at the station, seconds.
    pub time: f64,
    pub outcome: Click,
    /// Trials on this link so far in this repetition, this one included.
    pub cumulative_trials: u64,
}

/// Event and trial sink for one repetition.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub repetition: u64,
    pub record_trials: bool,
    pub events: Vec<Event>,
    pub trials: Vec<TrialRecord>,
    cumulative: BTreeMap<String, u64>,
}

impl RunLog {
    pub fn new(repetition: u64, record_trials: bool) -> Self {
        RunLog {
            repetition,
            record_trials,
            ..Default::default()
        }
    }

    pub fn event(&mut self, time: f64, node: &str, kind: EventKind, detail: impl Into<String>) {
        self.events.push(Event {
            repetition: self.repetition,
            time,
            node: node.to_string(),
            kind,
            detail: detail.into(),
        });
    }

    /// Trials counted on `link` so far.
    pub fn trials_on(&self, link: &str) -> u64 {
        self.cumulative.get(link).copied().unwrap_or(0)
    }
}

/// Ensemble memories of a topology, keyed by endpoint.
pub type MemoryBank = BTreeMap<Endpoint, EnsembleNode>;

pub fn memory_bank(topology: &NetworkTopology) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new();
    for station in topology.stations()? {
        for e in [&station.endpoints.0, &station.endpoints.1] {
            if let Ok(params) = topology.ensemble(e) {
                bank.insert(e.clone(), EnsembleNode::new(params.clone())?);
            }
        }
    }
    Ok(bank)
}

/// Heralding station with its exact outcome model.
#[derive(Clone, Debug)]
pub struct HeraldLink {
    pub id: String,
    pub endpoints: (Endpoint, Endpoint),
    pub model: HeraldModel,
    /// Delay between the end of a trial slot and the herald, seconds.
    pub latency: f64,
    /// Storage decoherence on each side; `None` for an atom in a cavity.
    pub decoherence: [Option<DecoherenceModel>; 2],
}

impl HeraldLink {
    pub fn from_station(topology: &NetworkTopology, station: &Station) -> Result<Self> {
        let source = |e: &Endpoint| -> Result<(HeraldSource, Option<DecoherenceModel>)> {
            match topology.node(&e.node).map(|n| &n.kind) {
                Some(NodeKind::Cavity { params }) => Ok((cavity_source(params)?, None)),
                _ => {
                    let p = topology.ensemble(e)?;
                    Ok((HeraldSource::ensemble(p)?, Some(p.decoherence())))
                }
            }
        };
        let (left, dl) = source(&station.endpoints.0)?;
        let (right, dr) = source(&station.endpoints.1)?;
        Ok(HeraldLink {
            id: station.id.clone(),
            endpoints: station.endpoints.clone(),
            model: HeraldModel::from_sources(&left, &right, &station.setup)?,
            latency: station.latency(),
            decoherence: [dl, dr],
        })
    }
}

/// Raman emitter in a cavity: `√(1−p)|0_A⟩|0⟩ + e^{iφ}√p|1_A⟩|1⟩`, where
/// `|1_A⟩` is the flipped atom. The photon leaves the cavity with the
/// efficiency of the adiabatic emission map.
pub fn cavity_source(params: &CavityNodeParams) -> Result<HeraldSource> {
    let p = params.emission_probability;
    let efficiency = match params.map_mode {
        MapMode::Ideal => 1.0,
        MapMode::Integrated => {
            let pulse = params.pulse.build(params.cavity.g, Direction::Emit)?;
            let excited = StateVector::basis(memory_qubit_space(), &[1])?;
            adiabatic_map_with(
                Direction::Emit,
                &pulse,
                &params.cavity,
                &excited,
                MapMode::Integrated,
                &params.integration,
            )?
            .success_probability
            .clamp(0.0, 1.0)
        }
    };
    Ok(HeraldSource {
        amplitudes: vec![cr((1.0 - p).sqrt()), C64::from_polar(p.sqrt(), params.emission_phase)],
        kind: SubsystemKind::Atom,
        efficiency,
        phase: params.emission_phase,
    })
}

#[derive(Clone, Debug)]
pub struct HeraldAttempt {
    pub n_trials: u64,
    pub outcome: HeraldOutcome,
    /// From the start of the first trial to the herald, seconds.
    pub elapsed: f64,
}

/// Repeats reset, write and herald every `attempt_period` until a single
/// click. Trial `k` (from 1) draws from `rng.substream(k)` and its outcome is
/// known at `start + k·period + latency`. Memories present in `nodes` are
/// reinitialized and written each trial and hold their reduced states after
/// the herald. No decoherence is applied here.
pub fn attempt_until_heralded(
    link: &HeraldLink,
    nodes: &mut MemoryBank,
    config: &ProtocolConfig,
    start: f64,
    rng: &RngStream,
    mut log: Option<&mut RunLog>,
) -> Result<HeraldAttempt> {
    let ends = [&link.endpoints.0, &link.endpoints.1];
    for e in ends {
        if nodes.get(e).is_some_and(|n| !n.is_idle()) {
            return Err(Error::ProtocolState(format!(
                "memory `{}` is busy; link `{}` needs idle memories",
                e.label(),
                link.id
            )));
        }
    }
    let period = config.attempt_period;
    for k in 1..=config.max_trials {
        for e in ends {
            if let Some(n) = nodes.get_mut(e) {
                n.reset();
                n.write_pulse()?;
            }
        }
        let outcome = link.model.sample(&mut rng.substream(k))?;
        let time = start + k as f64 * period + link.latency;
        if let Some(log) = log.as_deref_mut() {
            let count = log.cumulative.entry(link.id.clone()).or_default();
            *count += 1;
            let cumulative_trials = *count;
            if log.record_trials {
                log.trials.push(TrialRecord {
                    repetition: log.repetition,
                    link: link.id.clone(),
                    time,
                    outcome: outcome.which_detector,
                    cumulative_trials,
                });
            }
        }
        if let Some(state) = &outcome.conditional_state {
            for (i, e) in ends.into_iter().enumerate() {
                if let Some(n) = nodes.get_mut(e) {
                    n.store(state.partial_trace(&[i])?)?;
                    n.advance_to(time)?;
                }
            }
            return Ok(HeraldAttempt {
                n_trials: k,
                outcome,
                elapsed: time - start,
            });
        }
    }
    for e in ends {
        if let Some(n) = nodes.get_mut(e) {
            n.reset();
        }
    }
    Err(Error::Timeout {
        trials: config.max_trials,
    })
}

/// Heralded pair waiting in memory.
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub link: String,
    /// State at the herald, `(left, right)` memories.
    pub state: DensityMatrix,
    pub heralded_at: f64,
    pub click: Click,
    pub n_trials: u64,
    pub decoherence: [Option<DecoherenceModel>; 2],
}

impl StoredPair {
    pub fn storage_time(&self, now: f64) -> Result<f64> {
        let dt = now - self.heralded_at;
        if dt < 0.0 || dt.is_nan() {
            return Err(Error::ProtocolState(format!(
                "pair `{}` read at {now} before its herald at {}",
                self.link, self.heralded_at
            )));
        }
        Ok(dt)
    }

    /// State after storage until `now`, each memory under its own model.
    pub fn state_at(&self, now: f64) -> Result<DensityMatrix> {
        let dt = self.storage_time(now)?;
        let mut rho = self.state.clone();
        for (mode, model) in self.decoherence.iter().enumerate() {
            if let Some(model) = model {
                rho = model.apply(&rho, mode, dt)?;
            }
        }
        Ok(rho)
    }

    /// `MemoryExpired` once the pair has waited longer than `budget`.
    pub fn check_budget(&self, now: f64, budget: Option<f64>) -> Result<()> {
        let stored = self.storage_time(now)?;
        match budget {
            Some(budget) if stored > budget => Err(Error::MemoryExpired {
                pair: self.link.clone(),
                stored,
                budget,
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedPairs {
    /// Stored pairs in link order, as heralded.
    pub pairs: Vec<StoredPair>,
    /// Pair states aged to `ready_time`.
    pub states: Vec<DensityMatrix>,
    /// Time the last pair heralded.
    pub ready_time: f64,
    pub trials: Vec<u64>,
    /// `(link index, trials)` for every herald, expired pairs included.
    pub herald_trials: Vec<(usize, u64)>,
    pub restarts: u64,
}

/// Heralds every link independently from `start`. A pair that heralds early
/// is stored while the others keep trying; a pair that outlives the memory
/// budget is discarded and its link restarts at the expiry time. Link `i`
/// uses `rngs[i].substream(a)` for its `a`-th attempt sequence.
pub fn prepare_pairs(
    links: &[HeraldLink],
    nodes: &mut MemoryBank,
    config: &ProtocolConfig,
    start: f64,
    rngs: &[RngStream],
    log: &mut RunLog,
) -> Result<PreparedPairs> {
    if links.is_empty() || rngs.len() != links.len() {
        return Err(Error::arg("need one stream per link and at least one link"));
    }
    let n = links.len();
    let mut queue: EventQueue<(usize, u64)> = EventQueue::new();
    let mut attempts = vec![0u64; n];
    let mut generation = vec![0u64; n];
    let mut trials = vec![0u64; n];
    let mut pending: Vec<Option<(f64, HeraldAttempt)>> = vec![None; n];
    let mut stored: Vec<Option<StoredPair>> = vec![None; n];
    let mut restarts = 0u64;
    let mut herald_trials = Vec::new();

    let mut launch = |i: usize,
                      t: f64,
                      nodes: &mut MemoryBank,
                      log: &mut RunLog,
                      queue: &mut EventQueue<(usize, u64)>,
                      pending: &mut Vec<Option<(f64, HeraldAttempt)>>,
                      generation: &[u64]|
     -> Result<()> {
        let attempt = attempt_until_heralded(&links[i], nodes, config, t, &rngs[i].substream(attempts[i]), Some(log))?;
        attempts[i] += 1;
        trials[i] += attempt.n_trials;
        let at = t + attempt.elapsed;
        queue.push(at, &links[i].id, EventKind::Herald, (i, generation[i]));
        pending[i] = Some((at, attempt));
        Ok(())
    };

    for i in 0..n {
        launch(i, start, nodes, log, &mut queue, &mut pending, &generation)?;
    }
    let ready_time = loop {
        let Some((t, id, kind, (i, g))) = queue.pop() else {
            return Err(Error::ProtocolState(
                "event queue drained before all pairs were ready".into(),
            ));
        };
        match kind {
            EventKind::Herald => {
                let (_, attempt) = pending[i].take().expect("herald event without an attempt");
                let click = attempt.outcome.which_detector;
                herald_trials.push((i, attempt.n_trials));
                log.event(
                    t,
                    &id,
                    EventKind::Herald,
                    format!("{click:?} after {} trials", attempt.n_trials),
                );
                stored[i] = Some(StoredPair {
                    link: id,
                    state: attempt.outcome.conditional_state.expect("heralded"),
                    heralded_at: t,
                    click,
                    n_trials: attempt.n_trials,
                    decoherence: links[i].decoherence,
                });
                if stored.iter().all(Option::is_some) {
                    break t;
                }
                if let Some(budget) = config.memory_budget {
                    queue.push(t + budget, &links[i].id, EventKind::Expired, (i, g));
                }
            }
            EventKind::Expired => {
                if g != generation[i] || stored[i].is_none() {
                    continue;
                }
                // a pair used exactly at the budget still counts
                let last_herald = pending
                    .iter()
                    .flatten()
                    .map(|(at, _)| *at)
                    .fold(f64::NEG_INFINITY, f64::max);
                if last_herald <= t {
                    continue;
                }
                let pair = stored[i].take().expect("checked");
                let err = Error::MemoryExpired {
                    pair: pair.link.clone(),
                    stored: t - pair.heralded_at,
                    budget: config.memory_budget.unwrap_or(0.0),
                };
                restarts += 1;
                if restarts > config.max_restarts {
                    return Err(err);
                }
                log.event(t, &id, EventKind::Expired, err.to_string());
                for e in [&links[i].endpoints.0, &links[i].endpoints.1] {
                    if let Some(n) = nodes.get_mut(e) {
                        n.reset();
                    }
                }
                generation[i] += 1;
                launch(i, t, nodes, log, &mut queue, &mut pending, &generation)?;
            }
            _ => unreachable!("only herald and expiry events are queued"),
        }
    };
    let pairs: Vec<StoredPair> = stored.into_iter().map(|p| p.expect("all stored")).collect();
    let states = pairs
        .iter()
        .map(|p| p.state_at(ready_time))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = links.iter().map(|l| l.id.as_str()).collect();
    log.event(
        ready_time,
        &ids.join("+"),
        EventKind::Ready,
        format!("{restarts} restarts"),
    );
    Ok(PreparedPairs {
        pairs,
        states,
        ready_time,
        trials,
        herald_trials,
        restarts,
    })
}

#[derive(Clone, Debug)]
pub struct NodeQubit {
    /// Memories ordered `(L_u, R_u, L_l, R_l)`.
    pub joint: DensityMatrix,
    pub ready_time: f64,
    /// `ready_time − start`.
    pub preparation_time: f64,
    pub prepared: PreparedPairs,
}

/// Heralds the upper pair `(L_u, R_u)` and the lower pair `(L_l, R_l)`
/// asynchronously and returns their joint state when both are present.
/// Each link draws from `rng.substream_named(link id)`.
pub fn prepare_node_qubit(
    upper: &HeraldLink,
    lower: &HeraldLink,
    nodes: &mut MemoryBank,
    config: &ProtocolConfig,
    start: f64,
    rng: &RngStream,
    log: &mut RunLog,
) -> Result<NodeQubit> {
    let links = [upper.clone(), lower.clone()];
    let rngs = [rng.substream_named(&upper.id), rng.substream_named(&lower.id)];
    let prepared = prepare_pairs(&links, nodes, config, start, &rngs, log)?;
    let joint = prepared.states[0].tensor(&prepared.states[1])?;
    Ok(NodeQubit {
        joint,
        ready_time: prepared.ready_time,
        preparation_time: prepared.ready_time - start,
        prepared,
    })
}

/// Element `(row, col)` of the state after independent loss `etas[i]` on
/// every mode of `rho`.
fn lossy_element(rho: &DensityMatrix, etas: &[f64], row: &[usize], col: &[usize]) -> C64 {
    let dims = rho.space().dims();
    let mut total = C64::new(0.0, 0.0);
    let mut k = vec![0usize; dims.len()];
    let space = rho.space();
    'outer: loop {
        let mut weight = 1.0;
        let mut ok = true;
        let mut r = Vec::with_capacity(dims.len());
        let mut c = Vec::with_capacity(dims.len());
        for i in 0..dims.len() {
            let (n, m) = (row[i] + k[i], col[i] + k[i]);
            if n >= dims[i] || m >= dims[i] {
                ok = false;
                break;
            }
            let eta = etas[i];
            weight *= (fock::binomial(n, k[i]) * fock::binomial(m, k[i])).sqrt()
                * eta.powf((row[i] + col[i]) as f64 / 2.0)
                * (1.0 - eta).powi(k[i] as i32);
            r.push(n);
            c.push(m);
        }
        if ok && weight != 0.0 {
            total += rho.matrix()[(space.index_of(&r), space.index_of(&c))] * weight;
        }
        // next loss pattern
        for i in 0..dims.len() {
            k[i] += 1;
            if k[i] < dims[i] {
                continue 'outer;
            }
            k[i] = 0;
        }
        break;
    }
    total
}

#[derive(Clone, Debug)]
pub struct PolarizationReadout {
    /// Photon at L then photon at R; `|0⟩ = H` (upper), `|1⟩ = V` (lower).
    pub state: TwoQubitDensityMatrix,
    /// Probability of exactly one photon at each node.
    pub coincidence_probability: f64,
    /// Sampled: whether this readout produced the coincidence.
    pub coincidence: bool,
}

/// Reads out all four memories with efficiencies `[L_u, R_u, L_l, R_l]` and
/// conditions on one photon per node, with the `u`/`l` modes of a node as the
/// `H`/`V` polarizations of its photon. Detection is number resolving here.
pub fn polarization_readout(
    joint: &DensityMatrix,
    efficiencies: [f64; 4],
    rng: &mut RngStream,
) -> Result<PolarizationReadout> {
    if joint.space().len() != 4 || joint.space().dims().iter().any(|&d| d < 2) {
        return Err(Error::arg("polarization readout needs four memories"));
    }
    if efficiencies.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::arg("readout efficiencies must lie in [0, 1]"));
    }
    // (L_u, R_u, L_l, R_l) occupations of |pol_L, pol_R⟩
    let digits = |q: usize| -> [usize; 4] {
        let (l, r) = (q / 2, q % 2);
        [1 - l, 1 - r, l, r]
    };
    let block = CMatrix::from_fn(4, 4, |i, j| lossy_element(joint, &efficiencies, &digits(i), &digits(j)));
    let p = block.trace().re;
    if !(p >= MIN_OUTCOME_PROBABILITY) {
        return Err(Error::DegenerateMeasurement {
            threshold: MIN_OUTCOME_PROBABILITY,
        });
    }
    let state = DensityMatrix::from_raw(two_qubit_space(), block)?
        .renormalized()?
        .hermitized();
    Ok(PolarizationReadout {
        state: TwoQubitDensityMatrix::new(state)?,
        coincidence_probability: p.min(1.0),
        coincidence: rng.uniform() < p,
    })
}

/// Exact single-click connection at a middle node: retrieve both middle
/// memories, interfere on a 50/50 beamsplitter, threshold detection. The
/// click effects are folded into operators on the two middle memories.
#[derive(Clone, Debug)]
pub struct SwapModel {
    dims: (usize, usize),
    effects: [CMatrix; 4],
}

impl SwapModel {
    /// `dims` and `efficiencies` of the middle memories `(B1, B2)`.
    pub fn new(dims: (usize, usize), efficiencies: (f64, f64), detectors: &(Detector, Detector)) -> Result<Self> {
        let (d1, d2) = dims;
        if d1 < 2 || d2 < 2 {
            return Err(Error::arg("middle memories need at least two levels"));
        }
        for e in [efficiencies.0, efficiencies.1] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::arg("readout efficiencies must lie in [0, 1]"));
            }
        }
        detectors.0.validate()?;
        detectors.1.validate()?;
        let f = d1 + d2 - 1;
        let u = fock::beamsplitter(f, FRAC_PI_4, 0.0);
        let keep = |t: f64, n: usize, k: usize| {
            (fock::binomial(n, k) * t.powi((n - k) as i32) * (1.0 - t).powi(k as i32)).sqrt()
        };
        let (det1, det2) = detectors;
        // D2 on the first output port, D1 on the second
        let weight = |click: Click, idx: usize| {
            let (a, b) = (idx / f, idx % f);
            let (n2, n1) = (det2.no_click_probability(a), det1.no_click_probability(b));
            match click {
                Click::None => n2 * n1,
                Click::D1 => n2 * (1.0 - n1),
                Click::D2 => (1.0 - n2) * n1,
                Click::Both => (1.0 - n2) * (1.0 - n1),
            }
        };
        let mut effects = [(); 4].map(|_| CMatrix::zeros(d1 * d2, d1 * d2));
        for k1 in 0..d1 {
            for k2 in 0..d2 {
                let mut a = CMatrix::zeros(f * f, d1 * d2);
                for n1 in k1..d1 {
                    for n2 in k2..d2 {
                        a[((n1 - k1) * f + (n2 - k2), n1 * d2 + n2)] =
                            cr(keep(efficiencies.0, n1, k1) * keep(efficiencies.1, n2, k2));
                    }
                }
                let ua = &u * a;
                for click in Click::ALL {
                    let mut weighted = ua.clone();
                    for (idx, mut row) in weighted.row_iter_mut().enumerate() {
                        row *= cr(weight(click, idx));
                    }
                    effects[click.index()] += ua.adjoint() * weighted;
                }
            }
        }
        Ok(SwapModel { dims, effects })
    }

    pub fn effect(&self, click: Click) -> &CMatrix {
        &self.effects[click.index()]
    }

    /// Unnormalized `(A, C)` state for each outcome `[none, D1, D2, both]`,
    /// given pairs `(A, B1)` and `(B2, C)`.
    pub fn branches(&self, left: &DensityMatrix, right: &DensityMatrix) -> Result<[DensityMatrix; 4]> {
        if left.space().len() != 2 || right.space().len() != 2 {
            return Err(Error::arg("swap inputs must be two-memory states"));
        }
        let (da, d1) = (left.space().dims()[0], left.space().dims()[1]);
        let (d2, dc) = (right.space().dims()[0], right.space().dims()[1]);
        if (d1, d2) != self.dims {
            return Err(Error::arg("swap model built for other memory dimensions"));
        }
        let (l, r) = (left.matrix(), right.matrix());
        let space = HilbertSpace::new(vec![da, dc], vec![left.space().kinds()[0], right.space().kinds()[1]])?;
        let mut out = [(); 4].map(|_| CMatrix::zeros(da * dc, da * dc));
        for a in 0..da {
            for a2 in 0..da {
                for b1 in 0..d1 {
                    for b1p in 0..d1 {
                        let lv = l[(a * d1 + b1, a2 * d1 + b1p)];
                        if lv == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for b2 in 0..d2 {
                            for b2p in 0..d2 {
                                let (row_b, col_b) = (b1 * d2 + b2, b1p * d2 + b2p);
                                for c in 0..dc {
                                    for c2 in 0..dc {
                                        let rv = r[(b2 * dc + c, b2p * dc + c2)];
                                        if rv == C64::new(0.0, 0.0) {
                                            continue;
                                        }
                                        let x = lv * rv;
                                        for (m, g) in out.iter_mut().zip(&self.effects) {
                                            m[(a * dc + c, a2 * dc + c2)] += g[(col_b, row_b)] * x;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut states = Vec::with_capacity(4);
        for m in out {
            states.push(DensityMatrix::from_raw(space.clone(), m)?);
        }
        Ok(states.try_into().expect("four outcomes"))
    }

    /// Samples one connection attempt with a single uniform draw.
    pub fn sample(&self, left: &DensityMatrix, right: &DensityMatrix, rng: &mut RngStream) -> Result<SwapOutcome> {
        let branches = self.branches(left, right)?;
        let probabilities = branches.clone().map(|b| b.trace().re.max(0.0));
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut click = Click::Both;
        for c in Click::ALL {
            acc += probabilities[c.index()];
            if u < acc {
                click = c;
                break;
            }
        }
        let success_probability = probabilities[1] + probabilities[2];
        let (state, effective, weight) = if click.heralds() {
            let raw = branches[click.index()].renormalized()?.hermitized();
            let (effective, weight) = single_excitation_part(&raw)?;
            (Some(raw), effective, weight)
        } else {
            (None, None, 0.0)
        };
        Ok(SwapOutcome {
            success: click.heralds(),
            click,
            success_probability,
            outcome_probabilities: probabilities,
            state,
            effective,
            single_excitation_weight: weight,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SwapOutcome {
    pub success: bool,
    pub click: Click,
    /// Exact probability of a single click.
    pub success_probability: f64,
    pub outcome_probabilities: [f64; 4],
    /// Conditional `(A, C)` state, including vacuum and multi-excitation parts.
    pub state: Option<DensityMatrix>,
    /// `state` projected onto `span{|01⟩, |10⟩}` and renormalized: the part
    /// that survives a later one-photon-per-node readout.
    pub effective: Option<TwoQubitDensityMatrix>,
    pub single_excitation_weight: f64,
}

/// Projection of a two-memory state onto `span{|01⟩, |10⟩}` with its weight.
pub fn single_excitation_part(rho: &DensityMatrix) -> Result<(Option<TwoQubitDensityMatrix>, f64)> {
    let space = rho.space();
    if space.len() != 2 {
        return Err(Error::arg("expected a two-memory state"));
    }
    let idx = [space.index_of(&[0, 1]), space.index_of(&[1, 0])];
    let m = rho.matrix();
    let weight = (m[(idx[0], idx[0])] + m[(idx[1], idx[1])]).re;
    if !(weight >= MIN_OUTCOME_PROBABILITY) {
        return Ok((None, weight.max(0.0)));
    }
    let mut block = CMatrix::zeros(4, 4);
    for (i, &r) in idx.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            block[(i + 1, j + 1)] = m[(r, c)];
        }
    }
    let state = DensityMatrix::from_raw(two_qubit_space(), block)?
        .renormalized()?
        .hermitized();
    Ok((Some(TwoQubitDensityMatrix::new(state)?), weight))
}

/// Fidelity to `(|01⟩ + e^{iθ}|10⟩)/√2` maximized over `θ`:
/// `(ρ_{01,01} + ρ_{10,10})/2 + |ρ_{01,10}|`.
pub fn psi_fidelity(rho: &DensityMatrix) -> Result<f64> {
    let space = rho.space();
    if space.len() != 2 || space.dims().iter().any(|&d| d < 2) {
        return Err(Error::arg("expected a two-memory state"));
    }
    let (i, j) = (space.index_of(&[0, 1]), space.index_of(&[1, 0]));
    let m = rho.matrix();
    Ok(((m[(i, i)].re + m[(j, j)].re) / 2.0 + m[(i, j)].norm()).clamp(0.0, 1.0))
}

/// Connects `(A, B1)` and `(B2, C)` at node B. A failed connection consumes
/// both pairs; the caller decides what to regenerate.
pub fn entanglement_swap(
    pair_ab: Option<&DensityMatrix>,
    pair_bc: Option<&DensityMatrix>,
    readout: (f64, f64),
    detectors: &(Detector, Detector),
    rng: &mut RngStream,
) -> Result<SwapOutcome> {
    let (Some(left), Some(right)) = (pair_ab, pair_bc) else {
        return Err(Error::ProtocolState(
            "entanglement swap needs both pairs present".into(),
        ));
    };
    if left.space().len() != 2 || right.space().len() != 2 {
        return Err(Error::arg("swap inputs must be two-memory states"));
    }
    let dims = (left.space().dims()[1], right.space().dims()[0]);
    SwapModel::new(dims, readout, detectors)?.sample(left, right, rng)
}

#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub attempt: HeraldAttempt,
    /// Conditional `(atom, collective spin)` state.
    pub state: DensityMatrix,
    /// `state` on the `{0, 1}` levels of both, and the weight kept.
    pub qubits: TwoQubitDensityMatrix,
    pub qubit_weight: f64,
    pub concurrence: f64,
}

/// Heralds a shared excitation between a cavity atom (left endpoint) and an
/// ensemble (right endpoint) of `link`.
pub fn hybrid_entangle(
    link: &HeraldLink,
    nodes: &mut MemoryBank,
    config: &ProtocolConfig,
    start: f64,
    rng: &RngStream,
    log: Option<&mut RunLog>,
) -> Result<HybridOutcome> {
    if link.decoherence[0].is_some() || link.decoherence[1].is_none() {
        return Err(Error::Config(format!(
            "link `{}` must run from a cavity node to an ensemble",
            link.id
        )));
    }
    let attempt = attempt_until_heralded(link, nodes, config, start, rng, log)?;
    let state = attempt.outcome.conditional_state.clone().expect("heralded");
    let (qubits, qubit_weight) = restrict_to_qubits(&state, 0, 1)?;
    let concurrence = crate::verify::concurrence(&qubits)?;
    Ok(HybridOutcome {
        attempt,
        state,
        qubits,
        qubit_weight,
        concurrence,
    })
}

/// Memory-qubit transfer between the two cavity nodes joined by a direct
/// link, using the sender's qubit angles and both nodes' pulses.
pub fn cavity_transfer(topology: &NetworkTopology) -> Result<(String, String, TransferOutput)> {
    let direct = topology.direct_links()?;
    let [(a, b, link)] = direct.as_slice() else {
        return Err(Error::Config("cavity transfer needs exactly one direct link".into()));
    };
    let (pa, pb) = (topology.cavity(a)?, topology.cavity(b)?);
    let out_a = pa.pulse.build(pa.cavity.g, Direction::Emit)?;
    let in_b = pb.pulse.build(pb.cavity.g, Direction::Absorb)?;
    let mode = if pa.map_mode == MapMode::Integrated || pb.map_mode == MapMode::Integrated {
        MapMode::Integrated
    } else {
        MapMode::Ideal
    };
    let qubit = crate::verify::qubit_state(pa.qubit.0, pa.qubit.1);
    let state = StateVector::new(memory_qubit_space(), qubit.amplitudes().clone())?;
    let out = transfer_node_to_node(
        &state,
        (&out_a, &in_b),
        &link.link,
        &pa.cavity,
        &pb.cavity,
        mode,
        &pa.integration,
    )?;
    Ok((a.node.clone(), b.node.clone(), out))
}

/// Classical and quantum state-space dimensions of `k` nodes with `n`
/// qubits each: `k·2ⁿ` and `2^(k·n)`.
pub fn connectivity_dimension(k_nodes: u64, n_qubits: u64) -> Result<(BigUint, BigUint)> {
    if k_nodes == 0 || n_qubits == 0 {
        return Err(Error::arg("need at least one node and one qubit"));
    }
    let per_node = BigUint::from(1u8) << n_qubits;
    let quantum = BigUint::from(1u8) << (k_nodes * n_qubits);
    Ok((per_node * k_nodes, quantum))
}

/// `E[max(N_1, …, N_m)]` for independent geometric trial counts with success
/// probabilities `p`, by inclusion–exclusion.
pub fn expected_max_geometric(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.len() > 20 || p.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::arg("need 1 to 20 probabilities in (0, 1]"));
    }
    let mut total = 0.0;
    for mask in 1u32..(1 << p.len()) {
        let fail: f64 = (0..p.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| 1.0 - p[i])
            .product();
        let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
        total += sign / (1.0 - fail);
    }
    Ok(total)
}
