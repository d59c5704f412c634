use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Click, HeraldSetup, OpticalLink};
use crate::ensemble::retrieve;
use crate::error::{Error, Result};
use crate::qstate::{DensityMatrix, StateVector, C64};
use crate::rng::RngStream;
use crate::verify::{concurrence, max_chsh, restrict_to_qubits};

use super::config::{ProtocolConfig, Scenario};
use super::events::{sort_events, Event, EventKind};
use super::protocol::{
    attempt_until_heralded, cavity_transfer, expected_max_geometric, hybrid_entangle, memory_bank,
    polarization_readout, prepare_node_qubit, prepare_pairs, psi_fidelity, single_excitation_part, HeraldLink,
    MemoryBank, RunLog, SwapModel, TrialRecord,
};
use super::topology::{Member, NetworkTopology, NodeKind, Station};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "QNET_SIM_WORKERS";

/// Concurrence reported for the two-ensemble experiment, with its uncertainty.
pub const PUBLISHED_CONCURRENCE: (f64, f64) = (0.9, 0.3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MetricSummary {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len() as u64,
        }
    }

    pub fn std_error(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub id: String,
    pub endpoints: (String, String),
    /// Exact probabilities of `[none, D1, D2, both]` per trial.
    pub outcome_probabilities: [f64; 4],
    pub herald_probability: f64,
    pub expected_trials: f64,
    pub latency: f64,
    pub heralds: u64,
    pub total_trials: u64,
    pub mean_trials: f64,
    pub trials_std: f64,
    pub empirical_herald_probability: f64,
    /// Heralds per second of continuous attempting, from the mean trial count.
    pub herald_rate: f64,
    /// Trials to success → number of heralds.
    pub trials_to_success: BTreeMap<u64, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Node performing the connection.
    pub node: String,
    /// Success probability for freshly heralded D1 pairs.
    pub analytic_success_probability: f64,
    /// Mean of the exact success probability over the sampled attempts.
    pub mean_success_probability: f64,
    pub attempts: u64,
    pub successes: u64,
}

/// End-to-end rates of a swap chain and of one link spanning the same total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateComparison {
    pub total_transmissivity: f64,
    pub chain_mean_time: f64,
    pub chain_mean_time_std_error: f64,
    pub chain_rate: f64,
    /// `E[max_i N_i]·period + latency`, divided by the product of stage
    /// success probabilities.
    pub analytic_chain_mean_time: f64,
    pub analytic_chain_rate: f64,
    pub direct_herald_probability: f64,
    pub analytic_direct_mean_time: f64,
    pub analytic_direct_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_mean_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub published_concurrence: f64,
    pub published_concurrence_uncertainty: f64,
    /// Concurrence of the stored spin pairs on their `{0, 1}` levels.
    pub simulated_spin_concurrence: f64,
    /// Concurrence of the retrieved fields on their `{0, 1}` photon levels.
    pub simulated_field_concurrence: f64,
    pub simulated_polarization_concurrence: f64,
    pub simulated_chsh_max: f64,
    pub published_bell_violation: bool,
    pub simulated_bell_violation: bool,
    pub imperfection_budget: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub repetitions: u64,
    pub config: ProtocolConfig,
    pub topology: NetworkTopology,
    pub links: Vec<LinkStats>,
    pub metrics: BTreeMap<String, MetricSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_comparison: Option<RateComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceComparison>,
    pub events: Vec<Event>,
    /// Write trials, when `record_trials` is set. Written separately as CSV.
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
}

struct SwapStage {
    node: String,
    model: SwapModel,
}

// built once per run
#[allow(clippy::large_enum_variant)]
enum Plan {
    Herald {
        link: HeraldLink,
    },
    NodePair {
        upper: HeraldLink,
        lower: HeraldLink,
        readout: [f64; 4],
    },
    Chain {
        links: Vec<HeraldLink>,
        stages: Vec<SwapStage>,
        direct: HeraldLink,
        total_transmissivity: f64,
    },
    Hybrid {
        link: HeraldLink,
    },
    Transfer {
        metrics: Vec<(String, f64)>,
        events: Vec<(f64, String, String)>,
    },
}

impl Plan {
    fn links(&self) -> Vec<&HeraldLink> {
        match self {
            Plan::Herald { link } | Plan::Hybrid { link } => vec![link],
            Plan::NodePair { upper, lower, .. } => vec![upper, lower],
            Plan::Chain { links, .. } => links.iter().collect(),
            Plan::Transfer { .. } => Vec::new(),
        }
    }
}

#[derive(Default)]
struct RepResult {
    metrics: Vec<(String, f64)>,
    /// (link index, trials) per herald
    heralds: Vec<(usize, u64)>,
    /// (stage, exact success probability, success) per connection attempt
    swaps: Vec<(usize, f64, bool)>,
    log: RunLog,
}

/// Root stream of repetition `rep`. Inside it, link `id` uses
/// `substream_named(id)`, a connecting node its own id, readout `"readout"`
/// and the direct comparison link `"direct"`; the `c`-th sequence on any of
/// these is `.substream(c)`.
pub fn repetition_stream(seed: u64, rep: u64) -> RngStream {
    RngStream::new(seed).substream(rep)
}

pub fn worker_cap_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n: &usize| n > 0)
}

/// Runs the configured scenario. Repetitions may run in parallel (see
/// [`WORKERS_ENV`]); the report does not depend on the worker count.
pub fn run_simulation(topology: &NetworkTopology, config: &ProtocolConfig) -> Result<SimReport> {
    run_simulation_with_workers(topology, config, worker_cap_from_env())
}

pub fn run_simulation_with_workers(
    topology: &NetworkTopology,
    config: &ProtocolConfig,
    workers: Option<usize>,
) -> Result<SimReport> {
    config.validate()?;
    topology.validate()?;
    let effective = topology.with_overrides(&config.overrides);
    effective
        .validate()
        .map_err(|e| Error::Config(format!("after overrides: {e}")))?;
    let plan = build_plan(&effective, config)?;
    let run = |rep: u64| run_repetition(&plan, &effective, config, rep);
    let results: Vec<Result<RepResult>> = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| (0..config.repetitions).into_par_iter().map(run).collect()),
        None => (0..config.repetitions).into_par_iter().map(run).collect(),
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&plan, topology, config, results))
}

fn build_plan(topology: &NetworkTopology, config: &ProtocolConfig) -> Result<Plan> {
    let stations = topology.stations()?;
    match config.scenario {
        Scenario::HeraldOneLink => {
            let [station] = stations.as_slice() else {
                return Err(Error::Config(
                    "herald-one-link needs exactly one detector station".into(),
                ));
            };
            for e in [&station.endpoints.0, &station.endpoints.1] {
                topology.ensemble(e)?;
            }
            Ok(Plan::Herald {
                link: HeraldLink::from_station(topology, station)?,
            })
        }
        Scenario::NodePairBell => node_pair_plan(topology, &stations),
        Scenario::SwapChain => chain_plan(topology, &stations),
        Scenario::Hybrid => {
            let [station] = stations.as_slice() else {
                return Err(Error::Config("hybrid needs exactly one detector station".into()));
            };
            let is_cavity = |node: &str| matches!(topology.node(node).map(|n| &n.kind), Some(NodeKind::Cavity { .. }));
            let station = match (
                is_cavity(&station.endpoints.0.node),
                is_cavity(&station.endpoints.1.node),
            ) {
                (true, false) => station.clone(),
                (false, true) => station.flipped(),
                _ => {
                    return Err(Error::Config(
                        "hybrid needs one cavity node and one ensemble at the station".into(),
                    ))
                }
            };
            topology.ensemble(&station.endpoints.1)?;
            Ok(Plan::Hybrid {
                link: HeraldLink::from_station(topology, &station)?,
            })
        }
        Scenario::CavityTransfer => {
            if !stations.is_empty() {
                return Err(Error::Config("cavity-transfer takes no detector stations".into()));
            }
            let (a, b, out) = cavity_transfer(topology)?;
            let link = &topology.direct_links()?[0].2;
            let (pa, pb) = (
                topology.cavity(&topology.resolve(&a)?)?,
                topology.cavity(&topology.resolve(&b)?)?,
            );
            let emit = pa.pulse.build(pa.cavity.g, crate::cavity::Direction::Emit)?;
            let absorb = pb.pulse.build(pb.cavity.g, crate::cavity::Direction::Absorb)?;
            let t_emit = emit.duration();
            let t_store = t_emit + link.link.travel_time() + absorb.duration();
            let metrics = vec![
                ("fidelity".to_string(), out.fidelity),
                ("success_probability".to_string(), out.success_probability),
                ("conditional_fidelity".to_string(), out.conditional_fidelity),
                ("transfer_phase".to_string(), out.transfer_phase),
                ("transfer_time".to_string(), t_store),
            ];
            let events = vec![
                (t_emit, a.clone(), format!("emitted toward `{b}`")),
                (t_store, b.clone(), format!("stored, fidelity {:.6}", out.fidelity)),
            ];
            Ok(Plan::Transfer { metrics, events })
        }
    }
}

fn node_pair_plan(topology: &NetworkTopology, stations: &[Station]) -> Result<Plan> {
    let mismatch =
        || Error::Config("node-pair-bell needs two ensemble-pair nodes joined by an upper and a lower station".into());
    if stations.len() != 2 {
        return Err(mismatch());
    }
    let pairs: Vec<&str> = topology
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::EnsemblePair { .. }))
        .map(|n| n.id.as_str())
        .collect();
    let [left, right] = pairs.as_slice() else {
        return Err(mismatch());
    };
    let mut upper = None;
    let mut lower = None;
    for s in stations {
        let s = if s.endpoints.0.node == *left {
            s.clone()
        } else {
            s.flipped()
        };
        let (a, b) = &s.endpoints;
        if a.node != *left || b.node != *right || a.member != b.member {
            return Err(mismatch());
        }
        match a.member {
            Some(Member::Upper) => upper = Some(s),
            Some(Member::Lower) => lower = Some(s),
            None => return Err(mismatch()),
        }
    }
    let (Some(upper), Some(lower)) = (upper, lower) else {
        return Err(mismatch());
    };
    let eff = |s: &Station, i: usize| -> Result<f64> {
        let e = if i == 0 { &s.endpoints.0 } else { &s.endpoints.1 };
        Ok(topology.ensemble(e)?.readout_efficiency)
    };
    let readout = [eff(&upper, 0)?, eff(&upper, 1)?, eff(&lower, 0)?, eff(&lower, 1)?];
    Ok(Plan::NodePair {
        upper: HeraldLink::from_station(topology, &upper)?,
        lower: HeraldLink::from_station(topology, &lower)?,
        readout,
    })
}

/// Orders the stations of a linear chain from the end node listed first.
fn chain_stations(topology: &NetworkTopology, stations: &[Station]) -> Result<Vec<Station>> {
    let mismatch = |why: &str| Error::Config(format!("swap-chain: {why}"));
    if stations.len() < 2 {
        return Err(mismatch("needs at least two detector stations"));
    }
    let mut degree: BTreeMap<&str, usize> = BTreeMap::new();
    for s in stations {
        for e in [&s.endpoints.0, &s.endpoints.1] {
            topology.ensemble(e)?;
            *degree.entry(e.node.as_str()).or_default() += 1;
        }
        if s.endpoints.0.node == s.endpoints.1.node {
            return Err(mismatch("a station joins two memories of one node"));
        }
    }
    let start = topology
        .nodes
        .iter()
        .find(|n| degree.get(n.id.as_str()) == Some(&1))
        .ok_or_else(|| mismatch("no end node"))?;
    let mut used = vec![false; stations.len()];
    let mut ordered = Vec::new();
    let mut current = start.id.clone();
    while ordered.len() < stations.len() {
        let next = stations
            .iter()
            .enumerate()
            .find(|(i, s)| !used[*i] && (s.endpoints.0.node == current || s.endpoints.1.node == current));
        let Some((i, s)) = next else {
            return Err(mismatch("stations do not form a single chain"));
        };
        used[i] = true;
        let s = if s.endpoints.0.node == current {
            s.clone()
        } else {
            s.flipped()
        };
        current = s.endpoints.1.node.clone();
        ordered.push(s);
    }
    for w in ordered.windows(2) {
        let node = &w[0].endpoints.1.node;
        if !matches!(
            topology.node(node).map(|n| &n.kind),
            Some(NodeKind::EnsemblePair { .. })
        ) {
            return Err(mismatch("connecting nodes must be ensemble pairs"));
        }
        if degree[node.as_str()] != 2 {
            return Err(mismatch("connecting nodes need exactly two links"));
        }
    }
    if ordered[0].endpoints.0.node == ordered.last().unwrap().endpoints.1.node {
        return Err(mismatch("the chain closes on itself"));
    }
    Ok(ordered)
}

fn chain_plan(topology: &NetworkTopology, stations: &[Station]) -> Result<Plan> {
    let ordered = chain_stations(topology, stations)?;
    let links = ordered
        .iter()
        .map(|s| HeraldLink::from_station(topology, s))
        .collect::<Result<Vec<_>>>()?;
    let mut stages = Vec::new();
    for w in ordered.windows(2) {
        let (b1, b2) = (&w[0].endpoints.1, &w[1].endpoints.0);
        let (p1, p2) = (topology.ensemble(b1)?, topology.ensemble(b2)?);
        let Some(NodeKind::EnsemblePair { detectors, .. }) = topology.node(&b1.node).map(|n| &n.kind) else {
            unreachable!("checked by chain_stations");
        };
        stages.push(SwapStage {
            node: b1.node.clone(),
            model: SwapModel::new(
                (p1.mode_dim(), p2.mode_dim()),
                (p1.readout_efficiency, p2.readout_efficiency),
                detectors,
            )?,
        });
    }
    // one station halfway, each arm carrying half the total loss in dB
    let arms: Vec<&OpticalLink> = ordered
        .iter()
        .flat_map(|s| [&s.setup.links.0, &s.setup.links.1])
        .collect();
    let total_transmissivity: f64 = arms.iter().map(|l| l.transmissivity()).product();
    let total_length: f64 = arms.iter().map(|l| l.length).sum();
    let arm_t = total_transmissivity.sqrt();
    let arm_length = total_length / 2.0;
    let attenuation = if arm_length > 0.0 {
        -10.0 * arm_t.log10() / (arm_length / 1000.0)
    } else {
        0.0
    };
    let arm = OpticalLink {
        length: arm_length,
        attenuation: attenuation.max(0.0),
        extra_phase: 0.0,
        phase_jitter_std: arms[0].phase_jitter_std,
    };
    let (first, last) = (&ordered[0], ordered.last().unwrap());
    let direct_station = Station {
        id: "direct".into(),
        endpoints: (first.endpoints.0.clone(), last.endpoints.1.clone()),
        setup: HeraldSetup {
            links: (arm.clone(), arm),
            detectors: first.setup.detectors,
        },
    };
    Ok(Plan::Chain {
        direct: HeraldLink::from_station(topology, &direct_station)?,
        links,
        stages,
        total_transmissivity,
    })
}

fn herald_target_fidelity(state: &DensityMatrix, click: Click, eta1: f64) -> Result<f64> {
    let sign = click.sign().unwrap_or(1.0);
    let space = state.space().clone();
    let mut amps = nalgebra::DVector::from_element(space.total_dim(), C64::new(0.0, 0.0));
    amps[space.index_of(&[0, 1])] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    amps[space.index_of(&[1, 0])] = C64::from_polar(sign * std::f64::consts::FRAC_1_SQRT_2, eta1);
    state.fidelity_pure(&StateVector::new(space, amps)?)
}

fn qubit_concurrence(state: &DensityMatrix) -> Result<f64> {
    let (q, _) = restrict_to_qubits(state, 0, 1)?;
    concurrence(&q)
}

fn run_repetition(plan: &Plan, topology: &NetworkTopology, config: &ProtocolConfig, rep: u64) -> Result<RepResult> {
    let root = repetition_stream(config.rng_seed, rep);
    let mut out = RepResult {
        log: RunLog::new(rep, config.record_trials),
        ..Default::default()
    };
    let metric = |out: &mut RepResult, name: &str, v: f64| out.metrics.push((name.to_string(), v));
    match plan {
        Plan::Herald { link } => {
            let mut nodes = memory_bank(topology)?;
            let stream = root.substream_named(&link.id).substream(0);
            let att = attempt_until_heralded(link, &mut nodes, config, 0.0, &stream, Some(&mut out.log))?;
            let state = att.outcome.conditional_state.as_ref().expect("heralded");
            let t = att.elapsed;
            out.log.event(
                t,
                &link.id,
                EventKind::Herald,
                format!("{:?} after {} trials", att.outcome.which_detector, att.n_trials),
            );
            out.heralds.push((0, att.n_trials));
            metric(&mut out, "trials", att.n_trials as f64);
            metric(&mut out, "herald_time", t);
            metric(
                &mut out,
                "fidelity",
                herald_target_fidelity(state, att.outcome.which_detector, link.model.eta1())?,
            );
            metric(&mut out, "concurrence", qubit_concurrence(state)?);
            metric(
                &mut out,
                "d1_fraction",
                (att.outcome.which_detector == Click::D1) as u8 as f64,
            );
        }
        Plan::NodePair { upper, lower, readout } => {
            let mut nodes = memory_bank(topology)?;
            let q = prepare_node_qubit(upper, lower, &mut nodes, config, 0.0, &root, &mut out.log)?;
            out.heralds.extend(q.prepared.herald_trials.iter().copied());
            let mut rng = root.substream_named("readout");
            let pol = polarization_readout(&q.joint, *readout, &mut rng)?;
            out.log.event(
                q.ready_time,
                "readout",
                EventKind::Readout,
                format!("coincidence {}", pol.coincidence),
            );
            let heralds: Vec<f64> = q.prepared.pairs.iter().map(|p| p.heralded_at).collect();
            metric(&mut out, "preparation_time", q.preparation_time);
            metric(
                &mut out,
                "storage_time",
                q.ready_time - heralds.iter().copied().fold(f64::INFINITY, f64::min),
            );
            metric(&mut out, "restarts", q.prepared.restarts as f64);
            metric(&mut out, "trials_upper", q.prepared.trials[0] as f64);
            metric(&mut out, "trials_lower", q.prepared.trials[1] as f64);
            for (name, state, eff) in [
                ("upper", &q.prepared.states[0], [readout[0], readout[1]]),
                ("lower", &q.prepared.states[1], [readout[2], readout[3]]),
            ] {
                metric(&mut out, &format!("spin_concurrence_{name}"), qubit_concurrence(state)?);
                let fields = retrieve(&retrieve(state, 0, eff[0])?, 1, eff[1])?;
                metric(
                    &mut out,
                    &format!("field_concurrence_{name}"),
                    qubit_concurrence(&fields)?,
                );
            }
            metric(&mut out, "polarization_concurrence", concurrence(&pol.state)?);
            metric(&mut out, "chsh_max", max_chsh(&pol.state));
            metric(&mut out, "coincidence_probability", pol.coincidence_probability);
            metric(&mut out, "coincidence", pol.coincidence as u8 as f64);
        }
        Plan::Chain {
            links, stages, direct, ..
        } => {
            let mut nodes = memory_bank(topology)?;
            let streams: Vec<RngStream> = links.iter().map(|l| root.substream_named(&l.id)).collect();
            let mut t = 0.0;
            let mut cycle = 0u64;
            let mut total_trials = 0u64;
            let final_state = loop {
                let rngs: Vec<RngStream> = streams.iter().map(|s| s.substream(cycle)).collect();
                let prepared = prepare_pairs(links, &mut nodes, config, t, &rngs, &mut out.log)?;
                out.heralds.extend(prepared.herald_trials.iter().copied());
                total_trials += prepared.trials.iter().sum::<u64>();
                t = prepared.ready_time;
                let mut current = Some(prepared.states[0].clone());
                for (j, stage) in stages.iter().enumerate() {
                    let left = current.take().expect("present while connecting");
                    let mut rng = root.substream_named(&stage.node).substream(cycle);
                    let o = stage.model.sample(&left, &prepared.states[j + 1], &mut rng)?;
                    out.swaps.push((j, o.success_probability, o.success));
                    if o.success {
                        out.log
                            .event(t, &stage.node, EventKind::SwapSuccess, format!("{:?}", o.click));
                        current = o.state;
                    } else {
                        out.log
                            .event(t, &stage.node, EventKind::SwapFailure, format!("{:?}", o.click));
                        break;
                    }
                }
                // middle memories were read out; failed pairs are discarded
                for n in nodes.values_mut() {
                    n.reset();
                }
                if let Some(state) = current {
                    break state;
                }
                cycle += 1;
                if cycle > config.max_restarts {
                    return Err(Error::ProtocolState(format!(
                        "no end-to-end pair after {cycle} connection cycles"
                    )));
                }
            };
            metric(&mut out, "end_to_end_time", t);
            metric(&mut out, "cycles", (cycle + 1) as f64);
            metric(&mut out, "total_trials", total_trials as f64);
            metric(&mut out, "fidelity", psi_fidelity(&final_state)?);
            let (effective, weight) = single_excitation_part(&final_state)?;
            metric(&mut out, "single_excitation_weight", weight);
            if let Some(eff) = effective {
                metric(&mut out, "effective_fidelity", psi_fidelity(eff.as_density())?);
                metric(&mut out, "effective_concurrence", concurrence(&eff)?);
            }
            if config.compare_direct {
                let stream = root.substream_named("direct").substream(0);
                let att = attempt_until_heralded(direct, &mut MemoryBank::new(), config, 0.0, &stream, None)?;
                metric(&mut out, "direct_time", att.elapsed);
            }
        }
        Plan::Hybrid { link } => {
            let mut nodes = memory_bank(topology)?;
            let stream = root.substream_named(&link.id).substream(0);
            let h = hybrid_entangle(link, &mut nodes, config, 0.0, &stream, Some(&mut out.log))?;
            out.log.event(
                h.attempt.elapsed,
                &link.id,
                EventKind::Herald,
                format!(
                    "{:?} after {} trials",
                    h.attempt.outcome.which_detector, h.attempt.n_trials
                ),
            );
            out.heralds.push((0, h.attempt.n_trials));
            let m = h.qubits.matrix();
            let (ens, atom) = (m[(1, 1)].re, m[(2, 2)].re);
            metric(&mut out, "trials", h.attempt.n_trials as f64);
            metric(&mut out, "herald_time", h.attempt.elapsed);
            metric(&mut out, "concurrence", h.concurrence);
            metric(&mut out, "qubit_weight", h.qubit_weight);
            metric(&mut out, "fidelity", psi_fidelity(h.qubits.as_density())?);
            metric(
                &mut out,
                "ensemble_excitation_fraction",
                if ens + atom > 0.0 { ens / (ens + atom) } else { 0.0 },
            );
        }
        Plan::Transfer { metrics, events } => {
            for (name, v) in metrics {
                metric(&mut out, name, *v);
            }
            for (t, node, detail) in events {
                out.log.event(*t, node, EventKind::Transfer, detail.clone());
            }
        }
    }
    Ok(out)
}

fn aggregate(plan: &Plan, topology: &NetworkTopology, config: &ProtocolConfig, results: Vec<RepResult>) -> SimReport {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let plan_links = plan.links();
    let mut per_link: Vec<Vec<u64>> = vec![Vec::new(); plan_links.len()];
    let mut swaps: Vec<Vec<(f64, bool)>> = match plan {
        Plan::Chain { stages, .. } => vec![Vec::new(); stages.len()],
        _ => Vec::new(),
    };
    let mut events = Vec::new();
    let mut trials = Vec::new();
    for r in results {
        for (name, v) in r.metrics {
            values.entry(name).or_default().push(v);
        }
        for (i, n) in r.heralds {
            per_link[i].push(n);
        }
        for (j, p, s) in r.swaps {
            swaps[j].push((p, s));
        }
        events.extend(r.log.events);
        trials.extend(r.log.trials);
    }
    sort_events(&mut events);
    let metrics: BTreeMap<String, MetricSummary> = values
        .iter()
        .map(|(k, v)| (k.clone(), MetricSummary::from_values(v)))
        .collect();
    let links = plan_links
        .iter()
        .zip(&per_link)
        .map(|(l, counts)| link_stats(l, counts, config))
        .collect();
    let mut stages = Vec::new();
    let mut rate_comparison = None;
    if let Plan::Chain {
        links,
        stages: plan_stages,
        direct,
        total_transmissivity,
    } = plan
    {
        let analytic = analytic_stage_probabilities(links, plan_stages);
        for (j, stage) in plan_stages.iter().enumerate() {
            let s = &swaps[j];
            stages.push(StageStats {
                node: stage.node.clone(),
                analytic_success_probability: analytic[j],
                mean_success_probability: if s.is_empty() {
                    0.0
                } else {
                    s.iter().map(|x| x.0).sum::<f64>() / s.len() as f64
                },
                attempts: s.len() as u64,
                successes: s.iter().filter(|x| x.1).count() as u64,
            });
        }
        let time = &metrics["end_to_end_time"];
        let probs: Vec<f64> = links.iter().map(|l| l.model.herald_probability()).collect();
        let latency = links.iter().map(|l| l.latency).fold(0.0, f64::max);
        let p_connect: f64 = analytic.iter().product();
        let analytic_time = expected_max_geometric(&probs)
            .map(|m| (m * config.attempt_period + latency) / p_connect)
            .unwrap_or(f64::INFINITY);
        let pd = direct.model.herald_probability();
        let direct_time = config.attempt_period / pd + direct.latency;
        let measured_direct = metrics.get("direct_time").map(|m| m.mean);
        rate_comparison = Some(RateComparison {
            total_transmissivity: *total_transmissivity,
            chain_mean_time: time.mean,
            chain_mean_time_std_error: time.std_error(),
            chain_rate: 1.0 / time.mean,
            analytic_chain_mean_time: analytic_time,
            analytic_chain_rate: 1.0 / analytic_time,
            direct_herald_probability: pd,
            analytic_direct_mean_time: direct_time,
            analytic_direct_rate: 1.0 / direct_time,
            direct_mean_time: measured_direct,
            direct_rate: measured_direct.map(|t| 1.0 / t),
        });
    }
    let reference = match plan {
        Plan::NodePair { upper, .. } => Some(reference_comparison(&metrics, topology, config, upper)),
        _ => None,
    };
    SimReport {
        scenario: config.scenario,
        seed: config.rng_seed,
        repetitions: config.repetitions,
        config: config.clone(),
        topology: topology.clone(),
        links,
        metrics,
        stages,
        rate_comparison,
        reference,
        events,
        trials,
    }
}

fn link_stats(link: &HeraldLink, counts: &[u64], config: &ProtocolConfig) -> LinkStats {
    let p = link.model.herald_probability();
    let values: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let summary = if values.is_empty() {
        MetricSummary {
            mean: 0.0,
            std: 0.0,
            min: 0.0,
            max: 0.0,
            count: 0,
        }
    } else {
        MetricSummary::from_values(&values)
    };
    let total: u64 = counts.iter().sum();
    let mut hist = BTreeMap::new();
    for &n in counts {
        *hist.entry(n).or_insert(0u64) += 1;
    }
    let cycle = summary.mean * config.attempt_period + link.latency;
    LinkStats {
        id: link.id.clone(),
        endpoints: (link.endpoints.0.label(), link.endpoints.1.label()),
        outcome_probabilities: link.model.outcome_probabilities(),
        herald_probability: p,
        expected_trials: if p > 0.0 { 1.0 / p } else { f64::MAX },
        latency: link.latency,
        heralds: counts.len() as u64,
        total_trials: total,
        mean_trials: summary.mean,
        trials_std: summary.std,
        empirical_herald_probability: if total > 0 {
            counts.len() as f64 / total as f64
        } else {
            0.0
        },
        herald_rate: if cycle > 0.0 { 1.0 / cycle } else { 0.0 },
        trials_to_success: hist,
    }
}

/// Connection probabilities for freshly heralded D1 pairs, stage by stage.
fn analytic_stage_probabilities(links: &[HeraldLink], stages: &[SwapStage]) -> Vec<f64> {
    let fresh = |l: &HeraldLink| l.model.conditional_state(Click::D1).cloned();
    let mut out = Vec::new();
    let mut current = links.first().and_then(fresh);
    for (j, stage) in stages.iter().enumerate() {
        let (Some(left), Some(right)) = (current.take(), fresh(&links[j + 1])) else {
            out.push(0.0);
            continue;
        };
        match stage.model.branches(&left, &right) {
            Ok(b) => {
                let p1 = b[1].trace().re;
                let p = p1 + b[2].trace().re;
                out.push(p);
                current = if p1 > 0.0 { b[1].renormalized().ok() } else { None };
            }
            Err(_) => out.push(0.0),
        }
    }
    out
}

fn reference_comparison(
    metrics: &BTreeMap<String, MetricSummary>,
    topology: &NetworkTopology,
    config: &ProtocolConfig,
    upper: &HeraldLink,
) -> ReferenceComparison {
    let mean = |k: &str| metrics.get(k).map(|m| m.mean).unwrap_or(0.0);
    let mut budget = BTreeMap::new();
    if let Ok(p) = topology.ensemble(&upper.endpoints.0) {
        budget.insert("p_excite".to_string(), p.p_excite);
        budget.insert("readout_efficiency".to_string(), p.readout_efficiency);
        budget.insert("memory_lifetime".to_string(), p.memory_lifetime);
        budget.insert(
            "dephasing_lifetime".to_string(),
            p.dephasing_lifetime.unwrap_or(p.memory_lifetime),
        );
        budget.insert("fock_cutoff".to_string(), p.fock_cutoff as f64);
    }
    if let Ok(stations) = topology.stations() {
        if let Some(s) = stations.iter().find(|s| s.id == upper.id) {
            let d = s.setup.detectors.0;
            budget.insert("detector_efficiency".to_string(), d.efficiency);
            budget.insert("dark_count_prob".to_string(), d.dark_count_prob);
            budget.insert("link_transmissivity".to_string(), s.setup.links.0.transmissivity());
            budget.insert("phase_jitter_std".to_string(), s.setup.links.0.phase_jitter_std);
        }
    }
    budget.insert("attempt_period".to_string(), config.attempt_period);
    if let Some(b) = config.memory_budget {
        budget.insert("memory_budget".to_string(), b);
    }
    budget.insert("mean_storage_time".to_string(), mean("storage_time"));
    let chsh = mean("chsh_max");
    ReferenceComparison {
        published_concurrence: PUBLISHED_CONCURRENCE.0,
        published_concurrence_uncertainty: PUBLISHED_CONCURRENCE.1,
        simulated_spin_concurrence: (mean("spin_concurrence_upper") + mean("spin_concurrence_lower")) / 2.0,
        simulated_field_concurrence: (mean("field_concurrence_upper") + mean("field_concurrence_lower")) / 2.0,
        simulated_polarization_concurrence: mean("polarization_concurrence"),
        simulated_chsh_max: chsh,
        published_bell_violation: true,
        simulated_bell_violation: chsh > 2.0,
        imperfection_budget: budget,
    }
}
