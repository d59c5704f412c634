use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cavity::{CavityParams, Direction, IntegrationSettings, MapMode, PulseSpec};
use crate::channel::{Detector, HeraldSetup, OpticalLink};
use crate::ensemble::EnsembleParams;
use crate::error::{Error, Result};

use super::config::Overrides;

fn ideal_detectors() -> (Detector, Detector) {
    (Detector::ideal(), Detector::ideal())
}

fn ideal_map() -> MapMode {
    MapMode::Ideal
}

/// A single atom in a cavity, used as a Raman emitter (hybrid scheme) or as
/// a memory qubit for node-to-node transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityNodeParams {
    pub cavity: CavityParams,
    pub pulse: PulseSpec,
    #[serde(default = "ideal_map")]
    pub map_mode: MapMode,
    #[serde(default)]
    pub integration: IntegrationSettings,
    /// Probability that a drive pulse flips the atom and puts one photon in
    /// the cavity mode.
    #[serde(default)]
    pub emission_probability: f64,
    #[serde(default)]
    pub emission_phase: f64,
    /// Memory qubit `cos θ |b⟩ + e^{iφ} sin θ |a⟩` sent by a transfer, as (θ, φ).
    #[serde(default = "default_qubit")]
    pub qubit: (f64, f64),
}

fn default_qubit() -> (f64, f64) {
    (std::f64::consts::FRAC_PI_4, 0.0)
}

impl CavityNodeParams {
    pub fn validate(&self) -> Result<()> {
        self.cavity.validate_dynamics()?;
        self.pulse.build(self.cavity.g, Direction::Emit)?;
        if !(0.0..=1.0).contains(&self.emission_probability) {
            return Err(Error::arg("emission_probability must lie in [0, 1]"));
        }
        if !self.emission_phase.is_finite() || !self.qubit.0.is_finite() || !self.qubit.1.is_finite() {
            return Err(Error::arg("cavity node angles must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NodeKind {
    Ensemble {
        params: EnsembleParams,
    },
    /// Two ensembles `u` and `l` at one site; together they hold one qubit.
    EnsemblePair {
        upper: EnsembleParams,
        lower: EnsembleParams,
        /// Detectors used when the node performs an entanglement swap.
        #[serde(default = "ideal_detectors")]
        detectors: (Detector, Detector),
    },
    Cavity {
        params: CavityNodeParams,
    },
    DetectorStation {
        #[serde(default = "ideal_detectors")]
        detectors: (Detector, Detector),
    },
}

impl NodeKind {
    pub fn is_station(&self) -> bool {
        matches!(self, NodeKind::DetectorStation { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
}

/// Fiber between two endpoints. An endpoint is a node id, or `node.u` /
/// `node.l` for a member of an ensemble pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: String,
    pub endpoints: (String, String),
    #[serde(default)]
    pub link: OpticalLink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Member {
    Upper,
    Lower,
}

/// Parsed endpoint.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub node: String,
    pub member: Option<Member>,
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('.') {
            None => Ok(Endpoint {
                node: s.to_string(),
                member: None,
            }),
            Some((node, "u")) => Ok(Endpoint {
                node: node.to_string(),
                member: Some(Member::Upper),
            }),
            Some((node, "l")) => Ok(Endpoint {
                node: node.to_string(),
                member: Some(Member::Lower),
            }),
            Some(_) => Err(Error::Config(format!(
                "endpoint `{s}`: member suffix must be `.u` or `.l`"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self.member {
            None => self.node.clone(),
            Some(Member::Upper) => format!("{}.u", self.node),
            Some(Member::Lower) => format!("{}.l", self.node),
        }
    }
}

/// A detector station with its two incoming arms, in link-list order.
#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub endpoints: (Endpoint, Endpoint),
    pub setup: HeraldSetup,
}

impl Station {
    /// Same station with the arms listed the other way round. Detectors
    /// keep their ports.
    pub fn flipped(&self) -> Station {
        Station {
            id: self.id.clone(),
            endpoints: (self.endpoints.1.clone(), self.endpoints.0.clone()),
            setup: HeraldSetup {
                links: (self.setup.links.1.clone(), self.setup.links.0.clone()),
                detectors: self.setup.detectors,
            },
        }
    }

    /// Herald signal delay: the longer arm's travel time.
    pub fn latency(&self) -> f64 {
        self.setup.links.0.travel_time().max(self.setup.links.1.travel_time())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl NetworkTopology {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id.is_empty() || n.id.contains('.') {
                return Err(Error::Config(format!(
                    "node id `{}` must be non-empty without dots",
                    n.id
                )));
            }
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Config(format!("duplicate node id `{}`", n.id)));
            }
            match &n.kind {
                NodeKind::Ensemble { params } => params.validate(),
                NodeKind::EnsemblePair {
                    upper,
                    lower,
                    detectors,
                } => upper
                    .validate()
                    .and_then(|_| lower.validate())
                    .and_then(|_| detectors.0.validate())
                    .and_then(|_| detectors.1.validate()),
                NodeKind::Cavity { params } => params.validate(),
                NodeKind::DetectorStation { detectors } => detectors.0.validate().and_then(|_| detectors.1.validate()),
            }
            .map_err(|e| Error::Config(format!("node `{}`: {e}", n.id)))?;
        }
        let mut link_ids = BTreeSet::new();
        let mut used = BTreeSet::new();
        let mut station_arms: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &self.links {
            if !link_ids.insert(l.id.as_str()) {
                return Err(Error::Config(format!("duplicate link id `{}`", l.id)));
            }
            l.link
                .validate()
                .map_err(|e| Error::Config(format!("link `{}`: {e}", l.id)))?;
            let a = self.resolve(&l.endpoints.0)?;
            let b = self.resolve(&l.endpoints.1)?;
            let stations = [&a, &b]
                .iter()
                .filter(|e| self.node(&e.node).is_some_and(|n| n.kind.is_station()))
                .count();
            match stations {
                1 => {
                    let (station, memory) = if self.is_station(&a) { (&a, &b) } else { (&b, &a) };
                    *station_arms
                        .entry(self.node(&station.node).unwrap().id.as_str())
                        .or_default() += 1;
                    if !used.insert(memory.clone()) {
                        return Err(Error::Config(format!(
                            "endpoint `{}` is attached to more than one link",
                            memory.label()
                        )));
                    }
                }
                0 => {
                    let both_cavities = [&a, &b]
                        .iter()
                        .all(|e| matches!(self.node(&e.node).map(|n| &n.kind), Some(NodeKind::Cavity { .. })));
                    if !both_cavities {
                        return Err(Error::Config(format!(
                            "link `{}` must end at a detector station unless it joins two cavity nodes",
                            l.id
                        )));
                    }
                }
                _ => {
                    return Err(Error::Config(format!("link `{}` joins two detector stations", l.id)));
                }
            }
        }
        for n in self.nodes.iter().filter(|n| n.kind.is_station()) {
            let arms = station_arms.get(n.id.as_str()).copied().unwrap_or(0);
            if arms != 2 {
                return Err(Error::Config(format!(
                    "detector station `{}` has {arms} links, needs exactly 2",
                    n.id
                )));
            }
        }
        Ok(())
    }

    fn is_station(&self, e: &Endpoint) -> bool {
        self.node(&e.node).is_some_and(|n| n.kind.is_station())
    }

    /// Parses an endpoint and checks it names an existing node (and member).
    pub fn resolve(&self, endpoint: &str) -> Result<Endpoint> {
        let e = Endpoint::parse(endpoint)?;
        let node = self
            .node(&e.node)
            .ok_or_else(|| Error::Config(format!("endpoint `{endpoint}` names no node")))?;
        match (&node.kind, e.member) {
            (NodeKind::EnsemblePair { .. }, None) => Err(Error::Config(format!(
                "endpoint `{endpoint}` must pick `.u` or `.l` of an ensemble pair"
            ))),
            (NodeKind::EnsemblePair { .. }, Some(_)) | (_, None) => Ok(e),
            (_, Some(_)) => Err(Error::Config(format!(
                "endpoint `{endpoint}`: only ensemble pairs have members"
            ))),
        }
    }

    /// Ensemble parameters behind an endpoint.
    pub fn ensemble(&self, e: &Endpoint) -> Result<&EnsembleParams> {
        match (self.node(&e.node).map(|n| &n.kind), e.member) {
            (Some(NodeKind::Ensemble { params }), None) => Ok(params),
            (Some(NodeKind::EnsemblePair { upper, .. }), Some(Member::Upper)) => Ok(upper),
            (Some(NodeKind::EnsemblePair { lower, .. }), Some(Member::Lower)) => Ok(lower),
            _ => Err(Error::Config(format!("`{}` is not an ensemble", e.label()))),
        }
    }

    pub fn cavity(&self, e: &Endpoint) -> Result<&CavityNodeParams> {
        match self.node(&e.node).map(|n| &n.kind) {
            Some(NodeKind::Cavity { params }) => Ok(params),
            _ => Err(Error::Config(format!("`{}` is not a cavity node", e.label()))),
        }
    }

    /// Detector stations with their arms, in node order.
    pub fn stations(&self) -> Result<Vec<Station>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let NodeKind::DetectorStation { detectors } = &n.kind else {
                continue;
            };
            let mut arms = Vec::new();
            for l in &self.links {
                let a = self.resolve(&l.endpoints.0)?;
                let b = self.resolve(&l.endpoints.1)?;
                if a.node == n.id {
                    arms.push((b, l.link.clone()));
                } else if b.node == n.id {
                    arms.push((a, l.link.clone()));
                }
            }
            if arms.len() != 2 {
                return Err(Error::Config(format!(
                    "detector station `{}` has {} links, needs exactly 2",
                    n.id,
                    arms.len()
                )));
            }
            let (right, right_link) = arms.pop().unwrap();
            let (left, left_link) = arms.pop().unwrap();
            out.push(Station {
                id: n.id.clone(),
                endpoints: (left, right),
                setup: HeraldSetup {
                    links: (left_link, right_link),
                    detectors: *detectors,
                },
            });
        }
        Ok(out)
    }

    /// Link between two nodes that are not detector stations.
    pub fn direct_links(&self) -> Result<Vec<(Endpoint, Endpoint, &LinkSpec)>> {
        let mut out = Vec::new();
        for l in &self.links {
            let a = self.resolve(&l.endpoints.0)?;
            let b = self.resolve(&l.endpoints.1)?;
            if !self.is_station(&a) && !self.is_station(&b) {
                out.push((a, b, l));
            }
        }
        Ok(out)
    }

    /// Copy with the overrides applied to every node and link.
    pub fn with_overrides(&self, o: &Overrides) -> NetworkTopology {
        let mut t = self.clone();
        let ens = |p: &mut EnsembleParams| {
            if let Some(v) = o.p_excite {
                p.p_excite = v;
            }
            if let Some(v) = o.readout_efficiency {
                p.readout_efficiency = v;
            }
            if let Some(v) = o.memory_lifetime {
                p.memory_lifetime = v;
            }
            if let Some(v) = o.dephasing_lifetime {
                p.dephasing_lifetime = Some(v);
            }
        };
        let det = |d: &mut (Detector, Detector)| {
            for x in [&mut d.0, &mut d.1] {
                if let Some(v) = o.detector_efficiency {
                    x.efficiency = v;
                }
                if let Some(v) = o.dark_count_prob {
                    x.dark_count_prob = v;
                }
            }
        };
        for n in &mut t.nodes {
            match &mut n.kind {
                NodeKind::Ensemble { params } => ens(params),
                NodeKind::EnsemblePair {
                    upper,
                    lower,
                    detectors,
                } => {
                    ens(upper);
                    ens(lower);
                    det(detectors);
                }
                NodeKind::Cavity { .. } => {}
                NodeKind::DetectorStation { detectors } => det(detectors),
            }
        }
        if let Some(v) = o.phase_jitter_std {
            for l in &mut t.links {
                l.link.phase_jitter_std = v;
            }
        }
        t
    }
}

fn link(id: &str, a: &str, b: &str, l: &OpticalLink) -> LinkSpec {
    LinkSpec {
        id: id.to_string(),
        endpoints: (a.to_string(), b.to_string()),
        link: l.clone(),
    }
}

impl NetworkTopology {
    /// Ensembles `a` and `b` heralded at station `s`.
    pub fn single_link(params: EnsembleParams, arm: OpticalLink, detectors: (Detector, Detector)) -> Self {
        NetworkTopology {
            nodes: vec![
                NodeSpec {
                    id: "a".into(),
                    kind: NodeKind::Ensemble { params: params.clone() },
                },
                NodeSpec {
                    id: "b".into(),
                    kind: NodeKind::Ensemble { params },
                },
                NodeSpec {
                    id: "s".into(),
                    kind: NodeKind::DetectorStation { detectors },
                },
            ],
            links: vec![link("a-s", "a", "s", &arm), link("b-s", "b", "s", &arm)],
        }
    }

    /// Ensemble pairs `L` and `R`; station `su` joins the upper members and
    /// `sl` the lower ones.
    pub fn node_pair(params: EnsembleParams, arm: OpticalLink, detectors: (Detector, Detector)) -> Self {
        let pair = NodeKind::EnsemblePair {
            upper: params.clone(),
            lower: params,
            detectors,
        };
        NetworkTopology {
            nodes: vec![
                NodeSpec {
                    id: "L".into(),
                    kind: pair.clone(),
                },
                NodeSpec {
                    id: "R".into(),
                    kind: pair,
                },
                NodeSpec {
                    id: "su".into(),
                    kind: NodeKind::DetectorStation { detectors },
                },
                NodeSpec {
                    id: "sl".into(),
                    kind: NodeKind::DetectorStation { detectors },
                },
            ],
            links: vec![
                link("L.u-su", "L.u", "su", &arm),
                link("R.u-su", "R.u", "su", &arm),
                link("L.l-sl", "L.l", "sl", &arm),
                link("R.l-sl", "R.l", "sl", &arm),
            ],
        }
    }

    /// Chain `n0 – n1 – … – n{links}`; end nodes are single ensembles,
    /// middle nodes are pairs whose `u` member faces left. Station `s{i}`
    /// heralds link `i`.
    pub fn chain(links: usize, params: EnsembleParams, arm: OpticalLink, detectors: (Detector, Detector)) -> Self {
        let mut nodes = Vec::new();
        let mut specs = Vec::new();
        for i in 0..=links {
            let kind = if i == 0 || i == links {
                NodeKind::Ensemble { params: params.clone() }
            } else {
                NodeKind::EnsemblePair {
                    upper: params.clone(),
                    lower: params.clone(),
                    detectors,
                }
            };
            nodes.push(NodeSpec {
                id: format!("n{i}"),
                kind,
            });
        }
        for i in 0..links {
            let s = format!("s{i}");
            nodes.push(NodeSpec {
                id: s.clone(),
                kind: NodeKind::DetectorStation { detectors },
            });
            let left = if i == 0 { "n0".to_string() } else { format!("n{i}.l") };
            let right = if i + 1 == links {
                format!("n{links}")
            } else {
                format!("n{}.u", i + 1)
            };
            specs.push(link(&format!("{left}-{s}"), &left, &s, &arm));
            specs.push(link(&format!("{right}-{s}"), &right, &s, &arm));
        }
        NetworkTopology { nodes, links: specs }
    }

    /// Cavity node `atom` and ensemble `ens` heralded at station `s`.
    pub fn hybrid(
        cavity: CavityNodeParams,
        params: EnsembleParams,
        arm: OpticalLink,
        detectors: (Detector, Detector),
    ) -> Self {
        NetworkTopology {
            nodes: vec![
                NodeSpec {
                    id: "atom".into(),
                    kind: NodeKind::Cavity { params: cavity },
                },
                NodeSpec {
                    id: "ens".into(),
                    kind: NodeKind::Ensemble { params },
                },
                NodeSpec {
                    id: "s".into(),
                    kind: NodeKind::DetectorStation { detectors },
                },
            ],
            links: vec![link("atom-s", "atom", "s", &arm), link("ens-s", "ens", "s", &arm)],
        }
    }

    /// Cavity nodes `A` and `B` joined directly.
    pub fn cavity_pair(a: CavityNodeParams, b: CavityNodeParams, fiber: OpticalLink) -> Self {
        NetworkTopology {
            nodes: vec![
                NodeSpec {
                    id: "A".into(),
                    kind: NodeKind::Cavity { params: a },
                },
                NodeSpec {
                    id: "B".into(),
                    kind: NodeKind::Cavity { params: b },
                },
            ],
            links: vec![link("A-B", "A", "B", &fiber)],
        }
    }
}
