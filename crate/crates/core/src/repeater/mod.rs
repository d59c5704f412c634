//! Protocol engine: heralded link generation, asynchronous two-pair node
//! preparation, connection at middle nodes, hybrid atom–ensemble heralding
//! and whole-scenario runs on a deterministic event queue.

pub mod config;
pub mod events;
pub mod protocol;
pub mod scenario;
pub mod topology;

pub use config::{Overrides, ProtocolConfig, Scenario};
pub use events::{sort_events, Event, EventKind, EventQueue};
pub use protocol::{
    attempt_until_heralded, cavity_source, cavity_transfer, connectivity_dimension, entanglement_swap,
    expected_max_geometric, hybrid_entangle, memory_bank, polarization_readout, prepare_node_qubit, prepare_pairs,
    psi_fidelity, single_excitation_part, HeraldAttempt, HeraldLink, HybridOutcome, MemoryBank, NodeQubit,
    PolarizationReadout, PreparedPairs, RunLog, StoredPair, SwapModel, SwapOutcome, TrialRecord,
};
pub use scenario::{
    repetition_stream, run_simulation, run_simulation_with_workers, worker_cap_from_env, LinkStats, MetricSummary,
    RateComparison, ReferenceComparison, SimReport, StageStats, PUBLISHED_CONCURRENCE, WORKERS_ENV,
};
pub use topology::{CavityNodeParams, Endpoint, LinkSpec, Member, NetworkTopology, NodeKind, NodeSpec, Station};

#[cfg(test)]
mod tests;
