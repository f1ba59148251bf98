//! Simulated cluster communication.
//!
//! Messages are function calls that bump a [`CommLedger`]. Scalars are
//! counted as the number of reals (or indices) moved across a channel, and
//! every synchronous step of a protocol is one parallel round. Within a round
//! receivers act in ascending index order, so a protocol run is fully
//! determined by its rng.
//!
//! Two weighted-sampling protocols draw `R` worker indices with replacement,
//! each proportional to the locally held weights:
//!
//! * [`pc_sample`] merges groups of `R` workers pairwise up a binary tree,
//!   shipping all `R` candidate indices in each message.
//! * [`optimal_comm_sample`] spreads the `R` candidates of each group across
//!   its members and runs `R` single-index merge trees side by side.
//!
//! Both need `M` to be a multiple of `R` with `M / R` a power of two. Other
//! sizes are padded with zero-weight virtual workers; these are never sampled
//! and the ledger counts the padded topology.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sampling::Categorical;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub m_workers: usize,
    pub group_size: usize,
    padded_workers: usize,
}

impl Topology {
    pub fn new(m_workers: usize, group_size: usize) -> Result<Self> {
        if m_workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        if group_size == 0 {
            return Err(Error::invalid("group size R must be at least 1"));
        }
        let groups = m_workers.div_ceil(group_size).next_power_of_two();
        Ok(Topology {
            m_workers,
            group_size,
            padded_workers: groups * group_size,
        })
    }

    /// Worker count after padding with virtual workers.
    pub fn padded_workers(&self) -> usize {
        self.padded_workers
    }

    pub fn groups(&self) -> usize {
        self.padded_workers / self.group_size
    }

    /// `log₂(M / R)` on the padded topology.
    pub fn tree_depth(&self) -> usize {
        self.groups().trailing_zeros() as usize
    }

    pub fn is_padded(&self) -> bool {
        self.padded_workers != self.m_workers
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CommLedger {
    pub worker_worker_scalars: u64,
    pub worker_server_scalars: u64,
    pub server_worker_scalars: u64,
    pub parallel_rounds: u64,
}

impl CommLedger {
    pub const CSV_HEADER: &'static str = "phase,worker_worker,worker_server,server_worker,rounds";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn worker_to_worker(&mut self, scalars: u64) {
        self.worker_worker_scalars += scalars;
    }

    pub fn worker_to_server(&mut self, scalars: u64) {
        self.worker_server_scalars += scalars;
    }

    pub fn server_to_worker(&mut self, scalars: u64) {
        self.server_worker_scalars += scalars;
    }

    pub fn round(&mut self, rounds: u64) {
        self.parallel_rounds += rounds;
    }

    pub fn total_scalars(&self) -> u64 {
        self.worker_worker_scalars + self.worker_server_scalars + self.server_worker_scalars
    }

    /// Counter increments since `earlier`.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        CommLedger {
            worker_worker_scalars: self.worker_worker_scalars - earlier.worker_worker_scalars,
            worker_server_scalars: self.worker_server_scalars - earlier.worker_server_scalars,
            server_worker_scalars: self.server_worker_scalars - earlier.server_worker_scalars,
            parallel_rounds: self.parallel_rounds - earlier.parallel_rounds,
        }
    }

    pub fn csv_row(&self, phase: &str) -> String {
        format!(
            "{phase},{},{},{},{}",
            self.worker_worker_scalars, self.worker_server_scalars, self.server_worker_scalars, self.parallel_rounds
        )
    }
}

/// Multiset of sampled worker indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleHistogram {
    counts: BTreeMap<usize, usize>,
    total: usize,
}

impl SampleHistogram {
    pub fn from_indices(indices: &[usize]) -> Self {
        let mut counts = BTreeMap::new();
        for &i in indices {
            *counts.entry(i).or_insert(0) += 1;
        }
        SampleHistogram {
            counts,
            total: indices.len(),
        }
    }

    pub fn count(&self, worker: usize) -> usize {
        self.counts.get(&worker).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(worker, multiplicity)` in ascending worker order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn distinct_workers(&self) -> usize {
        self.counts.len()
    }
}

impl fmt::Display for SampleHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// What one machine holds during a protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub held_indices: Vec<usize>,
    pub cumulative_weight: f64,
}

fn validate_weights(weights: &[f64], group_size: usize) -> Result<Topology> {
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::invalid(format!("weight {i} is {w}, expected finite and nonnegative")));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::invalid("at least one weight must be positive"));
    }
    Topology::new(weights.len(), group_size)
}

fn padded(weights: &[f64], topo: &Topology) -> Vec<f64> {
    let mut w = weights.to_vec();
    w.resize(topo.padded_workers(), 0.0);
    w
}

/// Draws from the group `[start, start + R)`; a zero-weight group holds its
/// leader as a placeholder that can never win a later merge.
fn sample_group<R: Rng + ?Sized>(weights: &[f64], start: usize, size: usize, draws: usize, rng: &mut R) -> NodeState {
    let slice = &weights[start..start + size];
    let total: f64 = slice.iter().sum();
    let held_indices = match Categorical::from_weights(slice.to_vec()) {
        Ok(c) => (0..draws).map(|_| start + c.sample(rng)).collect(),
        Err(_) => vec![start + size - 1; draws],
    };
    NodeState {
        held_indices,
        cumulative_weight: total,
    }
}

/// Keep the receiver's index with probability `w_recv / (w_recv + w_send)`.
fn merge<R: Rng + ?Sized>(receiver: &mut NodeState, sender: &NodeState, rng: &mut R) {
    let total = receiver.cumulative_weight + sender.cumulative_weight;
    for (mine, theirs) in receiver.held_indices.iter_mut().zip(&sender.held_indices) {
        if total > 0.0 {
            let u: f64 = rng.random();
            if u * total < sender.cumulative_weight {
                *mine = *theirs;
            }
        }
    }
    receiver.cumulative_weight = total;
}

/// Tree-structured sampling of `R` indices with replacement; returns the
/// ordered slots held by the last machine.
pub fn pc_sample_slots<R: Rng + ?Sized>(
    weights: &[f64],
    group_size: usize,
    ledger: &mut CommLedger,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let topo = validate_weights(weights, group_size)?;
    let r = group_size;
    let w = padded(weights, &topo);
    let p = topo.padded_workers();

    // every non-leader ships (index, weight) to its group leader
    ledger.worker_to_worker(2 * (p - topo.groups()) as u64);
    ledger.round(1);

    let mut nodes: Vec<Option<NodeState>> = vec![None; p];
    for g in 0..topo.groups() {
        nodes[(g + 1) * r - 1] = Some(sample_group(&w, g * r, r, r, rng));
    }

    for h in 1..=topo.tree_depth() {
        let stride = (1usize << h) * r;
        let offset = (1usize << (h - 1)) * r;
        let mut receiver = stride - 1;
        while receiver < p {
            let sender = receiver - offset;
            let sent = nodes[sender].take().expect("sender holds a sample");
            ledger.worker_to_worker((r + 1) as u64);
            let recv = nodes[receiver].as_mut().expect("receiver holds a sample");
            merge(recv, &sent, rng);
            receiver += stride;
        }
        ledger.round(1);
    }
    let last = nodes[p - 1].take().expect("last machine holds the result");
    debug_assert!(last.held_indices.iter().all(|&i| i < topo.m_workers));
    Ok(last.held_indices)
}

pub fn pc_sample<R: Rng + ?Sized>(
    weights: &[f64],
    group_size: usize,
    ledger: &mut CommLedger,
    rng: &mut R,
) -> Result<SampleHistogram> {
    pc_sample_slots(weights, group_size, ledger, rng).map(|s| SampleHistogram::from_indices(&s))
}

/// Variant that hands each of a group's `R` candidates to a different group
/// member, then merges `R` single-index trees in parallel. Costs `R` rounds
/// for the first stage and `log₂(M/R)` for the second.
pub fn optimal_comm_slots<R: Rng + ?Sized>(
    weights: &[f64],
    group_size: usize,
    ledger: &mut CommLedger,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let topo = validate_weights(weights, group_size)?;
    let r = group_size;
    let w = padded(weights, &topo);
    let p = topo.padded_workers();

    ledger.worker_to_worker(2 * (p - topo.groups()) as u64);
    ledger.round(1);

    let mut nodes: Vec<NodeState> = Vec::with_capacity(p);
    for g in 0..topo.groups() {
        let leader = sample_group(&w, g * r, r, r, rng);
        for u in 0..r {
            nodes.push(NodeState {
                held_indices: vec![leader.held_indices[u]],
                cumulative_weight: leader.cumulative_weight,
            });
        }
    }
    // the leader sends one (index, weight) pair to each other member in turn
    ledger.worker_to_worker(2 * (topo.groups() * (r - 1)) as u64);
    ledger.round((r - 1) as u64);

    for h in 1..=topo.tree_depth() {
        let stride = (1usize << h) * r;
        let offset = (1usize << (h - 1)) * r;
        let mut receivers = Vec::new();
        let mut top = stride;
        while top <= p {
            receivers.extend((top - r)..top);
            top += stride;
        }
        for receiver in receivers {
            let sender = receiver - offset;
            let sent = nodes[sender].clone();
            ledger.worker_to_worker(2);
            merge(&mut nodes[receiver], &sent, rng);
        }
        ledger.round(1);
    }
    Ok(nodes[p - r..].iter().map(|n| n.held_indices[0]).collect())
}

pub fn optimal_comm_sample<R: Rng + ?Sized>(
    weights: &[f64],
    group_size: usize,
    ledger: &mut CommLedger,
    rng: &mut R,
) -> Result<SampleHistogram> {
    optimal_comm_slots(weights, group_size, ledger, rng).map(|s| SampleHistogram::from_indices(&s))
}

/// Server sends `payload_scalars` to each of `workers` machines.
pub fn server_broadcast(ledger: &mut CommLedger, payload_scalars: usize, workers: usize) {
    ledger.server_to_worker((payload_scalars * workers) as u64);
    ledger.round(1);
}

/// Each of `workers` machines sends `payload_scalars` to the server.
pub fn server_gather(ledger: &mut CommLedger, payload_scalars: usize, workers: usize) {
    ledger.worker_to_server((payload_scalars * workers) as u64);
    ledger.round(1);
}
