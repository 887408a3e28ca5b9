//! Streaming execution of a network as a chain of four-stage pipeline
//! segments: DataIn, Compute (flattened convolution), Aux (LRN/pooling), and
//! DataOut, connected by bounded FIFO channels.
//!
//! Tensors flowing between layers inside one segment ride the channels and
//! never touch the global-memory ledger; only segment inputs, weights, and
//! segment outputs count as global traffic. An unfused mode runs every layer
//! as its own segment to expose the bandwidth the fusion saves.

mod plan;
mod reference;
mod run;

pub use plan::{plan_segments, plan_unfused, AuxStage, ComputeStage, StagePlan, TransferSpace};
pub use reference::{compare, mode_tolerance, run_reference};
pub use run::run_segment;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::Accum;
use crate::model::{NetworkGraph, WeightStore};
use crate::tensor::Tensor;

/// Configuration of the bounded channels between stage workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    depth: usize,
    tile_rows: usize,
}

impl ChannelConfig {
    /// `depth` is the number of in-flight tiles a channel holds before the
    /// producer blocks; `tile_rows` is the band height per transfer. Both
    /// must be at least 1.
    pub fn new(depth: usize, tile_rows: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Capacity("channel depth must be at least 1".into()));
        }
        if tile_rows == 0 {
            return Err(Error::Capacity("tile_rows must be at least 1".into()));
        }
        Ok(ChannelConfig { depth, tile_rows })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tile_rows(&self) -> usize {
        self.tile_rows
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            depth: 4,
            tile_rows: 1,
        }
    }
}

/// Byte counters for one run. Global counters model off-chip DRAM traffic;
/// the channel counter tracks payload moved between stages on-chip. Stages
/// increment atomically; counters never decrease during a run.
#[derive(Debug, Default)]
pub struct MemTrafficLedger {
    bytes_read_global: AtomicU64,
    bytes_written_global: AtomicU64,
    bytes_moved_channels: AtomicU64,
}

impl MemTrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add_global_read(&self, bytes: u64) {
        self.bytes_read_global.fetch_add(bytes, Ordering::Relaxed);
    }

    pub(crate) fn add_global_write(&self, bytes: u64) {
        self.bytes_written_global
            .fetch_add(bytes, Ordering::Relaxed);
    }

    pub(crate) fn add_channel(&self, bytes: u64) {
        self.bytes_moved_channels
            .fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn bytes_read_global(&self) -> u64 {
        self.bytes_read_global.load(Ordering::Relaxed)
    }

    pub fn bytes_written_global(&self) -> u64 {
        self.bytes_written_global.load(Ordering::Relaxed)
    }

    pub fn bytes_moved_channels(&self) -> u64 {
        self.bytes_moved_channels.load(Ordering::Relaxed)
    }

    pub fn totals(&self) -> TrafficTotals {
        TrafficTotals {
            bytes_read_global: self.bytes_read_global(),
            bytes_written_global: self.bytes_written_global(),
            bytes_moved_channels: self.bytes_moved_channels(),
        }
    }
}

/// Plain snapshot of the ledger counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrafficTotals {
    pub bytes_read_global: u64,
    pub bytes_written_global: u64,
    pub bytes_moved_channels: u64,
}

impl TrafficTotals {
    /// Total global (off-pipeline) traffic, reads plus writes.
    pub fn global_total(&self) -> u64 {
        self.bytes_read_global + self.bytes_written_global
    }
}

fn run_plans(
    graph: &NetworkGraph,
    plans: &[StagePlan],
    input: &Tensor,
    store: &WeightStore,
    cfg: &ChannelConfig,
    accum: Accum,
) -> Result<(Tensor, TrafficTotals)> {
    if input.shape() != graph.input_shape() {
        return Err(Error::Shape(format!(
            "edge `input`: tensor has shape {}, network expects {}",
            input.shape(),
            graph.input_shape()
        )));
    }
    store.validate(graph)?;
    let ledger = MemTrafficLedger::new();

    if plans.is_empty() {
        // Input-only network: DataIn and DataOut degenerate to a copy.
        ledger.add_global_read(input.byte_len());
        ledger.add_global_write(input.byte_len());
        return Ok((input.clone(), ledger.totals()));
    }

    let mut materialized: HashMap<&str, Arc<Tensor>> = HashMap::new();
    materialized.insert(graph.input_layer().name.as_str(), Arc::new(input.clone()));
    for plan in plans {
        let operands: Vec<Arc<Tensor>> =
            plan.inputs
                .iter()
                .map(|name| {
                    materialized.get(name.as_str()).cloned().ok_or_else(|| {
                        Error::Run(format!("segment input `{name}` never materialized"))
                    })
                })
                .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = operands.iter().map(|a| a.as_ref()).collect();
        let out = run_segment(plan, &refs, store, cfg, accum, &ledger)?;
        materialized.insert(
            graph
                .layer(&plan.output)
                .expect("planned layer exists")
                .name
                .as_str(),
            Arc::new(out),
        );
    }

    let output_name = graph.output_layer().name.as_str();
    let out = materialized
        .remove(output_name)
        .ok_or_else(|| Error::Run(format!("output `{output_name}` never materialized")))?;
    let tensor = Arc::try_unwrap(out).unwrap_or_else(|arc| (*arc).clone());
    Ok((tensor, ledger.totals()))
}

/// Runs the network through the fused pipeline: interlayer tensors inside a
/// segment stay on the channels, and only segment boundaries touch global
/// memory.
pub fn run_network(
    graph: &NetworkGraph,
    input: &Tensor,
    store: &WeightStore,
    cfg: &ChannelConfig,
    accum: Accum,
) -> Result<(Tensor, TrafficTotals)> {
    let plans = plan_segments(graph);
    run_plans(graph, &plans, input, store, cfg, accum)
}

/// Baseline execution where every layer is its own segment, so every
/// interlayer tensor is written to and read back from global memory. Same
/// numerics as [`run_network`], different ledger.
pub fn run_network_unfused(
    graph: &NetworkGraph,
    input: &Tensor,
    store: &WeightStore,
    cfg: &ChannelConfig,
    accum: Accum,
) -> Result<(Tensor, TrafficTotals)> {
    let plans = plan_unfused(graph);
    run_plans(graph, &plans, input, store, cfg, accum)
}
