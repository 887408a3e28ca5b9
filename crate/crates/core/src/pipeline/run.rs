//! Four-stage segment runtime: DataIn, Compute, Aux, and DataOut workers on
//! their own threads, connected by bounded blocking channels carrying
//! immutable row-band tiles.
//!
//! Numerics never depend on scheduling: every output element is produced by
//! exactly one worker with a fixed accumulation order, tiles travel in FIFO
//! order, and DataOut scatters each band to a disjoint slice of the output.
//! Channel depth and tile height only change when values are computed, not
//! what they are.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender};
use std::thread;

use crate::error::{Error, Result};
use crate::layers::{self, dot_seq, dot_tree, gather_window_into, lrn_slab, pool_rows, Accum};
use crate::model::WeightStore;
use crate::pipeline::plan::{AuxStage, ComputeStage, StagePlan};
use crate::pipeline::{ChannelConfig, MemTrafficLedger};
use crate::tensor::Tensor;

/// One transfer unit: a horizontal band of a `(channels, rows, width)` slab,
/// stored channel-major within the band.
struct Tile {
    row0: usize,
    rows: usize,
    data: Vec<f32>,
}

impl Tile {
    fn bytes(&self) -> u64 {
        self.data.len() as u64 * 4
    }
}

/// Byte counters for one channel; senders and receivers must agree when a
/// run completes.
#[derive(Default)]
struct ChannelAudit {
    sent: AtomicU64,
    received: AtomicU64,
}

fn send_tile(
    tx: &SyncSender<Tile>,
    tile: Tile,
    audit: &ChannelAudit,
    ledger: &MemTrafficLedger,
) -> Result<()> {
    let bytes = tile.bytes();
    tx.send(tile)
        .map_err(|_| Error::Run("downstream pipeline stage closed its channel".into()))?;
    audit.sent.fetch_add(bytes, Ordering::Relaxed);
    ledger.add_channel(bytes);
    Ok(())
}

fn recv_iter<'a>(
    rx: &'a Receiver<Tile>,
    audit: &'a ChannelAudit,
) -> impl Iterator<Item = Tile> + 'a {
    std::iter::from_fn(move || {
        let tile = rx.recv().ok()?;
        audit.received.fetch_add(tile.bytes(), Ordering::Relaxed);
        Some(tile)
    })
}

/// Runs one planned segment over the pipeline. Reads the segment inputs and
/// weights from "global memory" (counted on the ledger), streams tiles
/// through the four stages, and materializes the segment output.
pub fn run_segment(
    plan: &StagePlan,
    inputs: &[&Tensor],
    store: &WeightStore,
    cfg: &ChannelConfig,
    accum: Accum,
    ledger: &MemTrafficLedger,
) -> Result<Tensor> {
    if inputs.len() != plan.inputs.len() {
        return Err(Error::Shape(format!(
            "segment `{}` takes {} input(s), got {}",
            plan.output,
            plan.inputs.len(),
            inputs.len()
        )));
    }
    for ((name, expect), tensor) in plan.inputs.iter().zip(&plan.input_shapes).zip(inputs) {
        if tensor.shape() != *expect {
            return Err(Error::Shape(format!(
                "edge `{}` -> `{}` carries shape {}, expected {}",
                name,
                plan.layer_names[0],
                tensor.shape(),
                expect
            )));
        }
    }
    match &plan.compute {
        ComputeStage::Conv { layer, .. } => {
            store.conv(layer)?;
        }
        ComputeStage::Fc { layer, .. } => {
            store.fc(layer)?;
        }
        _ => {}
    }

    let (tx_in, rx_in) = std::sync::mpsc::sync_channel::<Tile>(cfg.depth());
    let (tx_mid, rx_mid) = std::sync::mpsc::sync_channel::<Tile>(cfg.depth());
    let (tx_out, rx_out) = std::sync::mpsc::sync_channel::<Tile>(cfg.depth());
    let audits = [
        ChannelAudit::default(),
        ChannelAudit::default(),
        ChannelAudit::default(),
    ];

    // Every endpoint is moved into its worker: a stage that exits early
    // drops its ends, which unblocks its neighbors instead of deadlocking
    // them against a full or empty channel.
    let (results, out_data) = thread::scope(|scope| {
        let h_in = scope.spawn(|| {
            let tx = tx_in;
            data_in_worker(plan, inputs, store, cfg, ledger, &tx, &audits[0])
        });
        let h_compute = scope.spawn(|| {
            let (rx, tx) = (rx_in, tx_mid);
            compute_worker(plan, store, accum, &rx, &tx, &audits[0], &audits[1], ledger)
        });
        let h_aux = scope.spawn(|| {
            let (rx, tx) = (rx_mid, tx_out);
            aux_worker(plan, &rx, &tx, &audits[1], &audits[2], ledger)
        });
        let h_out = scope.spawn(|| {
            let rx = rx_out;
            data_out_worker(plan, &rx, &audits[2], ledger)
        });

        let mut results = Vec::new();
        for handle in [h_in, h_compute, h_aux] {
            results.push(join_worker(handle));
        }
        let out = match join_worker(h_out) {
            Ok(data) => Some(data),
            Err(e) => {
                results.push(Err(e));
                None
            }
        };
        (results, out)
    });

    // Surface the root cause: a concrete stage error beats the generic
    // "channel closed" errors it triggers up- and downstream.
    let mut first_run_error = None;
    for r in results {
        match r {
            Ok(()) => {}
            Err(e @ Error::Run(_)) => {
                if first_run_error.is_none() {
                    first_run_error = Some(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(e) = first_run_error {
        return Err(e);
    }

    for (i, audit) in audits.iter().enumerate() {
        let sent = audit.sent.load(Ordering::Relaxed);
        let received = audit.received.load(Ordering::Relaxed);
        if sent != received {
            return Err(Error::Run(format!(
                "channel {i} of segment `{}` leaked bytes: sent {sent}, received {received}",
                plan.output
            )));
        }
    }

    Tensor::new(
        plan.output_shape,
        out_data.expect("worker results are all Ok"),
    )
}

fn join_worker<T>(handle: thread::ScopedJoinHandle<'_, Result<T>>) -> Result<T> {
    match handle.join() {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(Error::Run(format!("pipeline worker panicked: {msg}")))
        }
    }
}

/// Fetch stage: counts the global reads (each input tensor once plus the
/// segment's weights), then streams tiles. For convolution segments the
/// tiles are pre-gathered windows, one `C*K*K` vector per output pixel.
fn data_in_worker(
    plan: &StagePlan,
    inputs: &[&Tensor],
    store: &WeightStore,
    cfg: &ChannelConfig,
    ledger: &MemTrafficLedger,
    tx: &SyncSender<Tile>,
    audit: &ChannelAudit,
) -> Result<()> {
    let weight_bytes: u64 = plan
        .layer_names
        .iter()
        .filter_map(|name| store.get(name))
        .map(|w| w.fetch_bytes())
        .sum();
    let input_bytes: u64 = inputs.iter().map(|t| t.byte_len()).sum();
    ledger.add_global_read(input_bytes + weight_bytes);

    match &plan.compute {
        ComputeStage::Conv { params, .. } => {
            let input = inputs[0];
            let window = plan.data_in.channels;
            let (h_out, w_out) = (plan.data_in.rows, plan.data_in.cols);
            let band = cfg.tile_rows().min(h_out);
            let mut y = 0;
            while y < h_out {
                let rows = band.min(h_out - y);
                let mut data = vec![0.0f32; rows * w_out * window];
                for r in 0..rows {
                    for x in 0..w_out {
                        let off = (r * w_out + x) * window;
                        gather_window_into(&mut data[off..off + window], input, y + r, x, params);
                    }
                }
                send_tile(
                    tx,
                    Tile {
                        row0: y,
                        rows,
                        data,
                    },
                    audit,
                    ledger,
                )?;
                y += rows;
            }
        }
        ComputeStage::Fc { .. } | ComputeStage::Softmax => {
            // Whole-tensor operand in one transfer.
            let input = inputs[0];
            let tile = Tile {
                row0: 0,
                rows: input.shape().height,
                data: input.data().to_vec(),
            };
            send_tile(tx, tile, audit, ledger)?;
        }
        _ => {
            // Raw row bands of every input, stacked input-by-input. Channel
            // rows are contiguous in the tensor layout, so each channel band
            // is one copy.
            let (h, w) = (plan.data_in.rows, plan.data_in.cols);
            let band = cfg.tile_rows().min(h);
            let mut y = 0;
            while y < h {
                let rows = band.min(h - y);
                let mut data = Vec::with_capacity(plan.data_in.channels * rows * w);
                for t in inputs {
                    let sh = t.shape();
                    for c in 0..sh.channels {
                        let start = sh.offset(c, y, 0);
                        data.extend_from_slice(&t.data()[start..start + rows * w]);
                    }
                }
                send_tile(
                    tx,
                    Tile {
                        row0: y,
                        rows,
                        data,
                    },
                    audit,
                    ledger,
                )?;
                y += rows;
            }
        }
    }
    Ok(())
}

/// Single-threaded compute stage: the flattened-convolution dot products
/// (plus fused ReLU), or the segment's dense/elementwise operation.
#[allow(clippy::too_many_arguments)]
fn compute_worker(
    plan: &StagePlan,
    store: &WeightStore,
    accum: Accum,
    rx: &Receiver<Tile>,
    tx: &SyncSender<Tile>,
    audit_in: &ChannelAudit,
    audit_out: &ChannelAudit,
    ledger: &MemTrafficLedger,
) -> Result<()> {
    match &plan.compute {
        ComputeStage::Conv {
            layer,
            out_channels,
            fuse_relu,
            ..
        } => {
            let weights = store.conv(layer)?;
            let window = weights.window_len();
            let w_out = plan.compute_shape.width;
            let mut scratch = Vec::with_capacity(window);
            for tile in recv_iter(rx, audit_in) {
                let rows = tile.rows;
                let mut out = vec![0.0f32; out_channels * rows * w_out];
                for r in 0..rows {
                    for x in 0..w_out {
                        let win = &tile.data[(r * w_out + x) * window..][..window];
                        for f_o in 0..*out_channels {
                            let bias = weights.bias()[f_o];
                            let row = weights.flat_row(f_o);
                            let mut v = match accum {
                                Accum::Sequential => dot_seq(bias, row, win),
                                Accum::Tree => dot_tree(bias, row, win, &mut scratch),
                            };
                            if *fuse_relu {
                                v = v.max(0.0);
                            }
                            out[(f_o * rows + r) * w_out + x] = v;
                        }
                    }
                }
                send_tile(
                    tx,
                    Tile {
                        row0: tile.row0,
                        rows,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        ComputeStage::Fc { layer, .. } => {
            let weights = store.fc(layer)?;
            for tile in recv_iter(rx, audit_in) {
                let out = layers::fc(&tile.data, weights)?;
                send_tile(
                    tx,
                    Tile {
                        row0: 0,
                        rows: 1,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        ComputeStage::Softmax => {
            for tile in recv_iter(rx, audit_in) {
                let out = layers::softmax(&tile.data);
                send_tile(
                    tx,
                    Tile {
                        row0: tile.row0,
                        rows: tile.rows,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        ComputeStage::Relu => {
            for tile in recv_iter(rx, audit_in) {
                let out = tile.data.iter().map(|v| v.max(0.0)).collect();
                send_tile(
                    tx,
                    Tile {
                        row0: tile.row0,
                        rows: tile.rows,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        ComputeStage::EltwiseAdd => {
            for tile in recv_iter(rx, audit_in) {
                let half = tile.data.len() / 2;
                let (a, b) = tile.data.split_at(half);
                let out = a.iter().zip(b).map(|(x, y)| x + y).collect();
                send_tile(
                    tx,
                    Tile {
                        row0: tile.row0,
                        rows: tile.rows,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        // Concat tiles already arrive with input slabs stacked in channel
        // order, which is exactly the concatenated band.
        ComputeStage::Concat | ComputeStage::Forward => {
            for tile in recv_iter(rx, audit_in) {
                send_tile(tx, tile, audit_out, ledger)?;
            }
        }
    }
    Ok(())
}

/// Aux stage: LRN row-by-row, pooling with just enough row buffering to emit
/// each pooled band as soon as its source rows have arrived.
fn aux_worker(
    plan: &StagePlan,
    rx: &Receiver<Tile>,
    tx: &SyncSender<Tile>,
    audit_in: &ChannelAudit,
    audit_out: &ChannelAudit,
    ledger: &MemTrafficLedger,
) -> Result<()> {
    let cs = plan.compute_shape;
    let mut lrn_params: Option<crate::layers::LrnParams> = None;
    let mut pool_params: Option<crate::layers::PoolParams> = None;
    for op in &plan.aux {
        match op {
            AuxStage::Lrn(p) => lrn_params = Some(*p),
            AuxStage::Pool(p) => pool_params = Some(*p),
        }
    }

    match pool_params {
        None => {
            for tile in recv_iter(rx, audit_in) {
                let data = match &lrn_params {
                    Some(p) => lrn_slab(&tile.data, cs.channels, tile.rows, cs.width, p),
                    None => tile.data,
                };
                send_tile(
                    tx,
                    Tile {
                        row0: tile.row0,
                        rows: tile.rows,
                        data,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
        Some(pool) => {
            let h_out = (cs.height - pool.window) / pool.stride + 1;
            let mut buf = vec![0.0f32; cs.elements()];
            let mut received_rows = 0usize;
            let mut emitted = 0usize;
            for tile in recv_iter(rx, audit_in) {
                let data = match &lrn_params {
                    Some(p) => lrn_slab(&tile.data, cs.channels, tile.rows, cs.width, p),
                    None => tile.data,
                };
                for c in 0..cs.channels {
                    let src = &data[c * tile.rows * cs.width..][..tile.rows * cs.width];
                    let dst = (c * cs.height + tile.row0) * cs.width;
                    buf[dst..dst + src.len()].copy_from_slice(src);
                }
                received_rows = tile.row0 + tile.rows;
                let ready = if received_rows >= pool.window {
                    ((received_rows - pool.window) / pool.stride + 1).min(h_out)
                } else {
                    0
                };
                if ready > emitted {
                    let out = pool_rows(
                        &buf,
                        cs.channels,
                        cs.height,
                        cs.width,
                        &pool,
                        emitted,
                        ready,
                    );
                    send_tile(
                        tx,
                        Tile {
                            row0: emitted,
                            rows: ready - emitted,
                            data: out,
                        },
                        audit_out,
                        ledger,
                    )?;
                    emitted = ready;
                }
            }
            if received_rows == cs.height && emitted < h_out {
                let out = pool_rows(
                    &buf,
                    cs.channels,
                    cs.height,
                    cs.width,
                    &pool,
                    emitted,
                    h_out,
                );
                send_tile(
                    tx,
                    Tile {
                        row0: emitted,
                        rows: h_out - emitted,
                        data: out,
                    },
                    audit_out,
                    ledger,
                )?;
            }
        }
    }
    Ok(())
}

/// Writeback stage: scatters bands into the output tensor and counts the
/// global write, one output byte per element.
fn data_out_worker(
    plan: &StagePlan,
    rx: &Receiver<Tile>,
    audit: &ChannelAudit,
    ledger: &MemTrafficLedger,
) -> Result<Vec<f32>> {
    let os = plan.output_shape;
    let mut out = vec![0.0f32; os.elements()];
    for tile in recv_iter(rx, audit) {
        let w = os.width;
        for c in 0..os.channels {
            let src = &tile.data[c * tile.rows * w..][..tile.rows * w];
            let dst = (c * os.height + tile.row0) * w;
            out[dst..dst + src.len()].copy_from_slice(src);
        }
        ledger.add_global_write(tile.bytes());
    }
    Ok(out)
}
