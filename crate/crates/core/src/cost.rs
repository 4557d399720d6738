//! Analytic memory and MAC planner for on-device fine-tuning.
//!
//! Units are bytes with decimal prefixes in reports (1 kB = 1000 B); the
//! element size is a parameter (2 for bf16 deployment). Execution is assumed
//! layer by layer. A parameterised layer needs its input, its output and its
//! parameter-sized gradient scratch at once; activations, concatenation and
//! the head run in place and need only their output.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::layers::LayerKind;
use crate::model::{tape_plan, ArchConfig, Block, Graph, SparseUpdateConfig};

/// Byte counts split by block (enc, dec0, dec1, dec2).
pub type PerBlock = [u64; 4];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub config: String,
    pub dtype_bytes: u64,
    pub working_buffer_bytes: u64,
    /// Layer whose requirement sets the working buffer.
    pub working_buffer_layer: usize,
    pub storage_weights_bytes: u64,
    pub storage_activations_bytes: u64,
    pub storage_gradients_bytes: u64,
    pub optimizer_state_bytes: u64,
    /// The working buffer is attributed whole to the block of its peak layer.
    pub working_buffer_per_block: PerBlock,
    pub weights_per_block: PerBlock,
    pub activations_per_block: PerBlock,
    pub gradients_per_block: PerBlock,
    pub optimizer_per_block: PerBlock,
    pub total_bytes: u64,
}

impl MemoryReport {
    /// Weights, retained activations and gradients.
    pub fn storage_bytes(&self) -> u64 {
        self.storage_weights_bytes + self.storage_activations_bytes + self.storage_gradients_bytes
    }

    /// Storage including the optimizer moments.
    pub fn storage_with_optimizer_bytes(&self) -> u64 {
        self.storage_bytes() + self.optimizer_state_bytes
    }

    /// Fraction of retained activation bytes per block.
    pub fn activation_shares(&self) -> [f64; 4] {
        let total = self.storage_activations_bytes as f64;
        self.activations_per_block.map(|a| if total == 0.0 { 0.0 } else { a as f64 / total })
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, v: u64| {
            let _ = writeln!(s, "{name:<22} {v:>10} B  {}", human_bytes(v));
        };
        let _ = writeln!(s, "config {} ({} B/element)", self.config, self.dtype_bytes);
        line(&mut s, "working buffer", self.working_buffer_bytes);
        line(&mut s, "weights", self.storage_weights_bytes);
        line(&mut s, "retained activations", self.storage_activations_bytes);
        line(&mut s, "gradients", self.storage_gradients_bytes);
        line(&mut s, "optimizer state", self.optimizer_state_bytes);
        line(&mut s, "total", self.total_bytes);
        s
    }
}

/// `1234567` -> `"1.23 MB / 1.18 MiB"`.
pub fn human_bytes(b: u64) -> String {
    let (dec, bin) = match b {
        0..=999 => return format!("{b} B"),
        1_000..=999_999 => (format!("{:.1} kB", b as f64 / 1e3), format!("{:.1} KiB", b as f64 / 1024.0)),
        _ => (format!("{:.2} MB", b as f64 / 1e6), format!("{:.2} MiB", b as f64 / 1048576.0)),
    };
    format!("{dec} / {bin}")
}

fn blocks_sum(xs: &PerBlock) -> u64 {
    xs.iter().sum()
}

/// Memory needed to fine-tune the blocks in `cfg`.
pub fn plan_memory(arch: &ArchConfig, cfg: &SparseUpdateConfig, dtype_bytes: u64) -> Result<MemoryReport> {
    let graph = arch.resolve()?;
    Ok(plan_graph_memory(&graph, cfg, dtype_bytes))
}

pub fn plan_graph_memory(graph: &Graph, cfg: &SparseUpdateConfig, dtype_bytes: u64) -> MemoryReport {
    let plan = tape_plan(graph, cfg);
    let b = dtype_bytes;
    let mut weights = [0u64; 4];
    let mut acts = [0u64; 4];
    let mut grads = [0u64; 4];
    let (mut peak, mut peak_layer) = (0u64, 0usize);
    for (i, l) in graph.layers.iter().enumerate() {
        let k = l.block.index();
        let params = l.spec.param_count() as u64;
        weights[k] += params * b;
        let need = if l.spec.has_params() {
            (l.input_len() + l.output_len()) as u64 + params
        } else {
            l.output_len() as u64
        };
        if need > peak {
            peak = need;
            peak_layer = l.id;
        }
        if plan.retain_input[i] {
            acts[k] += l.input_len() as u64 * b;
        }
        if plan.layer_trainable[i] {
            grads[k] += params * b;
        }
    }
    let head_len = (graph.output.0 * graph.output.1 * graph.output.2) as u64;
    if head_len > peak {
        peak = head_len;
        peak_layer = graph.head_id;
    }
    if plan.retain_head {
        acts[Block::Dec2.index()] += head_len * b;
    }
    let optimizer = grads.map(|g| 2 * g);
    let peak_block = if peak_layer == graph.head_id {
        Block::Dec2
    } else {
        graph.layer(peak_layer).block
    };
    let mut working_per_block = [0u64; 4];
    working_per_block[peak_block.index()] = peak * b;
    let working = peak * b;
    let total = working + blocks_sum(&weights) + blocks_sum(&acts) + blocks_sum(&grads) + blocks_sum(&optimizer);
    MemoryReport {
        config: cfg.label(),
        dtype_bytes,
        working_buffer_bytes: working,
        working_buffer_layer: peak_layer,
        storage_weights_bytes: blocks_sum(&weights),
        storage_activations_bytes: blocks_sum(&acts),
        storage_gradients_bytes: blocks_sum(&grads),
        optimizer_state_bytes: blocks_sum(&optimizer),
        working_buffer_per_block: working_per_block,
        weights_per_block: weights,
        activations_per_block: acts,
        gradients_per_block: grads,
        optimizer_per_block: optimizer,
        total_bytes: total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMacs {
    pub id: usize,
    pub block: Block,
    pub forward: u64,
    pub input_grad: u64,
    pub weight_grad: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComputeReport {
    pub config: String,
    pub layers: Vec<LayerMacs>,
    pub forward_total: u64,
    pub backward_input_grad_total: u64,
    pub backward_weight_grad_total: u64,
    pub forward_per_block: PerBlock,
    pub backward_per_block: PerBlock,
    pub weight_grad_per_block: PerBlock,
}

impl ComputeReport {
    pub fn backward_total(&self) -> u64 {
        self.backward_input_grad_total + self.backward_weight_grad_total
    }

    /// MACs spent on `block`'s weight gradients, as a fraction of all
    /// backward MACs of this configuration.
    pub fn weight_grad_share(&self, block: Block) -> f64 {
        let total = self.backward_total();
        if total == 0 {
            0.0
        } else {
            self.weight_grad_per_block[block.index()] as f64 / total as f64
        }
    }
}

/// Forward and backward multiply-accumulates for fine-tuning `cfg`.
///
/// A layer's input gradient is computed iff it lies strictly after the
/// gradient stop; its weight gradient iff its block is trainable. Both cost
/// as much as the forward pass (they are correlations of the same shapes).
pub fn count_macs(arch: &ArchConfig, cfg: &SparseUpdateConfig) -> Result<ComputeReport> {
    let graph = arch.resolve()?;
    Ok(count_graph_macs(&graph, cfg))
}

pub fn count_graph_macs(graph: &Graph, cfg: &SparseUpdateConfig) -> ComputeReport {
    let plan = tape_plan(graph, cfg);
    let mut report = ComputeReport {
        config: cfg.label(),
        layers: Vec::with_capacity(graph.layers.len()),
        forward_total: 0,
        backward_input_grad_total: 0,
        backward_weight_grad_total: 0,
        forward_per_block: [0; 4],
        backward_per_block: [0; 4],
        weight_grad_per_block: [0; 4],
    };
    for (i, l) in graph.layers.iter().enumerate() {
        let fwd = l.spec.forward_macs(l.input.1, l.input.2);
        let parametric = matches!(l.spec.kind, LayerKind::Conv2d | LayerKind::TrConv2d);
        let on_path = plan.stop_layer.is_some_and(|s| l.id > s);
        let ig = if parametric && on_path { fwd } else { 0 };
        let wg = if parametric && plan.layer_trainable[i] { fwd } else { 0 };
        let k = l.block.index();
        report.forward_total += fwd;
        report.backward_input_grad_total += ig;
        report.backward_weight_grad_total += wg;
        report.forward_per_block[k] += fwd;
        report.backward_per_block[k] += ig + wg;
        report.weight_grad_per_block[k] += wg;
        report.layers.push(LayerMacs {
            id: l.id,
            block: l.block,
            forward: fwd,
            input_grad: ig,
            weight_grad: wg,
        });
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigRow {
    pub config: SparseUpdateConfig,
    pub memory: MemoryReport,
    pub compute: ComputeReport,
    pub pareto: bool,
}

/// `a` dominates `b` when it is no worse in memory and backward MACs and
/// strictly better in one.
pub fn dominates(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// All 16 sparse-update configurations with Pareto flags on
/// (total memory, backward MACs).
///
/// The inference-only row would dominate every training configuration, so
/// Pareto optimality is decided among the 15 rows that train something and
/// the inference-only row is never flagged.
pub fn enumerate_configs(arch: &ArchConfig, dtype_bytes: u64) -> Result<Vec<ConfigRow>> {
    let graph = arch.resolve()?;
    let mut rows: Vec<ConfigRow> = SparseUpdateConfig::all_combinations()
        .into_iter()
        .map(|cfg| ConfigRow {
            memory: plan_graph_memory(&graph, &cfg, dtype_bytes),
            compute: count_graph_macs(&graph, &cfg),
            config: cfg,
            pareto: false,
        })
        .collect();
    let points: Vec<(u64, u64)> = rows.iter().map(|r| (r.memory.total_bytes, r.compute.backward_total())).collect();
    for i in 0..rows.len() {
        if rows[i].config.is_empty() {
            continue;
        }
        rows[i].pareto = !(0..rows.len()).any(|j| !rows[j].config.is_empty() && dominates(points[j], points[i]));
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 8] = [
    "config",
    "working_B",
    "storage_B",
    "optimizer_B",
    "total_B",
    "fwd_MACs",
    "bwd_MACs",
    "pareto_flag",
];

/// CSV with [`CSV_HEADER`] columns; `storage_B` excludes the optimizer state.
pub fn write_config_csv(rows: &[ConfigRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| crate::Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        out.write_record([
            r.config.label(),
            r.memory.working_buffer_bytes.to_string(),
            r.memory.storage_bytes().to_string(),
            r.memory.optimizer_state_bytes.to_string(),
            r.memory.total_bytes.to_string(),
            r.compute.forward_total.to_string(),
            r.compute.backward_total().to_string(),
            u8::from(r.pareto).to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// How many (image, label) records fit in `psram_bytes`. Zero-sized records
/// are rejected as zero capacity.
pub fn dataset_capacity(psram_bytes: u64, image_bytes: u64, label_bytes: u64) -> u64 {
    match image_bytes + label_bytes {
        0 => 0,
        record => psram_bytes / record,
    }
}
