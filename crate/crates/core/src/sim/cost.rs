//! Analytic per-step cost of a layout.
//!
//! Compute and communication counts follow the executor exactly (same
//! padding, same collective accounting), so on small models they can be
//! checked against a real run. Time is then
//! `max_w(max(compute_w / rate, weights_w / memory) + comm_w / bandwidth) + overhead`.

use serde::{Deserialize, Serialize};

use crate::collectives::ring_sent;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::parallel::{Batch, ComputeTally};
use crate::topology::{KvRouting, Layout};

/// Consecutive rows of one request inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Position of the first row.
    pub start: usize,
    pub len: usize,
    /// Whether the last row is sampled.
    pub sample: bool,
}

/// Rows of a step, in batch order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepShape {
    pub segments: Vec<Segment>,
}

impl StepShape {
    pub fn tokens(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Shape of a concrete batch (rows of a request must be contiguous).
    pub fn of_batch(batch: &Batch) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        let mut last: Option<u64> = None;
        for r in &batch.rows {
            match segments.last_mut() {
                Some(seg) if last == Some(r.request) && seg.start + seg.len == r.position && !seg.sample => {
                    seg.len += 1;
                    seg.sample = r.sample;
                }
                _ => segments.push(Segment {
                    start: r.position,
                    len: 1,
                    sample: r.sample,
                }),
            }
            last = Some(r.request);
        }
        Self { segments }
    }
}

/// Hardware constants, per worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Multiply-accumulates per second.
    pub compute_rate: f64,
    /// Interconnect elements per second.
    pub bandwidth: f64,
    /// Weight elements streamed from memory per second.
    pub memory_rate: f64,
    /// Fixed engine cost per step, seconds.
    pub step_overhead: f64,
}

impl Default for CostModel {
    /// Arbitrary but fixed: an accelerator-class worker where a 4096-token
    /// full-TP prefill of the 8B-class shape spends about ten times longer
    /// in compute than in all-reduce.
    fn default() -> Self {
        Self {
            compute_rate: 1.0e14,
            bandwidth: 6.5e11,
            memory_rate: 2.4e12,
            step_overhead: 1.5e-3,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.compute_rate, self.bandwidth, self.memory_rate];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.step_overhead >= 0.0) {
            return Err(Error::config("cost model rates must be positive"));
        }
        Ok(())
    }
}

/// Counts for one step on one worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerLoad {
    pub compute: ComputeTally,
    /// Elements sent.
    pub comm: u64,
    /// Weight elements read.
    pub weights: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub seconds: f64,
    pub compute: u64,
    pub comm: u64,
    pub padded_rows: usize,
}

/// Resident layer-weight elements of worker `w` under `layout`.
pub fn resident_elements(mc: &ModelConfig, layout: &Layout, w: usize) -> u64 {
    let hd = mc.head_dim;
    let nq = layout.shard_q_heads(w).len();
    let nk = layout.shard_kv_heads(w).len();
    let per_layer = mc.hidden * (nq + 2 * nk) * hd + nq * hd * mc.hidden + 2 * mc.hidden * (mc.mlp_hidden / layout.tp);
    (mc.layers * per_layer) as u64
}

/// Exact per-worker compute and communication of one executor step.
pub fn step_loads(mc: &ModelConfig, layout: &Layout, shape: &StepShape) -> Vec<WorkerLoad> {
    let p = layout.p();
    let n = shape.tokens();
    if n == 0 {
        return vec![WorkerLoad::default(); p];
    }
    let (sp, tp) = (layout.sp, layout.tp);
    let (d, hd, l) = (mc.hidden as u64, mc.head_dim as u64, mc.layers as u64);
    let chunk = n.div_ceil(sp);
    let c = chunk as u64;

    // Sum over real rows of visible cache positions, and sampled rows per SP rank.
    let mut visible: u64 = 0;
    let mut samples = vec![0u64; sp];
    let mut offset = 0;
    for seg in &shape.segments {
        let (a, b) = (seg.start as u64 + 1, (seg.start + seg.len) as u64);
        visible += (a + b) * (b + 1 - a) / 2;
        if seg.sample {
            samples[(offset + seg.len - 1) / chunk] += 1;
        }
        offset += seg.len;
    }
    let total_samples: u64 = samples.iter().sum();

    (0..p)
        .map(|w| {
            let nq = layout.shard_q_heads(w).len() as u64;
            let nk = layout.shard_kv_heads(w).len() as u64;
            let heads = layout.q_heads(w).len() as u64;
            let block = (mc.mlp_hidden / tp) as u64;
            let linear = l * c * (d * (nq + 2 * nk) * hd + nq * hd * d + 2 * d * block);
            let attention = l * 2 * hd * heads * visible;
            let head = total_samples * d * mc.vocab as u64;

            let s = sp as u64;
            let qpw = nq / s;
            let mut per_layer = 2 * ring_sent(chunk * mc.hidden, tp, layout.tp_rank(w)) as u64;
            if sp > 1 {
                per_layer += (s - 1) * c * qpw * hd;
                per_layer += match &layout.kv_routing {
                    KvRouting::Partitioned => (s - 1) * c * (qpw + 2 * (nk / s)) * hd,
                    KvRouting::Replicated { aa_size, ag_size, .. } => {
                        let (aa, ag) = (*aa_size as u64, *ag_size as u64);
                        (s - 1) * c * qpw * hd + (aa - 1) * c * 2 * hd + (ag - 1) * aa * c * 2 * hd
                    }
                };
            }
            let gather = if sp > 1 {
                (s - 1) * samples[layout.sp_rank(w)] * d
            } else {
                0
            };
            WorkerLoad {
                compute: ComputeTally {
                    linear,
                    attention,
                    head,
                },
                comm: l * per_layer + gather,
                weights: resident_elements(mc, layout, w) + d * mc.vocab as u64,
            }
        })
        .collect()
}

impl CostModel {
    pub fn step_cost(&self, mc: &ModelConfig, layout: &Layout, shape: &StepShape) -> StepCost {
        let loads = step_loads(mc, layout, shape);
        let busy = loads
            .iter()
            .map(|ld| {
                let compute = ld.compute.total() as f64 / self.compute_rate;
                let memory = ld.weights as f64 / self.memory_rate;
                compute.max(memory) + ld.comm as f64 / self.bandwidth
            })
            .fold(0.0, f64::max);
        let n = shape.tokens();
        StepCost {
            seconds: if n == 0 { 0.0 } else { busy + self.step_overhead },
            compute: loads.iter().map(|l| l.compute.total()).max().unwrap_or(0),
            comm: loads.iter().map(|l| l.comm).max().unwrap_or(0),
            padded_rows: n.div_ceil(layout.sp) * layout.sp,
        }
    }
}
