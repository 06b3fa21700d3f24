//! Dual-residency engine that switches between a base `(SP, TP)` layout and
//! the full-TP shift layout per step, sharing one KV cache.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collectives::Ledgers;
use crate::config::{ModelConfig, ParallelConfig};
use crate::error::{Error, Result};
use crate::model::{TokenId, Weights};
use crate::parallel::{decode_batch, Batch, ClusterCache, ParallelExecutor, RequestId, StepOutput};
use crate::topology::{Layout, Topology};

/// Which weight copy served a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Base,
    Shift,
}

impl Branch {
    /// Batches larger than the threshold use the base layout.
    pub fn choose(tokens: usize, threshold: usize) -> Branch {
        if tokens > threshold {
            Branch::Base
        } else {
            Branch::Shift
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Base => "base",
            Branch::Shift => "shift",
        })
    }
}

/// Resident sharded layer weights of both copies.
///
/// Embedding and vocabulary tables are replicated on every worker in both
/// layouts and are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFootprint {
    /// Layer weights of the full model.
    pub w_base: usize,
    pub sp: usize,
    pub tp: usize,
    pub base_per_worker: Vec<usize>,
    pub shift_per_worker: Vec<usize>,
    /// Resident elements summed over all workers.
    pub w_total: usize,
    /// Extra copy relative to the base copy.
    pub overhead_fraction: f64,
}

impl WeightFootprint {
    fn measure(mc: &ModelConfig, pc: &ParallelConfig, base: &ParallelExecutor, shift: Option<&ParallelExecutor>) -> Self {
        let base_per_worker = base.resident_elements();
        let shift_per_worker = shift.map_or_else(|| vec![0; pc.p()], ParallelExecutor::resident_elements);
        let base_total: usize = base_per_worker.iter().sum();
        let shift_total: usize = shift_per_worker.iter().sum();
        Self {
            w_base: mc.layers * mc.layer_elements(),
            sp: pc.sp,
            tp: pc.tp,
            w_total: base_total + shift_total,
            overhead_fraction: shift_total as f64 / base_total as f64,
            base_per_worker,
            shift_per_worker,
        }
    }

    /// `w_base/TP + w_base/(SP*TP)` per worker, or `None` if a term is not
    /// an integer. With SP=1 there is only one copy.
    pub fn predicted_per_worker(&self) -> Option<usize> {
        let p = self.sp * self.tp;
        if self.w_base % p != 0 {
            return None;
        }
        let shift = if self.sp == 1 { 0 } else { self.w_base / p };
        Some(self.w_base / self.tp + shift)
    }

    /// Measured resident elements of worker `w`.
    pub fn per_worker(&self, w: usize) -> usize {
        self.base_per_worker[w] + self.shift_per_worker[w]
    }

    /// Whether every worker holds exactly the predicted element count.
    pub fn matches_formula(&self) -> bool {
        self.predicted_per_worker()
            .is_some_and(|want| (0..self.base_per_worker.len()).all(|w| self.per_worker(w) == want))
    }
}

/// How the shift copy is sliced. `Unpermuted` ignores the base head order and
/// exists to show that the invariance checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftSlicing {
    Permuted,
    Unpermuted,
}

/// One entry of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    pub n: usize,
    pub padded_rows: usize,
    /// Elements moved this step, summed over workers, keyed `GROUP/collective`.
    pub volumes: BTreeMap<String, u64>,
    pub compute: u64,
}

#[derive(Debug, Clone)]
pub struct ShiftEngine {
    topology: Topology,
    base: ParallelExecutor,
    /// `None` when the base layout already is full TP.
    shift: Option<ParallelExecutor>,
    threshold: usize,
    footprint: WeightFootprint,
    trace: Vec<StepRecord>,
}

/// Loads both weight copies for `pc` over `weights`.
pub fn load_shift_engine(mc: &ModelConfig, pc: &ParallelConfig, weights: Arc<Weights>) -> Result<ShiftEngine> {
    ShiftEngine::load(mc, pc, weights, ShiftSlicing::Permuted)
}

impl ShiftEngine {
    pub fn load(mc: &ModelConfig, pc: &ParallelConfig, weights: Arc<Weights>, slicing: ShiftSlicing) -> Result<Self> {
        if weights.config != *mc {
            return Err(Error::config("weights were initialised for a different model"));
        }
        let topology = Topology::build(mc, pc)?;
        let base = ParallelExecutor::new(Arc::clone(&weights), topology.base.clone())?;
        let shift = if pc.sp == 1 {
            None
        } else {
            let layout = match slicing {
                ShiftSlicing::Permuted => topology.shift.clone(),
                ShiftSlicing::Unpermuted => topology.unpermuted_shift()?,
            };
            Some(ParallelExecutor::new(weights, layout)?)
        };
        let footprint = WeightFootprint::measure(mc, pc, &base, shift.as_ref());
        Ok(Self {
            topology,
            base,
            shift,
            threshold: pc.shift_threshold,
            footprint,
            trace: Vec::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn footprint(&self) -> &WeightFootprint {
        &self.footprint
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn p(&self) -> usize {
        self.topology.p()
    }

    pub fn executor(&self, branch: Branch) -> &ParallelExecutor {
        match (branch, &self.shift) {
            (Branch::Shift, Some(shift)) => shift,
            _ => &self.base,
        }
    }

    pub fn layout(&self, branch: Branch) -> &Layout {
        self.executor(branch).layout()
    }

    /// Cache shared by both branches.
    pub fn new_cache(&self) -> ClusterCache {
        self.base.new_cache()
    }

    /// Runs `batch` on the branch chosen by the threshold rule.
    pub fn forward(&mut self, batch: &Batch, caches: &mut ClusterCache, ledgers: &mut Ledgers) -> Result<(Branch, StepOutput)> {
        let branch = Branch::choose(batch.len(), self.threshold);
        let out = self.forward_on(branch, batch, caches, ledgers)?;
        Ok((branch, out))
    }

    /// Runs `batch` on an explicit branch.
    pub fn forward_on(
        &mut self,
        branch: Branch,
        batch: &Batch,
        caches: &mut ClusterCache,
        ledgers: &mut Ledgers,
    ) -> Result<StepOutput> {
        let mut step = Ledgers::new(self.p());
        let out = self.executor(branch).forward(batch, caches, &mut step)?;
        ledgers.merge(&step);
        let mut volumes = BTreeMap::new();
        for ledger in step.iter() {
            for (key, counter) in ledger.rows() {
                *volumes.entry(format!("{}/{}", key.group, key.collective)).or_insert(0) += counter.elements;
            }
        }
        self.trace.push(StepRecord {
            step: self.trace.len(),
            branch,
            n: batch.len(),
            padded_rows: out.padded_rows,
            volumes,
            compute: out.compute.iter().map(|c| c.total()).sum(),
        });
        Ok(out)
    }

    /// Decode step for the active requests on the threshold-chosen branch.
    pub fn decode_step(
        &mut self,
        active: &[(RequestId, TokenId)],
        caches: &mut ClusterCache,
        ledgers: &mut Ledgers,
    ) -> Result<(Branch, Vec<TokenId>)> {
        let batch = decode_batch(active, caches)?;
        let (branch, out) = self.forward(&batch, caches, ledgers)?;
        Ok((branch, out.tokens()))
    }

    /// Run trace as JSON lines.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.trace {
            out.push_str(&serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Numerical half of the invariance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBranch {
    pub base_token: TokenId,
    pub shift_token: TokenId,
    pub max_rel_diff: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// One line per disagreement, naming worker, head and position.
    pub diffs: Vec<String>,
    pub cross_branch: Option<CrossBranch>,
}

impl InvarianceReport {
    pub const LOGIT_TOLERANCE: f32 = 1e-4;

    pub fn passed(&self) -> bool {
        self.diffs.is_empty()
            && self
                .cross_branch
                .as_ref()
                .is_some_and(|c| c.base_token == c.shift_token && c.max_rel_diff <= Self::LOGIT_TOLERANCE)
    }
}

impl fmt::Display for InvarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kv invariance: {}", if self.passed() { "ok" } else { "FAILED" })?;
        for d in &self.diffs {
            writeln!(f, "  {d}")?;
        }
        if let Some(c) = &self.cross_branch {
            writeln!(
                f,
                "  cross-branch decode: base token {} shift token {} max rel diff {:.3e}",
                c.base_token, c.shift_token, c.max_rel_diff
            )?;
        }
        Ok(())
    }
}

/// Compares how both branches see the cache populated for `request`, then
/// decodes `next` once through each branch from identical cache copies.
pub fn check_kv_invariance(
    engine: &ShiftEngine,
    caches: &ClusterCache,
    request: RequestId,
    next: TokenId,
) -> InvarianceReport {
    let mc = engine.topology.model;
    let base = engine.layout(Branch::Base);
    let shift = engine.layout(Branch::Shift);
    let mut diffs = Vec::new();

    let (bo, so) = (base.head_owner(), shift.head_owner());
    for q in 0..mc.q_heads {
        if bo[q] != so[q] {
            diffs.push(format!("query head {q}: base worker {} but shift worker {}", bo[q], so[q]));
        }
    }
    for w in 0..engine.p() {
        let (bk, sk) = (base.kv_heads(w), shift.kv_heads(w));
        if bk != sk {
            diffs.push(format!("worker {w}: base KV heads {bk:?} but shift KV heads {sk:?}"));
        }
        let Some(cache) = caches.get(w, request) else {
            diffs.push(format!("worker {w}: no cache for request {request}"));
            continue;
        };
        let want = caches.len_of(request);
        for &kv in sk {
            for l in 0..mc.layers {
                match cache.head(l, kv) {
                    None => diffs.push(format!("worker {w}: shift reads KV head {kv} (layer {l}) which is not cached here")),
                    Some(h) => {
                        if let Some(i) = (0..h.len()).find(|&i| h.positions()[i] != i) {
                            diffs.push(format!("worker {w}: KV head {kv} layer {l} position {i} holds {}", h.positions()[i]));
                        } else if h.len() != want {
                            diffs.push(format!("worker {w}: KV head {kv} layer {l} has {} positions, expected {want}", h.len()));
                        }
                    }
                }
            }
        }
    }

    let cross_branch = (|| -> Result<CrossBranch> {
        let run = |branch: Branch| -> Result<StepOutput> {
            let mut c = caches.clone();
            let mut led = Ledgers::new(engine.p());
            engine.executor(branch).forward(&decode_batch(&[(request, next)], &c)?, &mut c, &mut led)
        };
        let b = run(Branch::Base)?;
        let s = run(Branch::Shift)?;
        Ok(CrossBranch {
            base_token: b.tokens()[0],
            shift_token: s.tokens()[0],
            max_rel_diff: s.logits.max_rel_diff(&b.logits, 1e-3),
        })
    })();
    let cross_branch = match cross_branch {
        Ok(c) => Some(c),
        Err(e) => {
            diffs.push(format!("cross-branch decode failed: {e}"));
            None
        }
    };
    InvarianceReport { diffs, cross_branch }
}
