//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use shiftpar_core::sim::StepShape;
use shiftpar_core::{Batch, ModelConfig, ParallelConfig, ParallelExecutor, Result, Sequence, Topology, Weights};

/// Executor for the base layout of `sp` x `tp` plus a prompt of `n` tokens.
pub fn prefill_fixture(mc: &ModelConfig, sp: usize, tp: usize, n: usize) -> Result<(ParallelExecutor, Batch)> {
    let pc = ParallelConfig::new(sp, tp)?;
    let topo = Topology::build(mc, &pc)?;
    let w = Arc::new(Weights::init(mc, 0)?);
    let ex = ParallelExecutor::new(w, topo.base)?;
    let prompt = Sequence::synthetic(n, mc.vocab, 0);
    Ok((ex, Batch::prompt(0, &prompt.tokens, 0)))
}

/// A decode step over `seqs` sequences of `context` tokens each.
pub fn decode_shape(seqs: usize, context: usize) -> StepShape {
    let mut b = Batch::default();
    for r in 0..seqs {
        b.extend(Batch::prompt(r as u64, &[0], context));
    }
    StepShape::of_batch(&b)
}
