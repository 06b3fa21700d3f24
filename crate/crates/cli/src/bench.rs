use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use clap::{Args, ValueEnum};
use shiftpar_core::parallel::{ComputeTally, ParallelExecutor};
use shiftpar_core::{CollectiveKind, GroupKind, Ledgers, ModelConfig, ModelPreset, ParallelConfig, Sequence, Topology, Weights};

use crate::Preset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Sp,
    Tp,
    N,
    All,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub sweep: Sweep,
    #[arg(long, value_enum, default_value = "gqa")]
    pub model: Preset,
    /// Prompt tokens for the SP and TP sweeps.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub decode_steps: usize,
    /// Layout for the n sweep.
    #[arg(long, default_value_t = 2)]
    pub sp: usize,
    #[arg(long, default_value_t = 2)]
    pub tp: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const HEADER: &str =
    "config,n,compute_elements,comm_elements,steps,attention_elements,all_to_all_per_worker,all_reduce_per_worker";

/// Prefill plus decode on one layout; counts are for worker 0.
fn measure(mc: &ModelConfig, w: &Arc<Weights>, sp: usize, tp: usize, n: usize, decode: usize, seed: u64) -> Result<String> {
    let pc = ParallelConfig::new(sp, tp)?;
    let topo = Topology::build(mc, &pc)?;
    let ex = ParallelExecutor::new(Arc::clone(w), topo.base)?;
    let mut caches = ex.new_cache();
    let mut led = Ledgers::new(pc.p());
    let prompt = Sequence::synthetic(n, mc.vocab, seed);
    let (mut tok, out) = ex.prefill(0, &prompt.tokens, &mut caches, &mut led)?;
    let mut compute = out.compute[0];
    for _ in 0..decode {
        let (next, out) = ex.decode_step(&[(0, tok)], &mut caches, &mut led)?;
        tok = next[0];
        compute.add(&out.compute[0]);
    }
    let ComputeTally { attention, .. } = compute;
    let l = led.worker(0);
    Ok(format!(
        "{pc},{n},{},{},{},{attention},{},{}",
        compute.total(),
        l.elements(),
        1 + decode,
        l.total(GroupKind::Sp, CollectiveKind::AllToAll).elements,
        l.total(GroupKind::Tp, CollectiveKind::AllReduce).elements,
    ))
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let base = ModelPreset::from(args.model).config();
    let mut lengths = vec![16, 32, 64, 128, 256];
    lengths.push(args.n);
    let mc = ModelConfig {
        max_context: lengths.iter().max().copied().unwrap_or(0) + args.decode_steps + 1,
        ..base
    };
    let w = Arc::new(Weights::init(&mc, args.seed)?);
    let mut csv = String::from(HEADER);
    csv.push('\n');
    let mut row = |sp, tp, n| -> Result<()> {
        let line = measure(&mc, &w, sp, tp, n, args.decode_steps, args.seed)?;
        let _ = writeln!(csv, "{line}");
        Ok(())
    };
    if matches!(args.sweep, Sweep::Sp | Sweep::All) {
        for sp in [2, 4, 8] {
            row(sp, 1, args.n)?;
        }
    }
    if matches!(args.sweep, Sweep::Tp | Sweep::All) {
        for tp in [2, 4, 8] {
            row(1, tp, args.n)?;
        }
    }
    if matches!(args.sweep, Sweep::N | Sweep::All) {
        for n in [16, 32, 64, 128, 256] {
            row(args.sp, args.tp, n)?;
        }
    }
    match &args.out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
