use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use shiftpar_core::model::{reference_generate, TokenId};
use shiftpar_core::parallel::{decode_batch, kv_replicate, Batch, ParallelExecutor};
use shiftpar_core::shift::{check_kv_invariance, Branch, ShiftEngine, ShiftSlicing};
use shiftpar_core::tensor::{init_weights, Matrix};
use shiftpar_core::topology::KvRouting;
use shiftpar_core::{Error, Ledgers, ModelConfig, ModelPreset, ParallelConfig, Sequence, Topology, Weights};

use crate::{ConfigArgs, Status};

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Tokens above which a step runs in the base layout; defaults to SP*TP.
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long, default_value_t = 12)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Load weights written by `shiftpar weights` instead of initialising.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Directory for report.txt, ledger.csv and trace.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const LOGIT_TOLERANCE: f32 = 1e-4;

/// Picks the model preset and builds the topology.
pub fn resolve(args: &ConfigArgs) -> Result<(ModelConfig, Topology)> {
    let pc = ParallelConfig::new(args.sp, args.tp)?;
    let presets: Vec<ModelPreset> = match args.model {
        Some(p) => vec![p.into()],
        None => vec![ModelPreset::Tiny, ModelPreset::Gqa, ModelPreset::Hex],
    };
    let mut reasons = Vec::new();
    for preset in presets {
        let mut mc = preset.config();
        if let Some(kv) = args.kv_heads {
            mc = mc.with_kv_heads(kv);
        }
        match mc.validate().and_then(|()| Topology::build(&mc, &pc)) {
            Ok(topo) => return Ok((mc, topo)),
            Err(e) => reasons.push(format!("{preset}: {e}")),
        }
    }
    Err(Error::Unsupported(format!("no model preset supports {pc}: {}", reasons.join("; "))).into())
}

/// Largest absolute error relative to the largest reference value.
fn rel_err(got: &Matrix, want: &Matrix) -> f32 {
    let scale = want.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let diff = got.data().iter().zip(want.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

struct Checks {
    report: String,
    failed: usize,
}

impl Checks {
    fn record(&mut self, name: &str, ok: bool, detail: impl AsRef<str>) {
        if !ok {
            self.failed += 1;
        }
        let _ = writeln!(self.report, "[{}] {name}: {}", if ok { "ok" } else { "FAIL" }, detail.as_ref());
    }
}

fn run_engine(
    engine: &mut ShiftEngine,
    prompt: &[TokenId],
    steps: usize,
    force: Option<Branch>,
    ledgers: &mut Ledgers,
) -> Result<(Vec<TokenId>, Matrix)> {
    let mut caches = engine.new_cache();
    let prefill = Batch::prompt(0, prompt, 0);
    let mut out = match force {
        Some(b) => engine.forward_on(b, &prefill, &mut caches, ledgers)?,
        None => engine.forward(&prefill, &mut caches, ledgers)?.1,
    };
    let mut tokens = out.tokens();
    for _ in 0..steps {
        let batch = decode_batch(&[(0, *tokens.last().expect("prefill samples"))], &caches)?;
        out = match force {
            Some(b) => engine.forward_on(b, &batch, &mut caches, ledgers)?,
            None => engine.forward(&batch, &mut caches, ledgers)?.1,
        };
        tokens.push(out.tokens()[0]);
    }
    Ok((tokens, out.logits))
}

pub fn run(args: &VerifyArgs) -> Result<Status> {
    let (mc, topo) = resolve(&args.config)?;
    let pc = match args.threshold {
        Some(t) => ParallelConfig::with_threshold(args.config.sp, args.config.tp, t)?,
        None => topo.parallel,
    };
    let weights = match &args.weights {
        Some(dir) => {
            let w = Weights::load(dir).with_context(|| format!("loading weights from {}", dir.display()))?;
            if w.config != mc {
                return Err(Error::Config(format!("weights in {} are for a different model", dir.display())).into());
            }
            w
        }
        None => Weights::init(&mc, args.seed)?,
    };
    let weights = Arc::new(weights);
    let prompt = Sequence::synthetic(args.prompt_len, mc.vocab, args.seed);
    let reference = reference_generate(&weights, &prompt, args.steps)?;

    let mut checks = Checks {
        report: String::new(),
        failed: 0,
    };
    let _ = writeln!(
        checks.report,
        "model layers={} hidden={} q_heads={} kv_heads={} head_dim={}",
        mc.layers, mc.hidden, mc.q_heads, mc.kv_heads, mc.head_dim
    );
    checks.report.push_str(&topo.dump());
    let _ = writeln!(checks.report, "threshold {}", pc.shift_threshold);
    let _ = writeln!(checks.report, "reference tokens {:?}", reference.tokens);

    let base = ParallelExecutor::new(Arc::clone(&weights), topo.base.clone())?;
    let mut led = Ledgers::new(pc.p());
    let mut caches = base.new_cache();
    let (mut tok, mut out) = base.prefill(0, &prompt.tokens, &mut caches, &mut led)?;
    let mut tokens = vec![tok];
    for _ in 0..args.steps {
        let (next, o) = base.decode_step(&[(0, tok)], &mut caches, &mut led)?;
        tok = next[0];
        out = o;
        tokens.push(tok);
    }
    let err = rel_err(&out.logits, &reference.last_logits);
    checks.record(
        "base equivalence",
        tokens == reference.tokens && err <= LOGIT_TOLERANCE,
        format!("tokens {tokens:?}, final logits relative error {err:.2e}"),
    );
    let rebuilt = caches.reconstruct(0)?;
    let cache_err = rebuilt.rel_diff(&reference.cache);
    checks.record(
        "cache union",
        cache_err.is_some_and(|e| e <= LOGIT_TOLERANCE),
        match cache_err {
            Some(e) => format!("authoritative KV replicas reassemble the reference cache, relative error {e:.2e}"),
            None => "heads or positions differ from the reference cache".into(),
        },
    );

    if let KvRouting::Replicated { aa_size, ag_size, .. } = &topo.base.kv_routing {
        let (hd, chunk, nk) = (mc.head_dim, 3, *aa_size);
        let local: Vec<Matrix> = (0..pc.p())
            .map(|w| init_weights(args.seed ^ (w as u64 + 1), (chunk, 2 * nk * hd)))
            .collect();
        let mut scratch = Ledgers::new(pc.p());
        let got = kv_replicate(&topo.base, &local, hd, chunk, false, &mut scratch)?;
        let ok = (0..pc.p()).all(|w| {
            let group = topo.base.sp_group_of(w);
            let parts: Vec<Matrix> = group.iter().map(|&m| local[m].clone()).collect();
            let full = Matrix::concat_rows(&parts).expect("equal widths");
            let head = topo.base.sp_rank(w) / ag_size;
            got[w] == full.select_col_ranges(&[head * hd..(head + 1) * hd, (nk + head) * hd..(nk + head + 1) * hd])
        });
        checks.record("kv replication", ok, format!("SP_AA={aa_size} SP_AG={ag_size} vs gather-then-slice"));
    }

    let mut engine = ShiftEngine::load(&mc, &pc, Arc::clone(&weights), ShiftSlicing::Permuted)?;
    let mut engine_led = Ledgers::new(pc.p());
    let (mixed, _) = run_engine(&mut engine, &prompt.tokens, args.steps, None, &mut engine_led)?;
    let trace = engine.trace_jsonl()?;
    let branches: Vec<String> = engine.trace().iter().map(|r| r.branch.to_string()).collect();
    checks.record(
        "shift dispatch",
        mixed == reference.tokens,
        format!("branches [{}]", branches.join(", ")),
    );
    let (full_tp, logits) = run_engine(&mut engine, &prompt.tokens, args.steps, Some(Branch::Shift), &mut Ledgers::new(pc.p()))?;
    let err = rel_err(&logits, &reference.last_logits);
    checks.record(
        "shift layout equivalence",
        full_tp == reference.tokens && err <= LOGIT_TOLERANCE,
        format!("final logits relative error {err:.2e}"),
    );

    let mut caches = engine.new_cache();
    let out = engine.forward_on(Branch::Base, &Batch::prompt(0, &prompt.tokens, 0), &mut caches, &mut Ledgers::new(pc.p()))?;
    let report = check_kv_invariance(&engine, &caches, 0, out.tokens()[0]);
    checks.record("kv invariance", report.passed(), report.to_string().trim_end().replace('\n', "\n    "));

    let f = engine.footprint();
    let predicted = f.predicted_per_worker();
    let detail = format!(
        "per worker {:?}, formula {}, overhead {}",
        (0..pc.p()).map(|w| f.per_worker(w)).collect::<Vec<_>>(),
        predicted.map_or("n/a".into(), |p| p.to_string()),
        f.overhead_fraction
    );
    if f.matches_formula() {
        checks.record("weight footprint", true, detail);
    } else {
        let _ = writeln!(checks.report, "[info] weight footprint: {detail} (KV projections replicated across TP ranks)");
    }

    let passed = checks.failed == 0;
    let _ = writeln!(checks.report, "verify {}: {}", pc, if passed { "passed" } else { "FAILED" });
    print!("{}", checks.report);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), &checks.report)?;
        fs::write(dir.join("ledger.csv"), engine_led.dump_csv())?;
        fs::write(dir.join("trace.jsonl"), trace)?;
    }
    Ok(if passed { Status::Ok } else { Status::Failed })
}
