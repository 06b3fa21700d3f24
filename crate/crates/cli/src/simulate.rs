use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use shiftpar_core::sim::{
    generate_trace, rate_sweep, read_trace, report, simulate, sweep_csv, write_trace, CostModel, Deployment, Policy,
    SchedulerParams, Summary, TraceKind, TraceParams, DEFAULT_RATES,
};
use shiftpar_core::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Tp,
    Sp,
    Shift,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceArg {
    Steady,
    Bursty,
    Batch,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "bursty")]
    pub trace: TraceArg,
    /// Read requests from a JSON-lines file instead of generating them.
    #[arg(long)]
    pub trace_file: Option<PathBuf>,
    /// Baseline arrivals per second.
    #[arg(long, default_value_t = TraceParams::default().rate)]
    pub rate: f64,
    #[arg(long, default_value_t = TraceParams::default().duration)]
    pub duration: f64,
    #[arg(long, default_value_t = TraceParams::default().bursts)]
    pub bursts: usize,
    #[arg(long, default_value_t = TraceParams::default().burst_rate)]
    pub burst_rate: f64,
    #[arg(long, default_value_t = TraceParams::default().burst_duration)]
    pub burst_duration: f64,
    /// Requests of a batch trace.
    #[arg(long, default_value_t = TraceParams::default().batch_requests)]
    pub requests: usize,
    #[arg(long, default_value_t = TraceParams::default().input_len)]
    pub input_len: usize,
    #[arg(long, default_value_t = TraceParams::default().output_len)]
    pub output_len: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 8)]
    pub workers: usize,
    /// Shift threshold in tokens; defaults to the cost model's break-even
    /// decode batch.
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run every policy on steady traces at each `--rates` value instead.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATES.to_vec())]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = CostModel::default().compute_rate)]
    pub compute_rate: f64,
    #[arg(long, default_value_t = CostModel::default().bandwidth)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = CostModel::default().memory_rate)]
    pub memory_rate: f64,
    #[arg(long, default_value_t = CostModel::default().step_overhead)]
    pub overhead: f64,
    #[arg(long, default_value_t = SchedulerParams::default().token_budget)]
    pub token_budget: usize,
    #[arg(long, default_value_t = SchedulerParams::default().max_num_seqs)]
    pub max_num_seqs: usize,
    /// Throughput bin width, seconds.
    #[arg(long, default_value_t = SchedulerParams::default().interval)]
    pub interval: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn summary_line(name: &str, s: &Summary) -> String {
    format!(
        "{name:>6}: requests {} median TTFT {:.2} ms median TPOT {:.2} ms mean completion {:.3} s peak throughput {:.0} tok/s combined {:.0} tok/s",
        s.requests,
        s.median_ttft * 1e3,
        s.median_tpot * 1e3,
        s.mean_completion,
        s.peak_throughput,
        s.combined_throughput
    )
}

pub fn run(args: &SimulateArgs) -> Result<()> {
    let mc = ModelConfig::SIM;
    let cost = CostModel {
        compute_rate: args.compute_rate,
        bandwidth: args.bandwidth,
        memory_rate: args.memory_rate,
        step_overhead: args.overhead,
    };
    cost.validate()?;
    let sched = SchedulerParams {
        token_budget: args.token_budget,
        max_num_seqs: args.max_num_seqs,
        interval: args.interval,
    };
    let params = TraceParams {
        rate: args.rate,
        duration: args.duration,
        bursts: args.bursts,
        burst_rate: args.burst_rate,
        burst_duration: args.burst_duration,
        batch_requests: args.requests,
        input_len: args.input_len,
        output_len: args.output_len,
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
    }

    if args.sweep {
        let points = rate_sweep(&mc, args.workers, &args.rates, &params, &cost, &sched, args.seed)?;
        let csv = sweep_csv(&points);
        match &args.out {
            Some(dir) => fs::write(dir.join("sweep.csv"), &csv)?,
            None => print!("{csv}"),
        }
        return Ok(());
    }

    let kind = match args.trace {
        TraceArg::Steady => TraceKind::Steady,
        TraceArg::Bursty => TraceKind::Bursty,
        TraceArg::Batch => TraceKind::Batch,
    };
    let trace = match &args.trace_file {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_trace(BufReader::new(f))?
        }
        None => generate_trace(kind, &params, args.seed)?,
    };
    let policies: Vec<Policy> = match args.policy {
        PolicyArg::Tp => vec![Policy::Tp],
        PolicyArg::Sp => vec![Policy::Sp],
        PolicyArg::Shift => vec![Policy::Shift],
        PolicyArg::All => Policy::ALL.to_vec(),
    };
    let source = args
        .trace_file
        .as_ref()
        .map_or_else(|| kind.to_string(), |p| p.display().to_string());
    println!("trace {source}: {} requests", trace.len());
    let mut summaries = Vec::new();
    for policy in policies {
        let mut d = Deployment::new(&mc, policy, args.workers, args.threshold)?;
        if args.threshold.is_none() {
            d = d.with_break_even(&cost, params.input_len, sched.token_budget);
        }
        let m = simulate(&d, &trace, &cost, &sched)?;
        let s = report(&m);
        println!("{}", summary_line(&policy.to_string(), &s));
        if let Some(dir) = &args.out {
            let mut lines = String::new();
            for r in &m.requests {
                let _ = writeln!(lines, "{}", serde_json::to_string(r)?);
            }
            fs::write(dir.join(format!("requests_{policy}.jsonl")), lines)?;
            let mut csv = String::from("interval_start_s,tokens_per_s\n");
            for (i, t) in m.throughput.iter().enumerate() {
                let _ = writeln!(csv, "{},{t}", i as f64 * m.interval);
            }
            fs::write(dir.join(format!("throughput_{policy}.csv")), csv)?;
        }
        summaries.push(serde_json::json!({
            "policy": policy,
            "threshold": d.threshold,
            "steps": m.steps,
            "base_steps": m.base_steps,
            "shift_steps": m.shift_steps,
            "summary": s,
        }));
    }
    if let Some(dir) = &args.out {
        let mut f = File::create(dir.join("trace.jsonl"))?;
        write_trace(&trace, &mut f)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    }
    Ok(())
}
