//! Serving simulator: request traces, a continuous-batching scheduler, and
//! an analytic step-time model driven by the executor's exact compute and
//! communication counts.

pub mod cost;
pub mod engine;
pub mod metrics;
pub mod trace;

use serde::{Deserialize, Serialize};

pub use cost::{CostModel, Segment, StepCost, StepShape};
pub use engine::{simulate, Deployment, Policy, SchedulerParams};
pub use metrics::{percentile, report, RequestOutcome, RunMetrics, Summary};
pub use trace::{generate_trace, read_trace, write_trace, Request, TraceKind, TraceParams};

use crate::config::ModelConfig;
use crate::error::Result;

/// One policy at one arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub policy: Policy,
    pub summary: Summary,
}

/// Steady-trace arrival rates used by the default sweep, requests/second.
pub const DEFAULT_RATES: [f64; 7] = [0.5, 2.0, 8.0, 16.0, 32.0, 48.0, 64.0];

/// Runs every policy on a steady trace at each rate. The shift policy uses
/// the cost model's break-even threshold.
pub fn rate_sweep(
    mc: &ModelConfig,
    workers: usize,
    rates: &[f64],
    params: &TraceParams,
    cost: &CostModel,
    sched: &SchedulerParams,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &rate in rates {
        let trace = generate_trace(TraceKind::Steady, &TraceParams { rate, ..*params }, seed)?;
        for policy in Policy::ALL {
            let d = Deployment::new(mc, policy, workers, None)?.with_break_even(cost, params.input_len, sched.token_budget);
            let m = simulate(&d, &trace, cost, sched)?;
            out.push(SweepPoint {
                rate,
                policy,
                summary: report(&m),
            });
        }
    }
    Ok(out)
}

/// CSV of a sweep, one row per (rate, policy).
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("rate,policy,requests,mean_completion_s,median_ttft_s,median_tpot_s,peak_throughput,combined_throughput\n");
    for p in points {
        let m = &p.summary;
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.1},{:.1}\n",
            p.rate, p.policy, m.requests, m.mean_completion, m.median_ttft, m.median_tpot, m.peak_throughput, m.combined_throughput
        ));
    }
    s
}
