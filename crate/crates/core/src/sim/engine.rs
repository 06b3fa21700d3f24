//! Continuous-batching event loop.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ParallelConfig};
use crate::error::{Error, Result};
use crate::shift::Branch;
use crate::sim::cost::{CostModel, Segment, StepShape};
use crate::sim::metrics::{RequestOutcome, RunMetrics};
use crate::sim::trace::Request;
use crate::topology::{Layout, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// `(SP=1, TP=P)` for every step.
    Tp,
    /// `(SP=P, TP=1)` for every step.
    Sp,
    /// `(SP=P, TP=1)` base with full-TP shift under the threshold.
    Shift,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Tp, Policy::Sp, Policy::Shift];
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(Policy::Tp),
            "sp" => Ok(Policy::Sp),
            "shift" => Ok(Policy::Shift),
            other => Err(Error::config(format!("unknown policy {other:?}"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Tp => "tp",
            Policy::Sp => "sp",
            Policy::Shift => "shift",
        })
    }
}

/// Layouts a policy dispatches between.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub model: ModelConfig,
    pub base: Layout,
    pub shift: Option<Layout>,
    pub threshold: usize,
}

impl Deployment {
    /// `threshold` defaults to the worker count.
    pub fn new(mc: &ModelConfig, policy: Policy, workers: usize, threshold: Option<usize>) -> Result<Self> {
        let threshold = threshold.unwrap_or(workers);
        let pc = match policy {
            Policy::Tp => ParallelConfig::with_threshold(1, workers, threshold)?,
            Policy::Sp | Policy::Shift => ParallelConfig::with_threshold(workers, 1, threshold)?,
        };
        let topo = Topology::build(mc, &pc)?;
        Ok(Self {
            model: *mc,
            base: topo.base,
            shift: (policy == Policy::Shift).then_some(topo.shift),
            threshold,
        })
    }

    /// Smallest decode batch (one row per request at `context`) for which
    /// the base layout is cheaper than the shift layout under `cost`, capped
    /// at `limit`. Batches up to the returned size stay on the shift layout.
    pub fn break_even(&self, cost: &CostModel, context: usize, limit: usize) -> usize {
        let Some(shift) = &self.shift else {
            return self.threshold;
        };
        let decode = |n: usize| StepShape {
            segments: vec![
                Segment {
                    start: context,
                    len: 1,
                    sample: true,
                };
                n
            ],
        };
        (1..=limit)
            .find(|&n| {
                let shape = decode(n);
                cost.step_cost(&self.model, &self.base, &shape).seconds
                    < cost.step_cost(&self.model, shift, &shape).seconds
            })
            .map_or(limit, |n| n - 1)
    }

    /// Sets the threshold to [`Deployment::break_even`].
    pub fn with_break_even(mut self, cost: &CostModel, context: usize, limit: usize) -> Self {
        self.threshold = self.break_even(cost, context, limit);
        self
    }

    pub fn branch(&self, tokens: usize) -> Branch {
        match self.shift {
            Some(_) => Branch::choose(tokens, self.threshold),
            None => Branch::Base,
        }
    }

    pub fn layout(&self, branch: Branch) -> &Layout {
        match (branch, &self.shift) {
            (Branch::Shift, Some(s)) => s,
            _ => &self.base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    /// Tokens per step, decode first then prefill chunks.
    pub token_budget: usize,
    pub max_num_seqs: usize,
    /// Width of the throughput bins, seconds.
    pub interval: f64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            token_budget: 4096,
            max_num_seqs: 256,
            interval: 1.0,
        }
    }
}

struct Active {
    req: Request,
    prefilled: usize,
    generated: usize,
    first_token: f64,
}

/// Runs `trace` (sorted by arrival) through `deployment`.
pub fn simulate(
    deployment: &Deployment,
    trace: &[Request],
    cost: &CostModel,
    params: &SchedulerParams,
) -> Result<RunMetrics> {
    cost.validate()?;
    if params.token_budget == 0 || params.max_num_seqs == 0 || !(params.interval > 0.0) {
        return Err(Error::config("scheduler budget, sequence limit and interval must be positive"));
    }
    if trace.windows(2).any(|w| w[0].arrival > w[1].arrival) {
        return Err(Error::config("trace must be sorted by arrival"));
    }
    let mut m = RunMetrics {
        interval: params.interval,
        ..RunMetrics::default()
    };
    let Some(first) = trace.first() else {
        return Ok(m);
    };
    m.start = first.arrival;
    let mut now = first.arrival;
    let mut next = 0;
    let mut waiting: VecDeque<Request> = VecDeque::new();
    let mut running: Vec<Active> = Vec::new();
    let mut bins: Vec<f64> = Vec::new();

    loop {
        while next < trace.len() && trace[next].arrival <= now {
            waiting.push_back(trace[next]);
            next += 1;
        }
        if running.is_empty() && waiting.is_empty() {
            if next == trace.len() {
                break;
            }
            now = trace[next].arrival;
            continue;
        }
        while running.len() < params.max_num_seqs {
            let Some(req) = waiting.pop_front() else { break };
            running.push(Active {
                req,
                prefilled: 0,
                generated: 0,
                first_token: 0.0,
            });
        }

        let mut budget = params.token_budget;
        let mut plan: Vec<(usize, usize)> = Vec::new();
        let mut segments = Vec::new();
        for (i, a) in running.iter().enumerate() {
            if budget > 0 && a.prefilled == a.req.input_len {
                segments.push(Segment {
                    start: a.req.input_len + a.generated - 1,
                    len: 1,
                    sample: true,
                });
                plan.push((i, 1));
                budget -= 1;
            }
        }
        for (i, a) in running.iter().enumerate() {
            if budget > 0 && a.prefilled < a.req.input_len {
                let len = (a.req.input_len - a.prefilled).min(budget);
                segments.push(Segment {
                    start: a.prefilled,
                    len,
                    sample: a.prefilled + len == a.req.input_len,
                });
                plan.push((i, len));
                budget -= len;
            }
        }
        let shape = StepShape { segments };
        let tokens = shape.tokens();
        let branch = deployment.branch(tokens);
        let step = cost.step_cost(&deployment.model, deployment.layout(branch), &shape);
        now += step.seconds;
        m.busy_time += step.seconds;
        m.steps += 1;
        match branch {
            Branch::Base => m.base_steps += 1,
            Branch::Shift => m.shift_steps += 1,
        }

        let mut produced = 0u64;
        for (i, len) in plan {
            let a = &mut running[i];
            if a.prefilled < a.req.input_len {
                a.prefilled += len;
                produced += len as u64;
                if a.prefilled == a.req.input_len {
                    a.generated = 1;
                    a.first_token = now;
                    produced += 1;
                }
            } else {
                a.generated += 1;
                produced += 1;
            }
        }
        let bin = ((now - m.start) / params.interval) as usize;
        if bins.len() <= bin {
            bins.resize(bin + 1, 0.0);
        }
        bins[bin] += produced as f64;
        m.tokens += produced;

        running.retain(|a| {
            let done = a.prefilled == a.req.input_len && a.generated == a.req.output_len;
            if done {
                m.requests.push(RequestOutcome {
                    id: a.req.id,
                    arrival: a.req.arrival,
                    input_len: a.req.input_len,
                    output_len: a.req.output_len,
                    first_token: a.first_token,
                    completion: now,
                });
            }
            !done
        });
    }
    m.end = now;
    m.throughput = bins.into_iter().map(|t| t / params.interval).collect();
    m.requests.sort_by_key(|r| r.id);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::metrics::report;
    use crate::sim::trace::{generate_trace, TraceKind, TraceParams};

    fn one(input: usize, output: usize) -> Vec<Request> {
        vec![Request {
            id: 0,
            arrival: 0.5,
            input_len: input,
            output_len: output,
        }]
    }

    #[test]
    fn empty_trace_gives_zero_metrics() {
        let d = Deployment::new(&ModelConfig::SIM, Policy::Shift, 8, None).unwrap();
        let m = simulate(&d, &[], &CostModel::default(), &SchedulerParams::default()).unwrap();
        assert_eq!(m.steps, 0);
        assert_eq!(report(&m).requests, 0);
    }

    #[test]
    fn single_request_closed_form() {
        let cm = CostModel::default();
        let mc = ModelConfig::SIM;
        for policy in Policy::ALL {
            let d = Deployment::new(&mc, policy, 8, None).unwrap();
            let m = simulate(&d, &one(1000, 4), &cm, &SchedulerParams::default()).unwrap();
            let prefill = StepShape {
                segments: vec![Segment { start: 0, len: 1000, sample: true }],
            };
            let t_prefill = cm.step_cost(&mc, d.layout(d.branch(1000)), &prefill).seconds;
            let r = m.requests[0];
            assert!((r.ttft() - t_prefill).abs() < 1e-12, "{policy}");
            let decode: f64 = (0..3)
                .map(|k| {
                    let s = StepShape {
                        segments: vec![Segment { start: 1000 + k, len: 1, sample: true }],
                    };
                    cm.step_cost(&mc, d.layout(d.branch(1)), &s).seconds
                })
                .sum();
            assert!((r.tpot() - decode / 3.0).abs() < 1e-12, "{policy}");
        }
    }

    #[test]
    fn long_prompt_is_chunked() {
        let d = Deployment::new(&ModelConfig::SIM, Policy::Tp, 8, None).unwrap();
        let params = SchedulerParams {
            token_budget: 512,
            ..SchedulerParams::default()
        };
        let m = simulate(&d, &one(2000, 1), &CostModel::default(), &params).unwrap();
        assert_eq!(m.steps, 4);
        assert_eq!(m.tokens, 2001);
    }

    #[test]
    fn tokens_are_conserved_and_busy_fits_span() {
        let trace = generate_trace(
            TraceKind::Bursty,
            &TraceParams {
                duration: 40.0,
                burst_duration: 2.0,
                input_len: 512,
                output_len: 32,
                ..TraceParams::default()
            },
            3,
        )
        .unwrap();
        for policy in Policy::ALL {
            let d = Deployment::new(&ModelConfig::SIM, policy, 8, None).unwrap();
            let m = simulate(&d, &trace, &CostModel::default(), &SchedulerParams::default()).unwrap();
            assert_eq!(m.requests.len(), trace.len());
            let want: u64 = trace.iter().map(|r| (r.input_len + r.output_len) as u64).sum();
            assert_eq!(m.tokens, want);
            assert!(m.busy_time <= m.makespan() + 1e-9);
            for r in &m.requests {
                assert!(r.first_token >= r.arrival && r.completion >= r.first_token);
            }
            let again = simulate(&d, &trace, &CostModel::default(), &SchedulerParams::default()).unwrap();
            assert_eq!(again, m);
        }
    }

    #[test]
    fn batch_throughput_is_tokens_over_makespan() {
        let trace = generate_trace(
            TraceKind::Batch,
            &TraceParams {
                batch_requests: 64,
                input_len: 256,
                output_len: 16,
                ..TraceParams::default()
            },
            0,
        )
        .unwrap();
        let d = Deployment::new(&ModelConfig::SIM, Policy::Shift, 8, None).unwrap();
        let m = simulate(&d, &trace, &CostModel::default(), &SchedulerParams::default()).unwrap();
        let s = report(&m);
        assert_eq!(s.combined_throughput, m.tokens as f64 / m.makespan());
        assert_eq!(m.busy_time, m.makespan());
    }

    #[test]
    fn break_even_splits_decode_costs() {
        let cm = CostModel::default();
        let d = Deployment::new(&ModelConfig::SIM, Policy::Shift, 8, None).unwrap();
        let t = d.break_even(&cm, 2048, 4096);
        assert!(t > 8 && t < 4096, "{t}");
        let shape = |n: usize| StepShape {
            segments: vec![Segment { start: 2048, len: 1, sample: true }; n],
        };
        let cost = |l: &Layout, n| cm.step_cost(&d.model, l, &shape(n)).seconds;
        let shift = d.shift.as_ref().unwrap();
        assert!(cost(&d.base, t) >= cost(shift, t));
        assert!(cost(&d.base, t + 1) < cost(shift, t + 1));
        let tp = Deployment::new(&ModelConfig::SIM, Policy::Tp, 8, None).unwrap();
        assert_eq!(tp.break_even(&cm, 2048, 4096), 8);
    }

    #[test]
    fn shift_dispatch_uses_both_branches() {
        let d = Deployment::new(&ModelConfig::SIM, Policy::Shift, 8, None).unwrap();
        let m = simulate(&d, &one(100, 5), &CostModel::default(), &SchedulerParams::default()).unwrap();
        assert_eq!((m.base_steps, m.shift_steps), (1, 4));
    }
}
