//! Per-request outcomes and their summary.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: u64,
    pub arrival: f64,
    pub input_len: usize,
    pub output_len: usize,
    pub first_token: f64,
    pub completion: f64,
}

impl RequestOutcome {
    pub fn ttft(&self) -> f64 {
        self.first_token - self.arrival
    }

    /// Mean time per output token after the first; zero for one-token
    /// outputs.
    pub fn tpot(&self) -> f64 {
        if self.output_len <= 1 {
            0.0
        } else {
            (self.completion - self.first_token) / (self.output_len - 1) as f64
        }
    }

    pub fn latency(&self) -> f64 {
        self.completion - self.arrival
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub requests: Vec<RequestOutcome>,
    /// Tokens (prompt and response) finished per interval.
    pub throughput: Vec<f64>,
    pub interval: f64,
    /// Sum of step durations.
    pub busy_time: f64,
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub base_steps: usize,
    pub shift_steps: usize,
    pub tokens: u64,
}

impl RunMetrics {
    pub fn makespan(&self) -> f64 {
        self.end - self.start
    }

    /// Prompt plus response tokens per second over the whole run.
    pub fn combined_throughput(&self) -> f64 {
        let span = self.makespan();
        if span > 0.0 {
            self.tokens as f64 / span
        } else {
            0.0
        }
    }
}

/// Nearest-rank percentile, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub median_ttft: f64,
    pub median_tpot: f64,
    /// Mean arrival-to-completion latency.
    pub mean_completion: f64,
    pub peak_throughput: f64,
    pub combined_throughput: f64,
    pub makespan: f64,
}

pub fn report(m: &RunMetrics) -> Summary {
    let ttft: Vec<f64> = m.requests.iter().map(RequestOutcome::ttft).collect();
    let tpot: Vec<f64> = m.requests.iter().map(RequestOutcome::tpot).collect();
    let mean_completion = if m.requests.is_empty() {
        0.0
    } else {
        m.requests.iter().map(RequestOutcome::latency).sum::<f64>() / m.requests.len() as f64
    };
    Summary {
        requests: m.requests.len(),
        median_ttft: percentile(&ttft, 0.5),
        median_tpot: percentile(&tpot, 0.5),
        mean_completion,
        peak_throughput: m.throughput.iter().copied().fold(0.0, f64::max),
        combined_throughput: m.combined_throughput(),
        makespan: m.makespan(),
    }
}
