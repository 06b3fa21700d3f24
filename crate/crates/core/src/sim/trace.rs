//! Request traces: generation and JSON-lines I/O.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Seconds.
    pub arrival: f64,
    pub input_len: usize,
    pub output_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Steady,
    Bursty,
    Batch,
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steady" => Ok(TraceKind::Steady),
            "bursty" => Ok(TraceKind::Bursty),
            "batch" => Ok(TraceKind::Batch),
            other => Err(Error::config(format!("unknown trace kind {other:?}"))),
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::Steady => "steady",
            TraceKind::Bursty => "bursty",
            TraceKind::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    /// Baseline arrivals per second.
    pub rate: f64,
    /// Seconds of arrivals.
    pub duration: f64,
    pub bursts: usize,
    /// Extra arrivals per second inside a burst window.
    pub burst_rate: f64,
    /// Seconds per burst window.
    pub burst_duration: f64,
    /// Requests of a batch trace.
    pub batch_requests: usize,
    pub input_len: usize,
    pub output_len: usize,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            rate: 2.0,
            duration: 120.0,
            bursts: 4,
            burst_rate: 60.0,
            burst_duration: 5.0,
            batch_requests: 1920,
            input_len: 2048,
            output_len: 256,
        }
    }
}

impl TraceParams {
    pub fn validate(&self, kind: TraceKind) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(Error::config("input and output lengths must be positive"));
        }
        match kind {
            TraceKind::Batch => Ok(()),
            _ if !(self.rate > 0.0 && self.duration > 0.0) => Err(Error::config("rate and duration must be positive")),
            TraceKind::Bursty if self.bursts > 0 && !(self.burst_rate > 0.0 && self.burst_duration > 0.0) => {
                Err(Error::config("burst rate and duration must be positive"))
            }
            TraceKind::Bursty if self.bursts as f64 * self.burst_duration > self.duration => {
                Err(Error::config("burst windows do not fit in the trace duration"))
            }
            _ => Ok(()),
        }
    }

    /// Start times of the burst windows: evenly spaced, centred in equal
    /// slices of the duration.
    pub fn burst_windows(&self) -> Vec<(f64, f64)> {
        let slice = self.duration / self.bursts.max(1) as f64;
        (0..self.bursts)
            .map(|i| {
                let start = (i as f64 + 0.5) * slice - self.burst_duration / 2.0;
                (start, start + self.burst_duration)
            })
            .collect()
    }
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64, from: f64, to: f64, out: &mut Vec<f64>) {
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = from;
    loop {
        t += exp.sample(rng);
        if t >= to {
            break;
        }
        out.push(t);
    }
}

/// Deterministic trace of `kind`, sorted by arrival.
pub fn generate_trace(kind: TraceKind, params: &TraceParams, seed: u64) -> Result<Vec<Request>> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    match kind {
        TraceKind::Steady => poisson(&mut rng, params.rate, 0.0, params.duration, &mut times),
        TraceKind::Bursty => {
            poisson(&mut rng, params.rate, 0.0, params.duration, &mut times);
            for (start, end) in params.burst_windows() {
                poisson(&mut rng, params.burst_rate, start, end, &mut times);
            }
            times.sort_by(f64::total_cmp);
        }
        TraceKind::Batch => times = vec![0.0; params.batch_requests],
    }
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(i, arrival)| Request {
            id: i as u64,
            arrival,
            input_len: params.input_len,
            output_len: params.output_len,
        })
        .collect())
}

pub fn write_trace(requests: &[Request], mut out: impl Write) -> Result<()> {
    for r in requests {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<Request>> {
    let mut out: Vec<Request> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Request = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if out.last().is_some_and(|p| p.arrival > r.arrival) {
            return Err(Error::Format(format!("line {}: arrivals are not sorted", i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Arrivals per bin of `width` seconds.
pub fn histogram(requests: &[Request], width: f64) -> Vec<usize> {
    let Some(last) = requests.iter().map(|r| r.arrival).reduce(f64::max) else {
        return Vec::new();
    };
    let mut bins = vec![0; (last / width) as usize + 1];
    for r in requests {
        bins[(r.arrival / width) as usize] += 1;
    }
    bins
}
