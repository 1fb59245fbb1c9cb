//! Replicated throughput runs at fixed offered rates.

use std::fmt::Write as _;

use super::replay::{replay, Rate, ReplayPlan};
use super::synth::SyntheticSpec;
use super::TrafficError;
use crate::dsl::ProbeProgram;
use crate::pipeline::Pipeline;

/// Two-sided 95% quantile of the standard normal distribution.
const Z95: f64 = 1.959_963_984_540_054;

/// Sample mean with a 95% confidence half-width (normal approximation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let half_width = if n < 2 {
            f64::NAN
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z95 * (var / n as f64).sqrt()
        };
        Some(Estimate { mean, half_width, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub offered_pps: f64,
    pub achieved_pps: Estimate,
    /// `None` when no packet was processed.
    pub mean_cost_ns: Option<Estimate>,
    pub p95_cost_ns: Option<Estimate>,
    /// Frames the pipeline could not parse, summed over replications.
    pub drops: u64,
    pub unsustainable_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub replications: usize,
    pub packets_per_run: u64,
}

fn fmt_opt(e: Option<Estimate>, f: impl Fn(Estimate) -> String) -> String {
    e.map(f).unwrap_or_else(|| "n/a".into())
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "offered_pps,achieved_pps,achieved_ci95,mean_cost_ns,mean_cost_ci95,p95_cost_ns,drops,unsustainable_runs,replications\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.1},{:.1},{},{},{},{},{},{}",
                r.offered_pps,
                r.achieved_pps.mean,
                r.achieved_pps.half_width,
                fmt_opt(r.mean_cost_ns, |e| format!("{:.1}", e.mean)),
                fmt_opt(r.mean_cost_ns, |e| format!("{:.1}", e.half_width)),
                fmt_opt(r.p95_cost_ns, |e| format!("{:.1}", e.mean)),
                r.drops,
                r.unsustainable_runs,
                self.replications
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>12}  {:>22}  {:>22}  {:>10}  {:>6}\n",
            "offered pps", "achieved pps (±95%)", "ns/packet (±95%)", "p95 ns", "drops"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>12.0}  {:>22}  {:>22}  {:>10}  {:>6}",
                r.offered_pps,
                format!("{:.0} ± {:.0}", r.achieved_pps.mean, r.achieved_pps.half_width),
                fmt_opt(r.mean_cost_ns, |e| format!("{:.0} ± {:.0}", e.mean, e.half_width)),
                fmt_opt(r.p95_cost_ns, |e| format!("{:.0}", e.mean)),
                r.drops
            );
        }
        let _ = writeln!(s, "{} replications of {} packets per rate", self.replications, self.packets_per_run);
        s
    }
}

/// Run `replications` paced replays per rate. Each replication uses a fresh
/// pipeline and a distinct seed; timestamps follow the synthetic schedule.
pub fn bench(
    rates: &[f64],
    spec: &SyntheticSpec,
    program: &ProbeProgram,
    replications: usize,
    packets_per_run: u64,
) -> Result<BenchReport, TrafficError> {
    if replications < 2 {
        return Err(TrafficError::InvalidSpec("at least two replications are required".into()));
    }
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut achieved = Vec::new();
        let mut means = Vec::new();
        let mut p95s = Vec::new();
        let mut drops = 0;
        let mut unsustainable = 0;
        for rep in 0..replications {
            let s = SyntheticSpec { rate_pps: rate, seed: spec.seed.wrapping_add(rep as u64), ..spec.clone() };
            let source = s.generate(packets_per_run)?;
            let mut pipeline = Pipeline::new(program.clone())?;
            let plan = ReplayPlan { rate: Rate::Pps(rate), record_costs: true, ..ReplayPlan::default() };
            let stats = replay(source, &mut pipeline, &plan, |_| {});
            achieved.push(stats.achieved_pps);
            means.extend(stats.mean_cost_ns());
            p95s.extend(stats.p95_cost_ns());
            drops += pipeline.counters().truncated;
            unsustainable += stats.rate_unsustainable as usize;
        }
        rows.push(BenchRow {
            offered_pps: rate,
            achieved_pps: Estimate::from_samples(&achieved).expect("replications >= 2"),
            mean_cost_ns: Estimate::from_samples(&means),
            p95_cost_ns: Estimate::from_samples(&p95s),
            drops,
            unsustainable_runs: unsustainable,
        });
    }
    Ok(BenchReport { rows, replications, packets_per_run })
}
