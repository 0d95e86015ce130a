//! Run-level reductions over per-round metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sim::RoundMetrics;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunSummary {
    pub method: String,
    pub rounds: u32,
    pub final_global_acc: f64,
    pub best_global_acc: f64,
    /// Mean personalized accuracy after the last round.
    pub mean_personalized_acc: f64,
    pub total_bytes_up: u64,
    /// Same-run dense uplink divided by metered uplink.
    pub compression_vs_dense: f64,
    global_series: Vec<f64>,
}

impl RunSummary {
    /// Number of rounds until the global accuracy first reaches `target`.
    pub fn rounds_to_target(&self, target: f64) -> Option<u32> {
        self.global_series
            .iter()
            .position(|&a| a >= target)
            .map(|r| r as u32 + 1)
    }
}

pub fn summarize(metrics: &[RoundMetrics], dense_bytes_per_round: u64) -> Result<RunSummary> {
    let last = metrics
        .last()
        .ok_or_else(|| Error::config("cannot summarize an empty run"))?;
    let total_bytes_up: u64 = metrics.iter().map(|m| m.bytes_up).sum();
    let dense = metrics.len() as f64 * dense_bytes_per_round as f64;
    let compression_vs_dense = if total_bytes_up == 0 {
        f64::INFINITY
    } else {
        dense / total_bytes_up as f64
    };
    let global_series: Vec<f64> = metrics.iter().map(|m| m.global_test_accuracy).collect();
    Ok(RunSummary {
        method: last.method.clone(),
        rounds: metrics.len() as u32,
        final_global_acc: last.global_test_accuracy,
        best_global_acc: global_series
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
        mean_personalized_acc: last.mean_personalized_accuracy,
        total_bytes_up,
        compression_vs_dense,
        global_series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn row(round: u32, acc: f64, up: u64) -> RoundMetrics {
        RoundMetrics {
            round,
            method: "fedcspack".into(),
            global_test_accuracy: acc,
            mean_personalized_accuracy: acc + 0.1,
            bytes_up: up,
            bytes_down: 0,
            wall_ms: 0.0,
            sampled: vec![0],
            participating: vec![0],
            protocol_violations: 0,
            per_client_personalized: vec![],
            per_client_global: vec![],
        }
    }

    #[test]
    fn reductions() {
        let m = [row(0, 0.2, 100), row(1, 0.6, 100), row(2, 0.5, 200)];
        let s = summarize(&m, 400).unwrap();
        assert_eq!(s.rounds, 3);
        assert_eq!(s.final_global_acc, 0.5);
        assert_eq!(s.best_global_acc, 0.6);
        assert!((s.mean_personalized_acc - 0.6).abs() < 1e-12);
        assert_eq!(s.total_bytes_up, 400);
        assert_eq!(s.compression_vs_dense, 3.0);
        assert_eq!(s.rounds_to_target(0.5), Some(2));
        assert_eq!(s.rounds_to_target(0.1), Some(1));
        assert_eq!(s.rounds_to_target(1.1), None);
        assert!(summarize(&[], 1).is_err());
    }
}
