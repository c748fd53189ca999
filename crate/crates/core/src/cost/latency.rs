//! Wall-clock timing of a callable in an exclusive mode.

use std::sync::Mutex;
use std::time::Instant;

use crate::error::{config_err, Result};

static EXCLUSIVE: Mutex<()> = Mutex::new(());

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Times `f` `iters` times after `warmup` discarded calls.
///
/// Refuses to run inside a thread pool worker or while another benchmark
/// holds the process-wide timing lock.
pub fn latency_bench<F: FnMut() -> Result<()>>(mut f: F, warmup: usize, iters: usize) -> Result<LatencyStats> {
    if iters == 0 {
        return config_err("latency_bench needs at least one timed iteration");
    }
    if rayon::current_thread_index().is_some() {
        return config_err("latency_bench must not run on a worker thread");
    }
    let _guard = match EXCLUSIVE.try_lock() {
        Ok(g) => g,
        Err(_) => return config_err("another latency benchmark is running"),
    };
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        median_ms: percentile(&times, 0.5),
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
    })
}

/// `label,median_ms,p10,p90` rows.
pub fn latency_csv(rows: &[(String, LatencyStats)]) -> String {
    let mut out = String::from("label,median_ms,p10,p90\n");
    for (label, s) in rows {
        out.push_str(&format!("{label},{:.4},{:.4},{:.4}\n", s.median_ms, s.p10_ms, s.p90_ms));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_rejected() {
        assert!(latency_bench(|| Ok(()), 0, 0).is_err());
    }

    #[test]
    fn percentiles_pick_ranks() {
        let v: Vec<f64> = (0..11).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.1), 1.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
    }
}
