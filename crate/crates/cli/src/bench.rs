//! Latency measurement for one session, serial and concurrent.

use std::time::{Duration, Instant};

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rtdetr::{ShapeLog, Tensor};

use crate::session::Session;
use crate::with_threads;

#[derive(Debug, Clone, PartialEq)]
pub struct Percentiles {
    pub p50: Duration,
    pub p90: Duration,
    pub p99: Duration,
    pub max: Duration,
}

/// Nearest-rank percentiles; `None` for an empty sample.
pub fn percentiles(samples: &[Duration]) -> Option<Percentiles> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort();
    let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Some(Percentiles {
        p50: rank(0.50),
        p90: rank(0.90),
        p99: rank(0.99),
        max: s[s.len() - 1],
    })
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub threads: usize,
    pub latencies: Vec<Duration>,
    pub wall: Duration,
}

impl BenchRun {
    pub fn throughput(&self) -> f64 {
        self.latencies.len() as f64 / self.wall.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn summary(&self) -> String {
        match percentiles(&self.latencies) {
            None => format!("{:>2} threads: no iterations", self.threads),
            Some(p) => format!(
                "{:>2} threads: p50 {:.1} ms  p90 {:.1} ms  p99 {:.1} ms  max {:.1} ms  {:.2} img/s",
                self.threads,
                ms(p.p50),
                ms(p.p90),
                ms(p.p99),
                ms(p.max),
                self.throughput()
            ),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs `iters` single-image requests on a pool of `threads` workers. With
/// one worker the requests run back to back; with more they run
/// concurrently against the shared session.
pub fn run(session: &Session, iters: usize, threads: usize) -> Result<BenchRun> {
    let s = session.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::<f32>::uniform(vec![1, 3, s, s], 0.0, 1.0, &mut rng);
    let image = session.model.input_norm.apply(&image)?;
    let one = || -> Result<Duration> {
        let t = Instant::now();
        session
            .model
            .forward(&image, None, &mut ShapeLog::disabled())?;
        Ok(t.elapsed())
    };
    let start = Instant::now();
    let latencies = with_threads(Some(threads), || {
        (0..iters)
            .into_par_iter()
            .map(|_| one())
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(BenchRun {
        threads,
        latencies,
        wall: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let samples: Vec<Duration> = (1..=100).rev().map(Duration::from_millis).collect();
        let p = percentiles(&samples).unwrap();
        assert_eq!(p.p50, Duration::from_millis(50));
        assert_eq!(p.p90, Duration::from_millis(90));
        assert_eq!(p.p99, Duration::from_millis(99));
        assert_eq!(p.max, Duration::from_millis(100));
        assert!(percentiles(&[]).is_none());
        let one = percentiles(&[Duration::from_millis(7)]).unwrap();
        assert_eq!(one.p50, one.max);
    }
}
