//! Wall-clock inference benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::DetectionModel;
use crate::error::{Error, Result};
use crate::numeric::gradcheck::random_tensor;

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_RUNS: usize = 30;

/// Frames per second for a per-frame latency in milliseconds.
pub fn fps_from_ms(mean_ms: f64) -> f64 {
    1000.0 / mean_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub warmup: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
}

impl LatencyReport {
    /// Summary of per-run timings (population standard deviation).
    pub fn from_samples(warmup: usize, samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.len() < 3 {
            return Err(Error::Usage(format!("latency needs at least 3 timed runs, got {}", samples_ms.len())));
        }
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / n;
        Ok(Self { warmup, runs: samples_ms.len(), mean_ms, std_ms: var.sqrt(), fps: fps_from_ms(mean_ms) })
    }
}

/// Times `f` `runs` times after `warmup` discarded calls, on the calling thread.
pub fn time_runs<F: FnMut() -> Result<()>>(warmup: usize, runs: usize, mut f: F) -> Result<LatencyReport> {
    if runs < 3 {
        return Err(Error::Usage(format!("latency needs at least 3 timed runs, got {runs}")));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyReport::from_samples(warmup, &samples)
}

/// Single-image forward latency at `input_size`.
pub fn latency_bench(model: &DetectionModel, input_size: usize, warmup: usize, runs: usize) -> Result<LatencyReport> {
    let image = random_tensor(&[1, 3, input_size, input_size], 0, 1.0).cast::<f32>();
    time_runs(warmup, runs, || model.predict(&image).map(|_| ()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, ModelConfig};
    use crate::injection::IntegrationStrategy;

    #[test]
    fn fps_conversions() {
        assert!((fps_from_ms(33.25) - 30.075).abs() < 1e-3);
        assert_eq!(fps_from_ms(1000.0), 1.0);
        assert!((fps_from_ms(8.37) - 119.47).abs() < 0.01);
    }

    #[test]
    fn report_statistics() {
        let r = LatencyReport::from_samples(2, &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(r.mean_ms, 20.0);
        assert!((r.std_ms - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.fps * r.mean_ms, 1000.0);
        assert!(LatencyReport::from_samples(0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn counts_calls() {
        let mut calls = 0;
        let r = time_runs(4, 3, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((calls, r.warmup, r.runs), (7, 4, 3));
        assert!(time_runs(0, 2, || Ok(())).is_err());
    }

    #[test]
    fn benchmarks_a_model() {
        let (model, _) = build_model(&ModelConfig::new("S", "toy-tiny", IntegrationStrategy::None)).unwrap();
        let r = latency_bench(&model, 64, 1, 3).unwrap();
        assert!(r.mean_ms > 0.0 && r.fps.is_finite());
        assert!(latency_bench(&model, 32, 0, 3).is_err());
    }
}
