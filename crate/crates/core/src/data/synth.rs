//! Synthetic sensor network: sinusoids at several frequencies, diffused over
//! a random geometric graph, plus a slow shared trend and Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::graph::SensorGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Periods (in steps) of the sinusoidal components.
    pub periods: Vec<f64>,
    /// Connection radius in the unit square; also the kernel threshold.
    pub radius: f64,
    /// Kernel shape parameter for edge weights.
    pub gamma: f64,
    /// Diffusion rounds and per-round mixing weight.
    pub diffusion_steps: usize,
    pub diffusion_mix: f64,
    pub noise_std: f64,
    /// Std of the AR(1) innovation driving the shared trend.
    pub trend_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            n_steps: 2000,
            seed: 0,
            periods: vec![24.0, 168.0],
            radius: 0.4,
            gamma: 0.1,
            diffusion_steps: 2,
            diffusion_mix: 0.5,
            noise_std: 0.1,
            trend_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: Dataset,
    pub graph: SensorGraph,
    /// Row-major `N×N` Euclidean distances between sensors.
    pub distances: Vec<f64>,
    pub coords: Vec<(f64, f64)>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_nodes < 2 || cfg.n_steps < 2 {
        return Err(Error::Invalid("synthetic data needs at least 2 nodes and 2 steps".into()));
    }
    if cfg.periods.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Invalid(format!("periods must be positive: {:?}", cfg.periods)));
    }
    if !(cfg.noise_std >= 0.0 && cfg.trend_std >= 0.0 && (0.0..=1.0).contains(&cfg.diffusion_mix)) {
        return Err(Error::Invalid("noise/trend std must be non-negative and mixing in [0, 1]".into()));
    }
    let n = cfg.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let mut distances = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
            distances[i * n + j] = (dx * dx + dy * dy).sqrt();
        }
    }
    let graph = SensorGraph::from_gaussian_kernel(&distances, n, cfg.gamma, cfg.radius)?;

    // Phases vary smoothly in space so nearby sensors move together.
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let comps: Vec<(f64, f64, f64, f64)> = cfg
        .periods
        .iter()
        .map(|&p| {
            let (gx, gy) = (normal.sample(&mut rng), normal.sample(&mut rng));
            (p, gx * 2.0, gy * 2.0, rng.random_range(0.5..1.5))
        })
        .collect();
    let level: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng) * 0.5).collect();
    let gain: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let trend_w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut trend = 0.0;
    let mut raw = vec![0.0; cfg.n_steps * n];
    for t in 0..cfg.n_steps {
        trend = 0.98 * trend + cfg.trend_std * normal.sample(&mut rng);
        for i in 0..n {
            let (x, y) = coords[i];
            let mut s = 0.0;
            for &(p, gx, gy, amp) in &comps {
                let phase = gx * x + gy * y;
                s += amp * (std::f64::consts::TAU * t as f64 / p + phase).sin();
            }
            raw[t * n + i] = gain[i] * s + trend_w[i] * trend;
        }
    }

    // Weighted-neighbor smoothing over incoming edges.
    for _ in 0..cfg.diffusion_steps {
        let prev = raw.clone();
        for t in 0..cfg.n_steps {
            for i in 0..n {
                let nb = graph.in_neighbors(i)?;
                let wsum: f64 = nb.iter().map(|&(_, w)| w).sum();
                if wsum > 0.0 {
                    let avg = nb.iter().map(|&(j, w)| w * prev[t * n + j]).sum::<f64>() / wsum;
                    raw[t * n + i] = (1.0 - cfg.diffusion_mix) * prev[t * n + i] + cfg.diffusion_mix * avg;
                }
            }
        }
    }
    for t in 0..cfg.n_steps {
        for i in 0..n {
            raw[t * n + i] += level[i] + cfg.noise_std * normal.sample(&mut rng);
        }
    }
    let dataset = Dataset::from_dense(cfg.n_steps, n, 1, raw)?;
    Ok(SynthData {
        dataset,
        graph,
        distances,
        coords,
    })
}
