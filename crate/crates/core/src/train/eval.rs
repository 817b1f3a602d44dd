use std::ops::Range;

use crate::data::{Dataset, MaeAccumulator, Metrics, NormStats, SpatioTemporalWindow};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::model::SpinModel;

/// Anything that fills a window. Outputs are `W·N·d`, time-major; only the
/// hidden positions are scored.
pub trait Imputer {
    fn name(&self) -> &str;
    fn impute(&self, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<Vec<f64>>;
}

impl Imputer for SpinModel {
    fn name(&self) -> &str {
        match self.config().variant {
            crate::model::Variant::Spin => "spin",
            crate::model::Variant::SpinH => "spin-h",
        }
    }

    fn impute(&self, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<Vec<f64>> {
        self.predict(window, graph)
    }
}

/// Per-node mean of the visible training values; nodes with none fall back
/// to the global mean.
#[derive(Clone, Debug)]
pub struct MeanImputer {
    means: Vec<f64>,
    n_features: usize,
}

impl MeanImputer {
    pub fn fit(dataset: &Dataset, range: Range<usize>) -> Result<Self> {
        let (n, d) = (dataset.n_nodes(), dataset.n_features());
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        let (mut gsum, mut gcount) = (vec![0.0; d], 0usize);
        for t in range.clone() {
            for i in 0..n {
                let p = t * n + i;
                if dataset.mask()[p] {
                    for f in 0..d {
                        let v = dataset.values()[p * d + f];
                        sums[i * d + f] += v;
                        gsum[f] += v;
                    }
                    counts[i] += 1;
                    gcount += 1;
                }
            }
        }
        if gcount == 0 {
            return Err(Error::Invalid(format!("no visible values in steps {}..{}", range.start, range.end)));
        }
        let means = (0..n * d)
            .map(|k| {
                let (i, f) = (k / d, k % d);
                if counts[i] > 0 {
                    sums[k] / counts[i] as f64
                } else {
                    gsum[f] / gcount as f64
                }
            })
            .collect();
        Ok(Self { means, n_features: d })
    }

    pub fn node_mean(&self, node: usize, feature: usize) -> f64 {
        self.means[node * self.n_features + feature]
    }
}

impl Imputer for MeanImputer {
    fn name(&self) -> &str {
        "mean"
    }

    fn impute(&self, window: &SpatioTemporalWindow, _graph: &SensorGraph) -> Result<Vec<f64>> {
        let (n, d) = (window.n_nodes, window.n_features);
        let mut out = Vec::with_capacity(window.n_positions() * d);
        for p in 0..window.n_positions() {
            for f in 0..d {
                out.push(if window.mask[p] {
                    window.value(p, f)
                } else {
                    self.node_mean(window.nodes[p % n], f)
                });
            }
        }
        Ok(out)
    }
}

/// Weighted mean of the visible in-neighbors at the same step, falling back
/// to the node mean.
#[derive(Clone, Debug)]
pub struct KnnImputer {
    fallback: MeanImputer,
}

impl KnnImputer {
    pub fn new(fallback: MeanImputer) -> Self {
        Self { fallback }
    }
}

impl Imputer for KnnImputer {
    fn name(&self) -> &str {
        "knn"
    }

    fn impute(&self, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<Vec<f64>> {
        let (n, d) = (window.n_nodes, window.n_features);
        if graph.n_nodes() != n {
            return Err(Error::shape("baseline_knn", format!("window has {n} nodes, graph {}", graph.n_nodes())));
        }
        let mut out = self.fallback.impute(window, graph)?;
        for t in 0..window.len {
            for i in 0..n {
                let p = t * n + i;
                if window.mask[p] {
                    continue;
                }
                let mut wsum = 0.0;
                let mut acc = vec![0.0; d];
                for &(j, w) in graph.in_neighbors(i)? {
                    let q = t * n + j;
                    if window.mask[q] {
                        wsum += w;
                        for f in 0..d {
                            acc[f] += w * window.value(q, f);
                        }
                    }
                }
                if wsum > 0.0 {
                    for f in 0..d {
                        out[p * d + f] = acc[f] / wsum;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Scores `imputer` on the evaluation mask of the windows of `dataset`
/// (normalized) within `range`, in data units.
pub fn evaluate(
    imputer: &dyn Imputer,
    dataset: &Dataset,
    stats: &NormStats,
    graph: &SensorGraph,
    range: Range<usize>,
    window: usize,
    stride: usize,
) -> Result<Metrics> {
    let windows = dataset.make_windows_in(range, window, stride)?;
    evaluate_windows(imputer, &windows, stats, graph, dataset.n_nodes())
}

pub fn evaluate_windows(
    imputer: &dyn Imputer,
    windows: &[SpatioTemporalWindow],
    stats: &NormStats,
    graph: &SensorGraph,
    n_nodes: usize,
) -> Result<Metrics> {
    let mut acc = MaeAccumulator::new(n_nodes);
    for w in windows {
        if !w.eval_mask.iter().any(|&e| e) {
            continue;
        }
        let d = w.n_features;
        let mut pred = imputer.impute(w, graph)?;
        if pred.len() != w.values.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} returned {} values for {}", imputer.name(), pred.len(), w.values.len()),
            ));
        }
        let mut truth = w.values.clone();
        for (k, v) in pred.iter_mut().enumerate() {
            *v = stats.denormalize(*v, k % d);
        }
        for (k, v) in truth.iter_mut().enumerate() {
            *v = stats.denormalize(*v, k % d);
        }
        acc.add_window(&pred, &truth, &w.eval_mask, d, &w.nodes)?;
    }
    acc.finish()
}
