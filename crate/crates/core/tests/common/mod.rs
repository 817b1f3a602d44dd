#![allow(dead_code, clippy::needless_range_loop)]

//! Shared fixtures and a brute-force reference implementation of both model
//! variants, written directly from the layer equations with plain loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spin_impute::data::SpatioTemporalWindow;
use spin_impute::encoding::temporal_encoding;
use spin_impute::graph::{Edge, SensorGraph};
use spin_impute::model::{ModelConfig, SpinModel, Variant};
use spin_impute::tensor::{ParamStore, Tape, Tensor};
use spin_impute::train::spin_loss;

pub const CLAMP: f64 = 60.0;

/// Random directed graph without self-loops.
pub fn random_graph(n: usize, p_edge: f64, rng: &mut impl Rng) -> SensorGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < p_edge {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    weight: rng.random_range(0.1..1.0),
                });
            }
        }
    }
    SensorGraph::from_edges(n, edges).unwrap()
}

/// Random window whose hidden entries hold NaN, so any read of them
/// poisons the output.
pub fn random_window(n: usize, w: usize, d: usize, p_obs: f64, rng: &mut impl Rng) -> SpatioTemporalWindow {
    let mask: Vec<bool> = (0..w * n).map(|_| rng.random::<f64>() < p_obs).collect();
    let mut values = Vec::with_capacity(w * n * d);
    for &m in &mask {
        for _ in 0..d {
            values.push(if m { rng.random_range(-2.0..2.0) } else { f64::NAN });
        }
    }
    let offset = rng.random_range(0..100usize);
    SpatioTemporalWindow {
        offset,
        len: w,
        n_nodes: n,
        n_features: d,
        values,
        mask,
        eval_mask: vec![false; w * n],
        steps: (offset as u64..(offset + w) as u64).collect(),
        nodes: (0..n).collect(),
    }
}

pub fn small_spin(n: usize, layers: usize, eta: usize, width: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        layers: Some(layers),
        eta,
        d_h: width,
        mlp_hidden: width,
        ..ModelConfig::default()
    };
    cfg.encoding.d_v = 4;
    cfg.encoding.d_q = width;
    let _ = n;
    cfg
}

pub fn small_spin_h(layers: usize, eta: usize, width: usize, k: usize, d_z: usize) -> ModelConfig {
    let mut cfg = small_spin(0, layers, eta, width);
    cfg.variant = Variant::SpinH;
    cfg.hubs.k = k;
    cfg.hubs.d_z = d_z;
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense MLP evaluation from the stored `prefix.{l}.weight/bias` tensors.
pub fn mlp(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut l = 0;
    while let Some(w) = store.by_name(&format!("{prefix}.{l}.weight")) {
        let b = store.by_name(&format!("{prefix}.{l}.bias")).unwrap();
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        assert_eq!(h.len(), fi, "{prefix}.{l}");
        let mut y = b.data().to_vec();
        for a in 0..fi {
            for c in 0..fo {
                y[c] += h[a] * w.data()[a * fo + c];
            }
        }
        l += 1;
        if store.by_name(&format!("{prefix}.{l}.weight")).is_some() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    assert!(l > 0, "no MLP under {prefix}");
    h
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Explicit enumeration of one message set: `Σ softmax(r·w) r` with
/// `r = MLP([key, query])`; `None` for an empty set.
pub fn attend(store: &ParamStore, prefix: &str, keys: &[&[f64]], query: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() {
        return None;
    }
    let w = store.by_name(&format!("{prefix}.score")).unwrap().data().to_vec();
    let msgs: Vec<Vec<f64>> = keys.iter().map(|k| mlp(store, prefix, &cat(&[k, query]))).collect();
    let scores: Vec<f64> = msgs
        .iter()
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().clamp(-CLAMP, CLAMP))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = ex.iter().sum();
    let alpha: Vec<f64> = ex.iter().map(|e| e / total).collect();
    let mut out = vec![0.0; msgs[0].len()];
    for (r, a) in msgs.iter().zip(&alpha) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += a * v;
        }
    }
    Some((out, alpha))
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Reference forward pass; returns per-layer imputations, `[layer][pos·d + f]`.
pub fn reference_forward(model: &SpinModel, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Vec<Vec<f64>> {
    let store = model.params();
    let cfg = model.config();
    let (w, n, d) = (window.len, window.n_nodes, window.n_features);
    let d_h = cfg.d_h;
    let spatial = store.by_name("encoding.spatial").unwrap();
    let pos = |t: usize, i: usize| t * n + i;

    let mut h: Vec<Vec<f64>> = Vec::with_capacity(w * n);
    for t in 0..w {
        let u = temporal_encoding(window.steps[t], &cfg.encoding.periods).unwrap();
        for i in 0..n {
            let q = mlp(store, "encoding.fuse", &cat(&[&u, spatial.row(window.nodes[i])]));
            let p = pos(t, i);
            h.push(if window.mask[p] {
                mlp(store, "init.observed", &cat(&[&window.values[p * d..(p + 1) * d], &q]))
            } else {
                mlp(store, "init.target", &q)
            });
        }
    }
    let k = cfg.hubs.k;
    let mut z: Vec<Vec<f64>> = Vec::new();
    if cfg.variant == Variant::SpinH {
        let base = store.by_name("hubs.base").unwrap();
        for i in 0..n {
            for hk in 0..k {
                let row = if cfg.hubs.per_node_hubs { window.nodes[i] * k + hk } else { hk };
                z.push(base.row(row).to_vec());
            }
        }
    }

    let mut preds = Vec::new();
    for l in 0..cfg.n_layers() {
        let masked = l < cfg.eta;
        let keys_of = |h: &Vec<Vec<f64>>, j: usize| -> Vec<Vec<f64>> {
            (0..w).filter(|&s| !masked || window.mask[pos(s, j)]).map(|s| h[pos(s, j)].clone()).collect()
        };
        let mut next = Vec::with_capacity(w * n);
        match cfg.variant {
            Variant::Spin => {
                for t in 0..w {
                    for i in 0..n {
                        let hq = &h[pos(t, i)];
                        let own = keys_of(&h, i);
                        let own: Vec<&[f64]> = own.iter().map(Vec::as_slice).collect();
                        let c = attend(store, &format!("layers.{l}.self"), &own, hq).map_or(vec![0.0; d_h], |x| x.0);
                        let mut e = vec![0.0; d_h];
                        for &(j, _) in graph.in_neighbors(i).unwrap() {
                            let kj = keys_of(&h, j);
                            let kj: Vec<&[f64]> = kj.iter().map(Vec::as_slice).collect();
                            if let Some((ej, _)) = attend(store, &format!("layers.{l}.cross"), &kj, hq) {
                                add_into(&mut e, &ej);
                            }
                        }
                        next.push(mlp(store, &format!("layers.{l}.update"), &cat(&[hq, &c, &e])));
                    }
                }
            }
            Variant::SpinH => {
                let d_z = cfg.hubs.d_z;
                let mut zn = Vec::with_capacity(n * k);
                for i in 0..n {
                    let own = keys_of(&h, i);
                    let own: Vec<&[f64]> = own.iter().map(Vec::as_slice).collect();
                    for hk in 0..k {
                        let zk = &z[i * k + hk];
                        let c = attend(store, &format!("layers.{l}.hub_msg"), &own, zk).map_or(vec![0.0; d_z], |x| x.0);
                        zn.push(mlp(store, &format!("layers.{l}.hub_update"), &cat(&[zk, &c])));
                    }
                }
                let hubs = |j: usize| -> Vec<&[f64]> { (0..k).map(|hk| zn[j * k + hk].as_slice()).collect() };
                for t in 0..w {
                    for i in 0..n {
                        let hq = &h[pos(t, i)];
                        let c = attend(store, &format!("layers.{l}.hub_self"), &hubs(i), hq).unwrap().0;
                        let mut e = vec![0.0; d_h];
                        for &(j, _) in graph.in_neighbors(i).unwrap() {
                            add_into(&mut e, &attend(store, &format!("layers.{l}.hub_cross"), &hubs(j), hq).unwrap().0);
                        }
                        next.push(mlp(store, &format!("layers.{l}.update"), &cat(&[hq, &c, &e])));
                    }
                }
                z = zn;
            }
        }
        h = next;
        let readout = if cfg.shared_readout { "readout".to_string() } else { format!("readout.{l}") };
        preds.push(h.iter().flat_map(|hp| mlp(store, &readout, hp)).collect());
    }
    preds
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-layer model imputations as plain vectors.
pub fn model_layers(model: &SpinModel, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Vec<Vec<f64>> {
    let mut tape = spin_impute::tensor::Tape::new();
    let p = model.params().bind(&mut tape).unwrap();
    let out = model.forward(&mut tape, &p, window, graph).unwrap();
    out.layers.iter().map(|&v| tape.value(v).unwrap().data().to_vec()).collect()
}

pub const H: f64 = 1e-6;

/// `|a - n| / max(1, |a|, |n|)`: relative away from zero, absolute near it.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Loss over every layer, supervised on the hidden positions against a
/// fixed random target, as a function of the parameters and observed inputs.
pub struct Harness {
    pub model: SpinModel,
    pub window: spin_impute::data::SpatioTemporalWindow,
    pub graph: spin_impute::graph::SensorGraph,
    pub truth: Vec<f64>,
    pub loss_mask: Vec<bool>,
}

impl Harness {
    pub fn new(cfg: ModelConfig, n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let graph = random_graph(n, 0.5, &mut r);
        let window = random_window(n, 5, 1, 0.6, &mut r);
        let truth: Vec<f64> = (0..window.n_positions()).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss_mask = window.mask.iter().map(|&m| !m).collect();
        let model = SpinModel::new(cfg, n, 1, seed).unwrap();
        Self {
            model,
            window,
            graph,
            truth,
            loss_mask,
        }
    }

    pub fn loss(&self, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = self.model.forward_with_observed(&mut tape, &p, &self.window, &self.graph, xv).unwrap();
        let l = spin_loss(&mut tape, &out.layers, &self.truth, &self.loss_mask).unwrap().unwrap();
        tape.scalar(l).unwrap()
    }

    /// Worst relative error over every observed input and each parameter,
    /// either all entries or `per_tensor` sampled ones.
    pub fn check(&mut self, per_tensor: Option<usize>, seed: u64) -> f64 {
        let x = SpinModel::observed_input(&self.window).unwrap();
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape).unwrap();
        let xv = tape.variable(x.clone()).unwrap();
        let out = self.model.forward_with_observed(&mut tape, &p, &self.window, &self.graph, xv).unwrap();
        let l = spin_loss(&mut tape, &out.layers, &self.truth, &self.loss_mask).unwrap().unwrap();
        let mut grads = tape.backward(l).unwrap();
        let gx = grads.get(xv).unwrap().clone();
        let gp = p.collect_grads(&mut grads, self.model.params());

        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for i in 0..gp.len() {
            let len = self.model.params().tensors()[i].len();
            let entries: Vec<usize> = match per_tensor {
                Some(m) => (0..m.min(len)).map(|_| r.random_range(0..len)).collect(),
                None => (0..len).collect(),
            };
            for k in entries {
                let orig = self.model.params().tensors()[i].data()[k];
                self.model.params_mut().tensors_mut()[i].data_mut()[k] = orig + H;
                let up = self.loss(&x);
                self.model.params_mut().tensors_mut()[i].data_mut()[k] = orig - H;
                let down = self.loss(&x);
                self.model.params_mut().tensors_mut()[i].data_mut()[k] = orig;
                worst = worst.max(rel_err(gp[i].data()[k], (up - down) / (2.0 * H)));
            }
        }
        for k in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[k] += H;
            let mut down = x.clone();
            down.data_mut()[k] -= H;
            worst = worst.max(rel_err(gx.data()[k], (self.loss(&up) - self.loss(&down)) / (2.0 * H)));
        }
        worst
    }
}

