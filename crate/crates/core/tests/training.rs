mod common;

use common::*;
use spin_impute::data::{mae, Dataset, NormStats, SpatioTemporalWindow};
use spin_impute::graph::{Edge, SensorGraph};
use spin_impute::model::{ModelConfig, SpinModel};
use spin_impute::tensor::Tape;
use spin_impute::train::{
    evaluate, spin_loss, train, write_history_csv, Imputer, KnnImputer, MeanImputer, Subsample, TrainConfig,
};
use spin_impute::{Error, Result};

fn ring(n: usize) -> SensorGraph {
    let edges = (0..n).flat_map(|i| {
        [
            Edge {
                src: i,
                dst: (i + 1) % n,
                weight: 1.0,
            },
            Edge {
                src: (i + 1) % n,
                dst: i,
                weight: 0.5,
            },
        ]
    });
    SensorGraph::from_edges(n, edges).unwrap()
}

fn tiny_model(n: usize, seed: u64) -> SpinModel {
    SpinModel::new(small_spin(n, 2, 1, 8), n, 1, seed).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batches_per_epoch: 10,
        batch_size: 4,
        patience: 20,
        lr: 0.01,
        warmup: 5,
        window: 6,
        val_stride: 6,
        ..TrainConfig::default()
    }
}

fn constant_dataset(n: usize, t: usize, c: f64) -> Dataset {
    Dataset::from_dense(t, n, 1, vec![c; t * n]).unwrap()
}

fn wave_dataset(n: usize, t: usize) -> Dataset {
    let values = (0..t * n)
        .map(|p| ((p / n) as f64 * 0.4 + (p % n) as f64).sin())
        .collect();
    Dataset::from_dense(t, n, 1, values).unwrap()
}

#[test]
fn fits_a_constant_signal() {
    let n = 4;
    let ds = constant_dataset(n, 60, 0.5);
    let mut model = tiny_model(n, 0);
    let report = train(&mut model, &ds, &ring(n), 0..42, 42..60, &quick_config()).unwrap();
    assert!(report.best_val_mae < 0.01, "val mae {}", report.best_val_mae);
    assert_eq!(report.history.len(), 20);
}

#[test]
fn training_is_deterministic() {
    let n = 3;
    let ds = wave_dataset(n, 50);
    let cfg = TrainConfig {
        epochs: 3,
        batches_per_epoch: 4,
        patience: 3,
        ..quick_config()
    };
    let run = || {
        let mut m = tiny_model(n, 7);
        let r = train(&mut m, &ds, &ring(n), 0..35, 35..50, &cfg).unwrap();
        (r, m)
    };
    let (r1, m1) = run();
    let (r2, m2) = run();
    assert_eq!(r1, r2);
    for (a, b) in m1.params().tensors().iter().zip(m2.params().tensors()) {
        assert!(max_abs_diff(a.data(), b.data()) <= 1e-12);
    }
}

#[test]
fn zero_learning_rate_stops_after_patience() {
    let n = 3;
    let ds = wave_dataset(n, 50);
    let before = tiny_model(n, 1);
    let mut model = before.clone();
    let cfg = TrainConfig {
        epochs: 10,
        patience: 1,
        lr: 0.0,
        ..quick_config()
    };
    let report = train(&mut model, &ds, &ring(n), 0..35, 35..50, &cfg).unwrap();
    assert_eq!(report.history.len(), 2);
    assert!(report.stopped_early);
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.history[0].val_mae, report.history[1].val_mae);
    assert_eq!(model.params().tensors(), before.params().tensors());
}

#[test]
fn best_epoch_is_the_validation_minimum() {
    let n = 3;
    let ds = wave_dataset(n, 60);
    let mut model = tiny_model(n, 2);
    let cfg = TrainConfig {
        epochs: 6,
        batches_per_epoch: 5,
        patience: 6,
        ..quick_config()
    };
    let report = train(&mut model, &ds, &ring(n), 0..42, 42..60, &cfg).unwrap();
    let min = report.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_mae, min);
    assert_eq!(report.history[report.best_epoch].val_mae, min);
    assert!(report.history.iter().all(|r| r.train_loss.is_finite() && r.lr > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &report.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_mae,lr"));
    assert_eq!(text.lines().count(), report.history.len() + 1);
}

#[test]
fn evaluation_targets_never_enter_the_loss() {
    let n = 3;
    let t = 50;
    let base = constant_dataset(n, t, 0.5);
    let mut values = base.values().to_vec();
    let mut mask = base.mask().to_vec();
    let mut eval = vec![false; t * n];
    for p in (0..t * n).step_by(4) {
        values[p] = 1e6;
        mask[p] = false;
        eval[p] = true;
    }
    let ds = Dataset::new(t, n, 1, values, mask, eval).unwrap();
    let mut model = tiny_model(n, 3);
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 4,
        patience: 2,
        ..quick_config()
    };
    let report = train(&mut model, &ds, &ring(n), 0..35, 35..50, &cfg).unwrap();
    for r in &report.history {
        assert!(r.train_loss < 100.0 && r.val_mae < 100.0, "{r:?}");
    }
}

#[test]
fn subgraph_training_runs() {
    let n = 6;
    let ds = wave_dataset(n, 50);
    let mut model = tiny_model(n, 4);
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        patience: 2,
        subsample: Some(Subsample { seeds: 2, hops: 1 }),
        ..quick_config()
    };
    let report = train(&mut model, &ds, &ring(n), 0..35, 35..50, &cfg).unwrap();
    assert!(report.history.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn rejects_bad_training_setups() {
    let n = 3;
    let ds = wave_dataset(n, 30);
    let mut model = tiny_model(n, 0);
    let short = train(&mut model, &ds, &ring(n), 0..4, 4..30, &quick_config());
    assert!(matches!(short, Err(Error::Invalid(_))));
    let wrong_graph = train(&mut model, &ds, &ring(4), 0..20, 20..30, &quick_config());
    assert!(matches!(wrong_graph, Err(Error::Shape { .. })));
    let cfg = TrainConfig {
        patience: 30,
        ..quick_config()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn single_layer_loss_is_the_mae() {
    let mut r = rng(5);
    let graph = random_graph(3, 0.5, &mut r);
    let window = random_window(3, 4, 1, 0.5, &mut r);
    let model = SpinModel::new(small_spin(3, 1, 1, 6), 3, 1, 0).unwrap();
    let truth: Vec<f64> = (0..12).map(|k| k as f64 * 0.1).collect();
    let loss_mask: Vec<bool> = window.mask.iter().map(|&m| !m).collect();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape).unwrap();
    let out = model.forward(&mut tape, &p, &window, &graph).unwrap();
    let pred = tape.value(out.layers[0]).unwrap().data().to_vec();
    let l = spin_loss(&mut tape, &out.layers, &truth, &loss_mask).unwrap().unwrap();
    let want = mae(&pred, &truth, &loss_mask, 1).unwrap();
    assert!((tape.scalar(l).unwrap() - want).abs() < 1e-14);
}

fn window_of(values: Vec<f64>, mask: Vec<bool>, n: usize) -> SpatioTemporalWindow {
    let w = mask.len() / n;
    SpatioTemporalWindow {
        offset: 0,
        len: w,
        n_nodes: n,
        n_features: 1,
        eval_mask: mask.iter().map(|&m| !m).collect(),
        values,
        mask,
        steps: (0..w as u64).collect(),
        nodes: (0..n).collect(),
    }
}

#[test]
fn mean_baseline_examples() {
    let ds = Dataset::from_dense(2, 1, 1, vec![2.0, 4.0]).unwrap();
    let mean = MeanImputer::fit(&ds, 0..2).unwrap();
    assert_eq!(mean.node_mean(0, 0), 3.0);
    let g = SensorGraph::from_edges(1, []).unwrap();
    let out = mean.impute(&window_of(vec![9.0, f64::NAN], vec![true, false], 1), &g).unwrap();
    assert_eq!(out, vec![9.0, 3.0]);

    // node 1 never visible: global mean
    let ds = Dataset::new(2, 2, 1, vec![1.0, f64::NAN, 5.0, f64::NAN], vec![true, false, true, false], vec![false; 4]).unwrap();
    let mean = MeanImputer::fit(&ds, 0..2).unwrap();
    assert_eq!(mean.node_mean(1, 0), 3.0);
    let empty = Dataset::new(1, 1, 1, vec![f64::NAN], vec![false], vec![false]).unwrap();
    assert!(MeanImputer::fit(&empty, 0..1).is_err());
}

#[test]
fn knn_baseline_examples() {
    let g = SensorGraph::from_edges(
        3,
        [
            Edge {
                src: 0,
                dst: 2,
                weight: 1.0,
            },
            Edge {
                src: 1,
                dst: 2,
                weight: 3.0,
            },
        ],
    )
    .unwrap();
    let ds = Dataset::from_dense(1, 3, 1, vec![0.0, 10.0, 4.0]).unwrap();
    let knn = KnnImputer::new(MeanImputer::fit(&ds, 0..1).unwrap());
    let out = knn.impute(&window_of(vec![0.0, 10.0, f64::NAN], vec![true, true, false], 3), &g).unwrap();
    assert_eq!(out[2], 7.5);
    // neighbor 1 hidden: only neighbor 0 counts
    let out = knn.impute(&window_of(vec![0.0, f64::NAN, f64::NAN], vec![true, false, false], 3), &g).unwrap();
    assert_eq!(out[2], 0.0);
    // node 1 has no in-neighbors: falls back to its mean
    assert_eq!(out[1], 10.0);
    assert_eq!(knn.name(), "knn");
}

struct Oracle(Dataset);

impl Imputer for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }
    fn impute(&self, w: &SpatioTemporalWindow, _: &SensorGraph) -> Result<Vec<f64>> {
        let n = w.n_nodes;
        Ok(self.0.values()[w.offset * n..(w.offset + w.len) * n].to_vec())
    }
}

struct Zero;

impl Imputer for Zero {
    fn name(&self) -> &str {
        "zero"
    }
    fn impute(&self, w: &SpatioTemporalWindow, _: &SensorGraph) -> Result<Vec<f64>> {
        Ok(vec![0.0; w.values.len()])
    }
}

#[test]
fn evaluate_scores_in_data_units_and_averages_windows() {
    let (t, n) = (8, 2);
    let truth: Vec<f64> = (0..t * n).map(|p| p as f64).collect();
    let mut mask = vec![true; t * n];
    let mut eval = vec![false; t * n];
    // first window: one target (value 2); second window: two targets (9, 13)
    for p in [2, 9, 13] {
        mask[p] = false;
        eval[p] = true;
    }
    let ds = Dataset::new(t, n, 1, truth, mask, eval).unwrap();
    let g = ring(3);
    let g = SensorGraph::from_edges(n, g.edges()[..1].to_vec()).unwrap();
    let id = NormStats::identity(1);
    let m = evaluate(&Oracle(ds.clone()), &ds, &id, &g, 0..t, 4, 4).unwrap();
    assert_eq!(m.mae, 0.0);
    let m = evaluate(&Zero, &ds, &id, &g, 0..t, 4, 4).unwrap();
    assert_eq!(m.per_window, vec![2.0, 11.0]);
    assert_eq!(m.mae, 6.5);
    assert_eq!(m.n_eval, 3);
    assert_eq!(m.per_node, vec![Some(2.0), Some(11.0)]);

    let (norm, stats) = ds.normalize(0..t).unwrap();
    let m = evaluate(&Oracle(norm.clone()), &norm, &stats, &g, 0..t, 4, 4).unwrap();
    assert!(m.mae < 1e-12);
    // a normalized prediction of zero is the training mean in data units
    let m = evaluate(&Zero, &norm, &stats, &g, 0..t, 4, 4).unwrap();
    let mu = stats.mean[0];
    let want = ((2.0 - mu).abs() + ((9.0 - mu).abs() + (13.0 - mu).abs()) / 2.0) / 2.0;
    assert!((m.mae - want).abs() < 1e-9);

    let no_targets = Dataset::from_dense(t, n, 1, (0..t * n).map(|p| p as f64).collect()).unwrap();
    assert!(matches!(evaluate(&Zero, &no_targets, &id, &g, 0..t, 4, 4), Err(Error::EmptyEvalMask)));
}

#[test]
fn spin_imputer_names() {
    assert_eq!(tiny_model(2, 0).name(), "spin");
    let h = SpinModel::new(small_spin_h(2, 1, 4, 2, 4), 2, 1, 0).unwrap();
    assert_eq!(h.name(), "spin-h");
    let _ = ModelConfig::default();
}
