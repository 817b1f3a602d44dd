use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;
use spin_impute::data::synth::{generate, SynthConfig};
use spin_impute::data::{
    inject_block_missing, inject_point_missing, inject_sparsity_sweep, write_grid, write_mask, Dataset, Injection,
    InjectionReport, NormStats, Split,
};
use spin_impute::graph::{read_distance_csv, write_distance_csv, SensorGraph};
use spin_impute::model::{ModelConfig, SpinModel, Variant};
use spin_impute::tensor::Tape;
use spin_impute::train::{evaluate, train, write_history_csv, Imputer, KnnImputer, MeanImputer};

use crate::config::{DataConfig, InjectConfig, Injector, OutputConfig, Policy, RunConfig, SplitConfig};

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the resolved configuration next to the command's outputs.
fn snapshot(cfg: &RunConfig, command: &str) -> anyhow::Result<()> {
    create_dir(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join(format!("{command}.config.json")), cfg)
}

fn load_graph(data: &DataConfig, n_nodes: usize) -> spin_impute::Result<SensorGraph> {
    match (&data.distances_csv, &data.edges_csv) {
        (Some(path), _) => {
            let (n, dist) = read_distance_csv(path)?;
            if n != n_nodes {
                return Err(spin_impute::Error::Data {
                    source_name: path.display().to_string(),
                    detail: format!("{n} sensors in the distance matrix, {n_nodes} in the values file"),
                });
            }
            let (gamma, delta) = (data.gamma.unwrap_or_default(), data.delta.unwrap_or_default());
            SensorGraph::from_gaussian_kernel(&dist, n, gamma, delta)
        }
        (None, Some(path)) => SensorGraph::read_edges_csv(path, n_nodes),
        (None, None) => unreachable!("validated config names a graph source"),
    }
}

fn run_injection(mask: &[bool], n_nodes: usize, inj: Injector, seed: u64) -> spin_impute::Result<Injection> {
    match inj {
        Injector::Point { rate } => inject_point_missing(mask, rate, seed),
        Injector::Block(policy) => inject_block_missing(mask, n_nodes, policy, seed),
        Injector::Sweep { p } => inject_sparsity_sweep(mask, p, seed),
    }
}

/// Raw dataset with the configured injection applied; previously held-out
/// targets stay held out.
fn load_dataset(cfg: &RunConfig) -> anyhow::Result<(Dataset, Option<InjectionReport>)> {
    let d = &cfg.data;
    let ds = Dataset::load_csv(&d.values_csv, d.mask_csv.as_deref(), d.eval_mask_csv.as_deref())?;
    let Some(injector) = cfg.inject.injector()? else {
        return Ok((ds, None));
    };
    let inj = run_injection(ds.mask(), ds.n_nodes(), injector, cfg.inject.seed)?;
    let eval: Vec<bool> = inj.eval_mask.iter().zip(ds.eval_mask()).map(|(&a, &b)| a || b).collect();
    Ok((ds.with_masks(inj.mask, eval)?, Some(inj.report)))
}

struct Prepared {
    /// Data units, masks applied.
    raw: Dataset,
    dataset: Dataset,
    stats: NormStats,
    graph: SensorGraph,
    split: Split,
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let (raw, _) = load_dataset(cfg)?;
    let graph = load_graph(&cfg.data, raw.n_nodes())?;
    let split = Split::sequential(raw.n_steps(), cfg.data.split.train, cfg.data.split.val)?;
    for (name, r) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
        if r.len() < cfg.data.window {
            return Err(spin_impute::Error::Invalid(format!(
                "{name} split has {} steps, fewer than the window length {}",
                r.len(),
                cfg.data.window
            ))
            .into());
        }
    }
    let (dataset, stats) = raw.normalize(split.train.clone())?;
    Ok(Prepared {
        raw,
        dataset,
        stats,
        graph,
        split,
    })
}

fn load_model(cfg: &RunConfig, n_nodes: usize, checkpoint: &Path) -> anyhow::Result<SpinModel> {
    SpinModel::load(cfg.model.clone(), n_nodes, 1, checkpoint)
        .with_context(|| format!("checkpoint {} does not match the model config", checkpoint.display()))
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.output.dir.join("checkpoint.json"))
}

pub fn synth(config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let synth_cfg: SynthConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| spin_impute::Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| spin_impute::Error::Data {
                source_name: p.display().to_string(),
                detail: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    let data = generate(&synth_cfg)?;
    create_dir(out)?;
    let ds = &data.dataset;
    let n = ds.n_nodes();
    write_grid(&out.join("values.csv"), ds.sensor_ids(), n, ds.values().iter().map(|&v| Some(v)))?;
    write_distance_csv(&out.join("distances.csv"), n, &data.distances)?;
    data.graph.write_edges_csv(&out.join("edges.csv"))?;
    write_json(&out.join("synth.config.json"), &synth_cfg)?;

    let run = RunConfig {
        data: DataConfig {
            values_csv: "values.csv".into(),
            mask_csv: None,
            eval_mask_csv: None,
            distances_csv: Some("distances.csv".into()),
            edges_csv: None,
            gamma: Some(synth_cfg.gamma),
            delta: Some(synth_cfg.radius),
            window: 24,
            stride: 24,
            split: SplitConfig::default(),
        },
        model: ModelConfig::default(),
        train: Default::default(),
        inject: InjectConfig {
            policy: Policy::Point,
            params: serde_json::from_value(json!({"rate": 0.25}))?,
            seed: 1,
        },
        output: OutputConfig { dir: "run".into() },
    };
    write_json(&out.join("config.json"), &run)?;
    log::info!(
        "wrote {} steps x {n} sensors, {} edges to {}",
        ds.n_steps(),
        data.graph.n_edges(),
        out.display()
    );
    Ok(())
}

pub fn inject(cfg: &RunConfig) -> anyhow::Result<()> {
    snapshot(cfg, "inject")?;
    let (ds, report) = load_dataset(cfg)?;
    let dir = &cfg.output.dir;
    write_mask(&dir.join("mask.csv"), ds.sensor_ids(), ds.mask())?;
    write_mask(&dir.join("eval_mask.csv"), ds.sensor_ids(), ds.eval_mask())?;
    let valid = ds.valid_mask().iter().filter(|&&v| v).count();
    let report = report.unwrap_or(InjectionReport {
        valid_before: valid,
        removed_by_failures: 0,
        removed_by_points: 0,
    });
    let summary = json!({
        "policy": cfg.inject.policy,
        "seed": cfg.inject.seed,
        "valid_before": report.valid_before,
        "removed": report.removed(),
        "removed_fraction": report.removed_fraction(),
        "removed_by_failures": report.removed_by_failures,
        "removed_by_points": report.removed_by_points,
        "visible_fraction": ds.mask().iter().filter(|&&m| m).count() as f64 / ds.mask().len() as f64,
    });
    write_json(&dir.join("inject_summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    snapshot(cfg, "train")?;
    let start = Instant::now();
    let p = prepare(cfg)?;
    for w in cfg.model.warnings(cfg.data.window) {
        log::warn!("{w}");
    }
    let mut model = SpinModel::new(cfg.model.clone(), p.dataset.n_nodes(), 1, cfg.train.seed)?;
    log::info!(
        "training {} ({} parameters) on {} sensors, {} edges",
        cfg.model.variant,
        model.params().num_scalars(),
        p.dataset.n_nodes(),
        p.graph.n_edges()
    );
    let report = train(&mut model, &p.dataset, &p.graph, p.split.train.clone(), p.split.val.clone(), &cfg.train)?;
    let dir = &cfg.output.dir;
    model.save(&dir.join("checkpoint.json"))?;
    write_history_csv(&dir.join("history.csv"), &report.history)?;
    let summary = json!({
        "epochs": report.history.len(),
        "best_epoch": report.best_epoch,
        "best_val_mae": report.best_val_mae,
        "stopped_early": report.stopped_early,
        "seconds": start.elapsed().as_secs_f64(),
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn impute(cfg: &RunConfig, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    snapshot(cfg, "impute")?;
    let p = prepare(cfg)?;
    let model = load_model(cfg, p.dataset.n_nodes(), &checkpoint_path(cfg, checkpoint))?;
    let ds = &p.dataset;
    let (t_total, n) = (ds.n_steps(), ds.n_nodes());
    let w = cfg.data.window.min(t_total);

    // non-overlapping windows plus one flush with the end for the tail
    let mut offsets: Vec<usize> = (0..=t_total - w).step_by(w).collect();
    if offsets.last().map(|&o| o + w) != Some(t_total) {
        offsets.push(t_total - w);
    }
    let mut filled = vec![None; t_total * n];
    for offset in offsets {
        let window = ds.window(offset, w)?;
        if window.mask.iter().all(|&m| m) {
            continue;
        }
        let pred = model.predict(&window, &p.graph)?;
        for (k, &m) in window.mask.iter().enumerate() {
            let pos = offset * n + k;
            if !m && filled[pos].is_none() {
                filled[pos] = Some(p.stats.denormalize(pred[k], 0));
            }
        }
    }
    let raw = &p.raw;
    let cells = (0..t_total * n).map(|pos| if raw.mask()[pos] { Some(raw.values()[pos]) } else { filled[pos] });
    let path = out.unwrap_or_else(|| cfg.output.dir.join("imputed.csv"));
    write_grid(&path, ds.sensor_ids(), n, cells)?;
    let n_imputed = filled.iter().filter(|c| c.is_some()).count();
    log::info!("imputed {n_imputed} cells into {}", path.display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    snapshot(cfg, "evaluate")?;
    let p = prepare(cfg)?;
    let model = load_model(cfg, p.dataset.n_nodes(), &checkpoint_path(cfg, checkpoint))?;
    let mean = MeanImputer::fit(&p.dataset, p.split.train.clone())?;
    let knn = KnnImputer::new(mean.clone());
    let imputers: [&dyn Imputer; 3] = [&model, &mean, &knn];
    let mut doc = serde_json::Map::new();
    for imp in imputers {
        let m = evaluate(imp, &p.dataset, &p.stats, &p.graph, p.split.test.clone(), cfg.data.window, cfg.data.stride)?;
        log::info!("{}: test mae {:.5} over {} targets", imp.name(), m.mae, m.n_eval);
        doc.insert(imp.name().to_string(), serde_json::to_value(m)?);
    }
    write_json(&cfg.output.dir.join("metrics.json"), &doc)?;
    let table: serde_json::Map<_, _> = doc.iter().map(|(k, v)| (k.clone(), v["mae"].clone())).collect();
    println!("{}", serde_json::to_string(&table)?);
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    variant: Variant,
    window: usize,
    layer: usize,
    masked: bool,
    pairs: usize,
    expected: usize,
}

#[derive(Serialize)]
struct BenchTiming {
    variant: Variant,
    window: usize,
    total_pairs: usize,
    forward_ms: f64,
}

/// Closed-form query-key pair count of one layer.
fn expected_pairs(model: &ModelConfig, graph: &SensorGraph, mask: &[bool], w: usize, masked: bool) -> usize {
    let (n, e) = (graph.n_nodes(), graph.n_edges());
    let obs: Vec<usize> = (0..n).map(|i| (0..w).filter(|&t| mask[t * n + i]).count()).collect();
    match model.variant {
        Variant::Spin if masked => {
            (0..n).map(|i| w * obs[i]).sum::<usize>() + graph.edges().iter().map(|ed| w * obs[ed.src]).sum::<usize>()
        }
        Variant::Spin => (n + e) * w * w,
        Variant::SpinH => {
            let k = model.hubs.k;
            let read = if masked { obs.iter().sum() } else { n * w };
            (n + e) * k * w + k * read
        }
    }
}

pub fn benchmark(model: &ModelConfig, n_nodes: usize, seed: u64, repeats: usize, out: &Path) -> anyhow::Result<()> {
    if repeats == 0 {
        return Err(spin_impute::Error::Invalid("repeats must be positive".into()).into());
    }
    create_dir(out)?;
    let windows = [8, 16, 32, 64];
    let synth = generate(&SynthConfig {
        n_nodes,
        n_steps: 64,
        seed,
        ..SynthConfig::default()
    })?;
    let inj = inject_point_missing(synth.dataset.mask(), 0.25, seed)?;
    let ds = synth.dataset.with_masks(inj.mask, inj.eval_mask)?;
    let graph = &synth.graph;
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for variant in [Variant::Spin, Variant::SpinH] {
        let cfg = ModelConfig {
            variant,
            ..model.clone()
        };
        let m = SpinModel::new(cfg.clone(), n_nodes, 1, seed)?;
        for w in windows {
            let window = ds.window(0, w)?;
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape)?;
            let fwd = m.forward(&mut tape, &p, &window, graph)?;
            let mut total = 0;
            for l in 0..cfg.n_layers() {
                let masked = l < cfg.eta;
                let pairs = fwd.pairs_in_layer(l);
                let expected = expected_pairs(&cfg, graph, &window.mask, w, masked);
                if pairs != expected {
                    bail!("{variant} W={w} layer {l}: counted {pairs} query-key pairs, closed form gives {expected}");
                }
                total += pairs;
                rows.push(BenchRow {
                    variant,
                    window: w,
                    layer: l,
                    masked,
                    pairs,
                    expected,
                });
            }
            let best = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    m.predict(&window, graph).map(|_| t.elapsed().as_secs_f64())
                })
                .collect::<spin_impute::Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            log::info!("{variant} W={w}: {total} pairs, {:.2} ms", best * 1e3);
            timings.push(BenchTiming {
                variant,
                window: w,
                total_pairs: total,
                forward_ms: best * 1e3,
            });
        }
    }
    let mut csv = String::from("variant,window,layer,masked,pairs,expected\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.variant, r.window, r.layer, r.masked, r.pairs, r.expected));
    }
    let path = out.join("benchmark_pairs.csv");
    fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    let doc = json!({
        "n_nodes": n_nodes,
        "n_edges": graph.n_edges(),
        "seed": seed,
        "model": model,
        "timings": timings,
    });
    write_json(&out.join("benchmark.json"), &doc)?;
    println!("{}", serde_json::to_string(&doc["timings"])?);
    Ok(())
}
