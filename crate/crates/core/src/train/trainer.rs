use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::spin_loss;
use crate::data::{training_whiten, Dataset, SpatioTemporalWindow};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::model::SpinModel;
use crate::tensor::{clip_global_norm, Adam, AdamConfig, LrSchedule, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subsample {
    /// Seed nodes per sampled subgraph.
    pub seeds: usize,
    pub hops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub warmup: u64,
    pub restart_period: u64,
    pub grad_clip: f64,
    pub seed: u64,
    pub validation_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Subsample>,
    /// Window length.
    #[serde(alias = "W")]
    pub window: usize,
    /// Stride between validation windows.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batches_per_epoch: 300,
            batch_size: 8,
            patience: 40,
            lr: 0.0008,
            warmup: 12,
            restart_period: 100,
            grad_clip: 5.0,
            seed: 0,
            validation_seed: 1,
            subsample: None,
            window: 24,
            val_stride: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("window", self.window),
            ("val_stride", self.val_stride),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("train.{name} must be positive")));
        }
        if self.patience > self.epochs {
            return Err(Error::Invalid(format!(
                "patience {} exceeds the epoch budget {}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Invalid("lr must be non-negative and grad_clip positive".into()));
        }
        if let Some(s) = self.subsample {
            if s.seeds == 0 {
                return Err(Error::Invalid("subsample.seeds must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup,
            restart_period_epochs: self.restart_period,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::graph::csv_open_error(path, e))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One supervised example: the masked window the model sees, the ground
/// truth and the positions the loss is computed on.
struct Example {
    window: SpatioTemporalWindow,
    graph: SensorGraph,
    loss_mask: Vec<bool>,
}

/// Hides a whitened share of `window` and, when subsampling, restricts it to
/// a k-hop subgraph with the loss limited to the seed nodes.
fn make_example(
    window: &SpatioTemporalWindow,
    graph: &SensorGraph,
    subsample: Option<Subsample>,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let (window, graph, seeds) = match subsample {
        Some(s) if s.seeds < graph.n_nodes() => {
            let picked: Vec<usize> = sample(rng, graph.n_nodes(), s.seeds).into_iter().collect();
            let sub = graph.khop_subgraph(&picked, s.hops)?;
            (window.restrict(&sub)?, sub.graph, Some(sub.is_seed))
        }
        _ => (window.clone(), graph.clone(), None),
    };
    let wh = training_whiten(&window.mask, &window.eval_mask, rng)?;
    let mut loss_mask = wh.loss_mask;
    if let Some(is_seed) = seeds {
        let n = window.n_nodes;
        for (p, m) in loss_mask.iter_mut().enumerate() {
            *m &= is_seed[p % n];
        }
    }
    if loss_mask.iter().zip(&window.eval_mask).any(|(&l, &e)| l && e) {
        return Err(Error::Invalid("evaluation targets leaked into the training loss".into()));
    }
    let window = window.with_mask(wh.input_mask)?;
    Ok(Example {
        window,
        graph,
        loss_mask,
    })
}

/// Loss and parameter gradients for one example; `None` if it has no
/// supervised positions.
pub fn example_gradients(
    model: &SpinModel,
    window: &SpatioTemporalWindow,
    graph: &SensorGraph,
    loss_mask: &[bool],
) -> Result<Option<(f64, Vec<Tensor>)>> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape)?;
    let out = model.forward(&mut tape, &p, window, graph)?;
    let Some(loss) = spin_loss(&mut tape, &out.layers, &window.values, loss_mask)? else {
        return Ok(None);
    };
    let value = tape.scalar(loss)?;
    let mut grads = tape.backward(loss)?;
    Ok(Some((value, p.collect_grads(&mut grads, model.params()))))
}

fn loss_only(model: &SpinModel, ex: &Example) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape)?;
    let out = model.forward(&mut tape, &p, &ex.window, &ex.graph)?;
    // final layer only: validation tracks the imputation that is reported
    let last = [out.imputation()];
    match spin_loss(&mut tape, &last, &ex.window.values, &ex.loss_mask)? {
        Some(v) => Ok(Some(tape.scalar(v)?)),
        None => Ok(None),
    }
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("epoch {epoch}, batch {batch}: non-finite value in {op}")),
        other => other,
    }
}

/// Trains `model` in place on the normalized `dataset`. Batches are drawn
/// from `train_range`, validation windows from `val_range`. On return the
/// model holds the parameters of the best validation epoch.
pub fn train(
    model: &mut SpinModel,
    dataset: &Dataset,
    graph: &SensorGraph,
    train_range: Range<usize>,
    val_range: Range<usize>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let w = config.window;
    if train_range.len() < w || val_range.len() < w {
        return Err(Error::Invalid(format!(
            "training ({}) and validation ({}) ranges must hold at least one window of {w} steps",
            train_range.len(),
            val_range.len()
        )));
    }
    if graph.n_nodes() != dataset.n_nodes() || model.n_nodes() != dataset.n_nodes() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset has {} nodes, graph {}, model {}",
                dataset.n_nodes(),
                graph.n_nodes(),
                model.n_nodes()
            ),
        ));
    }

    let mut val_rng = ChaCha8Rng::seed_from_u64(config.validation_seed);
    let val_examples: Vec<Example> = dataset
        .make_windows_in(val_range, w, config.val_stride)?
        .iter()
        .map(|win| make_example(win, graph, None, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::default(), model.params().tensors());
    let schedule = config.schedule();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let max_offset = train_range.end - w;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut last_lr = 0.0;
        for batch in 0..config.batches_per_epoch {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for _ in 0..config.batch_size {
                let offset = rng.random_range(train_range.start..=max_offset);
                let win = dataset.window(offset, w)?;
                let ex = make_example(&win, graph, config.subsample, &mut rng)?;
                let Some((loss, grads)) =
                    example_gradients(model, &ex.window, &ex.graph, &ex.loss_mask).map_err(|e| diverged(epoch, batch, e))?
                else {
                    continue;
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("epoch {epoch}, batch {batch}: loss {loss}")));
                }
                loss_sum += loss;
                loss_count += 1;
                used += 1;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
                }
            }
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / used as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {batch}: gradient norm {norm}")));
            }
            let progress = epoch as f64 + batch as f64 / config.batches_per_epoch as f64;
            last_lr = schedule.lr(adam.step_count() + 1, progress);
            adam.step(model.params_mut().tensors_mut(), &grads, last_lr)?;
        }

        let mut val_sum = 0.0;
        let mut val_n = 0usize;
        for ex in &val_examples {
            if let Some(v) = loss_only(model, ex).map_err(|e| diverged(epoch, config.batches_per_epoch, e))? {
                val_sum += v;
                val_n += 1;
            }
        }
        if val_n == 0 {
            return Err(Error::EmptyEvalMask);
        }
        let val_mae = val_sum / val_n as f64;
        let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            lr: last_lr,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val mae {val_mae:.5}, lr {last_lr:.2e}");

        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, epoch, model.params().tensors().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_mae, best_epoch, params) = best.expect("at least one epoch ran");
    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(params) {
        *dst = src;
    }
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mae,
        stopped_early,
    })
}
