use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean absolute error over the positions selected by `eval_mask`.
///
/// `predictions` and `truth` are position-major with `n_features` values per
/// position; unselected truth entries are never read (they may be NaN).
pub fn mae(predictions: &[f64], truth: &[f64], eval_mask: &[bool], n_features: usize) -> Result<f64> {
    let (sum, n) = abs_error_sum(predictions, truth, eval_mask, n_features)?;
    if n == 0 {
        return Err(Error::EmptyEvalMask);
    }
    Ok(sum / n as f64)
}

/// `(Σ |pred − truth|, number of entries)` over selected positions.
pub fn abs_error_sum(predictions: &[f64], truth: &[f64], eval_mask: &[bool], n_features: usize) -> Result<(f64, usize)> {
    if predictions.len() != truth.len() || predictions.len() != eval_mask.len() * n_features {
        return Err(Error::shape(
            "mae",
            format!(
                "predictions {}, truth {}, mask {} x {n_features} features",
                predictions.len(),
                truth.len(),
                eval_mask.len()
            ),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (p, _) in eval_mask.iter().enumerate().filter(|(_, &m)| m) {
        for f in 0..n_features {
            let k = p * n_features + f;
            sum += (predictions[k] - truth[k]).abs();
            n += 1;
        }
    }
    Ok((sum, n))
}

/// Metrics document: MAE averaged across windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub n_eval: usize,
    pub per_window: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_node: Vec<Option<f64>>,
}

/// Accumulates per-window MAEs; windows without targets are skipped.
#[derive(Clone, Debug)]
pub struct MaeAccumulator {
    per_window: Vec<f64>,
    n_eval: usize,
    node_sum: Vec<f64>,
    node_count: Vec<usize>,
}

impl MaeAccumulator {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            per_window: Vec::new(),
            n_eval: 0,
            node_sum: vec![0.0; n_nodes],
            node_count: vec![0; n_nodes],
        }
    }

    /// Adds one window. `nodes[i]` is the global id of local node `i`.
    pub fn add_window(
        &mut self,
        predictions: &[f64],
        truth: &[f64],
        eval_mask: &[bool],
        n_features: usize,
        nodes: &[usize],
    ) -> Result<()> {
        let (sum, n) = abs_error_sum(predictions, truth, eval_mask, n_features)?;
        if n == 0 {
            return Ok(());
        }
        self.per_window.push(sum / n as f64);
        self.n_eval += n;
        let n_nodes = nodes.len();
        for (p, _) in eval_mask.iter().enumerate().filter(|(_, &m)| m) {
            let node = nodes[p % n_nodes];
            for f in 0..n_features {
                let k = p * n_features + f;
                self.node_sum[node] += (predictions[k] - truth[k]).abs();
                self.node_count[node] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Metrics> {
        if self.per_window.is_empty() {
            return Err(Error::EmptyEvalMask);
        }
        let mae = self.per_window.iter().sum::<f64>() / self.per_window.len() as f64;
        let per_node = self
            .node_sum
            .iter()
            .zip(&self.node_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Ok(Metrics {
            mae,
            n_eval: self.n_eval,
            per_window: self.per_window,
            per_node,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0], &[true, true], 1).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 4.0], &[1.0, 2.0], &[true, true], 1).unwrap(), 1.5);
        assert_eq!(mae(&[2.0, 4.0], &[1.0, f64::NAN], &[true, false], 1).unwrap(), 1.0);
        assert!(matches!(mae(&[2.0], &[1.0], &[false], 1), Err(Error::EmptyEvalMask)));
        assert!(mae(&[2.0], &[1.0, 3.0], &[true], 1).is_err());
    }

    #[test]
    fn window_average_is_not_pooled() {
        let mut acc = MaeAccumulator::new(2);
        // window A: one target, error 4
        acc.add_window(&[4.0, 0.0], &[0.0, 0.0], &[true, false], 1, &[0, 1]).unwrap();
        // window B: three targets, errors 0, 0, 2 (two positions per step, 2 steps)
        acc.add_window(&[0.0, 0.0, 2.0, 9.0], &[0.0, 0.0, 0.0, 0.0], &[true, true, true, false], 1, &[0, 1])
            .unwrap();
        let m = acc.finish().unwrap();
        let per_window_mean = (4.0 + 2.0 / 3.0) / 2.0;
        let pooled = (4.0 + 2.0) / 4.0;
        assert!((m.mae - per_window_mean).abs() < 1e-15);
        assert!((m.mae - pooled).abs() > 0.1);
        assert_eq!(m.n_eval, 4);
        assert_eq!(m.per_node, vec![Some(6.0 / 3.0), Some(0.0)]);
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        let mut acc = MaeAccumulator::new(1);
        acc.add_window(&[1.0], &[2.0], &[false], 1, &[0]).unwrap();
        assert!(matches!(acc.finish(), Err(Error::EmptyEvalMask)));
    }
}
