use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{csv_open_error, Subgraph};

/// A multivariate series over `n_nodes` sensors, stored time-major:
/// entry `(t, i, f)` lives at `(t·n_nodes + i)·n_features + f`; mask entry
/// `(t, i)` at `t·n_nodes + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_steps: usize,
    n_nodes: usize,
    n_features: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    eval_mask: Vec<bool>,
    steps: Vec<u64>,
    sensor_ids: Vec<String>,
}

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn normalize(&self, v: f64, feature: usize) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize(&self, v: f64, feature: usize) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    /// Applies [`NormStats::denormalize`] to a feature-minor buffer.
    pub fn denormalize_all(&self, values: &mut [f64]) {
        let d = self.mean.len();
        for (k, v) in values.iter_mut().enumerate() {
            *v = self.denormalize(*v, k % d);
        }
    }
}

/// Sequential train / validation / test step ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn sequential(n_steps: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Invalid(format!(
                "split fractions train={train_frac}, val={val_frac} must be positive and sum below 1"
            )));
        }
        let train_end = (n_steps as f64 * train_frac).round() as usize;
        let val_end = (n_steps as f64 * (train_frac + val_frac)).round() as usize;
        Ok(Self {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n_steps,
        })
    }
}

/// One contiguous length-`len` slice of a dataset, possibly restricted to a
/// subset of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalWindow {
    pub offset: usize,
    pub len: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    /// `len × n_nodes × n_features`; entries with `mask = false` must not be
    /// read by a model.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub eval_mask: Vec<bool>,
    /// Absolute step index of every row.
    pub steps: Vec<u64>,
    /// Global id of every node (indexes spatial embeddings).
    pub nodes: Vec<usize>,
}

impl SpatioTemporalWindow {
    pub fn n_positions(&self) -> usize {
        self.len * self.n_nodes
    }

    /// Observed-set positions (`mask = 1`), time-major.
    pub fn observed_positions(&self) -> Vec<usize> {
        (0..self.n_positions()).filter(|&p| self.mask[p]).collect()
    }

    /// Target-set positions (`mask = 0`), time-major.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.n_positions()).filter(|&p| !self.mask[p]).collect()
    }

    pub fn value(&self, pos: usize, feature: usize) -> f64 {
        self.values[pos * self.n_features + feature]
    }

    /// Same window with a different visibility mask.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::shape("with_mask", format!("{} entries for {}", mask.len(), self.mask.len())));
        }
        Ok(Self { mask, ..self.clone() })
    }

    /// Keeps only `sub.nodes`, in that order.
    pub fn restrict(&self, sub: &Subgraph) -> Result<Self> {
        let n = sub.nodes.len();
        if let Some(&bad) = sub.nodes.iter().find(|&&v| v >= self.n_nodes) {
            return Err(Error::OutOfRange {
                what: "subgraph node",
                index: bad,
                len: self.n_nodes,
            });
        }
        let d = self.n_features;
        let mut values = Vec::with_capacity(self.len * n * d);
        let mut mask = Vec::with_capacity(self.len * n);
        let mut eval_mask = Vec::with_capacity(self.len * n);
        for t in 0..self.len {
            for &v in &sub.nodes {
                let p = t * self.n_nodes + v;
                values.extend_from_slice(&self.values[p * d..(p + 1) * d]);
                mask.push(self.mask[p]);
                eval_mask.push(self.eval_mask[p]);
            }
        }
        Ok(Self {
            offset: self.offset,
            len: self.len,
            n_nodes: n,
            n_features: d,
            values,
            mask,
            eval_mask,
            steps: self.steps.clone(),
            nodes: sub.nodes.iter().map(|&v| self.nodes[v]).collect(),
        })
    }

    /// Relabels nodes: node `v` moves to `perm[v]`. Global ids move along.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::graph::check_permutation(perm, self.n_nodes)?;
        let (n, d) = (self.n_nodes, self.n_features);
        let mut out = self.clone();
        for t in 0..self.len {
            for v in 0..n {
                let (src, dst) = (t * n + v, t * n + perm[v]);
                out.mask[dst] = self.mask[src];
                out.eval_mask[dst] = self.eval_mask[src];
                out.values[dst * d..(dst + 1) * d].copy_from_slice(&self.values[src * d..(src + 1) * d]);
            }
        }
        for v in 0..n {
            out.nodes[perm[v]] = self.nodes[v];
        }
        Ok(out)
    }
}

/// `Ok(None)` for a missing cell (blank, `nan`, `na`), `Err` for garbage.
fn parse_cell(field: &str) -> std::result::Result<Option<f64>, ()> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

fn read_grid(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::data(
                path.display().to_string(),
                format!("row {r} has {} columns, header has {}", rec.len(), header.len()),
            ));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if header.is_empty() || rows.is_empty() {
        return Err(Error::data(path.display().to_string(), "no data rows"));
    }
    Ok((header, rows))
}

fn read_binary_grid(path: &Path, n_steps: usize, n_nodes: usize) -> Result<Vec<bool>> {
    let (header, rows) = read_grid(path)?;
    let src = path.display().to_string();
    if rows.len() != n_steps || header.len() != n_nodes {
        return Err(Error::data(
            src,
            format!(
                "mask is {}x{}, values are {n_steps}x{n_nodes}",
                rows.len(),
                header.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(n_steps * n_nodes);
    for (r, row) in rows.iter().enumerate() {
        for (c, field) in row.iter().enumerate() {
            match field.trim() {
                "0" => out.push(false),
                "1" => out.push(true),
                other => {
                    return Err(Error::data(
                        src,
                        format!("row {r}, column {c}: mask value {other:?} is not 0 or 1"),
                    ))
                }
            }
        }
    }
    Ok(out)
}

/// Writes a `T × N` grid of numbers with a header row of sensor ids;
/// `None` cells are left blank.
pub fn write_grid(path: &Path, header: &[String], n_cols: usize, cells: impl Iterator<Item = Option<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(header)?;
    let mut row: Vec<String> = Vec::with_capacity(n_cols);
    for cell in cells {
        row.push(cell.map(|v| format!("{v}")).unwrap_or_default());
        if row.len() == n_cols {
            w.write_record(&row)?;
            row.clear();
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, header: &[String], mask: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(header)?;
    for row in mask.chunks(header.len()) {
        w.write_record(row.iter().map(|&m| if m { "1" } else { "0" }))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Validates and assembles a dataset. `values` is `T×N×d` with NaN for
    /// entries that were never observed.
    pub fn new(
        n_steps: usize,
        n_nodes: usize,
        n_features: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        eval_mask: Vec<bool>,
    ) -> Result<Self> {
        if n_steps == 0 || n_nodes == 0 || n_features == 0 {
            return Err(Error::Invalid("dataset dimensions must be positive".into()));
        }
        let positions = n_steps * n_nodes;
        if values.len() != positions * n_features || mask.len() != positions || eval_mask.len() != positions {
            return Err(Error::shape(
                "dataset",
                format!(
                    "values {}, mask {}, eval mask {} for {n_steps}x{n_nodes}x{n_features}",
                    values.len(),
                    mask.len(),
                    eval_mask.len()
                ),
            ));
        }
        for p in 0..positions {
            let has_value = values[p * n_features..(p + 1) * n_features].iter().all(|v| v.is_finite());
            let (t, i) = (p / n_nodes, p % n_nodes);
            if mask[p] && eval_mask[p] {
                return Err(Error::Invalid(format!("step {t}, node {i} is both visible and an evaluation target")));
            }
            if (mask[p] || eval_mask[p]) && !has_value {
                return Err(Error::Invalid(format!("step {t}, node {i} is marked valid but has no value")));
            }
        }
        Ok(Self {
            n_steps,
            n_nodes,
            n_features,
            values,
            mask,
            eval_mask,
            steps: (0..n_steps as u64).collect(),
            sensor_ids: (0..n_nodes).map(|i| i.to_string()).collect(),
        })
    }

    /// Fully observed dataset from a dense `T×N×d` buffer.
    pub fn from_dense(n_steps: usize, n_nodes: usize, n_features: usize, values: Vec<f64>) -> Result<Self> {
        let positions = n_steps * n_nodes;
        let mask = (0..positions)
            .map(|p| values[p * n_features..(p + 1) * n_features].iter().all(|v| v.is_finite()))
            .collect();
        Self::new(n_steps, n_nodes, n_features, values, mask, vec![false; positions])
    }

    /// Reads a `T × N` values CSV (header = sensor ids). Without a mask file,
    /// blank or NaN cells are missing; with one, the mask decides visibility.
    /// An optional evaluation mask marks held-out targets.
    pub fn load_csv(values_path: &Path, mask_path: Option<&Path>, eval_mask_path: Option<&Path>) -> Result<Self> {
        let (header, rows) = read_grid(values_path)?;
        let (n_steps, n_nodes) = (rows.len(), header.len());
        let src = values_path.display().to_string();
        let mut values = Vec::with_capacity(n_steps * n_nodes);
        for (r, row) in rows.iter().enumerate() {
            for (c, field) in row.iter().enumerate() {
                match parse_cell(field) {
                    Ok(v) => values.push(v.unwrap_or(f64::NAN)),
                    Err(()) => {
                        return Err(Error::data(src, format!("row {r}, column {c}: not a number: {field:?}")));
                    }
                }
            }
        }
        let present: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
        let eval_mask = match eval_mask_path {
            Some(p) => read_binary_grid(p, n_steps, n_nodes)?,
            None => vec![false; n_steps * n_nodes],
        };
        let mask = match mask_path {
            Some(p) => {
                let m = read_binary_grid(p, n_steps, n_nodes)?;
                if let Some(pos) = (0..m.len()).find(|&k| m[k] && !present[k]) {
                    return Err(Error::data(
                        p.display().to_string(),
                        format!("row {}, column {} is marked valid but the value is missing", pos / n_nodes, pos % n_nodes),
                    ));
                }
                m
            }
            None => present.iter().zip(&eval_mask).map(|(&v, &e)| v && !e).collect(),
        };
        let mut ds = Self::new(n_steps, n_nodes, 1, values, mask, eval_mask)?;
        ds.sensor_ids = header;
        Ok(ds)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn eval_mask(&self) -> &[bool] {
        &self.eval_mask
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn with_sensor_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_nodes {
            return Err(Error::Invalid(format!("{} sensor ids for {} nodes", ids.len(), self.n_nodes)));
        }
        self.sensor_ids = ids;
        Ok(self)
    }

    /// Entries with ground truth: visible or held out for evaluation.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.mask.iter().zip(&self.eval_mask).map(|(&m, &e)| m || e).collect()
    }

    /// Replaces visibility and evaluation masks (re-validated).
    pub fn with_masks(&self, mask: Vec<bool>, eval_mask: Vec<bool>) -> Result<Self> {
        let mut ds = Self::new(self.n_steps, self.n_nodes, self.n_features, self.values.clone(), mask, eval_mask)?;
        ds.sensor_ids = self.sensor_ids.clone();
        ds.steps = self.steps.clone();
        Ok(ds)
    }

    /// Standardizes every feature with statistics from the visible entries
    /// of `fit_range` (population variance).
    pub fn normalize(&self, fit_range: Range<usize>) -> Result<(Self, NormStats)> {
        let d = self.n_features;
        let mut mean = vec![0.0; d];
        let mut count = vec![0usize; d];
        for t in fit_range.clone() {
            for i in 0..self.n_nodes {
                let p = t * self.n_nodes + i;
                if self.mask[p] {
                    for f in 0..d {
                        mean[f] += self.values[p * d + f];
                        count[f] += 1;
                    }
                }
            }
        }
        if let Some(f) = (0..d).find(|&f| count[f] < 2) {
            return Err(Error::Invalid(format!("feature {f} has fewer than 2 valid entries for normalization")));
        }
        for f in 0..d {
            mean[f] /= count[f] as f64;
        }
        let mut var = vec![0.0; d];
        for t in fit_range {
            for i in 0..self.n_nodes {
                let p = t * self.n_nodes + i;
                if self.mask[p] {
                    for f in 0..d {
                        let dv = self.values[p * d + f] - mean[f];
                        var[f] += dv * dv;
                    }
                }
            }
        }
        let std: Vec<f64> = var.iter().zip(&count).map(|(v, &c)| (v / c as f64).sqrt()).collect();
        if let Some(f) = std.iter().position(|&s| !(s > 1e-12)) {
            return Err(Error::Invalid(format!("feature {f} has zero variance (degenerate sensor data)")));
        }
        let stats = NormStats { mean, std };
        let mut out = self.clone();
        out.apply_stats(&stats);
        Ok((out, stats))
    }

    /// Standardizes with existing statistics.
    pub fn apply_stats(&mut self, stats: &NormStats) {
        let d = self.n_features;
        for (k, v) in self.values.iter_mut().enumerate() {
            if v.is_finite() {
                *v = stats.normalize(*v, k % d);
            }
        }
    }

    pub fn denormalize(&self, stats: &NormStats) -> Self {
        let mut out = self.clone();
        let d = self.n_features;
        for (k, v) in out.values.iter_mut().enumerate() {
            if v.is_finite() {
                *v = stats.denormalize(*v, k % d);
            }
        }
        out
    }

    pub fn window(&self, offset: usize, len: usize) -> Result<SpatioTemporalWindow> {
        if len == 0 || offset + len > self.n_steps {
            return Err(Error::Invalid(format!(
                "window {offset}..{} outside the {} available steps",
                offset + len,
                self.n_steps
            )));
        }
        let (n, d) = (self.n_nodes, self.n_features);
        let span = offset * n..(offset + len) * n;
        Ok(SpatioTemporalWindow {
            offset,
            len,
            n_nodes: n,
            n_features: d,
            values: self.values[span.start * d..span.end * d].to_vec(),
            mask: self.mask[span.clone()].to_vec(),
            eval_mask: self.eval_mask[span].to_vec(),
            steps: self.steps[offset..offset + len].to_vec(),
            nodes: (0..n).collect(),
        })
    }

    /// Windows of length `len` at offsets `0, stride, 2·stride, …`.
    pub fn make_windows(&self, len: usize, stride: usize) -> Result<Vec<SpatioTemporalWindow>> {
        self.make_windows_in(0..self.n_steps, len, stride)
    }

    /// Like [`Dataset::make_windows`] but restricted to the steps in `range`.
    pub fn make_windows_in(&self, range: Range<usize>, len: usize, stride: usize) -> Result<Vec<SpatioTemporalWindow>> {
        if stride == 0 {
            return Err(Error::Invalid("window stride must be at least 1".into()));
        }
        if len == 0 || range.end > self.n_steps || len > range.len() {
            return Err(Error::Invalid(format!(
                "window length {len} does not fit in steps {}..{}",
                range.start, range.end
            )));
        }
        (range.start..=range.end - len)
            .step_by(stride)
            .map(|o| self.window(o, len))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn blank_cell_becomes_missing() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "a,b\n1,2\n3,\n5,6\n");
        let ds = Dataset::load_csv(&v, None, None).unwrap();
        assert_eq!(ds.mask().iter().filter(|m| !**m).count(), 1);
        assert!(!ds.mask()[3]);
        assert_eq!(ds.sensor_ids(), &["a", "b"]);
    }

    #[test]
    fn full_grid_gives_all_ones_mask() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "a,b\n1,2\n3,4\n");
        let ds = Dataset::load_csv(&v, None, None).unwrap();
        assert!(ds.mask().iter().all(|&m| m));
    }

    #[test]
    fn mask_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", "a,b\n1,2\n3,4\n");
        let bad = write(dir.path(), "m.csv", "a,b\n1,1\n2,1\n");
        let err = Dataset::load_csv(&v, Some(&bad), None).unwrap_err().to_string();
        assert!(err.contains("row 1, column 0"), "{err}");

        let short = write(dir.path(), "m2.csv", "a,b\n1,1\n");
        assert!(Dataset::load_csv(&v, Some(&short), None).is_err());

        let ragged = write(dir.path(), "r.csv", "a,b\n1,2\n3\n");
        assert!(Dataset::load_csv(&ragged, None, None).is_err());
    }

    #[test]
    fn normalize_two_points() {
        let ds = Dataset::from_dense(2, 1, 1, vec![1.0, 3.0]).unwrap();
        let (n, stats) = ds.normalize(0..2).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(n.values(), &[-1.0, 1.0]);
        let back = n.denormalize(&stats);
        assert_eq!(back.values(), ds.values());
    }

    #[test]
    fn normalize_is_idempotent_on_standardized_data() {
        let ds = Dataset::from_dense(4, 1, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (n, stats) = ds.normalize(0..4).unwrap();
        assert!((stats.mean[0]).abs() < 1e-12 && (stats.std[0] - 1.0).abs() < 1e-12);
        for (a, b) in n.values().iter().zip(ds.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_constant_data() {
        let ds = Dataset::from_dense(3, 2, 1, vec![4.0; 6]).unwrap();
        assert!(ds.normalize(0..3).is_err());
    }

    #[test]
    fn normalize_ignores_hidden_entries() {
        let mut values = vec![1.0, 3.0, 1000.0];
        values.push(2.0);
        let mask = vec![true, true, false, true];
        let ds = Dataset::new(4, 1, 1, values, mask, vec![false; 4]).unwrap();
        let (_, stats) = ds.normalize(0..2).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
    }

    #[test]
    fn window_offsets() {
        let ds = Dataset::from_dense(24, 1, 1, (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(ds.make_windows(24, 24).unwrap().len(), 1);
        let ds = Dataset::from_dense(48, 1, 1, (0..48).map(f64::from).collect()).unwrap();
        let w = ds.make_windows(24, 12).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 12, 24]);
        assert_eq!(w[1].steps[0], 12);
        assert!(ds.make_windows(24, 0).is_err());
        assert!(ds.make_windows(49, 1).is_err());
    }

    #[test]
    fn observed_and_target_partition() {
        let ds = Dataset::new(2, 2, 1, vec![1.0, f64::NAN, 3.0, 4.0], vec![true, false, true, false], vec![false, false, false, true])
            .unwrap();
        let w = ds.window(0, 2).unwrap();
        let (obs, tgt) = (w.observed_positions(), w.target_positions());
        assert_eq!(obs, vec![0, 2]);
        assert_eq!(tgt, vec![1, 3]);
    }

    #[test]
    fn invalid_mask_combinations() {
        assert!(Dataset::new(1, 1, 1, vec![1.0], vec![true], vec![true]).is_err());
        assert!(Dataset::new(1, 1, 1, vec![f64::NAN], vec![true], vec![false]).is_err());
        assert!(Dataset::new(1, 1, 1, vec![f64::NAN], vec![false], vec![true]).is_err());
    }
}
