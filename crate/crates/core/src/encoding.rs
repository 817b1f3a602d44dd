//! Spatiotemporal coordinates `q = ρ([u_t, v^i])`: sinusoidal time features
//! fused with a learnable embedding per node.

use std::f64::consts::TAU;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub periods: Vec<f64>,
    pub d_v: usize,
    pub d_q: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            periods: vec![24.0],
            d_v: 16,
            d_q: 32,
        }
    }
}

impl EncodingConfig {
    pub fn d_u(&self) -> usize {
        2 * self.periods.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() {
            return Err(Error::Invalid("encoding needs at least one period".into()));
        }
        if let Some(p) = self.periods.iter().find(|&&p| !(p > 0.0)) {
            return Err(Error::Invalid(format!("encoding period must be positive, got {p}")));
        }
        if self.d_v == 0 || self.d_q == 0 {
            return Err(Error::Invalid("encoding widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[sin(2π·step/P), cos(2π·step/P)]` for every period `P`.
pub fn temporal_encoding(step: u64, periods: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * periods.len());
    for &p in periods {
        if !(p > 0.0) {
            return Err(Error::Invalid(format!("encoding period must be positive, got {p}")));
        }
        // reduce first so large step indices keep full phase precision
        let phase = TAU * ((step as f64) % p) / p;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Encoding {
    config: EncodingConfig,
    n_nodes: usize,
    spatial: ParamId,
    fuse: Mlp,
}

impl Encoding {
    pub const SPATIAL: &'static str = "encoding.spatial";

    /// `n_nodes` is the size of the full sensor network, not of a subgraph.
    pub fn init(
        store: &mut ParamStore,
        config: EncodingConfig,
        n_nodes: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let v = (0..n_nodes * config.d_v).map(|_| normal.sample(rng)).collect();
        let spatial = store.insert(Self::SPATIAL, Tensor::matrix(n_nodes, config.d_v, v)?)?;
        let spec = MlpSpec::with_hidden(config.d_u() + config.d_v, hidden, depth, config.d_q)?;
        let fuse = Mlp::init(store, "encoding.fuse", spec, rng)?;
        Ok(Self {
            config,
            n_nodes,
            spatial,
            fuse,
        })
    }

    pub fn config(&self) -> &EncodingConfig {
        &self.config
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn spatial(&self) -> ParamId {
        self.spatial
    }

    pub fn fuse(&self) -> &Mlp {
        &self.fuse
    }

    /// Coordinates for a `steps.len() × nodes.len()` grid, time-major.
    /// `nodes` are global node ids.
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, steps: &[u64], nodes: &[usize]) -> Result<Value> {
        if let Some(&bad) = nodes.iter().find(|&&v| v >= self.n_nodes) {
            return Err(Error::OutOfRange {
                what: "node",
                index: bad,
                len: self.n_nodes,
            });
        }
        let d_u = self.config.d_u();
        let mut u = Vec::with_capacity(steps.len() * nodes.len() * d_u);
        let mut rows = Vec::with_capacity(steps.len() * nodes.len());
        for &s in steps {
            let enc = temporal_encoding(s, &self.config.periods)?;
            for &v in nodes {
                u.extend_from_slice(&enc);
                rows.push(v);
            }
        }
        let u = tape.constant(Tensor::matrix(rows.len(), d_u, u)?)?;
        let v = tape.gather_rows(p[self.spatial], Rc::new(rows))?;
        self.fuse.apply(tape, p, &[u, v])
    }

    /// Single coordinate `q_step^node`.
    pub fn positional_encoding(&self, tape: &mut Tape, p: &BoundParams, step: u64, node: usize) -> Result<Value> {
        self.encode(tape, p, &[step], &[node])
    }
}
