use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{weight_sets, AttentionBlock, Attended};
use super::layout;
use super::{ModelConfig, Variant};
use crate::data::SpatioTemporalWindow;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::tensor::{AttentionLayout, BoundParams, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteKind {
    SelfAttention,
    CrossAttention,
    HubUpdate,
    HubSelf,
    HubCross,
}

/// One evaluated attention block, kept for audits.
#[derive(Clone, Debug)]
pub struct AttentionSite {
    pub layer: usize,
    pub kind: SiteKind,
    pub masked: bool,
    pub layout: Rc<AttentionLayout>,
    pub attended: Attended,
}

impl AttentionSite {
    pub fn pairs(&self) -> usize {
        self.layout.pair_count()
    }

    pub fn weight_sets(&self, tape: &Tape) -> Result<Vec<Vec<f64>>> {
        weight_sets(tape, &self.attended, &self.layout)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Imputations after every layer, each `W·N × d`, time-major.
    pub layers: Vec<Value>,
    /// Representations `H^(0..=L)`, each `W·N × d_h`.
    pub states: Vec<Value>,
    pub sites: Vec<AttentionSite>,
}

impl ForwardOutput {
    pub fn imputation(&self) -> Value {
        *self.layers.last().expect("at least one layer")
    }

    /// Query-key pairs evaluated in layer `l` (0-based).
    pub fn pairs_in_layer(&self, l: usize) -> usize {
        self.sites.iter().filter(|s| s.layer == l).map(AttentionSite::pairs).sum()
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Spin {
        cross: AttentionBlock,
        self_att: AttentionBlock,
        update: Mlp,
    },
    Hub {
        hub_msg: AttentionBlock,
        hub_update: Mlp,
        node_self: AttentionBlock,
        node_cross: AttentionBlock,
        update: Mlp,
    },
}

#[derive(Clone, Debug)]
pub struct SpinModel {
    config: ModelConfig,
    n_nodes: usize,
    n_features: usize,
    store: ParamStore,
    encoding: Encoding,
    init_observed: Mlp,
    init_target: Mlp,
    layers: Vec<Layer>,
    readouts: Vec<Mlp>,
    hub_base: Option<ParamId>,
}

struct Layouts {
    masked: Option<(Rc<AttentionLayout>, Rc<AttentionLayout>, Rc<AttentionLayout>)>,
    unmasked: Option<(Rc<AttentionLayout>, Rc<AttentionLayout>, Rc<AttentionLayout>)>,
}

impl SpinModel {
    /// Randomly initialized model for a network of `n_nodes` sensors with
    /// `n_features` channels each.
    pub fn new(config: ModelConfig, n_nodes: usize, n_features: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_nodes == 0 || n_features == 0 {
            return Err(Error::Invalid("model needs at least one node and one feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (hid, depth, d_h) = (config.mlp_hidden, config.mlp_depth, config.d_h);
        let d_q = config.encoding.d_q;
        let encoding = Encoding::init(&mut store, config.encoding.clone(), n_nodes, hid, depth, &mut rng)?;
        let init_observed = Mlp::init(
            &mut store,
            "init.observed",
            MlpSpec::with_hidden(n_features + d_q, hid, depth, d_h)?,
            &mut rng,
        )?;
        let init_target = Mlp::init(&mut store, "init.target", MlpSpec::with_hidden(d_q, hid, depth, d_h)?, &mut rng)?;

        let mut hub_base = None;
        if config.variant == Variant::SpinH {
            let (k, d_z) = (config.hubs.k, config.hubs.d_z);
            let rows = if config.hubs.per_node_hubs { n_nodes * k } else { k };
            let z = (0..rows * d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
            hub_base = Some(store.insert("hubs.base", Tensor::matrix(rows, d_z, z)?)?);
        }

        let mut layers = Vec::new();
        for l in 0..config.n_layers() {
            let pre = format!("layers.{l}");
            let update = Mlp::init(
                &mut store,
                &format!("{pre}.update"),
                MlpSpec::with_hidden(3 * d_h, hid, depth, d_h)?,
                &mut rng,
            )?;
            layers.push(match config.variant {
                Variant::Spin => Layer::Spin {
                    cross: AttentionBlock::init(&mut store, &format!("{pre}.cross"), d_h, d_h, hid, depth, d_h, &mut rng)?,
                    self_att: AttentionBlock::init(&mut store, &format!("{pre}.self"), d_h, d_h, hid, depth, d_h, &mut rng)?,
                    update,
                },
                Variant::SpinH => {
                    let d_z = config.hubs.d_z;
                    Layer::Hub {
                        hub_msg: AttentionBlock::init(&mut store, &format!("{pre}.hub_msg"), d_h, d_z, hid, depth, d_z, &mut rng)?,
                        hub_update: Mlp::init(
                            &mut store,
                            &format!("{pre}.hub_update"),
                            MlpSpec::with_hidden(2 * d_z, hid, depth, d_z)?,
                            &mut rng,
                        )?,
                        node_self: AttentionBlock::init(&mut store, &format!("{pre}.hub_self"), d_z, d_h, hid, depth, d_h, &mut rng)?,
                        node_cross: AttentionBlock::init(&mut store, &format!("{pre}.hub_cross"), d_z, d_h, hid, depth, d_h, &mut rng)?,
                        update,
                    }
                }
            });
        }
        let n_readouts = if config.shared_readout { 1 } else { config.n_layers() };
        let mut readouts = Vec::new();
        for r in 0..n_readouts {
            let name = if config.shared_readout { "readout".to_string() } else { format!("readout.{r}") };
            readouts.push(Mlp::init(&mut store, &name, MlpSpec::with_hidden(d_h, hid, depth, n_features)?, &mut rng)?);
        }
        Ok(Self {
            config,
            n_nodes,
            n_features,
            store,
            encoding,
            init_observed,
            init_target,
            layers,
            readouts,
            hub_base,
        })
    }

    /// Builds the architecture from `config` and loads weights from a
    /// checkpoint file.
    pub fn load(config: ModelConfig, n_nodes: usize, n_features: usize, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, n_nodes, n_features, 0)?;
        model.store.load(path)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn init_mlps(&self) -> (&Mlp, &Mlp) {
        (&self.init_observed, &self.init_target)
    }

    pub fn readouts(&self) -> &[Mlp] {
        &self.readouts
    }

    pub fn hub_base(&self) -> Option<ParamId> {
        self.hub_base
    }

    /// Values at the window's observed positions, `n_obs × d`, time-major.
    pub fn observed_input(window: &SpatioTemporalWindow) -> Result<Tensor> {
        let d = window.n_features;
        let obs = window.observed_positions();
        let mut data = Vec::with_capacity(obs.len() * d);
        for &p in &obs {
            data.extend_from_slice(&window.values[p * d..(p + 1) * d]);
        }
        Tensor::matrix(obs.len(), d, data)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<ForwardOutput> {
        let x = tape.constant(Self::observed_input(window)?)?;
        self.forward_with_observed(tape, p, window, graph, x)
    }

    /// Forward pass with the observed values supplied as a tape value
    /// (`n_obs × d`, in [`SpatioTemporalWindow::observed_positions`] order).
    /// Nothing at a hidden position of `window.values` is read.
    pub fn forward_with_observed(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        window: &SpatioTemporalWindow,
        graph: &SensorGraph,
        x_obs: Value,
    ) -> Result<ForwardOutput> {
        self.check_window(window, graph)?;
        let (w, n) = (window.len, window.n_nodes);
        let wn = w * n;

        let q = self.encoding.encode(tape, p, &window.steps, &window.nodes)?;
        let obs = window.observed_positions();
        let tgt = window.target_positions();
        let mut h: Option<Value> = None;
        for (rows, branch, x) in [(obs, &self.init_observed, Some(x_obs)), (tgt, &self.init_target, None)] {
            if rows.is_empty() {
                continue;
            }
            let rows = Rc::new(rows);
            let qr = tape.gather_rows(q, Rc::clone(&rows))?;
            let hr = match x {
                Some(x) => branch.apply(tape, p, &[x, qr])?,
                None => branch.apply(tape, p, &[qr])?,
            };
            let part = tape.scatter_rows(hr, rows, wn)?;
            h = Some(match h {
                None => part,
                Some(prev) => tape.add(prev, part)?,
            });
        }
        let mut h = h.expect("window has at least one position");

        let mut layouts = Layouts {
            masked: None,
            unmasked: None,
        };
        let mut z = match self.hub_base {
            Some(base) => Some(self.initial_hubs(tape, p, base, &window.nodes)?),
            None => None,
        };
        let fused = self.config.fused_attention;
        let mut out = ForwardOutput {
            layers: Vec::new(),
            states: vec![h],
            sites: Vec::new(),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let masked = l < self.config.eta;
            let (a, b, c) = self.layouts(&mut layouts, masked, window, graph)?;
            let site = |kind, layout: &Rc<AttentionLayout>, attended| AttentionSite {
                layer: l,
                kind,
                masked,
                layout: Rc::clone(layout),
                attended,
            };
            h = match layer {
                Layer::Spin { cross, self_att, update } => {
                    let e = cross.attend(tape, p, h, h, &a, fused)?;
                    let s = self_att.attend(tape, p, h, h, &b, fused)?;
                    let next = update.apply(tape, p, &[h, s.context, e.context])?;
                    out.sites.push(site(SiteKind::CrossAttention, &a, e));
                    out.sites.push(site(SiteKind::SelfAttention, &b, s));
                    next
                }
                Layer::Hub {
                    hub_msg,
                    hub_update,
                    node_self,
                    node_cross,
                    update,
                } => {
                    let zl = z.expect("hub model carries hubs");
                    let hm = hub_msg.attend(tape, p, h, zl, &a, fused)?;
                    let z_new = hub_update.apply(tape, p, &[zl, hm.context])?;
                    let s = node_self.attend(tape, p, z_new, h, &b, fused)?;
                    let e = node_cross.attend(tape, p, z_new, h, &c, fused)?;
                    let next = update.apply(tape, p, &[h, s.context, e.context])?;
                    out.sites.push(site(SiteKind::HubUpdate, &a, hm));
                    out.sites.push(site(SiteKind::HubSelf, &b, s));
                    out.sites.push(site(SiteKind::HubCross, &c, e));
                    z = Some(z_new);
                    next
                }
            };
            let readout = &self.readouts[if self.config.shared_readout { 0 } else { l }];
            out.layers.push(readout.apply(tape, p, &[h])?);
            out.states.push(h);
        }
        Ok(out)
    }

    /// Final-layer imputation for every position of `window`, `W·N·d`.
    pub fn predict(&self, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let out = self.forward(&mut tape, &p, window, graph)?;
        Ok(tape.value(out.imputation())?.data().to_vec())
    }

    fn check_window(&self, window: &SpatioTemporalWindow, graph: &SensorGraph) -> Result<()> {
        if window.n_nodes != graph.n_nodes() || window.nodes.len() != window.n_nodes {
            return Err(Error::shape(
                "spin_forward",
                format!("window has {} nodes, graph has {}", window.n_nodes, graph.n_nodes()),
            ));
        }
        if window.n_features != self.n_features {
            return Err(Error::shape(
                "spin_forward",
                format!("window has {} features, model expects {}", window.n_features, self.n_features),
            ));
        }
        if window.len == 0 || window.n_nodes == 0 {
            return Err(Error::shape("spin_forward", "empty window"));
        }
        if window.steps.len() != window.len || window.mask.len() != window.n_positions() {
            return Err(Error::shape("spin_forward", "window steps or mask do not match its length"));
        }
        if let Some(&bad) = window.nodes.iter().find(|&&v| v >= self.n_nodes) {
            return Err(Error::OutOfRange {
                what: "node",
                index: bad,
                len: self.n_nodes,
            });
        }
        Ok(())
    }

    fn initial_hubs(&self, tape: &mut Tape, p: &BoundParams, base: ParamId, nodes: &[usize]) -> Result<Value> {
        let k = self.config.hubs.k;
        let rows: Vec<usize> = if self.config.hubs.per_node_hubs {
            nodes.iter().flat_map(|&g| (0..k).map(move |h| g * k + h)).collect()
        } else {
            nodes.iter().flat_map(|_| 0..k).collect()
        };
        tape.gather_rows(p[base], Rc::new(rows))
    }

    fn layouts(
        &self,
        cache: &mut Layouts,
        masked: bool,
        window: &SpatioTemporalWindow,
        graph: &SensorGraph,
    ) -> Result<(Rc<AttentionLayout>, Rc<AttentionLayout>, Rc<AttentionLayout>)> {
        let slot = if masked { &mut cache.masked } else { &mut cache.unmasked };
        if let Some(l) = slot {
            return Ok(l.clone());
        }
        let (w, n) = (window.len, window.n_nodes);
        let lists = layout::node_key_lists(&window.mask, w, n, masked);
        let built = match self.config.variant {
            Variant::Spin => {
                let cross = Rc::new(layout::cross_layout(w, graph, &lists)?);
                let self_l = Rc::new(layout::self_layout(w, n, &lists)?);
                (cross, self_l, Rc::new(AttentionLayout::new(0, 0, 0)))
            }
            Variant::SpinH => {
                let k = self.config.hubs.k;
                (
                    Rc::new(layout::hub_update_layout(w, n, k, &lists)?),
                    Rc::new(layout::hub_self_layout(w, n, k)?),
                    Rc::new(layout::hub_cross_layout(w, graph, k)?),
                )
            }
        };
        *slot = Some(built.clone());
        Ok(built)
    }
}
