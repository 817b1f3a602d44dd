//! The SPIN layer stack and its hierarchical (hub) variant.

mod block;
pub mod layout;
mod spin;

use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};

pub use block::{weight_sets, AttentionBlock, Attended};
pub use spin::{AttentionSite, ForwardOutput, SiteKind, SpinModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "spin")]
    Spin,
    #[serde(rename = "spin-h")]
    SpinH,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Spin => "spin",
            Variant::SpinH => "spin-h",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HubConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub d_z: usize,
    /// One hub base per node instead of a single shared base.
    pub per_node_hubs: bool,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d_z: 128,
            per_node_hubs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of layers; defaults to 4 for SPIN and 5 for SPIN-H.
    #[serde(alias = "L", skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    /// Layers that attend only to observed keys.
    pub eta: usize,
    pub d_h: usize,
    pub mlp_hidden: usize,
    /// Weight layers per MLP.
    pub mlp_depth: usize,
    /// One readout applied to every layer instead of one per layer.
    pub shared_readout: bool,
    /// Use the fused attention kernel where the message MLP allows it.
    pub fused_attention: bool,
    pub hubs: HubConfig,
    pub encoding: EncodingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Spin,
            layers: None,
            eta: 3,
            d_h: 32,
            mlp_hidden: 32,
            mlp_depth: 2,
            shared_readout: true,
            fused_attention: true,
            hubs: HubConfig::default(),
            encoding: EncodingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn spin_h() -> Self {
        Self {
            variant: Variant::SpinH,
            ..Self::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.unwrap_or(match self.variant {
            Variant::Spin => 4,
            Variant::SpinH => 5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        if l == 0 {
            return Err(Error::Invalid("model needs at least one layer".into()));
        }
        if self.eta < 1 || self.eta > l {
            return Err(Error::Invalid(format!("eta must satisfy 1 <= eta <= L = {l}, got {}", self.eta)));
        }
        if self.d_h == 0 || self.mlp_hidden == 0 || self.mlp_depth == 0 {
            return Err(Error::Invalid("model widths and MLP depth must be positive".into()));
        }
        if self.variant == Variant::SpinH && (self.hubs.k == 0 || self.hubs.d_z == 0) {
            return Err(Error::Invalid("hub count and hub width must be positive".into()));
        }
        self.encoding.validate()
    }

    /// Warnings that do not prevent running.
    pub fn warnings(&self, window: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.variant == Variant::SpinH && self.hubs.k >= window {
            out.push(format!(
                "{} hubs for a window of {window} steps: hubs no longer compress the sequence",
                self.hubs.k
            ));
        }
        out
    }
}
