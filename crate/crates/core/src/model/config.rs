use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    /// Pairwise dot products of the feature vectors (strict lower triangle).
    #[default]
    Dot,
    /// Plain concatenation of the feature vectors.
    Concat,
}

/// Model and minibatch dimensions. Keys mirror the usual DLRM table names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlrmConfig {
    /// Single-socket minibatch.
    #[serde(rename = "N")]
    pub n: usize,
    /// Global minibatch for strong scaling.
    #[serde(rename = "GN")]
    pub gn: usize,
    /// Per-rank minibatch for weak scaling.
    #[serde(rename = "LN")]
    pub ln: usize,
    /// Average lookups per table per sample.
    #[serde(rename = "P")]
    pub lookups: usize,
    /// Number of embedding tables.
    #[serde(rename = "S")]
    pub tables: usize,
    /// Embedding dimension.
    #[serde(rename = "E")]
    pub dim: usize,
    /// Rows per table.
    #[serde(rename = "M")]
    pub rows: usize,
    /// Bottom MLP widths, starting with the dense input width.
    pub bottom_mlp: Vec<usize>,
    /// Top MLP output widths; its input width follows from the interaction.
    pub top_mlp: Vec<usize>,
    #[serde(default)]
    pub interaction: InteractionKind,
    /// Target blocking factor for the MLP kernels.
    #[serde(default = "default_block")]
    pub block: usize,
}

fn default_block() -> usize {
    crate::mlp::DEFAULT_BLOCK
}

impl DlrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tables == 0 {
            return Err(Error::config("at least one embedding table is required"));
        }
        if self.dim == 0 || self.rows == 0 {
            return Err(Error::config("embedding dimension and rows must be positive"));
        }
        if self.bottom_mlp.len() < 2 {
            return Err(Error::config("bottom MLP needs an input width and at least one layer"));
        }
        if self.top_mlp.is_empty() {
            return Err(Error::config("top MLP needs at least one layer"));
        }
        if self.bottom_mlp.iter().chain(&self.top_mlp).any(|&w| w == 0) {
            return Err(Error::config("MLP widths must be positive"));
        }
        if *self.bottom_mlp.last().unwrap() != self.dim {
            return Err(Error::config(format!(
                "bottom MLP output width {} must equal the embedding dimension {}",
                self.bottom_mlp.last().unwrap(),
                self.dim
            )));
        }
        if *self.top_mlp.last().unwrap() != 1 {
            return Err(Error::config("top MLP must end in a single output"));
        }
        if self.block == 0 {
            return Err(Error::config("block target must be positive"));
        }
        Ok(())
    }

    pub fn dense_width(&self) -> usize {
        self.bottom_mlp[0]
    }

    pub fn interaction_width(&self) -> usize {
        interaction_width(self.interaction, self.tables, self.dim)
    }

    /// Full top MLP widths including its input.
    pub fn top_widths(&self) -> Vec<usize> {
        std::iter::once(self.interaction_width())
            .chain(self.top_mlp.iter().copied())
            .collect()
    }

    /// `(fan_in, fan_out)` of every FC layer, bottom MLP first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let top = self.top_widths();
        self.bottom_mlp
            .windows(2)
            .chain(top.windows(2))
            .map(|w| (w[0], w[1]))
            .collect()
    }

    pub fn num_bottom_layers(&self) -> usize {
        self.bottom_mlp.len() - 1
    }

    /// Bytes needed to hold every table in FP32.
    pub fn table_bytes(&self) -> u128 {
        self.tables as u128 * self.rows as u128 * self.dim as u128 * 4
    }
}

pub fn interaction_width(kind: InteractionKind, tables: usize, dim: usize) -> usize {
    match kind {
        InteractionKind::Dot => dim + tables * (tables + 1) / 2,
        InteractionKind::Concat => dim * (tables + 1),
    }
}
