use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            // tanh approximation
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
                0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
            }
            Activation::Identity => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ResidualMlp,
}

/// The two weight slots of a residual MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    W1,
    W2,
}

impl SlotKind {
    pub const ALL: [SlotKind; 2] = [SlotKind::W1, SlotKind::W2];

    pub fn as_str(self) -> &'static str {
        match self {
            SlotKind::W1 => "w1",
            SlotKind::W2 => "w2",
        }
    }
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w1" => Ok(SlotKind::W1),
            "w2" => Ok(SlotKind::W2),
            other => Err(Error::ManifestMismatch(format!("unknown slot {other:?}"))),
        }
    }
}

/// A weight slot within the model, displayed as `blocks.{block}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    pub block: usize,
    pub kind: SlotKind,
}

impl SlotId {
    pub fn new(block: usize, kind: SlotKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind)
    }
}

impl FromStr for SlotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed slot id {s:?}"));
        let mut parts = s.split('.');
        if parts.next() != Some("blocks") {
            return Err(bad());
        }
        let block = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let kind = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { block, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowRankEntry {
    pub u: String,
    pub vt: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_id: usize,
    pub kind: BlockKind,
    /// Dense slots: slot name to tensor name.
    #[serde(default)]
    pub matrices: BTreeMap<SlotKind, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowrank: Option<BTreeMap<SlotKind, LowRankEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: String,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub blocks: Vec<BlockSpec>,
}

impl ModelManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {:?} (expected {MANIFEST_VERSION:?})",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
