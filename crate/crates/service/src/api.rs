//! Request and response bodies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub prompt: String,
    pub store_id: String,
}

/// Partial weight update keyed by sequence position (content tokens are
/// `1..=N`). Positions not named keep their current weight.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateWeights {
    #[serde(default)]
    pub weights: BTreeMap<usize, f64>,
    /// Revision the client last saw. Older than the session's → 409.
    /// Omit for last-write-wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    /// Sequence position, SOS being 0.
    pub index: usize,
    pub text: String,
    /// Tokens of the same word share this id.
    pub word: usize,
    /// Byte range of the prompt the token covers.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub rank: usize,
    /// Store row.
    pub index: usize,
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub category: usize,
    pub label: String,
    pub size: usize,
    pub auc: f64,
    /// `(n, fraction of the category in the top n)`, subsampled.
    pub points: Vec<(usize, f64)>,
}

/// Ranking state after a revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub revision: u64,
    /// Content-token weights, position 1 first.
    pub weights: Vec<f64>,
    /// Items ranked in total; `ranking` holds the top-k.
    pub total: usize,
    pub ranking: Vec<RankedItem>,
    pub curves: Vec<Curve>,
    /// SHA-256 over the full ranking's item ids.
    pub digest: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub store_id: String,
    pub prompt: String,
    pub tokens: Vec<Token>,
    pub default_weights: Vec<f64>,
    #[serde(flatten)]
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub store_id: String,
    pub prompt: String,
    pub revision: u64,
    pub tokens: Vec<Token>,
    pub weights: Vec<f64>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub label: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreInfo {
    pub id: String,
    pub items: usize,
    pub dim: usize,
    pub attributes: Vec<String>,
    /// Attributes the AUC snapshot is partitioned by.
    pub partition: Vec<String>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreList {
    pub stores: Vec<StoreInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
}
