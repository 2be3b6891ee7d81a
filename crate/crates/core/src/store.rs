//! Precomputed image embeddings with binary attribute labels, and the
//! attribute-combination categories used for preference retrieval.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{write_atomic, write_container, Container};

/// Container tensor holding the `items × dim` embedding matrix.
pub const EMBEDDINGS_TENSOR: &str = "embeddings";

/// One line of the metadata JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub attributes: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

/// Unit-normalized image embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    matrix: Array2<f32>,
    thumbnails: Vec<Option<String>>,
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn thumbnail(&self, index: usize) -> Option<&str> {
        self.thumbnails[index].as_deref()
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f32> {
        self.matrix.row(index)
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }
}

/// Binary attributes per item, columns in `names` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    names: Vec<String>,
    values: Vec<Vec<bool>>,
}

impl AttributeTable {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<Vec<bool>> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
        Ok(self.values.iter().map(|row| row[j]).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How far the ingested rows were from unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub items: usize,
    pub dim: usize,
    /// Rows whose norm differed from 1 by more than 1e-5.
    pub renormalized: usize,
    pub max_norm_deviation: f64,
}

/// Build a store from an embedding matrix and per-row metadata.
pub fn ingest_parts(
    embeddings: Array2<f32>,
    records: Vec<ItemRecord>,
    expected_dim: Option<usize>,
) -> Result<(EmbeddingStore, AttributeTable, IngestReport)> {
    if embeddings.nrows() != records.len() {
        return Err(Error::CountMismatch {
            embeddings: embeddings.nrows(),
            metadata: records.len(),
        });
    }
    if let Some(d) = expected_dim {
        if embeddings.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: embeddings.ncols(),
            });
        }
    }
    let names: Vec<String> = records
        .first()
        .map(|r| r.attributes.keys().cloned().collect())
        .unwrap_or_default();
    let mut seen = HashSet::with_capacity(records.len());
    let mut values = Vec::with_capacity(records.len());
    for (line, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
        if r.attributes.len() != names.len() || !names.iter().all(|n| r.attributes.contains_key(n)) {
            return Err(Error::Metadata {
                line: line + 1,
                message: format!("attributes must be exactly {names:?}"),
            });
        }
        values.push(names.iter().map(|n| r.attributes[n]).collect());
    }
    let mut matrix = embeddings;
    let mut renormalized = 0;
    let mut max_dev = 0.0f64;
    for (i, mut row) in matrix.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFinite(format!("embedding row {i} (id {:?})", records[i].id)));
        }
        let dev = (norm - 1.0).abs();
        max_dev = max_dev.max(dev);
        if dev > 1e-5 {
            renormalized += 1;
        }
        row.mapv_inplace(|x| (x as f64 / norm) as f32);
    }
    let report = IngestReport {
        items: records.len(),
        dim: matrix.ncols(),
        renormalized,
        max_norm_deviation: max_dev,
    };
    let thumbnails = records.iter().map(|r| r.thumbnail.clone()).collect();
    let ids = records.into_iter().map(|r| r.id).collect();
    Ok((
        EmbeddingStore {
            ids,
            matrix,
            thumbnails,
        },
        AttributeTable { names, values },
        report,
    ))
}

pub fn parse_metadata(jsonl: &str) -> Result<Vec<ItemRecord>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Metadata {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Read the embedding container and metadata JSONL from disk.
pub fn ingest(
    embeddings_path: &Path,
    metadata_path: &Path,
    expected_dim: Option<usize>,
) -> Result<(EmbeddingStore, AttributeTable, IngestReport)> {
    let container = Container::open(embeddings_path)?;
    let (shape, values) = container.tensor_f32(EMBEDDINGS_TENSOR)?;
    let [rows, cols] = shape[..] else {
        return Err(Error::ShapeMismatch(format!(
            "{EMBEDDINGS_TENSOR}: expected a matrix, got shape {shape:?}"
        )));
    };
    let matrix = Array2::from_shape_vec((rows, cols), values).expect("shape from header");
    let text = std::fs::read_to_string(metadata_path).map_err(|e| Error::io(metadata_path, e))?;
    ingest_parts(matrix, parse_metadata(&text)?, expected_dim)
}

/// Write a store's inputs: embeddings container plus metadata JSONL.
pub fn write_store_files(
    embeddings_path: &Path,
    metadata_path: &Path,
    embeddings: &Array2<f32>,
    records: &[ItemRecord],
) -> Result<()> {
    write_container(
        embeddings_path,
        &[(
            EMBEDDINGS_TENSOR.to_string(),
            embeddings.shape().to_vec(),
            embeddings.iter().copied().collect(),
        )],
        &BTreeMap::new(),
    )?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json("metadata", e))?);
        text.push('\n');
    }
    write_atomic(metadata_path, text.as_bytes())
}

/// Items grouped by the presence pattern of `k` attributes.
///
/// Category `c` has attribute `j` present when bit `k-1-j` of `c` is set,
/// so the first attribute is the most significant bit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryPartition {
    attributes: Vec<String>,
    items: Vec<usize>,
    categories: Vec<usize>,
    labels: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<usize, usize>,
}

impl CategoryPartition {
    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    /// Included store indices, ascending.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    /// Category of each entry of [`items`](Self::items).
    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    /// `"+a,-b"`-style labels, one per category.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_categories(&self) -> usize {
        self.labels.len()
    }

    pub fn category_of(&self, item: usize) -> Option<usize> {
        self.lookup.get(&item).map(|&k| self.categories[k])
    }

    /// Items carrying `attribute`.
    pub fn with_attribute(&self, attribute: &str) -> Result<Vec<usize>> {
        let j = self
            .attributes
            .iter()
            .position(|a| a == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?;
        let bit = 1 << (self.attributes.len() - 1 - j);
        Ok(self
            .items
            .iter()
            .zip(&self.categories)
            .filter(|(_, c)| *c & bit != 0)
            .map(|(i, _)| *i)
            .collect())
    }

    /// Category index for a presence pattern in attribute order.
    pub fn category_index(&self, present: &[bool]) -> usize {
        present.iter().fold(0, |acc, &p| (acc << 1) | p as usize)
    }
}

pub fn category_label(attributes: &[String], category: usize) -> String {
    let k = attributes.len();
    attributes
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let on = category & (1 << (k - 1 - j)) != 0;
            format!("{}{a}", if on { '+' } else { '-' })
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Partition items by `attributes`, optionally sampling up to
/// `sample_per_category` items from each category with a seeded shuffle.
///
/// With sampling, an empty category is an error unless `allow_empty`.
pub fn partition(
    table: &AttributeTable,
    attributes: &[impl AsRef<str>],
    sample_per_category: Option<usize>,
    seed: u64,
    allow_empty: bool,
) -> Result<CategoryPartition> {
    let attributes: Vec<String> = attributes.iter().map(|a| a.as_ref().to_string()).collect();
    if attributes.is_empty() || attributes.len() > 16 {
        return Err(Error::InvalidConfig(format!(
            "need 1 to 16 attributes, got {}",
            attributes.len()
        )));
    }
    let mut unique = HashSet::new();
    if let Some(dup) = attributes.iter().find(|a| !unique.insert(*a)) {
        return Err(Error::InvalidConfig(format!("attribute {dup:?} given twice")));
    }
    let columns = attributes
        .iter()
        .map(|a| table.column(a))
        .collect::<Result<Vec<_>>>()?;
    let k = attributes.len();
    let n_cat = 1 << k;
    let labels: Vec<String> = (0..n_cat).map(|c| category_label(&attributes, c)).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cat];
    for item in 0..table.len() {
        let c = columns.iter().fold(0, |acc, col| (acc << 1) | col[item] as usize);
        members[c].push(item);
    }
    if let Some(n) = sample_per_category {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (c, m) in members.iter_mut().enumerate() {
            if m.is_empty() && !allow_empty {
                return Err(Error::EmptyCategory(labels[c].clone()));
            }
            if m.len() < n {
                log::warn!("category {} has only {} of {n} requested items", labels[c], m.len());
            }
            m.shuffle(&mut rng);
            m.truncate(n);
        }
    }
    let mut pairs: Vec<(usize, usize)> = members
        .iter()
        .enumerate()
        .flat_map(|(c, m)| m.iter().map(move |&i| (i, c)))
        .collect();
    pairs.sort_unstable();
    let lookup = pairs.iter().enumerate().map(|(k, (i, _))| (*i, k)).collect();
    Ok(CategoryPartition {
        attributes,
        items: pairs.iter().map(|p| p.0).collect(),
        categories: pairs.iter().map(|p| p.1).collect(),
        labels,
        lookup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record(id: &str, attrs: &[(&str, bool)]) -> ItemRecord {
        ItemRecord {
            id: id.into(),
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            thumbnail: None,
        }
    }

    fn four() -> (EmbeddingStore, AttributeTable, IngestReport) {
        let m = array![[1.0f32, 0.0], [0.0, 2.0], [3.0, 4.0], [0.6, 0.8]];
        let recs = vec![
            record("a", &[("x", true), ("y", false)]),
            record("b", &[("x", false), ("y", false)]),
            record("c", &[("x", true), ("y", true)]),
            record("d", &[("x", false), ("y", true)]),
        ];
        ingest_parts(m, recs, Some(2)).unwrap()
    }

    #[test]
    fn ingest_renormalizes() {
        let (store, table, report) = four();
        assert_eq!(store.len(), 4);
        assert_eq!(table.names(), ["x", "y"]);
        assert_eq!(report.renormalized, 2);
        assert!((report.max_norm_deviation - 4.0).abs() < 1e-12);
        for i in 0..4 {
            let n: f32 = store.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ingest_errors() {
        let m = array![[1.0f32, 0.0]];
        assert!(matches!(
            ingest_parts(m.clone(), vec![], None),
            Err(Error::CountMismatch { .. })
        ));
        assert!(matches!(
            ingest_parts(m.clone(), vec![record("a", &[])], Some(3)),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
        let m2 = array![[1.0f32, 0.0], [0.0, 1.0]];
        assert!(matches!(
            ingest_parts(m2.clone(), vec![record("a", &[]), record("a", &[])], None),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            ingest_parts(m2, vec![record("a", &[("x", true)]), record("b", &[])], None),
            Err(Error::Metadata { line: 2, .. })
        ));
        assert!(matches!(
            ingest_parts(array![[0.0f32, 0.0]], vec![record("z", &[])], None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn partition_labels_and_lookup() {
        let (_, table, _) = four();
        let p = partition(&table, &["x", "y"], None, 0, false).unwrap();
        assert_eq!(p.num_categories(), 4);
        assert_eq!(p.labels(), ["-x,-y", "-x,+y", "+x,-y", "+x,+y"]);
        assert_eq!(p.items(), [0, 1, 2, 3]);
        assert_eq!(p.categories(), [2, 0, 3, 1]);
        assert_eq!(p.category_of(2), Some(3));
        assert_eq!(p.with_attribute("x").unwrap(), vec![0, 2]);
        assert_eq!(p.category_index(&[true, false]), 2);
        let single = partition(&table, &["y"], None, 0, false).unwrap();
        assert_eq!(single.num_categories(), 2);
        assert!(matches!(
            partition(&table, &["nope"], None, 0, false),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn metadata_lines() {
        let recs = parse_metadata("{\"id\":\"a\",\"attributes\":{\"x\":true},\"thumbnail\":\"t.png\"}\n\n").unwrap();
        assert_eq!(recs[0].thumbnail.as_deref(), Some("t.png"));
        assert!(matches!(parse_metadata("{}"), Err(Error::Metadata { line: 1, .. })));
    }
}
