//! Synthetic gallery: items are attribute descriptors with a derived unit
//! feature vector, stored as JSONL behind a `{"schema", "seed"}` header.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Attributes, CATEGORY};

/// Width of the feature block owned by each dimension.
pub const BLOCK_DIM: usize = 8;

/// Ordered list of attribute dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema(Vec<String>);

impl Schema {
    pub fn new<I, S>(dims: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let dims: Vec<String> = dims.into_iter().map(Into::into).collect();
        if !dims.iter().any(|d| d == CATEGORY) {
            return Err(Error::Schema(format!("schema lacks `{CATEGORY}`")));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].contains(d) {
                return Err(Error::Schema(format!("duplicate dimension `{d}`")));
            }
        }
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, dim: &str) -> Option<usize> {
        self.0.iter().position(|d| d == dim)
    }

    pub fn contains(&self, dim: &str) -> bool {
        self.index_of(dim).is_some()
    }

    pub fn feature_len(&self) -> usize {
        self.0.len() * BLOCK_DIM
    }
}

/// Seeded block for one `(dimension, value)` pair, unit-normalized.
///
/// Entry `j` is the first eight bytes (big-endian) of
/// `SHA-256("{seed}:{dim}={value}:{j}")` mapped linearly onto `[-1, 1)`.
fn value_block(seed: u64, dim: &str, value: &str) -> [f64; BLOCK_DIM] {
    let mut block = [0.0; BLOCK_DIM];
    for (j, slot) in block.iter_mut().enumerate() {
        let digest = Sha256::digest(format!("{seed}:{dim}={value}:{j}").as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let unit = u64::from_be_bytes(word) as f64 / 18_446_744_073_709_551_616.0;
        *slot = unit * 2.0 - 1.0;
    }
    let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut block {
        *x /= norm;
    }
    block
}

/// Deterministic unit feature vector for an attribute map.
pub fn item_feature(attributes: &Attributes, schema: &Schema, seed: u64) -> Result<Vec<f64>> {
    if attributes.is_empty() {
        return Err(Error::Invalid(
            "cannot derive a feature from an empty attribute map".into(),
        ));
    }
    let mut out = vec![0.0; schema.feature_len()];
    for (dim, value) in attributes {
        let idx = schema
            .index_of(dim)
            .ok_or_else(|| Error::Schema(format!("unknown dimension `{dim}`")))?;
        let block = value_block(seed, dim, value);
        out[idx * BLOCK_DIM..(idx + 1) * BLOCK_DIM].copy_from_slice(&block);
    }
    let norm = (attributes.len() as f64).sqrt();
    for x in &mut out {
        *x /= norm;
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub attributes: Attributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
    #[serde(skip)]
    pub feature: Vec<f64>,
}

impl Item {
    /// Human-readable descriptor: `dim=value` pairs in schema order.
    pub fn caption(&self, schema: &Schema) -> String {
        schema
            .dims()
            .iter()
            .filter_map(|d| self.attributes.get(d).map(|v| format!("{d}={v}")))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Schema,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct Gallery {
    schema: Schema,
    seed: u64,
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl Gallery {
    /// Validates the items and derives their features.
    pub fn new(schema: Schema, seed: u64, items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut built = Vec::with_capacity(items.len());
        for mut item in items {
            if !item.attributes.contains_key(CATEGORY) {
                return Err(Error::Schema(format!(
                    "item `{}` lacks the `{CATEGORY}` attribute",
                    item.id
                )));
            }
            item.feature = item_feature(&item.attributes, &schema, seed)?;
            if index.insert(item.id.clone(), built.len()).is_some() {
                return Err(Error::Invalid(format!("duplicate item id `{}`", item.id)));
            }
            built.push(item);
        }
        Ok(Self {
            schema,
            seed,
            items: built,
            index,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn require(&self, id: &str) -> Result<&Item> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    /// Feature of an arbitrary attribute map, ignoring dimensions outside the
    /// schema. `None` when nothing usable remains.
    pub fn feature_of(&self, attributes: &Attributes) -> Option<Vec<f64>> {
        let known: Attributes = attributes
            .iter()
            .filter(|(d, _)| self.schema.contains(d))
            .map(|(d, v)| (d.clone(), v.clone()))
            .collect();
        item_feature(&known, &self.schema, self.seed).ok()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            schema: self.schema.clone(),
            seed: self.seed,
        })
        .expect("header serializes");
        out.push('\n');
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 (hex) of the canonical JSONL serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header: Option<Header> = None;
        let mut items = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                header = Some(
                    serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e))?,
                );
                continue;
            }
            items.push(serde_json::from_str::<Item>(&line).map_err(|e| Error::parse(path, n + 1, e))?);
        }
        let header = header.ok_or_else(|| Error::parse(path, 1, "missing gallery header"))?;
        let schema = Schema::new(header.schema.0)?;
        Self::new(schema, header.seed, items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(pairs: &[(&str, &str)]) -> Attributes {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn schema3() -> Schema {
        Schema::new(["category", "color", "scene"]).unwrap()
    }

    #[test]
    fn empty_attributes_rejected() {
        assert!(item_feature(&Attributes::new(), &schema3(), 7).is_err());
    }

    #[test]
    fn unknown_dimension_is_schema_error() {
        let err = item_feature(&attrs(&[("mood", "calm")]), &schema3(), 7).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn features_are_deterministic_and_unit() {
        let a = attrs(&[("category", "dog"), ("color", "red"), ("scene", "beach")]);
        let f1 = item_feature(&a, &schema3(), 7).unwrap();
        let f2 = item_feature(&a, &schema3(), 7).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), 3 * BLOCK_DIM);
        assert!((dot(&f1, &f1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_attribute_difference_lowers_similarity() {
        let a = attrs(&[("category", "dog"), ("color", "red"), ("scene", "beach")]);
        let b = attrs(&[("category", "dog"), ("color", "blue"), ("scene", "beach")]);
        let fa = item_feature(&a, &schema3(), 7).unwrap();
        let fb = item_feature(&b, &schema3(), 7).unwrap();
        let cos = dot(&fa, &fb);
        // two shared unit blocks out of three, plus the cross term of the
        // differing blocks
        let cross = dot(
            &value_block(7, "color", "red"),
            &value_block(7, "color", "blue"),
        );
        assert!((cos - (2.0 + cross) / 3.0).abs() < 1e-12);
        assert!(cos < 1.0);
    }

    #[test]
    fn seed_changes_the_geometry() {
        let a = attrs(&[("category", "dog")]);
        let f1 = item_feature(&a, &schema3(), 1).unwrap();
        let f2 = item_feature(&a, &schema3(), 2).unwrap();
        assert_ne!(f1, f2);
    }

    #[test]
    fn gallery_rejects_duplicates_and_missing_category() {
        let item = |id: &str, a: Attributes| Item {
            id: id.into(),
            attributes: a,
            thumbnail: None,
            feature: Vec::new(),
        };
        let dup = vec![
            item("a", attrs(&[("category", "dog")])),
            item("a", attrs(&[("category", "cat")])),
        ];
        assert!(Gallery::new(schema3(), 1, dup).is_err());
        let nocat = vec![item("a", attrs(&[("color", "red")]))];
        assert!(Gallery::new(schema3(), 1, nocat).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let items = vec![
            Item {
                id: "v1".into(),
                attributes: attrs(&[("category", "dog"), ("color", "red")]),
                thumbnail: Some("http://x/1.png".into()),
                feature: Vec::new(),
            },
            Item {
                id: "v2".into(),
                attributes: attrs(&[("category", "cat")]),
                thumbnail: None,
                feature: Vec::new(),
            },
        ];
        let g = Gallery::new(schema3(), 5, items).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        g.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"schema":["category","color","scene"],"seed":5}"#));
        let back = Gallery::load(&path).unwrap();
        assert_eq!(back.items(), g.items());
        assert_eq!(back.content_hash(), g.content_hash());
        assert_eq!(back.get("v1").unwrap().feature, g.get("v1").unwrap().feature);
    }
}
