//! Dataset loading and indexing: user-item interactions, typed KG triplets
//! (IRI / TRT / IRT with inverse-relation augmentation), the item→concept
//! index, negative sampling, and per-sample loss weights.
//!
//! File conventions follow the published releases: `train.txt` / `test.txt`
//! hold one user per line (`user item item ...`), `kg_final.txt` holds one
//! `head relation tail` triple per line. Entity ids below the item count are
//! items; ids at or above it are tags. Tags are stored internally as 0-based
//! indexes (`tag_index = entity_id - n_items`).

mod load;
mod sample;

pub use load::{load_dataset, load_interactions, load_kg, parse_interactions, parse_kg};
pub use sample::{sample_negatives, sample_weight, triplet_type_sampler, NegEntity, NegKind, SamplerCtx, WeightCtx};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// User-item interaction history, split into train and test.
///
/// `train` and `test` hold sorted, deduplicated item ids per user. `train_order`
/// preserves file order (first occurrence) because interest-box construction
/// truncates each history to the most recent items.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    pub train_order: Vec<Vec<u32>>,
}

impl InteractionGraph {
    pub fn n_train_pairs(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn n_test_pairs(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }
}

/// Triplet classes by head/tail entity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletClass {
    Iri,
    Trt,
    Irt,
}

/// KG triplets partitioned by class, with `(tag, r, item)` rows re-oriented to
/// `(item, r + n_relations_raw, tag)`.
///
/// Field encodings: `iri` rows are `(head_item, rel, tail_item)`, `trt` rows
/// are `(head_tag, rel, tail_tag)` with tag indexes, `irt` rows are
/// `(item, rel, tag_index)`.
#[derive(Debug, Clone, Default)]
pub struct TypedTripletStore {
    pub iri: Vec<(u32, u32, u32)>,
    pub trt: Vec<(u32, u32, u32)>,
    pub irt: Vec<(u32, u32, u32)>,
    pub n_items: usize,
    pub n_tags: usize,
    pub n_relations_raw: usize,
    pub n_relations_aug: usize,
    /// True heads per (rel, tail) query, for negative filtering and weights.
    pub(crate) iri_heads: HashMap<(u32, u32), Vec<u32>>,
    pub(crate) trt_heads: HashMap<(u32, u32), Vec<u32>>,
    pub(crate) irt_heads: HashMap<(u32, u32), Vec<u32>>,
    /// True tags per (item, rel) query, for IRT tag corruption.
    pub(crate) irt_tags: HashMap<(u32, u32), Vec<u32>>,
}

impl TypedTripletStore {
    pub fn total(&self) -> usize {
        self.iri.len() + self.trt.len() + self.irt.len()
    }

    /// Number of true heads answering `(?, rel, tail)` for the given class.
    pub fn answer_count(&self, class: TripletClass, rel: u32, tail: u32) -> usize {
        let map = match class {
            TripletClass::Iri => &self.iri_heads,
            TripletClass::Trt => &self.trt_heads,
            TripletClass::Irt => &self.irt_heads,
        };
        map.get(&(rel, tail)).map_or(0, Vec::len)
    }

    pub(crate) fn build_indexes(&mut self) {
        for &(h, r, t) in &self.iri {
            self.iri_heads.entry((r, t)).or_default().push(h);
        }
        for &(h, r, t) in &self.trt {
            self.trt_heads.entry((r, t)).or_default().push(h);
        }
        for &(i, r, t) in &self.irt {
            self.irt_heads.entry((r, t)).or_default().push(i);
            self.irt_tags.entry((i, r)).or_default().push(t);
        }
        for map in [
            &mut self.iri_heads,
            &mut self.trt_heads,
            &mut self.irt_heads,
            &mut self.irt_tags,
        ] {
            for v in map.values_mut() {
                v.sort_unstable();
            }
        }
    }
}

/// Item→concept lists and the inverted concept→items index, derived from the
/// IRT triplets alone. A concept is a `(relation, tag_index)` pair.
#[derive(Debug, Clone, Default)]
pub struct ConceptIndex {
    per_item: Vec<Vec<(u32, u32)>>,
    concept_items: HashMap<(u32, u32), Vec<u32>>,
}

impl ConceptIndex {
    pub fn build(store: &TypedTripletStore) -> Self {
        let mut per_item: Vec<Vec<(u32, u32)>> = vec![Vec::new(); store.n_items];
        let mut concept_items: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for &(i, r, t) in &store.irt {
            per_item[i as usize].push((r, t));
            concept_items.entry((r, t)).or_default().push(i);
        }
        for list in &mut per_item {
            list.sort_unstable();
            list.dedup();
        }
        for v in concept_items.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self {
            per_item,
            concept_items,
        }
    }

    /// Concepts of an item, sorted by relation then tag; may be empty.
    pub fn concepts_of(&self, item: u32) -> Result<&[(u32, u32)]> {
        self.per_item
            .get(item as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Range(format!("item {item} outside 0..{}", self.per_item.len())))
    }

    /// Items covered by a concept, sorted; empty slice for unknown concepts.
    pub fn items_of(&self, concept: (u32, u32)) -> &[u32] {
        self.concept_items
            .get(&concept)
            .map_or(&[], Vec::as_slice)
    }

    pub fn n_items_with_concepts(&self) -> usize {
        self.per_item.iter().filter(|c| !c.is_empty()).count()
    }
}

/// Counts recorded by `prepare` and validated against expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_users: usize,
    pub n_items: usize,
    pub n_tags: usize,
    pub n_relations_raw: usize,
    pub n_relations_aug: usize,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    pub n_iri: usize,
    pub n_trt: usize,
    pub n_irt: usize,
}

impl DatasetManifest {
    pub fn from_parts(graph: &InteractionGraph, store: &TypedTripletStore) -> Self {
        Self {
            n_users: graph.n_users,
            n_items: graph.n_items,
            n_tags: store.n_tags,
            n_relations_raw: store.n_relations_raw,
            n_relations_aug: store.n_relations_aug,
            n_train_pairs: graph.n_train_pairs(),
            n_test_pairs: graph.n_test_pairs(),
            n_iri: store.iri.len(),
            n_trt: store.trt.len(),
            n_irt: store.irt.len(),
        }
    }

    pub fn n_interactions(&self) -> usize {
        self.n_train_pairs + self.n_test_pairs
    }

    /// Per-class share of the KG in percent, `(iri, trt, irt)`.
    pub fn triplet_percentages(&self) -> (f64, f64, f64) {
        let total = (self.n_iri + self.n_trt + self.n_irt) as f64;
        if total == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        (
            100.0 * self.n_iri as f64 / total,
            100.0 * self.n_trt as f64 / total,
            100.0 * self.n_irt as f64 / total,
        )
    }

    pub fn write_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Field-by-field differences against an expected manifest.
    pub fn diff(&self, expected: &Self) -> Vec<String> {
        let mut out = Vec::new();
        let pairs = [
            ("n_users", self.n_users, expected.n_users),
            ("n_items", self.n_items, expected.n_items),
            ("n_tags", self.n_tags, expected.n_tags),
            ("n_relations_raw", self.n_relations_raw, expected.n_relations_raw),
            ("n_relations_aug", self.n_relations_aug, expected.n_relations_aug),
            ("n_train_pairs", self.n_train_pairs, expected.n_train_pairs),
            ("n_test_pairs", self.n_test_pairs, expected.n_test_pairs),
            ("n_iri", self.n_iri, expected.n_iri),
            ("n_trt", self.n_trt, expected.n_trt),
            ("n_irt", self.n_irt, expected.n_irt),
        ];
        for (name, got, want) in pairs {
            if got != want {
                out.push(format!("{name}: got {got}, expected {want}"));
            }
        }
        out
    }
}

/// A fully loaded dataset: interactions, typed triplets, and concept index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub triplets: TypedTripletStore,
    pub concepts: ConceptIndex,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::from_parts(&self.graph, &self.triplets)
    }
}
