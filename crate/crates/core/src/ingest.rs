//! Item catalogs, the co-buy graph and behavior-pair sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::ids::short_id;
use crate::text::normalize_ws;
use crate::{Error, Result};

/// Default degree cut-off for sampling; endpoints need strictly more edges.
pub const DEFAULT_MIN_DEGREE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    /// Top-level category. Records listing several take the first one.
    #[serde(deserialize_with = "first_category")]
    pub category: String,
    #[serde(default)]
    pub subcategory_path: Vec<String>,
    #[serde(default)]
    pub image_urls: Vec<String>,
    #[serde(default)]
    pub url: String,
}

fn first_category<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => Ok(s),
        OneOrMany::Many(v) => v
            .into_iter()
            .next()
            .ok_or_else(|| serde::de::Error::custom("empty category list")),
    }
}

/// Items keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemCatalog {
    items: BTreeMap<String, Item>,
    /// Lines skipped while loading (malformed JSON or invalid records).
    pub dropped: usize,
}

impl ItemCatalog {
    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Self {
        let mut cat = ItemCatalog::default();
        for item in items {
            cat.insert(item);
        }
        cat
    }

    /// Inserts or replaces an item. Returns false (and keeps the catalog
    /// unchanged) when the title is blank.
    pub fn insert(&mut self, item: Item) -> bool {
        if item.title.trim().is_empty() || item.id.is_empty() {
            return false;
        }
        self.items.insert(item.id.clone(), item);
        true
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    /// Keeps only items accepted by `pred`.
    pub fn retain(&mut self, mut pred: impl FnMut(&Item) -> bool) {
        self.items.retain(|_, item| pred(item));
    }
}

/// Loads `items.jsonl`. Duplicate ids resolve to the last record.
pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let loaded = crate::jsonl::read_lenient::<Item>(path)?;
    let mut catalog = ItemCatalog {
        dropped: loaded.dropped,
        ..Default::default()
    };
    for item in loaded.records {
        if !catalog.insert(item) {
            log::warn!("{}: skipping item with empty id or title", path.display());
            catalog.dropped += 1;
        }
    }
    if catalog.dropped > 0 {
        log::warn!("{}: dropped {} malformed lines", path.display(), catalog.dropped);
    }
    Ok(catalog)
}

/// Reads `cobuy.tsv`: two tab-separated ids per line.
pub fn read_cobuy_records(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(a), Some(b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                out.push((a.trim().to_string(), b.trim().to_string()))
            }
            _ => log::warn!("{}:{}: expected two ids", path.display(), lineno + 1),
        }
    }
    Ok(out)
}

/// Undirected simple graph over item ids. Edges are stored with the smaller
/// id first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoBuyGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
    /// Records dropped for referencing unknown ids.
    pub skipped: usize,
}

impl CoBuyGraph {
    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (a, b) in &self.edges {
            *deg.get_mut(a.as_str()).expect("edge endpoint is a node") += 1;
            *deg.get_mut(b.as_str()).expect("edge endpoint is a node") += 1;
        }
        deg
    }

    pub fn edge_list(&self) -> Vec<(String, String)> {
        self.edges.iter().cloned().collect()
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Builds the co-buy graph. Self-loops and duplicate edges collapse; records
/// naming ids outside `known` (when given) are skipped.
pub fn build_cobuy_graph(
    records: &[(String, String)],
    known: Option<&ItemCatalog>,
) -> CoBuyGraph {
    let mut g = CoBuyGraph::default();
    for (a, b) in records {
        if let Some(cat) = known {
            if !cat.contains(a) || !cat.contains(b) {
                log::warn!("co-buy record ({a}, {b}) references an unknown item");
                g.skipped += 1;
                continue;
            }
        }
        if a == b {
            continue;
        }
        g.nodes.insert(a.clone());
        g.nodes.insert(b.clone());
        g.edges.insert(ordered(a, b));
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoBuyPair {
    pub pair_id: String,
    pub item1: Item,
    pub item2: Item,
}

impl CoBuyPair {
    /// Builds a pair with ids sorted so the pair id does not depend on order.
    pub fn new(a: Item, b: Item) -> Self {
        let (item1, item2) = if a.id <= b.id { (a, b) } else { (b, a) };
        CoBuyPair {
            pair_id: pair_id(&item1.id, &item2.id),
            item1,
            item2,
        }
    }
}

/// Deterministic id of an unordered item pair.
pub fn pair_id(a: &str, b: &str) -> String {
    let (x, y) = ordered(a, b);
    short_id("p", &[&x, &y])
}

/// Row of `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub item1_id: String,
    pub item2_id: String,
}

impl From<&CoBuyPair> for PairRecord {
    fn from(p: &CoBuyPair) -> Self {
        PairRecord {
            pair_id: p.pair_id.clone(),
            item1_id: p.item1.id.clone(),
            item2_id: p.item2.id.clone(),
        }
    }
}

/// Rehydrates pair records against a catalog; records with unknown items are skipped.
pub fn resolve_pairs(records: &[PairRecord], catalog: &ItemCatalog) -> Vec<CoBuyPair> {
    records
        .iter()
        .filter_map(|r| match (catalog.get(&r.item1_id), catalog.get(&r.item2_id)) {
            (Some(a), Some(b)) => Some(CoBuyPair::new(a.clone(), b.clone())),
            _ => {
                log::warn!("pair {} references an unknown item", r.pair_id);
                None
            }
        })
        .collect()
}

/// Samples up to `n` edges uniformly without replacement among edges whose
/// endpoints both have degree `> min_degree` and a top-level category in
/// `categories`. Endpoints missing from the catalog are ineligible. The result
/// is sorted by pair id.
pub fn sample_pairs(
    graph: &CoBuyGraph,
    catalog: &ItemCatalog,
    categories: &BTreeSet<String>,
    n: usize,
    min_degree: usize,
    seed: u64,
) -> Vec<CoBuyPair> {
    let degrees = graph.degrees();
    let eligible_node = |id: &str| -> Option<&Item> {
        if degrees.get(id).copied().unwrap_or(0) <= min_degree {
            return None;
        }
        catalog.get(id).filter(|it| categories.contains(&it.category))
    };
    let eligible: Vec<(&Item, &Item)> = graph
        .edges
        .iter()
        .filter_map(|(a, b)| Some((eligible_node(a)?, eligible_node(b)?)))
        .collect();

    let take = n.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<CoBuyPair> = index::sample(&mut rng, eligible.len(), take)
        .into_iter()
        .map(|i| CoBuyPair::new(eligible[i].0.clone(), eligible[i].1.clone()))
        .collect();
    picked.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    picked
}

/// Rejects keyword-stuffed titles: a token repeated three or more times in a
/// row, more than half the tokens identical, or more than 40 tokens.
pub fn title_quality_filter(item: &Item) -> bool {
    let title = normalize_ws(&item.title);
    let tokens: Vec<String> = title.split(' ').map(|t| t.to_lowercase()).collect();
    if title.is_empty() {
        return false;
    }
    if tokens.len() > 40 {
        return false;
    }
    let mut run = 1;
    for w in tokens.windows(2) {
        if w[0] == w[1] {
            run += 1;
            if run >= 3 {
                return false;
            }
        } else {
            run = 1;
        }
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    // "more than half identical" only means something with at least two tokens
    !(tokens.len() > 1 && max * 2 > tokens.len())
}

/// Distinct items referenced by a set of pairs.
pub fn unique_items(pairs: &[CoBuyPair]) -> usize {
    pairs
        .iter()
        .flat_map(|p| [p.item1.id.as_str(), p.item2.id.as_str()])
        .collect::<HashSet<_>>()
        .len()
}
