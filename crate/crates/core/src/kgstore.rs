//! Knowledge-graph assembly, summary statistics and JSONL persistence.
//!
//! Three node kinds: items, intentions (one per distinct simplified tail) and
//! abstract intentions (a conceptualized tail). Three edge kinds:
//!
//! * `ASSERT`: item pair → intention, scored, labeled with a relation.
//! * `ISA_WEIGHT`: intention → abstract intention, weighted by P(c|e).
//! * `CONCEPT_ASSERT`: item pair → abstract intention, present whenever an
//!   `ASSERT` edge and an `ISA_WEIGHT` edge join through the same intention.
//!   Scores are the maximum over the supporting `ASSERT` edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conceptualize::AbstractIntention;
use crate::generation::Relation;
use crate::ids::short_id;
use crate::ingest::{ItemCatalog, PairRecord};
use crate::jsonl;
use crate::mining::PatternAssignment;
use crate::population::ScoredAssertion;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Item,
    Intention,
    Abstract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl KgNode {
    fn item(id: &str, catalog: Option<&ItemCatalog>) -> Self {
        let item = catalog.and_then(|c| c.get(id));
        KgNode {
            id: id.to_string(),
            kind: NodeKind::Item,
            text: None,
            title: item.map(|i| i.title.clone()),
            category: item.map(|i| i.category.clone()),
        }
    }

    fn text(id: String, kind: NodeKind, text: &str) -> Self {
        KgNode {
            id,
            kind,
            text: Some(text.to_string()),
            title: None,
            category: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    Assert,
    ConceptAssert,
    IsaWeight,
}

/// Edge record. `src` holds the two item ids of the head pair for
/// `ASSERT`/`CONCEPT_ASSERT`, or the intention id for `ISA_WEIGHT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub edge_id: String,
    pub kind: EdgeKind,
    pub src: Vec<String>,
    pub dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plausibility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typicality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl KgEdge {
    fn pair_edge(
        kind: EdgeKind,
        pair: &PairRecord,
        relation: Relation,
        dst: &str,
        plausibility: f64,
        typicality: f64,
    ) -> Self {
        let kind_tag = if kind == EdgeKind::Assert { "assert" } else { "concept" };
        KgEdge {
            edge_id: short_id("e", &[kind_tag, &pair.pair_id, relation.name(), dst]),
            kind,
            src: vec![pair.item1_id.clone(), pair.item2_id.clone()],
            dst: dst.to_string(),
            pair_id: Some(pair.pair_id.clone()),
            relation: Some(relation),
            plausibility: Some(plausibility),
            typicality: Some(typicality),
            weight: None,
        }
    }

    fn isa(intention: &str, abstract_id: &str, weight: f64) -> Self {
        KgEdge {
            edge_id: short_id("e", &["isa", intention, abstract_id]),
            kind: EdgeKind::IsaWeight,
            src: vec![intention.to_string()],
            dst: abstract_id.to_string(),
            pair_id: None,
            relation: None,
            plausibility: None,
            typicality: None,
            weight: Some(weight),
        }
    }

    /// Head pair of a pair-headed edge.
    pub fn pair(&self) -> Option<PairRecord> {
        match (self.kind, self.src.as_slice(), &self.pair_id) {
            (EdgeKind::Assert | EdgeKind::ConceptAssert, [a, b], Some(pid)) => Some(PairRecord {
                pair_id: pid.clone(),
                item1_id: a.clone(),
                item2_id: b.clone(),
            }),
            _ => None,
        }
    }
}

/// Node id of the intention with the given tail text.
pub fn intention_id(tail: &str) -> String {
    short_id("t", &[tail])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub nodes: BTreeMap<String, KgNode>,
    pub edges: BTreeMap<String, KgEdge>,
}

impl KnowledgeGraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn edges_of(&self, kind: EdgeKind) -> impl Iterator<Item = &KgEdge> {
        self.edges.values().filter(move |e| e.kind == kind)
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(move |n| n.kind == kind)
    }

    /// Builds a graph from candidate `ASSERT` and `ISA_WEIGHT` edges.
    /// `ISA_WEIGHT` edges whose intention has no `ASSERT` edge are dropped,
    /// `CONCEPT_ASSERT` edges are derived, and only nodes touched by an edge
    /// are kept.
    fn from_parts(
        pool: &BTreeMap<String, KgNode>,
        asserts: impl IntoIterator<Item = KgEdge>,
        isas: impl IntoIterator<Item = KgEdge>,
    ) -> Self {
        let mut edges: BTreeMap<String, KgEdge> = BTreeMap::new();
        let mut by_intention: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in asserts {
            by_intention.entry(e.dst.clone()).or_default().push(e.edge_id.clone());
            edges.insert(e.edge_id.clone(), e);
        }
        let isas: Vec<KgEdge> = isas
            .into_iter()
            .filter(|e| by_intention.contains_key(&e.src[0]))
            .collect();
        let mut concept: BTreeMap<String, KgEdge> = BTreeMap::new();
        for isa in &isas {
            for assert_id in &by_intention[&isa.src[0]] {
                let a = &edges[assert_id];
                let pair = a.pair().expect("assert edges carry a pair");
                let relation = a.relation.expect("assert edges carry a relation");
                let (p, t) = (a.plausibility.unwrap_or(0.0), a.typicality.unwrap_or(0.0));
                let candidate = KgEdge::pair_edge(EdgeKind::ConceptAssert, &pair, relation, &isa.dst, p, t);
                concept
                    .entry(candidate.edge_id.clone())
                    .and_modify(|e| max_scores(e, p, t))
                    .or_insert(candidate);
            }
        }
        edges.extend(isas.into_iter().map(|e| (e.edge_id.clone(), e)));
        edges.extend(concept);

        let mut nodes = BTreeMap::new();
        for e in edges.values() {
            for id in e.src.iter().chain(std::iter::once(&e.dst)) {
                if let Some(n) = pool.get(id) {
                    nodes.insert(id.clone(), n.clone());
                }
            }
        }
        KnowledgeGraph { nodes, edges }
    }

    /// Keeps the `ASSERT` edges satisfying `keep` and everything that
    /// depends on them.
    pub fn restrict(&self, mut keep: impl FnMut(&KgEdge) -> bool) -> KnowledgeGraph {
        let asserts: Vec<KgEdge> = self.edges_of(EdgeKind::Assert).filter(|e| keep(e)).cloned().collect();
        let isas: Vec<KgEdge> = self.edges_of(EdgeKind::IsaWeight).cloned().collect();
        KnowledgeGraph::from_parts(&self.nodes, asserts, isas)
    }

    /// Sub-graph of `ASSERT` edges with plausibility above `plau_t` and, when
    /// given, typicality above `typ_t`.
    pub fn filter_by_threshold(&self, plau_t: f64, typ_t: Option<f64>) -> KnowledgeGraph {
        self.restrict(|e| {
            e.plausibility.unwrap_or(0.0) > plau_t
                && typ_t.is_none_or(|t| e.typicality.unwrap_or(0.0) > t)
        })
    }

    /// Checks that every edge endpoint exists, `ISA_WEIGHT` weights lie in
    /// (0, 1], and every `CONCEPT_ASSERT` edge is supported by an `ASSERT`
    /// edge and an `ISA_WEIGHT` edge through a shared intention.
    pub fn validate(&self) -> Result<()> {
        for e in self.edges.values() {
            for id in e.src.iter().chain(std::iter::once(&e.dst)) {
                if !self.nodes.contains_key(id) {
                    return Err(Error::Reference(format!("edge {} points at missing node {id}", e.edge_id)));
                }
            }
            if e.kind == EdgeKind::IsaWeight && !e.weight.is_some_and(|w| w > 0.0 && w <= 1.0) {
                return Err(Error::invalid(format!("edge {} has weight outside (0, 1]", e.edge_id)));
            }
        }
        let mut supported: BTreeSet<(String, Relation, String)> = BTreeSet::new();
        let mut isa_by_intention: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in self.edges_of(EdgeKind::IsaWeight) {
            isa_by_intention.entry(e.src[0].as_str()).or_default().push(e.dst.as_str());
        }
        for a in self.edges_of(EdgeKind::Assert) {
            let (Some(pid), Some(rel)) = (&a.pair_id, a.relation) else {
                return Err(Error::invalid(format!("assert edge {} lacks pair or relation", a.edge_id)));
            };
            for abs in isa_by_intention.get(a.dst.as_str()).into_iter().flatten() {
                supported.insert((pid.clone(), rel, abs.to_string()));
            }
        }
        for c in self.edges_of(EdgeKind::ConceptAssert) {
            let key = (c.pair_id.clone().unwrap_or_default(), c.relation.unwrap_or(Relation::Open), c.dst.clone());
            if c.relation.is_none() || !supported.contains(&key) {
                return Err(Error::Reference(format!("concept edge {} is unsupported", c.edge_id)));
            }
        }
        Ok(())
    }
}

fn max_scores(e: &mut KgEdge, p: f64, t: f64) {
    e.plausibility = Some(e.plausibility.map_or(p, |x| x.max(p)));
    e.typicality = Some(e.typicality.map_or(t, |x| x.max(t)));
}

/// Inputs to [`assemble`].
#[derive(Debug, Clone, Copy)]
pub struct AssemblyInput<'a> {
    pub scored: &'a [ScoredAssertion],
    pub pairs: &'a [PairRecord],
    pub assignments: &'a [PatternAssignment],
    /// Abstract intentions whose `source_tail_id` is an [`intention_id`].
    pub abstracts: &'a [AbstractIntention],
    pub catalog: Option<&'a ItemCatalog>,
}

/// Builds the graph from scored assertions above `plau_threshold`. Each
/// assertion's intention is its simplified tail when a pattern was assigned
/// and its raw tail otherwise. Repeated (pair, relation, intention) keys
/// collapse into one edge holding the highest scores.
///
/// Fails when an assertion names an unknown pair or an assignment names an
/// unknown assertion.
pub fn assemble(input: AssemblyInput<'_>, plau_threshold: f64) -> Result<KnowledgeGraph> {
    let pairs: HashMap<&str, &PairRecord> = input.pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let known: BTreeSet<&str> = input.scored.iter().map(|s| s.assertion.assertion_id.as_str()).collect();
    let orphans: Vec<&str> = input
        .assignments
        .iter()
        .map(|a| a.assertion_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Reference(format!("assignments for unknown assertions: {}", orphans.join(", "))));
    }
    let unknown_pairs: BTreeSet<&str> = input
        .scored
        .iter()
        .map(|s| s.assertion.pair_id.as_str())
        .filter(|p| !pairs.contains_key(p))
        .collect();
    if !unknown_pairs.is_empty() {
        return Err(Error::Reference(format!(
            "assertions reference unknown pairs: {}",
            unknown_pairs.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let simplified: HashMap<&str, &str> = input
        .assignments
        .iter()
        .filter(|a| a.pattern_id.is_some())
        .map(|a| (a.assertion_id.as_str(), a.simplified_tail.as_str()))
        .collect();

    let mut pool: BTreeMap<String, KgNode> = BTreeMap::new();
    let mut asserts: BTreeMap<String, KgEdge> = BTreeMap::new();
    for s in input.scored.iter().filter(|s| s.plausibility > plau_threshold) {
        let a = &s.assertion;
        let pair = pairs[a.pair_id.as_str()];
        let tail = simplified.get(a.assertion_id.as_str()).copied().unwrap_or(&a.tail);
        let tid = intention_id(tail);
        pool.entry(tid.clone()).or_insert_with(|| KgNode::text(tid.clone(), NodeKind::Intention, tail));
        for id in [&pair.item1_id, &pair.item2_id] {
            pool.entry(id.clone()).or_insert_with(|| KgNode::item(id, input.catalog));
        }
        let edge = KgEdge::pair_edge(EdgeKind::Assert, pair, a.relation, &tid, s.plausibility, s.typicality);
        asserts
            .entry(edge.edge_id.clone())
            .and_modify(|e| max_scores(e, s.plausibility, s.typicality))
            .or_insert(edge);
    }
    let mut isas = Vec::new();
    for abs in input.abstracts {
        pool.entry(abs.node_id.clone())
            .or_insert_with(|| KgNode::text(abs.node_id.clone(), NodeKind::Abstract, &abs.abstract_tail));
        isas.push(KgEdge::isa(&abs.source_tail_id, &abs.node_id, abs.weight));
    }
    let kg = KnowledgeGraph::from_parts(&pool, asserts.into_values(), isas);
    kg.validate()?;
    Ok(kg)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub assert_edges: usize,
    pub tails: usize,
    pub avg_tail_tokens: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgStats {
    pub item_nodes: usize,
    pub intention_nodes: usize,
    pub abstract_nodes: usize,
    pub assert_edges: usize,
    pub concept_assert_edges: usize,
    pub isa_weight_edges: usize,
    /// Mean word count over intention nodes.
    pub avg_tail_tokens: f64,
    pub per_relation: BTreeMap<Relation, RelationStats>,
}

/// Words in a tail, not counting tokens that are only punctuation.
pub fn tail_tokens(text: &str) -> usize {
    text.split_whitespace()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .count()
}

fn mean(xs: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = xs.fold((0usize, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub fn stats(kg: &KnowledgeGraph) -> KgStats {
    let text_len = |id: &str| kg.nodes.get(id).and_then(|n| n.text.as_deref()).map_or(0, tail_tokens);
    let mut per_rel: BTreeMap<Relation, (usize, BTreeSet<&str>)> = BTreeMap::new();
    for e in kg.edges_of(EdgeKind::Assert) {
        if let Some(r) = e.relation {
            let entry = per_rel.entry(r).or_default();
            entry.0 += 1;
            entry.1.insert(e.dst.as_str());
        }
    }
    KgStats {
        item_nodes: kg.nodes_of(NodeKind::Item).count(),
        intention_nodes: kg.nodes_of(NodeKind::Intention).count(),
        abstract_nodes: kg.nodes_of(NodeKind::Abstract).count(),
        assert_edges: kg.edges_of(EdgeKind::Assert).count(),
        concept_assert_edges: kg.edges_of(EdgeKind::ConceptAssert).count(),
        isa_weight_edges: kg.edges_of(EdgeKind::IsaWeight).count(),
        avg_tail_tokens: mean(kg.nodes_of(NodeKind::Intention).map(|n| text_len(&n.id))),
        per_relation: per_rel
            .into_iter()
            .map(|(r, (edges, tails))| {
                let avg = mean(tails.iter().map(|t| text_len(t)));
                (
                    r,
                    RelationStats {
                        assert_edges: edges,
                        tails: tails.len(),
                        avg_tail_tokens: avg,
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn write_with_header<T: Serialize>(path: &Path, format: &str, records: impl Iterator<Item = T>) -> Result<()> {
    jsonl::write_atomic(path, |w| {
        let header = Header {
            format: format.to_string(),
            version: FORMAT_VERSION,
        };
        for line in std::iter::once(serde_json::to_string(&header)?)
            .map(Ok)
            .chain(records.map(|r| serde_json::to_string(&r)))
        {
            writeln!(w, "{}", line?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

fn read_with_header<T: serde::de::DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::invalid(format!("{}: missing header", path.display())))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::invalid(format!("{}: bad header: {e}", path.display())))?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(out)
}

/// Writes `nodes.jsonl` and `edges.jsonl` into `dir`, each led by a format
/// header and sorted by id.
pub fn export(kg: &KnowledgeGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_with_header(&dir.join(NODES_FILE), "intentkg-nodes", kg.nodes.values())?;
    write_with_header(&dir.join(EDGES_FILE), "intentkg-edges", kg.edges.values())
}

pub fn import(dir: &Path) -> Result<KnowledgeGraph> {
    let nodes: Vec<KgNode> = read_with_header(&dir.join(NODES_FILE), "intentkg-nodes")?;
    let edges: Vec<KgEdge> = read_with_header(&dir.join(EDGES_FILE), "intentkg-edges")?;
    let kg = KnowledgeGraph {
        nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
        edges: edges.into_iter().map(|e| (e.edge_id.clone(), e)).collect(),
    };
    kg.validate()?;
    Ok(kg)
}
