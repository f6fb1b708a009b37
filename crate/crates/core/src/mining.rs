//! Frequent dependency sub-tree mining and longest-first pattern assignment.
//!
//! Dependency parses arrive as CoNLL-U and become [`DepTree`]s. Each node is
//! labeled by its universal POS tag, with the lemma attached for closed-class
//! words (pronouns, determiners, adpositions, conjunctions), so "for his"
//! stays distinct from "in their" while open-class words generalize.
//!
//! A pattern is a rooted, unordered, labeled tree with labeled edges. It
//! occurs in a dependency tree when its nodes map injectively onto tree nodes
//! with equal labels and every pattern edge maps onto a head→child edge with
//! the same relation label. Support counts distinct trees with at least one
//! occurrence.
//!
//! Mining is pattern growth over occurrence lists: frequent k-node patterns
//! are extended by one adjacent tree node at each occurrence, candidates are
//! merged under a canonical string, and infrequent candidates are dropped.
//! Because support never grows when a pattern grows, and every connected
//! (k+1)-node subtree contains a connected k-node subtree, the search is
//! complete.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::generation::Relation;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepNode {
    /// 1-based CoNLL-U token id.
    pub index: usize,
    pub surface: String,
    pub lemma: String,
    pub upos: String,
    pub ner_tag: Option<String>,
}

/// Head→child edge. Indices are positions in [`DepTree::nodes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepEdge {
    pub head_index: usize,
    pub child_index: usize,
    pub dep_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepTree {
    pub sent_id: Option<String>,
    pub text: Option<String>,
    pub nodes: Vec<DepNode>,
    pub edges: Vec<DepEdge>,
    pub root_index: usize,
}

impl DepTree {
    /// Validates that `edges` form a tree rooted at `root_index`.
    pub fn new(nodes: Vec<DepNode>, edges: Vec<DepEdge>, root_index: usize) -> Result<Self> {
        let tree = DepTree {
            sent_id: None,
            text: None,
            nodes,
            edges,
            root_index,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::invalid("empty tree"));
        }
        if self.root_index >= n {
            return Err(Error::invalid("root index out of range"));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::invalid(format!("{} nodes but {} edges", n, self.edges.len())));
        }
        let mut parent = vec![None; n];
        for e in &self.edges {
            if e.head_index >= n || e.child_index >= n {
                return Err(Error::invalid("edge index out of range"));
            }
            if e.child_index == self.root_index || parent[e.child_index].is_some() {
                return Err(Error::invalid("node with several heads"));
            }
            parent[e.child_index] = Some(e.head_index);
        }
        // every node must reach the root without revisiting
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::invalid("cycle in dependency edges"));
                }
            }
            if cur != self.root_index {
                return Err(Error::invalid("disconnected dependency edges"));
            }
        }
        Ok(())
    }

    /// Tokens joined in sentence order, punctuation attached to the left.
    pub fn surface_text(&self, positions: impl IntoIterator<Item = usize>) -> String {
        let mut pos: Vec<usize> = positions.into_iter().collect();
        pos.sort_by_key(|&p| self.nodes[p].index);
        let mut out = String::new();
        for p in pos {
            let node = &self.nodes[p];
            if !out.is_empty() && node.upos != "PUNCT" {
                out.push(' ');
            }
            out.push_str(&node.surface);
        }
        out
    }
}

/// Result of reading CoNLL-U: valid trees plus the count of rejected sentences.
#[derive(Debug, Clone, Default)]
pub struct ConlluParse {
    pub trees: Vec<DepTree>,
    pub skipped: usize,
}

/// Reads blank-line separated CoNLL-U sentences. Multiword (`1-2`) and empty
/// (`1.1`) token lines are ignored; `# sent_id` and `# text` comments are kept.
/// Sentences that do not form a single-rooted tree are skipped with a warning.
pub fn parse_conllu(text: &str) -> ConlluParse {
    let mut out = ConlluParse::default();
    let mut block: Vec<&str> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !block.is_empty() {
                match parse_block(&block) {
                    Ok(t) => out.trees.push(t),
                    Err(err) => {
                        log::warn!("skipping CoNLL-U sentence: {err}");
                        out.skipped += 1;
                    }
                }
                block.clear();
            }
        } else {
            block.push(line);
        }
    }
    out
}

fn parse_block(lines: &[&str]) -> Result<DepTree> {
    let mut sent_id = None;
    let mut text = None;
    let mut rows: Vec<(usize, DepNode, usize, String)> = Vec::new();
    for line in lines {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                match k.trim() {
                    "sent_id" => sent_id = Some(v.trim().to_string()),
                    "text" => text = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::invalid(format!("expected 10 columns: {line:?}")));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::invalid(format!("bad id {:?}", cols[0])))?;
        let head: usize = cols[6].parse().map_err(|_| Error::invalid(format!("bad head {:?}", cols[6])))?;
        let ner_tag = cols[9]
            .split('|')
            .find_map(|kv| kv.strip_prefix("NER="))
            .map(str::to_string);
        let node = DepNode {
            index: id,
            surface: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            ner_tag,
        };
        rows.push((id, node, head, cols[7].to_string()));
    }
    if rows.is_empty() {
        return Err(Error::invalid("sentence without tokens"));
    }
    let pos_of: HashMap<usize, usize> = rows.iter().enumerate().map(|(p, r)| (r.0, p)).collect();
    let mut roots = Vec::new();
    let mut edges = Vec::new();
    for (p, (_, _, head, rel)) in rows.iter().enumerate() {
        if *head == 0 {
            roots.push(p);
        } else {
            let hp = *pos_of
                .get(head)
                .ok_or_else(|| Error::invalid(format!("head {head} does not exist")))?;
            edges.push(DepEdge {
                head_index: hp,
                child_index: p,
                dep_label: rel.clone(),
            });
        }
    }
    if roots.len() != 1 {
        return Err(Error::invalid(format!("{} roots", roots.len())));
    }
    let nodes = rows.into_iter().map(|r| r.1).collect();
    let mut tree = DepTree::new(nodes, edges, roots[0])?;
    tree.sent_id = sent_id;
    tree.text = text;
    Ok(tree)
}

/// Part-of-speech tags whose lemma is kept in the node label.
pub const CLOSED_CLASS: [&str; 5] = ["PRON", "DET", "ADP", "CCONJ", "SCONJ"];

/// Node label used for mining and matching.
pub fn node_label(node: &DepNode) -> String {
    if CLOSED_CLASS.contains(&node.upos.as_str()) {
        format!("{}:{}", node.upos, node.lemma.to_lowercase())
    } else {
        node.upos.clone()
    }
}

/// Dependency tree reduced to labels, in the shape mining works on.
#[derive(Debug, Clone)]
struct LabeledTree {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    edge_label: Vec<String>,
    children: Vec<Vec<usize>>,
}

impl LabeledTree {
    fn from_dep(tree: &DepTree) -> Self {
        let n = tree.nodes.len();
        let mut parent = vec![None; n];
        let mut edge_label = vec![String::new(); n];
        let mut children = vec![Vec::new(); n];
        for e in &tree.edges {
            parent[e.child_index] = Some(e.head_index);
            edge_label[e.child_index] = e.dep_label.clone();
            children[e.head_index].push(e.child_index);
        }
        LabeledTree {
            labels: tree.nodes.iter().map(node_label).collect(),
            parent,
            edge_label,
            children,
        }
    }

    /// Canonical string of the subtree induced by `set`, which must be connected.
    fn canonical(&self, set: &[usize]) -> String {
        let members: HashSet<usize> = set.iter().copied().collect();
        let root = set
            .iter()
            .copied()
            .find(|&v| self.parent[v].is_none_or(|p| !members.contains(&p)))
            .expect("connected node set has a top node");
        self.canon_at(root, &members)
    }

    fn canon_at(&self, v: usize, members: &HashSet<usize>) -> String {
        let mut kids: Vec<String> = self.children[v]
            .iter()
            .filter(|c| members.contains(c))
            .map(|&c| format!("{}>{}", escape(&self.edge_label[c]), self.canon_at(c, members)))
            .collect();
        kids.sort();
        format!("{}({})", escape(&self.labels[v]), kids.join(","))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '(' | ')' | ',' | '>' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternEdge {
    pub parent: usize,
    pub child: usize,
    pub dep_label: String,
}

/// Mined sub-tree pattern. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePattern {
    pub pattern_id: String,
    pub relation: Relation,
    /// Node labels: the POS tag, or `POS:lemma` for closed-class words.
    pub nodes: Vec<String>,
    pub edges: Vec<PatternEdge>,
    pub canonical: String,
    pub support: usize,
    pub perfect_match_count: usize,
}

impl TreePattern {
    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    fn children(&self) -> Vec<Vec<(usize, &str)>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            ch[e.parent].push((e.child, e.dep_label.as_str()));
        }
        ch
    }
}

/// Builds the pattern rooted at the top of `set`, laying nodes out in
/// canonical order so equal patterns get identical structures.
fn pattern_from_occurrence(tree: &LabeledTree, set: &[usize]) -> (Vec<String>, Vec<PatternEdge>) {
    let members: HashSet<usize> = set.iter().copied().collect();
    let root = set
        .iter()
        .copied()
        .find(|&v| tree.parent[v].is_none_or(|p| !members.contains(&p)))
        .expect("connected node set has a top node");
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    fn walk(
        tree: &LabeledTree,
        members: &HashSet<usize>,
        v: usize,
        parent: Option<(usize, &str)>,
        nodes: &mut Vec<String>,
        edges: &mut Vec<PatternEdge>,
    ) {
        let id = nodes.len();
        nodes.push(tree.labels[v].clone());
        if let Some((p, label)) = parent {
            edges.push(PatternEdge {
                parent: p,
                child: id,
                dep_label: label.to_string(),
            });
        }
        let mut kids: Vec<(String, usize)> = tree.children[v]
            .iter()
            .filter(|c| members.contains(c))
            .map(|&c| (format!("{}>{}", escape(&tree.edge_label[c]), tree.canon_at(c, members)), c))
            .collect();
        kids.sort();
        for (_, c) in kids {
            walk(tree, members, c, Some((id, tree.edge_label[c].as_str())), nodes, edges);
        }
    }
    walk(tree, &members, root, None, &mut nodes, &mut edges);
    (nodes, edges)
}

type Occurrence = (usize, Vec<usize>);

/// Every connected sub-tree pattern supported by more than `min_support`
/// trees, up to `max_nodes` nodes when given. Perfect-match counts are left
/// at zero; see [`perfect_match_counts`]. Patterns are ordered by size
/// (largest first), then support (highest first), then canonical string, and
/// numbered in that order.
pub fn mine_patterns(
    trees: &[DepTree],
    min_support: usize,
    relation: Relation,
    max_nodes: Option<usize>,
) -> Vec<TreePattern> {
    let labeled: Vec<LabeledTree> = trees.iter().map(LabeledTree::from_dep).collect();
    let support_of = |occ: &BTreeSet<Occurrence>| {
        occ.iter().map(|(t, _)| *t).collect::<BTreeSet<_>>().len()
    };

    let mut level: BTreeMap<String, BTreeSet<Occurrence>> = BTreeMap::new();
    for (ti, tree) in labeled.iter().enumerate() {
        for v in 0..tree.labels.len() {
            level.entry(tree.canonical(&[v])).or_default().insert((ti, vec![v]));
        }
    }
    level.retain(|_, occ| support_of(occ) > min_support);

    let mut frequent: Vec<(String, BTreeSet<Occurrence>)> = Vec::new();
    let mut size = 1;
    while !level.is_empty() {
        let grow = max_nodes.is_none_or(|m| size < m);
        let mut next: BTreeMap<String, BTreeSet<Occurrence>> = BTreeMap::new();
        if grow {
            for occs in level.values() {
                for (ti, set) in occs {
                    let tree = &labeled[*ti];
                    for &v in set {
                        let neighbors = tree.children[v].iter().copied().chain(tree.parent[v]);
                        for u in neighbors {
                            if set.contains(&u) {
                                continue;
                            }
                            let mut bigger = set.clone();
                            bigger.push(u);
                            bigger.sort_unstable();
                            next.entry(tree.canonical(&bigger))
                                .or_default()
                                .insert((*ti, bigger));
                        }
                    }
                }
            }
            next.retain(|_, occ| support_of(occ) > min_support);
        }
        frequent.extend(std::mem::take(&mut level));
        level = next;
        size += 1;
    }

    let mut patterns: Vec<TreePattern> = frequent
        .into_iter()
        .map(|(canonical, occs)| {
            let (ti, set) = occs.iter().next().expect("frequent pattern has occurrences");
            let (nodes, edges) = pattern_from_occurrence(&labeled[*ti], set);
            TreePattern {
                pattern_id: String::new(),
                relation,
                nodes,
                edges,
                support: support_of(&occs),
                canonical,
                perfect_match_count: 0,
            }
        })
        .collect();
    patterns.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then(b.support.cmp(&a.support))
            .then_with(|| a.canonical.cmp(&b.canonical))
    });
    for (i, p) in patterns.iter_mut().enumerate() {
        p.pattern_id = format!("{}-{:04}", relation.name(), i);
    }
    patterns
}

/// Minimum support scaled from 500 per 90,000 trees, never below 2.
pub fn default_min_support(n_trees: usize) -> usize {
    ((500.0 * n_trees as f64 / 90_000.0).round() as usize).max(2)
}

/// Maps pattern node → tree node for the first occurrence of `pattern` in
/// `tree` (candidate roots tried in node order), or `None`.
pub fn find_embedding(pattern: &TreePattern, tree: &DepTree) -> Option<Vec<usize>> {
    let lt = LabeledTree::from_dep(tree);
    Matcher::new(pattern, &lt).find()
}

struct Matcher<'a> {
    labels: &'a [String],
    children: Vec<Vec<(usize, &'a str)>>,
    tree: &'a LabeledTree,
    memo: HashMap<(usize, usize), bool>,
}

impl<'a> Matcher<'a> {
    fn new(pattern: &'a TreePattern, tree: &'a LabeledTree) -> Self {
        Matcher {
            labels: &pattern.nodes,
            children: pattern.children(),
            tree,
            memo: HashMap::new(),
        }
    }

    fn find(&mut self) -> Option<Vec<usize>> {
        if self.labels.is_empty() {
            return None;
        }
        let root = (0..self.tree.labels.len()).find(|&t| self.matches(0, t))?;
        let mut mapping = vec![usize::MAX; self.labels.len()];
        self.build(0, root, &mut mapping);
        Some(mapping)
    }

    fn compatible(&mut self, pc: usize, plabel: &str, tc: usize) -> bool {
        self.tree.edge_label[tc] == plabel && self.matches(pc, tc)
    }

    fn matches(&mut self, p: usize, t: usize) -> bool {
        if let Some(&m) = self.memo.get(&(p, t)) {
            return m;
        }
        let ok = self.labels[p] == self.tree.labels[t] && self.assign_children(p, t).is_some();
        self.memo.insert((p, t), ok);
        ok
    }

    /// Injective assignment of `p`'s children to `t`'s children (Kuhn's
    /// augmenting paths), indexed by pattern child order.
    fn assign_children(&mut self, p: usize, t: usize) -> Option<Vec<usize>> {
        let pkids = self.children[p].clone();
        let tkids = self.tree.children[t].clone();
        if pkids.len() > tkids.len() {
            return None;
        }
        let mut adj = vec![Vec::new(); pkids.len()];
        for (i, (pc, plabel)) in pkids.iter().enumerate() {
            for (j, &tc) in tkids.iter().enumerate() {
                if self.compatible(*pc, plabel, tc) {
                    adj[i].push(j);
                }
            }
            if adj[i].is_empty() {
                return None;
            }
        }
        let mut owner: Vec<Option<usize>> = vec![None; tkids.len()];
        for i in 0..pkids.len() {
            let mut seen = vec![false; tkids.len()];
            if !augment(i, &adj, &mut owner, &mut seen) {
                return None;
            }
        }
        let mut out = vec![usize::MAX; pkids.len()];
        for (j, o) in owner.iter().enumerate() {
            if let Some(i) = o {
                out[*i] = tkids[j];
            }
        }
        Some(out)
    }

    fn build(&mut self, p: usize, t: usize, mapping: &mut [usize]) {
        mapping[p] = t;
        let assigned = self.assign_children(p, t).expect("matched node has an assignment");
        let pkids: Vec<usize> = self.children[p].iter().map(|(c, _)| *c).collect();
        for (pc, tc) in pkids.into_iter().zip(assigned) {
            self.build(pc, tc, mapping);
        }
    }
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|k| augment(k, adj, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternAssignment {
    pub assertion_id: String,
    pub pattern_id: Option<String>,
    pub simplified_tail: String,
}

fn ordered_patterns(patterns: &[TreePattern]) -> Vec<&TreePattern> {
    let mut sorted: Vec<&TreePattern> = patterns.iter().collect();
    sorted.sort_by(|a, b| b.size().cmp(&a.size()).then_with(|| a.pattern_id.cmp(&b.pattern_id)));
    sorted
}

fn first_match<'p>(sorted: &[&'p TreePattern], tree: &DepTree) -> Option<(&'p TreePattern, Vec<usize>)> {
    let lt = LabeledTree::from_dep(tree);
    sorted
        .iter()
        .find_map(|p| Matcher::new(p, &lt).find().map(|m| (*p, m)))
}

/// Longest-first assignment: the largest matching pattern wins, ties going to
/// the lowest pattern id. The simplified tail is the matched tokens in
/// sentence order. Without a match the tail is `fallback_tail` unchanged.
pub fn assign_pattern(
    assertion_id: &str,
    tree: &DepTree,
    patterns: &[TreePattern],
    fallback_tail: &str,
) -> PatternAssignment {
    match first_match(&ordered_patterns(patterns), tree) {
        Some((p, mapping)) => PatternAssignment {
            assertion_id: assertion_id.to_string(),
            pattern_id: Some(p.pattern_id.clone()),
            simplified_tail: tree.surface_text(mapping),
        },
        None => PatternAssignment {
            assertion_id: assertion_id.to_string(),
            pattern_id: None,
            simplified_tail: fallback_tail.to_string(),
        },
    }
}

/// Number of trees each pattern perfectly matches: the pattern matches and
/// no larger pattern (nor an equal-size one with a lower id) does. Returned
/// in the order of `patterns`.
pub fn perfect_match_counts(patterns: &[TreePattern], trees: &[DepTree]) -> Vec<usize> {
    let sorted = ordered_patterns(patterns);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tree in trees {
        if let Some((p, _)) = first_match(&sorted, tree) {
            *counts.entry(p.pattern_id.as_str()).or_default() += 1;
        }
    }
    patterns
        .iter()
        .map(|p| counts.get(p.pattern_id.as_str()).copied().unwrap_or(0))
        .collect()
}

/// Perfect-match count of a single pattern against the candidate set it
/// belongs to.
pub fn perfect_match_count(pattern: &TreePattern, candidates: &[TreePattern], trees: &[DepTree]) -> usize {
    let sorted = ordered_patterns(candidates);
    trees
        .iter()
        .filter(|t| first_match(&sorted, t).is_some_and(|(p, _)| p.pattern_id == pattern.pattern_id))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Candidates need support above this.
    pub min_support: usize,
    /// Retained patterns need more perfect matches than this.
    pub min_perfect: usize,
    pub max_nodes: Option<usize>,
}

/// Candidate mining followed by perfect-match pruning. Pruning repeats until
/// every remaining pattern has more than `min_perfect` perfect matches, since
/// dropping a pattern hands its trees to smaller ones.
pub fn mine_relation(trees: &[DepTree], cfg: &MiningConfig, relation: Relation) -> Vec<TreePattern> {
    let mut patterns = mine_patterns(trees, cfg.min_support, relation, cfg.max_nodes);
    loop {
        let counts = perfect_match_counts(&patterns, trees);
        let before = patterns.len();
        for (p, c) in patterns.iter_mut().zip(&counts) {
            p.perfect_match_count = *c;
        }
        patterns.retain(|p| p.perfect_match_count > cfg.min_perfect);
        if patterns.len() == before {
            return patterns;
        }
    }
}

/// Operator edits: keep only allowed ids (when an allow list exists), then
/// drop denied ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatternFilter {
    pub allow: Option<BTreeSet<String>>,
    pub deny: BTreeSet<String>,
}

impl PatternFilter {
    /// Parses a plain-text id list: one id per line, `#` starts a comment.
    pub fn parse_ids(text: &str) -> BTreeSet<String> {
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn apply(&self, patterns: Vec<TreePattern>) -> Vec<TreePattern> {
        patterns
            .into_iter()
            .filter(|p| self.allow.as_ref().is_none_or(|a| a.contains(&p.pattern_id)))
            .filter(|p| !self.deny.contains(&p.pattern_id))
            .collect()
    }
}

/// Share of assignments that found a pattern; 0 for no assignments.
pub fn coverage(assignments: &[PatternAssignment]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    assignments.iter().filter(|a| a.pattern_id.is_some()).count() as f64 / assignments.len() as f64
}
