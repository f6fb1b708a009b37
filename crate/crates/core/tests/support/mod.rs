//! Independent oracles and random fixture generators shared by the
//! integration tests. Nothing here calls the code it checks except to
//! construct inputs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use intentkg::conceptualize::{abstract_node_id, AbstractIntention};
use intentkg::generation::{Assertion, Relation};
use intentkg::ingest::PairRecord;
use intentkg::kgstore::{assemble, intention_id, AssemblyInput, KnowledgeGraph};
use intentkg::mining::{node_label, DepEdge, DepNode, DepTree, TreePattern};
use intentkg::population::ScoredAssertion;
use intentkg::receval::Interaction;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// sub-tree enumeration

/// Rooted labeled tree: node labels, parent links and the label of the edge
/// to the parent.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallTree {
    pub labels: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub edge: Vec<String>,
}

pub fn small_from_dep(t: &DepTree) -> SmallTree {
    let n = t.nodes.len();
    let mut parent = vec![None; n];
    let mut edge = vec![String::new(); n];
    for e in &t.edges {
        parent[e.child_index] = Some(e.head_index);
        edge[e.child_index] = e.dep_label.clone();
    }
    SmallTree {
        labels: t.nodes.iter().map(node_label).collect(),
        parent,
        edge,
    }
}

pub fn small_from_pattern(p: &TreePattern) -> SmallTree {
    let n = p.nodes.len();
    let mut parent = vec![None; n];
    let mut edge = vec![String::new(); n];
    for e in &p.edges {
        parent[e.child] = Some(e.parent);
        edge[e.child] = e.dep_label.clone();
    }
    SmallTree {
        labels: p.nodes.clone(),
        parent,
        edge,
    }
}

/// Sub-tree induced by the nodes in `mask`, if they are connected.
fn induced(t: &SmallTree, mask: u32) -> Option<SmallTree> {
    let members: Vec<usize> = (0..t.labels.len()).filter(|i| mask & (1 << i) != 0).collect();
    let tops = members
        .iter()
        .filter(|&&v| t.parent[v].is_none_or(|p| mask & (1 << p) == 0))
        .count();
    if tops != 1 {
        return None;
    }
    let pos: BTreeMap<usize, usize> = members.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    Some(SmallTree {
        labels: members.iter().map(|&v| t.labels[v].clone()).collect(),
        parent: members
            .iter()
            .map(|&v| t.parent[v].and_then(|p| pos.get(&p).copied()))
            .collect(),
        edge: members
            .iter()
            .map(|&v| if t.parent[v].is_some_and(|p| mask & (1 << p) != 0) { t.edge[v].clone() } else { String::new() })
            .collect(),
    })
}

/// Label-, parent- and edge-preserving bijection search.
pub fn isomorphic(a: &SmallTree, b: &SmallTree) -> bool {
    if a.labels.len() != b.labels.len() {
        return false;
    }
    let mut ms: Vec<&String> = a.labels.iter().collect();
    let mut ns: Vec<&String> = b.labels.iter().collect();
    ms.sort();
    ns.sort();
    if ms != ns {
        return false;
    }
    let n = a.labels.len();
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn go(a: &SmallTree, b: &SmallTree, k: usize, map: &mut [usize], used: &mut [bool]) -> bool {
        if k == a.labels.len() {
            return (0..k).all(|v| match a.parent[v] {
                None => b.parent[map[v]].is_none(),
                Some(p) => b.parent[map[v]] == Some(map[p]) && a.edge[v] == b.edge[map[v]],
            });
        }
        for j in 0..b.labels.len() {
            if !used[j] && a.labels[k] == b.labels[j] {
                used[j] = true;
                map[k] = j;
                if go(a, b, k + 1, map, used) {
                    return true;
                }
                used[j] = false;
            }
        }
        false
    }
    go(a, b, 0, &mut map, &mut used)
}

/// Every connected sub-tree class with more than `min_support` supporting
/// trees, found by enumerating all node subsets of every tree.
pub fn brute_force_frequent(trees: &[DepTree], min_support: usize, max_nodes: usize) -> Vec<(SmallTree, usize)> {
    let mut classes: Vec<(SmallTree, BTreeSet<usize>)> = Vec::new();
    for (ti, t) in trees.iter().enumerate() {
        let st = small_from_dep(t);
        let n = st.labels.len();
        assert!(n <= 16, "brute force is for small trees");
        for mask in 1u32..(1 << n) {
            if mask.count_ones() as usize > max_nodes {
                continue;
            }
            let Some(sub) = induced(&st, mask) else { continue };
            match classes.iter_mut().find(|(c, _)| isomorphic(c, &sub)) {
                Some((_, support)) => {
                    support.insert(ti);
                }
                None => classes.push((sub, BTreeSet::from([ti]))),
            }
        }
    }
    classes
        .into_iter()
        .filter(|(_, s)| s.len() > min_support)
        .map(|(c, s)| (c, s.len()))
        .collect()
}

/// Compares mined patterns with the oracle's classes; describes the first
/// difference found.
pub fn compare_with_oracle(mined: &[TreePattern], oracle: &[(SmallTree, usize)]) -> Result<(), String> {
    if mined.len() != oracle.len() {
        return Err(format!("mined {} patterns, oracle {}", mined.len(), oracle.len()));
    }
    let mut matched = vec![false; oracle.len()];
    for p in mined {
        let sp = small_from_pattern(p);
        let hit = oracle
            .iter()
            .enumerate()
            .find(|(i, (c, _))| !matched[*i] && isomorphic(&sp, c));
        match hit {
            Some((i, (_, support))) => {
                if *support != p.support {
                    return Err(format!("{}: support {} vs oracle {support}", p.canonical, p.support));
                }
                matched[i] = true;
            }
            None => return Err(format!("{} not in oracle set", p.canonical)),
        }
    }
    Ok(())
}

pub const OPEN_LABELS: [&str; 4] = ["NOUN", "VERB", "ADJ", "ADV"];
pub const DEP_LABELS: [&str; 2] = ["obj", "mod"];

/// Random tree with `n` nodes; node `k > 0` hangs under a uniformly chosen
/// earlier node.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize, n_labels: usize, n_deps: usize) -> DepTree {
    let nodes: Vec<DepNode> = (0..n)
        .map(|i| {
            let upos = OPEN_LABELS[rng.random_range(0..n_labels)].to_string();
            DepNode {
                index: i + 1,
                surface: format!("w{i}"),
                lemma: format!("w{i}"),
                upos,
                ner_tag: None,
            }
        })
        .collect();
    let edges = (1..n)
        .map(|k| DepEdge {
            head_index: rng.random_range(0..k),
            child_index: k,
            dep_label: DEP_LABELS[rng.random_range(0..n_deps)].to_string(),
        })
        .collect();
    DepTree::new(nodes, edges, 0).expect("generated edges form a tree")
}

pub fn random_tree_set(rng: &mut ChaCha8Rng, max_trees: usize, max_nodes: usize) -> Vec<DepTree> {
    let n_trees = rng.random_range(1..=max_trees);
    let n_labels = rng.random_range(1..=4);
    let n_deps = rng.random_range(1..=2);
    (0..n_trees)
        .map(|_| {
            let n = rng.random_range(1..=max_nodes);
            random_tree(rng, n, n_labels, n_deps)
        })
        .collect()
}

/// Tree from `(upos, head position or None, dep label)` rows.
pub fn tree(rows: &[(&str, Option<usize>, &str)]) -> DepTree {
    let nodes = rows
        .iter()
        .enumerate()
        .map(|(i, (upos, _, _))| DepNode {
            index: i + 1,
            surface: format!("{}{}", upos.to_lowercase(), i),
            lemma: upos.to_lowercase(),
            upos: upos.to_string(),
            ner_tag: None,
        })
        .collect();
    let root = rows.iter().position(|r| r.1.is_none()).expect("a root row");
    let edges = rows
        .iter()
        .enumerate()
        .filter_map(|(i, (_, h, d))| {
            h.map(|h| DepEdge {
                head_index: h,
                child_index: i,
                dep_label: d.to_string(),
            })
        })
        .collect();
    DepTree::new(nodes, edges, root).expect("rows form a tree")
}

// ---------------------------------------------------------------------------
// agreement

/// Pairwise agreement by listing every unordered rater pair per item.
pub fn brute_pairwise(items: &[Vec<u8>]) -> f64 {
    let mut agree = 0usize;
    let mut total = 0usize;
    for votes in items {
        for i in 0..votes.len() {
            for j in i + 1..votes.len() {
                total += 1;
                if votes[i] == votes[j] {
                    agree += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// ranks

/// Pearson correlation of plain vectors.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Average 1-based ranks computed by counting: rank = #smaller + (#equal + 1) / 2.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let less = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

// ---------------------------------------------------------------------------
// knowledge graphs

pub struct KgFixture {
    pub scored: Vec<ScoredAssertion>,
    pub pairs: Vec<PairRecord>,
    pub abstracts: Vec<AbstractIntention>,
}

impl KgFixture {
    pub fn assemble(&self, threshold: f64) -> KnowledgeGraph {
        assemble(
            AssemblyInput {
                scored: &self.scored,
                pairs: &self.pairs,
                assignments: &[],
                abstracts: &self.abstracts,
                catalog: None,
            },
            threshold,
        )
        .expect("fixture is consistent")
    }
}

const WORDS: [&str; 8] = ["warm", "baby", "daughter", "kitchen", "party", "gift", "coffee", "travel"];
const CONCEPTS: [&str; 4] = ["person", "event", "place", "drink"];

/// Random graph inputs: a few items, pairs among them, scored assertions
/// with random tails, and random concept links for some tails.
pub fn random_kg_fixture(rng: &mut ChaCha8Rng) -> KgFixture {
    let n_items = rng.random_range(2..=6);
    let items: Vec<String> = (0..n_items).map(|i| format!("item{i}")).collect();
    let mut pairs = Vec::new();
    for i in 0..n_items {
        for j in i + 1..n_items {
            if rng.random_bool(0.5) {
                pairs.push(PairRecord {
                    pair_id: format!("p{i}-{j}"),
                    item1_id: items[i].clone(),
                    item2_id: items[j].clone(),
                });
            }
        }
    }
    if pairs.is_empty() {
        pairs.push(PairRecord {
            pair_id: "p0-1".into(),
            item1_id: items[0].clone(),
            item2_id: items[1].clone(),
        });
    }
    let mut scored = Vec::new();
    let mut tails = BTreeSet::new();
    for _ in 0..rng.random_range(0..12) {
        let pair = pairs.choose(rng).unwrap();
        let rel = *Relation::ALL.choose(rng).unwrap();
        let tail = format!("{} {}", WORDS.choose(rng).unwrap(), WORDS.choose(rng).unwrap());
        tails.insert(tail.clone());
        scored.push(ScoredAssertion {
            assertion: Assertion::new(&pair.pair_id, rel, &tail, &tail),
            plausibility: rng.random_range(0.0..1.0),
            typicality: rng.random_range(0.0..1.0),
        });
    }
    let mut abstracts = Vec::new();
    for tail in &tails {
        if rng.random_bool(0.5) {
            let tid = intention_id(tail);
            let k = rng.random_range(1..=3);
            for c in CONCEPTS.iter().take(k) {
                abstracts.push(AbstractIntention {
                    node_id: abstract_node_id(&tid, c),
                    source_tail_id: tid.clone(),
                    concept: c.to_string(),
                    weight: 1.0 / k as f64,
                    abstract_tail: format!("{tail} {c}"),
                });
            }
        }
    }
    KgFixture {
        scored,
        pairs,
        abstracts,
    }
}

// ---------------------------------------------------------------------------
// ratings

/// Planted-signal ratings: each item has a feature vector and its rating is
/// `3 + ⟨w*, f⟩` plus small noise, clamped to [1, 5]. Users carry no bias,
/// and each rates a random handful of items, so most items have few
/// ratings and their bias is hard to learn without the features.
pub struct PlantedRatings {
    pub interactions: Vec<Interaction>,
    pub features: std::collections::HashMap<String, Vec<f64>>,
}

pub fn planted_ratings(seed: u64, n_users: usize, n_items: usize, per_user: usize) -> PlantedRatings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let w: Vec<f64> = vec![0.9, -0.7, 0.5, 0.6];
    let mut features = std::collections::HashMap::new();
    let mut truth = Vec::new();
    for i in 0..n_items {
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: f64 = 3.0 + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        truth.push(r);
        features.insert(format!("i{i}"), f);
    }
    let mut interactions = Vec::new();
    for u in 0..n_users {
        let chosen = rand::seq::index::sample(&mut rng, n_items, per_user);
        for (k, i) in chosen.into_iter().enumerate() {
            let noise = rng.random_range(-0.05..0.05);
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("i{i}"),
                rating: (truth[i] + noise).clamp(1.0, 5.0),
                timestamp: k as i64,
            });
        }
    }
    PlantedRatings {
        interactions,
        features,
    }
}
