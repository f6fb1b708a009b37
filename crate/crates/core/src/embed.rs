//! Pair-head translational embedding.
//!
//! A triple ((p1, p2), r, e) is scored by the distance between the head
//! `(p1 + p2) / 2 + r` and the tail `e`. Training minimizes the margin loss
//!
//! ```text
//! max(0, γ + ‖(p1 + p2)/2 + r − e‖ − ‖(p1' + p2')/2 + r − e‖)
//! ```
//!
//! where (p1', p2') is the head pair with one item replaced at random. The
//! trained item vectors are the downstream features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::digest_hex;
use crate::jsonl;
use crate::kgstore::{EdgeKind, KnowledgeGraph};
use crate::text::content_tokens;
use crate::{Error, Result};

pub type Vector = Vec<f64>;

fn check_dims(expected: usize, vs: &[&[f64]]) -> Result<()> {
    for v in vs {
        if v.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: v.len(),
            });
        }
    }
    Ok(())
}

/// `(a + b) / 2 + r − e`
fn residual(a: &[f64], b: &[f64], r: &[f64], e: &[f64]) -> Vector {
    (0..a.len()).map(|k| 0.5 * (a[k] + b[k]) + r[k] - e[k]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Margin loss for one positive head pair `(p1, p2)` against a corrupted
/// pair `(n1, n2)` sharing relation `r` and tail `e`.
pub fn triple_loss(
    p1: &[f64],
    p2: &[f64],
    r: &[f64],
    e: &[f64],
    n1: &[f64],
    n2: &[f64],
    margin: f64,
) -> Result<f64> {
    check_dims(p1.len(), &[p2, r, e, n1, n2])?;
    let pos = norm(&residual(p1, p2, r, e));
    let neg = norm(&residual(n1, n2, r, e));
    Ok((margin + pos - neg).max(0.0))
}

/// Gradient of [`triple_loss`] with respect to each argument.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleGrad {
    pub p1: Vector,
    pub p2: Vector,
    pub r: Vector,
    pub e: Vector,
    pub n1: Vector,
    pub n2: Vector,
}

/// Loss and its gradient. At zero loss the gradient is zero; at a zero
/// distance the distance term contributes a zero subgradient.
pub fn triple_loss_grad(
    p1: &[f64],
    p2: &[f64],
    r: &[f64],
    e: &[f64],
    n1: &[f64],
    n2: &[f64],
    margin: f64,
) -> Result<(f64, TripleGrad)> {
    check_dims(p1.len(), &[p2, r, e, n1, n2])?;
    let d = p1.len();
    let h = residual(p1, p2, r, e);
    let hn = residual(n1, n2, r, e);
    let (a, b) = (norm(&h), norm(&hn));
    let loss = (margin + a - b).max(0.0);
    let zero = vec![0.0; d];
    if loss == 0.0 {
        let g = TripleGrad {
            p1: zero.clone(),
            p2: zero.clone(),
            r: zero.clone(),
            e: zero.clone(),
            n1: zero.clone(),
            n2: zero,
        };
        return Ok((0.0, g));
    }
    let unit = |v: &[f64], len: f64| -> Vector {
        if len > 0.0 {
            v.iter().map(|x| x / len).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let u = unit(&h, a);
    let un = unit(&hn, b);
    let half = |v: &[f64], s: f64| -> Vector { v.iter().map(|x| 0.5 * s * x).collect() };
    let r_grad: Vector = (0..d).map(|k| u[k] - un[k]).collect();
    Ok((
        loss,
        TripleGrad {
            p1: half(&u, 1.0),
            p2: half(&u, 1.0),
            e: r_grad.iter().map(|x| -x).collect(),
            r: r_grad,
            n1: half(&un, -1.0),
            n2: half(&un, -1.0),
        },
    ))
}

/// Index-encoded training triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: (usize, usize),
    pub relation: usize,
    pub tail: usize,
}

/// Vocabularies plus triples over them. Every vocabulary is sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub items: Vec<String>,
    pub relations: Vec<String>,
    pub tails: Vec<String>,
    pub triples: Vec<Triple>,
}

impl TrainingSet {
    /// Builds the set from `(item1, item2, relation, tail)` string tuples.
    pub fn from_tuples<'a>(tuples: impl IntoIterator<Item = (&'a str, &'a str, &'a str, &'a str)>) -> Self {
        let tuples: BTreeSet<(&str, &str, &str, &str)> = tuples.into_iter().collect();
        let index = |xs: BTreeSet<&str>| -> (Vec<String>, HashMap<String, usize>) {
            let v: Vec<String> = xs.into_iter().map(str::to_string).collect();
            let m = v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
            (v, m)
        };
        let (items, item_ix) = index(tuples.iter().flat_map(|t| [t.0, t.1]).collect());
        let (relations, rel_ix) = index(tuples.iter().map(|t| t.2).collect());
        let (tails, tail_ix) = index(tuples.iter().map(|t| t.3).collect());
        let triples = tuples
            .iter()
            .map(|t| Triple {
                head: (item_ix[t.0], item_ix[t.1]),
                relation: rel_ix[t.2],
                tail: tail_ix[t.3],
            })
            .collect();
        TrainingSet {
            items,
            relations,
            tails,
            triples,
        }
    }

    /// One triple per `ASSERT` edge; tails are intention node ids.
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let edges: Vec<_> = kg.edges_of(EdgeKind::Assert).collect();
        Self::from_tuples(edges.iter().filter_map(|e| {
            let rel = e.relation?.name();
            match e.src.as_slice() {
                [a, b] => Some((a.as_str(), b.as_str(), rel, e.dst.as_str())),
                _ => None,
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
    /// With initial tail vectors: whether they are fine-tuned (at a tenth of
    /// the learning rate) or frozen. Randomly initialized tails always train
    /// at the full rate.
    pub tails_trainable: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            margin: 1.0,
            lr: 0.01,
            epochs: 100,
            negatives: 1,
            seed: 0,
            tails_trainable: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::invalid("margin must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.negatives == 0 {
            return Err(Error::invalid("need at least one negative per positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub items: BTreeMap<String, Vector>,
    pub relations: BTreeMap<String, Vector>,
    pub tails: BTreeMap<String, Vector>,
}

impl EmbeddingTable {
    pub fn empty(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            items: BTreeMap::new(),
            relations: BTreeMap::new(),
            tails: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.items
            .values()
            .chain(self.relations.values())
            .chain(self.tails.values())
            .flatten()
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub table: EmbeddingTable,
    /// Mean loss over the sampled (positive, negative) steps of each epoch,
    /// measured before each update.
    pub epoch_losses: Vec<f64>,
    /// Mean loss after each epoch over a fixed probe set of corrupted
    /// triples. On small sets the probes are every corruption, making this
    /// the exact expected loss under the negative sampler.
    pub probe_losses: Vec<f64>,
}

const PROBE_TRIPLES: usize = 1024;
const PROBE_CORRUPTIONS: usize = 32;

/// Fixed (triple index, corrupted head) probes, drawn from their own stream
/// so they do not disturb training randomness.
fn probes(set: &TrainingSet, seed: u64) -> Vec<(usize, (usize, usize))> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = set.items.len();
    let triples: Vec<usize> = if set.triples.len() <= PROBE_TRIPLES {
        (0..set.triples.len()).collect()
    } else {
        let mut ix = rand::seq::index::sample(&mut rng, set.triples.len(), PROBE_TRIPLES).into_vec();
        ix.sort_unstable();
        ix
    };
    let mut out = Vec::new();
    for ti in triples {
        let head = set.triples[ti].head;
        if 2 * (n - 1) <= PROBE_CORRUPTIONS {
            for other in (0..n).filter(|&o| o != head.0) {
                out.push((ti, (other, head.1)));
            }
            for other in (0..n).filter(|&o| o != head.1) {
                out.push((ti, (head.0, other)));
            }
        } else {
            for _ in 0..PROBE_CORRUPTIONS {
                out.push((ti, corrupt(&mut rng, head, n)));
            }
        }
    }
    out
}

fn probe_loss(
    set: &TrainingSet,
    probes: &[(usize, (usize, usize))],
    items: &[Vector],
    rels: &[Vector],
    tails: &[Vector],
    margin: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for &(ti, (n1, n2)) in probes {
        let t = set.triples[ti];
        total += triple_loss(
            &items[t.head.0],
            &items[t.head.1],
            &rels[t.relation],
            &tails[t.tail],
            &items[n1],
            &items[n2],
            margin,
        )?;
    }
    Ok(if probes.is_empty() { 0.0 } else { total / probes.len() as f64 })
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vector> {
    let bound = 6.0 / (dim as f64).sqrt();
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..=bound)).collect())
        .collect()
}

fn project_unit_ball(vs: &mut [Vector]) {
    for v in vs {
        let n = norm(v);
        if n > 1.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn normalize_all(vs: &mut [Vector]) {
    for v in vs {
        let n = norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn step(v: &mut [f64], g: &[f64], lr: f64) {
    for (x, d) in v.iter_mut().zip(g) {
        *x -= lr * d;
    }
}

/// Replaces one head item (either position with probability ½) by a
/// different item drawn uniformly.
fn corrupt(rng: &mut ChaCha8Rng, head: (usize, usize), n_items: usize) -> (usize, usize) {
    let replace_first = rng.random_bool(0.5);
    let current = if replace_first { head.0 } else { head.1 };
    let mut other = rng.random_range(0..n_items - 1);
    if other >= current {
        other += 1;
    }
    if replace_first {
        (other, head.1)
    } else {
        (head.0, other)
    }
}

/// Trains the pair-head model by SGD. `tail_init` supplies starting tail
/// vectors and must cover every tail id. Deterministic for a given seed.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, tail_init: Option<&BTreeMap<String, Vector>>) -> Result<TrainReport> {
    cfg.validate()?;
    if set.triples.is_empty() {
        return Err(Error::invalid("no training triples"));
    }
    if set.items.len() < 2 {
        return Err(Error::invalid("negative sampling needs at least two items"));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = uniform_init(&mut rng, set.items.len(), d);
    project_unit_ball(&mut items);
    // relations start at unit length, as in standard translational models
    let mut rels = uniform_init(&mut rng, set.relations.len(), d);
    normalize_all(&mut rels);
    let (mut tails, tail_lr) = match tail_init {
        Some(init) => {
            let mut vs = Vec::with_capacity(set.tails.len());
            for id in &set.tails {
                let v = init
                    .get(id)
                    .ok_or_else(|| Error::Reference(format!("no initial vector for tail {id}")))?;
                check_dims(d, &[v])?;
                vs.push(v.clone());
            }
            (vs, if cfg.tails_trainable { cfg.lr * 0.1 } else { 0.0 })
        }
        None => {
            let mut vs = uniform_init(&mut rng, set.tails.len(), d);
            project_unit_ball(&mut vs);
            (vs, cfg.lr)
        }
    };

    let mut order: Vec<usize> = (0..set.triples.len()).collect();
    let probe_set = probes(set, cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut probe_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &ti in &order {
            let t = set.triples[ti];
            for _ in 0..cfg.negatives {
                let neg = corrupt(&mut rng, t.head, set.items.len());
                let (loss, g) = triple_loss_grad(
                    &items[t.head.0],
                    &items[t.head.1],
                    &rels[t.relation],
                    &tails[t.tail],
                    &items[neg.0],
                    &items[neg.1],
                    cfg.margin,
                )?;
                total += loss;
                if loss == 0.0 {
                    continue;
                }
                step(&mut items[t.head.0], &g.p1, cfg.lr);
                step(&mut items[t.head.1], &g.p2, cfg.lr);
                step(&mut items[neg.0], &g.n1, cfg.lr);
                step(&mut items[neg.1], &g.n2, cfg.lr);
                step(&mut rels[t.relation], &g.r, cfg.lr);
                step(&mut tails[t.tail], &g.e, tail_lr);
            }
        }
        project_unit_ball(&mut items);
        epoch_losses.push(total / (set.triples.len() * cfg.negatives) as f64);
        probe_losses.push(probe_loss(set, &probe_set, &items, &rels, &tails, cfg.margin)?);
    }

    let zip = |names: &[String], vs: Vec<Vector>| names.iter().cloned().zip(vs).collect();
    Ok(TrainReport {
        table: EmbeddingTable {
            dim: d,
            items: zip(&set.items, items),
            relations: zip(&set.relations, rels),
            tails: zip(&set.tails, tails),
        },
        epoch_losses,
        probe_losses,
    })
}

/// Mean loss over every corruption of every triple (both positions, every
/// replacement item): the expectation of the training loss under the
/// negative sampler. Quadratic in the item count; meant for small sets.
pub fn expected_loss(table: &EmbeddingTable, set: &TrainingSet, margin: f64) -> Result<f64> {
    let get = |m: &BTreeMap<String, Vector>, k: &str| -> Result<Vector> {
        m.get(k).cloned().ok_or_else(|| Error::Reference(format!("no vector for {k}")))
    };
    let n = set.items.len();
    if set.triples.is_empty() || n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in &set.triples {
        let p1 = get(&table.items, &set.items[t.head.0])?;
        let p2 = get(&table.items, &set.items[t.head.1])?;
        let r = get(&table.relations, &set.relations[t.relation])?;
        let e = get(&table.tails, &set.tails[t.tail])?;
        let mut sum = 0.0;
        for (pos, current) in [(0, t.head.0), (1, t.head.1)] {
            for other in (0..n).filter(|&o| o != current) {
                let o = get(&table.items, &set.items[other])?;
                let (n1, n2) = if pos == 0 { (&o, &p2) } else { (&p1, &o) };
                sum += triple_loss(&p1, &p2, &r, &e, n1, n2, margin)?;
            }
        }
        total += sum / (2 * (n - 1)) as f64;
    }
    Ok(total / set.triples.len() as f64)
}

/// Standard single-item translational model over co-buy edges, `h + r ≈ t`
/// with one shared relation. Negatives replace the head or the tail
/// (probability ½ each). Used for the structure-only feature baseline.
pub fn train_cobuy(edges: &[(String, String)], cfg: &TrainConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let names: BTreeSet<&str> = edges.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let names: Vec<String> = names.into_iter().map(str::to_string).collect();
    if edges.is_empty() || names.len() < 2 {
        return Err(Error::invalid("co-buy training needs at least one edge"));
    }
    let ix: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = edges.iter().map(|(a, b)| (ix[a.as_str()], ix[b.as_str()])).collect();
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = uniform_init(&mut rng, names.len(), d);
    project_unit_ball(&mut items);
    let mut rel = uniform_init(&mut rng, 1, d);
    normalize_all(&mut rel);
    let mut rel = rel.remove(0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &pi in &order {
            let (h, t) = pairs[pi];
            for _ in 0..cfg.negatives {
                let (nh, nt) = corrupt(&mut rng, (h, t), names.len());
                let pos: Vector = (0..d).map(|k| items[h][k] + rel[k] - items[t][k]).collect();
                let neg: Vector = (0..d).map(|k| items[nh][k] + rel[k] - items[nt][k]).collect();
                let (a, b) = (norm(&pos), norm(&neg));
                if cfg.margin + a - b <= 0.0 {
                    continue;
                }
                let u: Vector = pos.iter().map(|x| if a > 0.0 { x / a } else { 0.0 }).collect();
                let un: Vector = neg.iter().map(|x| if b > 0.0 { x / b } else { 0.0 }).collect();
                let neg_u: Vector = u.iter().map(|x| -x).collect();
                let neg_un: Vector = un.iter().map(|x| -x).collect();
                step(&mut items[h], &u, cfg.lr);
                step(&mut items[t], &neg_u, cfg.lr);
                step(&mut items[nh], &neg_un, cfg.lr);
                step(&mut items[nt], &un, cfg.lr);
                let dr: Vector = (0..d).map(|k| u[k] - un[k]).collect();
                step(&mut rel, &dr, cfg.lr);
            }
        }
        project_unit_ball(&mut items);
    }
    let mut table = EmbeddingTable::empty(d);
    table.items = names.into_iter().zip(items).collect();
    table.relations.insert("cobuy".to_string(), rel);
    Ok(table)
}

/// Writes `id \t x1 x2 …` lines sorted by id, after a `# dim=<d>` header.
pub fn write_vectors(path: &Path, dim: usize, vectors: &BTreeMap<String, Vector>) -> Result<()> {
    jsonl::write_atomic(path, |w| {
        writeln!(w, "# dim={dim}").map_err(|e| Error::io(path, e))?;
        for (id, v) in vectors {
            let nums: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{id}\t{}", nums.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

pub fn export_item_vectors(table: &EmbeddingTable, path: &Path) -> Result<()> {
    write_vectors(path, table.dim, &table.items)
}

/// Parses the vector text format. Blank lines and `#` lines are skipped;
/// every vector must have the same length.
pub fn parse_vectors(text: &str) -> Result<BTreeMap<String, Vector>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, nums) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("line {}: expected id<TAB>values", lineno + 1)))?;
        let v: Vector = nums
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) => check_dims(d, &[&v])?,
        }
        out.insert(id.to_string(), v);
    }
    Ok(out)
}

pub fn load_vectors(path: &Path) -> Result<BTreeMap<String, Vector>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Mean vector of the distinct tails joined to `item_id` by an `ASSERT`
/// edge; the zero vector when there are none.
pub fn avg_pool_tail_features(
    item_id: &str,
    kg: &KnowledgeGraph,
    tail_vectors: &BTreeMap<String, Vector>,
    dim: usize,
) -> Result<Vector> {
    let tails: BTreeSet<&str> = kg
        .edges_of(EdgeKind::Assert)
        .filter(|e| e.src.iter().any(|s| s == item_id))
        .map(|e| e.dst.as_str())
        .collect();
    let mut acc = vec![0.0; dim];
    for t in &tails {
        let v = tail_vectors
            .get(*t)
            .ok_or_else(|| Error::Reference(format!("no vector for tail {t}")))?;
        check_dims(dim, &[v])?;
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    if !tails.is_empty() {
        let n = tails.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// Bag-of-words text vector: content tokens hashed into `dim` signed
/// buckets, then L2-normalized. A self-contained stand-in when no
/// sentence-encoder vectors are supplied.
pub fn hashed_text_vector(text: &str, dim: usize) -> Vector {
    let mut v = vec![0.0; dim];
    for tok in content_tokens(text) {
        let h = digest_hex(&[&tok]);
        let bucket = u64::from_str_radix(&h[..15], 16).unwrap_or(0) as usize % dim;
        let sign = if u8::from_str_radix(&h[15..16], 16).unwrap_or(0).is_multiple_of(2) { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vectors_give_margin() {
        let z = [0.0; 3];
        assert_eq!(triple_loss(&z, &z, &z, &z, &z, &z, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn hand_example_is_zero() {
        let l = triple_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[0.5, 0.5], &[2.0, 2.0], &[2.0, 2.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
        let pos = norm(&residual(&[2.0, 2.0], &[2.0, 2.0], &[0.0, 0.0], &[0.5, 0.5]));
        assert!((pos - 4.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_negative_gives_margin() {
        let p = [0.3, -0.2];
        let q = [0.1, 0.4];
        let r = [0.2, 0.2];
        let e = [-0.5, 0.9];
        assert!((triple_loss(&p, &q, &r, &e, &p, &q, 2.5).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let err = triple_loss(&[0.0], &[0.0, 1.0], &[0.0], &[0.0], &[0.0], &[0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 1, actual: 2 }));
    }

    fn toy_set() -> TrainingSet {
        TrainingSet::from_tuples([
            ("a", "b", "UsedFor", "t1"),
            ("a", "c", "UsedFor", "t1"),
            ("b", "c", "HasA", "t2"),
        ])
    }

    #[test]
    fn lr_zero_keeps_initialization() {
        let cfg = TrainConfig {
            dim: 4,
            lr: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let trained = train(&toy_set(), &cfg, None).unwrap();
        let init = train(&toy_set(), &TrainConfig { epochs: 0, ..cfg }, None).unwrap();
        assert_eq!(trained.table, init.table);
    }

    #[test]
    fn items_stay_in_unit_ball() {
        let cfg = TrainConfig {
            dim: 8,
            lr: 0.5,
            epochs: 5,
            ..TrainConfig::default()
        };
        let t = train(&toy_set(), &cfg, None).unwrap().table;
        assert!(t.items.values().all(|v| norm(v) <= 1.0 + 1e-12));
        assert!(t.is_finite());
    }

    #[test]
    fn tail_init_must_cover() {
        let mut init = BTreeMap::new();
        init.insert("t1".to_string(), vec![0.0; 4]);
        let cfg = TrainConfig { dim: 4, ..TrainConfig::default() };
        assert!(matches!(train(&toy_set(), &cfg, Some(&init)), Err(Error::Reference(_))));
        init.insert("t2".to_string(), vec![0.0; 4]);
        let frozen = TrainConfig { tails_trainable: false, epochs: 5, ..cfg };
        let t = train(&toy_set(), &frozen, Some(&init)).unwrap().table;
        assert_eq!(t.tails["t1"], vec![0.0; 4]);
    }

    #[test]
    fn vector_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsv");
        let mut vs = BTreeMap::new();
        vs.insert("x".to_string(), vec![0.1, -2.5e-7]);
        vs.insert("a".to_string(), vec![1.0 / 3.0, 7.0]);
        write_vectors(&path, 2, &vs).unwrap();
        assert_eq!(load_vectors(&path).unwrap(), vs);
        write_vectors(&path, 2, &BTreeMap::new()).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "# dim=2\n");
    }

    #[test]
    fn ragged_vectors_rejected() {
        assert!(parse_vectors("a\t1 2\nb\t1\n").is_err());
    }

    #[test]
    fn hashed_vectors_are_unit_or_zero() {
        let v = hashed_text_vector("keep the baby warm", 16);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        assert_eq!(hashed_text_vector("the of", 16), vec![0.0; 16]);
    }

    #[test]
    fn cobuy_training_runs() {
        let edges = vec![("a".to_string(), "b".to_string()), ("b".to_string(), "c".to_string())];
        let cfg = TrainConfig { dim: 4, epochs: 10, ..TrainConfig::default() };
        let t = train_cobuy(&edges, &cfg).unwrap();
        assert_eq!(t.items.len(), 3);
        assert_eq!(t, train_cobuy(&edges, &cfg).unwrap());
    }
}
