//! Vote bookkeeping, label derivation and inter-annotator agreement.
//!
//! Plausibility is a binary vote collected from three workers and resolved by
//! strict majority. Typicality is a four-point rating collected from five
//! workers and averaged. [`AnnotationStore`] is the transport-agnostic core of
//! the annotation service: it hands out question cards, validates and logs
//! votes, and exports labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generation::{naturalize, render_prompt, Assertion, Relation};
use crate::ingest::{CoBuyPair, Item};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Plausibility,
    Typicality,
}

impl Task {
    /// Votes wanted per assertion.
    pub fn target_votes(self) -> usize {
        match self {
            Task::Plausibility => 3,
            Task::Typicality => 5,
        }
    }

    /// Answer values accepted for the task.
    pub fn legal_values(self) -> &'static [f64] {
        match self {
            Task::Plausibility => &[1.0, 0.0],
            Task::Typicality => &[1.0, 0.5, 0.0, -1.0],
        }
    }

    pub fn is_legal(self, value: f64) -> bool {
        self.legal_values().contains(&value)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plausibility" => Ok(Task::Plausibility),
            "typicality" => Ok(Task::Typicality),
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlausibilityLabel {
    Plausible,
    Implausible,
}

/// Four-point typicality scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypicalityValue {
    Strong,
    Weak,
    Reject,
    Implausible,
}

impl TypicalityValue {
    pub fn value(self) -> f64 {
        match self {
            TypicalityValue::Strong => 1.0,
            TypicalityValue::Weak => 0.5,
            TypicalityValue::Reject => 0.0,
            TypicalityValue::Implausible => -1.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        [
            TypicalityValue::Strong,
            TypicalityValue::Weak,
            TypicalityValue::Reject,
            TypicalityValue::Implausible,
        ]
        .into_iter()
        .find(|t| t.value() == v)
    }

    fn category(self) -> usize {
        match self {
            TypicalityValue::Strong => 0,
            TypicalityValue::Weak => 1,
            TypicalityValue::Reject => 2,
            TypicalityValue::Implausible => 3,
        }
    }
}

/// Strict majority over binary votes (`true` = plausible). Even or empty
/// panels are refused; the caller must collect a tie-breaking vote.
pub fn majority_vote(votes: &[bool]) -> Result<PlausibilityLabel> {
    if votes.is_empty() || votes.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "majority vote needs an odd number of votes, got {}",
            votes.len()
        )));
    }
    let yes = votes.iter().filter(|v| **v).count();
    Ok(if yes * 2 > votes.len() {
        PlausibilityLabel::Plausible
    } else {
        PlausibilityLabel::Implausible
    })
}

/// Mean of the mapped ratings, in `[-1, 1]`.
pub fn typicality_score(ratings: &[TypicalityValue]) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::invalid("typicality score of zero ratings"));
    }
    Ok(ratings.iter().map(|r| r.value()).sum::<f64>() / ratings.len() as f64)
}

/// Fraction of unordered rater pairs that gave the same answer, pooled over
/// all items. Items with fewer than two votes contribute no pairs; with no
/// pairs at all the result is 0.
pub fn pairwise_agreement<T: Eq + std::hash::Hash>(votes_by_item: &[Vec<T>]) -> f64 {
    let mut agree = 0u64;
    let mut total = 0u64;
    for votes in votes_by_item {
        let n = votes.len() as u64;
        if n < 2 {
            continue;
        }
        total += n * (n - 1) / 2;
        let mut counts: HashMap<&T, u64> = HashMap::new();
        for v in votes {
            *counts.entry(v).or_default() += 1;
        }
        agree += counts.values().map(|c| c * c.saturating_sub(1) / 2).sum::<u64>();
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

/// Fleiss' kappa over an items × categories count table in which every row
/// sums to the same number of raters `n >= 2`.
pub fn fleiss_kappa(matrix: &[Vec<usize>]) -> Result<f64> {
    let first = matrix
        .first()
        .ok_or_else(|| Error::invalid("fleiss kappa of an empty table"))?;
    let n: usize = first.iter().sum();
    let k = first.len();
    if n < 2 {
        return Err(Error::invalid("fleiss kappa needs at least two raters per item"));
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != k || row.iter().sum::<usize>() != n {
            return Err(Error::invalid(format!(
                "row {i} does not sum to {n} over {k} categories"
            )));
        }
    }
    let items = matrix.len() as f64;
    let nf = n as f64;
    let p_bar = matrix
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (sq - nf) / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = matrix.iter().map(|row| row[j] as f64).sum::<f64>() / (items * nf);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        // every rating fell into one category, so observed agreement is total
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pairwise_agreement: f64,
    pub fleiss_kappa: f64,
    pub n_items: usize,
    pub n_raters: usize,
}

/// One line of `votes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub assertion_id: String,
    pub worker_id: String,
    pub task: Task,
    pub value: f64,
    #[serde(default)]
    pub timestamp: u64,
}

/// Display fields of one item on a question card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub title: String,
    pub category: String,
    pub url: String,
    pub image_urls: Vec<String>,
}

impl From<&Item> for ItemView {
    fn from(item: &Item) -> Self {
        ItemView {
            title: item.title.clone(),
            category: item.category.clone(),
            url: item.url.clone(),
            image_urls: item.image_urls.iter().take(3).cloned().collect(),
        }
    }
}

/// What a card is built from: the assertion in sentence form plus both items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardSource {
    pub assertion_id: String,
    pub relation: Relation,
    pub sentence: String,
    pub item1: ItemView,
    pub item2: ItemView,
}

impl CardSource {
    /// Card for an assertion about `pair`; the sentence is prompt plus tail.
    pub fn new(assertion: &Assertion, pair: &CoBuyPair) -> Self {
        let prompt = render_prompt(pair, assertion.relation);
        CardSource {
            assertion_id: assertion.assertion_id.clone(),
            relation: assertion.relation,
            sentence: naturalize(&prompt, &assertion.tail),
            item1: ItemView::from(&pair.item1),
            item2: ItemView::from(&pair.item2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionCard {
    pub assertion_id: String,
    pub task: Task,
    pub relation: Relation,
    pub sentence: String,
    pub item1: ItemView,
    pub item2: ItemView,
    pub legal_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    UnknownAssertion,
    IllegalValue,
    Duplicate,
    NotServed,
    Unqualified,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rejection::UnknownAssertion => "unknown assertion",
            Rejection::IllegalValue => "illegal value",
            Rejection::Duplicate => "duplicate",
            Rejection::NotServed => "not served",
            Rejection::Unqualified => "unqualified worker",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub assertions: usize,
    pub complete: usize,
    pub votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub plausibility: TaskProgress,
    pub typicality: TaskProgress,
}

/// Row of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub assertion_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plausibility_label: Option<PlausibilityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typicality_score: Option<f64>,
}

#[derive(Debug, Default)]
struct TaskState {
    pool: Vec<String>,
    in_pool: HashSet<String>,
    votes: HashMap<String, Vec<VoteRecord>>,
    served: HashMap<String, HashSet<String>>,
}

/// Annotation state: task pools, served cards and the append-only vote log.
#[derive(Debug)]
pub struct AnnotationStore {
    cards: HashMap<String, CardSource>,
    tasks: BTreeMap<Task, TaskState>,
    workers: Option<HashSet<String>>,
    log: Option<(PathBuf, File)>,
    clock: u64,
}

impl AnnotationStore {
    /// In-memory store. `plausibility` and `typicality` list assertion ids
    /// (in serving order) that must be present in `cards`.
    pub fn new(
        cards: Vec<CardSource>,
        plausibility: Vec<String>,
        typicality: Vec<String>,
    ) -> Result<Self> {
        let cards: HashMap<String, CardSource> =
            cards.into_iter().map(|c| (c.assertion_id.clone(), c)).collect();
        let mut tasks = BTreeMap::new();
        for (task, pool) in [(Task::Plausibility, plausibility), (Task::Typicality, typicality)] {
            let mut state = TaskState::default();
            for id in pool {
                if !cards.contains_key(&id) {
                    return Err(Error::Reference(format!("pool id {id} has no card")));
                }
                if state.in_pool.insert(id.clone()) {
                    state.pool.push(id);
                }
            }
            tasks.insert(task, state);
        }
        Ok(AnnotationStore {
            cards,
            tasks,
            workers: None,
            log: None,
            clock: 0,
        })
    }

    /// Restricts voting to the given qualified workers.
    pub fn with_workers(mut self, workers: impl IntoIterator<Item = String>) -> Self {
        self.workers = Some(workers.into_iter().collect());
        self
    }

    /// Replays an existing vote log (if present) and appends new votes to it.
    /// Replayed votes count as served.
    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            for rec in crate::jsonl::read_lenient::<VoteRecord>(path)?.records {
                self.clock = self.clock.max(rec.timestamp);
                if let Err(why) = self.check(&rec) {
                    log::warn!(
                        "replay: ignoring vote {}/{}: {why}",
                        rec.assertion_id,
                        rec.worker_id
                    );
                    continue;
                }
                self.apply(rec);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some((path.to_path_buf(), file));
        Ok(self)
    }

    fn qualified(&self, worker: &str) -> bool {
        self.workers.as_ref().is_none_or(|w| w.contains(worker))
    }

    /// Up to `n` cards the worker has neither voted on nor been served,
    /// skipping assertions that already reached their vote target. Cards with
    /// the fewest votes come first; ties keep pool order.
    pub fn batch(&mut self, task: Task, n: usize, worker: &str) -> Result<Vec<QuestionCard>, Rejection> {
        if !self.qualified(worker) {
            return Err(Rejection::Unqualified);
        }
        let state = self.tasks.get_mut(&task).expect("every task has state");
        let served = state.served.entry(worker.to_string()).or_default();
        let mut candidates: Vec<(usize, usize, &String)> = state
            .pool
            .iter()
            .enumerate()
            .filter(|(_, id)| !served.contains(*id))
            .map(|(pos, id)| (state.votes.get(id).map_or(0, Vec::len), pos, id))
            .filter(|(count, _, _)| *count < task.target_votes())
            .collect();
        candidates.sort();
        let picked: Vec<String> = candidates.into_iter().take(n).map(|(_, _, id)| id.clone()).collect();
        served.extend(picked.iter().cloned());
        Ok(picked
            .into_iter()
            .map(|id| {
                let src = &self.cards[&id];
                QuestionCard {
                    assertion_id: id,
                    task,
                    relation: src.relation,
                    sentence: src.sentence.clone(),
                    item1: src.item1.clone(),
                    item2: src.item2.clone(),
                    legal_values: task.legal_values().to_vec(),
                }
            })
            .collect())
    }

    fn check(&self, rec: &VoteRecord) -> Result<(), Rejection> {
        if !self.qualified(&rec.worker_id) {
            return Err(Rejection::Unqualified);
        }
        let state = &self.tasks[&rec.task];
        if !state.in_pool.contains(&rec.assertion_id) {
            return Err(Rejection::UnknownAssertion);
        }
        if !rec.task.is_legal(rec.value) {
            return Err(Rejection::IllegalValue);
        }
        if state
            .votes
            .get(&rec.assertion_id)
            .is_some_and(|v| v.iter().any(|r| r.worker_id == rec.worker_id))
        {
            return Err(Rejection::Duplicate);
        }
        Ok(())
    }

    fn apply(&mut self, rec: VoteRecord) {
        let state = self.tasks.get_mut(&rec.task).expect("every task has state");
        state
            .served
            .entry(rec.worker_id.clone())
            .or_default()
            .insert(rec.assertion_id.clone());
        state.votes.entry(rec.assertion_id.clone()).or_default().push(rec);
    }

    /// Validates and durably records a vote. The log line is written and
    /// synced before the in-memory state changes.
    pub fn vote(
        &mut self,
        assertion_id: &str,
        worker_id: &str,
        task: Task,
        value: f64,
    ) -> Result<Result<(), Rejection>> {
        self.clock += 1;
        let rec = VoteRecord {
            assertion_id: assertion_id.to_string(),
            worker_id: worker_id.to_string(),
            task,
            value,
            timestamp: self.clock,
        };
        if let Err(why) = self.check(&rec) {
            return Ok(Err(why));
        }
        let served = self.tasks[&task]
            .served
            .get(worker_id)
            .is_some_and(|s| s.contains(assertion_id));
        if !served {
            return Ok(Err(Rejection::NotServed));
        }
        if let Some((path, file)) = self.log.as_mut() {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(path.clone(), e))?;
            file.sync_data().map_err(|e| Error::io(path.clone(), e))?;
        }
        self.apply(rec);
        Ok(Ok(()))
    }

    pub fn progress(&self) -> Progress {
        let summarize = |task: Task| {
            let state = &self.tasks[&task];
            TaskProgress {
                assertions: state.pool.len(),
                complete: state
                    .pool
                    .iter()
                    .filter(|id| state.votes.get(*id).map_or(0, Vec::len) >= task.target_votes())
                    .count(),
                votes: state.votes.values().map(Vec::len).sum(),
            }
        };
        Progress {
            plausibility: summarize(Task::Plausibility),
            typicality: summarize(Task::Typicality),
        }
    }

    /// Every accepted vote, ordered by timestamp.
    pub fn votes(&self) -> Vec<VoteRecord> {
        let mut all: Vec<VoteRecord> = self
            .tasks
            .values()
            .flat_map(|s| s.votes.values().flatten().cloned())
            .collect();
        all.sort_by_key(|v| v.timestamp);
        all
    }

    pub fn labels(&self) -> Vec<LabelRecord> {
        labels_from_votes(&self.votes())
    }

    pub fn agreement(&self, task: Task) -> Option<AgreementReport> {
        agreement_from_votes(&self.votes(), task)
    }
}

fn group_votes(votes: &[VoteRecord], task: Task) -> BTreeMap<&str, Vec<f64>> {
    let mut by_item: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for v in votes.iter().filter(|v| v.task == task) {
        by_item.entry(v.assertion_id.as_str()).or_default().push(v.value);
    }
    by_item
}

/// Labels for every assertion that reached its full vote complement: the
/// plausibility majority (three votes) and the typicality mean (five ratings).
pub fn labels_from_votes(votes: &[VoteRecord]) -> Vec<LabelRecord> {
    let mut out: BTreeMap<&str, LabelRecord> = BTreeMap::new();
    for (id, vals) in group_votes(votes, Task::Plausibility) {
        if vals.len() < Task::Plausibility.target_votes() {
            continue;
        }
        let bools: Vec<bool> = vals.iter().map(|v| *v == 1.0).collect();
        if let Ok(label) = majority_vote(&bools) {
            out.entry(id)
                .or_insert_with(|| LabelRecord {
                    assertion_id: id.to_string(),
                    plausibility_label: None,
                    typicality_score: None,
                })
                .plausibility_label = Some(label);
        }
    }
    for (id, vals) in group_votes(votes, Task::Typicality) {
        if vals.len() < Task::Typicality.target_votes() {
            continue;
        }
        let ratings: Vec<TypicalityValue> =
            vals.iter().filter_map(|v| TypicalityValue::from_value(*v)).collect();
        if let Ok(score) = typicality_score(&ratings) {
            out.entry(id)
                .or_insert_with(|| LabelRecord {
                    assertion_id: id.to_string(),
                    plausibility_label: None,
                    typicality_score: None,
                })
                .typicality_score = Some(score);
        }
    }
    out.into_values().collect()
}

/// Agreement over items that have exactly the task's full rater complement.
pub fn agreement_from_votes(votes: &[VoteRecord], task: Task) -> Option<AgreementReport> {
    let n = task.target_votes();
    let categories = task.legal_values();
    let complete: Vec<Vec<usize>> = group_votes(votes, task)
        .into_values()
        .filter(|v| v.len() == n)
        .map(|vals| {
            vals.iter()
                .map(|v| categories.iter().position(|c| c == v).unwrap_or(0))
                .collect()
        })
        .collect();
    if complete.is_empty() {
        return None;
    }
    let matrix: Vec<Vec<usize>> = complete
        .iter()
        .map(|cats| {
            let mut row = vec![0; categories.len()];
            for &c in cats {
                row[c] += 1;
            }
            row
        })
        .collect();
    Some(AgreementReport {
        pairwise_agreement: pairwise_agreement(&complete),
        fleiss_kappa: fleiss_kappa(&matrix).ok()?,
        n_items: complete.len(),
        n_raters: n,
    })
}

/// Category index of a typicality rating in the kappa table.
pub fn typicality_category(v: TypicalityValue) -> usize {
    v.category()
}

/// Sample of up to `n` assertions spread evenly across relations: groups are
/// shuffled with `seed` and drained round-robin in relation order.
pub fn stratified_by_relation(assertions: &[Assertion], n: usize, seed: u64) -> Vec<Assertion> {
    let mut groups: BTreeMap<Relation, Vec<&Assertion>> = BTreeMap::new();
    for a in assertions {
        groups.entry(a.relation).or_default().push(a);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in groups.values_mut() {
        g.shuffle(&mut rng);
    }
    let mut iters: Vec<_> = groups.into_values().map(|g| g.into_iter()).collect();
    let mut out = Vec::with_capacity(n.min(assertions.len()));
    while out.len() < n {
        let mut progressed = false;
        for it in iters.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(a) = it.next() {
                out.push(a.clone());
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}
