//! Population: training files from annotations, scorer ingestion, threshold
//! filtering and corpus-quality metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::annotation::{LabelRecord, PlausibilityLabel, Task};
use crate::generation::Assertion;
use crate::ingest::CoBuyPair;
use crate::service::{self, RetryPolicy};
use crate::text::content_tokens;
use crate::{Error, Result};

/// Annotated typicality above this is a positive training example.
pub const TYPICALITY_POSITIVE: f64 = 0.8;
/// Annotated typicality below this is a negative training example.
pub const TYPICALITY_NEGATIVE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAssertion {
    #[serde(flatten)]
    pub assertion: Assertion,
    pub plausibility: f64,
    pub typicality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub assertion_id: String,
    pub text: String,
    pub label: Polarity,
    pub task: Task,
}

/// Binary training examples for one task. Plausibility uses the majority
/// label; typicality keeps only clear cases (above 0.8 or below 0.2).
/// Labels whose assertion has no text in `texts` are skipped.
pub fn derive_training_labels(
    task: Task,
    labels: &[LabelRecord],
    texts: &HashMap<String, String>,
) -> Vec<LabeledExample> {
    labels
        .iter()
        .filter_map(|l| {
            let label = match task {
                Task::Plausibility => match l.plausibility_label? {
                    PlausibilityLabel::Plausible => Polarity::Positive,
                    PlausibilityLabel::Implausible => Polarity::Negative,
                },
                Task::Typicality => {
                    let s = l.typicality_score?;
                    if s > TYPICALITY_POSITIVE {
                        Polarity::Positive
                    } else if s < TYPICALITY_NEGATIVE {
                        Polarity::Negative
                    } else {
                        return None;
                    }
                }
            };
            let text = texts.get(&l.assertion_id)?;
            Some(LabeledExample {
                assertion_id: l.assertion_id.clone(),
                text: text.clone(),
                label,
                task,
            })
        })
        .collect()
}

/// Seeded split stratified by label. The training set gets
/// `round(len * ratio)` examples; the smaller class contributes
/// `floor(class_len * ratio)` of them and the larger class the rest.
pub fn split_train_dev(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<&LabeledExample> = examples.iter().filter(|e| e.label == Polarity::Positive).collect();
    let mut neg: Vec<&LabeledExample> = examples.iter().filter(|e| e.label == Polarity::Negative).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let total_train = ((examples.len() as f64) * ratio).round() as usize;
    // ties treat negatives as the minority class
    let (minority, majority) = if pos.len() < neg.len() { (&pos, &neg) } else { (&neg, &pos) };
    let minority_train = ((minority.len() as f64) * ratio).floor() as usize;
    let majority_train = total_train.saturating_sub(minority_train).min(majority.len());

    let mut train = Vec::with_capacity(total_train);
    let mut dev = Vec::new();
    for (group, k) in [(minority, minority_train), (majority, majority_train)] {
        train.extend(group[..k].iter().map(|e| (*e).clone()));
        dev.extend(group[k..].iter().map(|e| (*e).clone()));
    }
    (train, dev)
}

/// Writes `text \t label` lines (1 = positive).
pub fn write_training_tsv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut body = String::new();
    for e in examples {
        let text = e.text.replace(['\t', '\n'], " ");
        let label = if e.label == Polarity::Positive { 1 } else { 0 };
        body.push_str(&format!("{text}\t{label}\n"));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn score_value<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Label(bool),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Num(x) => x,
        Raw::Label(b) => {
            if b {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Row of `scores.jsonl`. Boolean labels are read as 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub assertion_id: String,
    #[serde(deserialize_with = "score_value")]
    pub plausibility: f64,
    #[serde(deserialize_with = "score_value")]
    pub typicality: f64,
}

/// Source of (plausibility, typicality) scores. Returns one entry per input,
/// `None` where the scorer has nothing for that assertion.
pub trait Scorer: Sync {
    fn score(&self, batch: &[(&Assertion, &str)]) -> Result<Vec<Option<(f64, f64)>>>;
}

/// Scores looked up by assertion id.
pub struct FileScorer {
    scores: HashMap<String, (f64, f64)>,
}

impl FileScorer {
    pub fn new(records: impl IntoIterator<Item = ScoreRecord>) -> Self {
        FileScorer {
            scores: records
                .into_iter()
                .map(|r| (r.assertion_id, (r.plausibility, r.typicality)))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(crate::jsonl::read_strict::<ScoreRecord>(path)?))
    }
}

impl Scorer for FileScorer {
    fn score(&self, batch: &[(&Assertion, &str)]) -> Result<Vec<Option<(f64, f64)>>> {
        Ok(batch
            .iter()
            .map(|(a, _)| self.scores.get(&a.assertion_id).copied())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub plausibility: Vec<f64>,
    pub typicality: Vec<f64>,
}

/// Client for `POST {endpoint}/v1/score`.
pub struct HttpScorer {
    agent: ureq::Agent,
    url: String,
    retry: RetryPolicy,
}

impl HttpScorer {
    pub fn new(endpoint: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        HttpScorer {
            agent: service::agent(timeout),
            url: service::join_url(endpoint, "v1/score"),
            retry,
        }
    }
}

impl Scorer for HttpScorer {
    fn score(&self, batch: &[(&Assertion, &str)]) -> Result<Vec<Option<(f64, f64)>>> {
        let req = ScoreRequest {
            texts: batch.iter().map(|(_, t)| t.to_string()).collect(),
        };
        let resp: ScoreResponse = self
            .retry
            .run("score", || service::post_json(&self.agent, &self.url, &req))?;
        if resp.plausibility.len() != batch.len() || resp.typicality.len() != batch.len() {
            return Err(Error::Service(format!(
                "scorer returned {}/{} scores for {} texts",
                resp.plausibility.len(),
                resp.typicality.len(),
                batch.len()
            )));
        }
        Ok(resp
            .plausibility
            .into_iter()
            .zip(resp.typicality)
            .map(Some)
            .collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScoringOutcome {
    pub scored: Vec<ScoredAssertion>,
    /// Assertion ids the scorer had no scores for.
    pub missing: Vec<String>,
}

/// Attaches scores to every assertion, in batches of `batch_size`. Scorer
/// failures abort; assertions without scores are dropped and reported.
/// `texts` supplies the naturalized sentence sent to the scorer.
pub fn score_assertions(
    scorer: &dyn Scorer,
    assertions: &[Assertion],
    texts: &HashMap<String, String>,
    batch_size: usize,
) -> Result<ScoringOutcome> {
    let mut out = ScoringOutcome::default();
    for chunk in assertions.chunks(batch_size.max(1)) {
        let batch: Vec<(&Assertion, &str)> = chunk
            .iter()
            .map(|a| (a, texts.get(&a.assertion_id).map_or(a.tail.as_str(), String::as_str)))
            .collect();
        let scores = scorer.score(&batch)?;
        for (a, s) in chunk.iter().zip(scores) {
            match s {
                Some((p, t)) if p.is_finite() && t.is_finite() => out.scored.push(ScoredAssertion {
                    assertion: a.clone(),
                    plausibility: p,
                    typicality: t,
                }),
                _ => out.missing.push(a.assertion_id.clone()),
            }
        }
    }
    if !out.missing.is_empty() {
        log::warn!("{} assertions had no scores and were dropped", out.missing.len());
    }
    Ok(out)
}

/// Keeps assertions with plausibility strictly above `plau_t` and, when
/// given, typicality strictly above `typ_t`.
pub fn filter_by_threshold(
    scored: &[ScoredAssertion],
    plau_t: f64,
    typ_t: Option<f64>,
) -> Vec<ScoredAssertion> {
    scored
        .iter()
        .filter(|s| s.plausibility > plau_t && typ_t.is_none_or(|t| s.typicality > t))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Cut points reported alongside the data-driven thresholds.
pub const PR_CUT_POINTS: [f64; 4] = [0.5, 0.7, 0.8, 0.9];

/// Precision/recall with "predicted positive" meaning `score >= threshold`.
/// Thresholds are the distinct prediction values plus those cut points lying
/// strictly above the smallest and at most the largest prediction, so every
/// point has at least one predicted positive. Sorted by threshold.
pub fn pr_curve(predictions: &[f64], gold: &[bool]) -> Result<Vec<PrPoint>> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid("predictions and gold differ in length"));
    }
    if predictions.is_empty() {
        return Ok(Vec::new());
    }
    let lo = predictions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = predictions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut thresholds: Vec<f64> = predictions.to_vec();
    thresholds.extend(PR_CUT_POINTS.iter().copied().filter(|&t| t > lo && t <= hi));
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();

    // sort by score descending so each threshold is a prefix
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].total_cmp(&predictions[a]));
    let positives = gold.iter().filter(|g| **g).count();

    let mut points = Vec::with_capacity(thresholds.len());
    let mut idx = 0;
    let mut tp = 0usize;
    for &t in thresholds.iter().rev() {
        while idx < order.len() && predictions[order[idx]] >= t {
            if gold[order[idx]] {
                tp += 1;
            }
            idx += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / idx as f64,
            recall: if positives == 0 { 0.0 } else { tp as f64 / positives as f64 },
        });
    }
    points.reverse();
    Ok(points)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size >= 2"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("spearman is undefined for constant ranks"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Whether a tail says something beyond its pair's titles: some content
/// token of the tail is absent from both titles.
pub fn is_novel(tail: &str, pair: &CoBuyPair) -> bool {
    let title_tokens: BTreeSet<String> = content_tokens(&pair.item1.title)
        .into_iter()
        .chain(content_tokens(&pair.item2.title))
        .collect();
    content_tokens(tail).iter().any(|t| !title_tokens.contains(t))
}

/// Fraction of assertions whose tail is novel with respect to the pair's
/// titles. Assertions whose pair is unknown are ignored.
pub fn novelty_ratio(scored: &[ScoredAssertion], pairs: &HashMap<String, CoBuyPair>) -> f64 {
    let mut total = 0usize;
    let mut novel = 0usize;
    for s in scored {
        if let Some(pair) = pairs.get(&s.assertion.pair_id) {
            total += 1;
            if is_novel(&s.assertion.tail, pair) {
                novel += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        novel as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// Share of annotated assertions above the threshold whose majority label is plausible.
    pub accept_rate: Option<f64>,
    pub size: usize,
}

/// Acceptance accounting across plausibility cut-offs.
pub fn acceptance_by_threshold(
    scored: &[ScoredAssertion],
    labels: &[LabelRecord],
    thresholds: &[f64],
) -> Vec<ThresholdRow> {
    let gold: HashMap<&str, PlausibilityLabel> = labels
        .iter()
        .filter_map(|l| Some((l.assertion_id.as_str(), l.plausibility_label?)))
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let kept = filter_by_threshold(scored, t, None);
            let judged: Vec<PlausibilityLabel> = kept
                .iter()
                .filter_map(|s| gold.get(s.assertion.assertion_id.as_str()).copied())
                .collect();
            let accept_rate = (!judged.is_empty()).then(|| {
                judged.iter().filter(|l| **l == PlausibilityLabel::Plausible).count() as f64
                    / judged.len() as f64
            });
            ThresholdRow {
                threshold: t,
                accept_rate,
                size: kept.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcategoryTails {
    pub subcategories: (String, String),
    pub pairs: usize,
    /// Tails shared by at least two pairs of this subcategory pair, most frequent first.
    pub common_tails: Vec<(String, usize)>,
}

fn leaf_subcategory(item: &crate::ingest::Item) -> String {
    item.subcategory_path
        .last()
        .cloned()
        .unwrap_or_else(|| item.category.clone())
}

/// Groups typical assertions by the unordered pair of leaf subcategories of
/// their items and lists tails recurring across different pairs.
pub fn subcategory_common_tails(
    scored: &[ScoredAssertion],
    pairs: &HashMap<String, CoBuyPair>,
    min_typicality: f64,
    top_n: usize,
) -> Vec<SubcategoryTails> {
    // per subcategory pair: the pairs seen, and the pairs behind each tail
    type Group<'a> = (BTreeSet<&'a str>, BTreeMap<&'a str, BTreeSet<&'a str>>);
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for s in scored.iter().filter(|s| s.typicality > min_typicality) {
        let Some(pair) = pairs.get(&s.assertion.pair_id) else { continue };
        let (a, b) = (leaf_subcategory(&pair.item1), leaf_subcategory(&pair.item2));
        let key = if a <= b { (a, b) } else { (b, a) };
        let entry = groups.entry(key).or_default();
        entry.0.insert(pair.pair_id.as_str());
        entry
            .1
            .entry(s.assertion.tail.as_str())
            .or_default()
            .insert(pair.pair_id.as_str());
    }
    groups
        .into_iter()
        .map(|(subcategories, (pair_ids, tails))| {
            let mut common: Vec<(String, usize)> = tails
                .into_iter()
                .filter(|(_, p)| p.len() >= 2)
                .map(|(t, p)| (t.to_string(), p.len()))
                .collect();
            common.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            common.truncate(top_n);
            SubcategoryTails {
                subcategories,
                pairs: pair_ids.len(),
                common_tails: common,
            }
        })
        .collect()
}
