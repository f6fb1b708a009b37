//! Relation prompts, the text-generation client and post-processing of raw
//! continuations into assertion tails.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ids::short_id;
use crate::ingest::CoBuyPair;
use crate::service::{self, RetryPolicy};
use crate::text::normalize_ws;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationGroup {
    Open,
    Item,
    Function,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Open,
    HasA,
    HasProperty,
    RelatedTo,
    SimilarTo,
    PartOf,
    IsA,
    MadeOf,
    CreatedBy,
    DistinctFrom,
    DerivedFrom,
    UsedFor,
    CapableOf,
    SymbolOf,
    MannerOf,
    DefinedAs,
    Result,
    Cause,
    CauseDesire,
}

impl Relation {
    pub const ALL: [Relation; 19] = [
        Relation::Open,
        Relation::HasA,
        Relation::HasProperty,
        Relation::RelatedTo,
        Relation::SimilarTo,
        Relation::PartOf,
        Relation::IsA,
        Relation::MadeOf,
        Relation::CreatedBy,
        Relation::DistinctFrom,
        Relation::DerivedFrom,
        Relation::UsedFor,
        Relation::CapableOf,
        Relation::SymbolOf,
        Relation::MannerOf,
        Relation::DefinedAs,
        Relation::Result,
        Relation::Cause,
        Relation::CauseDesire,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Open => "Open",
            Relation::HasA => "HasA",
            Relation::HasProperty => "HasProperty",
            Relation::RelatedTo => "RelatedTo",
            Relation::SimilarTo => "SimilarTo",
            Relation::PartOf => "PartOf",
            Relation::IsA => "IsA",
            Relation::MadeOf => "MadeOf",
            Relation::CreatedBy => "CreatedBy",
            Relation::DistinctFrom => "DistinctFrom",
            Relation::DerivedFrom => "DerivedFrom",
            Relation::UsedFor => "UsedFor",
            Relation::CapableOf => "CapableOf",
            Relation::SymbolOf => "SymbolOf",
            Relation::MannerOf => "MannerOf",
            Relation::DefinedAs => "DefinedAs",
            Relation::Result => "Result",
            Relation::Cause => "Cause",
            Relation::CauseDesire => "CauseDesire",
        }
    }

    pub fn group(self) -> RelationGroup {
        use Relation::*;
        match self {
            Open => RelationGroup::Open,
            HasA | HasProperty | RelatedTo | SimilarTo | PartOf | IsA | MadeOf | CreatedBy
            | DistinctFrom | DerivedFrom => RelationGroup::Item,
            UsedFor | CapableOf | SymbolOf | MannerOf | DefinedAs => RelationGroup::Function,
            Result | Cause | CauseDesire => RelationGroup::Human,
        }
    }

    /// Text appended after "because"; empty for [`Relation::Open`].
    pub fn continuation(self) -> &'static str {
        use Relation::*;
        match self {
            Open => "",
            HasA => "they both have",
            HasProperty => "they both have a property of",
            RelatedTo => "they both are related to",
            SimilarTo => "they both are similar to",
            PartOf => "they both are a part of",
            IsA => "they both are a type of",
            MadeOf => "they both are made of",
            CreatedBy => "they are created by",
            DistinctFrom => "they are distinct from",
            DerivedFrom => "they are derived from",
            UsedFor => "they are both used for",
            CapableOf => "they both are capable of",
            SymbolOf => "they both are symbols of",
            MannerOf => "they both are a manner of",
            DefinedAs => "they both are defined as",
            Result => "as a result, the person",
            Cause => "the person wants to",
            CauseDesire => "the person wants his",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown relation {s:?}")))
    }
}

/// Natural-language prefix for a pair under a relation, e.g.
/// `A user bought X and Y because they both have`.
pub fn render_prompt(pair: &CoBuyPair, relation: Relation) -> String {
    render_prompt_titles(&pair.item1.title, &pair.item2.title, relation)
}

pub fn render_prompt_titles(title1: &str, title2: &str, relation: Relation) -> String {
    let base = format!(
        "A user bought {} and {} because {}",
        normalize_ws(title1),
        normalize_ws(title2),
        relation.continuation()
    );
    normalize_ws(&base)
}

/// Prompt plus tail, as shown to annotators and scorers.
pub fn naturalize(prompt: &str, tail: &str) -> String {
    normalize_ws(&format!("{prompt} {tail}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub endpoint: String,
    pub max_tokens: u32,
    pub top_p: f64,
    pub samples_per_prompt: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            endpoint: "http://127.0.0.1:8000".into(),
            max_tokens: 100,
            top_p: 0.9,
            samples_per_prompt: 3,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 || self.samples_per_prompt == 0 {
            return Err(Error::invalid("max_tokens and samples_per_prompt must be positive"));
        }
        Ok(())
    }
}

/// Body of `POST {endpoint}/v1/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub top_p: f64,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub texts: Vec<String>,
}

/// Anything that turns a prompt into raw continuations.
pub trait TextGenerator: Sync {
    fn generate(&self, prompt: &str, cfg: &GenerationConfig) -> Result<Vec<String>>;
}

/// Client for the external generation service.
pub struct HttpGenerator {
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(timeout: Duration) -> Self {
        HttpGenerator {
            agent: service::agent(timeout),
        }
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str, cfg: &GenerationConfig) -> Result<Vec<String>> {
        let req = GenerateRequest {
            prompt: prompt.to_string(),
            max_tokens: cfg.max_tokens,
            top_p: cfg.top_p,
            n: cfg.samples_per_prompt,
        };
        let url = service::join_url(&cfg.endpoint, "v1/generate");
        let resp: GenerateResponse = service::post_json(&self.agent, &url, &req)?;
        Ok(resp.texts)
    }
}

/// One request/response exchange, as recorded in the generation transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub pair_id: String,
    pub relation: Relation,
    pub prompt: String,
    pub texts: Vec<String>,
}

/// Serves continuations from a recorded transcript, keyed by prompt.
pub struct ReplayGenerator {
    by_prompt: BTreeMap<String, Vec<String>>,
}

impl ReplayGenerator {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        ReplayGenerator {
            by_prompt: entries.into_iter().map(|e| (e.prompt, e.texts)).collect(),
        }
    }
}

impl TextGenerator for ReplayGenerator {
    fn generate(&self, prompt: &str, _cfg: &GenerationConfig) -> Result<Vec<String>> {
        self.by_prompt
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Service(format!("prompt not in transcript: {prompt:?}")))
    }
}

/// Calls the generator with retries. Returns exactly `samples_per_prompt`
/// texts; a service returning a different count is treated as a failure.
pub fn generate(
    generator: &dyn TextGenerator,
    prompt: &str,
    cfg: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<Vec<String>> {
    retry.run("generate", || {
        let texts = generator.generate(prompt, cfg)?;
        if texts.len() != cfg.samples_per_prompt as usize {
            return Err(Error::Service(format!(
                "expected {} texts, got {}",
                cfg.samples_per_prompt,
                texts.len()
            )));
        }
        Ok(texts)
    })
}

const ABBREVIATIONS: [&str; 18] = [
    "mr.", "mrs.", "ms.", "dr.", "st.", "jr.", "sr.", "vs.", "etc.", "e.g.", "i.e.", "inc.",
    "co.", "approx.", "ft.", "oz.", "lbs.", "no.",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’')
}

/// Byte offset just past the first sentence terminator, if any.
pub fn first_sentence_end(text: &str) -> Option<usize> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        // absorb runs like "?!" or "..." and trailing closing quotes
        let mut j = i + 1;
        while j < chars.len() && is_terminator(chars[j].1) {
            j += 1;
        }
        while j < chars.len() && is_closer(chars[j].1) {
            j += 1;
        }
        let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
        if !at_boundary {
            i = j;
            continue;
        }
        if c == '.' && j == i + 1 {
            let start = chars[..i]
                .iter()
                .rposition(|(_, ch)| ch.is_whitespace())
                .map_or(0, |p| p + 1);
            let end = chars.get(i + 1).map_or(text.len(), |(b, _)| *b);
            let word = text[chars[start].0..end].to_lowercase();
            if ABBREVIATIONS.contains(&word.as_str()) {
                i = j;
                continue;
            }
        }
        return Some(chars.get(j).map_or(text.len(), |(b, _)| *b));
    }
    None
}

/// Removes a leading echo of the prompt: the longest common token prefix is
/// dropped when it spans the whole prompt or at least three tokens.
fn strip_echo(text: &str, prompt: &str) -> String {
    let prompt_tokens: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
    let mut current = text.to_string();
    loop {
        let tokens: Vec<&str> = current.split_whitespace().collect();
        let lcp = tokens
            .iter()
            .zip(&prompt_tokens)
            .take_while(|(a, b)| a.to_lowercase() == **b)
            .count();
        if lcp == 0 || (lcp < prompt_tokens.len() && lcp < 3) {
            return current;
        }
        current = tokens[lcp..].join(" ");
    }
}

/// Cleans a raw continuation into a tail: whitespace-normalized, prompt
/// echo removed, truncated to the first sentence. Returns `None` when no
/// complete sentence is present (no terminator and fewer than three tokens).
pub fn postprocess(raw: &str, prompt: &str) -> Option<String> {
    let text = strip_echo(&normalize_ws(raw), prompt);
    if text.is_empty() {
        return None;
    }
    match first_sentence_end(&text) {
        Some(end) => {
            let s = text[..end].trim();
            // a bare terminator is not a sentence
            if s.chars().any(char::is_alphanumeric) {
                Some(s.to_string())
            } else {
                None
            }
        }
        None if text.split(' ').count() >= 3 => Some(text),
        None => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assertion {
    pub assertion_id: String,
    pub pair_id: String,
    pub relation: Relation,
    pub tail: String,
    pub raw: String,
}

pub fn assertion_id(pair_id: &str, relation: Relation, tail: &str) -> String {
    short_id("a", &[pair_id, relation.name(), tail])
}

impl Assertion {
    pub fn new(pair_id: &str, relation: Relation, tail: &str, raw: &str) -> Self {
        Assertion {
            assertion_id: assertion_id(pair_id, relation, tail),
            pair_id: pair_id.to_string(),
            relation,
            tail: tail.to_string(),
            raw: raw.to_string(),
        }
    }
}

/// Row of `generations.jsonl`. Rows whose raw text did not survive
/// post-processing carry `tail: null` and an id derived from the raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub assertion_id: String,
    pub pair_id: String,
    pub relation: Relation,
    pub prompt: String,
    pub raw: String,
    pub tail: Option<String>,
}

impl GenerationRecord {
    pub fn assertion(&self) -> Option<Assertion> {
        self.tail
            .as_ref()
            .map(|t| Assertion::new(&self.pair_id, self.relation, t, &self.raw))
    }
}

/// Drops repeated `(pair_id, relation, tail)` keys, keeping first occurrences.
pub fn dedup_corpus(assertions: impl IntoIterator<Item = Assertion>) -> Vec<Assertion> {
    let mut seen = HashSet::new();
    assertions
        .into_iter()
        .filter(|a| seen.insert((a.pair_id.clone(), a.relation, a.tail.clone())))
        .collect()
}

/// A pair-relation whose generation failed after all retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRequest {
    pub pair_id: String,
    pub relation: Relation,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationRun {
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<FailedRequest>,
    pub transcript: Vec<TranscriptEntry>,
}

impl GenerationRun {
    /// Surviving assertions after de-duplication, in record order.
    pub fn assertions(&self) -> Vec<Assertion> {
        dedup_corpus(self.records.iter().filter_map(GenerationRecord::assertion))
    }
}

/// Generates for every (pair, relation) with at most `max_in_flight`
/// concurrent requests. Output is ordered by (pair_id, relation, sample).
pub fn generate_corpus(
    pairs: &[CoBuyPair],
    relations: &[Relation],
    generator: &dyn TextGenerator,
    cfg: &GenerationConfig,
    retry: &RetryPolicy,
    max_in_flight: usize,
) -> Result<GenerationRun> {
    let mut jobs: Vec<(&CoBuyPair, Relation)> = pairs
        .iter()
        .flat_map(|p| relations.iter().map(move |r| (p, *r)))
        .collect();
    jobs.sort_by(|a, b| (&a.0.pair_id, a.1).cmp(&(&b.0.pair_id, b.1)));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Service(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|(pair, rel)| {
                let prompt = render_prompt(pair, *rel);
                let out = generate(generator, &prompt, cfg, retry);
                (pair.pair_id.clone(), *rel, prompt, out)
            })
            .collect()
    });

    let mut run = GenerationRun::default();
    for (pair_id, relation, prompt, out) in results {
        match out {
            Ok(texts) => {
                log::debug!("generated pair={pair_id} relation={relation} n={}", texts.len());
                for (idx, raw) in texts.iter().enumerate() {
                    let tail = postprocess(raw, &prompt);
                    let assertion_id = match &tail {
                        Some(t) => assertion_id(&pair_id, relation, t),
                        None => short_id(
                            "g",
                            &[&pair_id, relation.name(), &idx.to_string(), raw],
                        ),
                    };
                    run.records.push(GenerationRecord {
                        assertion_id,
                        pair_id: pair_id.clone(),
                        relation,
                        prompt: prompt.clone(),
                        raw: raw.clone(),
                        tail,
                    });
                }
                run.transcript.push(TranscriptEntry {
                    pair_id,
                    relation,
                    prompt,
                    texts,
                });
            }
            Err(err) => {
                log::warn!("generation failed pair={pair_id} relation={relation}: {err}");
                run.failures.push(FailedRequest {
                    pair_id,
                    relation,
                    error: err.to_string(),
                });
            }
        }
    }
    Ok(run)
}

/// Corpus statistics in the style of the co-buy generation summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub assertions: usize,
    pub unique_tails: usize,
    pub avg_tail_tokens: f64,
}

pub fn corpus_stats(assertions: &[Assertion]) -> CorpusStats {
    let pairs: HashSet<&str> = assertions.iter().map(|a| a.pair_id.as_str()).collect();
    let tails: HashSet<&str> = assertions.iter().map(|a| a.tail.as_str()).collect();
    let tokens: usize = assertions.iter().map(|a| a.tail.split_whitespace().count()).sum();
    CorpusStats {
        pairs: pairs.len(),
        assertions: assertions.len(),
        unique_tails: tails.len(),
        avg_tail_tokens: if assertions.is_empty() {
            0.0
        } else {
            tokens as f64 / assertions.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Item;
    use proptest::prelude::*;

    fn pair() -> CoBuyPair {
        let mk = |id: &str, title: &str| Item {
            id: id.into(),
            title: title.into(),
            category: "Clothing".into(),
            subcategory_path: vec![],
            image_urls: vec![],
            url: String::new(),
        };
        CoBuyPair::new(mk("a", "Red  Shirt"), mk("b", "Blue Jeans"))
    }

    #[test]
    fn prompts() {
        let p = pair();
        assert_eq!(
            render_prompt(&p, Relation::HasA),
            "A user bought Red Shirt and Blue Jeans because they both have"
        );
        assert_eq!(
            render_prompt(&p, Relation::Cause),
            "A user bought Red Shirt and Blue Jeans because the person wants to"
        );
        assert_eq!(
            render_prompt(&p, Relation::Open),
            "A user bought Red Shirt and Blue Jeans because"
        );
    }

    #[test]
    fn relation_table_shape() {
        assert_eq!(Relation::ALL.len(), 19);
        let count = |g| Relation::ALL.iter().filter(|r| r.group() == g).count();
        assert_eq!(count(RelationGroup::Open), 1);
        assert_eq!(count(RelationGroup::Item), 10);
        assert_eq!(count(RelationGroup::Function), 5);
        assert_eq!(count(RelationGroup::Human), 3);
        for r in Relation::ALL {
            assert_eq!(r.name().parse::<Relation>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.name()));
        }
    }

    #[test]
    fn postprocess_examples() {
        let prompt = render_prompt(&pair(), Relation::HasA);
        assert_eq!(
            postprocess("pockets and zippers. They also have buttons", &prompt).as_deref(),
            Some("pockets and zippers.")
        );
        assert_eq!(postprocess("a", &prompt), None);
        assert_eq!(postprocess("  pockets.  ", &prompt).as_deref(), Some("pockets."));
        assert_eq!(postprocess("", &prompt), None);
        assert_eq!(postprocess("...", &prompt), None);
        assert_eq!(
            postprocess("nice soft cotton fabric", &prompt).as_deref(),
            Some("nice soft cotton fabric")
        );
    }

    #[test]
    fn postprocess_strips_echoed_prompt() {
        let prompt = render_prompt(&pair(), Relation::HasA);
        let raw = format!("{prompt} pockets and zippers. And more.");
        assert_eq!(postprocess(&raw, &prompt).as_deref(), Some("pockets and zippers."));
    }

    #[test]
    fn segmentation_guards() {
        assert_eq!(
            postprocess("a 3.5 inch screen. Great", "x").as_deref(),
            Some("a 3.5 inch screen.")
        );
        assert_eq!(
            postprocess("accessories e.g. cases and straps. Also", "x").as_deref(),
            Some("accessories e.g. cases and straps.")
        );
        assert_eq!(
            postprocess("he said \"wow!\" then left", "x").as_deref(),
            Some("he said \"wow!\"")
        );
    }

    #[test]
    fn dedup_examples() {
        let a = Assertion::new("p1", Relation::HasA, "pockets.", "pockets.");
        let b = Assertion::new("p1", Relation::MadeOf, "pockets.", "pockets.");
        let out = dedup_corpus(vec![a.clone(), a.clone(), b.clone()]);
        assert_eq!(out, vec![a, b]);
    }

    struct Echo;
    impl TextGenerator for Echo {
        fn generate(&self, _prompt: &str, cfg: &GenerationConfig) -> Result<Vec<String>> {
            Ok(vec!["they both have pockets.".into(); cfg.samples_per_prompt as usize])
        }
    }

    struct Down;
    impl TextGenerator for Down {
        fn generate(&self, _: &str, _: &GenerationConfig) -> Result<Vec<String>> {
            Err(Error::Service("connection refused".into()))
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn mock_echo_gives_identical_raws() {
        let cfg = GenerationConfig::default();
        let out = generate(&Echo, "p", &cfg, &fast_retry()).unwrap();
        assert_eq!(out, vec!["they both have pockets."; 3]);
    }

    #[test]
    fn failed_requests_are_recorded_not_fatal() {
        let cfg = GenerationConfig::default();
        let run = generate_corpus(&[pair()], &[Relation::HasA], &Down, &cfg, &fast_retry(), 2)
            .unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.failures.len(), 1);
    }

    #[test]
    fn corpus_order_and_replay() {
        let cfg = GenerationConfig::default();
        let run = generate_corpus(&[pair()], &Relation::ALL, &Echo, &cfg, &fast_retry(), 4)
            .unwrap();
        assert_eq!(run.records.len(), 19 * 3);
        let rels: Vec<_> = run.records.iter().map(|r| r.relation).collect();
        let mut sorted = rels.clone();
        sorted.sort();
        assert_eq!(rels, sorted);
        // identical raws collapse to one assertion per relation
        assert_eq!(run.assertions().len(), 19);

        let replay = ReplayGenerator::new(run.transcript.clone());
        let again = generate_corpus(&[pair()], &Relation::ALL, &replay, &cfg, &fast_retry(), 1)
            .unwrap();
        assert_eq!(again.records, run.records);
    }

    proptest! {
        #[test]
        fn postprocess_idempotent(raw in "[a-z]{1,6}( [a-z]{1,6}){0,8}[.!?]?( [A-Za-z]{1,6}){0,4}") {
            let prompt = "A user bought Red Shirt and Blue Jeans because they both have";
            if let Some(t) = postprocess(&raw, prompt) {
                prop_assert_eq!(postprocess(&t, prompt), Some(t.clone()));
            }
        }

        #[test]
        fn dedup_never_grows(keys in proptest::collection::vec((0u8..3, 0usize..3, 0u8..3), 0..30)) {
            let input: Vec<Assertion> = keys
                .iter()
                .map(|(p, r, t)| Assertion::new(&format!("p{p}"), Relation::ALL[*r], &format!("t{t}"), ""))
                .collect();
            let out = dedup_corpus(input.clone());
            prop_assert!(out.len() <= input.len());
            let uniq: HashSet<_> = out.iter().map(|a| (&a.pair_id, a.relation, &a.tail)).collect();
            prop_assert_eq!(uniq.len(), out.len());
        }
    }
}
