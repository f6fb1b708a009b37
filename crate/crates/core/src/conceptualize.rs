//! Abstract intentions: replacing the entity in a tail with weighted
//! higher-level concepts from an IsA likelihood table.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ids::short_id;
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_MIN_WEIGHT: f64 = 0.01;

/// Entity span → (concept, likelihood) list. Spans are lowercased and
/// compared token by token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptTable {
    entries: HashMap<String, Vec<(String, f64)>>,
    max_span_tokens: usize,
}

impl ConceptTable {
    /// Adds `likelihood` to the (entity, concept) entry. Non-finite or
    /// non-positive likelihoods are rejected.
    pub fn add(&mut self, entity: &str, concept: &str, likelihood: f64) -> Result<()> {
        if !likelihood.is_finite() || likelihood <= 0.0 {
            return Err(Error::invalid(format!(
                "likelihood for ({entity}, {concept}) must be finite and positive"
            )));
        }
        let key = span_key(entity);
        if key.is_empty() {
            return Err(Error::invalid("empty entity span"));
        }
        self.max_span_tokens = self.max_span_tokens.max(key.split(' ').count());
        let concepts = self.entries.entry(key).or_default();
        match concepts.iter_mut().find(|(c, _)| c == concept) {
            Some((_, l)) => *l += likelihood,
            None => concepts.push((concept.to_string(), likelihood)),
        }
        Ok(())
    }

    pub fn get(&self, entity: &str) -> Option<&[(String, f64)]> {
        self.entries.get(&span_key(entity)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `entity \t concept \t likelihood` rows. Rows that do not parse
    /// are skipped with a warning; the second value counts them.
    pub fn parse(text: &str) -> (Self, usize) {
        let mut table = ConceptTable::default();
        let mut skipped = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let parsed = match cols.as_slice() {
                [e, c, l] => l
                    .trim()
                    .parse::<f64>()
                    .map_err(|err| Error::invalid(err.to_string()))
                    .and_then(|l| table.add(e, c.trim(), l)),
                _ => Err(Error::invalid("expected three columns")),
            };
            if let Err(err) = parsed {
                log::warn!("concept table line {}: {err}", lineno + 1);
                skipped += 1;
            }
        }
        (table, skipped)
    }
}

pub fn load_concept_table(path: &Path) -> Result<ConceptTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (table, skipped) = ConceptTable::parse(&text);
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} rows", path.display());
    }
    Ok(table)
}

fn span_key(s: &str) -> String {
    s.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractIntention {
    pub node_id: String,
    pub source_tail_id: String,
    pub concept: String,
    /// P(concept | span), normalized over every concept listed for the span.
    pub weight: f64,
    pub abstract_tail: String,
}

pub fn abstract_node_id(source_tail_id: &str, concept: &str) -> String {
    short_id("a", &[source_tail_id, concept])
}

/// Token with its leading and trailing punctuation split off.
struct Token<'a> {
    lead: &'a str,
    core: &'a str,
    trail: &'a str,
}

fn split_token(tok: &str) -> Token<'_> {
    let start = tok.find(|c: char| c.is_alphanumeric()).unwrap_or(tok.len());
    let end = tok
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + tok[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    Token {
        lead: &tok[..start],
        core: &tok[start..end.max(start)],
        trail: &tok[end.max(start)..],
    }
}

/// Locates the longest token span of `tail` present in `table`, preferring
/// the rightmost span among equally long ones (head nouns tend to come
/// last). Returns the token range.
pub fn find_span(tail: &str, table: &ConceptTable) -> Option<(usize, usize)> {
    let tokens: Vec<Token> = tail.split_whitespace().map(split_token).collect();
    let max_len = table.max_span_tokens.min(tokens.len());
    for len in (1..=max_len).rev() {
        for start in (0..=tokens.len() - len).rev() {
            let window = &tokens[start..start + len];
            // inner punctuation breaks a span
            let inner_clean = window
                .iter()
                .enumerate()
                .all(|(i, t)| (i == 0 || t.lead.is_empty()) && (i == len - 1 || t.trail.is_empty()));
            if !inner_clean || window.iter().any(|t| t.core.is_empty()) {
                continue;
            }
            let key = window.iter().map(|t| t.core).collect::<Vec<_>>().join(" ");
            if table.get(&key).is_some() {
                return Some((start, start + len));
            }
        }
    }
    None
}

/// Abstract intentions for one tail, heaviest first (ties by concept name).
/// At most `top_k` are returned, each with weight at least `min_weight`.
pub fn conceptualize_tail(
    source_tail_id: &str,
    simplified_tail: &str,
    table: &ConceptTable,
    top_k: usize,
    min_weight: f64,
) -> Vec<AbstractIntention> {
    let Some((start, end)) = find_span(simplified_tail, table) else {
        return Vec::new();
    };
    let raw: Vec<&str> = simplified_tail.split_whitespace().collect();
    let key = raw[start..end]
        .iter()
        .map(|t| split_token(t).core)
        .collect::<Vec<_>>()
        .join(" ");
    let concepts = table.get(&key).unwrap_or(&[]);
    let total: f64 = concepts.iter().map(|(_, l)| l).sum();
    let mut weighted: Vec<(&str, f64)> = concepts.iter().map(|(c, l)| (c.as_str(), l / total)).collect();
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let lead = split_token(raw[start]).lead;
    let trail = split_token(raw[end - 1]).trail;
    weighted
        .into_iter()
        .filter(|(_, w)| *w >= min_weight)
        .take(top_k)
        .map(|(concept, weight)| {
            let replaced = format!("{lead}{concept}{trail}");
            let abstract_tail = raw[..start]
                .iter()
                .copied()
                .chain(std::iter::once(replaced.as_str()))
                .chain(raw[end..].iter().copied())
                .collect::<Vec<_>>()
                .join(" ");
            AbstractIntention {
                node_id: abstract_node_id(source_tail_id, concept),
                source_tail_id: source_tail_id.to_string(),
                concept: concept.to_string(),
                weight,
                abstract_tail,
            }
        })
        .collect()
}

/// Conceptualizes every `(tail_id, text)` pair. Output is keyed and sorted
/// by node id, so repeated tails never produce duplicate nodes.
pub fn conceptualize_all<'a>(
    tails: impl IntoIterator<Item = (&'a str, &'a str)>,
    table: &ConceptTable,
    top_k: usize,
    min_weight: f64,
) -> Vec<AbstractIntention> {
    let mut out: BTreeMap<String, AbstractIntention> = BTreeMap::new();
    for (id, text) in tails {
        for a in conceptualize_tail(id, text, table, top_k, min_weight) {
            out.entry(a.node_id.clone()).or_insert(a);
        }
    }
    out.into_values().collect()
}
