//! Pipeline configuration, read from TOML. Relative paths are resolved
//! against the directory holding the config file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use intentkg::generation::Relation;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub ingest: IngestSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub population: PopulationSection,
    #[serde(default)]
    pub mining: MiningSection,
    #[serde(default)]
    pub conceptualize: ConceptualizeSection,
    #[serde(default)]
    pub embed: EmbedSection,
    #[serde(default)]
    pub receval: RecevalSection,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub items: PathBuf,
    pub cobuy: PathBuf,
    /// Top-level categories to sample from; empty means every category.
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_min_degree")]
    pub min_degree: usize,
    #[serde(default = "yes")]
    pub title_filter: bool,
}

fn default_n_pairs() -> usize {
    1000
}

fn default_min_degree() -> usize {
    intentkg::ingest::DEFAULT_MIN_DEGREE
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub endpoint: String,
    pub max_tokens: u32,
    pub top_p: f64,
    pub samples_per_prompt: u32,
    /// Relations to prompt for; all 19 when absent.
    pub relations: Option<Vec<Relation>>,
    pub max_in_flight: usize,
    pub attempts: u32,
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
    /// Serve continuations from a recorded transcript instead of the endpoint.
    pub replay: Option<PathBuf>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = intentkg::generation::GenerationConfig::default();
        GenerationSection {
            endpoint: g.endpoint,
            max_tokens: g.max_tokens,
            top_p: g.top_p,
            samples_per_prompt: g.samples_per_prompt,
            relations: None,
            max_in_flight: 8,
            attempts: 3,
            retry_base_ms: 200,
            timeout_secs: 60,
            replay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSection {
    pub bind: SocketAddr,
    /// Qualified worker ids; anyone may vote when absent.
    pub workers: Option<Vec<String>>,
    /// Assertions drawn (stratified by relation) for the plausibility step.
    pub plausibility_sample: usize,
    /// Vote log; `<work_dir>/votes.jsonl` when absent.
    pub votes: Option<PathBuf>,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection {
            bind: SocketAddr::from(([127, 0, 0, 1], 8787)),
            workers: None,
            plausibility_sample: 1000,
            votes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    /// Precomputed `scores.jsonl`.
    pub scores: Option<PathBuf>,
    /// Scorer service base URL, used when `scores` is absent.
    pub scorer_endpoint: Option<String>,
    pub plausibility_threshold: f64,
    pub typicality_threshold: Option<f64>,
    pub train_ratio: f64,
    pub batch_size: usize,
    /// Cut-offs for the acceptance table.
    pub acceptance_thresholds: Vec<f64>,
    pub timeout_secs: u64,
}

impl Default for PopulationSection {
    fn default() -> Self {
        PopulationSection {
            scores: None,
            scorer_endpoint: None,
            plausibility_threshold: 0.5,
            typicality_threshold: None,
            train_ratio: 0.8,
            batch_size: 64,
            acceptance_thresholds: vec![0.5, 0.7, 0.8, 0.9],
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSection {
    /// CoNLL-U files with one parse per tail.
    pub parses: Vec<PathBuf>,
    /// `assertion_id \t file` lines naming further parse files.
    pub parse_index: Option<PathBuf>,
    /// Support threshold; scaled to the number of trees when absent.
    pub min_support: Option<usize>,
    pub min_perfect: usize,
    pub max_pattern_nodes: Option<usize>,
    /// Pattern id lists (one per line) applied after mining.
    pub allow: Option<PathBuf>,
    pub deny: Option<PathBuf>,
}

impl Default for MiningSection {
    fn default() -> Self {
        MiningSection {
            parses: Vec::new(),
            parse_index: None,
            min_support: None,
            min_perfect: 0,
            max_pattern_nodes: Some(8),
            allow: None,
            deny: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptualizeSection {
    pub concepts: Option<PathBuf>,
    pub top_k: usize,
    pub min_weight: f64,
}

impl Default for ConceptualizeSection {
    fn default() -> Self {
        ConceptualizeSection {
            concepts: None,
            top_k: intentkg::conceptualize::DEFAULT_TOP_K,
            min_weight: intentkg::conceptualize::DEFAULT_MIN_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub negatives: usize,
    /// Sentence-encoder vectors keyed by tail text id; hashed text vectors
    /// are used when absent.
    pub tail_vectors: Option<PathBuf>,
    pub tails_trainable: bool,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let t = intentkg::embed::TrainConfig::default();
        EmbedSection {
            dim: t.dim,
            margin: t.margin,
            lr: t.lr,
            epochs: t.epochs,
            negatives: t.negatives,
            tail_vectors: None,
            tails_trainable: t.tails_trainable,
        }
    }
}

impl EmbedSection {
    pub fn train_config(&self, seed: u64) -> intentkg::embed::TrainConfig {
        intentkg::embed::TrainConfig {
            dim: self.dim,
            margin: self.margin,
            lr: self.lr,
            epochs: self.epochs,
            negatives: self.negatives,
            seed,
            tails_trainable: self.tails_trainable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecevalSection {
    pub interactions: Option<PathBuf>,
    pub runs: usize,
    pub factors: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    /// Plausibility cut-offs for the thresholded matched-graph variants.
    pub thresholds: Vec<f64>,
}

impl Default for RecevalSection {
    fn default() -> Self {
        let p = intentkg::receval::PredictorConfig::default();
        RecevalSection {
            interactions: None,
            runs: 5,
            factors: p.factors,
            epochs: p.epochs,
            lr: p.lr,
            reg: p.reg,
            thresholds: vec![0.7, 0.9],
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub min_support: Option<usize>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, resolves relative paths, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
            _ => CliError::Io(path.to_path_buf(), e),
        })?;
        let mut cfg = Config::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(t) = o.threshold {
            self.population.plausibility_threshold = t;
        }
        if let Some(s) = o.min_support {
            self.mining.min_support = Some(s);
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        fix(&mut self.ingest.items);
        fix(&mut self.ingest.cobuy);
        let opt = [
            &mut self.generation.replay,
            &mut self.annotation.votes,
            &mut self.population.scores,
            &mut self.mining.parse_index,
            &mut self.mining.allow,
            &mut self.mining.deny,
            &mut self.conceptualize.concepts,
            &mut self.embed.tail_vectors,
            &mut self.receval.interactions,
        ];
        for p in opt.into_iter().flatten() {
            fix(p);
        }
        self.mining.parses.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.ingest.n_pairs == 0 {
            return bad("ingest.n_pairs must be positive".into());
        }
        let g = &self.generation;
        if g.samples_per_prompt == 0 || g.max_tokens == 0 {
            return bad("generation.samples_per_prompt and max_tokens must be positive".into());
        }
        if !(g.top_p > 0.0 && g.top_p <= 1.0) {
            return bad(format!("generation.top_p must be in (0, 1], got {}", g.top_p));
        }
        if g.max_in_flight == 0 || g.attempts == 0 {
            return bad("generation.max_in_flight and attempts must be positive".into());
        }
        if matches!(&g.relations, Some(r) if r.is_empty()) {
            return bad("generation.relations must not be empty".into());
        }
        let p = &self.population;
        if !unit(p.plausibility_threshold) {
            return bad(format!("plausibility threshold {} outside [0, 1]", p.plausibility_threshold));
        }
        if let Some(t) = p.typicality_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return bad(format!("typicality threshold {t} outside [-1, 1]"));
            }
        }
        if !(p.train_ratio > 0.0 && p.train_ratio < 1.0) {
            return bad(format!("population.train_ratio must be in (0, 1), got {}", p.train_ratio));
        }
        if p.batch_size == 0 {
            return bad("population.batch_size must be positive".into());
        }
        if p.scores.is_some() && p.scorer_endpoint.is_some() {
            return bad("set either population.scores or population.scorer_endpoint, not both".into());
        }
        if self.conceptualize.top_k == 0 || !unit(self.conceptualize.min_weight) {
            return bad("conceptualize.top_k must be positive and min_weight in [0, 1]".into());
        }
        if matches!(self.mining.max_pattern_nodes, Some(0)) {
            return bad("mining.max_pattern_nodes must be positive".into());
        }
        self.embed
            .train_config(self.seed)
            .validate()
            .map_err(|e| CliError::Config(format!("embed: {e}")))?;
        let r = &self.receval;
        if r.runs == 0 || r.epochs == 0 {
            return bad("receval.runs and epochs must be positive".into());
        }
        if r.thresholds.iter().any(|t| !unit(*t)) {
            return bad("receval.thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn relations(&self) -> Vec<Relation> {
        self.generation
            .relations
            .clone()
            .unwrap_or_else(|| Relation::ALL.to_vec())
    }

    pub fn votes_path(&self) -> PathBuf {
        self.annotation
            .votes
            .clone()
            .unwrap_or_else(|| self.work_dir.join("votes.jsonl"))
    }
}
