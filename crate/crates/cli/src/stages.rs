//! Stage implementations and the files they read and write.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use intentkg::annotation::{
    agreement_from_votes, labels_from_votes, stratified_by_relation, AnnotationStore, CardSource,
    LabelRecord, PlausibilityLabel, Task, VoteRecord,
};
use intentkg::conceptualize::{conceptualize_all, load_concept_table, AbstractIntention};
use intentkg::embed::{
    self, avg_pool_tail_features, hashed_text_vector, train, train_cobuy, TrainingSet, Vector,
};
use intentkg::generation::{
    corpus_stats, generate_corpus, naturalize, render_prompt, Assertion, GenerationConfig,
    GenerationRecord, HttpGenerator, ReplayGenerator, TextGenerator, TranscriptEntry,
};
use intentkg::ingest::{
    build_cobuy_graph, load_catalog, read_cobuy_records, resolve_pairs, sample_pairs,
    title_quality_filter, unique_items, CoBuyPair, ItemCatalog, PairRecord,
};
use intentkg::jsonl;
use intentkg::kgstore::{self, AssemblyInput, KnowledgeGraph, NodeKind};
use intentkg::mining::{
    assign_pattern, coverage, default_min_support, mine_relation, parse_conllu, DepTree,
    MiningConfig, PatternAssignment, PatternFilter, TreePattern,
};
use intentkg::population::{
    acceptance_by_threshold, derive_training_labels, filter_by_threshold, novelty_ratio, pr_curve,
    score_assertions, spearman, split_train_dev, subcategory_common_tails, write_training_tsv,
    FileScorer, HttpScorer, Scorer, ScoredAssertion, TYPICALITY_POSITIVE,
};
use intentkg::receval::{
    item_coverage, load_interactions, match_kg, run_ablation, split_interactions,
    write_report_csv, AblationConfig, AblationRow, PredictorConfig,
};
use intentkg::service::RetryPolicy;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::{ensure_parent, write_text, CliError, Stage};

/// Locations of everything the stages exchange, relative to the work dir.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(work_dir: &Path) -> Self {
        Layout {
            root: work_dir.to_path_buf(),
        }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn catalog(&self) -> PathBuf {
        self.at("catalog.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.at("pairs.jsonl")
    }
    pub fn graph(&self) -> PathBuf {
        self.at("cobuy_graph.tsv")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.at("ingest.json")
    }
    pub fn generations(&self) -> PathBuf {
        self.at("generations.jsonl")
    }
    pub fn assertions(&self) -> PathBuf {
        self.at("assertions.jsonl")
    }
    pub fn transcript(&self) -> PathBuf {
        self.at("transcript.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.at("failures.jsonl")
    }
    pub fn generation_report(&self) -> PathBuf {
        self.at("generation.json")
    }
    pub fn labels(&self) -> PathBuf {
        self.at("labels.jsonl")
    }
    pub fn annotation_report(&self) -> PathBuf {
        self.at("annotation.json")
    }
    pub fn training(&self, task: Task, part: &str) -> PathBuf {
        let name = match task {
            Task::Plausibility => "plausibility",
            Task::Typicality => "typicality",
        };
        self.at(&format!("training/{name}_{part}.tsv"))
    }
    pub fn scored(&self) -> PathBuf {
        self.at("scored.jsonl")
    }
    pub fn populated(&self) -> PathBuf {
        self.at("populated.jsonl")
    }
    pub fn population_report(&self) -> PathBuf {
        self.at("population.json")
    }
    pub fn patterns(&self) -> PathBuf {
        self.at("patterns.jsonl")
    }
    pub fn assignments(&self) -> PathBuf {
        self.at("assignments.jsonl")
    }
    pub fn mining_report(&self) -> PathBuf {
        self.at("mining.json")
    }
    pub fn abstracts(&self) -> PathBuf {
        self.at("abstract.jsonl")
    }
    pub fn kg_dir(&self) -> PathBuf {
        self.at("kg")
    }
    pub fn kg_nodes(&self) -> PathBuf {
        self.kg_dir().join(kgstore::NODES_FILE)
    }
    pub fn kg_edges(&self) -> PathBuf {
        self.kg_dir().join(kgstore::EDGES_FILE)
    }
    pub fn kg_stats(&self) -> PathBuf {
        self.at("kg_stats.json")
    }
    pub fn item_vectors(&self) -> PathBuf {
        self.at("embed/items.vec")
    }
    pub fn tail_vectors(&self) -> PathBuf {
        self.at("embed/tails.vec")
    }
    pub fn text_vectors(&self) -> PathBuf {
        self.at("embed/text_tails.vec")
    }
    pub fn cobuy_vectors(&self) -> PathBuf {
        self.at("embed/cobuy.vec")
    }
    pub fn embed_log(&self) -> PathBuf {
        self.at("embed/train_log.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.at("report.csv")
    }
    pub fn receval_report(&self) -> PathBuf {
        self.at("receval.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.at("summary.md")
    }
}

/// What a stage reads and the parameters its outputs depend on.
#[derive(Debug, Clone)]
pub struct Plan {
    pub inputs: Vec<PathBuf>,
    /// Inputs digested when present.
    pub optional: Vec<PathBuf>,
    pub params: Value,
    pub memoize: bool,
}

fn memoized(inputs: Vec<PathBuf>, params: Value) -> Plan {
    Plan {
        inputs,
        optional: Vec::new(),
        params,
        memoize: true,
    }
}

pub fn plan(stage: Stage, cfg: &Config) -> Result<Plan, CliError> {
    let l = Layout::new(&cfg.work_dir);
    let seed = cfg.seed;
    Ok(match stage {
        Stage::Ingest => memoized(
            vec![cfg.ingest.items.clone(), cfg.ingest.cobuy.clone()],
            json!({"ingest": cfg.ingest, "seed": seed}),
        ),
        Stage::Generate => {
            let mut inputs = vec![l.catalog(), l.pairs()];
            inputs.extend(cfg.generation.replay.clone());
            let mut g = cfg.generation.clone();
            // transport settings do not change what is generated
            g.max_in_flight = 0;
            g.timeout_secs = 0;
            memoized(inputs, json!({"generation": g, "relations": cfg.relations()}))
        }
        Stage::AnnotateServe => Plan {
            inputs: vec![l.assertions(), l.pairs(), l.catalog()],
            optional: vec![cfg.votes_path()],
            params: json!({"annotation": cfg.annotation, "seed": seed}),
            memoize: false,
        },
        Stage::Populate => {
            let mut inputs = vec![l.assertions(), l.pairs(), l.catalog()];
            match (&cfg.population.scores, &cfg.population.scorer_endpoint) {
                (Some(path), _) => inputs.push(path.clone()),
                (None, Some(_)) => {}
                (None, None) => return Err(CliError::NotConfigured("population.scores or population.scorer_endpoint")),
            }
            let mut plan = memoized(inputs, json!({"population": cfg.population, "seed": seed}));
            plan.optional.push(cfg.votes_path());
            // a live scorer is not a file we can digest
            plan.memoize = cfg.population.scorer_endpoint.is_none();
            plan
        }
        Stage::Mine => {
            let mut inputs = vec![l.populated()];
            let files = parse_files(cfg)?;
            if files.is_empty() {
                return Err(CliError::NotConfigured("mining.parses"));
            }
            inputs.extend(files);
            inputs.extend(cfg.mining.parse_index.clone());
            inputs.extend(cfg.mining.allow.clone());
            inputs.extend(cfg.mining.deny.clone());
            memoized(inputs, json!({"mining": cfg.mining}))
        }
        Stage::Conceptualize => {
            let concepts = cfg
                .conceptualize
                .concepts
                .clone()
                .ok_or(CliError::NotConfigured("conceptualize.concepts"))?;
            memoized(
                vec![l.populated(), l.assignments(), concepts],
                json!({"conceptualize": cfg.conceptualize}),
            )
        }
        Stage::Assemble => memoized(
            vec![l.populated(), l.pairs(), l.catalog(), l.assignments(), l.abstracts()],
            json!({"threshold": cfg.population.plausibility_threshold}),
        ),
        Stage::Embed => {
            let mut inputs = vec![l.kg_nodes(), l.kg_edges(), l.graph()];
            inputs.extend(cfg.embed.tail_vectors.clone());
            memoized(inputs, json!({"embed": cfg.embed, "seed": seed}))
        }
        Stage::Receval => {
            let interactions = cfg
                .receval
                .interactions
                .clone()
                .ok_or(CliError::NotConfigured("receval.interactions"))?;
            memoized(
                vec![
                    interactions,
                    l.kg_nodes(),
                    l.kg_edges(),
                    l.item_vectors(),
                    l.text_vectors(),
                    l.cobuy_vectors(),
                ],
                json!({"receval": cfg.receval, "embed": cfg.embed, "seed": seed}),
            )
        }
        Stage::Report => memoized(
            vec![
                l.ingest_report(),
                l.generation_report(),
                l.population_report(),
                l.mining_report(),
                l.kg_stats(),
                l.receval_report(),
                l.report_csv(),
            ],
            json!({}),
        ),
    })
}

pub fn execute(stage: Stage, cfg: &Config) -> Result<Vec<PathBuf>, CliError> {
    let l = Layout::new(&cfg.work_dir);
    match stage {
        Stage::Ingest => ingest(cfg, &l),
        Stage::Generate => generate(cfg, &l),
        Stage::AnnotateServe => annotate_serve(cfg, &l),
        Stage::Populate => populate(cfg, &l),
        Stage::Mine => mine(cfg, &l),
        Stage::Conceptualize => conceptualize(cfg, &l),
        Stage::Assemble => assemble(cfg, &l),
        Stage::Embed => embed_stage(cfg, &l),
        Stage::Receval => receval(cfg, &l),
        Stage::Report => report(&l),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    ensure_parent(path)?;
    jsonl::write(path, records)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(body + "\n"))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

type LoadedPairs = (ItemCatalog, Vec<PairRecord>, HashMap<String, CoBuyPair>);

fn load_pairs(l: &Layout) -> Result<LoadedPairs, CliError> {
    let catalog = load_catalog(&l.catalog())?;
    let records: Vec<PairRecord> = jsonl::read_strict(&l.pairs())?;
    let pairs = resolve_pairs(&records, &catalog)
        .into_iter()
        .map(|p| (p.pair_id.clone(), p))
        .collect();
    Ok((catalog, records, pairs))
}

fn ingest(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let c = &cfg.ingest;
    let full = load_catalog(&c.items)?;
    let records = read_cobuy_records(&c.cobuy)?;
    let graph = build_cobuy_graph(&records, Some(&full));
    let mut catalog = full.clone();
    if c.title_filter {
        catalog.retain(title_quality_filter);
    }
    let categories: BTreeSet<String> = if c.categories.is_empty() {
        catalog.iter().map(|i| i.category.clone()).collect()
    } else {
        c.categories.iter().cloned().collect()
    };
    let pairs = sample_pairs(&graph, &catalog, &categories, c.n_pairs, c.min_degree, cfg.seed);
    if pairs.is_empty() {
        return Err(CliError::Validation(format!(
            "no co-buy edge has both endpoints above degree {} in the selected categories",
            c.min_degree
        )));
    }
    log::info!("sampled {} pairs over {} items", pairs.len(), unique_items(&pairs));

    write_jsonl(&l.catalog(), catalog.iter())?;
    write_jsonl(&l.pairs(), pairs.iter().map(PairRecord::from))?;
    let edges: String = graph.edge_list().iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    write_text(&l.graph(), &edges)?;
    write_json(
        &l.ingest_report(),
        &json!({
            "items": full.len(),
            "dropped_item_lines": full.dropped,
            "items_after_title_filter": catalog.len(),
            "cobuy_records": records.len(),
            "cobuy_edges": graph.edges.len(),
            "cobuy_records_skipped": graph.skipped,
            "pairs": pairs.len(),
            "unique_items": unique_items(&pairs),
        }),
    )?;
    Ok(vec![l.catalog(), l.pairs(), l.graph(), l.ingest_report()])
}

fn generate(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let g = &cfg.generation;
    let (_, _, pairs) = load_pairs(l)?;
    let pairs: Vec<CoBuyPair> = pairs.into_values().collect();
    let gen_cfg = GenerationConfig {
        endpoint: g.endpoint.clone(),
        max_tokens: g.max_tokens,
        top_p: g.top_p,
        samples_per_prompt: g.samples_per_prompt,
    };
    gen_cfg.validate()?;
    let retry = RetryPolicy {
        attempts: g.attempts,
        base_delay: Duration::from_millis(g.retry_base_ms),
    };
    let generator: Box<dyn TextGenerator> = match &g.replay {
        Some(path) => {
            let entries: Vec<TranscriptEntry> = jsonl::read_strict(path)?;
            Box::new(ReplayGenerator::new(entries))
        }
        None => Box::new(HttpGenerator::new(Duration::from_secs(g.timeout_secs))),
    };
    let relations = cfg.relations();
    let run = generate_corpus(&pairs, &relations, generator.as_ref(), &gen_cfg, &retry, g.max_in_flight)?;
    let requests = pairs.len() * relations.len();
    if requests > 0 && run.failures.len() == requests {
        return Err(CliError::Core(intentkg::Error::Service(format!(
            "all {requests} generation requests failed; first error: {}",
            run.failures[0].error
        ))));
    }
    let assertions = run.assertions();
    let stats = corpus_stats(&assertions);
    log::info!(
        "{} assertions from {} requests ({} failed)",
        assertions.len(),
        requests,
        run.failures.len()
    );

    write_jsonl(&l.generations(), &run.records)?;
    write_jsonl(&l.assertions(), &assertions)?;
    write_jsonl(&l.transcript(), &run.transcript)?;
    write_jsonl(&l.failures(), &run.failures)?;
    let null_tails = run.records.iter().filter(|r: &&GenerationRecord| r.tail.is_none()).count();
    write_json(
        &l.generation_report(),
        &json!({
            "requests": requests,
            "failed_requests": run.failures.len(),
            "generations": run.records.len(),
            "null_tails": null_tails,
            "corpus": stats,
        }),
    )?;
    Ok(vec![
        l.generations(),
        l.assertions(),
        l.transcript(),
        l.failures(),
        l.generation_report(),
    ])
}

/// Sentences shown to annotators and scorers, keyed by assertion id.
fn sentences(assertions: &[Assertion], pairs: &HashMap<String, CoBuyPair>) -> HashMap<String, String> {
    assertions
        .iter()
        .filter_map(|a| {
            let pair = pairs.get(&a.pair_id)?;
            Some((a.assertion_id.clone(), naturalize(&render_prompt(pair, a.relation), &a.tail)))
        })
        .collect()
}

fn read_votes(path: &Path) -> Result<Vec<VoteRecord>, CliError> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let loaded = jsonl::read_lenient::<VoteRecord>(path)?;
    Ok(loaded.records)
}

fn annotate_serve(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let a = &cfg.annotation;
    let assertions: Vec<Assertion> = jsonl::read_strict(&l.assertions())?;
    let (_, _, pairs) = load_pairs(l)?;
    let cards: Vec<CardSource> = assertions
        .iter()
        .filter_map(|x| Some(CardSource::new(x, pairs.get(&x.pair_id)?)))
        .collect();
    let with_card: Vec<Assertion> = assertions
        .iter()
        .filter(|x| pairs.contains_key(&x.pair_id))
        .cloned()
        .collect();

    // step one samples across relations; step two rates what step one
    // labeled plausible, so restarting the service advances the pools
    let plausibility: Vec<String> = stratified_by_relation(&with_card, a.plausibility_sample, cfg.seed)
        .into_iter()
        .map(|x| x.assertion_id)
        .collect();
    let votes_path = cfg.votes_path();
    let labels = labels_from_votes(&read_votes(&votes_path)?);
    let plausible: BTreeSet<&str> = labels
        .iter()
        .filter(|l| l.plausibility_label == Some(PlausibilityLabel::Plausible))
        .map(|l| l.assertion_id.as_str())
        .collect();
    let typicality: Vec<String> = plausibility
        .iter()
        .filter(|id| plausible.contains(id.as_str()))
        .cloned()
        .collect();
    log::info!(
        "serving {} plausibility and {} typicality assertions",
        plausibility.len(),
        typicality.len()
    );

    ensure_parent(&votes_path)?;
    let mut store = AnnotationStore::new(cards, plausibility, typicality)?;
    if let Some(workers) = &a.workers {
        store = store.with_workers(workers.iter().cloned());
    }
    let store = Arc::new(Mutex::new(store.with_log(&votes_path)?));

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(PathBuf::from("tokio runtime"), e))?;
    runtime
        .block_on(intentkg_server::serve(store.clone(), a.bind, shutdown_signal()))
        .map_err(|e| CliError::Io(PathBuf::from(a.bind.to_string()), e))?;

    let store = store.lock().unwrap_or_else(|p| p.into_inner());
    write_jsonl(&l.labels(), store.labels())?;
    write_json(
        &l.annotation_report(),
        &json!({
            "progress": store.progress(),
            "plausibility_agreement": store.agreement(Task::Plausibility),
            "typicality_agreement": store.agreement(Task::Typicality),
        }),
    )?;
    log::info!("annotation service stopped");
    Ok(vec![votes_path, l.labels(), l.annotation_report()])
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

#[derive(Debug, Serialize)]
struct TrainingCounts {
    train: usize,
    dev: usize,
}

fn populate(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let p = &cfg.population;
    let assertions: Vec<Assertion> = jsonl::read_strict(&l.assertions())?;
    let (_, _, pairs) = load_pairs(l)?;
    let texts = sentences(&assertions, &pairs);
    let votes = read_votes(&cfg.votes_path())?;
    let labels = labels_from_votes(&votes);

    let mut outputs = Vec::new();
    let mut training = BTreeMap::new();
    for task in [Task::Plausibility, Task::Typicality] {
        let examples = derive_training_labels(task, &labels, &texts);
        let (train_set, dev_set) = split_train_dev(&examples, p.train_ratio, cfg.seed);
        for (part, set) in [("train", &train_set), ("dev", &dev_set)] {
            let path = l.training(task, part);
            ensure_parent(&path)?;
            write_training_tsv(&path, set)?;
            outputs.push(path);
        }
        training.insert(
            task,
            TrainingCounts {
                train: train_set.len(),
                dev: dev_set.len(),
            },
        );
    }

    let scorer: Box<dyn Scorer> = match (&p.scores, &p.scorer_endpoint) {
        (Some(path), _) => Box::new(FileScorer::load(path)?),
        (None, Some(endpoint)) => Box::new(HttpScorer::new(
            endpoint,
            Duration::from_secs(p.timeout_secs),
            RetryPolicy::default(),
        )),
        (None, None) => return Err(CliError::NotConfigured("population.scores or population.scorer_endpoint")),
    };
    let outcome = score_assertions(scorer.as_ref(), &assertions, &texts, p.batch_size)?;
    let populated = filter_by_threshold(&outcome.scored, p.plausibility_threshold, p.typicality_threshold);
    log::info!(
        "{} of {} scored assertions pass the thresholds",
        populated.len(),
        outcome.scored.len()
    );

    write_jsonl(&l.scored(), &outcome.scored)?;
    write_jsonl(&l.populated(), &populated)?;
    let report = population_report(&outcome.scored, &populated, &labels, &pairs, p, &votes)?;
    write_json(
        &l.population_report(),
        &json!({
            "assertions": assertions.len(),
            "scored": outcome.scored.len(),
            "missing_scores": outcome.missing.len(),
            "populated": populated.len(),
            "labels": labels.len(),
            "training": training,
            "quality": report,
        }),
    )?;
    outputs.extend([l.scored(), l.populated(), l.population_report()]);
    Ok(outputs)
}

fn population_report(
    scored: &[ScoredAssertion],
    populated: &[ScoredAssertion],
    labels: &[LabelRecord],
    pairs: &HashMap<String, CoBuyPair>,
    p: &crate::config::PopulationSection,
    votes: &[VoteRecord],
) -> Result<Value, CliError> {
    let by_id: HashMap<&str, &ScoredAssertion> =
        scored.iter().map(|s| (s.assertion.assertion_id.as_str(), s)).collect();

    let (mut plau_pred, mut plau_gold) = (Vec::new(), Vec::new());
    let (mut typ_pred, mut typ_gold) = (Vec::new(), Vec::new());
    for label in labels {
        let Some(s) = by_id.get(label.assertion_id.as_str()) else { continue };
        if let Some(pl) = label.plausibility_label {
            plau_pred.push(s.plausibility);
            plau_gold.push(pl == PlausibilityLabel::Plausible);
        }
        if let Some(t) = label.typicality_score {
            typ_pred.push(s.typicality);
            typ_gold.push(t);
        }
    }
    let pr = if plau_pred.is_empty() {
        None
    } else {
        Some(pr_curve(&plau_pred, &plau_gold)?)
    };
    // undefined for fewer than two points or constant inputs
    let rho = spearman(&typ_pred, &typ_gold).ok();
    let typical_cut = p.typicality_threshold.unwrap_or(TYPICALITY_POSITIVE);
    Ok(json!({
        "plausibility_agreement": agreement_from_votes(votes, Task::Plausibility),
        "typicality_agreement": agreement_from_votes(votes, Task::Typicality),
        "acceptance": acceptance_by_threshold(scored, labels, &p.acceptance_thresholds),
        "plausibility_pr": pr,
        "typicality_spearman": rho,
        "novelty_ratio": novelty_ratio(populated, pairs),
        "subcategory_common_tails": subcategory_common_tails(populated, pairs, typical_cut, 5),
    }))
}

/// Parse files from the config plus those named in the sidecar index.
fn parse_files(cfg: &Config) -> Result<Vec<PathBuf>, CliError> {
    let mut files: BTreeSet<PathBuf> = cfg.mining.parses.iter().cloned().collect();
    if let Some(index) = &cfg.mining.parse_index {
        let text = std::fs::read_to_string(index).map_err(|e| CliError::from_io(index, e))?;
        let base = index.parent().unwrap_or(Path::new("."));
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((_, file)) = line.split_once('\t') else {
                return Err(CliError::Validation(format!(
                    "{}:{}: expected `assertion_id<TAB>file`",
                    index.display(),
                    n + 1
                )));
            };
            let file = Path::new(file.trim());
            files.insert(if file.is_relative() { base.join(file) } else { file.to_path_buf() });
        }
    }
    Ok(files.into_iter().collect())
}

#[derive(Debug, Serialize)]
struct RelationMining {
    assertions: usize,
    parsed: usize,
    min_support: usize,
    patterns: usize,
    coverage: f64,
}

fn mine(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let m = &cfg.mining;
    let populated: Vec<ScoredAssertion> = jsonl::read_strict(&l.populated())?;
    let mut by_id: HashMap<String, DepTree> = HashMap::new();
    let mut by_text: HashMap<String, DepTree> = HashMap::new();
    let mut skipped = 0;
    for file in parse_files(cfg)? {
        let text = std::fs::read_to_string(&file).map_err(|e| CliError::from_io(&file, e))?;
        let parsed = parse_conllu(&text);
        skipped += parsed.skipped;
        for tree in parsed.trees {
            match (&tree.sent_id, &tree.text) {
                (Some(id), _) => {
                    by_id.insert(id.clone(), tree);
                }
                (None, Some(t)) => {
                    by_text.insert(t.clone(), tree);
                }
                (None, None) => skipped += 1,
            }
        }
    }

    let mut groups: BTreeMap<_, Vec<(&Assertion, Option<&DepTree>)>> = BTreeMap::new();
    for s in &populated {
        let a = &s.assertion;
        let tree = by_id.get(&a.assertion_id).or_else(|| by_text.get(&a.tail));
        groups.entry(a.relation).or_default().push((a, tree));
    }

    let filter = PatternFilter {
        allow: m.allow.as_deref().map(read_ids).transpose()?,
        deny: m.deny.as_deref().map(read_ids).transpose()?.unwrap_or_default(),
    };
    let mut patterns: Vec<TreePattern> = Vec::new();
    let mut assignments: Vec<PatternAssignment> = Vec::new();
    let mut per_relation = BTreeMap::new();
    for (relation, members) in &groups {
        let trees: Vec<DepTree> = members.iter().filter_map(|(_, t)| t.cloned()).collect();
        let min_support = m.min_support.unwrap_or_else(|| default_min_support(trees.len()));
        let mining_cfg = MiningConfig {
            min_support,
            min_perfect: m.min_perfect,
            max_nodes: m.max_pattern_nodes,
        };
        let found = filter.apply(mine_relation(&trees, &mining_cfg, *relation));
        let assigned: Vec<PatternAssignment> = members
            .iter()
            .map(|(a, tree)| match tree {
                Some(t) => assign_pattern(&a.assertion_id, t, &found, &a.tail),
                None => PatternAssignment {
                    assertion_id: a.assertion_id.clone(),
                    pattern_id: None,
                    simplified_tail: a.tail.clone(),
                },
            })
            .collect();
        per_relation.insert(
            *relation,
            RelationMining {
                assertions: members.len(),
                parsed: trees.len(),
                min_support,
                patterns: found.len(),
                coverage: coverage(&assigned),
            },
        );
        log::info!("{relation}: {} patterns over {} trees", found.len(), trees.len());
        patterns.extend(found);
        assignments.extend(assigned);
    }
    assignments.sort_by(|a, b| a.assertion_id.cmp(&b.assertion_id));

    write_jsonl(&l.patterns(), &patterns)?;
    write_jsonl(&l.assignments(), &assignments)?;
    write_json(
        &l.mining_report(),
        &json!({
            "assertions": populated.len(),
            "skipped_sentences": skipped,
            "patterns": patterns.len(),
            "coverage": coverage(&assignments),
            "per_relation": per_relation,
        }),
    )?;
    Ok(vec![l.patterns(), l.assignments(), l.mining_report()])
}

fn read_ids(path: &Path) -> Result<BTreeSet<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(PatternFilter::parse_ids(&text))
}

/// Intention text of each populated assertion: the simplified tail when a
/// pattern was assigned, the tail itself otherwise.
fn intention_texts(populated: &[ScoredAssertion], assignments: &[PatternAssignment]) -> BTreeMap<String, String> {
    let simplified: HashMap<&str, &PatternAssignment> =
        assignments.iter().map(|a| (a.assertion_id.as_str(), a)).collect();
    populated
        .iter()
        .map(|s| {
            let a = &s.assertion;
            let text = match simplified.get(a.assertion_id.as_str()) {
                Some(pa) if pa.pattern_id.is_some() => pa.simplified_tail.clone(),
                _ => a.tail.clone(),
            };
            (kgstore::intention_id(&text), text)
        })
        .collect()
}

fn conceptualize(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let c = &cfg.conceptualize;
    let populated: Vec<ScoredAssertion> = jsonl::read_strict(&l.populated())?;
    let assignments: Vec<PatternAssignment> = jsonl::read_strict(&l.assignments())?;
    let path = c.concepts.as_ref().ok_or(CliError::NotConfigured("conceptualize.concepts"))?;
    let table = load_concept_table(path)?;
    let tails = intention_texts(&populated, &assignments);
    let abstracts = conceptualize_all(
        tails.iter().map(|(id, t)| (id.as_str(), t.as_str())),
        &table,
        c.top_k,
        c.min_weight,
    );
    log::info!("{} abstract intentions from {} tails", abstracts.len(), tails.len());
    write_jsonl(&l.abstracts(), &abstracts)?;
    Ok(vec![l.abstracts()])
}

fn assemble(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let populated: Vec<ScoredAssertion> = jsonl::read_strict(&l.populated())?;
    let (catalog, records, _) = load_pairs(l)?;
    let assignments: Vec<PatternAssignment> = jsonl::read_strict(&l.assignments())?;
    let abstracts: Vec<AbstractIntention> = jsonl::read_strict(&l.abstracts())?;
    let kg = kgstore::assemble(
        AssemblyInput {
            scored: &populated,
            pairs: &records,
            assignments: &assignments,
            abstracts: &abstracts,
            catalog: Some(&catalog),
        },
        cfg.population.plausibility_threshold,
    )?;
    kg.validate()?;
    std::fs::create_dir_all(l.kg_dir()).map_err(|e| CliError::Io(l.kg_dir(), e))?;
    kgstore::export(&kg, &l.kg_dir())?;
    write_json(&l.kg_stats(), &kgstore::stats(&kg))?;
    Ok(vec![l.kg_nodes(), l.kg_edges(), l.kg_stats()])
}

/// Text vectors for every intention node, from the configured file or the
/// hashed fallback.
fn text_vectors(cfg: &Config, kg: &KnowledgeGraph) -> Result<BTreeMap<String, Vector>, CliError> {
    let dim = cfg.embed.dim;
    if let Some(path) = &cfg.embed.tail_vectors {
        let loaded = embed::load_vectors(path)?;
        if let Some(bad) = loaded.values().find(|v| v.len() != dim) {
            return Err(CliError::Core(intentkg::Error::Dimension {
                expected: dim,
                actual: bad.len(),
            }));
        }
        return Ok(loaded);
    }
    Ok(kg
        .nodes_of(NodeKind::Intention)
        .map(|n| (n.id.clone(), hashed_text_vector(n.text.as_deref().unwrap_or(""), dim)))
        .collect())
}

fn read_graph(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

fn train_items(
    kg: &KnowledgeGraph,
    text: &BTreeMap<String, Vector>,
    cfg: &intentkg::embed::TrainConfig,
) -> Result<Option<(embed::TrainReport, TrainingSet)>, CliError> {
    let set = TrainingSet::from_kg(kg);
    if set.triples.is_empty() {
        return Ok(None);
    }
    let init: BTreeMap<String, Vector> = set
        .tails
        .iter()
        .filter_map(|t| text.get(t).map(|v| (t.clone(), v.clone())))
        .collect();
    let report = train(&set, cfg, Some(&init))?;
    Ok(Some((report, set)))
}

fn embed_stage(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let kg = kgstore::import(&l.kg_dir())?;
    let train_cfg = cfg.embed.train_config(cfg.seed);
    let text = text_vectors(cfg, &kg)?;
    let (report, set) = train_items(&kg, &text, &train_cfg)?
        .ok_or_else(|| CliError::Validation("the graph has no ASSERT edges to embed".into()))?;
    log::info!(
        "trained {} items, {} tails over {} triples",
        set.items.len(),
        set.tails.len(),
        set.triples.len()
    );
    let cobuy = train_cobuy(&read_graph(&l.graph())?, &train_cfg)?;

    ensure_parent(&l.item_vectors())?;
    embed::export_item_vectors(&report.table, &l.item_vectors())?;
    embed::write_vectors(&l.tail_vectors(), train_cfg.dim, &report.table.tails)?;
    embed::write_vectors(&l.text_vectors(), train_cfg.dim, &text)?;
    embed::export_item_vectors(&cobuy, &l.cobuy_vectors())?;
    let mut log_csv = String::from("epoch,mean_loss,probe_loss\n");
    for (i, (a, b)) in report.epoch_losses.iter().zip(&report.probe_losses).enumerate() {
        log_csv.push_str(&format!("{},{a:.6},{b:.6}\n", i + 1));
    }
    write_text(&l.embed_log(), &log_csv)?;
    Ok(vec![
        l.item_vectors(),
        l.tail_vectors(),
        l.text_vectors(),
        l.cobuy_vectors(),
        l.embed_log(),
    ])
}

fn to_features(map: BTreeMap<String, Vector>) -> HashMap<String, Vector> {
    map.into_iter().collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct VariantInfo {
    name: String,
    assert_edges: usize,
    coverage: Option<f64>,
    skipped: bool,
}

fn receval(cfg: &Config, l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let r = &cfg.receval;
    let path = r.interactions.as_ref().ok_or(CliError::NotConfigured("receval.interactions"))?;
    let data = load_interactions(path)?;
    if data.is_empty() {
        return Err(CliError::Validation(format!("{} has no interactions", path.display())));
    }
    let split = split_interactions(&data, cfg.seed);
    let dataset_items: BTreeSet<String> = data.iter().map(|x| x.item_id.clone()).collect();
    let kg = kgstore::import(&l.kg_dir())?;
    let dim = cfg.embed.dim;
    let text = embed::load_vectors(&l.text_vectors())?;
    let train_cfg = cfg.embed.train_config(cfg.seed);

    let mut configs = vec![AblationConfig {
        name: "none".into(),
        features: None,
        coverage: None,
    }];
    let mut variants = Vec::new();
    let cobuy = embed::load_vectors(&l.cobuy_vectors())?;
    let cobuy_cov = dataset_items.iter().filter(|i| cobuy.contains_key(*i)).count() as f64
        / dataset_items.len() as f64;
    configs.push(AblationConfig {
        name: "structure".into(),
        features: Some(to_features(cobuy)),
        coverage: Some(cobuy_cov),
    });
    let pooled = dataset_items
        .iter()
        .map(|i| Ok((i.clone(), avg_pool_tail_features(i, &kg, &text, dim)?)))
        .collect::<Result<HashMap<_, _>, intentkg::Error>>()?;
    configs.push(AblationConfig {
        name: "text".into(),
        features: Some(pooled),
        coverage: Some(item_coverage(&kg, &dataset_items)),
    });
    configs.push(AblationConfig {
        name: "kg".into(),
        features: Some(to_features(embed::load_vectors(&l.item_vectors())?)),
        coverage: Some(item_coverage(&kg, &dataset_items)),
    });

    let mut matched_variants: Vec<(String, KnowledgeGraph)> = vec![("matched".into(), kg.clone())];
    for t in &r.thresholds {
        matched_variants.push((format!("matched_p{t}"), kg.filter_by_threshold(*t, None)));
    }
    for (name, graph) in matched_variants {
        let matched = match_kg(&graph, &split.train, &dataset_items);
        let edges = matched.kg.edges_of(kgstore::EdgeKind::Assert).count();
        match train_items(&matched.kg, &text, &train_cfg)? {
            Some((report, _)) => {
                configs.push(AblationConfig {
                    name: name.clone(),
                    features: Some(to_features(report.table.items)),
                    coverage: Some(matched.coverage),
                });
                variants.push(VariantInfo {
                    name,
                    assert_edges: edges,
                    coverage: Some(matched.coverage),
                    skipped: false,
                });
            }
            None => {
                log::warn!("{name}: matched graph is empty, skipping");
                variants.push(VariantInfo {
                    name,
                    assert_edges: 0,
                    coverage: Some(matched.coverage),
                    skipped: true,
                });
            }
        }
    }

    let base = PredictorConfig {
        factors: r.factors,
        epochs: r.epochs,
        lr: r.lr,
        reg: r.reg,
        seed: cfg.seed,
    };
    let seeds: Vec<u64> = (0..r.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let rows = run_ablation(&configs, &split, &base, &seeds)?;
    for row in &rows {
        log::info!("{}: rmse {:.4} ± {:.4}", row.config, row.mean_rmse, row.std);
    }
    write_report_csv(&l.report_csv(), &rows)?;
    write_json(
        &l.receval_report(),
        &json!({
            "interactions": data.len(),
            "train": split.train.len(),
            "dev": split.dev.len(),
            "test": split.test.len(),
            "variants": variants,
            "rows": rows,
        }),
    )?;
    Ok(vec![l.report_csv(), l.receval_report()])
}

fn fmt_num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if v.is_f64() => format!("{x:.4}"),
        _ => v.to_string(),
    }
}

fn report(l: &Layout) -> Result<Vec<PathBuf>, CliError> {
    let ingest = read_json(&l.ingest_report())?;
    let generation = read_json(&l.generation_report())?;
    let population = read_json(&l.population_report())?;
    let mining = read_json(&l.mining_report())?;
    let kg = read_json(&l.kg_stats())?;
    let receval = read_json(&l.receval_report())?;

    let mut md = String::from("# Pipeline summary\n\n## Corpus\n\n| quantity | value |\n|---|---|\n");
    let rows = [
        ("co-buy pairs", &ingest["pairs"]),
        ("unique items", &ingest["unique_items"]),
        ("generation requests", &generation["requests"]),
        ("failed requests", &generation["failed_requests"]),
        ("assertions", &generation["corpus"]["assertions"]),
        ("unique tails", &generation["corpus"]["unique_tails"]),
        ("scored", &population["scored"]),
        ("populated", &population["populated"]),
        ("novelty ratio", &population["quality"]["novelty_ratio"]),
        ("pattern coverage", &mining["coverage"]),
    ];
    for (k, v) in rows {
        md.push_str(&format!("| {k} | {} |\n", fmt_num(v)));
    }

    md.push_str("\n## Annotation agreement\n\n| task | items | pairwise | kappa |\n|---|---|---|---|\n");
    for task in ["plausibility", "typicality"] {
        let a = &population["quality"][format!("{task}_agreement")];
        if a.is_null() {
            md.push_str(&format!("| {task} | 0 | | |\n"));
        } else {
            md.push_str(&format!(
                "| {task} | {} | {} | {} |\n",
                a["n_items"],
                fmt_num(&a["pairwise_agreement"]),
                fmt_num(&a["fleiss_kappa"])
            ));
        }
    }

    md.push_str("\n## Acceptance by plausibility threshold\n\n| threshold | size | accept rate |\n|---|---|---|\n");
    for row in population["quality"]["acceptance"].as_array().into_iter().flatten() {
        md.push_str(&format!(
            "| {} | {} | {} |\n",
            row["threshold"],
            row["size"],
            fmt_num(&row["accept_rate"])
        ));
    }

    md.push_str("\n## Graph\n\n| quantity | value |\n|---|---|\n");
    for key in [
        "item_nodes",
        "intention_nodes",
        "abstract_nodes",
        "assert_edges",
        "concept_assert_edges",
        "isa_weight_edges",
        "avg_tail_tokens",
    ] {
        md.push_str(&format!("| {key} | {} |\n", fmt_num(&kg[key])));
    }

    md.push_str("\n## Rating prediction\n\n| config | mean RMSE | std | coverage |\n|---|---|---|---|\n");
    let rows: Vec<AblationRow> = serde_json::from_value(receval["rows"].clone())
        .map_err(|e| CliError::Validation(format!("{}: {e}", l.receval_report().display())))?;
    for row in rows {
        let cov = row.coverage.map(|c| format!("{c:.4}")).unwrap_or_default();
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {cov} |\n",
            row.config, row.mean_rmse, row.std
        ));
    }
    write_text(&l.summary(), &md)?;
    Ok(vec![l.summary()])
}
