//! Rating-prediction evaluation of graph-derived item features.
//!
//! Interactions are split 8:1:1 per user. A biased matrix-factorization
//! predictor with an optional linear head over item features,
//!
//! ```text
//! ŷ(u, i) = μ + b_u + b_i + ⟨p_u, q_i⟩ + ⟨w, f_i⟩
//! ```
//!
//! is trained by SGD on the training split, and RMSE on the test split is
//! compared across feature sources.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Vector;
use crate::jsonl;
use crate::kgstore::{EdgeKind, KnowledgeGraph, NodeKind};
use crate::{Error, Result};

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Parses `user \t item \t rating \t timestamp` rows. Malformed rows are
/// skipped with a warning; the second value counts them.
pub fn parse_interactions(text: &str) -> (Vec<Interaction>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let parsed = match cols.as_slice() {
            [u, i, r, t] => match (r.parse::<f64>(), t.parse::<i64>()) {
                (Ok(rating), Ok(timestamp)) if rating.is_finite() => Some(Interaction {
                    user_id: u.to_string(),
                    item_id: i.to_string(),
                    rating,
                    timestamp,
                }),
                _ => None,
            },
            _ => None,
        };
        match parsed {
            Some(x) => out.push(x),
            None => {
                log::warn!("interactions line {}: malformed row skipped", lineno + 1);
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (rows, skipped) = parse_interactions(&text);
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} rows", path.display());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub dev: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Per-user 8:1:1 split. Each user's interactions are shuffled and a tenth
/// (rounded, at least one) goes to dev and to test; users with fewer than
/// three interactions go entirely to train.
pub fn split_interactions(data: &[Interaction], seed: u64) -> Split {
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for x in data {
        by_user.entry(x.user_id.as_str()).or_default().push(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (_, mut rows) in by_user {
        rows.sort_by(|a, b| {
            (a.timestamp, &a.item_id)
                .cmp(&(b.timestamp, &b.item_id))
                .then(a.rating.total_cmp(&b.rating))
        });
        let n = rows.len();
        if n < 3 {
            split.train.extend(rows.into_iter().cloned());
            continue;
        }
        rows.shuffle(&mut rng);
        let held = ((n as f64 * 0.1).round() as usize).max(1);
        let mut it = rows.into_iter().cloned();
        split.dev.extend(it.by_ref().take(held));
        split.test.extend(it.by_ref().take(held));
        split.train.extend(it);
    }
    split
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedKg {
    pub kg: KnowledgeGraph,
    /// Share of dataset items that appear as item nodes of the matched graph.
    pub coverage: f64,
}

/// Keeps the `ASSERT` edges (and what depends on them) whose head pair was
/// bought by one user within `train`.
pub fn match_kg(kg: &KnowledgeGraph, train: &[Interaction], dataset_items: &BTreeSet<String>) -> MatchedKg {
    let mut users_of: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for x in train {
        users_of.entry(x.item_id.as_str()).or_default().insert(x.user_id.as_str());
    }
    let co_bought = |a: &str, b: &str| match (users_of.get(a), users_of.get(b)) {
        (Some(ua), Some(ub)) => !ua.is_disjoint(ub),
        _ => false,
    };
    let matched = kg.restrict(|e| matches!(e.src.as_slice(), [a, b] if co_bought(a, b)));
    let coverage = item_coverage(&matched, dataset_items);
    MatchedKg { kg: matched, coverage }
}

pub fn item_coverage(kg: &KnowledgeGraph, dataset_items: &BTreeSet<String>) -> f64 {
    if dataset_items.is_empty() {
        return 0.0;
    }
    let covered = kg
        .nodes_of(NodeKind::Item)
        .filter(|n| dataset_items.contains(&n.id))
        .count();
    covered as f64 / dataset_items.len() as f64
}

/// Items named by `ASSERT` edges of `kg`.
pub fn kg_items(kg: &KnowledgeGraph) -> BTreeSet<String> {
    kg.edges_of(EdgeKind::Assert).flat_map(|e| e.src.iter().cloned()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub factors: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            factors: 8,
            epochs: 40,
            lr: 0.01,
            reg: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub mu: f64,
    user_ix: HashMap<String, usize>,
    item_ix: HashMap<String, usize>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub user_factors: Vec<Vector>,
    pub item_factors: Vec<Vector>,
    /// Weights of the feature head; empty without features.
    pub feature_weights: Vector,
    features: HashMap<String, Vector>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Predictor {
    fn feature(&self, item: &str) -> Option<&Vector> {
        self.features.get(item)
    }

    /// Unclamped prediction. Unknown users and items contribute nothing
    /// beyond the global mean and the feature head.
    pub fn predict_raw(&self, user: &str, item: &str) -> f64 {
        let u = self.user_ix.get(user).copied();
        let i = self.item_ix.get(item).copied();
        let mut y = self.mu;
        if let Some(u) = u {
            y += self.user_bias[u];
        }
        if let Some(i) = i {
            y += self.item_bias[i];
        }
        if let (Some(u), Some(i)) = (u, i) {
            y += dot(&self.user_factors[u], &self.item_factors[i]);
        }
        if let Some(f) = self.feature(item) {
            y += dot(&self.feature_weights, f);
        }
        y
    }

    pub fn predict(&self, user: &str, item: &str) -> f64 {
        self.predict_raw(user, item).clamp(RATING_MIN, RATING_MAX)
    }
}

/// Trains the predictor. Items missing from `features` use the zero
/// vector. Deterministic for a given seed.
pub fn train_predictor(
    train: &[Interaction],
    features: Option<&HashMap<String, Vector>>,
    cfg: &PredictorConfig,
) -> Result<Predictor> {
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let feat_dim = match features {
        Some(f) => {
            let dims: BTreeSet<usize> = f.values().map(Vec::len).collect();
            if dims.len() > 1 {
                return Err(Error::invalid("item features have mixed dimensions"));
            }
            dims.into_iter().next().unwrap_or(0)
        }
        None => 0,
    };
    let users: BTreeSet<&str> = train.iter().map(|x| x.user_id.as_str()).collect();
    let items: BTreeSet<&str> = train.iter().map(|x| x.item_id.as_str()).collect();
    let user_ix: HashMap<String, usize> = users.iter().enumerate().map(|(i, u)| (u.to_string(), i)).collect();
    let item_ix: HashMap<String, usize> = items.iter().enumerate().map(|(i, u)| (u.to_string(), i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = |n: usize| -> Vec<Vector> {
        (0..n)
            .map(|_| (0..cfg.factors).map(|_| rng.random_range(-0.05..0.05)).collect())
            .collect()
    };
    let user_factors = init(users.len());
    let item_factors = init(items.len());
    let mut model = Predictor {
        mu: train.iter().map(|x| x.rating).sum::<f64>() / train.len() as f64,
        user_bias: vec![0.0; users.len()],
        item_bias: vec![0.0; items.len()],
        user_factors,
        item_factors,
        feature_weights: vec![0.0; feat_dim],
        features: features.cloned().unwrap_or_default(),
        user_ix,
        item_ix,
    };

    let rows: Vec<(usize, usize, f64, Option<Vector>)> = train
        .iter()
        .map(|x| {
            (
                model.user_ix[&x.user_id],
                model.item_ix[&x.item_id],
                x.rating,
                model.feature(&x.item_id).cloned(),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (u, i, r, ref f) = rows[k];
            let mut pred = model.mu + model.user_bias[u] + model.item_bias[i]
                + dot(&model.user_factors[u], &model.item_factors[i]);
            if let Some(f) = f {
                pred += dot(&model.feature_weights, f);
            }
            let err = r - pred;
            model.user_bias[u] += cfg.lr * (err - cfg.reg * model.user_bias[u]);
            model.item_bias[i] += cfg.lr * (err - cfg.reg * model.item_bias[i]);
            for j in 0..cfg.factors {
                let (pu, qi) = (model.user_factors[u][j], model.item_factors[i][j]);
                model.user_factors[u][j] += cfg.lr * (err * qi - cfg.reg * pu);
                model.item_factors[i][j] += cfg.lr * (err * pu - cfg.reg * qi);
            }
            if let Some(f) = f {
                for (w, x) in model.feature_weights.iter_mut().zip(f) {
                    *w += cfg.lr * (err * x - cfg.reg * *w);
                }
            }
        }
    }
    Ok(model)
}

/// RMSE between predictions clamped to the rating range and the truth.
pub fn rmse_values(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            actual: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("RMSE of an empty set"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.clamp(RATING_MIN, RATING_MAX) - t).powi(2))
        .sum();
    Ok((sse / truth.len() as f64).sqrt())
}

pub fn rmse(model: &Predictor, test: &[Interaction]) -> Result<f64> {
    let preds: Vec<f64> = test.iter().map(|x| model.predict(&x.user_id, &x.item_id)).collect();
    let truth: Vec<f64> = test.iter().map(|x| x.rating).collect();
    rmse_values(&preds, &truth)
}

/// A feature source to compare. `features: None` is the plain predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub features: Option<HashMap<String, Vector>>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub mean_rmse: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub std: f64,
    pub coverage: Option<f64>,
    pub runs: Vec<f64>,
}

/// Trains one predictor per seed for each config on `split.train` and
/// reports test RMSE statistics. Every config sees the same split and seeds.
pub fn run_ablation(
    configs: &[AblationConfig],
    split: &Split,
    base: &PredictorConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    configs
        .iter()
        .map(|c| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let cfg = PredictorConfig { seed, ..base.clone() };
                    let model = train_predictor(&split.train, c.features.as_ref(), &cfg)?;
                    rmse(&model, &split.test)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&runs);
            Ok(AblationRow {
                config: c.name.clone(),
                mean_rmse: mean,
                std,
                coverage: c.coverage,
                runs,
            })
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes `config,mean_rmse,std,coverage` rows.
pub fn write_report_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    jsonl::write_atomic(path, |w| {
        writeln!(w, "config,mean_rmse,std,coverage").map_err(|e| Error::io(path, e))?;
        for r in rows {
            let cov = r.coverage.map(|c| format!("{c:.4}")).unwrap_or_default();
            writeln!(w, "{},{:.6},{:.6},{}", r.config, r.mean_rmse, r.std, cov).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ix(user: &str, item: &str, rating: f64, ts: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            timestamp: ts,
        }
    }

    #[test]
    fn split_sizes() {
        let ten: Vec<_> = (0..10).map(|k| ix("u", &format!("i{k}"), 3.0, k)).collect();
        let s = split_interactions(&ten, 1);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_interactions(&ten, 1));
        let two = vec![ix("u", "a", 1.0, 0), ix("u", "b", 2.0, 1)];
        let s = split_interactions(&two, 1);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (2, 0, 0));
    }

    #[test]
    fn parse_skips_bad_rows() {
        let (rows, skipped) = parse_interactions("u\ti\t4\t10\nu\ti\tfour\t10\nshort\n");
        assert_eq!(rows.len(), 1);
        assert_eq!(skipped, 2);
    }

    #[test]
    fn rmse_hand_case() {
        let r = rmse_values(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((r - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse_values(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!(rmse_values(&[], &[]).is_err());
        // clamping: 7 counts as 5
        assert_eq!(rmse_values(&[7.0], &[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn constant_ratings_predict_constant() {
        let data: Vec<_> = (0..30)
            .map(|k| ix(&format!("u{}", k % 5), &format!("i{}", k % 7), 4.0, k))
            .collect();
        let m = train_predictor(&data, None, &PredictorConfig::default()).unwrap();
        assert!((m.predict("u1", "i2") - 4.0).abs() < 0.05);
        assert!(train_predictor(&[], None, &PredictorConfig::default()).is_err());
    }

    #[test]
    fn seeds_repeat() {
        let data: Vec<_> = (0..30)
            .map(|k| ix(&format!("u{}", k % 5), &format!("i{}", k % 7), 1.0 + (k % 5) as f64, k))
            .collect();
        let cfg = PredictorConfig::default();
        assert_eq!(train_predictor(&data, None, &cfg).unwrap(), train_predictor(&data, None, &cfg).unwrap());
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
