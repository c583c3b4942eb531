//! Evaluation harness: attribute prediction from embeddings.
//!
//! The harness hides one categorical attribute from the embedders, trains a
//! multinomial logistic-regression classifier from embedding vectors to the
//! hidden labels, and reports accuracy. The static path cross-validates on a
//! single embedding of the whole database. The dynamic path removes a
//! stratified share of the facts (with cascades), trains on the remainder,
//! reinserts the removed facts group by group in reverse deletion order,
//! extends the embeddings to them without touching any old vector, and
//! evaluates the classifier on the extended vectors only.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::forward::{
    extend_batch, ExtendMode, ForwardHyperparams, ForwardModel,
};
use crate::graphembed::{extend_graph_model, DbGraph, GraphParams, SgnsModel};
use crate::kernels::KernelRegistry;
use crate::relational::{Database, FactId, Value};

/// One embedded, labeled fact.
#[derive(Debug, Clone)]
pub struct LabeledPoint {
    pub fact: FactId,
    pub vector: DVector<f64>,
    pub label: String,
}

/// Multinomial logistic regression trained by full-batch gradient descent.
/// Deterministic: zero-initialized weights, fixed epoch count, no sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> ClassifierConfig {
        ClassifierConfig {
            epochs: 400,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    /// Distinct labels in sorted order; predictions index into this.
    pub classes: Vec<String>,
    /// (dim + 1) × classes; the last row is the bias.
    weights: DMatrix<f64>,
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Classifier {
    fn features(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.mean.len();
        let mut out = DVector::zeros(d + 1);
        for i in 0..d {
            out[i] = (v[i] - self.mean[i]) / self.scale[i];
        }
        out[d] = 1.0;
        out
    }

    /// The predicted class label. Ties break toward the sorted-first class.
    pub fn predict(&self, v: &DVector<f64>) -> &str {
        let scores = self.weights.transpose() * self.features(v);
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        &self.classes[best]
    }

    /// Fraction of points whose predicted label matches.
    pub fn accuracy(&self, points: &[LabeledPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let correct = points
            .iter()
            .filter(|p| self.predict(&p.vector) == p.label)
            .count();
        correct as f64 / points.len() as f64
    }
}

fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row /= total;
    }
}

/// Trains the classifier. Features are standardized per dimension and scaled
/// by √dim so the loss surface is well-conditioned at any embedding width;
/// the scaling is absorbed into the learned weights and does not change the
/// model class.
pub fn train_classifier(points: &[LabeledPoint], cfg: &ClassifierConfig) -> Result<Classifier> {
    if points.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut classes: Vec<String> = points.iter().map(|p| p.label.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let n = points.len();
    let d = points[0].vector.len();
    for p in points {
        if p.vector.len() != d {
            return Err(Error::DimensionMismatch(
                "classifier features must share a dimension".into(),
            ));
        }
    }

    let mut mean = DVector::zeros(d);
    for p in points {
        mean += &p.vector;
    }
    mean /= n as f64;
    let mut var: DVector<f64> = DVector::zeros(d);
    for p in points {
        for i in 0..d {
            let diff = p.vector[i] - mean[i];
            var[i] += diff * diff;
        }
    }
    let sqrt_d = (d as f64).sqrt();
    let scale = DVector::from_fn(d, |i, _| (var[i] / n as f64).sqrt().max(1e-9) * sqrt_d);

    let mut x = DMatrix::zeros(n, d + 1);
    let mut y = DMatrix::zeros(n, classes.len());
    for (r, p) in points.iter().enumerate() {
        for i in 0..d {
            x[(r, i)] = (p.vector[i] - mean[i]) / scale[i];
        }
        x[(r, d)] = 1.0;
        let c = classes.binary_search(&p.label).expect("label is a class");
        y[(r, c)] = 1.0;
    }

    let mut weights: DMatrix<f64> = DMatrix::zeros(d + 1, classes.len());
    for _ in 0..cfg.epochs {
        let mut p = &x * &weights;
        softmax_rows(&mut p);
        let mut grad = x.transpose() * (p - &y) / n as f64;
        // L2 on everything but the bias row.
        for r in 0..d {
            for c in 0..classes.len() {
                grad[(r, c)] += cfg.l2 * weights[(r, c)];
            }
        }
        weights -= grad * cfg.learning_rate;
    }

    Ok(Classifier {
        classes,
        weights,
        mean,
        scale,
    })
}

/// Cross-validation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct CvResult {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_fold: Vec<f64>,
    pub warnings: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Stratified k-fold cross-validation. Classes with fewer than two members
/// are dropped (with a warning); each remaining class is shuffled and dealt
/// round-robin across folds with a carried offset, so fold sizes differ by at
/// most one globally and per class.
pub fn kfold_cv<R: Rng>(
    points: &[LabeledPoint],
    folds: usize,
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Result<CvResult> {
    if folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        by_class.entry(&p.label).or_default().push(i);
    }
    let mut warnings = Vec::new();
    let mut kept: Vec<(&str, Vec<usize>)> = Vec::new();
    for (label, members) in by_class {
        if members.len() < 2 {
            warnings.push(format!(
                "class {:?} has fewer than two members and was dropped",
                label
            ));
        } else {
            kept.push((label, members));
        }
    }
    if kept.len() < 2 {
        return Err(Error::SingleClass);
    }
    let total: usize = kept.iter().map(|(_, m)| m.len()).sum();
    if folds > total {
        return Err(Error::TooFewSamples { samples: total, folds });
    }

    let mut fold_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut offset = 0usize;
    for (_, members) in kept.iter_mut() {
        members.shuffle(rng);
        for (i, &idx) in members.iter().enumerate() {
            fold_of.insert(idx, (offset + i) % folds);
        }
        offset = (offset + members.len()) % folds;
    }

    let mut per_fold = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<LabeledPoint> = fold_of
            .iter()
            .filter(|&(_, &f)| f != fold)
            .map(|(&i, _)| points[i].clone())
            .collect();
        let test: Vec<LabeledPoint> = fold_of
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(&i, _)| points[i].clone())
            .collect();
        let classifier = train_classifier(&train, cfg)?;
        per_fold.push(classifier.accuracy(&test));
    }
    let (mean_accuracy, std_accuracy) = mean_std(&per_fold);
    Ok(CvResult {
        mean_accuracy,
        std_accuracy,
        per_fold,
        warnings,
    })
}

/// Picks a stratified share of the labeled facts: per-class quotas by the
/// largest-remainder method against a total of `round(ratio · n)`, members
/// chosen by per-class shuffle. Returns the chosen fact ids, sorted.
pub fn stratified_partition<R: Rng>(
    labeled: &[(FactId, String)],
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<FactId>> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "partition ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let n = labeled.len();
    let target = (ratio * n as f64).round() as usize;
    if target == 0 {
        return Err(Error::InvalidConfig(format!(
            "ratio {ratio} selects no facts out of {n}"
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<FactId>> = BTreeMap::new();
    for (id, label) in labeled {
        by_class.entry(label).or_default().push(*id);
    }
    let mut quotas: Vec<(&str, usize, f64)> = Vec::new(); // (label, base, remainder)
    let mut base_sum = 0usize;
    for (label, members) in &by_class {
        let exact = ratio * members.len() as f64;
        let base = exact.floor() as usize;
        quotas.push((label, base, exact - base as f64));
        base_sum += base;
    }
    let leftover = target.saturating_sub(base_sum);
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(b.0)));
    let mut quota_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (label, base, _)) in quotas.iter().enumerate() {
        let bonus = usize::from(i < leftover);
        quota_of.insert(label, base + bonus);
    }
    let mut picked = Vec::with_capacity(target);
    for (label, members) in by_class.iter_mut() {
        let take = quota_of[label].min(members.len());
        members.shuffle(rng);
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Which embedder an evaluation uses, with its hyperparameters.
#[derive(Debug, Clone)]
pub enum Embedder {
    Forward(ForwardHyperparams),
    Graph(GraphParams),
}

impl Embedder {
    pub fn name(&self) -> &'static str {
        match self {
            Embedder::Forward(_) => "forward",
            Embedder::Graph(_) => "graph",
        }
    }
}

/// A fitted embedder, unified over the two kinds.
pub enum FittedEmbedder {
    Forward(ForwardModel),
    Graph(DbGraph, SgnsModel),
}

impl FittedEmbedder {
    /// Trains on the database with the embedder's seed replaced by `seed`.
    pub fn fit(db: &Database, relation: &str, embedder: &Embedder, seed: u64) -> Result<FittedEmbedder> {
        match embedder {
            Embedder::Forward(hp) => {
                let mut hp = hp.clone();
                hp.seed = seed;
                let kernels = KernelRegistry::resolve(db)?;
                Ok(FittedEmbedder::Forward(crate::forward::train_static(
                    db, relation, &hp, &kernels,
                )?))
            }
            Embedder::Graph(params) => {
                let mut params = params.clone();
                params.seed = seed;
                let (graph, model) = crate::graphembed::train_static(db, &params)?;
                Ok(FittedEmbedder::Graph(graph, model))
            }
        }
    }

    pub fn vector(&self, fact: FactId) -> Result<DVector<f64>> {
        match self {
            FittedEmbedder::Forward(model) => model
                .phi
                .get(&fact)
                .cloned()
                .ok_or(Error::MissingEmbedding(fact)),
            FittedEmbedder::Graph(graph, model) => {
                Ok(model.fact_embedding(graph, fact)?.clone())
            }
        }
    }

    /// Extends to newly inserted facts. For the walk-kernel embedder in
    /// all-at-once mode, old walk distributions are refreshed against the
    /// post-insertion database first, so old facts see the whole batch; in
    /// one-by-one mode the training-time cache is used as-is. Facts outside
    /// the embedder's scope are ignored. Returns human-readable warnings.
    pub fn extend(
        &mut self,
        db: &Database,
        new_facts: &[FactId],
        mode: ExtendMode,
        base_seed: u64,
    ) -> Result<Vec<String>> {
        match self {
            FittedEmbedder::Forward(model) => {
                if mode == ExtendMode::AllAtOnce {
                    model.refresh_distribution_cache(db)?;
                }
                let report = extend_batch(db, model, new_facts, mode, base_seed)?;
                Ok(report
                    .warnings
                    .into_iter()
                    .map(|w| format!("fact {}: {}", w.fact, w.message))
                    .collect())
            }
            FittedEmbedder::Graph(graph, model) => {
                let report = extend_graph_model(graph, model, db, new_facts, base_seed)?;
                Ok(report
                    .merges
                    .iter()
                    .map(|m| {
                        format!(
                            "value classes merged: node {} retired into {}",
                            m.retired, m.survivor
                        )
                    })
                    .collect())
            }
        }
    }

    fn snapshot(&self) -> EmbedderSnapshot {
        match self {
            FittedEmbedder::Forward(model) => EmbedderSnapshot::Forward {
                phi: model
                    .phi
                    .iter()
                    .map(|(&f, v)| (f, v.iter().map(|x| x.to_bits()).collect()))
                    .collect(),
                psi: model
                    .psi
                    .iter()
                    .map(|w| w.raw().iter().map(|x| x.to_bits()).collect())
                    .collect(),
            },
            FittedEmbedder::Graph(_, model) => EmbedderSnapshot::Graph {
                in_bits: model
                    .in_vectors
                    .iter()
                    .map(|v| v.iter().map(|x| x.to_bits()).collect())
                    .collect(),
                out_bits: model
                    .out_vectors
                    .iter()
                    .map(|v| v.iter().map(|x| x.to_bits()).collect())
                    .collect(),
            },
        }
    }

    /// Errors unless every vector present at snapshot time still has exactly
    /// the same bits.
    fn check_unchanged(&self, snapshot: &EmbedderSnapshot) -> Result<()> {
        let stale = Error::ModelMismatch("extension modified a pre-existing vector".into());
        match (self, snapshot) {
            (FittedEmbedder::Forward(model), EmbedderSnapshot::Forward { phi, psi }) => {
                for (f, bits) in phi {
                    let Some(v) = model.phi.get(f) else { return Err(stale) };
                    if v.len() != bits.len()
                        || v.iter().zip(bits).any(|(x, &b)| x.to_bits() != b)
                    {
                        return Err(stale);
                    }
                }
                for (w, bits) in model.psi.iter().zip(psi) {
                    if w.raw().iter().zip(bits).any(|(x, &b)| x.to_bits() != b) {
                        return Err(stale);
                    }
                }
                Ok(())
            }
            (FittedEmbedder::Graph(_, model), EmbedderSnapshot::Graph { in_bits, out_bits }) => {
                for (v, bits) in model.in_vectors.iter().zip(in_bits) {
                    if v.iter().zip(bits).any(|(x, &b)| x.to_bits() != b) {
                        return Err(stale);
                    }
                }
                for (v, bits) in model.out_vectors.iter().zip(out_bits) {
                    if v.iter().zip(bits).any(|(x, &b)| x.to_bits() != b) {
                        return Err(stale);
                    }
                }
                Ok(())
            }
            _ => Err(Error::ModelMismatch("snapshot kind differs from embedder".into())),
        }
    }
}

enum EmbedderSnapshot {
    Forward {
        phi: BTreeMap<FactId, Vec<u64>>,
        psi: Vec<Vec<u64>>,
    },
    Graph {
        in_bits: Vec<Vec<u64>>,
        out_bits: Vec<Vec<u64>>,
    },
}

fn label_string(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Number(x) => format!("{x}"),
        Value::Null => unreachable!("labels are harvested from non-null cells"),
    }
}

/// Resolves and checks a prediction target: the attribute must exist, must
/// not be part of the relation's key, and must not take part in any foreign
/// key, so hiding it touches no constraint.
pub fn resolve_target(db: &Database, relation: &str, attribute: &str) -> Result<(usize, usize)> {
    let rel = db.schema().relation_index(relation)?;
    let rel_schema = db.schema().relation(rel);
    let attr = rel_schema
        .attribute_index(attribute)
        .ok_or_else(|| Error::UnknownAttribute {
            relation: relation.to_string(),
            attribute: attribute.to_string(),
        })?;
    if rel_schema.key.contains(&attr) {
        return Err(Error::InvalidConfig(format!(
            "prediction attribute {relation}.{attribute} is part of the key"
        )));
    }
    if db.schema().fk_involved(rel, attr) {
        return Err(Error::InvalidConfig(format!(
            "prediction attribute {relation}.{attribute} takes part in a foreign key"
        )));
    }
    Ok((rel, attr))
}

/// Labels of the prediction attribute keyed by fact key tuple (stable across
/// deletion and reinsertion). Facts with a null label are omitted.
pub fn harvest_labels(db: &Database, rel: usize, attr: usize) -> BTreeMap<Vec<Value>, String> {
    let mut out = BTreeMap::new();
    for fact in db.facts(rel) {
        if !fact.values[attr].is_null() {
            out.insert(fact.key(db.schema()), label_string(&fact.values[attr]));
        }
    }
    out
}

/// Static evaluation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct StaticEvalOutcome {
    pub cv: CvResult,
    pub embed_seconds: f64,
}

/// Masks the prediction attribute, embeds the whole database once, and
/// cross-validates the classifier on the labeled facts.
pub fn run_static_eval(
    db: &Database,
    relation: &str,
    attribute: &str,
    embedder: &Embedder,
    folds: usize,
    classifier: &ClassifierConfig,
    seed: u64,
    record_timing: bool,
) -> Result<StaticEvalOutcome> {
    let (rel, attr) = resolve_target(db, relation, attribute)?;
    let labels = harvest_labels(db, rel, attr);
    let mut work = db.clone();
    work.mask_attribute(rel, attr)?;

    let start = Instant::now();
    let fitted = FittedEmbedder::fit(&work, relation, embedder, derive_seed(seed, "embed", 0))?;
    let embed_seconds = if record_timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };

    let mut points = Vec::new();
    for fact in work.facts(rel) {
        if let Some(label) = labels.get(&fact.key(work.schema())) {
            points.push(LabeledPoint {
                fact: fact.id,
                vector: fitted.vector(fact.id)?,
                label: label.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "folds", 0));
    let cv = kfold_cv(&points, folds, classifier, &mut rng)?;
    Ok(StaticEvalOutcome { cv, embed_seconds })
}

/// Plan for a dynamic (delete, retrain, reinsert, extend) experiment.
#[derive(Debug, Clone, Serialize)]
pub struct DynamicPlan {
    pub relation: String,
    pub attribute: String,
    /// Share of labeled facts removed and later reinserted.
    pub new_ratio: f64,
    pub mode: ExtendMode,
    pub runs: usize,
    pub seed: u64,
    /// With timing off every recorded duration is 0.0, making reports
    /// byte-identical across equal-seed runs.
    pub record_timing: bool,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    /// Classifier accuracy on the dynamically extended vectors.
    pub accuracy: f64,
    /// Accuracy of always predicting the training majority class.
    pub baseline_accuracy: f64,
    /// Labeled facts evaluated after reinsertion.
    pub new_fact_count: usize,
    /// Facts removed across all cascades.
    pub removed_fact_count: usize,
    pub embed_seconds: f64,
    pub extend_seconds: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub embedder: String,
    pub plan: DynamicPlan,
    pub runs: Vec<RunRecord>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_baseline: f64,
}

/// One removed cascade group: the rows it will take to restore it.
struct RemovalGroup {
    rows: Vec<(String, Vec<Value>)>,
}

fn run_once(
    db: &Database,
    plan: &DynamicPlan,
    embedder: &Embedder,
    run: usize,
) -> Result<RunRecord> {
    let seed_run = derive_seed(plan.seed, "run", run as u64);
    let (rel, attr) = resolve_target(db, &plan.relation, &plan.attribute)?;
    let labels = harvest_labels(db, rel, attr);
    if labels.values().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::SingleClass);
    }

    let mut work = db.clone();
    work.mask_attribute(rel, attr)?;

    // Choose which labeled facts will be treated as "new".
    let labeled: Vec<(FactId, String)> = work
        .facts(rel)
        .filter_map(|f| labels.get(&f.key(work.schema())).map(|l| (f.id, l.clone())))
        .collect();
    let mut part_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed_run, "partition", 0));
    let chosen = stratified_partition(&labeled, plan.new_ratio, &mut part_rng)?;

    // Remove them (cascades included), recording each group's rows so it can
    // be reinserted exactly. A fact already dragged out by an earlier cascade
    // is skipped.
    let mut del_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed_run, "deletion", 0));
    let mut order = chosen;
    order.shuffle(&mut del_rng);
    let mut groups: Vec<RemovalGroup> = Vec::new();
    let mut removed_fact_count = 0usize;
    for id in order {
        if work.fact(id).is_none() {
            continue;
        }
        let preview = work.cascade_preview(id)?;
        let rows: Vec<(String, Vec<Value>)> = preview
            .iter()
            .map(|&g| {
                let f = work.fact(g).expect("previewed facts exist");
                (work.schema().relation(f.relation).name.clone(), f.values.clone())
            })
            .collect();
        removed_fact_count += rows.len();
        work.cascade_delete(id)?;
        groups.push(RemovalGroup { rows });
    }

    // Static training on the reduced database.
    let embed_start = Instant::now();
    let mut fitted =
        FittedEmbedder::fit(&work, &plan.relation, embedder, derive_seed(seed_run, "embed", 0))?;
    let embed_seconds = if plan.record_timing {
        embed_start.elapsed().as_secs_f64()
    } else {
        0.0
    };

    // Classifier on the old facts.
    let mut old_points = Vec::new();
    for fact in work.facts(rel) {
        if let Some(label) = labels.get(&fact.key(work.schema())) {
            old_points.push(LabeledPoint {
                fact: fact.id,
                vector: fitted.vector(fact.id)?,
                label: label.clone(),
            });
        }
    }
    let classifier = train_classifier(&old_points, &plan.classifier)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &old_points {
        *counts.entry(&p.label).or_insert(0) += 1;
    }
    let majority = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(label, _)| label.to_string())
        .expect("old points are non-empty");

    let snapshot = fitted.snapshot();
    let extend_seed = derive_seed(seed_run, "extend", 0);

    // Reinsert in reverse deletion order and extend the embeddings. The
    // cascade rules guarantee reverse order is foreign-key consistent.
    let mut warnings = Vec::new();
    let mut new_ids: Vec<FactId> = Vec::new();
    let mut extend_seconds = 0.0;
    match plan.mode {
        ExtendMode::OneByOne => {
            for group in groups.iter().rev() {
                let ids = work.insert_batch(group.rows.clone())?;
                let start = Instant::now();
                warnings.extend(fitted.extend(&work, &ids, ExtendMode::OneByOne, extend_seed)?);
                if plan.record_timing {
                    extend_seconds += start.elapsed().as_secs_f64();
                }
                new_ids.extend(ids);
            }
        }
        ExtendMode::AllAtOnce => {
            let rows: Vec<(String, Vec<Value>)> = groups
                .iter()
                .rev()
                .flat_map(|g| g.rows.iter().cloned())
                .collect();
            if !rows.is_empty() {
                let ids = work.insert_batch(rows)?;
                let start = Instant::now();
                warnings.extend(fitted.extend(&work, &ids, ExtendMode::AllAtOnce, extend_seed)?);
                if plan.record_timing {
                    extend_seconds += start.elapsed().as_secs_f64();
                }
                new_ids.extend(ids);
            }
        }
    }

    fitted.check_unchanged(&snapshot)?;

    // Evaluate only the reinserted, labeled facts of the target relation.
    let mut new_points = Vec::new();
    for &id in &new_ids {
        let fact = work.fact(id).expect("reinserted facts exist");
        if fact.relation != rel {
            continue;
        }
        if let Some(label) = labels.get(&fact.key(work.schema())) {
            new_points.push(LabeledPoint {
                fact: id,
                vector: fitted.vector(id)?,
                label: label.clone(),
            });
        }
    }
    if new_points.is_empty() {
        return Err(Error::InvalidConfig(
            "no labeled facts were reinserted; nothing to evaluate".into(),
        ));
    }
    let accuracy = classifier.accuracy(&new_points);
    let baseline_accuracy = new_points
        .iter()
        .filter(|p| p.label == majority)
        .count() as f64
        / new_points.len() as f64;

    Ok(RunRecord {
        run,
        accuracy,
        baseline_accuracy,
        new_fact_count: new_points.len(),
        removed_fact_count,
        embed_seconds,
        extend_seconds,
        warnings,
    })
}

/// Runs the dynamic experiment `plan.runs` times with derived seeds and
/// aggregates accuracy. Old vectors are asserted bit-identical after every
/// extension; a violation is an error, not a statistic.
pub fn run_dynamic_experiment(
    db: &Database,
    plan: &DynamicPlan,
    embedder: &Embedder,
) -> Result<ExperimentReport> {
    if plan.runs == 0 {
        return Err(Error::InvalidConfig("experiment needs at least one run".into()));
    }
    let mut runs = Vec::with_capacity(plan.runs);
    for run in 0..plan.runs {
        runs.push(run_once(db, plan, embedder, run)?);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let baselines: Vec<f64> = runs.iter().map(|r| r.baseline_accuracy).collect();
    let (mean_baseline, _) = mean_std(&baselines);
    Ok(ExperimentReport {
        embedder: embedder.name().to_string(),
        plan: plan.clone(),
        runs,
        mean_accuracy,
        std_accuracy,
        mean_baseline,
    })
}

/// Writes a report as pretty JSON (byte-identical for byte-identical
/// reports).
pub fn write_report_json(report: &ExperimentReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Writes per-run rows as CSV.
pub fn write_report_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    write_reports_csv(std::slice::from_ref(report), path)
}

/// Writes several reports (e.g. a ratio sweep) into one CSV, one row per
/// (ratio, run, mode) in report order.
pub fn write_reports_csv(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "embedder",
        "ratio",
        "run",
        "mode",
        "accuracy",
        "baseline_accuracy",
        "new_fact_count",
        "embed_seconds",
        "extend_seconds",
    ])
    .map_err(Error::from)?;
    for report in reports {
        let mode = match report.plan.mode {
            ExtendMode::OneByOne => "one_by_one",
            ExtendMode::AllAtOnce => "all_at_once",
        };
        for r in &report.runs {
            w.write_record([
                report.embedder.as_str(),
                &format!("{}", report.plan.new_ratio),
                &format!("{}", r.run),
                mode,
                &format!("{}", r.accuracy),
                &format!("{}", r.baseline_accuracy),
                &format!("{}", r.new_fact_count),
                &format!("{}", r.embed_seconds),
                &format!("{}", r.extend_seconds),
            ])
            .map_err(Error::from)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blob(center: &[f64], jitter: f64, label: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledPoint> {
        (0..n)
            .map(|i| {
                let vector = DVector::from_fn(center.len(), |r, _| {
                    center[r] + jitter * (rng.gen::<f64>() - 0.5)
                });
                LabeledPoint {
                    fact: i as FactId,
                    vector,
                    label: label.to_string(),
                }
            })
            .collect()
    }

    #[test]
    fn classifier_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = blob(&[1.0, 0.0, 0.0], 0.2, "a", 30, &mut rng);
        points.extend(blob(&[0.0, 1.0, 0.0], 0.2, "b", 30, &mut rng));
        points.extend(blob(&[0.0, 0.0, 1.0], 0.2, "c", 30, &mut rng));
        let clf = train_classifier(&points, &ClassifierConfig::default()).unwrap();
        assert_eq!(clf.accuracy(&points), 1.0);
    }

    #[test]
    fn classifier_rejects_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points = blob(&[1.0, 0.0], 0.1, "only", 10, &mut rng);
        assert!(matches!(
            train_classifier(&points, &ClassifierConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn kfold_is_stratified_and_drops_tiny_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut points = blob(&[1.0, 0.0], 0.2, "a", 10, &mut rng);
        points.extend(blob(&[0.0, 1.0], 0.2, "b", 10, &mut rng));
        points.extend(blob(&[5.0, 5.0], 0.2, "lonely", 1, &mut rng));
        let mut cv_rng = ChaCha8Rng::seed_from_u64(4);
        let result = kfold_cv(&points, 5, &ClassifierConfig::default(), &mut cv_rng).unwrap();
        assert_eq!(result.per_fold.len(), 5);
        assert_eq!(result.warnings.len(), 1);
        assert!(result.mean_accuracy > 0.9, "mean {}", result.mean_accuracy);
    }

    #[test]
    fn kfold_rejects_more_folds_than_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = blob(&[1.0], 0.1, "a", 3, &mut rng);
        points.extend(blob(&[0.0], 0.1, "b", 3, &mut rng));
        let mut cv_rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            kfold_cv(&points, 7, &ClassifierConfig::default(), &mut cv_rng),
            Err(Error::TooFewSamples { samples: 6, folds: 7 })
        ));
    }

    #[test]
    fn partition_hits_class_quotas() {
        let labeled: Vec<(FactId, String)> = (0..30)
            .map(|i| (i as FactId, if i < 20 { "x".into() } else { "y".into() }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let picked = stratified_partition(&labeled, 0.3, &mut rng).unwrap();
        assert_eq!(picked.len(), 9);
        let x_count = picked.iter().filter(|&&id| id < 20).count();
        assert_eq!(x_count, 6);
        assert_eq!(picked.len() - x_count, 3);
    }
}
