//! The walk-kernel embedder.
//!
//! Every fact of a target relation gets a vector φ(f), and every
//! (walk scheme, attribute) pair gets a square parameter ψ used through its
//! symmetrization. Training pushes the bilinear form φ(f)ᵀ ψ φ(f′) toward
//! the expected kernel distance between the walk value distributions of f
//! and f′, one sampled endpoint pair at a time.
//!
//! A new fact is embedded without touching any existing vector: each trained
//! pair contributes rows `ψ φ(fᵢ) · φ(f_new) ≈ KD(fᵢ, f_new)` for sampled
//! old facts fᵢ, and the minimum-norm least-squares solution of the stacked
//! system (via pseudoinverse) becomes φ(f_new). The expected kernel
//! distances on the old side use walk distributions cached at training time,
//! so extension never re-walks old facts.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kernels::{expected_kernel_distance, kd_monte_carlo, Kernel, KernelEntry, KernelRegistry};
use crate::numerics::{bilinear, pseudoinverse, Optimizer, OptimizerKind, SymmetricParam};
use crate::relational::{Database, FactId, Value};
use crate::walks::{
    destination_distribution, scheme_attribute_pairs, EndpointDistribution, ValueDistribution,
    WalkScheme,
};

/// How expected kernel distances are evaluated when building extension
/// systems: exactly (double sum over both supports) or by Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KdMode {
    Exact,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardHyperparams {
    /// Embedding dimension.
    pub dim: usize,
    /// Maximum walk scheme length.
    pub max_walk_len: usize,
    /// Training samples drawn per fact and scheme/attribute pair.
    pub n_samples: usize,
    /// Old facts sampled per pair when extending to a new fact.
    pub n_samples_new: usize,
    /// Minibatch size.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub kd: KdMode,
    pub seed: u64,
}

impl Default for ForwardHyperparams {
    fn default() -> ForwardHyperparams {
        ForwardHyperparams {
            dim: 100,
            max_walk_len: 2,
            n_samples: 5000,
            n_samples_new: 2500,
            batch_size: 50_000,
            epochs: 10,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            kd: KdMode::Exact,
            seed: 0,
        }
    }
}

impl ForwardHyperparams {
    fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.n_samples == 0
            || self.n_samples_new == 0
            || self.batch_size == 0
        {
            return Err(Error::InvalidConfig(
                "dim, n_samples, n_samples_new and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if let KdMode::MonteCarlo { samples: 0 } = self.kd {
            return Err(Error::InvalidConfig("monte carlo sample count must be positive".into()));
        }
        Ok(())
    }
}

/// A walk endpoint distribution conditioned on one attribute being non-null,
/// with the attribute values captured so later database changes cannot
/// invalidate it. `None`-ness upstream means the distribution does not exist.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointSample {
    pub facts: Vec<FactId>,
    pub values: Vec<Value>,
    pub probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EndpointSample {
    /// Conditions an endpoint distribution on `attr` being non-null.
    pub fn condition(
        db: &Database,
        endpoints: &EndpointDistribution,
        attr: usize,
    ) -> Option<EndpointSample> {
        let mut facts = Vec::new();
        let mut values = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (&id, &mass) in endpoints {
            let v = &db.fact(id).expect("endpoint facts exist").values[attr];
            if v.is_null() {
                continue;
            }
            facts.push(id);
            values.push(v.clone());
            probs.push(mass);
            total += mass;
        }
        if total <= 0.0 {
            return None;
        }
        let mut run = 0.0;
        let mut cumulative = Vec::with_capacity(probs.len());
        for p in probs.iter_mut() {
            *p /= total;
            run += *p;
            cumulative.push(run);
        }
        Some(EndpointSample { facts, values, probs, cumulative })
    }

    /// Draws an endpoint index proportionally to its probability.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let x = rng.gen_range(0.0..total);
        let idx = self.cumulative.partition_point(|&c| c <= x);
        idx.min(self.facts.len() - 1)
    }

    /// Marginal distribution over the attribute values.
    pub fn value_distribution(&self) -> ValueDistribution {
        let mut out = ValueDistribution::new();
        for (v, &p) in self.values.iter().zip(&self.probs) {
            *out.entry(v.clone()).or_insert(0.0) += p;
        }
        out
    }
}

/// One training sample: a pair of facts plus one sampled walk endpoint each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub fact: FactId,
    pub pair: usize,
    pub other: FactId,
    pub endpoint: FactId,
    pub other_endpoint: FactId,
}

#[derive(Debug)]
pub struct ForwardGradients {
    pub fact: DVector<f64>,
    pub other: DVector<f64>,
    pub psi_raw: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub target_relation: usize,
    pub hyperparams: ForwardHyperparams,
    /// Scheme/attribute pairs in canonical order; index is the pair id.
    pub pairs: Vec<(WalkScheme, usize)>,
    /// End relation of each pair's scheme.
    pub pair_end: Vec<usize>,
    pub phi: BTreeMap<FactId, DVector<f64>>,
    pub psi: Vec<SymmetricParam>,
    /// Kernels resolved at training time; extension keeps using them.
    pub kernels: KernelRegistry,
    pub schema_hash: String,
    pub epoch_losses: Vec<f64>,
    /// Walk distributions of embedded facts as of training (or extension)
    /// time, keyed by (fact, pair). `None` records "does not exist".
    cache: BTreeMap<(FactId, usize), Option<EndpointSample>>,
}

impl ForwardModel {
    pub fn cached_distribution(&self, fact: FactId, pair: usize) -> Option<&EndpointSample> {
        self.cache.get(&(fact, pair)).and_then(|e| e.as_ref())
    }

    fn pair_kernel(&self, pair: usize) -> &Kernel {
        let (_, attr) = self.pairs[pair];
        self.kernels.kernel(self.pair_end[pair], attr)
    }

    /// Recomputes every cached distribution against the given database.
    /// Used by all-at-once extension, where old facts are allowed to see the
    /// whole batch before new facts are embedded.
    pub fn refresh_distribution_cache(&mut self, db: &Database) -> Result<()> {
        let facts: Vec<FactId> = self.phi.keys().copied().collect();
        let mut fresh = BTreeMap::new();
        for &f in &facts {
            for (p, (scheme, attr)) in self.pairs.iter().enumerate() {
                let endpoints = destination_distribution(db, f, scheme)?;
                fresh.insert((f, p), EndpointSample::condition(db, &endpoints, *attr));
            }
        }
        self.cache = fresh;
        Ok(())
    }

    /// Removes a fact's vector and cached distributions, returning the vector
    /// if it was present. No other entry changes.
    pub fn delete_fact_embedding(&mut self, fact: FactId) -> Option<DVector<f64>> {
        let vector = self.phi.remove(&fact)?;
        for p in 0..self.pairs.len() {
            self.cache.remove(&(fact, p));
        }
        Some(vector)
    }
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize, sd: f64) -> DVector<f64> {
    let normal = Normal::new(0.0, sd).expect("positive standard deviation");
    DVector::from_fn(dim, |_, _| normal.sample(rng))
}

fn gaussian_matrix<R: Rng>(rng: &mut R, dim: usize, sd: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, sd).expect("positive standard deviation");
    DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng))
}

fn phi_key(fact: FactId) -> u64 {
    fact << 1
}

fn psi_key(pair: usize) -> u64 {
    ((pair as u64) << 1) | 1
}

/// Trains a model for one relation: initializes φ and ψ from the seed,
/// caches every walk distribution, draws endpoint samples, and runs
/// minibatch gradient descent on the squared bilinear-versus-KD residual.
pub fn train_static(
    db: &Database,
    relation: &str,
    hyperparams: &ForwardHyperparams,
    kernels: &KernelRegistry,
) -> Result<ForwardModel> {
    hyperparams.validate()?;
    let schema = db.schema();
    let rel = schema.relation_index(relation)?;
    let facts: Vec<FactId> = db.facts(rel).map(|f| f.id).collect();
    if facts.is_empty() {
        return Err(Error::EmptyRelation(relation.to_string()));
    }
    let pairs = scheme_attribute_pairs(schema, rel, hyperparams.max_walk_len);
    if pairs.is_empty() {
        return Err(Error::NoPairs(relation.to_string()));
    }
    let pair_end: Vec<usize> = pairs
        .iter()
        .map(|(s, _)| s.end_relation(schema).expect("enumerated schemes are valid"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyperparams.seed);
    let sd = 1.0 / (hyperparams.dim as f64).sqrt();
    let mut phi = BTreeMap::new();
    for &f in &facts {
        phi.insert(f, gaussian_vector(&mut rng, hyperparams.dim, sd));
    }
    let psi = (0..pairs.len())
        .map(|_| SymmetricParam::new(gaussian_matrix(&mut rng, hyperparams.dim, sd)))
        .collect::<Result<Vec<_>>>()?;

    let mut cache = BTreeMap::new();
    for &f in &facts {
        for (p, (scheme, attr)) in pairs.iter().enumerate() {
            let endpoints = destination_distribution(db, f, scheme)?;
            cache.insert((f, p), EndpointSample::condition(db, &endpoints, *attr));
        }
    }

    let mut model = ForwardModel {
        target_relation: rel,
        hyperparams: hyperparams.clone(),
        pairs,
        pair_end,
        phi,
        psi,
        kernels: kernels.clone(),
        schema_hash: schema.hash(),
        epoch_losses: Vec::new(),
        cache,
    };

    let samples = draw_training_samples(&model, hyperparams.n_samples, &mut rng);
    let mut optimizer = Optimizer::new(hyperparams.optimizer, hyperparams.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..hyperparams.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyperparams.batch_size) {
            epoch_loss += train_minibatch(db, &mut model, &samples, chunk, &mut optimizer)?;
        }
        model
            .epoch_losses
            .push(if samples.is_empty() { 0.0 } else { epoch_loss / samples.len() as f64 });
    }
    Ok(model)
}

/// Draws up to `n_samples` endpoint samples per (fact, pair) with existing
/// walk distributions. When the universe of distinct choices
/// (other fact, endpoint, other endpoint) is no larger than the budget it is
/// enumerated exactly once; otherwise samples are drawn with replacement.
pub fn draw_training_samples<R: Rng>(
    model: &ForwardModel,
    n_samples: usize,
    rng: &mut R,
) -> Vec<TrainingSample> {
    let mut eligible: Vec<Vec<FactId>> = vec![Vec::new(); model.pairs.len()];
    let mut support: Vec<BTreeMap<FactId, usize>> = vec![BTreeMap::new(); model.pairs.len()];
    for (&(f, p), entry) in &model.cache {
        if let Some(sample) = entry {
            if model.phi.contains_key(&f) {
                eligible[p].push(f);
                support[p].insert(f, sample.facts.len());
            }
        }
    }
    let total_support: Vec<usize> = support.iter().map(|m| m.values().sum()).collect();

    let mut out = Vec::new();
    for &f in model.phi.keys() {
        for p in 0..model.pairs.len() {
            let Some(own) = model.cached_distribution(f, p) else { continue };
            let own_support = own.facts.len();
            let others_support = total_support[p] - own_support;
            if others_support == 0 {
                continue;
            }
            let universe = own_support * others_support;
            if universe <= n_samples {
                for &other in &eligible[p] {
                    if other == f {
                        continue;
                    }
                    let other_dist = model.cached_distribution(other, p).unwrap();
                    for &g in &own.facts {
                        for &g2 in &other_dist.facts {
                            out.push(TrainingSample {
                                fact: f,
                                pair: p,
                                other,
                                endpoint: g,
                                other_endpoint: g2,
                            });
                        }
                    }
                }
            } else {
                let pos = eligible[p].binary_search(&f).expect("f is eligible");
                let n_others = eligible[p].len() - 1;
                for _ in 0..n_samples {
                    let mut idx = rng.gen_range(0..n_others);
                    if idx >= pos {
                        idx += 1;
                    }
                    let other = eligible[p][idx];
                    let other_dist = model.cached_distribution(other, p).unwrap();
                    let g = own.facts[own.draw(rng)];
                    let g2 = other_dist.facts[other_dist.draw(rng)];
                    out.push(TrainingSample {
                        fact: f,
                        pair: p,
                        other,
                        endpoint: g,
                        other_endpoint: g2,
                    });
                }
            }
        }
    }
    out
}

/// Loss and gradients of one sample: `½ (φ(f)ᵀ ψ φ(f′) − κ(g[A], g′[A]))²`.
pub fn forward_loss(
    db: &Database,
    model: &ForwardModel,
    sample: &TrainingSample,
) -> Result<(f64, ForwardGradients)> {
    let x = model
        .phi
        .get(&sample.fact)
        .ok_or(Error::MissingEmbedding(sample.fact))?;
    let y = model
        .phi
        .get(&sample.other)
        .ok_or(Error::MissingEmbedding(sample.other))?;
    let (_, attr) = model.pairs[sample.pair];
    let g = db
        .fact(sample.endpoint)
        .ok_or(Error::FactNotFound(sample.endpoint))?;
    let g2 = db
        .fact(sample.other_endpoint)
        .ok_or(Error::FactNotFound(sample.other_endpoint))?;
    let kernel = model.pair_kernel(sample.pair);
    let target = kernel.eval(&g.values[attr], &g2.values[attr])?;
    let w = &model.psi[sample.pair];
    let prediction = bilinear(x, w, y)?;
    let residual = prediction - target;
    let loss = 0.5 * residual * residual;
    let grad_fact = w.apply(y)? * residual;
    let grad_other = w.apply(x)? * residual;
    let psi_raw = (x * y.transpose() + y * x.transpose()) * (0.5 * residual);
    Ok((
        loss,
        ForwardGradients {
            fact: grad_fact,
            other: grad_other,
            psi_raw,
        },
    ))
}

fn train_minibatch(
    db: &Database,
    model: &mut ForwardModel,
    samples: &[TrainingSample],
    batch: &[usize],
    optimizer: &mut Optimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut phi_grads: BTreeMap<FactId, DVector<f64>> = BTreeMap::new();
    let mut psi_grads: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let dim = model.hyperparams.dim;
    for &i in batch {
        let sample = &samples[i];
        let (loss, grads) = forward_loss(db, model, sample)?;
        loss_sum += loss;
        *phi_grads
            .entry(sample.fact)
            .or_insert_with(|| DVector::zeros(dim)) += grads.fact;
        *phi_grads
            .entry(sample.other)
            .or_insert_with(|| DVector::zeros(dim)) += grads.other;
        *psi_grads
            .entry(sample.pair)
            .or_insert_with(|| DMatrix::zeros(dim, dim)) += grads.psi_raw;
    }
    let scale = 1.0 / batch.len() as f64;
    for (fact, mut grad) in phi_grads {
        grad *= scale;
        let param = model.phi.get_mut(&fact).unwrap();
        optimizer.step(phi_key(fact), param.as_mut_slice(), grad.as_slice(), None)?;
    }
    for (pair, mut grad) in psi_grads {
        grad *= scale;
        let param = model.psi[pair].raw_mut();
        optimizer.step(psi_key(pair), param.as_mut_slice(), grad.as_slice(), None)?;
    }
    Ok(loss_sum)
}

/// The stacked linear system that determines a new fact's vector.
#[derive(Debug)]
pub struct ExtensionSystem {
    pub new_fact: FactId,
    /// k×d matrix whose i-th row is `(ψ φ(fᵢ))ᵀ` for the sampled old fact.
    pub c: DMatrix<f64>,
    /// Expected kernel distances between the old facts' cached distributions
    /// and the new fact's fresh ones.
    pub b: DVector<f64>,
    /// (old fact, pair) per row.
    pub provenance: Vec<(FactId, usize)>,
    /// The new fact's walk distributions, cached on success.
    new_dists: Vec<Option<EndpointSample>>,
}

impl ExtensionSystem {
    /// A system from explicit constraint rows, for callers assembling their
    /// own (no distributions are cached when it is applied).
    pub fn from_parts(
        new_fact: FactId,
        c: DMatrix<f64>,
        b: DVector<f64>,
        provenance: Vec<(FactId, usize)>,
    ) -> ExtensionSystem {
        ExtensionSystem {
            new_fact,
            c,
            b,
            provenance,
            new_dists: Vec::new(),
        }
    }
}

fn collect_system<R: Rng>(
    db: &Database,
    model: &ForwardModel,
    f_new: FactId,
    rng: &mut R,
) -> Result<ExtensionSystem> {
    let fact = db.fact(f_new).ok_or(Error::FactNotFound(f_new))?;
    if fact.relation != model.target_relation {
        return Err(Error::RelationMismatch {
            expected: db.schema().relation(model.target_relation).name.clone(),
            found: db.schema().relation(fact.relation).name.clone(),
        });
    }
    if model.phi.contains_key(&f_new) {
        return Err(Error::ModelMismatch(format!("fact {f_new} already has an embedding")));
    }
    let dim = model.hyperparams.dim;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut b = Vec::new();
    let mut provenance = Vec::new();
    let mut new_dists = Vec::with_capacity(model.pairs.len());
    for (p, (scheme, attr)) in model.pairs.iter().enumerate() {
        let endpoints = destination_distribution(db, f_new, scheme)?;
        let new_dist = EndpointSample::condition(db, &endpoints, *attr);
        let Some(new_sample) = &new_dist else {
            new_dists.push(new_dist);
            continue;
        };
        let candidates: Vec<FactId> = model
            .phi
            .keys()
            .copied()
            .filter(|&f| model.cached_distribution(f, p).is_some())
            .collect();
        if candidates.is_empty() {
            new_dists.push(new_dist);
            continue;
        }
        let take = model.hyperparams.n_samples_new.min(candidates.len());
        let chosen: Vec<FactId> = if take == candidates.len() {
            candidates
        } else {
            let mut idx: Vec<usize> = (0..candidates.len()).collect();
            for i in 0..take {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx[..take].iter().map(|&i| candidates[i]).collect()
        };
        let kernel = model.pair_kernel(p);
        let new_values = new_sample.value_distribution();
        for f_old in chosen {
            let old_sample = model.cached_distribution(f_old, p).unwrap();
            let kd = match model.hyperparams.kd {
                KdMode::Exact => {
                    expected_kernel_distance(kernel, &old_sample.value_distribution(), &new_values)?
                }
                KdMode::MonteCarlo { samples } => kd_monte_carlo(
                    kernel,
                    &old_sample.value_distribution(),
                    &new_values,
                    samples,
                    rng,
                )?,
            };
            rows.push(model.psi[p].apply(&model.phi[&f_old])?);
            b.push(kd);
            provenance.push((f_old, p));
        }
        new_dists.push(new_dist);
    }
    let mut c = DMatrix::zeros(rows.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        c.set_row(i, &row.transpose());
    }
    Ok(ExtensionSystem {
        new_fact: f_new,
        c,
        b: DVector::from_vec(b),
        provenance,
        new_dists,
    })
}

/// Builds the extension system for one new fact. Walk distributions of the
/// new fact are computed against the current database; the old facts' side
/// comes from the model's cache.
pub fn build_extension_system<R: Rng>(
    db: &Database,
    model: &ForwardModel,
    f_new: FactId,
    rng: &mut R,
) -> Result<ExtensionSystem> {
    let system = collect_system(db, model, f_new, rng)?;
    if system.provenance.is_empty() {
        return Err(Error::NoUsableConstraints(f_new));
    }
    Ok(system)
}

/// Solves the system by pseudoinverse (minimum-norm least squares), stores
/// the new vector and the new fact's distributions, and returns the vector.
/// No existing entry of φ or ψ is modified.
pub fn extend_embedding(model: &mut ForwardModel, system: ExtensionSystem) -> Result<DVector<f64>> {
    if model.phi.contains_key(&system.new_fact) {
        return Err(Error::ModelMismatch(format!(
            "fact {} already has an embedding",
            system.new_fact
        )));
    }
    let vector = pseudoinverse(&system.c, None)? * &system.b;
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("extension solution".into()));
    }
    model.phi.insert(system.new_fact, vector.clone());
    for (p, dist) in system.new_dists.into_iter().enumerate() {
        model.cache.insert((system.new_fact, p), dist);
    }
    Ok(vector)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendMode {
    OneByOne,
    AllAtOnce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtendWarning {
    pub fact: FactId,
    pub message: String,
}

#[derive(Debug)]
pub struct ExtendReport {
    /// Extended facts with their new vectors, in application order.
    pub added: Vec<(FactId, DVector<f64>)>,
    pub warnings: Vec<ExtendWarning>,
}

/// Extends the model to a batch of newly inserted facts (facts outside the
/// target relation are ignored). One-by-one embeds each fact in turn, so
/// earlier facts of the batch serve as constraints for later ones;
/// all-at-once builds every system against the pre-batch model before
/// inserting any vector. Per-fact RNG streams are derived from
/// (base_seed, fact id), so a batch of one produces the same vector in both
/// modes. A fact with no usable constraints falls back to the mean of the
/// existing vectors, with a warning.
pub fn extend_batch(
    db: &Database,
    model: &mut ForwardModel,
    facts: &[FactId],
    mode: ExtendMode,
    base_seed: u64,
) -> Result<ExtendReport> {
    let mut targets: Vec<FactId> = Vec::new();
    for &f in facts {
        let fact = db.fact(f).ok_or(Error::FactNotFound(f))?;
        if fact.relation == model.target_relation {
            targets.push(f);
        }
    }
    if mode == ExtendMode::AllAtOnce {
        targets.sort_unstable();
    }
    let mut report = ExtendReport {
        added: Vec::new(),
        warnings: Vec::new(),
    };
    let phi_mean = |model: &ForwardModel| -> DVector<f64> {
        let dim = model.hyperparams.dim;
        if model.phi.is_empty() {
            return DVector::zeros(dim);
        }
        let mut sum = DVector::zeros(dim);
        for v in model.phi.values() {
            sum += v;
        }
        sum / model.phi.len() as f64
    };
    match mode {
        ExtendMode::OneByOne => {
            for &f in &targets {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, "extend", f));
                let system = collect_system(db, model, f, &mut rng)?;
                if system.provenance.is_empty() {
                    let vector = phi_mean(model);
                    model.phi.insert(f, vector.clone());
                    for (p, dist) in system.new_dists.into_iter().enumerate() {
                        model.cache.insert((f, p), dist);
                    }
                    report.warnings.push(ExtendWarning {
                        fact: f,
                        message: "no usable constraints; used the mean of existing vectors".into(),
                    });
                    report.added.push((f, vector));
                } else {
                    let vector = extend_embedding(model, system)?;
                    report.added.push((f, vector));
                }
            }
        }
        ExtendMode::AllAtOnce => {
            let mut systems = Vec::with_capacity(targets.len());
            for &f in &targets {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, "extend", f));
                systems.push(collect_system(db, model, f, &mut rng)?);
            }
            let fallback = phi_mean(model);
            for system in systems {
                let f = system.new_fact;
                if system.provenance.is_empty() {
                    model.phi.insert(f, fallback.clone());
                    for (p, dist) in system.new_dists.into_iter().enumerate() {
                        model.cache.insert((f, p), dist);
                    }
                    report.warnings.push(ExtendWarning {
                        fact: f,
                        message: "no usable constraints; used the mean of existing vectors".into(),
                    });
                    report.added.push((f, fallback.clone()));
                } else {
                    let vector = extend_embedding(model, system)?;
                    report.added.push((f, vector));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    scheme: String,
    attribute: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhiEntry {
    key: Vec<Value>,
    vector: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForwardModelFile {
    format: String,
    version: u32,
    schema_hash: String,
    target_relation: String,
    hyperparams: ForwardHyperparams,
    kernels: Vec<KernelEntry>,
    pairs: Vec<PairEntry>,
    epoch_losses: Vec<f64>,
    /// Fact key tuple → vector, in ascending fact id order.
    phi: Vec<PhiEntry>,
    /// Raw ψ matrices, column-major.
    psi: Vec<Vec<f64>>,
}

const FORWARD_FORMAT: &str = "relemb-forward";

/// Serializes the model to pretty JSON. Keyed by fact key tuples (not ids),
/// so it can be reloaded against a reloaded database. Byte-identical for
/// byte-identical models.
pub fn save_model(model: &ForwardModel, db: &Database, path: &Path) -> Result<()> {
    let schema = db.schema();
    let mut phi = Vec::with_capacity(model.phi.len());
    for (&f, vector) in &model.phi {
        let fact = db.fact(f).ok_or(Error::FactNotFound(f))?;
        phi.push(PhiEntry {
            key: fact.key(schema),
            vector: vector.as_slice().to_vec(),
        });
    }
    let file = ForwardModelFile {
        format: FORWARD_FORMAT.into(),
        version: 1,
        schema_hash: model.schema_hash.clone(),
        target_relation: schema.relation(model.target_relation).name.clone(),
        hyperparams: model.hyperparams.clone(),
        kernels: model.kernels.entries(schema),
        pairs: model
            .pairs
            .iter()
            .zip(&model.pair_end)
            .map(|((scheme, attr), &end)| PairEntry {
                scheme: scheme.render(schema),
                attribute: schema.relation(end).attributes[*attr].name.clone(),
            })
            .collect(),
        epoch_losses: model.epoch_losses.clone(),
        phi,
        psi: model.psi.iter().map(|w| w.raw().as_slice().to_vec()).collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Loads a model against a database: the schema hash must match, every stored
/// key must resolve to a fact, and the walk distribution cache is rebuilt by
/// walking this database (the pre-insert snapshot for extension workflows).
pub fn load_model(path: &Path, db: &Database) -> Result<ForwardModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ForwardModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.format != FORWARD_FORMAT {
        return Err(Error::ModelMismatch(format!("unexpected format {:?}", file.format)));
    }
    let schema = db.schema();
    if file.schema_hash != schema.hash() {
        return Err(Error::ModelMismatch("schema hash differs".into()));
    }
    let rel = schema.relation_index(&file.target_relation)?;
    let mut pairs = Vec::with_capacity(file.pairs.len());
    let mut pair_end = Vec::with_capacity(file.pairs.len());
    for entry in &file.pairs {
        let scheme = WalkScheme::parse(schema, rel, &entry.scheme)?;
        let end = scheme.end_relation(schema)?;
        let attr = schema
            .relation(end)
            .attribute_index(&entry.attribute)
            .ok_or_else(|| Error::UnknownAttribute {
                relation: schema.relation(end).name.clone(),
                attribute: entry.attribute.clone(),
            })?;
        pairs.push((scheme, attr));
        pair_end.push(end);
    }
    let dim = file.hyperparams.dim;
    let mut phi = BTreeMap::new();
    for entry in &file.phi {
        let id = db
            .lookup_key(rel, &entry.key)
            .ok_or_else(|| Error::ModelMismatch(format!("no fact with key {:?}", entry.key)))?;
        if entry.vector.len() != dim {
            return Err(Error::ModelMismatch("vector length differs from dim".into()));
        }
        phi.insert(id, DVector::from_column_slice(&entry.vector));
    }
    let mut psi = Vec::with_capacity(file.psi.len());
    for raw in &file.psi {
        if raw.len() != dim * dim {
            return Err(Error::ModelMismatch("psi size differs from dim^2".into()));
        }
        psi.push(SymmetricParam::new(DMatrix::from_column_slice(dim, dim, raw))?);
    }
    if psi.len() != pairs.len() {
        return Err(Error::ModelMismatch("psi count differs from pair count".into()));
    }
    let kernels = KernelRegistry::from_entries(schema, &file.kernels)?;
    let mut model = ForwardModel {
        target_relation: rel,
        hyperparams: file.hyperparams,
        pairs,
        pair_end,
        phi,
        psi,
        kernels,
        schema_hash: file.schema_hash,
        epoch_losses: file.epoch_losses,
        cache: BTreeMap::new(),
    };
    model.refresh_distribution_cache(db)?;
    Ok(model)
}
