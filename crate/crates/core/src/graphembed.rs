//! The graph embedder.
//!
//! The database becomes a bipartite graph: one node per fact, one node per
//! (relation, attribute, value) class with non-null value, where classes on
//! the two sides of a foreign key position holding the same value are
//! identified (transitively). Facts connect to the value classes they
//! contain. Second-order biased random walks over this graph feed skip-gram
//! with negative sampling; a fact's embedding is the in-vector of its node.
//!
//! New facts extend the graph in place: fresh nodes get random vectors,
//! walks are started only at fresh nodes, and every pre-existing node is
//! frozen, so old embeddings keep their exact bits.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numerics::{Optimizer, OptimizerKind};
use crate::relational::{Database, FactId, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Embedding dimension.
    pub dim: usize,
    pub walks_per_node: usize,
    /// Nodes per walk, start included.
    pub steps_per_walk: usize,
    /// Skip-gram window radius.
    pub window: usize,
    /// Negative samples per positive pair.
    pub negatives: usize,
    /// Minibatch size, in pairs.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of the extension phase.
    pub dynamic_epochs: usize,
    /// Return bias p: weight 1/p for stepping back to the previous node.
    pub return_param: f64,
    /// In-out bias q: weight 1/q for leaving the previous node's neighborhood.
    pub inout_param: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> GraphParams {
        GraphParams {
            dim: 100,
            walks_per_node: 40,
            steps_per_walk: 30,
            window: 5,
            negatives: 20,
            batch_size: 40_000,
            epochs: 10,
            dynamic_epochs: 5,
            return_param: 1.0,
            inout_param: 1.0,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl GraphParams {
    fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.walks_per_node == 0
            || self.steps_per_walk == 0
            || self.window == 0
            || self.batch_size == 0
        {
            return Err(Error::InvalidConfig(
                "dim, walks_per_node, steps_per_walk, window and batch_size must be positive"
                    .into(),
            ));
        }
        if !(self.return_param > 0.0) || !(self.inout_param > 0.0) {
            return Err(Error::InvalidConfig("return and in-out biases must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Persistent identity of a graph node: a fact (by relation and key) or a
/// value class (by its canonical, i.e. smallest, member triple).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKey {
    Fact { relation: String, key: Vec<Value> },
    Value { relation: String, attribute: String, value: Value },
}

type Triple = (usize, usize, Value);

#[derive(Debug, Clone)]
pub struct DbGraph {
    node_keys: Vec<NodeKey>,
    adjacency: Vec<Vec<usize>>,
    retired: Vec<bool>,
    fact_nodes: BTreeMap<FactId, usize>,
    triple_node: HashMap<Triple, usize>,
}

/// A value-class merge caused by extension: two previously distinct old
/// nodes were identified through a new value occurrence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeEvent {
    pub survivor: usize,
    pub retired: usize,
}

#[derive(Debug)]
pub struct GraphExtension {
    /// Fresh node ids (fact nodes, then value class nodes).
    pub new_nodes: Vec<usize>,
    pub merges: Vec<MergeEvent>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn value_key(db: &Database, triple: &Triple) -> NodeKey {
    let rel = db.schema().relation(triple.0);
    NodeKey::Value {
        relation: rel.name.clone(),
        attribute: rel.attributes[triple.1].name.clone(),
        value: triple.2.clone(),
    }
}

fn fact_key(db: &Database, fact: FactId) -> NodeKey {
    let f = db.fact(fact).expect("fact exists");
    NodeKey::Fact {
        relation: db.schema().relation(f.relation).name.clone(),
        key: f.key(db.schema()),
    }
}

/// Foreign-key positions that identify value classes: for every foreign key
/// and every paired attribute position, (source rel, source attr) pairs with
/// (target rel, target attr).
fn identification_positions(db: &Database) -> Vec<((usize, usize), (usize, usize))> {
    let mut out = Vec::new();
    for fk in &db.schema().foreign_keys {
        for (&s, &t) in fk.source_attrs.iter().zip(&fk.target_attrs) {
            out.push(((fk.source, s), (fk.target, t)));
        }
    }
    out
}

impl DbGraph {
    /// Builds the graph for a whole database. Node numbering is canonical:
    /// fact nodes in ascending fact id order, then value class nodes sorted
    /// by canonical key.
    pub fn build(db: &Database) -> DbGraph {
        let mut triples: Vec<Triple> = Vec::new();
        let mut triple_idx: HashMap<Triple, usize> = HashMap::new();
        let schema = db.schema();
        let mut fact_ids: Vec<FactId> = Vec::new();
        for rel in 0..schema.relations.len() {
            for fact in db.facts(rel) {
                fact_ids.push(fact.id);
                for (attr, v) in fact.values.iter().enumerate() {
                    if v.is_null() {
                        continue;
                    }
                    let t: Triple = (rel, attr, v.clone());
                    triple_idx.entry(t.clone()).or_insert_with(|| {
                        triples.push(t);
                        triples.len() - 1
                    });
                }
            }
        }
        fact_ids.sort_unstable();

        let mut uf = UnionFind::new(triples.len());
        for ((sr, sa), (tr, ta)) in identification_positions(db) {
            for (i, t) in triples.iter().enumerate() {
                if t.0 == sr && t.1 == sa {
                    if let Some(&j) = triple_idx.get(&(tr, ta, t.2.clone())) {
                        uf.union(i, j);
                    }
                }
            }
        }

        let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..triples.len() {
            let root = uf.find(i);
            classes.entry(root).or_default().push(i);
        }
        let mut class_list: Vec<(NodeKey, Vec<usize>)> = classes
            .into_values()
            .map(|members| {
                let key = members
                    .iter()
                    .map(|&i| value_key(db, &triples[i]))
                    .min()
                    .expect("classes are non-empty");
                (key, members)
            })
            .collect();
        class_list.sort_by(|a, b| a.0.cmp(&b.0));

        let mut node_keys: Vec<NodeKey> = Vec::with_capacity(fact_ids.len() + class_list.len());
        let mut fact_nodes = BTreeMap::new();
        for &f in &fact_ids {
            fact_nodes.insert(f, node_keys.len());
            node_keys.push(fact_key(db, f));
        }
        let mut triple_node: HashMap<Triple, usize> = HashMap::new();
        for (key, members) in class_list {
            let id = node_keys.len();
            node_keys.push(key);
            for m in members {
                triple_node.insert(triples[m].clone(), id);
            }
        }

        let mut graph = DbGraph {
            adjacency: vec![Vec::new(); node_keys.len()],
            retired: vec![false; node_keys.len()],
            node_keys,
            fact_nodes,
            triple_node,
        };
        for &f in &fact_ids {
            graph.connect_fact(db, f);
        }
        graph
    }

    fn connect_fact(&mut self, db: &Database, fact: FactId) {
        let f = db.fact(fact).expect("fact exists");
        let v_node = self.fact_nodes[&fact];
        let mut targets: Vec<usize> = f
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_null())
            .map(|(attr, v)| self.triple_node[&(f.relation, attr, v.clone())])
            .collect();
        targets.sort_unstable();
        targets.dedup();
        for u in targets {
            insert_sorted(&mut self.adjacency[v_node], u);
            insert_sorted(&mut self.adjacency[u], v_node);
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_keys.len()
    }

    /// Node ids that are alive (not retired by a merge), in order.
    pub fn live_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| !self.retired[n]).collect()
    }

    pub fn is_retired(&self, node: usize) -> bool {
        self.retired[node]
    }

    pub fn node_key(&self, node: usize) -> &NodeKey {
        &self.node_keys[node]
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn fact_node(&self, fact: FactId) -> Option<usize> {
        self.fact_nodes.get(&fact).copied()
    }

    /// The node currently holding a (relation, attribute, value) triple.
    pub fn value_node(&self, rel: usize, attr: usize, value: &Value) -> Option<usize> {
        self.triple_node.get(&(rel, attr, value.clone())).copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Adds nodes and edges for newly inserted facts. Old fact nodes never
    /// change identity; old value classes may merge when a new occurrence
    /// identifies them, in which case the node with the larger canonical key
    /// retires into the other and the event is reported.
    pub fn extend(&mut self, db: &Database, new_facts: &[FactId]) -> Result<GraphExtension> {
        let mut facts: Vec<FactId> = Vec::new();
        for &f in new_facts {
            if db.fact(f).is_none() {
                return Err(Error::FactNotFound(f));
            }
            if !self.fact_nodes.contains_key(&f) {
                facts.push(f);
            }
        }
        facts.sort_unstable();
        facts.dedup();

        let mut new_triples: Vec<Triple> = Vec::new();
        let mut new_triple_idx: HashMap<Triple, usize> = HashMap::new();
        for &fid in &facts {
            let f = db.fact(fid).unwrap();
            for (attr, v) in f.values.iter().enumerate() {
                if v.is_null() {
                    continue;
                }
                let t: Triple = (f.relation, attr, v.clone());
                if self.triple_node.contains_key(&t) {
                    continue;
                }
                new_triple_idx.entry(t.clone()).or_insert_with(|| {
                    new_triples.push(t);
                    new_triples.len() - 1
                });
            }
        }

        // Union-find over old class nodes (by node id) and new triples.
        // Elements 0..n_new are the new triples; old classes are appended on
        // first contact.
        let n_new = new_triples.len();
        let mut elements: Vec<usize> = Vec::new(); // element idx (>= n_new) -> old node id
        let mut old_element: HashMap<usize, usize> = HashMap::new();
        let mut uf = UnionFind::new(n_new);
        let touch_old = |uf: &mut UnionFind, elements: &mut Vec<usize>, old_element: &mut HashMap<usize, usize>, node: usize| -> usize {
            *old_element.entry(node).or_insert_with(|| {
                elements.push(node);
                uf.parent.push(uf.parent.len());
                n_new + elements.len() - 1
            })
        };
        let positions = identification_positions(db);
        for (i, t) in new_triples.iter().enumerate() {
            for &((sr, sa), (tr, ta)) in &positions {
                for (here, there) in [((sr, sa), (tr, ta)), ((tr, ta), (sr, sa))] {
                    if (t.0, t.1) != here {
                        continue;
                    }
                    let counterpart: Triple = (there.0, there.1, t.2.clone());
                    if let Some(&j) = new_triple_idx.get(&counterpart) {
                        uf.union(i, j);
                    } else if let Some(&node) = self.triple_node.get(&counterpart) {
                        let e = touch_old(&mut uf, &mut elements, &mut old_element, node);
                        uf.union(i, e);
                    }
                }
            }
        }

        let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for i in 0..n_new {
            let root = uf.find(i);
            groups.entry(root).or_default().0.push(i);
        }
        for e in n_new..uf.parent.len() {
            let root = uf.find(e);
            groups.entry(root).or_default().1.push(elements[e - n_new]);
        }

        let mut merges = Vec::new();
        let mut fresh_classes: Vec<(NodeKey, Vec<usize>)> = Vec::new();
        let mut assignments: Vec<(usize, Vec<usize>)> = Vec::new(); // (node id, new triple idxs)
        for (_, (triple_members, mut old_nodes)) in groups {
            if old_nodes.is_empty() {
                let key = triple_members
                    .iter()
                    .map(|&i| value_key(db, &new_triples[i]))
                    .min()
                    .expect("groups have members");
                fresh_classes.push((key, triple_members));
                continue;
            }
            old_nodes.sort_by(|&a, &b| self.node_keys[a].cmp(&self.node_keys[b]).then(a.cmp(&b)));
            let survivor = old_nodes[0];
            for &gone in &old_nodes[1..] {
                self.merge_into(survivor, gone);
                merges.push(MergeEvent { survivor, retired: gone });
            }
            assignments.push((survivor, triple_members));
        }

        let mut new_nodes = Vec::new();
        for &fid in &facts {
            let id = self.node_keys.len();
            self.node_keys.push(fact_key(db, fid));
            self.adjacency.push(Vec::new());
            self.retired.push(false);
            self.fact_nodes.insert(fid, id);
            new_nodes.push(id);
        }
        fresh_classes.sort_by(|a, b| a.0.cmp(&b.0));
        for (key, triple_members) in fresh_classes {
            let id = self.node_keys.len();
            self.node_keys.push(key);
            self.adjacency.push(Vec::new());
            self.retired.push(false);
            new_nodes.push(id);
            assignments.push((id, triple_members));
        }
        for (node, triple_members) in assignments {
            for i in triple_members {
                self.triple_node.insert(new_triples[i].clone(), node);
            }
            // The class gained members; its canonical key may shrink.
            let current_min = self
                .triple_node
                .iter()
                .filter(|(_, &n)| n == node)
                .map(|(t, _)| value_key(db, t))
                .min()
                .expect("class has members");
            if current_min < self.node_keys[node] {
                self.node_keys[node] = current_min;
            }
        }
        for &fid in &facts {
            self.connect_fact(db, fid);
        }
        Ok(GraphExtension { new_nodes, merges })
    }

    fn merge_into(&mut self, survivor: usize, gone: usize) {
        let edges = std::mem::take(&mut self.adjacency[gone]);
        for f in edges {
            let list = &mut self.adjacency[f];
            if let Ok(pos) = list.binary_search(&gone) {
                list.remove(pos);
            }
            insert_sorted(list, survivor);
            insert_sorted(&mut self.adjacency[survivor], f);
        }
        self.retired[gone] = true;
        for node in self.triple_node.values_mut() {
            if *node == gone {
                *node = survivor;
            }
        }
    }
}

fn insert_sorted(list: &mut Vec<usize>, item: usize) {
    if let Err(pos) = list.binary_search(&item) {
        list.insert(pos, item);
    }
}

/// Unnormalized transition weights of the second-order biased walk standing
/// at `current`, having arrived from `prev` (None for the first step), in
/// neighbor order.
pub fn transition_weights(
    graph: &DbGraph,
    prev: Option<usize>,
    current: usize,
    params: &GraphParams,
) -> Vec<(usize, f64)> {
    graph
        .neighbors(current)
        .iter()
        .map(|&n| {
            let w = match prev {
                None => 1.0,
                Some(p) if n == p => 1.0 / params.return_param,
                Some(p) if graph.has_edge(p, n) => 1.0,
                Some(_) => 1.0 / params.inout_param,
            };
            (n, w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkCorpus {
    pub walks: Vec<Vec<usize>>,
}

/// Runs `walks_per_node` biased walks from every start node, each with
/// `steps_per_walk` nodes. An isolated start yields a single-node walk.
pub fn generate_walks<R: Rng>(
    graph: &DbGraph,
    starts: &[usize],
    params: &GraphParams,
    rng: &mut R,
) -> WalkCorpus {
    let mut walks = Vec::with_capacity(starts.len() * params.walks_per_node);
    for &start in starts {
        for _ in 0..params.walks_per_node {
            let mut walk = Vec::with_capacity(params.steps_per_walk);
            walk.push(start);
            let mut prev: Option<usize> = None;
            while walk.len() < params.steps_per_walk {
                let current = *walk.last().unwrap();
                let weights = transition_weights(graph, prev, current, params);
                if weights.is_empty() {
                    break;
                }
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                let mut x = rng.gen_range(0.0..total);
                let mut chosen = weights[weights.len() - 1].0;
                for &(n, w) in &weights {
                    if x < w {
                        chosen = n;
                        break;
                    }
                    x -= w;
                }
                prev = Some(current);
                walk.push(chosen);
            }
            walks.push(walk);
        }
    }
    WalkCorpus { walks }
}

#[derive(Debug, Clone)]
pub struct SgnsModel {
    pub params: GraphParams,
    pub in_vectors: Vec<DVector<f64>>,
    pub out_vectors: Vec<DVector<f64>>,
    pub schema_hash: String,
    pub epoch_losses: Vec<f64>,
}

impl SgnsModel {
    /// Gaussian-initialized vectors (σ = 1/√dim) for every graph node, drawn
    /// in node id order, in-vector before out-vector.
    pub fn init(graph: &DbGraph, params: &GraphParams, schema_hash: String) -> Result<SgnsModel> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let sd = 1.0 / (params.dim as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive standard deviation");
        let mut in_vectors = Vec::with_capacity(graph.node_count());
        let mut out_vectors = Vec::with_capacity(graph.node_count());
        for _ in 0..graph.node_count() {
            in_vectors.push(DVector::from_fn(params.dim, |_, _| normal.sample(&mut rng)));
            out_vectors.push(DVector::from_fn(params.dim, |_, _| normal.sample(&mut rng)));
        }
        Ok(SgnsModel {
            params: params.clone(),
            in_vectors,
            out_vectors,
            schema_hash,
            epoch_losses: Vec::new(),
        })
    }

    /// A fact's embedding: the in-vector of its node.
    pub fn fact_embedding(&self, graph: &DbGraph, fact: FactId) -> Result<&DVector<f64>> {
        let node = graph.fact_node(fact).ok_or(Error::FactNotFound(fact))?;
        Ok(&self.in_vectors[node])
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable on both tails
    let z = -x;
    -(z.max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradients of one positive pair with its negative samples:
/// `-ln σ(in·out⁺) - Σ ln σ(-in·outᵏ)`. Returns the gradients with respect
/// to the center's in-vector, the context's out-vector, and each negative's
/// out-vector.
pub fn sgns_loss(
    center_in: &DVector<f64>,
    context_out: &DVector<f64>,
    negatives_out: &[&DVector<f64>],
) -> (f64, DVector<f64>, DVector<f64>, Vec<DVector<f64>>) {
    let pos_score = center_in.dot(context_out);
    let mut loss = -log_sigmoid(pos_score);
    let pos_coeff = sigmoid(pos_score) - 1.0;
    let mut grad_in = context_out * pos_coeff;
    let grad_context = center_in * pos_coeff;
    let mut grad_negatives = Vec::with_capacity(negatives_out.len());
    for &neg in negatives_out {
        let score = center_in.dot(neg);
        loss -= log_sigmoid(-score);
        let coeff = sigmoid(score);
        grad_in += neg * coeff;
        grad_negatives.push(center_in * coeff);
    }
    (loss, grad_in, grad_context, grad_negatives)
}

/// Draws negative samples from a fixed node distribution raised to 3/4.
struct NegativeSampler {
    nodes: Vec<usize>,
    cumulative: Vec<f64>,
}

impl NegativeSampler {
    fn from_weights(weights: impl Iterator<Item = (usize, f64)>) -> Option<NegativeSampler> {
        let mut nodes = Vec::new();
        let mut cumulative = Vec::new();
        let mut run = 0.0;
        for (n, w) in weights {
            if w <= 0.0 {
                continue;
            }
            run += w.powf(0.75);
            nodes.push(n);
            cumulative.push(run);
        }
        if nodes.is_empty() {
            return None;
        }
        Some(NegativeSampler { nodes, cumulative })
    }

    /// Unigram occurrence counts of the training corpus.
    fn from_corpus(corpus: &WalkCorpus) -> Option<NegativeSampler> {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for walk in &corpus.walks {
            for &n in walk {
                *counts.entry(n).or_insert(0) += 1;
            }
        }
        Self::from_weights(counts.into_iter().map(|(n, c)| (n, c as f64)))
    }

    /// Degrees of the live nodes. Walks visit nodes roughly in proportion to
    /// degree, so this stands in for corpus counts when the available corpus
    /// covers only a sliver of the graph.
    fn from_graph(graph: &DbGraph) -> Option<NegativeSampler> {
        Self::from_weights(
            graph
                .live_nodes()
                .into_iter()
                .map(|n| (n, graph.neighbors(n).len() as f64)),
        )
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let x = rng.gen_range(0.0..total);
        let idx = self.cumulative.partition_point(|&c| c <= x);
        self.nodes[idx.min(self.nodes.len() - 1)]
    }
}

fn in_key(node: usize) -> u64 {
    (node as u64) << 1
}

fn out_key(node: usize) -> u64 {
    ((node as u64) << 1) | 1
}

/// Trains the model on a walk corpus. Pairs stream in corpus order (center
/// by position, contexts within the window); gradients accumulate into
/// minibatches; frozen nodes take part as contexts and negatives but their
/// vectors never change. Returns mean loss per epoch.
pub fn train_sgns<R: Rng>(
    model: &mut SgnsModel,
    corpus: &WalkCorpus,
    epochs: usize,
    frozen: &[bool],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let Some(sampler) = NegativeSampler::from_corpus(corpus) else {
        return Ok(vec![0.0; epochs]);
    };
    train_with_sampler(model, corpus, epochs, frozen, &sampler, rng)
}

fn train_with_sampler<R: Rng>(
    model: &mut SgnsModel,
    corpus: &WalkCorpus,
    epochs: usize,
    frozen: &[bool],
    sampler: &NegativeSampler,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if frozen.len() != model.in_vectors.len() {
        return Err(Error::DimensionMismatch(
            "frozen mask length differs from node count".into(),
        ));
    }
    let dim = model.params.dim;
    let mut optimizer = Optimizer::new(model.params.optimizer, model.params.learning_rate);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        let mut pair_count: u64 = 0;
        let mut in_grads: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        let mut out_grads: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        let mut batch_pairs = 0usize;
        let mut negatives: Vec<usize> = Vec::with_capacity(model.params.negatives);
        for walk in &corpus.walks {
            for center_pos in 0..walk.len() {
                let center = walk[center_pos];
                let lo = center_pos.saturating_sub(model.params.window);
                let hi = (center_pos + model.params.window).min(walk.len() - 1);
                for context_pos in lo..=hi {
                    if context_pos == center_pos {
                        continue;
                    }
                    let context = walk[context_pos];
                    negatives.clear();
                    for _ in 0..model.params.negatives {
                        negatives.push(sampler.draw(rng));
                    }
                    let neg_refs: Vec<&DVector<f64>> =
                        negatives.iter().map(|&n| &model.out_vectors[n]).collect();
                    let (loss, grad_in, grad_context, grad_negs) = sgns_loss(
                        &model.in_vectors[center],
                        &model.out_vectors[context],
                        &neg_refs,
                    );
                    epoch_loss += loss;
                    pair_count += 1;
                    if !frozen[center] {
                        *in_grads.entry(center).or_insert_with(|| DVector::zeros(dim)) += grad_in;
                    }
                    if !frozen[context] {
                        *out_grads.entry(context).or_insert_with(|| DVector::zeros(dim)) +=
                            grad_context;
                    }
                    for (&n, g) in negatives.iter().zip(&grad_negs) {
                        if !frozen[n] {
                            *out_grads.entry(n).or_insert_with(|| DVector::zeros(dim)) += g;
                        }
                    }
                    batch_pairs += 1;
                    if batch_pairs >= model.params.batch_size {
                        flush_batch(model, &mut optimizer, &mut in_grads, &mut out_grads, batch_pairs)?;
                        batch_pairs = 0;
                    }
                }
            }
        }
        if batch_pairs > 0 {
            flush_batch(model, &mut optimizer, &mut in_grads, &mut out_grads, batch_pairs)?;
        }
        losses.push(if pair_count == 0 { 0.0 } else { epoch_loss / pair_count as f64 });
    }
    Ok(losses)
}

fn flush_batch(
    model: &mut SgnsModel,
    optimizer: &mut Optimizer,
    in_grads: &mut BTreeMap<usize, DVector<f64>>,
    out_grads: &mut BTreeMap<usize, DVector<f64>>,
    batch_pairs: usize,
) -> Result<()> {
    let scale = 1.0 / batch_pairs as f64;
    for (&node, grad) in in_grads.iter_mut() {
        *grad *= scale;
        optimizer.step(
            in_key(node),
            model.in_vectors[node].as_mut_slice(),
            grad.as_slice(),
            None,
        )?;
    }
    for (&node, grad) in out_grads.iter_mut() {
        *grad *= scale;
        optimizer.step(
            out_key(node),
            model.out_vectors[node].as_mut_slice(),
            grad.as_slice(),
            None,
        )?;
    }
    in_grads.clear();
    out_grads.clear();
    Ok(())
}

/// Trains a fresh model for the whole database: builds the graph, walks from
/// every node, and runs `epochs` of SGNS.
pub fn train_static(db: &Database, params: &GraphParams) -> Result<(DbGraph, SgnsModel)> {
    params.validate()?;
    let graph = DbGraph::build(db);
    let mut model = SgnsModel::init(&graph, params, db.schema().hash())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "graph-walks", 0));
    let starts = graph.live_nodes();
    let corpus = generate_walks(&graph, &starts, params, &mut rng);
    let frozen = vec![false; graph.node_count()];
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "graph-train", 0));
    model.epoch_losses = train_sgns(&mut model, &corpus, params.epochs, &frozen, &mut train_rng)?;
    Ok((graph, model))
}

#[derive(Debug)]
pub struct GraphExtendReport {
    pub new_nodes: Vec<usize>,
    pub merges: Vec<MergeEvent>,
    pub epoch_losses: Vec<f64>,
}

/// Extends graph and model to newly inserted facts. Fresh nodes get random
/// vectors; walks start only at fresh nodes; every pre-existing node is
/// frozen, so old vectors keep their exact bits (a merge retires one of two
/// identified old nodes, keeping the survivor's vector unchanged).
pub fn extend_graph_model(
    graph: &mut DbGraph,
    model: &mut SgnsModel,
    db: &Database,
    new_facts: &[FactId],
    base_seed: u64,
) -> Result<GraphExtendReport> {
    let old_count = graph.node_count();
    let extension = graph.extend(db, new_facts)?;
    let salt = new_facts.iter().copied().min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, "graph-extend", salt));
    let sd = 1.0 / (model.params.dim as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive standard deviation");
    for _ in old_count..graph.node_count() {
        model
            .in_vectors
            .push(DVector::from_fn(model.params.dim, |_, _| normal.sample(&mut rng)));
        model
            .out_vectors
            .push(DVector::from_fn(model.params.dim, |_, _| normal.sample(&mut rng)));
    }
    let mut frozen = vec![true; graph.node_count()];
    for &n in &extension.new_nodes {
        frozen[n] = false;
    }
    let corpus = generate_walks(graph, &extension.new_nodes, &model.params.clone(), &mut rng);
    let epochs = model.params.dynamic_epochs;
    // Negatives come from the whole graph, not from this corpus: walks that
    // start only at a handful of fresh nodes visit little besides their own
    // contexts, and drawing negatives from those same contexts cancels the
    // positive signal.
    let losses = match NegativeSampler::from_graph(graph) {
        Some(sampler) => train_with_sampler(model, &corpus, epochs, &frozen, &sampler, &mut rng)?,
        None => vec![0.0; epochs],
    };
    Ok(GraphExtendReport {
        new_nodes: extension.new_nodes,
        merges: extension.merges,
        epoch_losses: losses,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    key: NodeKey,
    in_vector: Vec<f64>,
    out_vector: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphModelFile {
    format: String,
    version: u32,
    schema_hash: String,
    params: GraphParams,
    epoch_losses: Vec<f64>,
    nodes: Vec<NodeEntry>,
}

const GRAPH_FORMAT: &str = "relemb-graph";

/// Serializes the model with its node table (live nodes only, sorted by node
/// key so the bytes do not depend on how the in-memory graph was grown).
pub fn save_graph_model(model: &SgnsModel, graph: &DbGraph, path: &Path) -> Result<()> {
    let mut nodes: Vec<NodeEntry> = (0..graph.node_count())
        .filter(|&n| !graph.is_retired(n))
        .map(|n| NodeEntry {
            key: graph.node_key(n).clone(),
            in_vector: model.in_vectors[n].as_slice().to_vec(),
            out_vector: model.out_vectors[n].as_slice().to_vec(),
        })
        .collect();
    nodes.sort_by(|a, b| a.key.cmp(&b.key));
    let file = GraphModelFile {
        format: GRAPH_FORMAT.into(),
        version: 1,
        schema_hash: model.schema_hash.clone(),
        params: model.params.clone(),
        epoch_losses: model.epoch_losses.clone(),
        nodes,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Loads a model against a database: the graph is rebuilt from the database
/// and every node must find its vector in the file by key.
pub fn load_graph_model(path: &Path, db: &Database) -> Result<(DbGraph, SgnsModel)> {
    let text = std::fs::read_to_string(path)?;
    let file: GraphModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.format != GRAPH_FORMAT {
        return Err(Error::ModelMismatch(format!("unexpected format {:?}", file.format)));
    }
    if file.schema_hash != db.schema().hash() {
        return Err(Error::ModelMismatch("schema hash differs".into()));
    }
    file.params.validate()?;
    let graph = DbGraph::build(db);
    let mut by_key: HashMap<&NodeKey, &NodeEntry> = HashMap::new();
    for entry in &file.nodes {
        if by_key.insert(&entry.key, entry).is_some() {
            return Err(Error::ModelMismatch("duplicate node key in model file".into()));
        }
    }
    let dim = file.params.dim;
    let mut in_vectors = Vec::with_capacity(graph.node_count());
    let mut out_vectors = Vec::with_capacity(graph.node_count());
    for n in 0..graph.node_count() {
        let entry = by_key
            .get(graph.node_key(n))
            .ok_or_else(|| Error::ModelMismatch(format!("no vector stored for node {n}")))?;
        if entry.in_vector.len() != dim || entry.out_vector.len() != dim {
            return Err(Error::ModelMismatch("vector length differs from dim".into()));
        }
        in_vectors.push(DVector::from_column_slice(&entry.in_vector));
        out_vectors.push(DVector::from_column_slice(&entry.out_vector));
    }
    Ok((
        graph,
        SgnsModel {
            params: file.params,
            in_vectors,
            out_vectors,
            schema_hash: file.schema_hash,
            epoch_losses: file.epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::central_difference;
    use crate::relational::{
        AttributeSchema, DomainKind, ForeignKey, RelationSchema, Schema,
    };
    use crate::testutil::movies;

    fn tiny_params() -> GraphParams {
        GraphParams {
            dim: 4,
            walks_per_node: 3,
            steps_per_walk: 6,
            window: 2,
            negatives: 3,
            batch_size: 128,
            epochs: 2,
            dynamic_epochs: 2,
            return_param: 1.0,
            inout_param: 1.0,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 13,
        }
    }

    #[test]
    fn graph_is_bipartite_with_identified_value_classes() {
        let db = movies();
        let graph = DbGraph::build(&db);
        let n_facts = 4 + 6 + 3 + 4;
        assert_eq!(graph.node_count(), n_facts + 36);
        for node in 0..graph.node_count() {
            let fact_side = node < n_facts;
            for &other in graph.neighbors(node) {
                assert_ne!(fact_side, other < n_facts, "edge within one side");
            }
        }
        // "a01" as an actor key, a first collaborator, and a second
        // collaborator is one class, transitively through the key position.
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        let collab = schema.relation_index("Collaborations").unwrap();
        let v = Value::Text("a01".into());
        let class = graph.value_node(actors, 0, &v).unwrap();
        assert_eq!(graph.value_node(collab, 0, &v), Some(class));
        assert_eq!(graph.value_node(collab, 1, &v), Some(class));
        // The class is adjacent to every fact containing the value there.
        assert_eq!(graph.neighbors(class).len(), 5);
    }

    #[test]
    fn equal_text_without_a_foreign_key_stays_separate() {
        let schema = Schema::new(
            vec![
                RelationSchema {
                    name: "P".into(),
                    attributes: vec![
                        AttributeSchema::new("pid", DomainKind::Identifier),
                        AttributeSchema::new("note", DomainKind::Text),
                    ],
                    key: vec![0],
                },
                RelationSchema {
                    name: "Q".into(),
                    attributes: vec![
                        AttributeSchema::new("qid", DomainKind::Identifier),
                        AttributeSchema::new("note", DomainKind::Text),
                    ],
                    key: vec![0],
                },
            ],
            vec![],
        )
        .unwrap();
        let mut db = Database::new(schema);
        let t = |s: &str| Value::Text(s.into());
        db.insert_batch(vec![
            ("P".into(), vec![t("p1"), t("shared")]),
            ("Q".into(), vec![t("q1"), t("shared")]),
        ])
        .unwrap();
        let graph = DbGraph::build(&db);
        let p_note = graph.value_node(0, 1, &t("shared")).unwrap();
        let q_note = graph.value_node(1, 1, &t("shared")).unwrap();
        assert_ne!(p_note, q_note);
    }

    fn bridge_schema() -> Schema {
        // M.z is a foreign key into both A and B, so a value occurring in
        // M.z identifies the A-side and B-side classes of that value.
        Schema::new(
            vec![
                RelationSchema {
                    name: "A".into(),
                    attributes: vec![AttributeSchema::new("aid", DomainKind::Identifier)],
                    key: vec![0],
                },
                RelationSchema {
                    name: "B".into(),
                    attributes: vec![AttributeSchema::new("bid", DomainKind::Identifier)],
                    key: vec![0],
                },
                RelationSchema {
                    name: "M".into(),
                    attributes: vec![
                        AttributeSchema::new("mid", DomainKind::Identifier),
                        AttributeSchema::new("z", DomainKind::Identifier),
                    ],
                    key: vec![0],
                },
            ],
            vec![
                ForeignKey { source: 2, source_attrs: vec![1], target: 0, target_attrs: vec![0] },
                ForeignKey { source: 2, source_attrs: vec![1], target: 1, target_attrs: vec![0] },
            ],
        )
        .unwrap()
    }

    #[test]
    fn extension_merges_old_classes_identified_by_a_new_fact() {
        let t = |s: &str| Value::Text(s.into());
        let mut db = Database::new(bridge_schema());
        db.insert_batch(vec![
            ("A".into(), vec![t("v")]),
            ("B".into(), vec![t("v")]),
        ])
        .unwrap();
        let mut graph = DbGraph::build(&db);
        let a_class = graph.value_node(0, 0, &t("v")).unwrap();
        let b_class = graph.value_node(1, 0, &t("v")).unwrap();
        assert_ne!(a_class, b_class);

        let new = db.insert_batch(vec![("M".into(), vec![t("m1"), t("v")])]).unwrap();
        let ext = graph.extend(&db, &new).unwrap();
        assert_eq!(ext.merges.len(), 1);
        let merge = &ext.merges[0];
        // The A-side key sorts first, so its node survives.
        assert_eq!(merge.survivor, a_class);
        assert_eq!(merge.retired, b_class);
        assert!(graph.is_retired(b_class));
        assert!(graph.neighbors(b_class).is_empty());
        // All three positions now resolve to the survivor.
        assert_eq!(graph.value_node(0, 0, &t("v")), Some(a_class));
        assert_eq!(graph.value_node(1, 0, &t("v")), Some(a_class));
        assert_eq!(graph.value_node(2, 1, &t("v")), Some(a_class));
        // The B fact is now adjacent to the survivor.
        let b_fact = graph.fact_node(new[0]).unwrap();
        assert!(graph.has_edge(b_fact, a_class));
        let old_b_fact = graph.fact_node(1).unwrap();
        assert!(graph.has_edge(old_b_fact, a_class));
        // New nodes: the M fact node and the fresh class for its key.
        assert_eq!(ext.new_nodes.len(), 2);
    }

    #[test]
    fn transition_weights_follow_return_and_inout_biases() {
        let db = movies();
        let graph = DbGraph::build(&db);
        let schema = db.schema();
        let collab = schema.relation_index("Collaborations").unwrap();
        let c1 = db
            .lookup_key(collab, &[
                Value::Text("a01".into()),
                Value::Text("a02".into()),
                Value::Text("m04".into()),
            ])
            .unwrap();
        let fact_node = graph.fact_node(c1).unwrap();
        let actors = schema.relation_index("Actors").unwrap();
        let class = graph.value_node(actors, 0, &Value::Text("a01".into())).unwrap();
        let mut params = tiny_params();
        params.return_param = 2.0;
        params.inout_param = 4.0;
        let weights = transition_weights(&graph, Some(fact_node), class, &params);
        assert_eq!(weights.len(), 5);
        for (n, w) in weights {
            if n == fact_node {
                assert_eq!(w, 0.5);
            } else {
                // The graph is bipartite, so no other neighbor shares an
                // edge with the previous node: all take the in-out weight.
                assert_eq!(w, 0.25);
            }
        }
        // Without a previous node every neighbor is uniform.
        let uniform = transition_weights(&graph, None, class, &params);
        assert!(uniform.iter().all(|&(_, w)| w == 1.0));
    }

    #[test]
    fn sgns_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let dim = 5;
        let mut vec5 = || DVector::<f64>::from_fn(dim, |_, _| normal.sample(&mut rng));
        let center = vec5();
        let context = vec5();
        let negs = [vec5(), vec5(), vec5()];
        let neg_refs: Vec<&DVector<f64>> = negs.iter().collect();
        let (_, grad_in, grad_context, grad_negs) = sgns_loss(&center, &context, &neg_refs);

        let h = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-4 * (1.0 + n.abs());
        let numeric = central_difference(
            |x| {
                let c = DVector::from_column_slice(x);
                sgns_loss(&c, &context, &neg_refs).0
            },
            center.as_slice(),
            h,
        );
        assert!(grad_in.iter().zip(&numeric).all(|(&a, &n)| close(a, n)));

        let numeric = central_difference(
            |x| {
                let c = DVector::from_column_slice(x);
                sgns_loss(&center, &c, &neg_refs).0
            },
            context.as_slice(),
            h,
        );
        assert!(grad_context.iter().zip(&numeric).all(|(&a, &n)| close(a, n)));

        for (k, neg) in negs.iter().enumerate() {
            let numeric = central_difference(
                |x| {
                    let probe = DVector::from_column_slice(x);
                    let mut refs = neg_refs.clone();
                    refs[k] = &probe;
                    sgns_loss(&center, &context, &refs).0
                },
                neg.as_slice(),
                h,
            );
            assert!(grad_negs[k].iter().zip(&numeric).all(|(&a, &n)| close(a, n)));
        }
    }

    #[test]
    fn extension_freezes_every_old_vector() {
        let mut db = movies();
        let (mut graph, mut model) = train_static(&db, &tiny_params()).unwrap();
        let old_count = graph.node_count();
        let bits: Vec<Vec<u64>> = model
            .in_vectors
            .iter()
            .chain(&model.out_vectors)
            .map(|v| v.iter().map(|x| x.to_bits()).collect())
            .collect();

        let new = db
            .insert_batch(vec![
                ("Actors".into(), vec![Value::Text("a05".into()), Value::Text("Cate Blanchett".into())]),
                ("Collaborations".into(), vec![
                    Value::Text("a05".into()),
                    Value::Text("a02".into()),
                    Value::Text("m02".into()),
                ]),
            ])
            .unwrap();
        let report = extend_graph_model(&mut graph, &mut model, &db, &new, 21).unwrap();
        assert!(!report.new_nodes.is_empty());
        assert!(graph.node_count() > old_count);
        assert_eq!(model.in_vectors.len(), graph.node_count());

        // bits holds the in-vectors then the out-vectors of the old model.
        assert_eq!(bits.len(), 2 * old_count);
        let after: Vec<Vec<u64>> = model.in_vectors[..old_count]
            .iter()
            .chain(&model.out_vectors[..old_count])
            .map(|v| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(after, bits);

        // The new fact has an embedding.
        assert!(model.fact_embedding(&graph, new[0]).is_ok());
    }

    #[test]
    fn graph_model_round_trips_after_extension() {
        let t = |s: &str| Value::Text(s.into());
        let mut db = Database::new(bridge_schema());
        db.insert_batch(vec![
            ("A".into(), vec![t("v")]),
            ("B".into(), vec![t("v")]),
            ("A".into(), vec![t("w")]),
        ])
        .unwrap();
        let (mut graph, mut model) = train_static(&db, &tiny_params()).unwrap();
        let new = db.insert_batch(vec![("M".into(), vec![t("m1"), t("v")])]).unwrap();
        let report = extend_graph_model(&mut graph, &mut model, &db, &new, 8).unwrap();
        assert_eq!(report.merges.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        save_graph_model(&model, &graph, &path).unwrap();
        let (graph2, model2) = load_graph_model(&path, &db).unwrap();
        for rel in 0..3 {
            for fact in db.facts(rel) {
                let a = model.fact_embedding(&graph, fact.id).unwrap();
                let b = model2.fact_embedding(&graph2, fact.id).unwrap();
                assert_eq!(
                    a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
        let second = dir.path().join("graph2.json");
        save_graph_model(&model2, &graph2, &second).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
    }
}
