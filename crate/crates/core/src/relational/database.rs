//! Fact storage with key and foreign-key indexes.
//!
//! Invariants kept by every mutation: keys are unique and non-null, every
//! satisfied foreign key resolves, fact ids are never reused, and iteration
//! order is always ascending fact id, so replays are deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::relational::{DomainKind, Schema, Value};

pub type FactId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub id: FactId,
    pub relation: usize,
    pub values: Vec<Value>,
}

impl Fact {
    /// The fact's key tuple, projected from its values.
    pub fn key(&self, schema: &Schema) -> Vec<Value> {
        schema.relation(self.relation).key.iter().map(|&i| self.values[i].clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Database {
    schema: Schema,
    relations: Vec<BTreeMap<FactId, Fact>>,
    key_index: Vec<HashMap<Vec<Value>, FactId>>,
    /// Per foreign key: target key tuple -> facts whose (non-null) source
    /// attributes reference it.
    fk_index: Vec<HashMap<Vec<Value>, BTreeSet<FactId>>>,
    fact_relation: HashMap<FactId, usize>,
    next_id: FactId,
}

impl Database {
    pub fn new(schema: Schema) -> Database {
        let nrel = schema.relations.len();
        let nfk = schema.foreign_keys.len();
        Database {
            schema,
            relations: vec![BTreeMap::new(); nrel],
            key_index: vec![HashMap::new(); nrel],
            fk_index: vec![HashMap::new(); nfk],
            fact_relation: HashMap::new(),
            next_id: 0,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn fact(&self, id: FactId) -> Option<&Fact> {
        let rel = *self.fact_relation.get(&id)?;
        self.relations[rel].get(&id)
    }

    /// Facts of one relation in ascending id order.
    pub fn facts(&self, rel: usize) -> impl Iterator<Item = &Fact> {
        self.relations[rel].values()
    }

    pub fn fact_count(&self, rel: usize) -> usize {
        self.relations[rel].len()
    }

    pub fn total_facts(&self) -> usize {
        self.relations.iter().map(|m| m.len()).sum()
    }

    pub fn lookup_key(&self, rel: usize, key: &[Value]) -> Option<FactId> {
        self.key_index[rel].get(key).copied()
    }

    /// Facts referencing the given target key tuple through one foreign key.
    pub fn referencing(&self, fk: usize, target_key: &[Value]) -> impl Iterator<Item = FactId> + '_ {
        self.fk_index[fk]
            .get(target_key)
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    /// Distinct non-null values of one column, in canonical order.
    pub fn active_domain(&self, rel: usize, attr: usize) -> BTreeSet<Value> {
        self.relations[rel]
            .values()
            .map(|f| &f.values[attr])
            .filter(|v| !v.is_null())
            .cloned()
            .collect()
    }

    /// The source key tuple a fact feeds into a foreign key, or None when any
    /// source attribute is null (the constraint is then ignored).
    fn fk_source_key(&self, fact: &Fact, fk: usize) -> Option<Vec<Value>> {
        let f = &self.schema.foreign_keys[fk];
        if f.source != fact.relation {
            return None;
        }
        let vals: Vec<Value> = f.source_attrs.iter().map(|&i| fact.values[i].clone()).collect();
        if vals.iter().any(Value::is_null) {
            None
        } else {
            Some(vals)
        }
    }

    /// Reorders a foreign key's source tuple into the target relation's key
    /// order, so it can be matched against the key index.
    fn fk_target_key(&self, fk: usize, source_vals: &[Value]) -> Vec<Value> {
        let f = &self.schema.foreign_keys[fk];
        let target_key = &self.schema.relation(f.target).key;
        target_key
            .iter()
            .map(|k| {
                let pos = f.target_attrs.iter().position(|t| t == k).unwrap();
                source_vals[pos].clone()
            })
            .collect()
    }

    /// Inserts rows into a single relation as one atomic batch.
    pub fn insert_facts(&mut self, relation: &str, rows: Vec<Vec<Value>>) -> Result<Vec<FactId>> {
        self.schema.relation_index(relation)?;
        let name = relation.to_string();
        self.insert_batch(rows.into_iter().map(|r| (name.clone(), r)).collect())
    }

    /// Inserts rows, possibly spanning relations, as one atomic batch: either
    /// every row lands or the database is untouched. Foreign keys may resolve
    /// against other rows of the same batch.
    pub fn insert_batch(&mut self, rows: Vec<(String, Vec<Value>)>) -> Result<Vec<FactId>> {
        let mut staged: Vec<Fact> = Vec::with_capacity(rows.len());
        let mut staged_keys: HashMap<(usize, Vec<Value>), usize> = HashMap::new();
        let mut id = self.next_id;
        for (row_no, (rel_name, values)) in rows.into_iter().enumerate() {
            let rel = self.schema.relation_index(&rel_name)?;
            let rel_schema = self.schema.relation(rel);
            let violation = |message: String| Error::Constraint {
                relation: rel_schema.name.clone(),
                row: row_no + 1,
                message,
            };
            if values.len() != rel_schema.arity() {
                return Err(violation(format!(
                    "expected {} values, got {}",
                    rel_schema.arity(),
                    values.len()
                )));
            }
            for (i, v) in values.iter().enumerate() {
                let ok = match (rel_schema.attributes[i].domain, v) {
                    (_, Value::Null) => true,
                    (DomainKind::Numeric, Value::Number(_)) => true,
                    (DomainKind::Numeric, _) => false,
                    (_, Value::Text(_)) => true,
                    (_, Value::Number(_)) => false,
                };
                if !ok {
                    return Err(violation(format!(
                        "attribute {} holds a value outside its domain",
                        rel_schema.attributes[i].name
                    )));
                }
            }
            let fact = Fact { id, relation: rel, values };
            id += 1;
            let key = fact.key(&self.schema);
            if key.iter().any(Value::is_null) {
                return Err(violation("key attributes must be non-null".into()));
            }
            if self.key_index[rel].contains_key(&key)
                || staged_keys.insert((rel, key), staged.len()).is_some()
            {
                return Err(violation("duplicate key".into()));
            }
            staged.push(fact);
        }
        for (i, fact) in staged.iter().enumerate() {
            for (fk, fkey) in self.schema.outgoing(fact.relation) {
                if let Some(source_vals) = self.fk_source_key(fact, fk) {
                    let target_key = self.fk_target_key(fk, &source_vals);
                    let exists = self.key_index[fkey.target].contains_key(&target_key)
                        || staged_keys.contains_key(&(fkey.target, target_key.clone()));
                    if !exists {
                        return Err(Error::Constraint {
                            relation: self.schema.relation(fact.relation).name.clone(),
                            row: i + 1,
                            message: format!(
                                "foreign key into {} does not resolve",
                                self.schema.relation(fkey.target).name
                            ),
                        });
                    }
                }
            }
        }
        let ids: Vec<FactId> = staged.iter().map(|f| f.id).collect();
        for fact in staged {
            self.index_fact(&fact);
            self.fact_relation.insert(fact.id, fact.relation);
            self.next_id = fact.id + 1;
            self.relations[fact.relation].insert(fact.id, fact);
        }
        Ok(ids)
    }

    fn index_fact(&mut self, fact: &Fact) {
        let key = fact.key(&self.schema);
        self.key_index[fact.relation].insert(key, fact.id);
        for fk in 0..self.schema.foreign_keys.len() {
            if let Some(source_vals) = self.fk_source_key(fact, fk) {
                let target_key = self.fk_target_key(fk, &source_vals);
                self.fk_index[fk].entry(target_key).or_default().insert(fact.id);
            }
        }
    }

    fn unindex_fact(&mut self, fact: &Fact) {
        let key = fact.key(&self.schema);
        self.key_index[fact.relation].remove(&key);
        for fk in 0..self.schema.foreign_keys.len() {
            if let Some(source_vals) = self.fk_source_key(fact, fk) {
                let target_key = self.fk_target_key(fk, &source_vals);
                if let Some(set) = self.fk_index[fk].get_mut(&target_key) {
                    set.remove(&fact.id);
                    if set.is_empty() {
                        self.fk_index[fk].remove(&target_key);
                    }
                }
            }
        }
    }

    /// All facts currently referencing the given fact through any foreign key.
    fn referencers_of(&self, fact: &Fact) -> BTreeSet<FactId> {
        let key = fact.key(&self.schema);
        let mut out = BTreeSet::new();
        for (fk, _) in self.schema.incoming(fact.relation) {
            out.extend(self.referencing(fk, &key));
        }
        out
    }

    /// The set a cascading delete of `id` would remove, without removing it.
    /// Two rules run to a fixpoint: a fact referencing a removed fact is
    /// removed, and a fact whose referencer set was non-empty and is now
    /// entirely removed is removed.
    pub fn cascade_preview(&self, id: FactId) -> Result<BTreeSet<FactId>> {
        if self.fact(id).is_none() {
            return Err(Error::FactNotFound(id));
        }
        let mut removed: BTreeSet<FactId> = BTreeSet::new();
        let mut queue: Vec<FactId> = vec![id];
        removed.insert(id);
        while let Some(current) = queue.pop() {
            let fact = self.fact(current).expect("queued facts exist");
            for g in self.referencers_of(fact) {
                if removed.insert(g) {
                    queue.push(g);
                }
            }
            for (fk, fkey) in self.schema.outgoing(fact.relation) {
                if let Some(source_vals) = self.fk_source_key(&fact, fk) {
                    let target_key = self.fk_target_key(fk, &source_vals);
                    if let Some(&target) = self.key_index[fkey.target].get(&target_key) {
                        if removed.contains(&target) {
                            continue;
                        }
                        let target_fact = self.fact(target).unwrap();
                        let refs = self.referencers_of(target_fact);
                        if !refs.is_empty() && refs.iter().all(|r| removed.contains(r)) {
                            removed.insert(target);
                            queue.push(target);
                        }
                    }
                }
            }
        }
        Ok(removed)
    }

    /// Deletes a fact and everything that must go with it (see
    /// `cascade_preview` for the rules), returning the removed set.
    pub fn cascade_delete(&mut self, id: FactId) -> Result<BTreeSet<FactId>> {
        let removed = self.cascade_preview(id)?;
        for &rid in &removed {
            let fact = self.fact(rid).unwrap().clone();
            self.unindex_fact(&fact);
            self.relations[fact.relation].remove(&rid);
            self.fact_relation.remove(&rid);
        }
        Ok(removed)
    }

    /// Nulls one column of every fact in a relation. Used to hide a
    /// prediction attribute from embedders; refuses key or foreign-key
    /// attributes, so no index or constraint can be affected.
    pub fn mask_attribute(&mut self, rel: usize, attr: usize) -> Result<()> {
        let rel_schema = self.schema.relation(rel);
        if rel_schema.key.contains(&attr) {
            return Err(Error::InvalidConfig(format!(
                "cannot mask key attribute {}.{}",
                rel_schema.name, rel_schema.attributes[attr].name
            )));
        }
        if self.schema.fk_involved(rel, attr) {
            return Err(Error::InvalidConfig(format!(
                "cannot mask foreign-key attribute {}.{}",
                rel_schema.name, rel_schema.attributes[attr].name
            )));
        }
        for fact in self.relations[rel].values_mut() {
            fact.values[attr] = Value::Null;
        }
        Ok(())
    }
}

impl PartialEq for Database {
    /// Equality of schema and stored facts (ids included); indexes are
    /// derived state and next_id is bookkeeping.
    fn eq(&self, other: &Database) -> bool {
        self.schema == other.schema && self.relations == other.relations
    }
}

/// Set equality of fact values per relation, ignoring fact ids. This is what
/// "the database was restored" means after a delete/reinsert round trip.
pub fn same_contents(a: &Database, b: &Database) -> bool {
    if a.schema != b.schema {
        return false;
    }
    for rel in 0..a.schema.relations.len() {
        let va: BTreeSet<Vec<Value>> = a.facts(rel).map(|f| f.values.clone()).collect();
        let vb: BTreeSet<Vec<Value>> = b.facts(rel).map(|f| f.values.clone()).collect();
        if va != vb {
            return false;
        }
    }
    true
}
