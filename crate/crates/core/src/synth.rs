//! Deterministic synthetic databases for evaluation and benchmarks.
//!
//! The generator produces a three-relation schema — `Subject` (carrying a
//! categorical class label), `Item` (carrying a categorical tag and a
//! numeric score), and `Link` (a many-to-many join between the two) — where
//! a subject's links land on items drawn from its own class's item pool
//! except with probability `noise`, in which case the item is drawn
//! uniformly from all items. The label is therefore recoverable from link
//! structure alone, with difficulty controlled by `noise`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::relational::{
    AttributeSchema, Database, DomainKind, ForeignKey, RelationSchema, Schema, Value,
};

/// Shape of a generated database.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of distinct subject classes (at least 2).
    pub classes: usize,
    /// Subjects generated per class.
    pub subjects_per_class: usize,
    /// Links generated per subject.
    pub links_per_subject: usize,
    /// Items in each class's pool.
    pub items_per_class: usize,
    /// Probability that a link ignores the subject's class pool.
    pub noise: f64,
    /// Seed for the generator's random stream.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            subjects_per_class: 60,
            links_per_subject: 3,
            items_per_class: 6,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(
                "synthetic database needs at least two classes".into(),
            ));
        }
        if self.subjects_per_class == 0 || self.items_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic database needs at least one subject and item per class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!(
                "noise must lie in [0, 1], got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// The schema used by [`make_synthetic_db`]: Subject(sid, category),
/// Item(iid, tag, score), Link(lid, subject → Subject, item → Item).
pub fn synthetic_schema() -> Schema {
    let subject = RelationSchema {
        name: "Subject".into(),
        attributes: vec![
            AttributeSchema::new("sid", DomainKind::Identifier),
            AttributeSchema::new("category", DomainKind::Categorical),
        ],
        key: vec![0],
    };
    let item = RelationSchema {
        name: "Item".into(),
        attributes: vec![
            AttributeSchema::new("iid", DomainKind::Identifier),
            AttributeSchema::new("tag", DomainKind::Categorical),
            AttributeSchema::new("score", DomainKind::Numeric),
        ],
        key: vec![0],
    };
    let link = RelationSchema {
        name: "Link".into(),
        attributes: vec![
            AttributeSchema::new("lid", DomainKind::Identifier),
            AttributeSchema::new("subject", DomainKind::Identifier),
            AttributeSchema::new("item", DomainKind::Identifier),
        ],
        key: vec![0],
    };
    let fks = vec![
        ForeignKey {
            source: 2,
            source_attrs: vec![1],
            target: 0,
            target_attrs: vec![0],
        },
        ForeignKey {
            source: 2,
            source_attrs: vec![2],
            target: 1,
            target_attrs: vec![0],
        },
    ];
    Schema::new(vec![subject, item, link], fks).expect("synthetic schema is valid")
}

/// Generates a database according to `spec`. The same spec always yields
/// the same database, fact ids included.
pub fn make_synthetic_db(spec: &SynthSpec) -> Result<Database> {
    spec.validate()?;
    let schema = synthetic_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut rows: Vec<(String, Vec<Value>)> = Vec::new();

    // Items first: each class owns a pool; consecutive items share a tag so
    // the tag column is informative but coarser than the item identity.
    let mut item_ids: Vec<Vec<String>> = Vec::new();
    for c in 0..spec.classes {
        let score_dist = Normal::new(4.0 * c as f64, 1.0)
            .expect("unit standard deviation is valid");
        let mut pool = Vec::new();
        for j in 0..spec.items_per_class {
            let iid = format!("i{:02}_{:02}", c, j);
            let tag = format!("t{}_{}", c, j / 2);
            let score = score_dist.sample(&mut rng);
            rows.push((
                "Item".into(),
                vec![
                    Value::Text(iid.clone()),
                    Value::Text(tag),
                    Value::number(score)?,
                ],
            ));
            pool.push(iid);
        }
        item_ids.push(pool);
    }

    let all_items: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.items_per_class).map(move |j| (c, j)))
        .collect();

    let mut link_count = 0usize;
    for c in 0..spec.classes {
        for k in 0..spec.subjects_per_class {
            let sid = format!("s{:02}_{:03}", c, k);
            rows.push((
                "Subject".into(),
                vec![Value::Text(sid.clone()), Value::Text(format!("c{}", c))],
            ));
            for _ in 0..spec.links_per_subject {
                let (ic, ij) = if rng.gen::<f64>() < spec.noise {
                    all_items[rng.gen_range(0..all_items.len())]
                } else {
                    (c, rng.gen_range(0..spec.items_per_class))
                };
                let lid = format!("l{:05}", link_count);
                link_count += 1;
                rows.push((
                    "Link".into(),
                    vec![
                        Value::Text(lid),
                        Value::Text(sid.clone()),
                        Value::Text(item_ids[ic][ij].clone()),
                    ],
                ));
            }
        }
    }

    let mut db = Database::new(schema);
    db.insert_batch(rows)?;
    Ok(db)
}

/// Oracle embedding for synthetic subjects: the empirical distribution of
/// the subject's links over item classes. Useful as a sanity reference in
/// tests — a subject's dominant coordinate is its class unless noise moved
/// most of its links.
pub fn link_profile(db: &Database, spec: &SynthSpec, sid: &str) -> Result<DVector<f64>> {
    let subject_rel = db.schema().relation_index("Subject")?;
    let link_rel = db.schema().relation_index("Link")?;
    let key = vec![Value::Text(sid.to_string())];
    if db.lookup_key(subject_rel, &key).is_none() {
        return Err(Error::UnknownRelation(format!("no subject {}", sid)));
    }
    let mut profile = DVector::zeros(spec.classes);
    let mut total = 0.0;
    for fact in db.facts(link_rel) {
        if fact.values[1] != Value::Text(sid.to_string()) {
            continue;
        }
        if let Value::Text(iid) = &fact.values[2] {
            // Item ids encode their class as the two digits after 'i'.
            let class: usize = iid[1..3].parse().map_err(|_| {
                Error::Parse {
                    location: format!("item id {}", iid),
                    message: "expected i<class>_<index>".into(),
                }
            })?;
            profile[class] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        profile /= total;
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = make_synthetic_db(&spec).unwrap();
        let b = make_synthetic_db(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_match_spec() {
        let spec = SynthSpec {
            classes: 3,
            subjects_per_class: 10,
            links_per_subject: 4,
            items_per_class: 5,
            noise: 0.2,
            seed: 11,
        };
        let db = make_synthetic_db(&spec).unwrap();
        let subject = db.schema().relation_index("Subject").unwrap();
        let item = db.schema().relation_index("Item").unwrap();
        let link = db.schema().relation_index("Link").unwrap();
        assert_eq!(db.fact_count(subject), 30);
        assert_eq!(db.fact_count(item), 15);
        assert_eq!(db.fact_count(link), 120);
    }

    #[test]
    fn low_noise_links_stay_in_class() {
        let spec = SynthSpec {
            noise: 0.0,
            ..SynthSpec::default()
        };
        let db = make_synthetic_db(&spec).unwrap();
        let profile = link_profile(&db, &spec, "s00_000").unwrap();
        assert_eq!(profile[0], 1.0);
        assert_eq!(profile[1], 0.0);
    }
}
