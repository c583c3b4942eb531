//! Fixtures and reference hyperparameters shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relemb::forward::{ForwardHyperparams, KdMode};
use relemb::graphembed::GraphParams;
use relemb::numerics::OptimizerKind;
use relemb::relational::{
    load_database, AttributeSchema, Database, DomainKind, ForeignKey, RelationSchema, Schema,
    Value,
};
use relemb::synth::{make_synthetic_db, SynthSpec};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/movies")
}

pub fn movies() -> Database {
    let dir = fixture_dir();
    load_database(&dir.join("schema.toml"), &dir).expect("fixture loads")
}

/// The reference synthetic benchmark: two classes of sixty subjects, three
/// links each into class-typed items, ten percent noise.
pub fn synthetic() -> Database {
    make_synthetic_db(&SynthSpec::default()).expect("synthetic database builds")
}

/// Hyperparameters used for the synthetic benchmark. Smaller than the
/// library defaults so the whole suite stays inside its time budget; the
/// accuracy thresholds in the acceptance tests were pinned with exactly
/// these values and the seeds they are run with.
pub fn reference_forward_params() -> ForwardHyperparams {
    ForwardHyperparams {
        dim: 32,
        max_walk_len: 2,
        n_samples: 150,
        n_samples_new: 80,
        batch_size: 2048,
        epochs: 15,
        learning_rate: 0.02,
        optimizer: OptimizerKind::Adam,
        kd: KdMode::Exact,
        seed: 0,
    }
}

pub fn reference_graph_params() -> GraphParams {
    GraphParams {
        dim: 32,
        walks_per_node: 24,
        steps_per_walk: 15,
        window: 6,
        negatives: 5,
        batch_size: 4096,
        epochs: 8,
        dynamic_epochs: 16,
        return_param: 1.0,
        inout_param: 1.0,
        learning_rate: 0.025,
        optimizer: OptimizerKind::Adam,
        seed: 0,
    }
}

/// Tiny hyperparameters for tests that only need a trained model's shape,
/// not its quality.
pub fn tiny_forward_params(dim: usize) -> ForwardHyperparams {
    ForwardHyperparams {
        dim,
        max_walk_len: 2,
        n_samples: 40,
        n_samples_new: 20,
        batch_size: 64,
        epochs: 3,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Adam,
        kd: KdMode::Exact,
        seed: 11,
    }
}

pub fn tiny_graph_params(dim: usize) -> GraphParams {
    GraphParams {
        dim,
        walks_per_node: 4,
        steps_per_walk: 8,
        window: 3,
        negatives: 3,
        batch_size: 512,
        epochs: 2,
        dynamic_epochs: 2,
        return_param: 1.0,
        inout_param: 1.0,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Adam,
        seed: 11,
    }
}

/// A random database: two to five relations chained by up to two foreign
/// keys each, at most 200 facts, 15% null references. Single-attribute
/// identifier keys, a categorical label everywhere.
pub fn random_database(rng: &mut ChaCha8Rng) -> Database {
    let nrel = rng.gen_range(2..=5);
    let mut relations = Vec::new();
    let mut fks = Vec::new();
    let mut fk_cols: Vec<Vec<(usize, usize)>> = Vec::new(); // (attr index, target)
    for i in 0..nrel {
        let mut attrs = vec![
            AttributeSchema::new("id", DomainKind::Identifier),
            AttributeSchema::new("label", DomainKind::Categorical),
        ];
        let mut cols = Vec::new();
        if i > 0 {
            let mut targets: Vec<usize> = (0..i).collect();
            targets.shuffle(rng);
            for &t in targets.iter().take(rng.gen_range(0..=2.min(i))) {
                let attr = attrs.len();
                attrs.push(AttributeSchema::new(&format!("ref{attr}"), DomainKind::Identifier));
                cols.push((attr, t));
            }
        }
        relations.push(RelationSchema {
            name: format!("R{i}"),
            attributes: attrs,
            key: vec![0],
        });
        for &(attr, t) in &cols {
            fks.push(ForeignKey {
                source: i,
                source_attrs: vec![attr],
                target: t,
                target_attrs: vec![0],
            });
        }
        fk_cols.push(cols);
    }
    let schema = Schema::new(relations, fks).expect("generated schema is valid");
    let mut db = Database::new(schema);

    let mut remaining = 200 - 4 * nrel;
    let mut ids: Vec<Vec<String>> = Vec::new();
    for i in 0..nrel {
        let extra = rng.gen_range(0..=remaining.min(28));
        remaining -= extra;
        let mut rows = Vec::new();
        let mut rel_ids = Vec::new();
        for j in 0..4 + extra {
            let id = format!("k{j:03}");
            let mut row = vec![
                Value::text(id.clone()),
                Value::text(format!("v{}", rng.gen_range(0..4))),
            ];
            for &(_, target) in &fk_cols[i] {
                if rng.gen_bool(0.15) {
                    row.push(Value::Null);
                } else {
                    let pool = &ids[target];
                    row.push(Value::text(pool[rng.gen_range(0..pool.len())].clone()));
                }
            }
            rows.push(row);
            rel_ids.push(id);
        }
        db.insert_facts(&format!("R{i}"), rows).expect("generated rows are valid");
        ids.push(rel_ids);
    }
    db
}
