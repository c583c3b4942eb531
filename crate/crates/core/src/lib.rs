//! Tuple embeddings for relational databases.
//!
//! Two embedders over the same relational core: one learns vectors whose
//! bilinear products approximate expected kernel distances between
//! foreign-key walk distributions, the other runs biased random walks over a
//! value/fact graph and trains skip-gram with negative sampling. Both extend
//! to newly inserted tuples without touching the vectors of existing ones.

pub mod error;
/// Schemas, facts, databases, referential integrity, CSV/TOML loading.
pub mod relational;
/// Walk schemes over foreign keys and their destination distributions.
pub mod walks;
/// Attribute kernels and expected kernel distance between distributions.
pub mod kernels;
/// Dense vectors/matrices, bilinear forms, pseudoinverse, optimizers.
pub mod numerics;
/// The walk-kernel embedder: training and dynamic extension.
pub mod forward;
/// The graph embedder: value/fact graph, biased walks, SGNS.
pub mod graphembed;
/// Classifiers, cross validation and the dynamic-insertion experiment.
pub mod eval;
/// Deterministic synthetic databases for experiments and tests.
pub mod synth;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;

    use crate::relational::{load_database, Database};

    /// The movie fixture shared by unit tests.
    pub fn movies() -> Database {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/movies");
        load_database(&dir.join("schema.toml"), &dir).expect("fixture loads")
    }
}

/// Derives a child seed from a base seed, a domain tag and a salt.
///
/// Used wherever independent deterministic RNG streams are needed (per run,
/// per extended fact, per fold) so that streams never alias across domains.
pub fn derive_seed(base: u64, tag: &str, salt: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(salt.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
