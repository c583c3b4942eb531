//! Randomized invariants over generated databases: cascade deletion keeps
//! referential integrity and matches its preview, scheme enumeration is
//! prefix-closed, and stratified partitions pick exact per-class quotas.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relemb::eval::stratified_partition;
use relemb::relational::{Database, FactId, Value};
use relemb::walks::enumerate_walk_schemes;

/// Every non-null foreign-key reference resolves to an existing fact.
fn assert_referentially_intact(db: &Database) {
    let schema = db.schema();
    for fk in &schema.foreign_keys {
        for fact in db.facts(fk.source) {
            let vals: Vec<Value> = fk
                .source_attrs
                .iter()
                .map(|&a| fact.values[a].clone())
                .collect();
            if vals.iter().any(|v| v.is_null()) {
                continue;
            }
            assert!(
                db.lookup_key(fk.target, &vals).is_some(),
                "dangling reference {vals:?} from relation {}",
                schema.relation(fk.source).name
            );
        }
    }
}

fn all_fact_ids(db: &Database) -> BTreeSet<FactId> {
    (0..db.schema().relations.len())
        .flat_map(|r| db.facts(r).map(|f| f.id))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Deleting any fact with cascade removes exactly the previewed set and
    /// leaves no dangling references behind.
    #[test]
    fn cascade_delete_matches_preview_and_keeps_integrity(seed in any::<u64>(), pick in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut db = common::random_database(&mut rng);
        let ids: Vec<FactId> = all_fact_ids(&db).into_iter().collect();
        let victim = ids[pick % ids.len()];

        let preview = db.cascade_preview(victim).unwrap();
        let before = all_fact_ids(&db);
        let removed = db.cascade_delete(victim).unwrap();
        let after = all_fact_ids(&db);

        let gone: BTreeSet<FactId> = before.difference(&after).copied().collect();
        prop_assert_eq!(&gone, &removed);
        prop_assert_eq!(&gone, &preview);
        prop_assert!(gone.contains(&victim));
        assert_referentially_intact(&db);
    }

    /// Dropping the last step of any enumerated scheme yields another
    /// enumerated scheme, and no scheme exceeds the requested length.
    #[test]
    fn scheme_enumeration_is_prefix_closed(seed in any::<u64>(), max_len in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let db = common::random_database(&mut rng);
        for start in 0..db.schema().relations.len() {
            let schemes = enumerate_walk_schemes(db.schema(), start, max_len);
            let index: BTreeSet<_> = schemes.iter().map(|s| s.steps.clone()).collect();
            for scheme in &schemes {
                prop_assert_eq!(scheme.start, start);
                prop_assert!(scheme.steps.len() <= max_len);
                if !scheme.steps.is_empty() {
                    let mut prefix = scheme.steps.clone();
                    prefix.pop();
                    prop_assert!(index.contains(&prefix));
                }
            }
        }
    }

    /// The picked side of a stratified partition is a duplicate-free subset
    /// of the input, hits round(ratio * n) exactly, and takes from each
    /// class either floor(ratio * size) or one more.
    #[test]
    fn stratified_partition_picks_exact_quotas(seed in any::<u64>(), ratio in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let db = common::random_database(&mut rng);
        let labeled: Vec<(FactId, String)> = db
            .facts(0)
            .map(|f| (f.id, format!("{:?}", f.values[1])))
            .collect();
        let n = labeled.len();
        prop_assume!((ratio * n as f64).round() as usize >= 1);

        let mut split_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let picked = stratified_partition(&labeled, ratio, &mut split_rng).unwrap();
        let picked_set: BTreeSet<FactId> = picked.iter().copied().collect();
        prop_assert_eq!(picked_set.len(), picked.len(), "duplicates in the picked side");
        prop_assert_eq!(picked.len(), (ratio * n as f64).round() as usize);

        let universe: BTreeSet<FactId> = labeled.iter().map(|(f, _)| *f).collect();
        prop_assert!(picked_set.is_subset(&universe));
        let mut classes: BTreeSet<&str> = BTreeSet::new();
        for (_, label) in &labeled {
            classes.insert(label);
        }
        for class in classes {
            let size = labeled.iter().filter(|(_, l)| l == class).count();
            let taken = labeled
                .iter()
                .filter(|(f, l)| l == class && picked_set.contains(f))
                .count();
            let base = (ratio * size as f64).floor() as usize;
            prop_assert!(
                taken == base || taken == base + 1,
                "class {class}: took {taken} of {size} at ratio {ratio}"
            );
        }
    }
}
