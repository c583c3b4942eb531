//! Loading and saving databases through the schema/CSV format.

mod common;

use relemb::relational::{
    load_database, load_rows, same_contents, save_database, Value,
};
use relemb::Error;

#[test]
fn fixture_loads_with_expected_counts() {
    let db = common::movies();
    let schema = db.schema();
    assert_eq!(schema.relations.len(), 4);
    assert_eq!(schema.foreign_keys.len(), 4);
    let count = |name: &str| {
        let rel = schema.relation_index(name).unwrap();
        db.facts(rel).count()
    };
    assert_eq!(count("Actors"), 4);
    assert_eq!(count("Movies"), 6);
    assert_eq!(count("Studios"), 3);
    assert_eq!(count("Collaborations"), 4);
    assert_eq!(db.total_facts(), 17);
}

#[test]
fn save_then_load_roundtrips() {
    let db = common::movies();
    let dir = tempfile::tempdir().unwrap();
    save_database(&db, dir.path()).unwrap();
    let back = load_database(&dir.path().join("schema.toml"), dir.path()).unwrap();
    assert!(same_contents(&db, &back));
}

#[test]
fn missing_csv_means_empty_relation() {
    let db = common::movies();
    let dir = tempfile::tempdir().unwrap();
    save_database(&db, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("Collaborations.csv")).unwrap();
    let back = load_database(&dir.path().join("schema.toml"), dir.path()).unwrap();
    let rel = back.schema().relation_index("Collaborations").unwrap();
    assert_eq!(back.facts(rel).count(), 0);
    assert_eq!(back.total_facts(), 13);
}

#[test]
fn dangling_reference_fails_with_row_location() {
    let db = common::movies();
    let dir = tempfile::tempdir().unwrap();
    save_database(&db, dir.path()).unwrap();
    let collabs = dir.path().join("Collaborations.csv");
    let mut text = std::fs::read_to_string(&collabs).unwrap();
    text.push_str("a01,a02,m99\n");
    std::fs::write(&collabs, text).unwrap();
    let err = load_database(&dir.path().join("schema.toml"), dir.path()).unwrap_err();
    match err {
        Error::Constraint { relation, row, .. } => {
            assert_eq!(relation, "Collaborations");
            assert_eq!(row, 5);
        }
        other => panic!("expected a constraint violation, got {other}"),
    }
}

#[test]
fn bad_numeric_cell_reports_its_cell() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("schema.toml"),
        r#"
[[relation]]
name = "Points"
key = ["pid"]

[[relation.attribute]]
name = "pid"
domain = "identifier"

[[relation.attribute]]
name = "score"
domain = "numeric"
"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("Points.csv"), "pid,score\np1,3.5\np2,many\n").unwrap();
    let err = load_database(&dir.path().join("schema.toml"), dir.path()).unwrap_err();
    match err {
        Error::Parse { location, message } => {
            assert!(location.contains("row 2"), "location was {location}");
            assert!(location.contains("score"), "location was {location}");
            assert!(message.contains("many"), "message was {message}");
        }
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn load_rows_accepts_reordered_headers_and_rejects_unknown_columns() {
    let db = common::movies();
    let schema = db.schema();
    let rel = schema.relation(schema.relation_index("Actors").unwrap());

    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    std::fs::write(&good, "name,aid\nNew Person,a99\n").unwrap();
    let rows = load_rows(rel, &good).unwrap();
    assert_eq!(rows, vec![vec![Value::text("a99"), Value::text("New Person")]]);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "aid,name,extra\na99,X,Y\n").unwrap();
    let err = load_rows(rel, &bad).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
}

#[test]
fn failed_batch_insert_leaves_database_unchanged() {
    let mut db = common::movies();
    let before = db.total_facts();
    let rows = vec![
        ("Actors".to_string(), vec![Value::text("a90"), Value::text("Fine")]),
        (
            "Collaborations".to_string(),
            vec![Value::text("a90"), Value::text("a91"), Value::text("m01")],
        ),
    ];
    let err = db.insert_batch(rows).unwrap_err();
    assert!(matches!(err, Error::Constraint { .. }));
    assert_eq!(db.total_facts(), before);
    let actors = db.schema().relation_index("Actors").unwrap();
    assert!(db.lookup_key(actors, &[Value::text("a90")]).is_none());
}

#[test]
fn batch_insert_resolves_references_inside_the_batch() {
    let mut db = common::movies();
    let rows = vec![
        (
            "Collaborations".to_string(),
            vec![Value::text("a90"), Value::text("a01"), Value::text("m01")],
        ),
        ("Actors".to_string(), vec![Value::text("a90"), Value::text("Late Arrival")]),
    ];
    let ids = db.insert_batch(rows).unwrap();
    assert_eq!(ids.len(), 2);
    assert_eq!(db.total_facts(), 19);
}
