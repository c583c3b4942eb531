//! The four subcommands. Each one resolves what it needs from the effective
//! configuration, so a key can come from a flag or from the file alike.

use std::path::Path;

use relemb::eval::{
    run_dynamic_experiment, write_reports_csv, DynamicPlan, Embedder, ExperimentReport,
    FittedEmbedder,
};
use relemb::forward::{load_model, save_model};
use relemb::graphembed::{load_graph_model, save_graph_model};
use relemb::relational::{load_database, load_rows, Database, FactId, Value};
use relemb::{Error, Result};
use serde::Serialize;

use crate::config::{parse_extend_mode, RunConfig};

/// Loads and integrity-checks the data, printing what was found.
pub fn cmd_validate(cfg: &RunConfig) -> Result<()> {
    let db = load_database(cfg.schema_path()?, cfg.data_dir()?)?;
    let schema = db.schema();
    println!("relations: {}", schema.relations.len());
    println!("foreign keys: {}", schema.foreign_keys.len());
    for (idx, rel) in schema.relations.iter().enumerate() {
        println!(
            "  {}: {} attributes, {} facts",
            rel.name,
            rel.arity(),
            db.facts(idx).count()
        );
    }
    println!("total facts: {}", db.total_facts());
    println!("ok");
    Ok(())
}

/// Trains the selected embedder and writes its model file.
pub fn cmd_embed(cfg: &RunConfig) -> Result<()> {
    let db = load_database(cfg.schema_path()?, cfg.data_dir()?)?;
    let embedder = cfg.embedder()?;
    // The graph embedder covers the whole database; only the walk-kernel
    // embedder needs to know which relation it is for.
    let relation = match embedder {
        Embedder::Forward(_) => cfg.relation()?,
        Embedder::Graph(_) => cfg.relation.as_deref().unwrap_or(""),
    };
    let model_path = cfg.model_path()?;
    if cfg.verbose {
        eprintln!("training {} embedder on {}", embedder.name(), cfg.data_dir()?.display());
    }
    let fitted = FittedEmbedder::fit(&db, relation, &embedder, cfg.seed)?;
    save_fitted(&fitted, &db, model_path)?;
    let vectors = match &fitted {
        FittedEmbedder::Forward(model) => model.phi.len(),
        FittedEmbedder::Graph(graph, _) => graph.live_nodes().len(),
    };
    println!("model written to {} ({} vectors)", model_path.display(), vectors);
    Ok(())
}

/// One extended fact in the vectors artifact.
#[derive(Serialize)]
struct NewVector {
    relation: String,
    key: Vec<Value>,
    vector: Vec<f64>,
}

/// What `extend` emits: the effective configuration plus the new vectors.
#[derive(Serialize)]
struct ExtendArtifact<'a> {
    config: &'a RunConfig,
    model: String,
    inserted: usize,
    new_vectors: Vec<NewVector>,
    warnings: Vec<String>,
}

/// Inserts the new facts as one atomic batch and extends the model to them.
/// The model file is rewritten only after everything succeeded, so a
/// rejected batch leaves it untouched.
pub fn cmd_extend(cfg: &RunConfig) -> Result<()> {
    let mut db = load_database(cfg.schema_path()?, cfg.data_dir()?)?;
    let model_path = cfg.model_path()?;
    let mut fitted = load_fitted(model_path, &db)?;

    let new_dir = cfg
        .new_data
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("missing new_data (flag --new-data or config key)".into()))?;
    let mut rows: Vec<(String, Vec<Value>)> = Vec::new();
    let schema = db.schema().clone();
    for rel in &schema.relations {
        let file = new_dir.join(format!("{}.csv", rel.name));
        if !file.exists() {
            continue;
        }
        for values in load_rows(rel, &file)? {
            rows.push((rel.name.clone(), values));
        }
    }
    if cfg.verbose {
        eprintln!("inserting {} facts from {}", rows.len(), new_dir.display());
    }
    let mode = parse_extend_mode(&cfg.mode)?;
    let inserted = db.insert_batch(rows)?;
    let warnings = fitted.extend(&db, &inserted, mode, cfg.seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let out_path = cfg.model_out.as_deref().unwrap_or(model_path);
    save_fitted(&fitted, &db, out_path)?;

    let artifact = ExtendArtifact {
        config: cfg,
        model: out_path.display().to_string(),
        inserted: inserted.len(),
        new_vectors: collect_new_vectors(&db, &fitted, &inserted)?,
        warnings,
    };
    let json = to_pretty_json(&artifact, "extend artifact")?;
    match &cfg.vectors {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!(
                "inserted {} facts, embedded {}; model written to {}, vectors to {}",
                artifact.inserted,
                artifact.new_vectors.len(),
                out_path.display(),
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn collect_new_vectors(
    db: &Database,
    fitted: &FittedEmbedder,
    inserted: &[FactId],
) -> Result<Vec<NewVector>> {
    let schema = db.schema();
    let mut out = Vec::new();
    for &id in inserted {
        // Facts outside the walk-kernel embedder's target relation carry no
        // vector; they were inserted but not embedded.
        let Ok(vector) = fitted.vector(id) else { continue };
        let fact = db.fact(id).ok_or(Error::FactNotFound(id))?;
        out.push(NewVector {
            relation: schema.relation(fact.relation).name.clone(),
            key: fact.key(schema),
            vector: vector.as_slice().to_vec(),
        });
    }
    Ok(out)
}

/// What `experiment` writes: the effective configuration plus one report per
/// (ratio, mode) cell.
#[derive(Serialize)]
struct ExperimentArtifact<'a> {
    config: &'a RunConfig,
    reports: &'a [ExperimentReport],
}

/// Runs the delete/reinsert experiment over every configured ratio and mode.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<()> {
    let db = load_database(cfg.schema_path()?, cfg.data_dir()?)?;
    let embedder = cfg.embedder()?;
    let relation = cfg.relation()?;
    let attribute = cfg.attribute()?;
    let report_path = cfg
        .report
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("missing report (flag --report or config key)".into()))?;
    let exp = &cfg.experiment;
    if exp.ratios.is_empty() || exp.modes.is_empty() {
        return Err(Error::InvalidConfig("experiment needs at least one ratio and one mode".into()));
    }

    let mut reports = Vec::new();
    for &ratio in &exp.ratios {
        for mode_name in &exp.modes {
            let plan = DynamicPlan {
                relation: relation.to_string(),
                attribute: attribute.to_string(),
                new_ratio: ratio,
                mode: parse_extend_mode(mode_name)?,
                runs: exp.runs,
                seed: cfg.seed,
                record_timing: exp.record_timing,
                classifier: exp.classifier.clone(),
            };
            if cfg.verbose {
                eprintln!(
                    "running {} x{} at ratio {ratio}, {mode_name}",
                    embedder.name(),
                    exp.runs
                );
            }
            let report = run_dynamic_experiment(&db, &plan, &embedder)?;
            println!(
                "{} ratio {ratio} {mode_name}: accuracy {:.4} +- {:.4}, baseline {:.4}",
                embedder.name(),
                report.mean_accuracy,
                report.std_accuracy,
                report.mean_baseline
            );
            reports.push(report);
        }
    }

    let artifact = ExperimentArtifact { config: cfg, reports: &reports };
    std::fs::write(report_path, to_pretty_json(&artifact, "experiment report")?)?;
    if let Some(csv_path) = &cfg.report_csv {
        write_reports_csv(&reports, csv_path)?;
    }
    println!("report written to {}", report_path.display());
    Ok(())
}

fn to_pretty_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Parse { location: what.into(), message: e.to_string() })
}

/// Reads the `format` tag of a model file to pick the right loader.
fn load_fitted(path: &Path, db: &Database) -> Result<FittedEmbedder> {
    let text = std::fs::read_to_string(path)?;
    let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    match head.get("format").and_then(|v| v.as_str()) {
        Some("relemb-forward") => Ok(FittedEmbedder::Forward(load_model(path, db)?)),
        Some("relemb-graph") => {
            let (graph, model) = load_graph_model(path, db)?;
            Ok(FittedEmbedder::Graph(graph, model))
        }
        other => Err(Error::ModelMismatch(format!(
            "unrecognized model format {other:?} in {}",
            path.display()
        ))),
    }
}

/// Writes the model next to its destination and renames it into place, so a
/// failure partway through cannot leave a truncated file behind.
fn save_fitted(fitted: &FittedEmbedder, db: &Database, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    match fitted {
        FittedEmbedder::Forward(model) => save_model(model, db, &tmp)?,
        FittedEmbedder::Graph(graph, model) => save_graph_model(model, graph, &tmp)?,
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
