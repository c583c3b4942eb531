//! Loading and saving databases: a TOML schema descriptor plus one CSV file
//! per relation (named `<Relation>.csv`, header row, empty cell = null).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{
    AttributeSchema, Database, DomainKind, ForeignKey, RelationSchema, Schema, Value,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDoc {
    #[serde(rename = "relation")]
    relations: Vec<RelationDoc>,
    #[serde(rename = "foreign_key", default)]
    foreign_keys: Vec<ForeignKeyDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationDoc {
    name: String,
    key: Vec<String>,
    #[serde(rename = "attribute")]
    attributes: Vec<AttributeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeDoc {
    name: String,
    domain: DomainKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_variance: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForeignKeyDoc {
    source: String,
    source_attrs: Vec<String>,
    target: String,
    target_attrs: Vec<String>,
}

/// Parses a TOML schema descriptor.
pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = std::fs::read_to_string(path)?;
    let doc: SchemaDoc = toml::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    schema_from_doc(path, doc)
}

fn schema_from_doc(path: &Path, doc: SchemaDoc) -> Result<Schema> {
    let parse_err = |message: String| Error::Parse {
        location: path.display().to_string(),
        message,
    };
    let mut relations = Vec::new();
    for rel in &doc.relations {
        let attributes: Vec<AttributeSchema> = rel
            .attributes
            .iter()
            .map(|a| AttributeSchema {
                name: a.name.clone(),
                domain: a.domain,
                kernel: a.kernel.clone(),
                kernel_variance: a.kernel_variance,
            })
            .collect();
        let key = rel
            .key
            .iter()
            .map(|k| {
                attributes
                    .iter()
                    .position(|a| &a.name == k)
                    .ok_or_else(|| parse_err(format!("key attribute {k} not in relation {}", rel.name)))
            })
            .collect::<Result<Vec<usize>>>()?;
        relations.push(RelationSchema {
            name: rel.name.clone(),
            attributes,
            key,
        });
    }
    let rel_index = |name: &str| -> Result<usize> {
        relations
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| parse_err(format!("unknown relation {name} in foreign key")))
    };
    let mut foreign_keys = Vec::new();
    for fk in &doc.foreign_keys {
        let source = rel_index(&fk.source)?;
        let target = rel_index(&fk.target)?;
        let attr_indices = |rel: usize, names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    relations[rel]
                        .attribute_index(n)
                        .ok_or_else(|| parse_err(format!("unknown attribute {n} in foreign key")))
                })
                .collect()
        };
        foreign_keys.push(ForeignKey {
            source,
            source_attrs: attr_indices(source, &fk.source_attrs)?,
            target,
            target_attrs: attr_indices(target, &fk.target_attrs)?,
        });
    }
    Schema::new(relations, foreign_keys)
}

/// Reads one relation's CSV file into parsed rows, in file order. The header
/// names the columns (any order); every attribute must appear.
pub fn load_rows(rel: &RelationSchema, file: &Path) -> Result<Vec<Vec<Value>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(file)?;
    let headers = reader.headers().map_err(|e| csv_err(file, e))?.clone();
    let mut column_of: Vec<Option<usize>> = vec![None; rel.arity()];
    for (col, name) in headers.iter().enumerate() {
        match rel.attribute_index(name) {
            Some(idx) => column_of[idx] = Some(col),
            None => {
                return Err(Error::Parse {
                    location: file.display().to_string(),
                    message: format!("unknown column {name}"),
                })
            }
        }
    }
    let missing: Vec<&str> = rel
        .attributes
        .iter()
        .zip(&column_of)
        .filter(|(_, c)| c.is_none())
        .map(|(a, _)| a.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Parse {
            location: file.display().to_string(),
            message: format!("missing columns: {}", missing.join(", ")),
        });
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(file, e))?;
        let mut values = Vec::with_capacity(rel.arity());
        for (attr, col) in column_of.iter().enumerate() {
            let cell = record.get(col.unwrap()).unwrap_or("");
            values.push(parse_cell(cell, rel.attributes[attr].domain).map_err(|m| {
                Error::Parse {
                    location: format!(
                        "{} row {}, attribute {}",
                        file.display(),
                        line + 1,
                        rel.attributes[attr].name
                    ),
                    message: m,
                }
            })?);
        }
        rows.push(values);
    }
    Ok(rows)
}

/// Loads a schema descriptor and the relation CSV files next to it. A missing
/// CSV file means an empty relation. All rows across all files form one
/// atomic insert, so foreign keys may point anywhere in the data.
pub fn load_database(schema_path: &Path, data_dir: &Path) -> Result<Database> {
    let schema = load_schema(schema_path)?;
    let mut rows: Vec<(String, Vec<Value>)> = Vec::new();
    let mut row_origin: Vec<(String, usize)> = Vec::new();
    for rel in &schema.relations {
        let file = data_dir.join(format!("{}.csv", rel.name));
        if !file.exists() {
            continue;
        }
        for (line, values) in load_rows(rel, &file)?.into_iter().enumerate() {
            rows.push((rel.name.clone(), values));
            row_origin.push((rel.name.clone(), line + 1));
        }
    }
    let mut db = Database::new(schema);
    db.insert_batch(rows).map_err(|e| match e {
        Error::Constraint { row, message, .. } if row >= 1 && row <= row_origin.len() => {
            let (relation, file_row) = row_origin[row - 1].clone();
            Error::Constraint {
                relation,
                row: file_row,
                message,
            }
        }
        other => other,
    })?;
    Ok(db)
}

fn csv_err(file: &Path, e: csv::Error) -> Error {
    Error::Parse {
        location: file.display().to_string(),
        message: e.to_string(),
    }
}

/// Parses one CSV cell under the column's domain. Empty cells are null;
/// numeric columns require a finite decimal number.
pub fn parse_cell(cell: &str, domain: DomainKind) -> std::result::Result<Value, String> {
    if cell.is_empty() {
        return Ok(Value::Null);
    }
    match domain {
        DomainKind::Numeric => {
            let x: f64 = cell
                .parse()
                .map_err(|_| format!("cannot parse {cell:?} as a number"))?;
            Value::number(x).map_err(|_| format!("non-finite number {cell:?}"))
        }
        _ => Ok(Value::text(cell)),
    }
}

fn render_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Number(x) => format!("{x}"),
        Value::Text(s) => s.clone(),
    }
}

/// Writes the schema descriptor and one CSV per relation into a directory.
/// Loading the result back yields an equal database (fact ids included,
/// because files are written in ascending id order).
pub fn save_database(db: &Database, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let schema = db.schema();
    let doc = SchemaDoc {
        relations: schema
            .relations
            .iter()
            .map(|r| RelationDoc {
                name: r.name.clone(),
                key: r.key.iter().map(|&k| r.attributes[k].name.clone()).collect(),
                attributes: r
                    .attributes
                    .iter()
                    .map(|a| AttributeDoc {
                        name: a.name.clone(),
                        domain: a.domain,
                        kernel: a.kernel.clone(),
                        kernel_variance: a.kernel_variance,
                    })
                    .collect(),
            })
            .collect(),
        foreign_keys: schema
            .foreign_keys
            .iter()
            .map(|fk| {
                let names = |rel: usize, attrs: &[usize]| {
                    attrs
                        .iter()
                        .map(|&a| schema.relation(rel).attributes[a].name.clone())
                        .collect()
                };
                ForeignKeyDoc {
                    source: schema.relation(fk.source).name.clone(),
                    source_attrs: names(fk.source, &fk.source_attrs),
                    target: schema.relation(fk.target).name.clone(),
                    target_attrs: names(fk.target, &fk.target_attrs),
                }
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&doc).map_err(|e| Error::Parse {
        location: dir.join("schema.toml").display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(dir.join("schema.toml"), text)?;
    for (rel_idx, rel) in schema.relations.iter().enumerate() {
        let mut writer = csv::Writer::from_path(dir.join(format!("{}.csv", rel.name)))?;
        writer.write_record(rel.attributes.iter().map(|a| a.name.as_str()))?;
        for fact in db.facts(rel_idx) {
            writer.write_record(fact.values.iter().map(render_cell))?;
        }
        writer.flush()?;
    }
    Ok(())
}
