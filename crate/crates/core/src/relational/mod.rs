//! Relational core: schemas with keys and foreign keys, facts over a domain
//! with a distinguished null, batch-atomic inserts, cascading deletes, and
//! file loading (TOML schema descriptor, one CSV per relation).

mod database;
mod io;
mod schema;
mod value;

pub use database::{same_contents, Database, Fact, FactId};
pub use io::{load_database, load_rows, load_schema, save_database};
pub use schema::{AttributeSchema, DomainKind, ForeignKey, RelationSchema, Schema};
pub use value::Value;
