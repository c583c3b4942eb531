//! Writes a synthetic database to disk so the `relemb` binary has something
//! to chew on: `cargo run -p relemb --example synthesize -- <out_dir> [seed]`.

use relemb::relational::save_database;
use relemb::synth::{make_synthetic_db, SynthSpec};

fn main() -> relemb::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().expect("usage: synthesize <out_dir> [seed]");
    let mut spec = SynthSpec::default();
    if let Some(seed) = args.next() {
        spec.seed = seed.parse().expect("seed must be an integer");
    }
    let db = make_synthetic_db(&spec)?;
    save_database(&db, std::path::Path::new(&out))?;
    println!(
        "wrote {} facts across {} relations to {}",
        db.total_facts(),
        db.schema().relations.len(),
        out
    );
    Ok(())
}
