//! Layered run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags. The effective configuration is embedded
//! in every artifact the tool writes.

use std::path::{Path, PathBuf};

use relemb::eval::{ClassifierConfig, Embedder};
use relemb::forward::{ExtendMode, ForwardHyperparams};
use relemb::graphembed::GraphParams;
use relemb::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// TOML schema descriptor.
    pub schema: Option<PathBuf>,
    /// Directory holding one CSV file per relation.
    pub data_dir: Option<PathBuf>,
    /// Which embedder to use: "forward" (walk-kernel) or "graph".
    pub embedder: String,
    /// Relation whose facts are embedded and evaluated.
    pub relation: Option<String>,
    /// Attribute the experiment predicts.
    pub attribute: Option<String>,
    /// Model file: `embed` writes it, `extend` reads and rewrites it.
    pub model: Option<PathBuf>,
    /// Separate output path for `extend`; defaults to `model`.
    pub model_out: Option<PathBuf>,
    /// Directory of CSV files holding the facts to insert.
    pub new_data: Option<PathBuf>,
    /// Extension order for `extend`: "one-by-one" or "all-at-once".
    pub mode: String,
    /// Where `extend` writes the new vectors; stdout when unset.
    pub vectors: Option<PathBuf>,
    /// Experiment JSON report path.
    pub report: Option<PathBuf>,
    /// Experiment per-run CSV path.
    pub report_csv: Option<PathBuf>,
    /// Master seed. Replaces the seed fields of both embedder sections, so
    /// one number pins every random choice of a run.
    pub seed: u64,
    /// Chat about progress on stderr.
    pub verbose: bool,
    pub forward: ForwardHyperparams,
    pub graph: GraphParams,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            schema: None,
            data_dir: None,
            embedder: "forward".into(),
            relation: None,
            attribute: None,
            model: None,
            model_out: None,
            new_data: None,
            mode: "one-by-one".into(),
            vectors: None,
            report: None,
            report_csv: None,
            seed: 0,
            verbose: false,
            forward: ForwardHyperparams::default(),
            graph: GraphParams::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Shares of labeled facts deleted and later reinserted.
    pub ratios: Vec<f64>,
    /// Extension orders exercised: "one-by-one" and/or "all-at-once".
    pub modes: Vec<String>,
    /// Repetitions per (ratio, mode) cell.
    pub runs: usize,
    /// Record wall-clock timings. Off makes equal-seed reports
    /// byte-identical.
    pub record_timing: bool,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            ratios: vec![0.1],
            modes: vec!["one-by-one".into()],
            runs: 10,
            record_timing: true,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a configuration file. Unknown keys are rejected; a file that
    /// does not parse is a configuration error, not a data error.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("{}: {}", path.display(), e.message()))
        })
    }

    pub fn schema_path(&self) -> Result<&Path> {
        require(&self.schema, "schema")
    }

    pub fn data_dir(&self) -> Result<&Path> {
        require(&self.data_dir, "data_dir")
    }

    pub fn model_path(&self) -> Result<&Path> {
        require(&self.model, "model")
    }

    pub fn relation(&self) -> Result<&str> {
        self.relation
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("missing relation (flag --relation or config key)".into()))
    }

    pub fn attribute(&self) -> Result<&str> {
        self.attribute
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("missing attribute (flag --attribute or config key)".into()))
    }

    /// The selected embedder with its hyperparameters, seed applied.
    pub fn embedder(&self) -> Result<Embedder> {
        match self.embedder.as_str() {
            "forward" => {
                let mut hp = self.forward.clone();
                hp.seed = self.seed;
                Ok(Embedder::Forward(hp))
            }
            "graph" => {
                let mut params = self.graph.clone();
                params.seed = self.seed;
                Ok(Embedder::Graph(params))
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown embedder {other:?} (expected \"forward\" or \"graph\")"
            ))),
        }
    }
}

fn require<'a>(opt: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    opt.as_deref().ok_or_else(|| {
        Error::InvalidConfig(format!("missing {key} (flag --{} or config key)", key.replace('_', "-")))
    })
}

pub fn parse_extend_mode(s: &str) -> Result<ExtendMode> {
    match s {
        "one-by-one" | "one_by_one" => Ok(ExtendMode::OneByOne),
        "all-at-once" | "all_at_once" => Ok(ExtendMode::AllAtOnce),
        other => Err(Error::InvalidConfig(format!(
            "unknown extension mode {other:?} (expected \"one-by-one\" or \"all-at-once\")"
        ))),
    }
}
