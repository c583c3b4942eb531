//! Attribute kernels and expected kernel distance.
//!
//! A kernel scores similarity of two non-null values of one attribute.
//! Expected kernel distance between two value distributions is the mean
//! kernel value over an independent draw from each; larger means more
//! similar. It is computed exactly (double sum) or by Monte Carlo.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{Database, DomainKind, Schema, Value};
use crate::walks::ValueDistribution;

/// Variance floor for gaussian kernels estimated from degenerate domains.
const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// 1 when the values are equal, 0 otherwise.
    Equality,
    /// exp(-(a-b)^2 / (2 * variance)) on numbers.
    Gaussian { variance: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &Value, b: &Value) -> Result<f64> {
        if a.is_null() || b.is_null() {
            return Err(Error::NullOperand);
        }
        match self {
            Kernel::Equality => Ok(if a == b { 1.0 } else { 0.0 }),
            Kernel::Gaussian { variance } => match (a, b) {
                (Value::Number(x), Value::Number(y)) => {
                    let d = x - y;
                    Ok((-d * d / (2.0 * variance)).exp())
                }
                _ => {
                    let culprit = if matches!(a, Value::Number(_)) { b } else { a };
                    Err(Error::NonNumeric(culprit.to_string()))
                }
            },
        }
    }
}

/// One resolved kernel per attribute of every relation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRegistry {
    kernels: Vec<Vec<Kernel>>,
}

/// Serializable registry row, recorded in model files so extension uses the
/// variances the model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub relation: String,
    pub attribute: String,
    pub kernel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
}

impl KernelRegistry {
    /// Resolves kernels for every attribute: schema overrides win, otherwise
    /// numeric attributes get a gaussian kernel with variance estimated from
    /// the active domain (population variance of the distinct values, with a
    /// small floor) and everything else gets the equality kernel.
    pub fn resolve(db: &Database) -> Result<KernelRegistry> {
        let schema = db.schema();
        let mut kernels = Vec::with_capacity(schema.relations.len());
        for (rel_idx, rel) in schema.relations.iter().enumerate() {
            let mut row = Vec::with_capacity(rel.arity());
            for (attr_idx, attr) in rel.attributes.iter().enumerate() {
                let choice = attr.kernel.as_deref().unwrap_or(match attr.domain {
                    DomainKind::Numeric => "gaussian",
                    _ => "equality",
                });
                let kernel = match choice {
                    "equality" => Kernel::Equality,
                    "gaussian" => {
                        let variance = match attr.kernel_variance {
                            Some(v) if v > 0.0 => v,
                            Some(v) => return Err(Error::NonpositiveVariance(v)),
                            None => domain_variance(db, rel_idx, attr_idx),
                        };
                        Kernel::Gaussian { variance }
                    }
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown kernel {other:?} on {}.{}",
                            rel.name, attr.name
                        )))
                    }
                };
                row.push(kernel);
            }
            kernels.push(row);
        }
        Ok(KernelRegistry { kernels })
    }

    pub fn kernel(&self, rel: usize, attr: usize) -> &Kernel {
        &self.kernels[rel][attr]
    }

    /// Flattens the registry for a model file.
    pub fn entries(&self, schema: &Schema) -> Vec<KernelEntry> {
        let mut out = Vec::new();
        for (rel_idx, rel) in schema.relations.iter().enumerate() {
            for (attr_idx, attr) in rel.attributes.iter().enumerate() {
                let entry = match &self.kernels[rel_idx][attr_idx] {
                    Kernel::Equality => KernelEntry {
                        relation: rel.name.clone(),
                        attribute: attr.name.clone(),
                        kernel: "equality".into(),
                        variance: None,
                    },
                    Kernel::Gaussian { variance } => KernelEntry {
                        relation: rel.name.clone(),
                        attribute: attr.name.clone(),
                        kernel: "gaussian".into(),
                        variance: Some(*variance),
                    },
                };
                out.push(entry);
            }
        }
        out
    }

    /// Rebuilds a registry from model-file rows.
    pub fn from_entries(schema: &Schema, entries: &[KernelEntry]) -> Result<KernelRegistry> {
        let mut kernels: Vec<Vec<Option<Kernel>>> = schema
            .relations
            .iter()
            .map(|r| vec![None; r.arity()])
            .collect();
        for e in entries {
            let rel = schema.relation_index(&e.relation)?;
            let attr = schema
                .relation(rel)
                .attribute_index(&e.attribute)
                .ok_or_else(|| Error::UnknownAttribute {
                    relation: e.relation.clone(),
                    attribute: e.attribute.clone(),
                })?;
            let kernel = match e.kernel.as_str() {
                "equality" => Kernel::Equality,
                "gaussian" => {
                    let variance = e
                        .variance
                        .ok_or_else(|| Error::InvalidConfig("gaussian entry lacks variance".into()))?;
                    if variance <= 0.0 {
                        return Err(Error::NonpositiveVariance(variance));
                    }
                    Kernel::Gaussian { variance }
                }
                other => {
                    return Err(Error::InvalidConfig(format!("unknown kernel {other:?}")))
                }
            };
            kernels[rel][attr] = Some(kernel);
        }
        let kernels = kernels
            .into_iter()
            .enumerate()
            .map(|(rel, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(attr, k)| {
                        k.ok_or_else(|| {
                            Error::ModelMismatch(format!(
                                "no kernel recorded for {}.{}",
                                schema.relation(rel).name,
                                schema.relation(rel).attributes[attr].name
                            ))
                        })
                    })
                    .collect::<Result<Vec<Kernel>>>()
            })
            .collect::<Result<Vec<Vec<Kernel>>>>()?;
        Ok(KernelRegistry { kernels })
    }
}

fn domain_variance(db: &Database, rel: usize, attr: usize) -> f64 {
    let nums: Vec<f64> = db
        .active_domain(rel, attr)
        .into_iter()
        .filter_map(|v| match v {
            Value::Number(x) => Some(x),
            _ => None,
        })
        .collect();
    if nums.is_empty() {
        return VARIANCE_FLOOR;
    }
    let mean = nums.iter().sum::<f64>() / nums.len() as f64;
    let var = nums.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nums.len() as f64;
    var.max(VARIANCE_FLOOR)
}

/// Exact expected kernel distance: the double sum over both supports.
pub fn expected_kernel_distance(
    kernel: &Kernel,
    a: &ValueDistribution,
    b: &ValueDistribution,
) -> Result<f64> {
    let mut total = 0.0;
    for (va, pa) in a {
        for (vb, pb) in b {
            total += pa * pb * kernel.eval(va, vb)?;
        }
    }
    Ok(total)
}

/// Monte Carlo expected kernel distance: the mean kernel value over `n`
/// independent pairs drawn from the two distributions.
pub fn kd_monte_carlo<R: Rng>(
    kernel: &Kernel,
    a: &ValueDistribution,
    b: &ValueDistribution,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("monte carlo sample count must be positive".into()));
    }
    let sampler_a = CumulativeSampler::new(a);
    let sampler_b = CumulativeSampler::new(b);
    let mut total = 0.0;
    for _ in 0..n {
        let va = sampler_a.draw(rng);
        let vb = sampler_b.draw(rng);
        total += kernel.eval(va, vb)?;
    }
    Ok(total / n as f64)
}

/// Draws from a finite distribution by binary search on cumulative mass.
pub struct CumulativeSampler<'a> {
    values: Vec<&'a Value>,
    cumulative: Vec<f64>,
}

impl<'a> CumulativeSampler<'a> {
    pub fn new(dist: &'a ValueDistribution) -> CumulativeSampler<'a> {
        let mut values = Vec::with_capacity(dist.len());
        let mut cumulative = Vec::with_capacity(dist.len());
        let mut run = 0.0;
        for (v, p) in dist {
            run += p;
            values.push(v);
            cumulative.push(run);
        }
        CumulativeSampler { values, cumulative }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> &'a Value {
        let total = *self.cumulative.last().expect("distribution is non-empty");
        let x = rng.gen_range(0.0..total);
        let idx = self.cumulative.partition_point(|&c| c <= x);
        self.values[idx.min(self.values.len() - 1)]
    }
}
