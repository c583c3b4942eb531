//! Schemas: relations with typed attributes, unique keys, and foreign keys
//! whose target attributes are the key of the target relation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// What a column holds and how it is parsed from CSV. `Numeric` columns hold
/// finite floats, everything else holds text; any column may hold nulls
/// (empty CSV cells).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Identifier,
    Categorical,
    Numeric,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub domain: DomainKind,
    /// Optional kernel override ("equality" or "gaussian"); defaults are
    /// chosen from the domain kind when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    /// Optional fixed variance for a gaussian kernel; when absent the
    /// variance is estimated from the active domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_variance: Option<f64>,
}

impl AttributeSchema {
    /// An attribute with no kernel override.
    pub fn new(name: &str, domain: DomainKind) -> AttributeSchema {
        AttributeSchema {
            name: name.to_string(),
            domain,
            kernel: None,
            kernel_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationSchema {
    pub name: String,
    pub attributes: Vec<AttributeSchema>,
    /// Indices into `attributes` forming the unique key.
    pub key: Vec<usize>,
}

impl RelationSchema {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn arity(&self) -> usize {
        self.attributes.len()
    }
}

/// A foreign key `source[source_attrs] ⊆ target[target_attrs]`, where the
/// target attributes are exactly the key of the target relation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForeignKey {
    pub source: usize,
    pub source_attrs: Vec<usize>,
    pub target: usize,
    pub target_attrs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub relations: Vec<RelationSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl Schema {
    /// Validates structural well-formedness and returns the schema.
    pub fn new(relations: Vec<RelationSchema>, foreign_keys: Vec<ForeignKey>) -> Result<Schema> {
        let schema = Schema {
            relations,
            foreign_keys,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidConfig(msg);
        for (i, rel) in self.relations.iter().enumerate() {
            if self.relations[..i].iter().any(|r| r.name == rel.name) {
                return Err(bad(format!("duplicate relation name {}", rel.name)));
            }
            for (j, attr) in rel.attributes.iter().enumerate() {
                if rel.attributes[..j].iter().any(|a| a.name == attr.name) {
                    return Err(bad(format!(
                        "duplicate attribute {} in relation {}",
                        attr.name, rel.name
                    )));
                }
            }
            if rel.key.is_empty() {
                return Err(bad(format!("relation {} has an empty key", rel.name)));
            }
            let mut seen = vec![false; rel.attributes.len()];
            for &k in &rel.key {
                if k >= rel.attributes.len() || seen[k] {
                    return Err(bad(format!("invalid key for relation {}", rel.name)));
                }
                seen[k] = true;
            }
        }
        for (i, fk) in self.foreign_keys.iter().enumerate() {
            if self.foreign_keys[..i].contains(fk) {
                return Err(bad("duplicate foreign key".into()));
            }
            if fk.source >= self.relations.len() || fk.target >= self.relations.len() {
                return Err(bad("foreign key names an unknown relation".into()));
            }
            if fk.source_attrs.len() != fk.target_attrs.len() || fk.source_attrs.is_empty() {
                return Err(bad("foreign key attribute lists must pair up".into()));
            }
            let source_rel = &self.relations[fk.source];
            let target_rel = &self.relations[fk.target];
            for &a in &fk.source_attrs {
                if a >= source_rel.arity() {
                    return Err(bad(format!("foreign key attribute out of range in {}", source_rel.name)));
                }
            }
            let mut target_sorted = fk.target_attrs.clone();
            target_sorted.sort_unstable();
            target_sorted.dedup();
            let mut key_sorted = target_rel.key.clone();
            key_sorted.sort_unstable();
            if target_sorted != key_sorted {
                return Err(bad(format!(
                    "foreign key into {} must target its key",
                    target_rel.name
                )));
            }
        }
        Ok(())
    }

    pub fn relation_index(&self, name: &str) -> Result<usize> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn relation(&self, idx: usize) -> &RelationSchema {
        &self.relations[idx]
    }

    /// Foreign keys whose source is the given relation.
    pub fn outgoing(&self, rel: usize) -> impl Iterator<Item = (usize, &ForeignKey)> {
        self.foreign_keys
            .iter()
            .enumerate()
            .filter(move |(_, fk)| fk.source == rel)
    }

    /// Foreign keys whose target is the given relation.
    pub fn incoming(&self, rel: usize) -> impl Iterator<Item = (usize, &ForeignKey)> {
        self.foreign_keys
            .iter()
            .enumerate()
            .filter(move |(_, fk)| fk.target == rel)
    }

    /// True when the attribute appears on either side of any foreign key.
    pub fn fk_involved(&self, rel: usize, attr: usize) -> bool {
        self.foreign_keys.iter().any(|fk| {
            (fk.source == rel && fk.source_attrs.contains(&attr))
                || (fk.target == rel && fk.target_attrs.contains(&attr))
        })
    }

    /// Hex digest of the schema structure, recorded in model files so a model
    /// is never applied to a database with a different shape.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for rel in &self.relations {
            h.update(rel.name.as_bytes());
            h.update([0u8]);
            for a in &rel.attributes {
                h.update(a.name.as_bytes());
                h.update([0u8]);
                h.update(format!("{:?}", a.domain).as_bytes());
                h.update([0u8]);
            }
            for &k in &rel.key {
                h.update(k.to_le_bytes());
            }
            h.update([1u8]);
        }
        for fk in &self.foreign_keys {
            h.update(fk.source.to_le_bytes());
            h.update(fk.target.to_le_bytes());
            for &a in &fk.source_attrs {
                h.update(a.to_le_bytes());
            }
            for &a in &fk.target_attrs {
                h.update(a.to_le_bytes());
            }
            h.update([2u8]);
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(name: &str, domain: DomainKind) -> AttributeSchema {
        AttributeSchema {
            name: name.into(),
            domain,
            kernel: None,
            kernel_variance: None,
        }
    }

    #[test]
    fn rejects_duplicate_relation_names() {
        let rel = RelationSchema {
            name: "R".into(),
            attributes: vec![attr("a", DomainKind::Identifier)],
            key: vec![0],
        };
        assert!(Schema::new(vec![rel.clone(), rel], vec![]).is_err());
    }

    #[test]
    fn rejects_fk_not_targeting_key() {
        let r = RelationSchema {
            name: "R".into(),
            attributes: vec![attr("a", DomainKind::Identifier), attr("b", DomainKind::Text)],
            key: vec![0],
        };
        let s = RelationSchema {
            name: "S".into(),
            attributes: vec![attr("c", DomainKind::Identifier)],
            key: vec![0],
        };
        let fk = ForeignKey {
            source: 0,
            source_attrs: vec![1],
            target: 1,
            target_attrs: vec![0],
        };
        assert!(Schema::new(vec![r.clone(), s.clone()], vec![fk]).is_ok());
        let bad_fk = ForeignKey {
            source: 1,
            source_attrs: vec![0],
            target: 0,
            target_attrs: vec![1],
        };
        assert!(Schema::new(vec![r, s], vec![bad_fk]).is_err());
    }

    #[test]
    fn hash_changes_with_structure() {
        let r = RelationSchema {
            name: "R".into(),
            attributes: vec![attr("a", DomainKind::Identifier)],
            key: vec![0],
        };
        let s1 = Schema::new(vec![r.clone()], vec![]).unwrap();
        let mut r2 = r;
        r2.attributes[0].domain = DomainKind::Text;
        let s2 = Schema::new(vec![r2], vec![]).unwrap();
        assert_ne!(s1.hash(), s2.hash());
    }
}
