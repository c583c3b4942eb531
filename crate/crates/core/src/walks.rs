//! Walk schemes over foreign keys.
//!
//! A walk scheme is a start relation plus a sequence of foreign-key steps,
//! each taken forward (referencing to referenced) or backward. Walking a
//! scheme from a fact induces a distribution over end facts: at every step
//! the walk picks uniformly among matching facts, and walks that hit a dead
//! end are discarded (the remaining mass is renormalized at the end).

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::relational::{Database, Fact, FactId, Schema, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// One hop along a foreign key (index into the schema's foreign key list).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Step {
    pub fk: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WalkScheme {
    pub start: usize,
    pub steps: Vec<Step>,
}

/// Distribution over end facts of a walk.
pub type EndpointDistribution = BTreeMap<FactId, f64>;

/// Distribution over non-null values of one attribute at the end of a walk.
pub type ValueDistribution = BTreeMap<Value, f64>;

impl WalkScheme {
    pub fn empty(start: usize) -> WalkScheme {
        WalkScheme { start, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The relation a step leaves from, given the relation it stands at.
    fn step_source(schema: &Schema, step: Step) -> usize {
        let fk = &schema.foreign_keys[step.fk];
        match step.direction {
            Direction::Forward => fk.source,
            Direction::Backward => fk.target,
        }
    }

    fn step_target(schema: &Schema, step: Step) -> usize {
        let fk = &schema.foreign_keys[step.fk];
        match step.direction {
            Direction::Forward => fk.target,
            Direction::Backward => fk.source,
        }
    }

    /// Checks that consecutive steps chain up and returns the end relation.
    pub fn end_relation(&self, schema: &Schema) -> Result<usize> {
        let mut cur = self.start;
        for (i, &step) in self.steps.iter().enumerate() {
            if step.fk >= schema.foreign_keys.len() {
                return Err(Error::InvalidConfig(format!(
                    "walk scheme step {i} names foreign key {} out of range",
                    step.fk
                )));
            }
            if Self::step_source(schema, step) != cur {
                return Err(Error::InvalidConfig(format!(
                    "walk scheme step {i} does not start at relation {}",
                    schema.relation(cur).name
                )));
            }
            cur = Self::step_target(schema, step);
        }
        Ok(cur)
    }

    /// Canonical text form: steps rendered `From[attrs]--To[attrs]` and
    /// joined by `, `; the empty scheme renders as the empty string.
    pub fn render(&self, schema: &Schema) -> String {
        let mut parts = Vec::with_capacity(self.steps.len());
        for &step in &self.steps {
            let fk = &schema.foreign_keys[step.fk];
            let names = |rel: usize, attrs: &[usize]| -> String {
                attrs
                    .iter()
                    .map(|&a| schema.relation(rel).attributes[a].name.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let (here, here_attrs, there, there_attrs) = match step.direction {
                Direction::Forward => (fk.source, &fk.source_attrs, fk.target, &fk.target_attrs),
                Direction::Backward => (fk.target, &fk.target_attrs, fk.source, &fk.source_attrs),
            };
            parts.push(format!(
                "{}[{}]--{}[{}]",
                schema.relation(here).name,
                names(here, here_attrs),
                schema.relation(there).name,
                names(there, there_attrs),
            ));
        }
        parts.join(", ")
    }

    /// Parses the canonical text form back into a scheme anchored at `start`.
    /// Inverse of `render` for every scheme enumerable from the schema.
    pub fn parse(schema: &Schema, start: usize, text: &str) -> Result<WalkScheme> {
        let err = |message: String| Error::Parse {
            location: "walk scheme".into(),
            message,
        };
        let mut steps = Vec::new();
        let mut cur = start;
        if !text.is_empty() {
            for part in split_steps(text).map_err(err)? {
                let (left, right) = part
                    .split_once("--")
                    .ok_or_else(|| err(format!("step {part:?} lacks `--`")))?;
                let (left_rel, left_attrs) = split_site(left).map_err(err)?;
                let (right_rel, right_attrs) = split_site(right).map_err(err)?;
                if left_rel != schema.relation(cur).name {
                    return Err(err(format!(
                        "step starts at {left_rel}, walk stands at {}",
                        schema.relation(cur).name
                    )));
                }
                let step = resolve_step(schema, cur, &left_attrs, right_rel, &right_attrs)
                    .ok_or_else(|| err(format!("step {part:?} matches no foreign key")))?;
                cur = Self::step_target(schema, step);
                steps.push(step);
            }
        }
        Ok(WalkScheme { start, steps })
    }
}

/// Splits the rendered form at top-level `, ` boundaries (commas inside
/// brackets separate attribute names, not steps).
fn split_steps(text: &str) -> std::result::Result<Vec<&str>, String> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut parts = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => depth += 1,
            b']' => depth = depth.checked_sub(1).ok_or("unbalanced brackets")?,
            b',' if depth == 0 => {
                if bytes.get(i + 1) != Some(&b' ') {
                    return Err("steps must be separated by `, `".into());
                }
                parts.push(&text[start..i]);
                start = i + 2;
                i += 1;
            }
            _ => {}
        }
        i += 1;
    }
    if depth != 0 {
        return Err("unbalanced brackets".into());
    }
    parts.push(&text[start..]);
    Ok(parts)
}

fn split_site(site: &str) -> std::result::Result<(&str, Vec<&str>), String> {
    let open = site.find('[').ok_or_else(|| format!("site {site:?} lacks `[`"))?;
    if !site.ends_with(']') {
        return Err(format!("site {site:?} lacks closing `]`"));
    }
    let rel = &site[..open];
    let attrs: Vec<&str> = site[open + 1..site.len() - 1].split(',').collect();
    if attrs.iter().any(|a| a.is_empty()) {
        return Err(format!("site {site:?} has an empty attribute name"));
    }
    Ok((rel, attrs))
}

fn resolve_step(
    schema: &Schema,
    cur: usize,
    here_attrs: &[&str],
    there_rel: &str,
    there_attrs: &[&str],
) -> Option<Step> {
    let attr_names = |rel: usize, attrs: &[usize]| -> Vec<&str> {
        attrs
            .iter()
            .map(|&a| schema.relation(rel).attributes[a].name.as_str())
            .collect()
    };
    for (i, fk) in schema.foreign_keys.iter().enumerate() {
        if fk.source == cur
            && schema.relation(fk.target).name == there_rel
            && attr_names(fk.source, &fk.source_attrs) == here_attrs
            && attr_names(fk.target, &fk.target_attrs) == there_attrs
        {
            return Some(Step { fk: i, direction: Direction::Forward });
        }
        if fk.target == cur
            && schema.relation(fk.source).name == there_rel
            && attr_names(fk.target, &fk.target_attrs) == here_attrs
            && attr_names(fk.source, &fk.source_attrs) == there_attrs
        {
            return Some(Step { fk: i, direction: Direction::Backward });
        }
    }
    None
}

/// All walk schemes starting at a relation with at most `max_len` steps, in
/// canonical order: shorter first, ties broken lexicographically by step
/// (foreign key index, then forward before backward). The result is closed
/// under prefixes and includes the empty scheme.
pub fn enumerate_walk_schemes(schema: &Schema, start: usize, max_len: usize) -> Vec<WalkScheme> {
    let mut out = vec![WalkScheme::empty(start)];
    let mut frontier: Vec<(WalkScheme, usize)> = vec![(WalkScheme::empty(start), start)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (scheme, at) in &frontier {
            for step in steps_from(schema, *at) {
                let mut extended = scheme.clone();
                extended.steps.push(step);
                let target = WalkScheme::step_target(schema, step);
                next.push((extended, target));
            }
        }
        out.extend(next.iter().map(|(s, _)| s.clone()));
        frontier = next;
    }
    out
}

/// Steps available from a relation, in canonical (fk, direction) order.
fn steps_from(schema: &Schema, rel: usize) -> Vec<Step> {
    let mut steps = Vec::new();
    for (i, fk) in schema.foreign_keys.iter().enumerate() {
        if fk.source == rel {
            steps.push(Step { fk: i, direction: Direction::Forward });
        }
        if fk.target == rel {
            steps.push(Step { fk: i, direction: Direction::Backward });
        }
    }
    steps.sort();
    steps
}

/// The scheme/attribute pairs an embedding is trained against: every scheme
/// from the start relation paired with every attribute of its end relation
/// that is not involved in any foreign key. Canonical order follows the
/// scheme enumeration, then attribute index.
pub fn scheme_attribute_pairs(
    schema: &Schema,
    start: usize,
    max_len: usize,
) -> Vec<(WalkScheme, usize)> {
    let mut pairs = Vec::new();
    for scheme in enumerate_walk_schemes(schema, start, max_len) {
        let end = scheme.end_relation(schema).expect("enumerated schemes are valid");
        for attr in 0..schema.relation(end).arity() {
            if !schema.fk_involved(end, attr) {
                pairs.push((scheme.clone(), attr));
            }
        }
    }
    pairs
}

/// Facts one step away from `fact`, in ascending id order. Empty when the
/// step dead-ends (null source attributes, or nothing on the other side).
pub fn step_matches(db: &Database, fact: &Fact, step: Step) -> Vec<FactId> {
    let schema = db.schema();
    let fk = &schema.foreign_keys[step.fk];
    match step.direction {
        Direction::Forward => {
            let vals: Vec<Value> = fk.source_attrs.iter().map(|&i| fact.values[i].clone()).collect();
            if vals.iter().any(Value::is_null) {
                return Vec::new();
            }
            let target_key: Vec<Value> = schema
                .relation(fk.target)
                .key
                .iter()
                .map(|k| {
                    let pos = fk.target_attrs.iter().position(|t| t == k).unwrap();
                    vals[pos].clone()
                })
                .collect();
            db.lookup_key(fk.target, &target_key).into_iter().collect()
        }
        Direction::Backward => {
            let key = fact.key(schema);
            db.referencing(step.fk, &key).collect()
        }
    }
}

/// The distribution over end facts of walking `scheme` from `fact`. Mass
/// lost to dead ends is dropped and the rest renormalized; when every walk
/// dies the distribution is empty.
pub fn destination_distribution(
    db: &Database,
    fact: FactId,
    scheme: &WalkScheme,
) -> Result<EndpointDistribution> {
    let f = db.fact(fact).ok_or(Error::FactNotFound(fact))?;
    if f.relation != scheme.start {
        return Err(Error::RelationMismatch {
            expected: db.schema().relation(scheme.start).name.clone(),
            found: db.schema().relation(f.relation).name.clone(),
        });
    }
    scheme.end_relation(db.schema())?;
    let mut cur: EndpointDistribution = BTreeMap::new();
    cur.insert(fact, 1.0);
    for &step in &scheme.steps {
        let mut next: EndpointDistribution = BTreeMap::new();
        for (&id, &mass) in &cur {
            let matches = step_matches(db, db.fact(id).unwrap(), step);
            if matches.is_empty() {
                continue;
            }
            let share = mass / matches.len() as f64;
            for m in matches {
                *next.entry(m).or_insert(0.0) += share;
            }
        }
        cur = next;
    }
    let total: f64 = cur.values().sum();
    if total <= 0.0 {
        return Ok(BTreeMap::new());
    }
    for mass in cur.values_mut() {
        *mass /= total;
    }
    Ok(cur)
}

/// Projects an endpoint distribution onto one attribute of the end relation,
/// conditioning on the value being non-null. `None` means the distribution
/// does not exist (no walks survive, or every endpoint is null there).
pub fn attribute_distribution(
    db: &Database,
    endpoints: &EndpointDistribution,
    attr: usize,
) -> Option<ValueDistribution> {
    let mut out: ValueDistribution = BTreeMap::new();
    let mut total = 0.0;
    for (&id, &mass) in endpoints {
        let v = &db.fact(id).expect("endpoint facts exist").values[attr];
        if v.is_null() {
            continue;
        }
        *out.entry(v.clone()).or_insert(0.0) += mass;
        total += mass;
    }
    if total <= 0.0 {
        return None;
    }
    for mass in out.values_mut() {
        *mass /= total;
    }
    Some(out)
}

/// Simulates one walk, choosing uniformly at each step. `None` when the walk
/// dead-ends before completing the scheme.
pub fn sample_walk<R: Rng>(
    db: &Database,
    fact: FactId,
    scheme: &WalkScheme,
    rng: &mut R,
) -> Result<Option<FactId>> {
    let f = db.fact(fact).ok_or(Error::FactNotFound(fact))?;
    if f.relation != scheme.start {
        return Err(Error::RelationMismatch {
            expected: db.schema().relation(scheme.start).name.clone(),
            found: db.schema().relation(f.relation).name.clone(),
        });
    }
    let mut cur = fact;
    for &step in &scheme.steps {
        let matches = step_matches(db, db.fact(cur).unwrap(), step);
        if matches.is_empty() {
            return Ok(None);
        }
        cur = matches[rng.gen_range(0..matches.len())];
    }
    Ok(Some(cur))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::{
        AttributeSchema, Database, DomainKind, ForeignKey, RelationSchema, Schema,
    };
    use crate::testutil::movies;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scheme(start: usize, steps: &[(usize, Direction)]) -> WalkScheme {
        WalkScheme {
            start,
            steps: steps.iter().map(|&(fk, direction)| Step { fk, direction }).collect(),
        }
    }

    fn actor(db: &Database, aid: &str) -> FactId {
        let rel = db.schema().relation_index("Actors").unwrap();
        db.lookup_key(rel, &[Value::Text(aid.into())]).unwrap()
    }

    fn movie(db: &Database, mid: &str) -> FactId {
        let rel = db.schema().relation_index("Movies").unwrap();
        db.lookup_key(rel, &[Value::Text(mid.into())]).unwrap()
    }

    const B: Direction = Direction::Backward;
    const F: Direction = Direction::Forward;

    #[test]
    fn enumeration_is_canonical_and_prefix_closed() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        let two = enumerate_walk_schemes(schema, actors, 2);
        assert_eq!(two.len(), 9);
        let three = enumerate_walk_schemes(schema, actors, 3);
        assert_eq!(three.len(), 21);
        // Shorter schemes come first and every prefix is present.
        for window in three.windows(2) {
            assert!(window[0].len() <= window[1].len());
        }
        for s in &three {
            if !s.is_empty() {
                let mut prefix = s.clone();
                prefix.steps.pop();
                assert!(three.contains(&prefix), "missing prefix of {:?}", s);
            }
        }
        assert_eq!(three[0], WalkScheme::empty(actors));
        assert_eq!(three[1], scheme(actors, &[(0, B)]));
        assert_eq!(three[2], scheme(actors, &[(1, B)]));
        assert_eq!(three[3], scheme(actors, &[(0, B), (0, F)]));
    }

    #[test]
    fn pairs_from_actors_match_the_expected_list() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        let pairs = scheme_attribute_pairs(schema, actors, 2);
        let rendered: Vec<(String, String)> = pairs
            .iter()
            .map(|(s, a)| {
                let end = s.end_relation(schema).unwrap();
                (s.render(schema), schema.relation(end).attributes[*a].name.clone())
            })
            .collect();
        let a1 = "Actors[aid]--Collaborations[actor1]";
        let a2 = "Actors[aid]--Collaborations[actor2]";
        let c1 = "Collaborations[actor1]--Actors[aid]";
        let c2 = "Collaborations[actor2]--Actors[aid]";
        let cm = "Collaborations[movie]--Movies[mid]";
        let expected: Vec<(String, String)> = vec![
            ("".into(), "name".into()),
            (format!("{a1}, {c1}"), "name".into()),
            (format!("{a1}, {c2}"), "name".into()),
            (format!("{a1}, {cm}"), "title".into()),
            (format!("{a1}, {cm}"), "budget".into()),
            (format!("{a1}, {cm}"), "genre".into()),
            (format!("{a2}, {c1}"), "name".into()),
            (format!("{a2}, {c2}"), "name".into()),
            (format!("{a2}, {cm}"), "title".into()),
            (format!("{a2}, {cm}"), "budget".into()),
            (format!("{a2}, {cm}"), "genre".into()),
        ];
        assert_eq!(rendered, expected);
    }

    #[test]
    fn render_parse_round_trips_every_scheme() {
        let db = movies();
        let schema = db.schema();
        for start in 0..schema.relations.len() {
            for s in enumerate_walk_schemes(schema, start, 3) {
                let text = s.render(schema);
                let back = WalkScheme::parse(schema, start, &text).unwrap();
                assert_eq!(back, s, "round trip failed for {:?}", text);
            }
        }
    }

    #[test]
    fn parse_rejects_unknown_step() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        assert!(WalkScheme::parse(schema, actors, "Actors[aid]--Nowhere[x]").is_err());
    }

    #[test]
    fn collaborator_movies_of_dicaprio_split_evenly() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        // Backward through actor2, forward through movie: films where a01
        // was the second-listed collaborator.
        let s = scheme(actors, &[(1, B), (2, F)]);
        let dist = destination_distribution(&db, actor(&db, "a01"), &s).unwrap();
        let expected: EndpointDistribution =
            [(movie(&db, "m03"), 0.5), (movie(&db, "m06"), 0.5)].into_iter().collect();
        assert_eq!(dist, expected);

        let movies_rel = schema.relation_index("Movies").unwrap();
        let budget = schema.relation(movies_rel).attribute_index("budget").unwrap();
        let budgets = attribute_distribution(&db, &dist, budget).unwrap();
        let expected: ValueDistribution = [
            (Value::Text("100M".into()), 0.5),
            (Value::Text("150M".into()), 0.5),
        ]
        .into_iter()
        .collect();
        assert_eq!(budgets, expected);

        // One of the two movies has a null genre; the distribution
        // conditions on the attribute existing.
        let genre = schema.relation(movies_rel).attribute_index("genre").unwrap();
        let genres = attribute_distribution(&db, &dist, genre).unwrap();
        let expected: ValueDistribution =
            [(Value::Text("Bio".into()), 1.0)].into_iter().collect();
        assert_eq!(genres, expected);
    }

    #[test]
    fn dead_ends_yield_empty_or_none() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        // a02 never appears as actor1.
        let s = scheme(actors, &[(0, B)]);
        let dist = destination_distribution(&db, actor(&db, "a02"), &s).unwrap();
        assert!(dist.is_empty());
        assert!(attribute_distribution(&db, &dist, 0).is_none());

        // m05 has a null studio: the forward step drops all mass.
        let movies_rel = schema.relation_index("Movies").unwrap();
        let s = scheme(movies_rel, &[(3, F)]);
        let dist = destination_distribution(&db, movie(&db, "m05"), &s).unwrap();
        assert!(dist.is_empty());
    }

    #[test]
    fn dropped_mass_is_renormalized() {
        // S <- R -> T where one R row has a null T reference: the surviving
        // branch carries all the mass.
        let schema = Schema::new(
            vec![
                RelationSchema {
                    name: "S".into(),
                    attributes: vec![AttributeSchema::new("sid", DomainKind::Identifier)],
                    key: vec![0],
                },
                RelationSchema {
                    name: "T".into(),
                    attributes: vec![AttributeSchema::new("tid", DomainKind::Identifier)],
                    key: vec![0],
                },
                RelationSchema {
                    name: "R".into(),
                    attributes: vec![
                        AttributeSchema::new("rid", DomainKind::Identifier),
                        AttributeSchema::new("s", DomainKind::Identifier),
                        AttributeSchema::new("t", DomainKind::Identifier),
                    ],
                    key: vec![0],
                },
            ],
            vec![
                ForeignKey { source: 2, source_attrs: vec![1], target: 0, target_attrs: vec![0] },
                ForeignKey { source: 2, source_attrs: vec![2], target: 1, target_attrs: vec![0] },
            ],
        )
        .unwrap();
        let mut db = Database::new(schema);
        let t = |s: &str| Value::Text(s.into());
        db.insert_batch(vec![
            ("S".into(), vec![t("s1")]),
            ("T".into(), vec![t("t1")]),
            ("R".into(), vec![t("r1"), t("s1"), t("t1")]),
            ("R".into(), vec![t("r2"), t("s1"), Value::Null]),
        ])
        .unwrap();
        let s1 = db.lookup_key(0, &[t("s1")]).unwrap();
        let t1 = db.lookup_key(1, &[t("t1")]).unwrap();
        let s = scheme(0, &[(0, B), (1, F)]);
        let dist = destination_distribution(&db, s1, &s).unwrap();
        // Before renormalization the surviving branch held mass 1/2.
        let expected: EndpointDistribution = [(t1, 1.0)].into_iter().collect();
        assert_eq!(dist, expected);
    }

    #[test]
    fn sampled_walks_stay_in_the_support_and_repeat_with_the_seed() {
        let db = movies();
        let schema = db.schema();
        let actors = schema.relation_index("Actors").unwrap();
        let s = scheme(actors, &[(1, B), (2, F)]);
        let start = actor(&db, "a01");
        let support = destination_distribution(&db, start, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let first: Vec<Option<FactId>> = (0..50)
            .map(|_| sample_walk(&db, start, &s, &mut rng).unwrap())
            .collect();
        for endpoint in first.iter().flatten() {
            assert!(support.contains_key(endpoint));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let second: Vec<Option<FactId>> = (0..50)
            .map(|_| sample_walk(&db, start, &s, &mut rng).unwrap())
            .collect();
        assert_eq!(first, second);

        // A dead-ended walk reports None.
        let dead = scheme(actors, &[(0, B)]);
        assert_eq!(sample_walk(&db, actor(&db, "a02"), &dead, &mut rng).unwrap(), None);
    }
}
