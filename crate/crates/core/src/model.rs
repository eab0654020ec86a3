//! Core domain types: attributes, values, tuples, cells and FD/CFD rules.
//!
//! Everything here is an immutable value type. Attribute names and text
//! values are reference counted so that projecting a tuple once per rule
//! does not copy strings.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::ModelError;

/// Name of a schema attribute.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeId(Arc<str>);

impl AttributeId {
    pub fn new(name: &str) -> Self {
        Self(Arc::from(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for AttributeId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

impl fmt::Debug for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A nullable attribute value. Numeric data is carried as canonical text,
/// so equality is exact equality of the text.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Null,
    Text(Arc<str>),
}

impl Value {
    pub fn text(s: &str) -> Self {
        Value::Text(Arc::from(s))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Null => None,
            Value::Text(s) => Some(s),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::text(s)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Null => serializer.serialize_none(),
            Value::Text(s) => serializer.serialize_str(s),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValueVisitor;

        impl Visitor<'_> for ValueVisitor {
            type Value = Value;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a string, number, boolean or null")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
                Ok(Value::text(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
                Ok(Value::text(&v.to_string()))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
                Ok(Value::text(&v.to_string()))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
                Ok(Value::text(&v.to_string()))
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<Value, E> {
                Ok(Value::text(if v { "true" } else { "false" }))
            }

            fn visit_none<E: de::Error>(self) -> Result<Value, E> {
                Ok(Value::Null)
            }

            fn visit_unit<E: de::Error>(self) -> Result<Value, E> {
                Ok(Value::Null)
            }
        }

        deserializer.deserialize_any(ValueVisitor)
    }
}

/// Stream position of a tuple. Ids are unique and strictly increasing in
/// arrival order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TupleId(pub u64);

impl fmt::Debug for TupleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for TupleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u32);

impl fmt::Debug for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A record of the input stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuple {
    pub id: TupleId,
    pub values: BTreeMap<AttributeId, Value>,
}

impl Tuple {
    pub fn new<'a>(id: u64, values: impl IntoIterator<Item = (&'a str, Value)>) -> Self {
        Self {
            id: TupleId(id),
            values: values
                .into_iter()
                .map(|(k, v)| (AttributeId::new(k), v))
                .collect(),
        }
    }

    pub fn get(&self, attr: &AttributeId) -> Result<&Value, ModelError> {
        self.values
            .get(attr)
            .ok_or_else(|| ModelError::UnknownAttribute {
                attr: attr.to_string(),
                tuple: self.id,
            })
    }

    pub fn cell(&self, attr: &AttributeId) -> Result<Cell, ModelError> {
        Ok(Cell {
            tuple_id: self.id,
            attr: attr.clone(),
            value: self.get(attr)?.clone(),
        })
    }

    pub fn from_json(line: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(line)?)
    }
}

/// `(tuple id, attribute, value)`. Cells are never rewritten once created.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub tuple_id: TupleId,
    pub attr: AttributeId,
    pub value: Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Predicate {
    #[serde(rename = "neq_null")]
    NotNull { attr: AttributeId },
    #[serde(rename = "eq")]
    Equals { attr: AttributeId, value: String },
    #[serde(rename = "neq")]
    NotEquals { attr: AttributeId, value: String },
}

impl Predicate {
    pub fn attr(&self) -> &AttributeId {
        match self {
            Predicate::NotNull { attr }
            | Predicate::Equals { attr, .. }
            | Predicate::NotEquals { attr, .. } => attr,
        }
    }

    fn holds(&self, value: &Value) -> bool {
        match self {
            Predicate::NotNull { .. } => !value.is_null(),
            Predicate::Equals { value: c, .. } => value.as_text() == Some(c.as_str()),
            Predicate::NotEquals { value: c, .. } => value.as_text() != Some(c.as_str()),
        }
    }
}

/// Conjunction of predicates. The empty conjunction is always true, which
/// makes a plain FD a CFD with a trivial condition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Condition {
    pub conjuncts: Vec<Predicate>,
}

impl Condition {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn not_null<'a>(attrs: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            conjuncts: attrs
                .into_iter()
                .map(|a| Predicate::NotNull { attr: a.into() })
                .collect(),
        }
    }

    pub fn attrs(&self) -> impl Iterator<Item = &AttributeId> {
        self.conjuncts.iter().map(Predicate::attr)
    }
}

/// Evaluates `cond` on `t`. `attr ≠ null` is false on a Null value.
pub fn eval_condition(cond: &Condition, t: &Tuple) -> Result<bool, ModelError> {
    for p in &cond.conjuncts {
        if !p.holds(t.get(p.attr())?) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRule")]
pub struct Rule {
    pub id: RuleId,
    pub lhs: Vec<AttributeId>,
    pub rhs: AttributeId,
    #[serde(rename = "cond")]
    pub condition: Condition,
}

#[derive(Deserialize)]
struct RawRule {
    id: RuleId,
    lhs: Vec<AttributeId>,
    rhs: AttributeId,
    #[serde(default)]
    cond: Condition,
}

impl TryFrom<RawRule> for Rule {
    type Error = ModelError;

    fn try_from(raw: RawRule) -> Result<Self, Self::Error> {
        Rule::new(raw.id.0, raw.lhs, raw.rhs, raw.cond)
    }
}

impl Rule {
    pub fn new(
        id: u32,
        lhs: Vec<AttributeId>,
        rhs: AttributeId,
        condition: Condition,
    ) -> Result<Self, ModelError> {
        if lhs.is_empty() {
            return Err(ModelError::InvalidRule {
                rule: RuleId(id),
                reason: "empty left-hand side".into(),
            });
        }
        if lhs.contains(&rhs) {
            return Err(ModelError::InvalidRule {
                rule: RuleId(id),
                reason: format!("right-hand side {rhs} also appears on the left"),
            });
        }
        Ok(Self {
            id: RuleId(id),
            lhs,
            rhs,
            condition,
        })
    }

    /// Plain FD `lhs -> rhs`.
    pub fn fd(id: u32, lhs: &[&str], rhs: &str) -> Result<Self, ModelError> {
        Self::new(
            id,
            lhs.iter().map(|a| AttributeId::new(a)).collect(),
            rhs.into(),
            Condition::always(),
        )
    }

    /// `lhs -> rhs` restricted to tuples whose LHS attributes are all non-null.
    pub fn cfd_not_null(id: u32, lhs: &[&str], rhs: &str) -> Result<Self, ModelError> {
        Self::new(
            id,
            lhs.iter().map(|a| AttributeId::new(a)).collect(),
            rhs.into(),
            Condition::not_null(lhs.iter().copied()),
        )
    }

    /// All attributes the rule reads.
    pub fn attrs(&self) -> impl Iterator<Item = &AttributeId> {
        self.lhs
            .iter()
            .chain(std::iter::once(&self.rhs))
            .chain(self.condition.attrs())
    }
}

/// Parses a rule file: either a JSON array of rule objects or one rule
/// object per line.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, ModelError> {
    let trimmed = text.trim_start();
    let rules: Vec<Rule> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?
    };
    let mut seen = std::collections::BTreeSet::new();
    for r in &rules {
        if !seen.insert(r.id) {
            return Err(ModelError::DuplicateRule(r.id));
        }
    }
    Ok(rules)
}

/// The per-rule projection of a tuple sent to that rule's detect worker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTuple {
    pub tuple_id: TupleId,
    pub rule_id: RuleId,
    pub lhs_values: Vec<Value>,
    pub rhs_cell: Cell,
    pub cond_holds: bool,
}

impl SubTuple {
    pub fn lhs_has_null(&self) -> bool {
        self.lhs_values.iter().any(Value::is_null)
    }
}

pub fn project(t: &Tuple, r: &Rule) -> Result<SubTuple, ModelError> {
    let lhs_values = r
        .lhs
        .iter()
        .map(|a| t.get(a).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SubTuple {
        tuple_id: t.id,
        rule_id: r.id,
        lhs_values,
        rhs_cell: t.cell(&r.rhs)?,
        cond_holds: eval_condition(&r.condition, t)?,
    })
}

pub fn lhs_has_null(st: &SubTuple) -> bool {
    st.lhs_has_null()
}
