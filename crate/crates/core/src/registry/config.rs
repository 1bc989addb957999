use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// A scalar config value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Real(f64),
    Bool(bool),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "integer",
            Value::Real(_) => "real",
            Value::Bool(_) => "bool",
        }
    }

    /// Parses `raw` as the same variant as `self`.
    pub fn parse_like(&self, key: &str, raw: &str) -> Result<Value> {
        let raw = raw.trim();
        let bad = || Error::ConfigValue {
            key: key.to_string(),
            message: format!("expected {}, got '{raw}'", self.type_name()),
        };
        Ok(match self {
            Value::Str(_) => Value::Str(raw.to_string()),
            Value::Int(_) => Value::Int(raw.parse().map_err(|_| bad())?),
            Value::Real(_) => Value::Real(raw.parse().map_err(|_| bad())?),
            Value::Bool(_) => Value::Bool(match raw {
                "true" | "1" | "yes" | "on" => true,
                "false" | "0" | "no" | "off" => false,
                _ => return Err(bad()),
            }),
        })
    }

    fn same_type(&self, other: &Value) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => f.write_str(s),
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:?}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(r: f64) -> Self {
        Value::Real(r)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Default,
    Architecture,
    User,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::Architecture => "architecture",
            Provenance::User => "user",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(Provenance::Default),
            "architecture" => Some(Provenance::Architecture),
            "user" => Some(Provenance::User),
            _ => None,
        }
    }
}

/// A declared config key and its default.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySpec {
    pub key: String,
    pub default: Value,
    pub help: String,
}

impl KeySpec {
    pub fn new(key: &str, default: impl Into<Value>, help: &str) -> Self {
        Self {
            key: key.to_string(),
            default: default.into(),
            help: help.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Value,
    pub provenance: Provenance,
}

/// Flat key/value configuration with per-key provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Defaults for every key in `schema`.
    pub fn from_schema(schema: &[KeySpec]) -> Self {
        let entries = schema
            .iter()
            .map(|k| {
                (
                    k.key.clone(),
                    Entry {
                        value: k.default.clone(),
                        provenance: Provenance::Default,
                    },
                )
            })
            .collect();
        Self { entries }
    }

    /// Sets a declared key. Lower-precedence writes never replace higher ones.
    pub fn set(&mut self, key: &str, value: Value, provenance: Provenance) -> Result<()> {
        let entry = self
            .entries
            .get_mut(key)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        if !entry.value.same_type(&value) {
            return Err(Error::ConfigValue {
                key: key.to_string(),
                message: format!("expected {}, got {}", entry.value.type_name(), value.type_name()),
            });
        }
        if provenance >= entry.provenance {
            *entry = Entry { value, provenance };
        }
        Ok(())
    }

    /// Adds or replaces `key` outright, declaring it if needed.
    pub fn declare(&mut self, key: &str, value: Value, provenance: Provenance) {
        self.entries.insert(key.to_string(), Entry { value, provenance });
    }

    /// Parses `raw` against the declared type of `key`.
    pub fn set_raw(&mut self, key: &str, raw: &str, provenance: Provenance) -> Result<()> {
        let template = &self
            .entries
            .get(key)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?
            .value;
        let value = template.parse_like(key, raw)?;
        self.set(key, value, provenance)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.entries.get(key).map(|e| e.provenance)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn value(&self, key: &str) -> Result<&Value> {
        self.entries
            .get(key)
            .map(|e| &e.value)
            .ok_or_else(|| Error::ConfigValue {
                key: key.to_string(),
                message: "missing".into(),
            })
    }

    fn wrong(key: &str, want: &str, got: &Value) -> Error {
        Error::ConfigValue {
            key: key.to_string(),
            message: format!("expected {want}, got {}", got.type_name()),
        }
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.value(key)? {
            Value::Str(s) => Ok(s),
            v => Err(Self::wrong(key, "string", v)),
        }
    }

    pub fn get_int(&self, key: &str) -> Result<i64> {
        match self.value(key)? {
            Value::Int(i) => Ok(*i),
            v => Err(Self::wrong(key, "integer", v)),
        }
    }

    pub fn get_real(&self, key: &str) -> Result<f64> {
        match self.value(key)? {
            Value::Real(r) => Ok(*r),
            Value::Int(i) => Ok(*i as f64),
            v => Err(Self::wrong(key, "real", v)),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.value(key)? {
            Value::Bool(b) => Ok(*b),
            v => Err(Self::wrong(key, "bool", v)),
        }
    }

    /// Non-negative integer.
    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let i = self.get_int(key)?;
        usize::try_from(i).map_err(|_| Error::ConfigValue {
            key: key.to_string(),
            message: format!("must be non-negative, got {i}"),
        })
    }

    /// Lines of `key = value`, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, e)| format!("{k} = {}\n", e.value))
            .collect()
    }
}

/// Parses a config file body: `key = value` lines, `#` comments, blank lines.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("config line {}: expected 'key = value'", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Invalid(format!("config line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<KeySpec> {
        vec![
            KeySpec::new("heads", 4i64, ""),
            KeySpec::new("lr", 0.5, ""),
            KeySpec::new("fp16", false, ""),
            KeySpec::new("name", "x", ""),
        ]
    }

    #[test]
    fn precedence_is_user_over_architecture_over_default() {
        let mut c = Config::from_schema(&schema());
        c.set("heads", Value::Int(1), Provenance::User).unwrap();
        c.set("heads", Value::Int(2), Provenance::Architecture).unwrap();
        assert_eq!(c.get_int("heads").unwrap(), 1);
        assert_eq!(c.provenance("heads"), Some(Provenance::User));
    }

    #[test]
    fn typed_parsing() {
        let mut c = Config::from_schema(&schema());
        c.set_raw("lr", "1e-3", Provenance::User).unwrap();
        c.set_raw("fp16", "true", Provenance::User).unwrap();
        assert_eq!(c.get_real("lr").unwrap(), 1e-3);
        assert!(c.get_bool("fp16").unwrap());
        assert!(matches!(
            c.set_raw("heads", "two", Provenance::User),
            Err(Error::ConfigValue { .. })
        ));
        assert!(matches!(c.set_raw("nope", "1", Provenance::User), Err(Error::UnknownKey(k)) if k == "nope"));
    }

    #[test]
    fn real_values_roundtrip_through_text() {
        let v = Value::Real(0.1 + 0.2);
        let back = Value::Real(0.0).parse_like("k", &v.to_string()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn config_file_syntax() {
        let parsed = parse_config_text("# comment\nlr = 0.1  # trailing\n\nheads=2\n").unwrap();
        assert_eq!(parsed, vec![("lr".into(), "0.1".into()), ("heads".into(), "2".into())]);
        assert!(parse_config_text("oops").is_err());
    }
}
