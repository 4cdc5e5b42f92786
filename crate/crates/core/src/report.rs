//! Canonical report serialization: an ordered JSON document with every
//! float printed at 17 significant digits, so identical runs emit
//! byte-identical reports and any JSON parser can read the numbers back
//! exactly.

use std::collections::BTreeMap;

/// Ordered JSON value with deterministic float formatting.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Array(Vec<Value>),
    /// Object entries keep insertion order.
    Object(Vec<(String, Value)>),
}

impl Value {
    pub fn object() -> Value {
        Value::Object(Vec::new())
    }

    pub fn push(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        if let Value::Object(entries) = self {
            entries.push((key.to_string(), value.into()));
        } else {
            panic!("push on non-object report value");
        }
        self
    }

    pub fn floats(values: impl IntoIterator<Item = f64>) -> Value {
        Value::Array(values.into_iter().map(Value::Float).collect())
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            Value::Null => out.push_str("null"),
            Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Value::Int(i) => out.push_str(&i.to_string()),
            Value::Float(x) => {
                if x.is_finite() {
                    out.push_str(&format!("{x:.17e}"));
                } else {
                    // JSON has no infinities; encode as strings.
                    out.push_str(&format!("\"{x}\""));
                }
            }
            Value::Str(s) => {
                out.push('"');
                for ch in s.chars() {
                    match ch {
                        '"' => out.push_str("\\\""),
                        '\\' => out.push_str("\\\\"),
                        '\n' => out.push_str("\\n"),
                        '\t' => out.push_str("\\t"),
                        c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
                        c => out.push(c),
                    }
                }
                out.push('"');
            }
            Value::Array(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    out.push_str(&"  ".repeat(indent + 1));
                    item.write(out, indent + 1);
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent));
                out.push(']');
            }
            Value::Object(entries) => {
                if entries.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    out.push_str(&"  ".repeat(indent + 1));
                    Value::Str(k.clone()).write(out, indent + 1);
                    out.push_str(": ");
                    v.write(out, indent + 1);
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent));
                out.push('}');
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<usize> for Value {
    fn from(i: usize) -> Self {
        Value::Int(i as i64)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::Array(v)
    }
}

/// A run report: named sections in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Report {
    sections: Vec<(String, Value)>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.sections.push(("command".into(), Value::Str(command.into())));
        r
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.sections.push((key.to_string(), value.into()));
        self
    }

    pub fn to_json(&self) -> String {
        Value::Object(self.sections.clone()).to_json()
    }
}

/// Parses the float fields of a report back (for tests and pipelines).
pub fn parse_report(text: &str) -> serde_json::Result<serde_json::Value> {
    serde_json::from_str(text)
}

/// Flattens {a: {b: 1}} into {"a.b": 1} for easy residual lookup.
pub fn flatten_floats(v: &serde_json::Value) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, f64>) {
        match v {
            serde_json::Value::Number(n) => {
                if let Some(x) = n.as_f64() {
                    out.insert(prefix.to_string(), x);
                }
            }
            serde_json::Value::Object(map) => {
                for (k, val) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, val, out);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, val) in items.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), val, out);
                }
            }
            _ => {}
        }
    }
    walk("", v, &mut out);
    out
}
