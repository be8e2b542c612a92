//! Text formats: dense matrix CSV, rating triples and `key = value` configs.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::RatingDataset;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// One row per line, comma separated, shortest round-trip floats.
pub fn write_matrix_csv(m: &Array2<f64>, mut w: impl Write) -> Result<()> {
    let mut line = String::new();
    for row in m.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v}");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Reads a dense matrix. Blank lines and lines starting with `#` are
/// skipped; every row must have the same length.
pub fn read_matrix_csv(r: impl BufRead) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in t.split(',') {
            let tok = tok.trim();
            let v: f64 = tok.parse().map_err(|_| parse_err(idx + 1, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        let n = data.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => return Err(parse_err(idx + 1, format!("expected {c} columns, got {n}"))),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(0, "empty matrix"))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row lengths checked"))
}

/// A `(user, item, rating)` record.
pub type Triple = (usize, usize, f64);

/// Reads whitespace- or comma-separated triples with 0-based indices.
pub fn read_triples(r: impl BufRead) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if parts.len() != 3 {
            return Err(parse_err(idx + 1, format!("expected 3 fields, got {}", parts.len())));
        }
        let index = |s: &str, what: &str| s.parse::<usize>().map_err(|_| parse_err(idx + 1, format!("bad {what} index `{s}`")));
        let u = index(parts[0], "user")?;
        let i = index(parts[1], "item")?;
        let rating: f64 = parts[2].parse().map_err(|_| parse_err(idx + 1, format!("bad rating `{}`", parts[2])))?;
        if !rating.is_finite() {
            return Err(parse_err(idx + 1, "rating must be finite"));
        }
        out.push((u, i, rating));
    }
    if out.is_empty() {
        return Err(Error::InvalidDataset("no rating triples found".into()));
    }
    Ok(out)
}

/// Ratings at or above `threshold` become 1, the rest 0.
pub fn binarize(triples: &[Triple], threshold: f64) -> Vec<Triple> {
    triples.iter().map(|&(u, i, r)| (u, i, if r >= threshold { 1.0 } else { 0.0 })).collect()
}

/// Writes the observed entries of a dataset as tab-separated triples.
pub fn write_triples(d: &RatingDataset, mut w: impl Write) -> Result<()> {
    for (u, i, r) in d.observed_triples() {
        writeln!(w, "{u}\t{i}\t{r}")?;
    }
    Ok(())
}

fn scalar(raw: &str) -> Value {
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(n) = raw.parse::<u64>() {
        return Value::from(n);
    }
    if let Ok(n) = raw.parse::<i64>() {
        return Value::from(n);
    }
    if let Ok(x) = raw.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    let unquoted = raw.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(raw);
    Value::String(unquoted.to_string())
}

/// Parses `key = value` lines into a JSON object. Dotted keys nest and
/// comma-separated values become arrays. `#` starts a comment line.
pub fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (idx, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (key, raw) = t.split_once('=').ok_or_else(|| parse_err(idx + 1, "expected `key = value`"))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            return Err(parse_err(idx + 1, "empty key"));
        }
        let value = if raw.contains(',') {
            Value::Array(raw.split(',').map(|s| scalar(s.trim())).collect())
        } else {
            scalar(raw)
        };
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| parse_err(idx + 1, format!("`{part}` is both a value and a section")))?;
        }
        let last = parts[parts.len() - 1];
        if node.insert(last.to_string(), value).is_some() {
            return Err(parse_err(idx + 1, format!("duplicate key `{key}`")));
        }
    }
    Ok(Value::Object(root))
}

/// Deserializes a `key = value` config into `T`. Missing keys take the
/// type's defaults when `T` uses `#[serde(default)]`.
pub fn from_kv<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value = parse_kv(text)?;
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig {
        field: "config".into(),
        msg: e.to_string(),
    })
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
