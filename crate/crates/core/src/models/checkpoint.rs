//! Text checkpoints: a version line, `key value` header lines, then one
//! `array <name> <rows> <cols>` block per parameter array with one row per
//! line. Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{FactorModel, FactorParams, ImputationModel, PropensityModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "omedr-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Factor(FactorModel),
    Imputation(ImputationModel),
    Propensity(PropensityModel),
}

fn push_array(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let _ = writeln!(out, "array {name} {rows} {cols}");
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn factor_body(kind: &str, p: &FactorParams) -> String {
    let (n, m, d) = (p.n_users(), p.n_items(), p.dim());
    let theta = p.as_slice();
    let emb = p.n_embedding();
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(s, "kind {kind}\nn_users {n}\nn_items {m}\ndim {d}");
    push_array(&mut s, "user_emb", n, d, &theta[..n * d]);
    push_array(&mut s, "item_emb", m, d, &theta[n * d..emb]);
    push_array(&mut s, "user_bias", 1, n, &theta[emb..emb + n]);
    push_array(&mut s, "item_bias", 1, m, &theta[emb + n..emb + n + m]);
    push_array(&mut s, "global_bias", 1, 1, &theta[emb + n + m..]);
    s
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<()> {
    let body = match ckpt {
        Checkpoint::Factor(f) => factor_body("factor", &f.params),
        Checkpoint::Imputation(e) => factor_body("imputation", &e.params),
        Checkpoint::Propensity(p) => {
            let (n, m) = (p.n_users(), p.n_items());
            let psi = p.as_slice();
            let mut s = String::new();
            let _ = writeln!(s, "{MAGIC} v{CHECKPOINT_VERSION}");
            let _ = writeln!(s, "kind propensity\nn_users {n}\nn_items {m}");
            push_array(&mut s, "w_user", 1, n, &psi[..n]);
            push_array(&mut s, "w_item", 1, m, &psi[n..n + m]);
            push_array(&mut s, "beta_user", 1, n, &psi[n + m..2 * n + m]);
            push_array(&mut s, "gamma_item", 1, m, &psi[2 * n + m..]);
            s
        }
    };
    w.write_all(body.as_bytes())?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        loop {
            self.line_no += 1;
            match self.inner.next() {
                None => return Err(self.err("unexpected end of checkpoint")),
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        return Ok(line);
                    }
                }
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn header(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn header_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.header(key)?;
        v.parse().map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    fn array(&mut self, name: &str, rows: usize, cols: usize, out: &mut Vec<f64>) -> Result<()> {
        let line = self.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let expect = ["array", name, &rows.to_string(), &cols.to_string()];
        if parts != expect {
            return Err(self.err(format!("expected `array {name} {rows} {cols}`")));
        }
        for _ in 0..rows {
            let line = self.next_line()?;
            let mut count = 0;
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| self.err(format!("bad number `{tok}`")))?;
                out.push(v);
                count += 1;
            }
            if count != cols {
                return Err(self.err(format!("expected {cols} values, got {count}")));
            }
        }
        Ok(())
    }
}

pub fn read_checkpoint(r: impl BufRead) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: r.lines(),
        line_no: 0,
    };
    let first = lines.next_line()?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| lines.err("not an omedr checkpoint"))?;
    if version != CHECKPOINT_VERSION {
        return Err(lines.err(format!("unsupported checkpoint version {version}")));
    }
    let kind = lines.header("kind")?;
    let n = lines.header_usize("n_users")?;
    let m = lines.header_usize("n_items")?;
    match kind.as_str() {
        "factor" | "imputation" => {
            let d = lines.header_usize("dim")?;
            let mut theta = Vec::new();
            lines.array("user_emb", n, d, &mut theta)?;
            lines.array("item_emb", m, d, &mut theta)?;
            lines.array("user_bias", 1, n, &mut theta)?;
            lines.array("item_bias", 1, m, &mut theta)?;
            lines.array("global_bias", 1, 1, &mut theta)?;
            let p = FactorParams::from_parts(n, m, d, theta)?;
            Ok(if kind == "factor" {
                Checkpoint::Factor(FactorModel::new(p))
            } else {
                Checkpoint::Imputation(ImputationModel::new(p))
            })
        }
        "propensity" => {
            let mut psi = Vec::new();
            lines.array("w_user", 1, n, &mut psi)?;
            lines.array("w_item", 1, m, &mut psi)?;
            lines.array("beta_user", 1, n, &mut psi)?;
            lines.array("gamma_item", 1, m, &mut psi)?;
            Ok(Checkpoint::Propensity(PropensityModel::from_parts(n, m, psi)?))
        }
        other => Err(lines.err(format!("unknown model kind `{other}`"))),
    }
}
