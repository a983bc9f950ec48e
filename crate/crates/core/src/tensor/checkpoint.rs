//! Plain-text parameter checkpoints.
//!
//! ```text
//! difftune-checkpoint 1
//! meta <key> <value>
//! block <name> <rank> <extent>...
//! <row-major values separated by spaces>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! loading a saved checkpoint reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::array::DenseArray;
use super::mlp::{Activation, Mlp};
use crate::error::{Error, Result};

const MAGIC: &str = "difftune-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<(String, DenseArray)>,
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("checkpoint line {line}: {msg}"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, block: DenseArray) {
        self.blocks.push((name.to_string(), block));
    }

    pub fn block(&self, name: &str) -> Option<&DenseArray> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    /// Store a network under `prefix` (widths, activation, one block per tensor).
    pub fn push_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        let widths: Vec<String> = mlp.widths().iter().map(|w| w.to_string()).collect();
        self.insert_meta(&format!("{prefix}.widths"), widths.join(","));
        self.insert_meta(&format!("{prefix}.activation"), mlp.activation().name());
        for (i, p) in mlp.params().iter().enumerate() {
            self.push(&format!("{prefix}.{i}"), p.clone());
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let widths = self
            .meta
            .get(&format!("{prefix}.widths"))
            .ok_or_else(|| Error::Parse(format!("no network `{prefix}` in checkpoint")))?;
        let widths: Vec<usize> = widths
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::Parse(format!("bad width `{w}`"))))
            .collect::<Result<_>>()?;
        let act = self
            .meta
            .get(&format!("{prefix}.activation"))
            .map(String::as_str)
            .unwrap_or("tanh");
        let params = (0..2 * (widths.len().saturating_sub(1)))
            .map(|i| {
                self.block(&format!("{prefix}.{i}"))
                    .cloned()
                    .ok_or_else(|| Error::Parse(format!("missing block {prefix}.{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_params(&widths, Activation::parse(act)?, params)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Contract(format!("meta key `{k}` not storable")));
            }
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, block) in &self.blocks {
            if name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("block name `{name}` contains whitespace")));
            }
            if !block.is_finite() {
                return Err(Error::Numeric(format!("block `{name}` has non-finite values")));
            }
            let dims: Vec<String> = block.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "block {name} {} {}", block.shape().len(), dims.join(" ")).unwrap();
            let vals: Vec<String> = block.values().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(parse_err(1, "missing header")),
        }
        let mut ck = Checkpoint::new();
        while let Some((i, line)) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("block ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| parse_err(i + 1, "missing name"))?;
                let rank: usize = parts
                    .next()
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| parse_err(i + 1, "bad rank"))?;
                let shape: Vec<usize> = parts
                    .map(|d| d.parse().map_err(|_| parse_err(i + 1, "bad extent")))
                    .collect::<Result<_>>()?;
                if shape.len() != rank {
                    return Err(parse_err(i + 1, "rank does not match extents"));
                }
                let (j, data) = lines.next().ok_or_else(|| parse_err(i + 2, "missing values"))?;
                let values: Vec<f64> = data
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| parse_err(j + 1, format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?;
                let block = DenseArray::new(shape, values).map_err(|e| parse_err(j + 1, e))?;
                ck.blocks.push((name.to_string(), block));
            } else {
                return Err(parse_err(i + 1, format!("unexpected `{line}`")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = Stream::new(11, 0);
        let m = Mlp::new(&[3, 7, 2], Activation::Relu, &mut s).unwrap();
        let mut ck = Checkpoint::new();
        ck.push_mlp("eps", &m);
        ck.push("odd", DenseArray::new(vec![3], vec![1e-300, -0.1, 1.0 / 3.0]).unwrap());
        ck.insert_meta("horizon", 4.0);
        let back = Checkpoint::from_text(&ck.to_text().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp("eps").unwrap(), m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_text("hello").is_err());
        let bad = format!("{MAGIC}\nblock a 2 2 2\n1 2 3\n");
        assert!(Checkpoint::from_text(&bad).is_err());
    }
}
