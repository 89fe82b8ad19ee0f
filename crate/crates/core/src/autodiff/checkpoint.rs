//! Plain-text checkpoint of named tensors.
//!
//! ```text
//! hpaf-checkpoint 1
//! meta <key> <value>
//! tensor <name> <rank> <d0> ... <dn>
//! <value> <value> ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a write/read
//! cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "hpaf-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (_, name, t) in self.params.iter() {
            let _ = write!(out, "tensor {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let values: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, first) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::parse(n, "missing checkpoint magic"))?;
        if version != VERSION {
            return Err(Error::parse(
                n,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut ckpt = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("meta") => {
                    let key = fields
                        .next()
                        .ok_or_else(|| Error::parse(n, "meta without key"))?;
                    let value = fields.collect::<Vec<_>>().join(" ");
                    ckpt.meta.insert(key.to_string(), value);
                }
                Some("tensor") => {
                    let name = fields
                        .next()
                        .ok_or_else(|| Error::parse(n, "tensor without name"))?;
                    let rank: usize = parse_field(fields.next(), n)?;
                    let shape = (0..rank)
                        .map(|_| parse_field(fields.next(), n))
                        .collect::<Result<Vec<usize>>>()?;
                    let (vn, values) = lines
                        .next()
                        .ok_or_else(|| Error::parse(n, "tensor without values"))?;
                    let data = values
                        .split_whitespace()
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|e| Error::parse(vn, e.to_string()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let tensor =
                        Tensor::new(shape, data).map_err(|e| Error::parse(vn, e.to_string()))?;
                    ckpt.params
                        .insert(name, tensor)
                        .map_err(|e| Error::parse(n, e.to_string()))?;
                }
                Some(other) => return Err(Error::parse(n, format!("unknown record `{other}`"))),
                None => {}
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text)
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: usize) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::parse(line, "bad tensor header"))
}
