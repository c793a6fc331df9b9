//! Binary checkpoint format.
//!
//! ```text
//! "DCAM" 0x01
//! u32 length, UTF-8 config block (key=value lines)
//! u32 entry count
//! per entry: u32 length + UTF-8 name, u8 rank, rank × u32 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian; values are row-major.
//! Running statistics are stored as ordinary entries named
//! `stats.<layer>.mean` and `stats.<layer>.var`.

use std::collections::HashSet;
use std::path::Path;

use super::{DenseConfig, DenseModel, Normalization};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"DCAM";
const VERSION: u8 = 1;
const STATS_PREFIX: &str = "stats.";

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    push_str(out, name);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl DenseModel {
    fn config_block(&self) -> String {
        let mut block = self.config.to_key_values();
        block.push_str(&format!(
            "norm_mean={}\n",
            join_f64(&self.normalization.mean)
        ));
        block.push_str(&format!("norm_std={}\n", join_f64(&self.normalization.std)));
        block
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        push_str(&mut out, &self.config_block());
        let count = self.params.len() + 2 * self.stats.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in &self.params {
            push_entry(&mut out, &p.name, p.value.dims(), p.value.values());
        }
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            let dims = [s.channels()];
            push_entry(
                &mut out,
                &format!("{STATS_PREFIX}{name}.mean"),
                &dims,
                &s.mean,
            );
            push_entry(
                &mut out,
                &format!("{STATS_PREFIX}{name}.var"),
                &dims,
                &s.var,
            );
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes).map_err(|e| match e {
            Decode::Format(source) => Error::Checkpoint {
                path: "<memory>".into(),
                source,
            },
            Decode::Other(e) => e,
        })
    }
}

enum Decode {
    Format(CheckpointError),
    Other(Error),
}

impl From<CheckpointError> for Decode {
    fn from(e: CheckpointError) -> Self {
        Decode::Format(e)
    }
}

impl From<Error> for Decode {
    fn from(e: Error) -> Self {
        Decode::Other(e)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<&'a str, CheckpointError> {
        let len = self.u32(what)? as usize;
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| CheckpointError::InvalidUtf8 { what })
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        })
        .collect()
}

fn decode(bytes: &[u8]) -> Result<DenseModel, Decode> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic number")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.try_into().expect("4 bytes"),
        }
        .into());
    }
    let version = r.u8("format version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let block = r.string("config block")?;
    let mut config = DenseConfig::default();
    let mut norm_mean = None;
    let mut norm_std = None;
    for line in block.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
        match key {
            "norm_mean" => norm_mean = Some(parse_f64_list(key, value)?),
            "norm_std" => norm_std = Some(parse_f64_list(key, value)?),
            _ => {
                if !config.set(key, value)? {
                    return Err(
                        Error::Config(format!("unknown checkpoint config key {key:?}")).into(),
                    );
                }
            }
        }
    }
    config.validate()?;
    let mut model = DenseModel::assemble(&config, &mut |dims, _| vec![0.0; dims.iter().product()])?;
    let normalization = Normalization {
        mean: norm_mean.unwrap_or_else(|| vec![0.0; config.input_channels]),
        std: norm_std.unwrap_or_else(|| vec![1.0; config.input_channels]),
    };
    model.set_normalization(normalization)?;

    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut stats: Vec<RunningStats> = model.stats.clone();
    for _ in 0..count {
        let name = r.string("entry name")?.to_string();
        let rank = r.u8("entry rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("entry dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(8).ok_or(CheckpointError::Truncated {
                what: "entry values",
            })?,
            "entry values",
        )?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name).into());
        }
        let expect = |expected: &[usize]| {
            if dims != expected {
                Err(CheckpointError::DimsMismatch {
                    name: name.clone(),
                    found: dims.clone(),
                    expected: expected.to_vec(),
                })
            } else {
                Ok(())
            }
        };
        if let Some(rest) = name.strip_prefix(STATS_PREFIX) {
            let slot = rest.rsplit_once('.').and_then(|(layer, field)| {
                let i = model.stat_names.iter().position(|n| n == layer)?;
                Some((i, field))
            });
            match slot {
                Some((i, "mean")) => {
                    expect(&[stats[i].channels()])?;
                    stats[i].mean = values;
                }
                Some((i, "var")) => {
                    expect(&[stats[i].channels()])?;
                    stats[i].var = values;
                }
                _ => return Err(CheckpointError::UnexpectedParameter(name).into()),
            }
        } else {
            let Some(p) = model.params.iter_mut().find(|p| p.name == name) else {
                return Err(CheckpointError::UnexpectedParameter(name).into());
            };
            expect(p.value.dims())?;
            p.value = Tensor::new(dims, values)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes.into());
    }
    let required =
        model
            .params
            .iter()
            .map(|p| p.name.clone())
            .chain(model.stat_names.iter().flat_map(|n| {
                [
                    format!("{STATS_PREFIX}{n}.mean"),
                    format!("{STATS_PREFIX}{n}.var"),
                ]
            }));
    for name in required {
        if !seen.contains(&name) {
            return Err(CheckpointError::MissingParameter(name).into());
        }
    }
    model.stats = stats;
    Ok(model)
}

pub fn save_checkpoint(model: &DenseModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenseModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Decode::Format(source) => Error::Checkpoint {
            path: path.display().to_string(),
            source,
        },
        Decode::Other(e) => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn model() -> DenseModel {
        let cfg = DenseConfig {
            initial_channels: 4,
            block_sizes: vec![1, 2],
            growth_rate: 2,
            image_size: 8,
            ..DenseConfig::default()
        };
        build_model(&cfg, 5).unwrap()
    }

    fn format_err(bytes: &[u8]) -> CheckpointError {
        match DenseModel::from_checkpoint_bytes(bytes) {
            Err(Error::Checkpoint { source, .. }) => source,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = model().to_checkpoint_bytes();
        assert_eq!(&bytes[..5], b"DCAM\x01");
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let block = std::str::from_utf8(&bytes[9..9 + len]).unwrap();
        assert!(block.starts_with("input_channels=1\n"));
        assert!(block.contains("norm_std=1.0\n"));
    }

    #[test]
    fn distinct_errors() {
        let good = model().to_checkpoint_bytes();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(format_err(&bad), CheckpointError::BadMagic { .. }));
        assert!(matches!(
            format_err(&good[..good.len() - 3]),
            CheckpointError::Truncated { .. }
        ));
        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            format_err(&version),
            CheckpointError::UnsupportedVersion(9)
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            format_err(&trailing),
            CheckpointError::TrailingBytes
        ));
    }

    #[test]
    fn duplicate_entry_is_rejected() {
        let m = model();
        let mut bytes = m.to_checkpoint_bytes();
        // Bump the entry count and append a copy of the first parameter.
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let count_at = 9 + len;
        let count = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap());
        bytes[count_at..count_at + 4].copy_from_slice(&(count + 1).to_le_bytes());
        let p = &m.parameters()[0];
        push_entry(&mut bytes, &p.name, p.value.dims(), p.value.values());
        assert!(matches!(format_err(&bytes), CheckpointError::DuplicateName(n) if n == p.name));
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut m = model();
        m.set_normalization(Normalization {
            mean: vec![0.123_456_789],
            std: vec![0.3],
        })
        .unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = DenseModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }
}
