//! Binary checkpoint container.
//!
//! Layout: `b"MEDR"`, a version byte, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every array as little-endian `f64` values in
//! header order. The header carries the model configuration, each array's
//! name, shape and byte offset into the data section, and the seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MEDR";
pub const VERSION: u8 = 1;

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Attention,
    RnnJoint,
    RnnPerStation,
    LinregJoint,
    LinregPerStation,
    LastObserved,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Attention,
        Family::RnnJoint,
        Family::RnnPerStation,
        Family::LinregJoint,
        Family::LinregPerStation,
        Family::LastObserved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attention => "attention",
            Family::RnnJoint => "rnn-joint",
            Family::RnnPerStation => "rnn-per-station",
            Family::LinregJoint => "linreg-joint",
            Family::LinregPerStation => "linreg-per-station",
            Family::LastObserved => "last-observed",
        }
    }

    /// Families trained by gradient descent.
    pub fn is_network(self) -> bool {
        matches!(self, Family::Attention | Family::RnnJoint | Family::RnnPerStation)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model family `{s}`")))
    }
}

/// Data-pipeline settings needed to rebuild the evaluation windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub stations: Vec<String>,
    pub features: Vec<String>,
    pub stride: usize,
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    family: Family,
    config: ModelConfig,
    seed: u64,
    arrays: Vec<ArrayEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RunInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub family: Family,
    pub config: ModelConfig,
    pub seed: u64,
    pub arrays: Vec<(String, Tensor)>,
    pub run: Option<RunInfo>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            family: self.family,
            config: self.config.clone(),
            seed: self.seed,
            arrays: entries,
            run: self.run.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::InvalidArgument("checkpoint header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(9 + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated("file ends inside the magic bytes".into())
            } else {
                Error::BadMagic
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let Some(&version) = bytes.get(4) else {
            return Err(Error::Truncated("missing version byte".into()));
        };
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..9)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Truncated("missing header length".into()))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(9..9 + header_len).ok_or_else(|| {
            Error::Truncated(format!(
                "header declares {header_len} bytes, {} available",
                bytes.len() - 9
            ))
        })?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::BadHeader(e.to_string()))?;
        header
            .config
            .validate()
            .map_err(|e| Error::BadHeader(e.to_string()))?;

        let data = &bytes[9 + header_len..];
        let mut expected = 0u64;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            if entry.offset != expected {
                return Err(Error::BadHeader(format!(
                    "array {} starts at byte {} instead of {expected}",
                    entry.name, entry.offset
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * count;
            let raw = data.get(start..end).ok_or_else(|| {
                Error::Truncated(format!("array {} needs bytes {start}..{end}", entry.name))
            })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::from_vec(&entry.shape, values)
                .map_err(|e| Error::BadHeader(format!("array {}: {e}", entry.name)))?;
            arrays.push((entry.name.clone(), tensor));
            expected = end as u64;
        }
        if data.len() as u64 != expected {
            return Err(Error::BadHeader(format!(
                "{} trailing bytes after the last array",
                data.len() as u64 - expected
            )));
        }
        Ok(Checkpoint {
            family: header.family,
            config: header.config,
            seed: header.seed,
            arrays,
            run: header.run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds a parameter store for `cfg` from the arrays named
    /// `{prefix}enc.0.w_x`, … in store order.
    pub fn params(&self, cfg: &ModelConfig, prefix: &str) -> Result<ParameterStore> {
        let template = ParameterStore::zeros(cfg);
        let mut flat = Vec::with_capacity(template.len());
        for (name, t) in template.named_arrays() {
            let full = format!("{prefix}{name}");
            let stored = self
                .array(&full)
                .ok_or_else(|| Error::BadHeader(format!("missing array {full}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::BadHeader(format!(
                    "array {full} has shape {:?}, config needs {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            flat.extend_from_slice(stored.data());
        }
        ParameterStore::unflatten(cfg, &flat)
    }
}

/// Named arrays of `params` with every name prefixed.
pub fn param_arrays(params: &ParameterStore, prefix: &str) -> Vec<(String, Tensor)> {
    params
        .named_arrays()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Saves a fusion-model checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ParameterStore, seed: u64) -> Result<()> {
    params.check_config(cfg)?;
    Checkpoint {
        family: Family::Attention,
        config: cfg.clone(),
        seed,
        arrays: param_arrays(params, ""),
        run: None,
    }
    .save(path)
}

/// Loads a fusion-model checkpoint written by [`save_checkpoint`] or by a
/// training run of the `attention` family.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore, u64)> {
    let ck = Checkpoint::load(path)?;
    if ck.family != Family::Attention {
        return Err(Error::BadHeader(format!(
            "checkpoint holds a {} model, not attention",
            ck.family
        )));
    }
    let params = ck.params(&ck.config, "")?;
    Ok((ck.config, params, ck.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> (ModelConfig, ParameterStore) {
        let cfg = ModelConfig {
            h: 4,
            p_att: 3,
            ..ModelConfig::square(3, 2, 5, 2)
        };
        let p = init_params(&cfg, 9);
        (cfg, p)
    }

    fn bytes() -> Vec<u8> {
        let (cfg, p) = sample();
        Checkpoint {
            family: Family::Attention,
            config: cfg,
            seed: 9,
            arrays: param_arrays(&p, ""),
            run: None,
        }
        .to_bytes()
        .unwrap()
    }

    #[test]
    fn layout_prefix() {
        let b = bytes();
        assert_eq!(&b[..4], b"MEDR");
        assert_eq!(b[4], 1);
        let n = u32::from_le_bytes(b[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[9..9 + n]).unwrap();
        assert_eq!(header["seed"], 9);
        assert_eq!(header["arrays"][0]["name"], "enc.0.w_x");
        assert_eq!(header["arrays"][0]["offset"], 0);
        let (_, p) = sample();
        assert_eq!(b.len(), 9 + n + 8 * p.len());
        let first = f64::from_le_bytes(b[9 + n..17 + n].try_into().unwrap());
        assert_eq!(first.to_bits(), p.enc[0].w_x.data()[0].to_bits());
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let b = bytes();
        let ck = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), b);
        let (cfg, p) = sample();
        let back = ck.params(&cfg, "").unwrap();
        assert_eq!(back.checksum(), p.checksum());
        assert_eq!(ck.config, cfg);
    }

    #[test]
    fn file_helpers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.medr");
        let (cfg, p) = sample();
        save_checkpoint(&path, &cfg, &p, 9).unwrap();
        let (cfg2, p2, seed) = load_checkpoint(&path).unwrap();
        assert_eq!((cfg2, seed), (cfg, 9));
        assert_eq!(p2, p);
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let b = bytes();
        let mut bad = b.clone();
        bad[1] ^= 0x20;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        for cut in [2, 4, 7, 30, b.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
        let mut bad = b.clone();
        bad[9] = b'[';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadHeader(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::BadHeader(_))));
    }

    #[test]
    fn wrong_family_is_rejected() {
        let (cfg, _) = sample();
        let ck = Checkpoint {
            family: Family::LastObserved,
            config: cfg,
            seed: 0,
            arrays: vec![],
            run: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.medr");
        ck.save(&path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadHeader(_))));
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn desk_checkpoint_is_small() {
        let cfg = ModelConfig::square(6, 1, 48, 24);
        let p = init_params(&cfg, 1);
        let ck = Checkpoint {
            family: Family::Attention,
            config: cfg,
            seed: 1,
            arrays: param_arrays(&p, ""),
            run: None,
        };
        assert!(ck.to_bytes().unwrap().len() < 5 * 1024 * 1024);
    }

    #[test]
    fn family_names_roundtrip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
            assert_eq!(serde_json::to_value(f).unwrap(), f.name());
        }
        assert!("gru".parse::<Family>().is_err());
    }
}
