//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//! - magic bytes `RSEG`
//! - u32 format version (currently 1)
//! - u32 byte length + UTF-8 config text (`key=value` lines)
//! - per parameter, in sorted-name order: u32 name length + UTF-8 name,
//!   u32 rank, u64 per dimension, then the raw f64 data
//!
//! Records run to end-of-file; a file that ends mid-record is reported as
//! truncated and no partial parameter set is returned.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{RetSegConfig, RetSegParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

impl RetSegConfig {
    /// Canonical `key=value` text embedded in checkpoints.
    pub fn to_kv_text(&self) -> String {
        let channels = self
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "input_channels={}\nimage_size={}\nstages={}\nstage_channels={}\n\
             patch_size={}\nd_model={}\nretention_blocks={}\nheads={}\n\
             dropout_rate={}\nfeedforward_expansion={}\nembed_bias={}\n",
            self.input_channels,
            self.image_size,
            self.stages,
            channels,
            self.patch_size,
            self.d_model,
            self.retention_blocks,
            self.heads,
            self.dropout_rate,
            self.feedforward_expansion,
            self.embed_bias,
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut config = RetSegConfig::default();
        let bad = |line: usize, msg: String| Error::InvalidConfig(format!("line {line}: {msg}"));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| bad(i + 1, format!("'{value}' is not an integer")))
            };
            match key {
                "input_channels" => config.input_channels = parse_usize()?,
                "image_size" => config.image_size = parse_usize()?,
                "stages" => config.stages = parse_usize()?,
                "stage_channels" => {
                    config.stage_channels = value
                        .split(',')
                        .map(|v| {
                            v.trim().parse().map_err(|_| {
                                bad(i + 1, format!("'{v}' is not an integer channel count"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                }
                "patch_size" => config.patch_size = parse_usize()?,
                "d_model" => config.d_model = parse_usize()?,
                "retention_blocks" => config.retention_blocks = parse_usize()?,
                "heads" => config.heads = parse_usize()?,
                "dropout_rate" => {
                    config.dropout_rate = value
                        .parse()
                        .map_err(|_| bad(i + 1, format!("'{value}' is not a number")))?;
                }
                "feedforward_expansion" => config.feedforward_expansion = parse_usize()?,
                "embed_bias" => {
                    config.embed_bias = value
                        .parse()
                        .map_err(|_| bad(i + 1, format!("'{value}' is not a bool")))?;
                }
                other => {
                    return Err(bad(i + 1, format!("unknown model config key '{other}'")));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn save_checkpoint(
    params: &RetSegParams,
    config: &RetSegConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    let config_text = config.to_kv_text();
    w.write_all(&(config_text.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(config_text.as_bytes()).map_err(io_err)?;

    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &value in tensor.data() {
            w.write_all(&value.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn exact(&mut self, buf: &mut [u8], section: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::CheckpointTruncated {
                    path: self.path.to_path_buf(),
                    section: section.to_string(),
                }
            } else {
                Error::io(self.path, e)
            }
        })
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.exact(&mut buf, section)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.exact(&mut buf, section)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn string(&mut self, len: usize, section: &str) -> Result<String> {
        let mut buf = vec![0u8; len];
        self.exact(&mut buf, section)?;
        String::from_utf8(buf).map_err(|_| Error::CheckpointTruncated {
            path: self.path.to_path_buf(),
            section: format!("{section} (invalid UTF-8)"),
        })
    }

    /// Returns None at a clean end-of-file boundary, the name otherwise.
    fn next_param_name(&mut self) -> Result<Option<String>> {
        let mut buf = [0u8; 4];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {
                let len = u32::from_le_bytes(buf) as usize;
                Ok(Some(self.string(len, "parameter name")?))
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RetSegParams, RetSegConfig)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };

    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointBadMagic {
            path: PathBuf::from(path),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: PathBuf::from(path),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = r.string(config_len, "config text")?;
    let config = RetSegConfig::from_kv_text(&config_text)?;

    let mut map = BTreeMap::new();
    while let Some(name) = r.next_param_name()? {
        let rank = r.u32(&format!("rank of '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u64(&format!("dim {d} of '{name}'"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.exact(&mut buf, &format!("data of '{name}'"))?;
            data.push(f64::from_le_bytes(buf));
        }
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok((RetSegParams::from_map(map), config))
}
