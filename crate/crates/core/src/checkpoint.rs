//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `IJEPACKP`, version `u32`, flags `u32`
//! (bit 0: optimizer state present), step `u64`, seed `u64`, two optimizer
//! update counts `u64`, the resolved config as length-prefixed UTF-8, the
//! tensor count `u32`, then per tensor: name, decay flag `u8`, rank `u32`,
//! dims `u64`, `f32` values. The file ends with `IJEPAEND`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 8] = b"IJEPACKP";
pub const END: &[u8; 8] = b"IJEPAEND";
pub const VERSION: u32 = 1;

const FLAG_OPTIMIZER: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_CONFIG: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizerState {
    pub context_t: u64,
    pub predictor_t: u64,
}

/// Named tensors under `context/`, `target/`, `predictor/` and `opt/...`
/// prefixes. A backbone-only checkpoint holds `target/` and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub config_text: String,
    pub optimizer: Option<OptimizerState>,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    /// The tensors under `prefix`, prefix stripped.
    pub fn group(&self, prefix: &str) -> ParamStore<f32> {
        self.tensors.extract_prefixed(prefix)
    }

    /// Encoder weights for evaluation: the target encoder if present,
    /// otherwise the context encoder.
    pub fn encoder_params(&self) -> Result<ParamStore<f32>> {
        for prefix in ["target/", "context/"] {
            let g = self.group(prefix);
            if !g.is_empty() {
                return Ok(g);
            }
        }
        Err(Error::CheckpointIncompatible("no encoder tensors in checkpoint".into()))
    }

    /// Only the target encoder, without optimizer state.
    pub fn backbone_only(&self) -> Result<Checkpoint> {
        let mut tensors = ParamStore::new();
        tensors.extend_prefixed("target/", &self.encoder_params()?);
        Ok(Checkpoint {
            step: self.step,
            seed: self.seed,
            config_text: self.config_text.clone(),
            optimizer: None,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let ctx = || format!("writing checkpoint {}", path.display());
        {
            let f = File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w).map_err(|e| Error::io(ctx(), e))?;
            w.flush().map_err(|e| Error::io(ctx(), e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let flags = if self.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let opt = self.optimizer.unwrap_or(OptimizerState {
            context_t: 0,
            predictor_t: 0,
        });
        w.write_all(&opt.context_t.to_le_bytes())?;
        w.write_all(&opt.predictor_t.to_le_bytes())?;
        write_bytes(w, self.config_text.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for p in self.tensors.params() {
            write_bytes(w, p.name.as_bytes())?;
            w.write_all(&[p.decay as u8])?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(END)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
        Self::read_from(&mut BufReader::new(f), path)
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        read(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let flags = read_u32(r, "header")?;
        let step = read_u64(r, "header")?;
        let seed = read_u64(r, "header")?;
        let context_t = read_u64(r, "header")?;
        let predictor_t = read_u64(r, "header")?;
        let config = read_bytes(r, MAX_CONFIG, "config", path)?;
        let config_text = String::from_utf8(config).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "config block is not UTF-8".into(),
        })?;
        let n = read_u32(r, "tensor count")?;
        let mut tensors = ParamStore::new();
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(r, MAX_NAME, "tensor name", path)?).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: "tensor name is not UTF-8".into(),
            })?;
            let mut decay = [0u8; 1];
            read(r, &mut decay, "tensor header")?;
            let rank = read_u32(r, "tensor header")? as usize;
            if rank == 0 || rank > 2 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("tensor `{name}` has unsupported rank {rank}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r, "tensor header")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n < 1 << 32);
            let Some(numel) = numel else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("tensor `{name}` shape {shape:?} is too large"),
                });
            };
            let mut raw = vec![0u8; numel * 4];
            read(r, &mut raw, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.id(&name).is_some() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("duplicate tensor `{name}`"),
                });
            }
            tensors.add(name, &shape, data, decay[0] != 0);
        }
        let mut end = [0u8; 8];
        read(r, &mut end, "end marker")?;
        if &end != END {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "missing end marker".into(),
            });
        }
        Ok(Checkpoint {
            step,
            seed,
            config_text,
            optimizer: (flags & FLAG_OPTIMIZER != 0).then_some(OptimizerState { context_t, predictor_t }),
            tensors,
        })
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::CheckpointTruncated(what),
        _ => Error::io(format!("reading checkpoint {what}"), e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, max: usize, what: &'static str, path: &Path) -> Result<Vec<u8>> {
    let n = read_u32(r, what)? as usize;
    if n > max {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{what} length {n} exceeds {max}"),
        });
    }
    let mut b = vec![0u8; n];
    read(r, &mut b, what)?;
    Ok(b)
}
