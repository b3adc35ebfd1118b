//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BSRN" | u32 version
//! u32 channels | u32 state_channels | u32 recursions | u32 freq_control
//! u32 n_scales | n_scales × u32 scale
//! u32 n_tensors | n_tensors × tensor
//! u64 global step
//!
//! tensor = u32 name_len | name (UTF-8) | u32 rank | rank × u32 dim | f32 payload
//! ```
//!
//! Parameter tensors come first in canonical order, then the Adam moments
//! under `opt/m/<name>` and `opt/v/<name>`. The moments may be absent
//! altogether, which gives an inference-only checkpoint.

use std::io::Write;
use std::path::Path;

use crate::error::{BsrnError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"BSRN";
pub const FORMAT_VERSION: u32 = 1;
const M_PREFIX: &str = "opt/m/";
const V_PREFIX: &str = "opt/v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(params: ModelParams, adam: AdamState) -> Self {
        Self { params, adam }
    }

    /// A checkpoint with fresh optimizer state.
    pub fn fresh(params: ModelParams) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.params.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        for v in [
            config.channels,
            config.state_channels,
            config.recursions,
            config.freq_control,
            config.scales.len(),
        ] {
            put_u32(&mut out, v as u32);
        }
        for &f in &config.scales {
            put_u32(&mut out, f as u32);
        }

        let params = self.params.tensors();
        let m = self.adam.m.tensors();
        let v = self.adam.v.tensors();
        put_u32(&mut out, (3 * params.len()) as u32);
        for (prefix, group) in [("", &params), (M_PREFIX, &m), (V_PREFIX, &v)] {
            for t in group.iter() {
                let name = format!("{prefix}{}", t.name);
                put_u32(&mut out, name.len() as u32);
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, t.dims.len() as u32);
                for &d in &t.dims {
                    put_u32(&mut out, d as u32);
                }
                for &x in t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out
    }

    /// Parses and validates a checkpoint. Every record is checked against
    /// the stored config before any parameter value is copied.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BsrnError::parse(0, "not a checkpoint (bad magic)"));
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(BsrnError::parse(
                version_at,
                format!("unsupported format version {version}"),
            ));
        }
        let config_at = r.pos;
        let mut fields = [0usize; 5];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let [c, s, recursions, freq_control, n_scales] = fields;
        if n_scales > 16 {
            return Err(BsrnError::parse(config_at + 16, format!("implausible scale count {n_scales}")));
        }
        let scales = (0..n_scales)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::new(c, s, recursions, freq_control, &scales)
            .map_err(|e| BsrnError::parse(config_at, format!("invalid stored config: {e}")))?;
        let mut params = ModelParams::zeros(&config)?;

        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.dims))
            .collect();
        let count_at = r.pos;
        let count = r.u32()? as usize;
        let with_moments = match count {
            n if n == expected.len() => false,
            n if n == 3 * expected.len() => true,
            n => {
                return Err(BsrnError::parse(
                    count_at,
                    format!(
                        "{n} tensors stored; this config needs {} or {}",
                        expected.len(),
                        3 * expected.len()
                    ),
                ))
            }
        };

        let prefixes: &[&str] = if with_moments { &["", M_PREFIX, V_PREFIX] } else { &[""] };
        let mut payloads = Vec::with_capacity(count);
        for prefix in prefixes {
            for (name, dims) in &expected {
                let at = r.pos;
                let stored = r.tensor()?;
                let want = format!("{prefix}{name}");
                if stored.name != want {
                    return Err(BsrnError::parse(
                        at,
                        format!("expected tensor `{want}`, found `{}`", stored.name),
                    ));
                }
                if &stored.dims != dims {
                    return Err(BsrnError::parse(
                        at,
                        format!("tensor `{want}` has dims {:?}, config needs {dims:?}", stored.dims),
                    ));
                }
                payloads.push(stored.payload);
            }
        }
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(BsrnError::parse(r.pos, "trailing bytes after checkpoint"));
        }

        let mut adam = AdamState::new(&params);
        adam.step = step;
        let mut payloads = payloads.into_iter();
        let mut targets = vec![params.tensors_mut()];
        if with_moments {
            targets.push(adam.m.tensors_mut());
            targets.push(adam.v.tensors_mut());
        }
        for group in targets {
            for ((_, dst), src) in group.into_iter().zip(payloads.by_ref()) {
                for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(4)) {
                    *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                }
            }
        }
        Ok(Self { params, adam })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut file = std::fs::File::create(&tmp)?;
            file.write_all(&self.to_bytes())?;
            file.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| BsrnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BsrnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture and schedule equal `config`.
    pub fn require_config(&self, config: &ModelConfig) -> Result<()> {
        if self.config() != config {
            return Err(BsrnError::config(format!(
                "checkpoint config {:?} does not match requested {:?}",
                self.config(),
                config
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct StoredTensor<'a> {
    name: String,
    dims: Vec<usize>,
    payload: &'a [u8],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BsrnError::parse(self.pos, format!("truncated: wanted {n} more bytes")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<StoredTensor<'a>> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| BsrnError::parse(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(BsrnError::parse(at, format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| BsrnError::parse(at, format!("tensor `{name}` is too large")))?;
        let payload = self.take(elems)?;
        Ok(StoredTensor { name, dims, payload })
    }
}
