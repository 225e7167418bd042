//! Binary checkpoints.
//!
//! ```text
//! "WVCK"  u32 version  u32 config_len  config JSON (EncoderConfig)
//! u32 tensor_count, then per tensor: u32 ndim, ndim × u32 dims, f32 data
//! optional optimiser section:
//! "ADAM"  u64 step  u32 epoch  first moments  second moments (as above)
//! ```
//!
//! All integers and floats are little-endian. Tensors follow the model's
//! parameter declaration order.

use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor_core::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WVCK";
pub const OPTIMISER_MAGIC: &[u8; 4] = b"ADAM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimiser state saved alongside the parameters, enough to resume
/// training at the start of `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub resume: Option<ResumeState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Dimension(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) -> Result<()> {
    put_u32(out, tensors.len())?;
    for t in tensors {
        put_u32(out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(params: &ModelParams, resume: Option<&ResumeState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(params.config())
        .map_err(|e| Error::Config(format!("cannot serialise encoder config: {e}")))?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_tensors(&mut out, params.tensors())?;
    if let Some(r) = resume {
        out.extend_from_slice(OPTIMISER_MAGIC);
        out.extend_from_slice(&r.adam.step.to_le_bytes());
        out.extend_from_slice(&r.epoch.to_le_bytes());
        put_tensors(&mut out, &r.adam.m)?;
        put_tensors(&mut out, &r.adam.v)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<Tensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let ndim = self.u32("tensor rank")? as usize;
            if ndim > 8 {
                return Err(self.fail(format!("{what} {i}: implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32("tensor dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| self.fail(format!("{what} {i}: shape {shape:?} overflows")))?;
            let data = self
                .take(n, what)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| self.fail(format!("{what} {i}: {e}")))?;
            out.push(t);
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected WVCK"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config_start = r.pos;
    let config: EncoderConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(path, config_start as u64, format!("config block: {e}")))?;
    let tensors = r.tensors("parameter tensors")?;
    let params = ModelParams::from_tensors(&config, tensors).map_err(|e| match e {
        Error::Dimension(m) | Error::Config(m) | Error::Numerical(m) => Error::format(path, config_start as u64, m),
        other => other,
    })?;
    if r.pos == bytes.len() {
        return Ok(Checkpoint { params, resume: None });
    }
    if r.take(4, "optimiser magic")? != OPTIMISER_MAGIC {
        return Err(Error::format(path, r.pos as u64 - 4, "expected ADAM section"));
    }
    let step = r.u64("optimiser step")?;
    let epoch = r.u32("epoch")?;
    let m = r.tensors("first moments")?;
    let v = r.tensors("second moments")?;
    let shapes_match = |ts: &[Tensor]| {
        ts.len() == params.tensors().len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(r.fail("optimiser moments do not match parameter shapes"));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after optimiser section"));
    }
    Ok(Checkpoint {
        params,
        resume: Some(ResumeState {
            adam: AdamState { step, m, v },
            epoch,
        }),
    })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, resume: Option<&ResumeState>) -> Result<()> {
    let bytes = encode_checkpoint(params, resume)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> EncoderConfig {
        EncoderConfig {
            snippets: 4,
            input_dim: 3,
            model_dim: 4,
            heads: 2,
            depth: 1,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn params_round_trip_exactly() {
        let p = ModelParams::init(&micro(), 3).unwrap();
        let bytes = encode_checkpoint(&p, None).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.params, p);
        assert!(back.resume.is_none());
    }

    #[test]
    fn resume_state_round_trips() {
        let p = ModelParams::init(&micro(), 3).unwrap();
        let mut adam = AdamState::new(p.tensors());
        adam.step = 17;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[1].data_mut()[0] = 0.5;
        let r = ResumeState { adam, epoch: 4 };
        let bytes = encode_checkpoint(&p, Some(&r)).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.resume, Some(r));
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let p = ModelParams::init(&micro(), 3).unwrap();
        let bytes = encode_checkpoint(&p, None).unwrap();
        assert_eq!(&bytes[..8], b"WVCK\x01\x00\x00\x00");
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let p = ModelParams::init(&micro(), 3).unwrap();
        let bytes = encode_checkpoint(&p, None).unwrap();
        let path = Path::new("m");

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(
            decode_checkpoint(&bad, path),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad, path),
            Err(Error::Format { offset: 4, .. })
        ));

        let cut = &bytes[..bytes.len() - 3];
        let err = decode_checkpoint(cut, path).unwrap_err();
        assert!(matches!(err, Error::Format { ref reason, .. } if reason.contains("truncated")));

        let mut extra = bytes.clone();
        extra.extend_from_slice(b"junk");
        assert!(matches!(decode_checkpoint(&extra, path), Err(Error::Format { .. })));
    }
}
