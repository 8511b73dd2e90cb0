//! Binary checkpoint container.
//!
//! Layout (all integers little-endian): magic `WFLW`, `u32` version,
//! `u64` seed, `u64`-prefixed config JSON, `u64` parameter count, then per
//! parameter a `u64`-prefixed name, `u64` rank, `u64` extents and `f32`
//! data; `u64` norm count, then per norm a name, `u64` channel count,
//! `f64` momentum and epsilon, and `f32` running mean and variance.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelError, ParameterStore, Result, WiFlowConfig};
use crate::tensor::{BatchNormState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, model.seed);
    put_str(&mut out, &serde_json::to_string(&model.config)?);
    put_u64(&mut out, model.store.params.len() as u64);
    for (name, t) in &model.store.params {
        put_str(&mut out, name);
        put_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f32s(&mut out, t.data());
    }
    put_u64(&mut out, model.store.norms.len() as u64);
    for (name, s) in &model.store.norms {
        put_str(&mut out, name);
        put_u64(&mut out, s.running_mean.len() as u64);
        out.extend_from_slice(&s.momentum.to_le_bytes());
        out.extend_from_slice(&s.epsilon.to_le_bytes());
        put_f32s(&mut out, &s.running_mean);
        put_f32s(&mut out, &s.running_var);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 * 8 + 64 {
            return Err(bad(format!("implausible length {v} at byte {}", self.pos)));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not utf-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let config: WiFlowConfig = serde_json::from_str(&r.string()?)?;
    config.validate()?;
    let mut params = BTreeMap::new();
    for _ in 0..r.len()? {
        let name = r.string()?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
        let n = shape.iter().product();
        params.insert(name, Tensor::new(shape, r.f32s(n)?)?);
    }
    let mut norms = BTreeMap::new();
    for _ in 0..r.len()? {
        let name = r.string()?;
        let ch = r.len()?;
        let momentum = r.f64()?;
        let epsilon = r.f64()?;
        let running_mean = r.f32s(ch)?;
        let running_var = r.f32s(ch)?;
        norms.insert(
            name,
            BatchNormState {
                running_mean,
                running_var,
                momentum,
                epsilon,
            },
        );
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    // the stored set must match what the config builds, shape for shape
    let fresh = ParameterStore::<f32>::init(&config, 0)?;
    let same_keys = fresh.params.len() == params.len()
        && fresh.params.iter().all(|(k, t)| {
            params
                .get(k)
                .map(|p| p.shape() == t.shape())
                .unwrap_or(false)
        })
        && fresh.norms.len() == norms.len()
        && fresh.norms.iter().all(|(k, s)| {
            norms
                .get(k)
                .map(|n| n.running_mean.len() == s.running_mean.len())
                .unwrap_or(false)
        });
    if !same_keys {
        return Err(bad("stored parameters do not match the stored config"));
    }
    Ok(Model {
        config,
        seed,
        store: ParameterStore { params, norms },
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut m = Model::init(WiFlowConfig::default(), 9).unwrap();
        m.store.norms.get_mut("decoder.bn").unwrap().running_var[3] = 0.25;
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::init(WiFlowConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
