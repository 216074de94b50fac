//! Binary snapshot of a cloud plus denoiser weights.
//!
//! Layout (little-endian): magic, version `u32`, step `u64`, SH degree `u32`,
//! primitive count `u64`, every parameter group as `f64`, layer count `u32`, then
//! per layer `in u32, out u32, weights, bias`, and finally a CRC-32 of all
//! preceding bytes.

use std::path::Path;

use super::cloud::{GaussianCloud, ParamArrays, ParamGroup, SH_COEFFS};
use crate::error::{Error, Result};
use crate::pdm::{ConvLayer, PdmWeights};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSPLATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub cloud: GaussianCloud,
    pub pdm: Option<PdmWeights>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.cloud.check_consistent()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&(ck.cloud.sh_degree as u32).to_le_bytes());
    out.extend_from_slice(&(ck.cloud.len() as u64).to_le_bytes());
    for g in ParamGroup::ALL {
        for v in ck.cloud.group(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let layers = ck.pdm.as_ref().map(|p| p.layers.as_slice()).unwrap_or(&[]);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.in_ch as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_ch as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Truncated(what.into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("<checkpoint>", "bad magic"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if buf.len() < 16 {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 12 };
    let step = r.u64("header")?;
    let sh_degree = r.u32("header")? as usize;
    let n = r.u64("header")? as usize;
    // size the arrays only once the file is known to hold them
    let per_prim: usize = ParamGroup::ALL.iter().map(|g| g.width() * 8).sum();
    if n.checked_mul(per_prim)
        .is_none_or(|need| body.len() - r.pos < need)
    {
        return Err(Error::Truncated("checkpoint parameter block".into()));
    }
    let mut cloud = GaussianCloud {
        positions: vec![[0.0; 3]; n],
        rotations: vec![[0.0; 4]; n],
        log_scales: vec![[0.0; 3]; n],
        opacity_logits: vec![0.0; n],
        sh: vec![[[0.0; 3]; SH_COEFFS]; n],
        sh_degree,
        structure_logits: vec![0.0; n],
        illum: vec![[0.0; 3]; n],
        depth_logits: vec![0.0; n],
        noise: vec![[0.0; 3]; n],
    };
    for g in ParamGroup::ALL {
        let count = n
            .checked_mul(g.width())
            .ok_or_else(|| Error::Truncated("checkpoint primitive count".into()))?;
        let vals = r.f64s(count, g.name())?;
        cloud.group_mut(g).copy_from_slice(&vals);
    }
    let n_layers = r.u32("layer count")? as usize;
    let pdm = if n_layers == 0 {
        None
    } else {
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_ch = r.u32("layer shape")? as usize;
            let out_ch = r.u32("layer shape")? as usize;
            let taps = in_ch
                .checked_mul(out_ch)
                .and_then(|v| v.checked_mul(9))
                .ok_or_else(|| Error::Truncated("layer weights".into()))?;
            let weights = r.f64s(taps, "layer weights")?;
            let bias = r.f64s(out_ch, "layer bias")?;
            layers.push(ConvLayer {
                in_ch,
                out_ch,
                weights,
                bias,
            });
        }
        Some(PdmWeights { layers })
    };
    if r.pos != body.len() {
        return Err(Error::format("<checkpoint>", "trailing bytes"));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum);
    }
    cloud.check_consistent()?;
    if let Some(w) = &pdm {
        w.validate()?;
    }
    Ok(Checkpoint { step, cloud, pdm })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path, reason),
        other => other,
    })
}
