//! Binary model container: `"DSEG"`, format version, architecture descriptor,
//! then each net's parameters as little-endian `f32` in declaration order.

use std::fs;
use std::path::Path;

use crate::diffusion::ConditioningMode;
use crate::error::{ensure, Error, Result};
use crate::nn::layers::Activation;
use crate::nn::unet::{Architecture, Norm};

pub const MAGIC: &[u8; 4] = b"DSEG";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(arch: &Architecture, mode: ConditioningMode, nets: &[&[f32]]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    for v in [arch.in_channels, arch.emb_dim, arch.norm_groups] {
        out.extend((v as u32).to_le_bytes());
    }
    out.push(match arch.activation {
        Activation::Silu => 0,
        Activation::Identity => 1,
    });
    out.push(match arch.norm {
        Norm::Group => 0,
        Norm::None => 1,
    });
    out.push(arch.class_conditioned as u8);
    out.extend((arch.channels.len() as u32).to_le_bytes());
    for &c in &arch.channels {
        out.extend((c as u32).to_le_bytes());
    }
    out.push(match mode {
        ConditioningMode::Embedding => 0,
        ConditioningMode::Dual => 1,
    });
    out.extend((nets.len() as u32).to_le_bytes());
    for params in nets {
        out.extend((params.len() as u64).to_le_bytes());
        for v in params.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.buf.len(),
            Model,
            "model file truncated at byte {}",
            self.pos
        );
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
}

pub struct Decoded {
    pub arch: Architecture,
    pub mode: ConditioningMode,
    pub nets: Vec<Vec<f32>>,
}

pub fn decode(buf: &[u8]) -> Result<Decoded> {
    let mut r = Reader { buf, pos: 0 };
    ensure!(r.take(4)? == MAGIC, Model, "not a model file (bad magic)");
    let version = r.u32()?;
    ensure!(
        version == FORMAT_VERSION as usize,
        Model,
        "unsupported model format version {version}"
    );
    let in_channels = r.u32()?;
    let emb_dim = r.u32()?;
    let norm_groups = r.u32()?;
    let activation = match r.u8()? {
        0 => Activation::Silu,
        1 => Activation::Identity,
        v => return Err(Error::Model(format!("unknown activation code {v}"))),
    };
    let norm = match r.u8()? {
        0 => Norm::Group,
        1 => Norm::None,
        v => return Err(Error::Model(format!("unknown norm code {v}"))),
    };
    let class_conditioned = r.u8()? != 0;
    let levels = r.u32()?;
    ensure!((1..=16).contains(&levels), Model, "implausible level count {levels}");
    let channels = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mode = match r.u8()? {
        0 => ConditioningMode::Embedding,
        1 => ConditioningMode::Dual,
        v => return Err(Error::Model(format!("unknown conditioning code {v}"))),
    };
    let count = r.u32()?;
    let arch = Architecture {
        in_channels,
        emb_dim,
        channels,
        norm_groups,
        activation,
        norm,
        class_conditioned,
    };
    arch.validate().map_err(|e| Error::Model(e.to_string()))?;
    let expected = arch.param_count();
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u64()?;
        ensure!(
            n == expected,
            Model,
            "parameter block holds {n} values, architecture needs {expected}"
        );
        let raw = r.take(n * 4)?;
        nets.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    ensure!(r.pos == buf.len(), Model, "trailing bytes after model payload");
    Ok(Decoded { arch, mode, nets })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
