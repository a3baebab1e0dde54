//! Binary checkpoint format. See `docs/checkpoint.md` for the byte layout.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, LrSchedule, OptimizerState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model weights plus optional optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(b)?)
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(u32::try_from(s.len()).map_err(|_| ck("string too long"))?)?;
        self.bytes(s.as_bytes())
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) -> Result<()> {
        self.string(name)?;
        self.u8(DType::F32.tag())?;
        self.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            self.u32(d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck("invalid utf-8 string"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let tag = self.u8()?;
        match DType::from_tag(tag) {
            Some(DType::F32) => {}
            _ => return Err(ck(format!("{name}: unsupported dtype tag {tag}"))),
        }
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ck("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| ck(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn encode(model: &Model, optimizer: Option<&OptimizerState<f32>>) -> Result<Vec<u8>> {
    let mut w = Writer { inner: Vec::new() };
    let cfg = &model.cfg;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.string(&cfg.canonical_text())?;
    w.bytes(cfg.fingerprint().as_bytes())?;
    let params = &model.store;
    w.u32(params.len() as u32)?;
    for p in params.iter() {
        w.tensor(&p.name, &p.tensor)?;
    }
    match optimizer {
        None => w.u8(0)?,
        Some(opt) => {
            w.u8(1)?;
            w.u64(opt.step)?;
            w.string(&serde_json::to_string(&opt.schedule)?)?;
            for (p, m) in params.iter().zip(&opt.first_moment) {
                w.tensor(&format!("m/{}", p.name), m)?;
            }
            for (p, v) in params.iter().zip(&opt.second_moment) {
                w.tensor(&format!("v/{}", p.name), v)?;
            }
        }
    }
    Ok(w.inner)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.model, self.optimizer.as_ref())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| ck("file too short"))? != CHECKPOINT_MAGIC {
            return Err(ck("bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let cfg: ModelConfig =
            serde_json::from_str(&r.string()?).map_err(|e| ck(format!("config: {e}")))?;
        let fp = r.take(16)?;
        if fp != cfg.fingerprint().as_bytes() {
            return Err(ck("config fingerprint mismatch"));
        }
        let mut model = Model::new(cfg)?;
        let n = r.u32()? as usize;
        if n != model.store.len() {
            return Err(ck(format!("expected {} parameters, found {n}", model.store.len())));
        }
        for i in 0..n {
            let (name, t) = r.tensor()?;
            let slot = &mut model.store.params[i];
            if slot.name != name || slot.tensor.shape() != t.shape() {
                return Err(ck(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    t.shape()
                )));
            }
            slot.tensor = t;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let schedule: LrSchedule =
                    serde_json::from_str(&r.string()?).map_err(|e| ck(format!("schedule: {e}")))?;
                let mut read_moments = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                    model
                        .store
                        .iter()
                        .map(|p| {
                            let (name, t) = r.tensor()?;
                            let want = format!("{prefix}/{}", p.name);
                            if name != want || t.shape() != p.tensor.shape() {
                                return Err(ck(format!("expected moment {want}, found {name}")));
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let first_moment = read_moments("m")?;
                let second_moment = read_moments("v")?;
                Some(OptimizerState { step, first_moment, second_moment, schedule })
            }
            f => return Err(ck(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(ck(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { model, optimizer })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, optimizer: Option<&OptimizerState<f32>>) -> Result<()> {
    let bytes = encode(model, optimizer)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Checkpoint::from_bytes(&buf)
}
