//! Binary checkpoint: an 8-byte magic, a little-endian `u32` version, then
//! sections of `[4-byte tag][u64 length][payload]`. Tensors are stored as
//! a name, a shape header and raw little-endian `f64` values, so a reload
//! is bit-exact.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochRecord, RunConfig};
use crate::error::{Error, Result};
use crate::matchnet::LatteModel;
use crate::tensor::{Adam, AdamSlot};
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"LATTECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: LatteModel,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    best_epoch: usize,
    history: Vec<EpochRecord>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}

pub(crate) fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    section(&mut out, b"CONF", ckpt.config.to_toml()?.as_bytes());
    let vocab = serde_json::to_vec(&ckpt.model.vocab).map_err(|e| Error::Contract(e.to_string()))?;
    section(&mut out, b"VOCB", &vocab);

    let mut params = Vec::new();
    put_u64(&mut params, ckpt.model.store.len() as u64);
    for (_, p) in ckpt.model.store.iter() {
        put_bytes(&mut params, p.name.as_bytes());
        put_u64(&mut params, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut params, d as u64);
        }
        put_f64s(&mut params, p.tensor.data());
    }
    section(&mut out, b"PARM", &params);

    if let Some(opt) = &ckpt.optimizer {
        let mut o = Vec::new();
        put_u64(&mut o, opt.step);
        put_u64(&mut o, opt.slots.len() as u64);
        for slot in &opt.slots {
            put_u64(&mut o, slot.m.len() as u64);
            put_f64s(&mut o, &slot.m);
            put_u64(&mut o, slot.v.len() as u64);
            put_f64s(&mut o, &slot.v);
        }
        section(&mut out, b"OPTM", &o);
    }

    let meta = Meta {
        epoch: ckpt.epoch,
        best_epoch: ckpt.best_epoch,
        history: ckpt.history.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Contract(e.to_string()))?;
    section(&mut out, b"META", &meta);
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut config = None;
    let mut vocab = None;
    let mut params = None;
    let mut optimizer = None;
    let mut meta = None;
    while r.pos < bytes.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        match &tag {
            b"CONF" => {
                let text = std::str::from_utf8(body).map_err(|_| bad("config is not UTF-8"))?;
                config = Some(RunConfig::from_toml(text, "checkpoint config")?);
            }
            b"VOCB" => {
                vocab = Some(
                    serde_json::from_slice::<Vocabulary>(body).map_err(|e| bad(format!("vocabulary: {e}")))?,
                );
            }
            b"PARM" => params = Some(body),
            b"OPTM" => optimizer = Some(read_optimizer(body)?),
            b"META" => {
                meta = Some(serde_json::from_slice::<Meta>(body).map_err(|e| bad(format!("metadata: {e}")))?);
            }
            other => log::warn!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(other)),
        }
    }
    let config: RunConfig = config.ok_or_else(|| bad("missing config section"))?;
    let vocab = vocab.ok_or_else(|| bad("missing vocabulary section"))?;
    let params = params.ok_or_else(|| bad("missing parameter section"))?;
    let meta = meta.ok_or_else(|| bad("missing metadata section"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = LatteModel::new(config.model.clone(), vocab, None, &mut rng)?;
    let mut p = Reader { bytes: params, pos: 0 };
    let count = p.u64()? as usize;
    if count != model.store.len() {
        return Err(bad(format!(
            "checkpoint holds {count} tensors, the configured model has {}",
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = String::from_utf8(p.bytes_field()?.to_vec()).map_err(|_| bad("tensor name"))?;
        let rank = p.u64()? as usize;
        let shape = (0..rank).map(|_| p.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = p.f64s(numel)?;
        let param = model.store.get_mut(id);
        if param.name != name || param.tensor.shape() != shape.as_slice() {
            return Err(bad(format!(
                "tensor {name} {shape:?} does not match model tensor {} {:?}",
                param.name,
                param.tensor.shape()
            )));
        }
        param.tensor.data_mut().copy_from_slice(&data);
    }
    let optimizer = optimizer.map(|(step, slots)| Adam {
        config: config.optimizer,
        step,
        slots,
    });
    Ok(Checkpoint {
        config,
        model,
        optimizer,
        epoch: meta.epoch,
        best_epoch: meta.best_epoch,
        history: meta.history,
    })
}

fn read_optimizer(body: &[u8]) -> Result<(u64, Vec<AdamSlot>)> {
    let mut r = Reader { bytes: body, pos: 0 };
    let step = r.u64()?;
    let n = r.u64()? as usize;
    let mut slots = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let m_len = r.u64()? as usize;
        let m = r.f64s(m_len)?;
        let v_len = r.u64()? as usize;
        let v = r.f64s(v_len)?;
        slots.push(AdamSlot { m, v });
    }
    Ok((step, slots))
}

fn bad(message: impl Into<String>) -> Error {
    Error::format("checkpoint", message)
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, body.len() as u64);
    out.extend_from_slice(body);
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
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
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
