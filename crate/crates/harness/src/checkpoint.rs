//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ENRN" | version u32 | record_len u32 | record (UTF-8 JSON) | count u32 |
//! count × ( name_len u16 | name | dtype u8 | rank u8 | rank × u64 | values )
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Models are always written as f64, so a
//! round trip is exact; f32 payloads are accepted on load.

use std::collections::BTreeMap;
use std::path::Path;

use autograd::Tensor;
use enresnet::{EnResNetModel, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"ENRN";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EnResNetModel,
    pub best_val_acc: f64,
    /// Training epochs behind the stored parameters.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    model: ModelSpec,
    best_val_acc: f64,
    epoch: usize,
}

fn bad<T>(field: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(HarnessError::Checkpoint {
        field,
        detail: detail.into(),
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let record = Record {
        model: ckpt.model.spec(),
        best_val_acc: ckpt.best_val_acc,
        epoch: ckpt.epoch,
    };
    let record = serde_json::to_string(&record).map_err(|e| HarnessError::Checkpoint {
        field: "record",
        detail: e.to_string(),
    })?;
    let tensors = ckpt.model.named_tensors()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let Ok(len) = u32::try_from(record.len()) else {
        return bad("record length", "record exceeds u32");
    };
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(record.as_bytes());
    let Ok(count) = u32::try_from(tensors.len()) else {
        return bad("tensor count", "too many tensors");
    };
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &tensors {
        let Ok(name_len) = u16::try_from(name.len()) else {
            return bad("tensor name", format!("{name} is too long"));
        };
        let Ok(rank) = u8::try_from(t.shape().len()) else {
            return bad("rank", format!("{name} has too many axes"));
        };
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        match self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
        {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => bad(
                field,
                format!(
                    "truncated at byte {} (need {n} more, have {})",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ),
        }
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N, field)?);
        Ok(a)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|e| HarnessError::Checkpoint {
            field: "tensor name",
            detail: e.to_string(),
        })?
        .to_string();
    let dtype = r.u8("dtype")?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return bad("dtype", format!("{name}: unknown tag {other}")),
    };
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.u64("dims")?;
        let Ok(d) = usize::try_from(d) else {
            return bad("dims", format!("{name}: dimension {d} overflows"));
        };
        shape.push(d);
    }
    let Some(bytes) = shape
        .iter()
        .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
    else {
        return bad("dims", format!("{name}: element count overflows"));
    };
    let raw = r.take(bytes, "values")?;
    let data: Vec<f64> = if dtype == DTYPE_F64 {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    } else {
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()
    };
    let t = Tensor::new(&shape, data).map_err(|e| HarnessError::Checkpoint {
        field: "dims",
        detail: format!("{name}: {e}"),
    })?;
    Ok((name, t))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return bad(
            "magic",
            format!("bad magic {magic:?}, expected {:?}", MAGIC),
        );
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return bad(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        );
    }
    let len = r.u32("record length")? as usize;
    let record =
        std::str::from_utf8(r.take(len, "record")?).map_err(|e| HarnessError::Checkpoint {
            field: "record",
            detail: e.to_string(),
        })?;
    let record: Record = serde_json::from_str(record).map_err(|e| HarnessError::Checkpoint {
        field: "record",
        detail: e.to_string(),
    })?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return bad("tensor name", format!("{name} appears twice"));
        }
    }
    if r.pos != bytes.len() {
        return bad(
            "trailing bytes",
            format!("{} bytes after the last tensor", bytes.len() - r.pos),
        );
    }
    let model = EnResNetModel::from_parts(&record.model, &mut |name| tensors.remove(name))?;
    if let Some(name) = tensors.keys().next() {
        return bad(
            "tensor name",
            format!("{name} does not belong to the model"),
        );
    }
    Ok(Checkpoint {
        model,
        best_val_acc: record.best_val_acc,
        epoch: record.epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(io_err(path))?)
}
