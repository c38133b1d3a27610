//! Little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "LEAPCKPT"
//! version  u32
//! model    7 x u64  vocab, seq_len, hidden, heads, ffn, layers, classes
//! profile  u32
//! count    u64      number of tensors
//! table    count x (name_len u32, name utf-8, rows u64, cols u64)
//! tensors  row-major f64 arrays in table order
//! thresh   u64 n, f64 temperature, n x f64 sigma   (n = 0 when absent)
//! scores   one f64 array per prunable matrix, block-grid shape
//! masks    one u8 per block per prunable matrix
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BlockMask;
use crate::model::{GranularityProfile, ModelConfig, ToyModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LEAPCKPT";
pub const VERSION: u32 = 1;

/// Threshold state saved with a pruned model.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedThresholds {
    pub temperature: f64,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub thresholds: Option<SavedThresholds>,
}

fn named_tensors(model: &ToyModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model
        .dense_param_names()
        .into_iter()
        .zip(model.dense_params())
        .collect();
    out.extend(model.prunables().into_iter().map(|p| (p.name().to_string(), p.weight())));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let c = m.config;
        for v in [c.vocab, c.seq_len, c.hidden, c.heads, c.ffn, c.layers, c.classes] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.extend_from_slice(&m.profile.code().to_le_bytes());
        let tensors = named_tensors(m);
        b.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        }
        for (_, t) in &tensors {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.thresholds {
            Some(th) => {
                b.extend_from_slice(&(th.sigma.len() as u64).to_le_bytes());
                b.extend_from_slice(&th.temperature.to_le_bytes());
                for s in &th.sigma {
                    b.extend_from_slice(&s.to_le_bytes());
                }
            }
            None => {
                b.extend_from_slice(&0u64.to_le_bytes());
                b.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        for p in m.prunables() {
            for v in p.score().data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        for p in m.prunables() {
            b.extend(p.mask().bits().iter().map(|&bit| u8::from(bit)));
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let config = ModelConfig {
            vocab: dims[0],
            seq_len: dims[1],
            hidden: dims[2],
            heads: dims[3],
            ffn: dims[4],
            layers: dims[5],
            classes: dims[6],
        };
        // guards the allocation below against absurd headers
        if dims.iter().any(|&d| d > 1 << 20) {
            return Err(Error::Format(format!("implausible model dimensions {dims:?}")));
        }
        let profile = GranularityProfile::from_code(r.u32()?)?;
        let mut model = ToyModel::new(config, profile, 0)
            .map_err(|e| Error::Format(format!("header describes an invalid model: {e}")))?;

        let expected: Vec<(String, (usize, usize))> = named_tensors(&model)
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let count = r.usize()?;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "{count} tensors in table, model needs {}",
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let len = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            if got != name || (rows, cols) != *shape {
                return Err(Error::Format(format!(
                    "table entry `{got}` {rows}x{cols}, expected `{name}` {}x{}",
                    shape.0, shape.1
                )));
            }
        }
        let mut arrays = Vec::with_capacity(count);
        for (_, (rows, cols)) in &expected {
            arrays.push(Tensor::from_vec(*rows, *cols, r.f64s(rows * cols)?)?);
        }
        let mut arrays = arrays.into_iter();
        for t in model.dense_params_mut() {
            *t = arrays.next().expect("count checked");
        }
        for (p, w) in model.prunables_mut().into_iter().zip(arrays) {
            *p.weight_mut() = w;
        }

        let n = r.usize()?;
        let temperature = r.f64()?;
        let thresholds = if n == 0 {
            None
        } else {
            if n != model.num_prunable() {
                return Err(Error::Format(format!(
                    "{n} thresholds for {} prunable matrices",
                    model.num_prunable()
                )));
            }
            Some(SavedThresholds {
                temperature,
                sigma: r.f64s(n)?,
            })
        };
        for p in model.prunables_mut() {
            let (rows, cols) = p.score().shape();
            *p.score_mut() = Tensor::from_vec(rows, cols, r.f64s(rows * cols)?)?;
        }
        for p in model.prunables_mut() {
            let (rows, cols) = p.score().shape();
            let bits = r
                .take(rows * cols)?
                .iter()
                .map(|&v| match v {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Format(format!("mask byte {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            p.set_mask(BlockMask::from_bits(rows, cols, bits)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { model, thresholds })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} overflows")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
