//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VUN1" | version u32 | config_len u32 | config UTF-8 bytes
//! | record_count u32 | records...
//! record: name_len u16 | name UTF-8 | ndim u8 | dims u64 each | payload f32
//! ```
//!
//! Records hold every parameter plus the optimizer moments
//! (`optim.m.<param>`, `optim.v.<param>`) and the step counter
//! (`optim.step`, a dimensionless single value). Load of a save reproduces
//! every tensor bitwise and the config text verbatim.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::OptimState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VUN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Capture parameters and optimizer state. Record order is the store's
    /// insertion order, so identical state serializes to identical bytes.
    pub fn from_state(config_text: &str, store: &ParamStore<f32>, optim: &OptimState) -> Self {
        let mut records = Vec::with_capacity(store.len() * 3 + 1);
        for p in store.iter() {
            records.push(Record {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
        for (i, p) in store.iter().enumerate() {
            records.push(Record {
                name: format!("optim.m.{}", p.name),
                dims: optim.m[i].shape().to_vec(),
                data: optim.m[i].data().to_vec(),
            });
        }
        for (i, p) in store.iter().enumerate() {
            records.push(Record {
                name: format!("optim.v.{}", p.name),
                dims: optim.v[i].shape().to_vec(),
                data: optim.v[i].data().to_vec(),
            });
        }
        records.push(Record {
            name: "optim.step".to_string(),
            dims: vec![],
            data: vec![optim.t as f32],
        });
        Checkpoint {
            config_text: config_text.to_string(),
            records,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint(format!("{origin}: {msg}"));
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err(format!(
                    "truncated at byte {} (need {} more)",
                    *pos,
                    *pos + n - bytes.len()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(err(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
            .map_err(|_| err("config text is not UTF-8".into()))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| err("record name is not UTF-8".into()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, dims, data });
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            config_text,
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    /// Restore parameters and optimizer state into a freshly registered
    /// model. Names and shapes must match the checkpoint exactly.
    pub fn restore(&self, store: &mut ParamStore<f32>, optim: &mut OptimState) -> Result<()> {
        let expected = store.len() * 3 + 1;
        if self.records.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} records but the model needs {expected}",
                self.records.len()
            )));
        }
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, into_optim) in [("", false), ("optim.m.", true), ("optim.v.", true)] {
                let rec = self.record(&format!("{prefix}{name}"))?;
                let want = store.get(name)?.shape().to_vec();
                if rec.dims != want {
                    return Err(Error::Checkpoint(format!(
                        "record `{}{name}` has dims {:?}, model expects {:?}",
                        prefix, rec.dims, want
                    )));
                }
                let t = Tensor::new(rec.dims.clone(), rec.data.clone())?;
                if into_optim {
                    if prefix == "optim.m." {
                        optim.m[i] = t;
                    } else {
                        optim.v[i] = t;
                    }
                } else {
                    store.set(name, t)?;
                }
            }
        }
        let step = self.record("optim.step")?;
        if step.data.len() != 1 {
            return Err(Error::Checkpoint("malformed `optim.step`".into()));
        }
        optim.t = step.data[0] as usize;
        Ok(())
    }
}
