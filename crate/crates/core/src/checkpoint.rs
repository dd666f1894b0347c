//! Binary checkpoint container.
//!
//! ```text
//! "SSCK" | u32 version | u64 n                       16-byte header
//! f64 x n                                            student parameters
//! u64 step | f64 lr, wd, beta1, beta2, eps | f64 x n m | f64 x n v
//! u8 has_teacher [ f64 x n ]                         teacher parameters
//! u8 has_ensemble [ u64 count | count x (u64 id, f64 ybar0, ybar1, yhat0, yhat1) ]
//! u64 len | len bytes of JSON                        trailer (CheckpointMeta)
//! ```
//!
//! All numbers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Arch, ModelParams, OptimizerState};
use crate::ensemble::EnsembleState;
use crate::losses::LabelVector;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub arch: Arch,
    pub preset: String,
    pub alpha_batch: f64,
    pub alpha_epoch: f64,
    pub alpha_pred: f64,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ModelParams,
    pub optimizer: OptimizerState,
    pub teacher: Option<ModelParams>,
    pub ensemble: Option<EnsembleState>,
    pub meta: CheckpointMeta,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.student.values.len();
        if self.optimizer.m.len() != n || self.teacher.as_ref().is_some_and(|t| t.values.len() != n) {
            return Err(Error::LayoutMismatch { expected: n, found: self.optimizer.m.len() });
        }
        let mut b = Vec::with_capacity(16 + 8 * 4 * n);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(n as u64).to_le_bytes());
        put_f64s(&mut b, &self.student.values);
        let o = &self.optimizer;
        b.extend_from_slice(&o.step.to_le_bytes());
        put_f64s(&mut b, &[o.lr, o.weight_decay, o.beta1, o.beta2, o.eps]);
        put_f64s(&mut b, &o.m);
        put_f64s(&mut b, &o.v);
        match &self.teacher {
            Some(t) => {
                b.push(1);
                put_f64s(&mut b, &t.values);
            }
            None => b.push(0),
        }
        match &self.ensemble {
            Some(e) => {
                b.push(1);
                b.extend_from_slice(&(e.len() as u64).to_le_bytes());
                for i in 0..e.len() {
                    b.extend_from_slice(&(e.patch_ids[i] as u64).to_le_bytes());
                    put_f64s(&mut b, &[e.ybar[i].0[0], e.ybar[i].0[1], e.yhat[i].0[0], e.yhat[i].0[1]]);
                }
            }
            None => b.push(0),
        }
        let trailer = serde_json::to_vec(&self.meta)?;
        b.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        b.extend_from_slice(&trailer);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("missing SSCK magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let student = r.f64s(n)?;
        let step = r.u64()?;
        let h = r.f64s(5)?;
        let optimizer = OptimizerState {
            m: r.f64s(n)?,
            v: r.f64s(n)?,
            step,
            lr: h[0],
            weight_decay: h[1],
            beta1: h[2],
            beta2: h[3],
            eps: h[4],
        };
        let teacher = if r.flag()? { Some(r.f64s(n)?) } else { None };
        let ensemble = if r.flag()? {
            let count = r.u64()? as usize;
            let mut e = EnsembleState { patch_ids: Vec::new(), ybar: Vec::new(), yhat: Vec::new() };
            for _ in 0..count {
                e.patch_ids.push(r.u64()? as usize);
                let v = r.f64s(4)?;
                e.ybar.push(LabelVector([v[0], v[1]]));
                e.yhat.push(LabelVector([v[2], v[3]]));
            }
            Some(e)
        } else {
            None
        };
        let len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after trailer"));
        }
        let student = ModelParams { arch: meta.arch, values: student };
        student.validate()?;
        let teacher = teacher.map(|values| ModelParams { arch: meta.arch, values });
        Ok(Self { student, optimizer, teacher, ensemble, meta })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ssck.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format { kind: "checkpoint", path: self.path.to_path_buf(), reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.err("bad section flag")),
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let student = ModelParams::init(Arch::Cnn, 1);
        let n = student.values.len();
        let mut optimizer = OptimizerState::new(n, 1e-4, 4e-5);
        optimizer.step = 7;
        optimizer.m[3] = 0.25;
        Checkpoint {
            teacher: Some(ModelParams::init(Arch::Cnn, 2)),
            ensemble: Some(EnsembleState {
                patch_ids: vec![4, 9],
                ybar: vec![LabelVector([0.3, 0.7]), LabelVector([1.0, 0.0])],
                yhat: vec![LabelVector([0.4, 0.6]), LabelVector([0.9, 0.1])],
            }),
            student,
            optimizer,
            meta: CheckpointMeta {
                epoch: 3,
                seed: 2020,
                config_hash: "abc".into(),
                arch: Arch::Cnn,
                preset: "selfsim".into(),
                alpha_batch: 0.999,
                alpha_epoch: 1.0,
                alpha_pred: 0.9,
                best_val_dsc: Some(71.5),
                best_epoch: Some(2),
            },
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SSCK");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), c.student.values.len() as u64);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn truncation_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 15, 100, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("x")).is_err());
        }
    }
}
