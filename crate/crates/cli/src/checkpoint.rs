//! The `LSTACKP1` checkpoint file.
//!
//! Layout, all little-endian: 8-byte magic, `u32` version, `u64` config
//! hash, `u32` tensor count, then per tensor a `u32` name length, the UTF-8
//! name, `u8` rank, `u32` dims and `f64` data. The optimizer follows as a
//! `u8` kind (0 Adam, 1 SGD), a `u64` step count per tensor and, for Adam,
//! the first and then second moments of every tensor as raw `f64`. The file
//! ends with the `u64` completed-epoch count and the `u64` PRNG state.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use lsta_core::train::{Optimizer, OptimizerKind, TrainState};
use lsta_core::{ParamSet, SplitMix64, Tensor};

use crate::error::{CliError, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSTACKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub state: TrainState,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let st = &ckpt.state;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    out.write_u64::<LE>(ckpt.config_hash).unwrap();
    out.write_u32::<LE>(st.params.len() as u32).unwrap();
    for (_, name, t) in st.params.iter() {
        out.write_u32::<LE>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(t.dims().len() as u8).unwrap();
        for &d in t.dims() {
            out.write_u32::<LE>(d as u32).unwrap();
        }
        for &v in t.data() {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    let opt = &st.optimizer;
    out.write_u8(match opt.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::Sgd => 1,
    })
    .unwrap();
    for &s in &opt.steps {
        out.write_u64::<LE>(s).unwrap();
    }
    for t in opt.m.iter().chain(&opt.v) {
        for &v in t.data() {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    out.write_u64::<LE>(st.epoch as u64).unwrap();
    out.write_u64::<LE>(st.rng.state()).unwrap();
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn fail<T>(&self, what: &str, offset: u64) -> std::result::Result<T, FormatError> {
        Err(FormatError::Truncated {
            what: what.to_string(),
            offset,
        })
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, FormatError> {
        let at = self.cur.position();
        self.cur.read_u8().or_else(|_| self.fail(what, at))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        let at = self.cur.position();
        self.cur.read_u32::<LE>().or_else(|_| self.fail(what, at))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, FormatError> {
        let at = self.cur.position();
        self.cur.read_u64::<LE>().or_else(|_| self.fail(what, at))
    }

    fn f64s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, FormatError> {
        let at = self.cur.position();
        let left = self.cur.get_ref().len() as u64 - at.min(self.cur.get_ref().len() as u64);
        if left < 8 * n as u64 {
            return self.fail(what, at);
        }
        let mut v = vec![0.0; n];
        self.cur.read_f64_into::<LE>(&mut v).unwrap();
        Ok(v)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let mut magic = [0u8; 8];
    if r.cur.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            offset: 8,
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config_hash = r.u64("config hash")?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamSet::new();
    for i in 0..count {
        let at = r.cur.position();
        let len = r.u32("tensor name length")? as usize;
        let mut name = vec![0u8; len];
        if r.cur.read_exact(&mut name).is_err() {
            return r.fail(&format!("name of tensor {i}"), at);
        }
        let name = String::from_utf8(name).map_err(|e| FormatError::Invalid {
            what: format!("name of tensor {i}"),
            offset: at + 4,
            detail: e.to_string(),
        })?;
        let rank_at = r.cur.position();
        let rank = r.u8("tensor rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = r.f64s(n, &format!("data of tensor `{name}`"))?;
        let t = Tensor::new(&dims, data).map_err(|e| FormatError::Invalid {
            what: format!("shape of tensor `{name}`"),
            offset: rank_at,
            detail: e.to_string(),
        })?;
        params.add(&name, t);
    }
    let kind_at = r.cur.position();
    let kind = match r.u8("optimizer kind")? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Sgd,
        k => {
            return Err(FormatError::Invalid {
                what: "optimizer kind".into(),
                offset: kind_at,
                detail: format!("{k} is neither 0 (adam) nor 1 (sgd)"),
            })
        }
    };
    let steps = (0..count).map(|_| r.u64("optimizer steps")).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut moments = Vec::new();
    if kind == OptimizerKind::Adam {
        for pass in ["first", "second"] {
            for (_, name, t) in params.iter() {
                let data = r.f64s(t.len(), &format!("{pass} moment of `{name}`"))?;
                moments.push(Tensor::new(t.dims(), data).unwrap());
            }
        }
    }
    let v = moments.split_off(moments.len() / 2);
    let optimizer = Optimizer {
        kind,
        steps,
        m: moments,
        v,
    };
    let epoch = r.u64("epoch")? as usize;
    let rng = SplitMix64::from_state(r.u64("rng state")?);
    let end = r.cur.position();
    if end != bytes.len() as u64 {
        return Err(FormatError::Trailing {
            offset: end,
            extra: bytes.len() as u64 - end,
        });
    }
    Ok(Checkpoint {
        config_hash,
        state: TrainState {
            params,
            optimizer,
            epoch,
            rng,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(CliError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode_checkpoint(&bytes).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Checks that `ckpt` was written for `config_hash` and holds exactly the
/// tensors of `template`, in order and shape.
pub fn check_compatible(ckpt: &Checkpoint, config_hash: u64, template: &ParamSet) -> Result<()> {
    if ckpt.config_hash != config_hash {
        return Err(CliError::Validation(format!(
            "checkpoint config hash {:016x} does not match the requested configuration ({config_hash:016x})",
            ckpt.config_hash
        )));
    }
    let got = &ckpt.state.params;
    if got.len() != template.len() {
        return Err(CliError::Validation(format!(
            "checkpoint holds {} tensors, model expects {}",
            got.len(),
            template.len()
        )));
    }
    for ((_, a, ta), (_, b, tb)) in got.iter().zip(template.iter()) {
        if a != b || ta.dims() != tb.dims() {
            return Err(CliError::Validation(format!(
                "checkpoint tensor `{a}` {:?} does not match model tensor `{b}` {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
    }
    Ok(())
}
