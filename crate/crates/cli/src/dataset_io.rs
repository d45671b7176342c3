//! The `LSTATOY1` dataset file.
//!
//! Layout, all little-endian: 8-byte magic, then `u32` version, A, O,
//! T_raw, C_in, H0, W0 and the sample count. Each sample is `u16` action,
//! `u16` object, `T_raw` boxes of four `u16` (top, left, height, width),
//! then its `T_raw x C_in x H0 x W0` frames as `f32`, row-major.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use lsta_core::synth::{BBox, Dataset, DatasetMeta, ToyActivitySample};

use crate::error::{CliError, FormatError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"LSTATOY1";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 8 * 4;

fn sample_len(meta: &DatasetMeta) -> u64 {
    4 + 8 * meta.frames as u64 + 4 * meta.clip_len() as u64
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let m = &data.meta;
    let mut out = Vec::with_capacity((HEADER_LEN + sample_len(m) * data.len() as u64) as usize);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, m.actions as u32, m.objects as u32, m.frames as u32] {
        out.write_u32::<LE>(v).unwrap();
    }
    for v in [m.channels, m.height, m.width, data.len()] {
        out.write_u32::<LE>(v as u32).unwrap();
    }
    for s in &data.samples {
        out.write_u16::<LE>(s.action as u16).unwrap();
        out.write_u16::<LE>(s.object as u16).unwrap();
        for b in &s.track {
            for v in [b.top, b.left, b.height, b.width] {
                out.write_u16::<LE>(v).unwrap();
            }
        }
        for &v in &s.frames {
            out.write_f32::<LE>(v).unwrap();
        }
    }
    out
}

fn header_u32(cur: &mut Cursor<&[u8]>, what: &str) -> std::result::Result<u32, FormatError> {
    let offset = cur.position();
    cur.read_u32::<LE>().map_err(|_| FormatError::Truncated {
        what: format!("header field {what}"),
        offset,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, FormatError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    if cur.read_exact(&mut magic).is_err() || &magic != DATASET_MAGIC {
        let n = bytes.len().min(8);
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    let version = header_u32(&mut cur, "version")?;
    if version != DATASET_VERSION {
        return Err(FormatError::Version {
            offset: 8,
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 7];
    for (d, what) in dims.iter_mut().zip(["A", "O", "T_raw", "C_in", "H0", "W0", "sample count"]) {
        *d = header_u32(&mut cur, what)? as usize;
    }
    let [actions, objects, frames, channels, height, width, count] = dims;
    let meta = DatasetMeta {
        actions,
        objects,
        frames,
        channels,
        height,
        width,
    };
    let per_sample = sample_len(&meta);
    let mut samples = Vec::with_capacity(count.min(bytes.len() / per_sample.max(1) as usize + 1));
    for index in 0..count {
        let start = cur.position();
        if (bytes.len() as u64).saturating_sub(start) < per_sample {
            return Err(FormatError::TruncatedSample { index, offset: start });
        }
        // length checked above, so the reads below cannot fail
        let action = cur.read_u16::<LE>().unwrap() as usize;
        let object = cur.read_u16::<LE>().unwrap() as usize;
        if action >= actions || object >= objects {
            return Err(FormatError::Invalid {
                what: format!("labels of sample {index}"),
                offset: start,
                detail: format!("({action}, {object}) outside {actions}x{objects}"),
            });
        }
        let track = (0..frames)
            .map(|_| BBox {
                top: cur.read_u16::<LE>().unwrap(),
                left: cur.read_u16::<LE>().unwrap(),
                height: cur.read_u16::<LE>().unwrap(),
                width: cur.read_u16::<LE>().unwrap(),
            })
            .collect();
        let mut frames_data = vec![0f32; meta.clip_len()];
        cur.read_f32_into::<LE>(&mut frames_data).unwrap();
        samples.push(ToyActivitySample {
            action,
            object,
            track,
            frames: frames_data,
        });
    }
    let end = cur.position();
    if end != bytes.len() as u64 {
        return Err(FormatError::Trailing {
            offset: end,
            extra: bytes.len() as u64 - end,
        });
    }
    Ok(Dataset { meta, samples })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(data)).map_err(CliError::io(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode_dataset(&bytes).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}
