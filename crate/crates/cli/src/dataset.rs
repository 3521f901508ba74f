//! `XFMV` two-view dataset files.
//!
//! ```text
//! "XFMV" | version u32 | n u32 | H u16 | W u16 | label_kind u8 |
//!   n × { view1 f32×H·W | view2 f32×H·W | label (u16, or u32 bitmask) }
//! ```
//!
//! Little-endian throughout; the file length is fully determined by the
//! header.

use std::path::Path;

use xfmamba::train::{Dataset, LabelKind};

use crate::error::{CliError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"XFMV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1;

fn label_bytes(kind: LabelKind) -> usize {
    match kind {
        LabelKind::Class => 2,
        LabelKind::MultiHot => 4,
    }
}

/// Exact file size for a header.
pub fn expected_len(n: usize, h: usize, w: usize, kind: LabelKind) -> u128 {
    HEADER_LEN as u128 + n as u128 * (2 * 4 * (h as u128) * (w as u128) + label_bytes(kind) as u128)
}

pub fn encode(d: &Dataset) -> Result<Vec<u8>, String> {
    d.validate().map_err(|e| e.to_string())?;
    let n = u32::try_from(d.len()).map_err(|_| "more than 2^32 samples")?;
    let h = u16::try_from(d.h).map_err(|_| "height exceeds 65535")?;
    let w = u16::try_from(d.w).map_err(|_| "width exceeds 65535")?;
    let px = d.h * d.w;
    let mut out = Vec::with_capacity(expected_len(d.len(), d.h, d.w, d.kind) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.push(match d.kind {
        LabelKind::Class => 0,
        LabelKind::MultiHot => 1,
    });
    for i in 0..d.len() {
        for plane in [&d.v1, &d.v2] {
            for v in &plane[i * px..][..px] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let label = d.labels[i];
        match d.kind {
            LabelKind::Class => {
                let l = u16::try_from(label).map_err(|_| format!("class label {label} exceeds u16"))?;
                out.extend_from_slice(&l.to_le_bytes());
            }
            LabelKind::MultiHot => out.extend_from_slice(&label.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err("not an XFMV dataset".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (n, h, w) = (u32_at(8) as usize, u16_at(12) as usize, u16_at(14) as usize);
    let kind = match bytes[16] {
        0 => LabelKind::Class,
        1 => LabelKind::MultiHot,
        k => return Err(format!("unknown label kind {k}")),
    };
    let want = expected_len(n, h, w, kind);
    if bytes.len() as u128 != want {
        return Err(format!("header promises {want} bytes, file has {}", bytes.len()));
    }
    let px = h * w;
    let mut d = Dataset {
        h,
        w,
        v1: Vec::with_capacity(n * px),
        v2: Vec::with_capacity(n * px),
        kind,
        labels: Vec::with_capacity(n),
    };
    let lb = label_bytes(kind);
    for rec in bytes[HEADER_LEN..].chunks_exact(8 * px + lb) {
        let (planes, label) = rec.split_at(8 * px);
        let mut floats = planes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        d.v1.extend(floats.by_ref().take(px));
        d.v2.extend(floats);
        d.labels.push(match kind {
            LabelKind::Class => u16::from_le_bytes(label.try_into().expect("2 bytes")) as u32,
            LabelKind::MultiHot => u32::from_le_bytes(label.try_into().expect("4 bytes")),
        });
    }
    d.validate().map_err(|e| e.to_string())?;
    Ok(d)
}

pub fn save(path: &Path, d: &Dataset) -> Result<()> {
    let bytes = encode(d).map_err(CliError::Usage)?;
    fsio::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fsio::read(path)?).map_err(|d| CliError::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: LabelKind) -> Dataset {
        Dataset {
            h: 2,
            w: 3,
            v1: (0..12).map(|i| i as f32 * 0.5).collect(),
            v2: (0..12).map(|i| -(i as f32)).collect(),
            kind,
            labels: match kind {
                LabelKind::Class => vec![1, 0],
                LabelKind::MultiHot => vec![0b101, 0b1],
            },
        }
    }

    #[test]
    fn round_trip_both_label_kinds() {
        for kind in [LabelKind::Class, LabelKind::MultiHot] {
            let d = sample(kind);
            let bytes = encode(&d).unwrap();
            assert_eq!(bytes.len() as u128, expected_len(2, 2, 3, kind));
            assert_eq!(decode(&bytes).unwrap(), d);
        }
    }

    #[test]
    fn header_fields() {
        let bytes = encode(&sample(LabelKind::Class)).unwrap();
        assert_eq!(&bytes[..4], b"XFMV");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], &3u16.to_le_bytes());
        assert_eq!(bytes[16], 0);
    }

    #[test]
    fn any_length_change_is_rejected() {
        let bytes = encode(&sample(LabelKind::MultiHot)).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
