//! `SNNF` weight blob files.
//!
//! ```text
//! "SNNF" | format_version u32 | entry_count u32
//! per entry: name_len u16 | name (utf-8) | dtype u8 (0 = f32) | rank u8
//!            | dims u32 x rank | payload (little-endian)
//! ```

use std::collections::BTreeSet;

use super::bytes::{checked_numel, f32s_from_le, push_f32s, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"SNNF";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_blob(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut seen = BTreeSet::new();
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateEntry(name.clone()));
        }
        let raw = name.as_bytes();
        let len = u16::try_from(raw.len()).map_err(|_| Error::EntryShape {
            name: name.clone(),
            reason: "name longer than 65535 bytes".into(),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(raw);
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(BLOB_MAGIC)?;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")? as usize;
    // every entry needs at least 4 header bytes
    if count > r.remaining() / 4 {
        return Err(Error::Truncated(format!("{count} entries")));
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for k in 0..count {
        let len = r.u16(&format!("entry {k} name length"))? as usize;
        let name =
            String::from_utf8(r.take(len, &format!("entry {k} name"))?.to_vec()).map_err(|_| {
                Error::EntryShape {
                    name: format!("#{k}"),
                    reason: "name is not valid utf-8".into(),
                }
            })?;
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let rank = r.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&name)? as usize);
        }
        let need = checked_numel(&dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::EntryShape {
                name: name.clone(),
                reason: format!("dims {dims:?} overflow"),
            })?;
        if need > r.remaining() {
            return Err(Error::EntryShape {
                name,
                reason: format!(
                    "dims {dims:?} need {need} payload bytes, only {} left",
                    r.remaining()
                ),
            });
        }
        let data = f32s_from_le(r.take(need, &name)?);
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateEntry(name));
        }
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::EntryShape {
            name: "<trailer>".into(),
            reason: format!("{} unexpected trailing bytes", r.remaining()),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_blob(&[("w".into(), t)]).unwrap();
        assert_eq!(&b[..4], b"SNNF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..14], &1u16.to_le_bytes());
        assert_eq!(b[14], b'w');
        assert_eq!(&b[15..17], &[0, 2]);
        assert_eq!(b.len(), 17 + 8 + 8);
    }

    #[test]
    fn truncated_payload_names_entry() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let mut b = encode_blob(&[("layers.0.weight".into(), t)]).unwrap();
        b.truncate(b.len() - 3);
        match decode_blob(&b) {
            Err(Error::EntryShape { name, .. }) => assert_eq!(name, "layers.0.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut b = encode_blob(&[]).unwrap();
        b[0] = b'X';
        assert!(matches!(decode_blob(&b), Err(Error::BadMagic { .. })));
        let mut b = encode_blob(&[]).unwrap();
        b[4] = 9;
        assert!(matches!(decode_blob(&b), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(b"SNNF");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&[0, 3]);
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_blob(&b), Err(Error::EntryShape { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            encode_blob(&[("a".into(), t.clone()), ("a".into(), t)]),
            Err(Error::DuplicateEntry(_))
        ));
    }
}
