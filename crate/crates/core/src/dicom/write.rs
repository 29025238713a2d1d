use thiserror::Error;

use super::{tags, DataElement, DataSet, Tag, Value, Vr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WriteError {
    #[error("binary value of {tag} has odd length {len}")]
    OddLengthUnpadded { tag: Tag, len: usize },
    #[error("value of {tag} ({vr}) is {len} bytes, over the 16-bit length limit")]
    ValueTooLong { tag: Tag, vr: Vr, len: usize },
    #[error("value kind does not match VR {vr} for {tag}")]
    ValueKindMismatch { tag: Tag, vr: Vr },
}

/// Serializes a data set. Preamble, magic and file meta are written only when group 0002
/// elements are present; the group length is recomputed.
pub fn serialize_dataset(ds: &DataSet) -> Result<Vec<u8>, WriteError> {
    if ds.has_file_meta() {
        serialize_file(ds)
    } else {
        let mut out = Vec::new();
        write_elements(&mut out, ds.iter())?;
        Ok(out)
    }
}

/// Always writes the 128-byte preamble and "DICM" magic before the data set.
pub fn serialize_file(ds: &DataSet) -> Result<Vec<u8>, WriteError> {
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");

    let mut meta = Vec::new();
    write_elements(
        &mut meta,
        ds.iter()
            .filter(|e| e.tag.is_file_meta() && e.tag != tags::FILE_META_GROUP_LENGTH),
    )?;
    if !meta.is_empty() {
        write_header(&mut out, tags::FILE_META_GROUP_LENGTH, Vr::UL, 4);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
    }
    write_elements(&mut out, ds.iter().filter(|e| !e.tag.is_file_meta()))?;
    Ok(out)
}

fn write_elements<'a>(
    out: &mut Vec<u8>,
    elements: impl Iterator<Item = &'a DataElement>,
) -> Result<(), WriteError> {
    for el in elements {
        write_element(out, el)?;
    }
    Ok(())
}

fn write_header(out: &mut Vec<u8>, tag: Tag, vr: Vr, len: u32) {
    out.extend_from_slice(&tag.group.to_le_bytes());
    out.extend_from_slice(&tag.element.to_le_bytes());
    out.extend_from_slice(&vr.code());
    if vr.has_long_length() {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&len.to_le_bytes());
    } else {
        out.extend_from_slice(&(len as u16).to_le_bytes());
    }
}

fn write_element(out: &mut Vec<u8>, el: &DataElement) -> Result<(), WriteError> {
    let payload = encode_value(el)?;
    let limit = if el.vr.has_long_length() {
        u32::MAX as usize - 1
    } else {
        u16::MAX as usize - 1
    };
    if payload.len() > limit {
        return Err(WriteError::ValueTooLong {
            tag: el.tag,
            vr: el.vr,
            len: payload.len(),
        });
    }
    write_header(out, el.tag, el.vr, payload.len() as u32);
    out.extend_from_slice(&payload);
    Ok(())
}

fn encode_value(el: &DataElement) -> Result<Vec<u8>, WriteError> {
    let mismatch = || WriteError::ValueKindMismatch {
        tag: el.tag,
        vr: el.vr,
    };
    let bytes = match (&el.value, el.vr) {
        (Value::Text(s), vr) if vr.is_text() => {
            let mut b = s.as_bytes().to_vec();
            if b.len() % 2 == 1 {
                b.push(vr.pad_byte());
            }
            b
        }
        (Value::Sequence(items), Vr::SQ) => {
            let mut b = Vec::new();
            for item in items {
                let mut body = Vec::new();
                write_elements(&mut body, item.iter())?;
                b.extend_from_slice(&tags::ITEM.group.to_le_bytes());
                b.extend_from_slice(&tags::ITEM.element.to_le_bytes());
                b.extend_from_slice(&(body.len() as u32).to_le_bytes());
                b.extend_from_slice(&body);
            }
            b
        }
        (Value::U16(v), Vr::US) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::I16(v), Vr::SS) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::U32(v), Vr::UL) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::I32(v), Vr::SL) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::F32(v), Vr::FL) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::F64(v), Vr::FD) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Value::Bytes(b), vr) if !vr.is_text() && vr != Vr::SQ => {
            if b.len() % 2 == 1 {
                return Err(WriteError::OddLengthUnpadded {
                    tag: el.tag,
                    len: b.len(),
                });
            }
            b.clone()
        }
        _ => return Err(mismatch()),
    };
    Ok(bytes)
}
