use thiserror::Error;

use super::{tags, DataElement, DataSet, Tag, Value, Vr, EXPLICIT_VR_LITTLE_ENDIAN};

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("truncated input at offset {offset}: needed {needed} bytes, {available} available")]
    TruncatedInput {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("preamble present but magic is not DICM")]
    BadMagic,
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("unknown VR {vr:?} for tag {tag}")]
    UnknownVr { tag: Tag, vr: String },
    #[error("malformed element {tag} at offset {offset}: {reason}")]
    Malformed {
        tag: Tag,
        offset: usize,
        reason: &'static str,
    },
}

/// Parses explicit VR little endian bytes, with or without preamble and file meta.
///
/// The file-meta group length is dropped; the writer recomputes it.
pub fn parse_dataset(bytes: &[u8]) -> Result<DataSet, ParseError> {
    if bytes.is_empty() {
        return Err(ParseError::TruncatedInput {
            offset: 0,
            needed: 1,
            available: 0,
        });
    }
    let body_start = if bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == MAGIC
    {
        PREAMBLE_LEN + 4
    } else if bytes.len() >= PREAMBLE_LEN && bytes[..PREAMBLE_LEN].iter().all(|b| *b == 0) {
        return Err(ParseError::BadMagic);
    } else {
        0
    };

    let mut reader = Reader {
        buf: bytes,
        pos: body_start,
    };
    let mut ds = DataSet::new();
    while reader.remaining() > 0 {
        let el = reader.element()?;
        if el.tag == tags::FILE_META_GROUP_LENGTH {
            continue;
        }
        ds.insert(el);
    }
    if let Some(ts) = ds.text(tags::TRANSFER_SYNTAX_UID) {
        if ts != EXPLICIT_VR_LITTLE_ENDIAN {
            return Err(ParseError::UnsupportedTransferSyntax(ts.to_string()));
        }
    }
    Ok(ds)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::TruncatedInput {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, ParseError> {
        let group = self.u16()?;
        let element = self.u16()?;
        Ok(Tag::new(group, element))
    }

    fn element(&mut self) -> Result<DataElement, ParseError> {
        let start = self.pos;
        let tag = self.tag()?;
        if tag.group == 0xFFFE {
            return Err(ParseError::Malformed {
                tag,
                offset: start,
                reason: "item tag outside a sequence",
            });
        }
        let code = self.take(2)?;
        let vr = Vr::from_code([code[0], code[1]]).ok_or_else(|| ParseError::UnknownVr {
            tag,
            vr: String::from_utf8_lossy(code).into_owned(),
        })?;
        let len = if vr.has_long_length() {
            self.take(2)?;
            self.u32()?
        } else {
            u32::from(self.u16()?)
        };

        if vr == Vr::SQ {
            let items = self.sequence_items(tag, len)?;
            return Ok(DataElement::sequence(tag, items));
        }
        if len == UNDEFINED_LENGTH {
            return Err(ParseError::Malformed {
                tag,
                offset: start,
                reason: "undefined length on a non-sequence element",
            });
        }
        let raw = self.take(len as usize)?;
        let value = decode_value(tag, vr, raw, start)?;
        Ok(DataElement::new(tag, vr, value))
    }

    fn sequence_items(&mut self, seq_tag: Tag, len: u32) -> Result<Vec<DataSet>, ParseError> {
        let mut items = Vec::new();
        if len == UNDEFINED_LENGTH {
            loop {
                let at = self.pos;
                let tag = self.tag()?;
                let item_len = self.u32()?;
                if tag == tags::SEQUENCE_DELIMITATION {
                    return Ok(items);
                }
                if tag != tags::ITEM {
                    return Err(ParseError::Malformed {
                        tag: seq_tag,
                        offset: at,
                        reason: "expected item or sequence delimiter",
                    });
                }
                items.push(self.item(item_len)?);
            }
        }
        let end = self.pos + len as usize;
        if end > self.buf.len() {
            return Err(ParseError::TruncatedInput {
                offset: self.pos,
                needed: len as usize,
                available: self.remaining(),
            });
        }
        while self.pos < end {
            let at = self.pos;
            let tag = self.tag()?;
            let item_len = self.u32()?;
            if tag != tags::ITEM {
                return Err(ParseError::Malformed {
                    tag: seq_tag,
                    offset: at,
                    reason: "expected item tag",
                });
            }
            items.push(self.item(item_len)?);
        }
        if self.pos != end {
            return Err(ParseError::Malformed {
                tag: seq_tag,
                offset: self.pos,
                reason: "item overruns sequence length",
            });
        }
        Ok(items)
    }

    fn item(&mut self, len: u32) -> Result<DataSet, ParseError> {
        let mut ds = DataSet::new();
        if len == UNDEFINED_LENGTH {
            loop {
                if self.remaining() >= 8 {
                    let peek = &self.buf[self.pos..self.pos + 4];
                    let g = u16::from_le_bytes([peek[0], peek[1]]);
                    let e = u16::from_le_bytes([peek[2], peek[3]]);
                    if Tag::new(g, e) == tags::ITEM_DELIMITATION {
                        self.pos += 8;
                        return Ok(ds);
                    }
                }
                ds.insert(self.element()?);
            }
        }
        let end = self.pos + len as usize;
        if end > self.buf.len() {
            return Err(ParseError::TruncatedInput {
                offset: self.pos,
                needed: len as usize,
                available: self.remaining(),
            });
        }
        while self.pos < end {
            ds.insert(self.element()?);
        }
        if self.pos != end {
            return Err(ParseError::Malformed {
                tag: tags::ITEM,
                offset: self.pos,
                reason: "element overruns item length",
            });
        }
        Ok(ds)
    }
}

fn decode_value(tag: Tag, vr: Vr, raw: &[u8], offset: usize) -> Result<Value, ParseError> {
    fn chunks<const N: usize, T>(
        raw: &[u8],
        tag: Tag,
        offset: usize,
        f: impl Fn([u8; N]) -> T,
    ) -> Result<Vec<T>, ParseError> {
        if !raw.len().is_multiple_of(N) {
            return Err(ParseError::Malformed {
                tag,
                offset,
                reason: "length not a multiple of the value width",
            });
        }
        Ok(raw
            .chunks_exact(N)
            .map(|c| f(c.try_into().expect("chunk width")))
            .collect())
    }

    let value = match vr {
        _ if vr.is_text() => {
            let mut end = raw.len();
            while end > 0 && (raw[end - 1] == b' ' || raw[end - 1] == 0) {
                end -= 1;
            }
            Value::Text(String::from_utf8_lossy(&raw[..end]).into_owned())
        }
        Vr::US => Value::U16(chunks(raw, tag, offset, u16::from_le_bytes)?),
        Vr::SS => Value::I16(chunks(raw, tag, offset, i16::from_le_bytes)?),
        Vr::UL => Value::U32(chunks(raw, tag, offset, u32::from_le_bytes)?),
        Vr::SL => Value::I32(chunks(raw, tag, offset, i32::from_le_bytes)?),
        Vr::FL => Value::F32(chunks(raw, tag, offset, f32::from_le_bytes)?),
        Vr::FD => Value::F64(chunks(raw, tag, offset, f64::from_le_bytes)?),
        _ => Value::Bytes(raw.to_vec()),
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent hex-dump oracle: the expected bytes are written out by hand.
    fn hex(s: &str) -> Vec<u8> {
        let clean: String = s.split_whitespace().collect();
        hex::decode(clean).unwrap()
    }

    #[test]
    fn zero_length_input_is_truncated() {
        assert!(matches!(
            parse_dataset(&[]),
            Err(ParseError::TruncatedInput { .. })
        ));
    }

    #[test]
    fn hand_encoded_patient_name() {
        // (0010,0010) PN len=10 "DOE^JANE  " -- group, element, 'P''N', u16 length, value
        let bytes = hex("1000 1000 504e 0a00 444f455e4a414e452020");
        let ds = parse_dataset(&bytes).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.text(tags::PATIENT_NAME), Some("DOE^JANE"));
        assert_eq!(ds.get(tags::PATIENT_NAME).unwrap().vr, Vr::PN);
    }

    #[test]
    fn length_beyond_input_is_truncated() {
        let bytes = hex("1000 1000 504e 2000 444f45");
        assert!(matches!(
            parse_dataset(&bytes),
            Err(ParseError::TruncatedInput { .. })
        ));
    }

    #[test]
    fn zero_preamble_without_magic_is_bad_magic() {
        let mut bytes = vec![0u8; 128];
        bytes.extend_from_slice(b"DICX");
        assert_eq!(parse_dataset(&bytes), Err(ParseError::BadMagic));
    }

    #[test]
    fn other_transfer_syntax_rejected() {
        let mut bytes = vec![0u8; 128];
        bytes.extend_from_slice(b"DICM");
        // (0002,0010) UI "1.2.840.10008.1.2" implicit VR LE, padded to 18
        bytes.extend(hex("0200 1000 5549 1200"));
        bytes.extend_from_slice(b"1.2.840.10008.1.2\0");
        assert_eq!(
            parse_dataset(&bytes),
            Err(ParseError::UnsupportedTransferSyntax("1.2.840.10008.1.2".into()))
        );
    }

    #[test]
    fn undefined_length_sequence_with_delimiters() {
        // (0008,1140) SQ undefined, one undefined-length item holding (0008,1155) UI "1.2"
        let bytes = hex(
            "0800 4011 5351 0000 ffffffff
             feff 00e0 ffffffff
             0800 5511 5549 0400 312e3200
             feff 0de0 00000000
             feff dde0 00000000",
        );
        let ds = parse_dataset(&bytes).unwrap();
        let items = ds.get(tags::REFERENCED_IMAGE_SEQUENCE).unwrap().items();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].text(tags::REFERENCED_SOP_INSTANCE_UID), Some("1.2"));
    }

    #[test]
    fn unknown_vr_reported() {
        let bytes = hex("1000 1000 5a5a 0200 4142");
        assert!(matches!(parse_dataset(&bytes), Err(ParseError::UnknownVr { .. })));
    }

    #[test]
    fn numeric_vrs_decode_little_endian() {
        // (0028,0010) US 512 ; (0018,1150) IS skipped ; (0028,0100) US 16
        let bytes = hex("2800 1000 5553 0200 0002 2800 0001 5553 0200 1000");
        let ds = parse_dataset(&bytes).unwrap();
        assert_eq!(ds.u16(tags::ROWS), Some(512));
        assert_eq!(ds.u16(tags::BITS_ALLOCATED), Some(16));
    }
}
