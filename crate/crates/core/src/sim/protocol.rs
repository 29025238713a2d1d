//! Length-prefixed JSON frames: 4-byte big-endian length, then a UTF-8 JSON body.

use std::io::{self, Read, Write};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::ClinicalEpisode;

pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("peer closed the connection")]
    Closed,
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_id: Option<String>,
    /// Inclusive DA bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDescriptor {
    pub study_uid: String,
    pub local_id: String,
    pub modality: String,
    pub study_date: String,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClinicalQuery {
    NewCasesSince { since: chrono::DateTime<chrono::Utc> },
    Outcomes { episode_ids: Vec<String> },
    UpdatedSince { since: chrono::DateTime<chrono::Utc> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    #[serde(rename = "FIND-RQ")]
    FindRq { query: FindQuery },
    #[serde(rename = "FIND-RSP")]
    FindRsp { studies: Vec<StudyDescriptor> },
    #[serde(rename = "MOVE-RQ")]
    MoveRq {
        study_uid: String,
        destination: String,
        move_id: String,
    },
    #[serde(rename = "MOVE-RSP")]
    MoveRsp {
        move_id: String,
        delivered: usize,
        failed: usize,
    },
    #[serde(rename = "STORE-RQ")]
    StoreRq {
        move_id: String,
        sop_uid: String,
        /// base64 of the file bytes
        payload: String,
    },
    #[serde(rename = "ACK")]
    Ack,
    #[serde(rename = "ERROR")]
    Error { code: String, message: String },
    #[serde(rename = "CLIN-RQ")]
    ClinRq { query: ClinicalQuery },
    #[serde(rename = "CLIN-RSP")]
    ClinRsp { episodes: Vec<ClinicalEpisode> },
}

impl Message {
    pub fn store(move_id: &str, sop_uid: &str, bytes: &[u8]) -> Self {
        Message::StoreRq {
            move_id: move_id.to_string(),
            sop_uid: sop_uid.to_string(),
            payload: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Message::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

pub fn decode_payload(payload: &str) -> Result<Vec<u8>, ProtocolError> {
    base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean close before the length prefix is `Closed`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(ProtocolError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Message::Ack).unwrap();
        let body = br#"{"type":"ACK"}"#;
        assert_eq!(&buf[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&buf[4..], body);
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), Message::Ack);
    }

    #[test]
    fn oversized_and_malformed_frames() {
        let mut big = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        big.extend_from_slice(b"{}");
        assert!(matches!(read_frame(&mut big.as_slice()), Err(ProtocolError::FrameTooLarge(_))));
        let mut bad = 3u32.to_be_bytes().to_vec();
        bad.extend_from_slice(b"{x}");
        assert!(matches!(read_frame(&mut bad.as_slice()), Err(ProtocolError::Malformed(_))));
        assert!(matches!(read_frame(&mut [].as_slice()), Err(ProtocolError::Closed)));
    }

    #[test]
    fn store_payload_round_trip() {
        let m = Message::store("m1", "1.2", &[0, 1, 2, 255]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &m).unwrap();
        let Message::StoreRq { payload, .. } = read_frame(&mut buf.as_slice()).unwrap() else {
            panic!()
        };
        assert_eq!(decode_payload(&payload).unwrap(), vec![0, 1, 2, 255]);
    }
}
