use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use super::protocol::{read_frame, write_frame, ClinicalQuery, FindQuery, Message, ProtocolError, StudyDescriptor};
use super::ClinicalEpisode;

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn open(addr: SocketAddr, timeout: Duration) -> Result<Self, ProtocolError> {
        let s = TcpStream::connect_timeout(&addr, timeout)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(timeout))?;
        s.set_write_timeout(Some(timeout))?;
        Ok(Conn {
            reader: BufReader::new(s.try_clone()?),
            writer: BufWriter::new(s),
        })
    }

    fn call(&mut self, msg: &Message) -> Result<Message, ProtocolError> {
        write_frame(&mut self.writer, msg)?;
        match read_frame(&mut self.reader)? {
            Message::Error { code, message } => Err(ProtocolError::Remote { code, message }),
            m => Ok(m),
        }
    }
}

/// Query/retrieve client for the PACS endpoint.
pub struct PacsClient {
    conn: Conn,
}

impl PacsClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, ProtocolError> {
        Ok(PacsClient {
            conn: Conn::open(addr, timeout)?,
        })
    }

    pub fn find(&mut self, query: &FindQuery) -> Result<Vec<StudyDescriptor>, ProtocolError> {
        match self.conn.call(&Message::FindRq { query: query.clone() })? {
            Message::FindRsp { studies } => Ok(studies),
            other => Err(ProtocolError::Unexpected(format!("{other:?}"))),
        }
    }

    /// Asks the PACS to push a study to `destination`. Returns (delivered, failed).
    pub fn move_study(&mut self, study_uid: &str, destination: &str, move_id: &str) -> Result<(usize, usize), ProtocolError> {
        let rq = Message::MoveRq {
            study_uid: study_uid.to_string(),
            destination: destination.to_string(),
            move_id: move_id.to_string(),
        };
        match self.conn.call(&rq)? {
            Message::MoveRsp { delivered, failed, .. } => Ok((delivered, failed)),
            other => Err(ProtocolError::Unexpected(format!("{other:?}"))),
        }
    }
}

/// Client for the clinical-system endpoint.
pub struct ClinicalClient {
    conn: Conn,
}

impl ClinicalClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, ProtocolError> {
        Ok(ClinicalClient {
            conn: Conn::open(addr, timeout)?,
        })
    }

    pub fn query(&mut self, query: ClinicalQuery) -> Result<Vec<ClinicalEpisode>, ProtocolError> {
        match self.conn.call(&Message::ClinRq { query })? {
            Message::ClinRsp { episodes } => Ok(episodes),
            other => Err(ProtocolError::Unexpected(format!("{other:?}"))),
        }
    }
}
