use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::layout::{safe_name, write_atomic};
use crate::sim::protocol::{decode_payload, read_frame, write_frame, Message, ProtocolError};

/// Storage endpoint the PACS pushes to: each STORE-RQ lands in `<incoming>/<move_id>/<sop>.dcm`.
pub struct DicomReceiver {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl DicomReceiver {
    pub fn start(bind: &str, incoming: PathBuf) -> io::Result<DicomReceiver> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = stop.clone();
            thread::Builder::new().name("dicom-receiver".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    let incoming = incoming.clone();
                    let _ = thread::Builder::new().name("dicom-store".into()).spawn(move || {
                        if let Err(e) = serve(conn, &incoming) {
                            tracing::debug!(error = %e, "receiver connection ended");
                        }
                    });
                }
            })?
        };
        Ok(DicomReceiver {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DicomReceiver {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(conn: TcpStream, incoming: &std::path::Path) -> Result<(), ProtocolError> {
    conn.set_read_timeout(Some(Duration::from_secs(60)))?;
    let mut r = BufReader::new(conn.try_clone()?);
    let mut w = BufWriter::new(conn);
    loop {
        let reply = match read_frame(&mut r) {
            Ok(Message::StoreRq {
                move_id,
                sop_uid,
                payload,
            }) => {
                if !safe_name(&move_id) || !safe_name(&sop_uid) {
                    Message::error("BadName", "move id or SOP UID not usable as a file name")
                } else {
                    let bytes = decode_payload(&payload)?;
                    let path = incoming.join(&move_id).join(format!("{sop_uid}.dcm"));
                    match write_atomic(&path, &bytes) {
                        Ok(()) => Message::Ack,
                        Err(e) => Message::error("StoreFailed", e.to_string()),
                    }
                }
            }
            Ok(other) => Message::error("ProtocolError", format!("unexpected {other:?}")),
            Err(ProtocolError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        write_frame(&mut w, &reply)?;
    }
}
