use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::protocol::{read_frame, write_frame, Message, ProtocolError};
use super::Simulator;

const IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy)]
enum Role {
    Pacs,
    Clinical,
}

/// A listening simulator endpoint. Dropping it stops the accept loop.
pub struct SimServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    destinations: Arc<RwLock<HashMap<String, SocketAddr>>>,
    accept: Option<JoinHandle<()>>,
}

impl SimServer {
    pub fn start_pacs(sim: Arc<Simulator>, bind: impl ToSocketAddrs) -> io::Result<SimServer> {
        Self::start(sim, bind, Role::Pacs)
    }

    pub fn start_clinical(sim: Arc<Simulator>, bind: impl ToSocketAddrs) -> io::Result<SimServer> {
        Self::start(sim, bind, Role::Clinical)
    }

    fn start(sim: Arc<Simulator>, bind: impl ToSocketAddrs, role: Role) -> io::Result<SimServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let destinations = Arc::new(RwLock::new(HashMap::new()));
        let accept = {
            let stop = stop.clone();
            let destinations = destinations.clone();
            thread::Builder::new().name("sim-accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    let sim = sim.clone();
                    let destinations = destinations.clone();
                    let _ = thread::Builder::new().name("sim-conn".into()).spawn(move || {
                        if let Err(e) = serve(conn, &sim, &destinations, role) {
                            tracing::debug!(error = %e, "simulator connection ended");
                        }
                    });
                }
            })?
        };
        Ok(SimServer {
            addr,
            stop,
            destinations,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Pre-registers a move destination (the receiver's application entity title).
    pub fn register_destination(&self, ae_title: &str, addr: SocketAddr) {
        self.destinations
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(ae_title.to_string(), addr);
    }

    pub fn stop(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(
    conn: TcpStream,
    sim: &Simulator,
    destinations: &RwLock<HashMap<String, SocketAddr>>,
    role: Role,
) -> Result<(), ProtocolError> {
    conn.set_read_timeout(Some(IO_TIMEOUT))?;
    conn.set_write_timeout(Some(IO_TIMEOUT))?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut writer = BufWriter::new(conn);
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(ProtocolError::Closed) => return Ok(()),
            Err(ProtocolError::Malformed(m)) => {
                write_frame(&mut writer, &Message::error("ProtocolError", m))?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let reply = match (role, msg) {
            (Role::Pacs, Message::FindRq { query }) => Message::FindRsp {
                studies: sim.find(&query),
            },
            (Role::Pacs, Message::MoveRq {
                study_uid,
                destination,
                move_id,
            }) => handle_move(sim, destinations, &study_uid, &destination, &move_id),
            (Role::Clinical, Message::ClinRq { query }) => Message::ClinRsp {
                episodes: sim.clinical(&query),
            },
            (_, other) => Message::error("ProtocolError", format!("unexpected message {other:?}")),
        };
        write_frame(&mut writer, &reply)?;
    }
}

fn handle_move(
    sim: &Simulator,
    destinations: &RwLock<HashMap<String, SocketAddr>>,
    study_uid: &str,
    destination: &str,
    move_id: &str,
) -> Message {
    let files = match sim.study_files(study_uid) {
        Ok(f) => f,
        Err(e) => return Message::error("UnknownStudy", e.to_string()),
    };
    let Some(addr) = destinations.read().unwrap_or_else(|p| p.into_inner()).get(destination).copied() else {
        return Message::error("UnknownDestination", destination.to_string());
    };
    let limit = sim.faults().truncate_moves_after.unwrap_or(usize::MAX);
    let (mut delivered, mut failed) = (0, 0);
    let mut push = || -> Result<(usize, usize), ProtocolError> {
        let stream = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        let mut r = BufReader::new(stream.try_clone()?);
        let mut w = BufWriter::new(stream);
        for (sop, bytes) in files.iter().take(limit) {
            write_frame(&mut w, &Message::store(move_id, sop, bytes))?;
            match read_frame(&mut r)? {
                Message::Ack => delivered += 1,
                _ => failed += 1,
            }
        }
        Ok((delivered, failed))
    };
    match push() {
        Ok((d, f)) => Message::MoveRsp {
            move_id: move_id.to_string(),
            delivered: d,
            failed: f + files.len().saturating_sub(limit),
        },
        Err(e) => Message::error("DeliveryFailed", e.to_string()),
    }
}
