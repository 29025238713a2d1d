//! Encrypted snapshot plus append-only encrypted event log, guarded by an exclusive file lock.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use aes_gcm::Aes256Gcm;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::crypto::{open, seal};
use super::VaultError;

const SNAPSHOT: &str = "vault.snapshot";
const LOG: &str = "vault.log";
const LOCK: &str = "vault.lock";
/// Log size past which a commit also compacts.
const COMPACT_THRESHOLD: u64 = 8 * 1024 * 1024;

pub(crate) struct DiskStore {
    dir: PathBuf,
    cipher: Aes256Gcm,
    log: File,
    log_len: u64,
    _lock: File,
}

pub(crate) struct Loaded<S, E> {
    pub snapshot: Option<S>,
    pub events: Vec<E>,
    pub truncated_bytes: u64,
}

impl DiskStore {
    pub fn open<S: DeserializeOwned, E: DeserializeOwned>(
        dir: &Path,
        cipher: Aes256Gcm,
    ) -> Result<(Self, Loaded<S, Vec<E>>), VaultError> {
        fs::create_dir_all(dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => {
                return Err(VaultError::Locked(dir.to_path_buf()))
            }
            Err(std::fs::TryLockError::Error(e)) => return Err(e.into()),
        }

        let snapshot = match fs::read(dir.join(SNAPSHOT)) {
            Ok(blob) => {
                let plain = open(&cipher, &blob)?;
                Some(serde_json::from_slice(&plain).map_err(|e| VaultError::Corrupt(e.to_string()))?)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };

        let mut log = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(dir.join(LOG))?;
        let mut raw = Vec::new();
        log.read_to_end(&mut raw)?;
        let mut events = Vec::new();
        let mut pos = 0usize;
        while pos + 4 <= raw.len() {
            let len = u32::from_le_bytes(raw[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            let Some(blob) = raw.get(pos + 4..pos + 4 + len) else {
                break;
            };
            let Ok(plain) = open(&cipher, blob) else {
                break;
            };
            let Ok(batch) = serde_json::from_slice::<Vec<E>>(&plain) else {
                break;
            };
            events.push(batch);
            pos += 4 + len;
        }
        let truncated = (raw.len() - pos) as u64;
        if truncated > 0 {
            tracing::warn!(bytes = truncated, "discarding torn tail of vault log");
            log.set_len(pos as u64)?;
            log.sync_all()?;
        }
        log.seek(SeekFrom::End(0))?;

        Ok((
            DiskStore {
                dir: dir.to_path_buf(),
                cipher,
                log,
                log_len: pos as u64,
                _lock: lock,
            },
            Loaded {
                snapshot,
                events,
                truncated_bytes: truncated,
            },
        ))
    }

    /// Appends one batch durably. Returns true when the log has grown past the compaction threshold.
    pub fn append<E: Serialize>(&mut self, batch: &[E]) -> Result<bool, VaultError> {
        let plain = serde_json::to_vec(batch).map_err(|e| VaultError::Corrupt(e.to_string()))?;
        let blob = seal(&self.cipher, &plain);
        let mut rec = Vec::with_capacity(blob.len() + 4);
        rec.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        rec.extend_from_slice(&blob);
        self.log.write_all(&rec)?;
        self.log.sync_data()?;
        self.log_len += rec.len() as u64;
        Ok(self.log_len > COMPACT_THRESHOLD)
    }

    /// Writes a fresh snapshot, then empties the log.
    pub fn compact<S: Serialize>(&mut self, state: &S) -> Result<(), VaultError> {
        let plain = serde_json::to_vec(state).map_err(|e| VaultError::Corrupt(e.to_string()))?;
        let blob = seal(&self.cipher, &plain);
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&blob)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        self.log.set_len(0)?;
        self.log.seek(SeekFrom::Start(0))?;
        self.log.sync_all()?;
        self.log_len = 0;
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG)
    }
}
