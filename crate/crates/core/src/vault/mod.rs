//! Site-local pseudonym store: registration, opt-outs, UID remapping and collected-study index.

mod crypto;
mod records;
mod store;
mod uid;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deid::{IdentityProvider, MalformedUid, SubjectContext};
use crate::national_id::{validate_national_id, InvalidReason};

pub use crypto::{
    VaultSecrets, ENV_AES_KEY, ENV_AUDIT_CREDENTIAL, ENV_HASH_SALT, ENV_TRIAL_SALT, ENV_VAULT_KEY,
};
pub use records::{
    CollectedImage, CollectedStudy, OptOutEntry, OptOutSource, PseudonymRecord, Registration,
    StudyStatus, UidMapping, UidScope,
};
pub use uid::{check_uid, DEFAULT_UID_ROOT, MAX_UID_LEN};

use store::DiskStore;

const NID: &str = "national-id";
const LID: &str = "local-id";
const STUDY: &str = "study-uid";

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("invalid national id: {0}")]
    InvalidNationalId(InvalidReason),
    #[error("trial code is required")]
    MissingTrialCode,
    #[error("trial code {0:?} is already used by another client")]
    DuplicateTrialCode(String),
    #[error("client is already registered under a different trial code")]
    AlreadyRegistered,
    #[error("client has opted out")]
    OptedOut,
    #[error(transparent)]
    MalformedUid(#[from] MalformedUid),
    #[error("vault at {0} is held by another process")]
    Locked(PathBuf),
    #[error("vault data is corrupt: {0}")]
    Corrupt(String),
    #[error("audit credential rejected")]
    Forbidden,
    #[error("unknown pseudonym {0:?}")]
    UnknownPseudonym(String),
    #[error("secret {0} is not set")]
    MissingSecret(String),
    #[error("batch row {index}: {source}")]
    BatchRow {
        index: usize,
        #[source]
        source: Box<VaultError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CounterScope {
    /// Counter lives in this vault.
    PerSite,
    /// Counter is shared through a lock-protected file (e.g. on a shared volume).
    Global(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultConfig {
    pub site_prefix: String,
    pub counter_width: usize,
    pub counter_scope: CounterScope,
    pub uid_root: String,
    pub uid_scope: UidScope,
}

impl VaultConfig {
    /// Collection-site vault: pseudonyms like `S01-00000001`, stage-1 UIDs.
    pub fn site(prefix: &str) -> Self {
        VaultConfig {
            site_prefix: prefix.to_string(),
            counter_width: 8,
            counter_scope: CounterScope::PerSite,
            uid_root: DEFAULT_UID_ROOT.to_string(),
            uid_scope: UidScope::Stage1,
        }
    }

    /// Central alias vault used before sharing: pseudonyms like `D-00000001`, stage-2 UIDs.
    pub fn alias(prefix: &str) -> Self {
        VaultConfig {
            uid_scope: UidScope::Stage2,
            ..VaultConfig::site(prefix)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultCascade {
    pub pseudonym: Option<String>,
    pub vault_rows_removed: usize,
    pub uid_mappings_removed: usize,
    pub studies: Vec<CollectedStudy>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Event {
    Registered(PseudonymRecord),
    LocalIdLinked { pseudonym: String, local_id_hash: String },
    UidMapped(UidMapping),
    OptedOut(OptOutEntry),
    StudyRecorded(CollectedStudy),
    StudyRemoved { key: String },
    SubjectRemoved { pseudonym: String },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct State {
    next_counter: u64,
    records: BTreeMap<String, PseudonymRecord>,
    uid_maps: BTreeMap<String, UidMapping>,
    opt_outs: BTreeMap<String, OptOutEntry>,
    studies: BTreeMap<String, CollectedStudy>,
}

#[derive(Default)]
struct Index {
    by_nid: HashMap<String, String>,
    by_lid: HashMap<String, String>,
    by_trial: HashMap<String, String>,
    replacements: HashSet<String>,
}

struct Inner {
    state: State,
    index: Index,
    pending: Vec<Event>,
    disk: Option<DiskStore>,
}

pub struct Vault {
    config: VaultConfig,
    secrets: VaultSecrets,
    inner: Mutex<Inner>,
}

impl State {
    fn apply(&mut self, ev: &Event) {
        match ev {
            Event::Registered(r) => {
                self.next_counter = self.next_counter.max(r.counter + 1);
                self.records.insert(r.pseudonym.clone(), r.clone());
            }
            Event::LocalIdLinked {
                pseudonym,
                local_id_hash,
            } => {
                if let Some(r) = self.records.get_mut(pseudonym) {
                    r.local_id_hash = hex::decode(local_id_hash).ok();
                }
            }
            Event::UidMapped(m) => {
                self.uid_maps.insert(key_of(m.scope, &m.original_uid_hash), m.clone());
            }
            Event::OptedOut(e) => {
                let h = hex::encode(&e.national_id_hash);
                for r in self.records.values_mut() {
                    if r.national_id_hash == e.national_id_hash {
                        r.opted_out = true;
                    }
                }
                self.opt_outs.entry(h).or_insert_with(|| e.clone());
            }
            Event::StudyRecorded(s) => {
                self.studies.insert(s.key.clone(), s.clone());
            }
            Event::StudyRemoved { key } => {
                self.studies.remove(key);
            }
            Event::SubjectRemoved { pseudonym } => {
                self.records.remove(pseudonym);
                self.uid_maps.retain(|_, m| &m.owner != pseudonym);
                self.studies.retain(|_, s| &s.pseudonym != pseudonym);
            }
        }
    }

    fn index(&self) -> Index {
        let mut ix = Index::default();
        for r in self.records.values() {
            ix.by_nid.insert(hex::encode(&r.national_id_hash), r.pseudonym.clone());
            if let Some(l) = &r.local_id_hash {
                ix.by_lid.insert(hex::encode(l), r.pseudonym.clone());
            }
            ix.by_trial.insert(r.trial_code.clone(), r.pseudonym.clone());
        }
        ix.replacements = self.uid_maps.values().map(|m| m.replacement_uid.clone()).collect();
        ix
    }
}

fn key_of(scope: UidScope, hash: &[u8]) -> String {
    format!("{}:{}", scope.digit(), hex::encode(hash))
}

impl Inner {
    fn record(&mut self, ev: Event) {
        self.state.apply(&ev);
        self.pending.push(ev);
    }

    fn commit(&mut self) -> Result<(), VaultError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        if let Some(disk) = self.disk.as_mut() {
            if disk.append(&self.pending)? {
                disk.compact(&self.state)?;
            }
        }
        self.pending.clear();
        Ok(())
    }

    fn reindex(&mut self) {
        self.index = self.state.index();
    }
}

impl Vault {
    /// Non-persistent vault.
    pub fn in_memory(config: VaultConfig, secrets: VaultSecrets) -> Self {
        Vault {
            config,
            secrets,
            inner: Mutex::new(Inner {
                state: State::default(),
                index: Index::default(),
                pending: Vec::new(),
                disk: None,
            }),
        }
    }

    /// Opens (or creates) the vault in `dir`, taking an exclusive lock for the lifetime of the value.
    pub fn open(dir: &Path, config: VaultConfig, secrets: VaultSecrets) -> Result<Self, VaultError> {
        let (disk, loaded) = DiskStore::open::<State, Event>(dir, secrets.store_cipher())?;
        let mut state = loaded.snapshot.unwrap_or_default();
        for batch in &loaded.events {
            for ev in batch {
                state.apply(ev);
            }
        }
        let index = state.index();
        tracing::debug!(
            records = state.records.len(),
            batches = loaded.events.len(),
            torn_bytes = loaded.truncated_bytes,
            log = %disk.log_path().display(),
            "vault opened"
        );
        Ok(Vault {
            config,
            secrets,
            inner: Mutex::new(Inner {
                state,
                index,
                pending: Vec::new(),
                disk: Some(disk),
            }),
        })
    }

    pub fn config(&self) -> &VaultConfig {
        &self.config
    }

    pub fn secrets(&self) -> &VaultSecrets {
        &self.secrets
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Flushes pending mutations (UID mappings recorded during de-identification).
    pub fn commit(&self) -> Result<(), VaultError> {
        self.lock().commit()
    }

    /// Rewrites the snapshot and empties the log, so removed rows no longer exist on disk.
    pub fn compact(&self) -> Result<(), VaultError> {
        let mut inner = self.lock();
        inner.commit()?;
        let Inner { state, disk, .. } = &mut *inner;
        if let Some(disk) = disk.as_mut() {
            disk.compact(state)?;
        }
        Ok(())
    }

    pub fn national_id_hash(&self, national_id: &str) -> Vec<u8> {
        self.secrets.hash_id(NID, national_id)
    }

    pub fn local_id_hash(&self, local_id: &str) -> Vec<u8> {
        self.secrets.hash_id(LID, local_id)
    }

    /// Keyed hash of an original Study Instance UID, used as the collected-study key.
    pub fn study_key(&self, original_study_uid: &str) -> String {
        hex::encode(self.secrets.hash_id(STUDY, original_study_uid))
    }

    /// Short keyed token for any internal identifier (e.g. clinical episode ids).
    pub fn token(&self, domain: &str, value: &str) -> String {
        hex::encode(&self.secrets.hash_id(domain, value)[..12])
    }

    fn date_offset(&self, national_id_hash: &[u8]) -> i64 {
        let d = self.secrets.prf("date-offset", national_id_hash);
        let x = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
        -((x % 364) as i64) - 1
    }

    fn next_counter(&self, inner: &Inner) -> Result<u64, VaultError> {
        match &self.config.counter_scope {
            CounterScope::PerSite => Ok(inner.state.next_counter.max(1)),
            CounterScope::Global(path) => {
                let mut f = OpenOptions::new()
                    .create(true)
                    .truncate(false)
                    .read(true)
                    .write(true)
                    .open(path)?;
                f.lock()?;
                let mut s = String::new();
                f.read_to_string(&mut s)?;
                let shared: u64 = s.trim().parse().unwrap_or(1).max(1);
                let n = shared.max(inner.state.next_counter.max(1));
                f.set_len(0)?;
                f.seek(SeekFrom::Start(0))?;
                write!(f, "{}", n + 1)?;
                f.sync_all()?;
                Ok(n)
            }
        }
    }

    fn check_registration(
        &self,
        inner: &Inner,
        reg: &Registration,
        batch_trials: &HashSet<String>,
        batch_nids: &HashSet<String>,
    ) -> Result<Option<PseudonymRecord>, VaultError> {
        validate_national_id(&reg.national_id).map_err(VaultError::InvalidNationalId)?;
        let trial = reg.trial_code.trim();
        if trial.is_empty() {
            return Err(VaultError::MissingTrialCode);
        }
        let nid_hash = hex::encode(self.national_id_hash(&reg.national_id));
        if inner.state.opt_outs.contains_key(&nid_hash) {
            return Err(VaultError::OptedOut);
        }
        if let Some(p) = inner.index.by_nid.get(&nid_hash) {
            let existing = &inner.state.records[p];
            return if existing.trial_code == trial {
                Ok(Some(existing.clone()))
            } else {
                Err(VaultError::AlreadyRegistered)
            };
        }
        if batch_nids.contains(&nid_hash) {
            return Err(VaultError::AlreadyRegistered);
        }
        if inner.index.by_trial.contains_key(trial) || batch_trials.contains(trial) {
            return Err(VaultError::DuplicateTrialCode(trial.to_string()));
        }
        Ok(None)
    }

    fn insert_registration(&self, inner: &mut Inner, reg: &Registration) -> Result<PseudonymRecord, VaultError> {
        let counter = self.next_counter(inner)?;
        let nid_hash = self.national_id_hash(&reg.national_id);
        let record = PseudonymRecord {
            pseudonym: format!(
                "{}-{:0width$}",
                self.config.site_prefix,
                counter,
                width = self.config.counter_width
            ),
            counter,
            encrypted_national_id: self.secrets.encrypt_national_id(&reg.national_id),
            date_offset_days: self.date_offset(&nid_hash),
            national_id_hash: nid_hash,
            local_id_hash: reg.local_id.as_deref().map(|l| self.local_id_hash(l)),
            created_at: Utc::now(),
            trial_code: reg.trial_code.trim().to_string(),
            opted_out: false,
            date_enrolled: reg.date_enrolled,
        };
        inner.record(Event::Registered(record.clone()));
        Ok(record)
    }

    /// Registers one client. Re-registering the same national id with the same trial code
    /// returns the existing record.
    pub fn register_client(&self, reg: &Registration) -> Result<PseudonymRecord, VaultError> {
        let mut inner = self.lock();
        if let Some(existing) = self.check_registration(&inner, reg, &HashSet::new(), &HashSet::new())? {
            if let (None, Some(l)) = (&existing.local_id_hash, &reg.local_id) {
                inner.record(Event::LocalIdLinked {
                    pseudonym: existing.pseudonym.clone(),
                    local_id_hash: hex::encode(self.local_id_hash(l)),
                });
                inner.reindex();
                inner.commit()?;
                return Ok(inner.state.records[&existing.pseudonym].clone());
            }
            return Ok(existing);
        }
        let record = self.insert_registration(&mut inner, reg)?;
        inner.reindex();
        inner.commit()?;
        Ok(record)
    }

    /// All-or-nothing registration of many clients. On error nothing is written and the
    /// error of every failing row is returned, in row order.
    pub fn register_batch(&self, regs: &[Registration]) -> Result<Vec<PseudonymRecord>, Vec<(usize, VaultError)>> {
        let mut inner = self.lock();
        let mut errors = Vec::new();
        let mut trials = HashSet::new();
        let mut nids = HashSet::new();
        for (i, reg) in regs.iter().enumerate() {
            match self.check_registration(&inner, reg, &trials, &nids) {
                Ok(Some(_)) => {}
                Ok(None) => {
                    trials.insert(reg.trial_code.trim().to_string());
                    nids.insert(hex::encode(self.national_id_hash(&reg.national_id)));
                }
                Err(e) => errors.push((i, e)),
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let mut out = Vec::with_capacity(regs.len());
        for reg in regs {
            let nid_hash = hex::encode(self.national_id_hash(&reg.national_id));
            if let Some(p) = inner.index.by_nid.get(&nid_hash).cloned() {
                out.push(inner.state.records[&p].clone());
                continue;
            }
            match self.insert_registration(&mut inner, reg) {
                Ok(r) => {
                    inner.index.by_nid.insert(nid_hash, r.pseudonym.clone());
                    out.push(r);
                }
                Err(e) => return Err(vec![(out.len(), e)]),
            }
        }
        inner.reindex();
        if let Err(e) = inner.commit() {
            return Err(vec![(0, e)]);
        }
        Ok(out)
    }

    /// Attaches a local (hospital) id to an existing record.
    pub fn link_local_id(&self, pseudonym: &str, local_id: &str) -> Result<(), VaultError> {
        let mut inner = self.lock();
        let rec = inner
            .state
            .records
            .get(pseudonym)
            .ok_or_else(|| VaultError::UnknownPseudonym(pseudonym.to_string()))?;
        let h = self.local_id_hash(local_id);
        if rec.local_id_hash.as_deref() == Some(h.as_slice()) {
            return Ok(());
        }
        inner.record(Event::LocalIdLinked {
            pseudonym: pseudonym.to_string(),
            local_id_hash: hex::encode(h),
        });
        inner.reindex();
        inner.commit()
    }

    /// Stage-2 alias for a stage-1 pseudonym, created on first use.
    pub fn ensure_alias(&self, subject_key: &str) -> Result<PseudonymRecord, VaultError> {
        let mut inner = self.lock();
        let nid_hash = self.national_id_hash(subject_key);
        if let Some(p) = inner.index.by_nid.get(&hex::encode(&nid_hash)) {
            return Ok(inner.state.records[p].clone());
        }
        let counter = self.next_counter(&inner)?;
        let pseudonym = format!(
            "{}-{:0width$}",
            self.config.site_prefix,
            counter,
            width = self.config.counter_width
        );
        let record = PseudonymRecord {
            trial_code: format!("alias-{pseudonym}"),
            pseudonym,
            counter,
            encrypted_national_id: Vec::new(),
            date_offset_days: 0,
            national_id_hash: nid_hash,
            local_id_hash: Some(self.local_id_hash(subject_key)),
            created_at: Utc::now(),
            opted_out: false,
            date_enrolled: None,
        };
        inner.record(Event::Registered(record.clone()));
        inner.reindex();
        inner.commit()?;
        Ok(record)
    }

    pub fn alias_of(&self, subject_key: &str) -> Option<PseudonymRecord> {
        let inner = self.lock();
        let h = hex::encode(self.national_id_hash(subject_key));
        inner.index.by_nid.get(&h).map(|p| inner.state.records[p].clone())
    }

    pub fn record(&self, pseudonym: &str) -> Option<PseudonymRecord> {
        self.lock().state.records.get(pseudonym).cloned()
    }

    pub fn record_by_national_id(&self, national_id: &str) -> Option<PseudonymRecord> {
        let inner = self.lock();
        let h = hex::encode(self.national_id_hash(national_id));
        inner.index.by_nid.get(&h).map(|p| inner.state.records[p].clone())
    }

    pub fn record_by_local_id(&self, local_id: &str) -> Option<PseudonymRecord> {
        let inner = self.lock();
        let h = hex::encode(self.local_id_hash(local_id));
        inner.index.by_lid.get(&h).map(|p| inner.state.records[p].clone())
    }

    pub fn records(&self) -> Vec<PseudonymRecord> {
        self.lock().state.records.values().cloned().collect()
    }

    pub fn record_count(&self) -> usize {
        self.lock().state.records.len()
    }

    /// Decrypts a stored national id. Requires the separate audit credential.
    pub fn audit_decrypt(&self, credential: &str, pseudonym: &str) -> Result<String, VaultError> {
        if !self.secrets.check_audit(credential) {
            return Err(VaultError::Forbidden);
        }
        let rec = self
            .record(pseudonym)
            .ok_or_else(|| VaultError::UnknownPseudonym(pseudonym.to_string()))?;
        self.secrets.decrypt_national_id(&rec.encrypted_national_id)
    }

    pub fn record_opt_out(&self, national_id: &str, source: OptOutSource) -> Result<OptOutEntry, VaultError> {
        validate_national_id(national_id).map_err(VaultError::InvalidNationalId)?;
        let mut inner = self.lock();
        let h = self.national_id_hash(national_id);
        if let Some(e) = inner.state.opt_outs.get(&hex::encode(&h)) {
            return Ok(e.clone());
        }
        let entry = OptOutEntry {
            national_id_hash: h,
            source,
            recorded_at: Utc::now(),
        };
        inner.record(Event::OptedOut(entry.clone()));
        inner.commit()?;
        Ok(entry)
    }

    pub fn is_opted_out(&self, national_id: &str) -> bool {
        let h = hex::encode(self.national_id_hash(national_id));
        self.lock().state.opt_outs.contains_key(&h)
    }

    pub fn opt_out_count(&self) -> usize {
        self.lock().state.opt_outs.len()
    }

    /// Ingests a newline-delimited national opt-out list. Invalid lines are skipped and counted.
    pub fn ingest_opt_out_list(&self, text: &str) -> Result<(usize, usize), VaultError> {
        let (mut added, mut skipped) = (0, 0);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            match self.record_opt_out(line, OptOutSource::NationalList) {
                Ok(_) => added += 1,
                Err(VaultError::InvalidNationalId(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((added, skipped))
    }

    /// Removes the client's record, UID mappings and collected-study rows, then compacts so
    /// nothing of it survives in the store files. Unknown ids report zeros.
    pub fn remove_subject_by_national_id(&self, national_id: &str) -> Result<VaultCascade, VaultError> {
        let pseudonym = self.record_by_national_id(national_id).map(|r| r.pseudonym);
        match pseudonym {
            Some(p) => self.remove_subject(&p),
            None => Ok(VaultCascade::default()),
        }
    }

    pub fn remove_subject(&self, pseudonym: &str) -> Result<VaultCascade, VaultError> {
        let mut inner = self.lock();
        if !inner.state.records.contains_key(pseudonym) {
            return Ok(VaultCascade::default());
        }
        let mappings = inner.state.uid_maps.values().filter(|m| m.owner == pseudonym).count();
        let studies: Vec<CollectedStudy> = inner
            .state
            .studies
            .values()
            .filter(|s| s.pseudonym == pseudonym)
            .cloned()
            .collect();
        inner.record(Event::SubjectRemoved {
            pseudonym: pseudonym.to_string(),
        });
        inner.reindex();
        inner.commit()?;
        let Inner { state, disk, .. } = &mut *inner;
        if let Some(disk) = disk.as_mut() {
            disk.compact(state)?;
        }
        Ok(VaultCascade {
            pseudonym: Some(pseudonym.to_string()),
            vault_rows_removed: 1 + mappings + studies.len(),
            uid_mappings_removed: mappings,
            studies,
        })
    }

    /// Stable replacement UID for `original` in this vault's scope.
    pub fn remap(&self, original: &str, owner: &str) -> Result<String, MalformedUid> {
        check_uid(original)?;
        let scope = self.config.uid_scope;
        let hash = self.secrets.hash_id("uid", original);
        let key = key_of(scope, &hash);
        let mut inner = self.lock();
        if let Some(m) = inner.state.uid_maps.get(&key) {
            return Ok(m.replacement_uid.clone());
        }
        let mut salt = 0u32;
        let replacement = loop {
            let mut data = hash.clone();
            data.push(scope.digit());
            data.extend_from_slice(&salt.to_be_bytes());
            let digest = self.secrets.prf("uid-remap", &data);
            let candidate = uid::build_uid(&self.config.uid_root, scope.digit(), &digest);
            if candidate != original && !inner.index.replacements.contains(&candidate) {
                break candidate;
            }
            salt += 1;
        };
        inner.index.replacements.insert(replacement.clone());
        inner.record(Event::UidMapped(UidMapping {
            original_uid_hash: hash,
            original_uid: original.to_string(),
            replacement_uid: replacement.clone(),
            scope,
            owner: owner.to_string(),
        }));
        Ok(replacement)
    }

    /// Reverse lookup; stays inside the vault.
    pub fn original_uid(&self, replacement: &str) -> Option<String> {
        self.lock()
            .state
            .uid_maps
            .values()
            .find(|m| m.replacement_uid == replacement)
            .map(|m| m.original_uid.clone())
    }

    pub fn uid_mappings_for(&self, owner: &str) -> Vec<UidMapping> {
        self.lock()
            .state
            .uid_maps
            .values()
            .filter(|m| m.owner == owner)
            .cloned()
            .collect()
    }

    pub fn uid_mapping_count(&self) -> usize {
        self.lock().state.uid_maps.len()
    }

    pub fn record_study(&self, study: CollectedStudy) -> Result<(), VaultError> {
        let mut inner = self.lock();
        inner.record(Event::StudyRecorded(study));
        inner.commit()
    }

    pub fn remove_study(&self, key: &str) -> Result<(), VaultError> {
        let mut inner = self.lock();
        inner.record(Event::StudyRemoved { key: key.to_string() });
        inner.commit()
    }

    pub fn study(&self, key: &str) -> Option<CollectedStudy> {
        self.lock().state.studies.get(key).cloned()
    }

    pub fn studies(&self) -> Vec<CollectedStudy> {
        self.lock().state.studies.values().cloned().collect()
    }

    pub fn studies_for(&self, pseudonym: &str) -> Vec<CollectedStudy> {
        self.lock()
            .state
            .studies
            .values()
            .filter(|s| s.pseudonym == pseudonym)
            .cloned()
            .collect()
    }

    pub fn set_study_status(&self, key: &str, status: StudyStatus) -> Result<(), VaultError> {
        let mut inner = self.lock();
        let Some(mut s) = inner.state.studies.get(key).cloned() else {
            return Ok(());
        };
        if s.status == status {
            return Ok(());
        }
        s.status = status;
        inner.record(Event::StudyRecorded(s));
        inner.commit()
    }
}

impl IdentityProvider for Vault {
    fn subject_for(&self, patient_id: &str) -> Option<SubjectContext> {
        self.record_by_local_id(patient_id)
            .filter(|r| !r.opted_out)
            .map(|r| SubjectContext {
                pseudonym: r.pseudonym,
                date_offset_days: r.date_offset_days,
            })
    }

    fn remap_uid(&self, original: &str, owner: &str) -> Result<String, MalformedUid> {
        self.remap(original, owner)
    }
}
