//! Site-side collection: select cases from the clinical system, pull studies from PACS,
//! de-identify, stage, and push to the central endpoint.

mod config;
mod fault;
mod import;
pub mod layout;
mod receiver;
pub mod record;
mod transfer;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deid::{self, mask_burn_in, offset_date_value, parse_policy_table, Policy, PolicyError, Stage};
use crate::dicom::{parse_dataset, serialize_file, tags, DataSet, Vr};
use crate::sim::{ClinicalClient, ClinicalEpisode, ClinicalQuery, FindQuery, Outcome, PacsClient, ProtocolError};
use crate::vault::{
    CollectedImage, CollectedStudy, OptOutSource, PseudonymRecord, Registration, StudyStatus, Vault, VaultConfig,
    VaultError, VaultSecrets,
};

pub use config::{CollectorConfig, SelectionCriteria, WindowGate, DEFAULT_RECEIVER_AE};
pub use fault::{FaultPlan, FaultPoint};
pub use import::{RejectKind, Rejection};
pub use layout::SiteLayout;
pub use receiver::DicomReceiver;
pub use record::{ClinicalRecord, Demographics, EpisodeRecord};
pub use transfer::TransferReport;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("another collection job is running")]
    CycleInProgress,
    #[error("outside the configured collection window")]
    OutsideWindow,
    #[error("cannot reach {0}")]
    PacsUnreachable(String),
    #[error("endpoint {0} is unavailable")]
    EndpointUnavailable(PathBuf),
    #[error("injected fault at {0:?}")]
    InjectedFault(FaultPoint),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub identified: usize,
    pub excluded_opt_out: usize,
    pub retrieved: usize,
    pub deidentified: usize,
    pub staged: usize,
    pub quarantined: usize,
    pub images_staged: usize,
    pub skipped_existing: usize,
    /// Studies whose retrieval came back short; retried next cycle.
    pub retrieval_incomplete: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub episodes_updated: usize,
    pub revisions_applied: usize,
    pub new_studies_linked: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub pseudonym: Option<String>,
    pub vault_rows_removed: usize,
    pub staged_studies_removed: usize,
    pub published_studies_removed: usize,
    /// The endpoint was down; deletion is queued for the next transfer.
    pub endpoint_pending: bool,
}

/// Persistent bookkeeping kept in `state/collector.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectorState {
    pub last_cycle_at: Option<DateTime<Utc>>,
    pub last_cycle: Option<CycleReport>,
    pub case_watermark: Option<DateTime<Utc>>,
    pub last_refresh_at: Option<DateTime<Utc>>,
    pub last_transfer_at: Option<DateTime<Utc>>,
    pub last_transfer: Option<TransferReport>,
    #[serde(default)]
    pub pending_deletions: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteStatus {
    pub clients: usize,
    pub opt_outs: usize,
    pub studies_staged: usize,
    pub studies_transferred: usize,
    pub studies_quarantined: usize,
    pub last_cycle_at: Option<DateTime<Utc>>,
    pub last_transfer_at: Option<DateTime<Utc>>,
}

/// Files of one study, as retrieved or imported.
struct StudyInput<'a> {
    original_study_uid: &'a str,
    local_id: &'a str,
    files: Vec<(String, Vec<u8>)>,
    episode: Option<&'a ClinicalEpisode>,
}

pub struct Collector {
    config: CollectorConfig,
    layout: SiteLayout,
    vault: Arc<Vault>,
    policy: Policy,
    faults: FaultPlan,
    busy: Mutex<()>,
    receiver: Mutex<Option<DicomReceiver>>,
}

impl Collector {
    /// Opens (or creates) the site directory and its vault.
    pub fn open(config: CollectorConfig, secrets: VaultSecrets) -> Result<Self, CollectorError> {
        let layout = SiteLayout::new(&config.site_dir);
        layout.create()?;
        let vault = Vault::open(&layout.vault(), VaultConfig::site(&config.site_prefix), secrets)?;
        Self::with_vault(config, Arc::new(vault))
    }

    pub fn with_vault(config: CollectorConfig, vault: Arc<Vault>) -> Result<Self, CollectorError> {
        let layout = SiteLayout::new(&config.site_dir);
        layout.create()?;
        let policy = match &config.policy_overlay {
            Some(path) => Policy::builtin().with_overlay(parse_policy_table(&fs::read_to_string(path)?)?)?,
            None => Policy::builtin(),
        };
        Ok(Collector {
            config,
            layout,
            vault,
            policy,
            faults: FaultPlan::default(),
            busy: Mutex::new(()),
            receiver: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.config
    }

    pub fn layout(&self) -> &SiteLayout {
        &self.layout
    }

    pub fn vault(&self) -> &Arc<Vault> {
        &self.vault
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn faults(&self) -> &FaultPlan {
        &self.faults
    }

    fn fault(&self, point: FaultPoint) -> Result<(), CollectorError> {
        if self.faults.take(point) {
            tracing::warn!(?point, "injected fault");
            return Err(CollectorError::InjectedFault(point));
        }
        Ok(())
    }

    fn try_busy(&self) -> Result<MutexGuard<'_, ()>, CollectorError> {
        match self.busy.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(CollectorError::CycleInProgress),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.config.io_timeout_secs.max(1))
    }

    /// Starts the storage receiver if it is not running and returns its address.
    pub fn start_receiver(&self) -> io::Result<std::net::SocketAddr> {
        let mut slot = self.receiver.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(r) = slot.as_ref() {
            return Ok(r.addr());
        }
        let r = DicomReceiver::start(&self.config.receiver_bind, self.layout.incoming())?;
        let addr = r.addr();
        *slot = Some(r);
        Ok(addr)
    }

    pub fn load_state(&self) -> Result<CollectorState, CollectorError> {
        match fs::read(self.layout.state().join("collector.json")) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CollectorState::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn save_state(&self, state: &CollectorState) -> Result<(), CollectorError> {
        layout::write_atomic(
            &self.layout.state().join("collector.json"),
            &serde_json::to_vec_pretty(state)?,
        )?;
        Ok(())
    }

    fn update_state(&self, f: impl FnOnce(&mut CollectorState)) -> Result<(), CollectorError> {
        let mut s = self.load_state()?;
        f(&mut s);
        self.save_state(&s)
    }

    pub fn status(&self) -> Result<SiteStatus, CollectorError> {
        let state = self.load_state()?;
        let studies = self.vault.studies();
        let count = |st| studies.iter().filter(|s| s.status == st).count();
        Ok(SiteStatus {
            clients: self.vault.record_count(),
            opt_outs: self.vault.opt_out_count(),
            studies_staged: count(StudyStatus::Staged),
            studies_transferred: count(StudyStatus::Transferred),
            studies_quarantined: count(StudyStatus::Quarantined),
            last_cycle_at: state.last_cycle_at,
            last_transfer_at: state.last_transfer_at,
        })
    }

    /// Clears leftovers of an interrupted run: partial retrievals and temp staging dirs.
    fn recover(&self) -> Result<(), CollectorError> {
        for d in layout::subdirs(&self.layout.incoming())? {
            fs::remove_dir_all(d)?;
        }
        let swept = layout::sweep_temp(&self.layout.staging())?;
        if swept > 0 {
            tracing::info!(swept, "removed temp files from an interrupted run");
        }
        Ok(())
    }

    /// Keyed-hash sampling of normal cases, stable across runs.
    fn sampled(&self, local_id: &str, rate: f64) -> bool {
        if rate >= 1.0 {
            return true;
        }
        if rate <= 0.0 {
            return false;
        }
        let t = self.vault.token("normals-sample", local_id);
        let x = u64::from_str_radix(&t[..16], 16).unwrap_or(u64::MAX);
        (x as f64 / u64::MAX as f64) < rate
    }

    fn selected(&self, ep: &ClinicalEpisode, criteria: &SelectionCriteria) -> bool {
        if ep.outcome == Outcome::Normal && !criteria.include_outcomes.contains(&Outcome::Normal) {
            return self.sampled(&ep.local_id, criteria.normals_sample_rate);
        }
        criteria.include_outcomes.contains(&ep.outcome)
    }

    /// Registers the client if needed and makes sure the local id is linked.
    fn ensure_registered(&self, national_id: &str, local_id: &str) -> Result<PseudonymRecord, VaultError> {
        if let Some(r) = self.vault.record_by_national_id(national_id) {
            if !local_id.is_empty() {
                self.vault.link_local_id(&r.pseudonym, local_id)?;
            }
            return Ok(r);
        }
        let trial = format!(
            "{}-{}",
            self.config.auto_trial_prefix,
            &self.vault.token("auto-trial", national_id)[..12]
        );
        self.vault.register_client(&Registration::new(national_id, local_id, &trial))
    }

    /// One collection cycle: new clinical cases since the watermark, filtered by `criteria`.
    pub fn run_collection_cycle(&self, criteria: &SelectionCriteria) -> Result<CycleReport, CollectorError> {
        let _busy = self.try_busy()?;
        if let Some(w) = self.config.window {
            if !criteria.ignore_window && !w.is_open(Utc::now()) {
                return Err(CollectorError::OutsideWindow);
            }
        }
        self.recover()?;
        let state = self.load_state()?;
        let since = criteria
            .since
            .or(state.case_watermark)
            .unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
        let mut clinical = ClinicalClient::connect(self.config.clinical_addr, self.timeout())
            .map_err(|e| CollectorError::PacsUnreachable(format!("clinical system: {e}")))?;
        let mut episodes = clinical.query(ClinicalQuery::NewCasesSince { since })?;
        episodes.sort_by(|a, b| (a.created_at, &a.episode_id).cmp(&(b.created_at, &b.episode_id)));
        self.start_receiver()?;
        let mut pacs = PacsClient::connect(self.config.pacs_addr, self.timeout())
            .map_err(|e| CollectorError::PacsUnreachable(format!("PACS: {e}")))?;

        let mut report = CycleReport::default();
        let mut watermark = state.case_watermark;
        let mut held_back: Option<DateTime<Utc>> = None;
        tracing::info!(cases = episodes.len(), %since, "collection cycle");
        for ep in &episodes {
            if !self.selected(ep, criteria) {
                watermark = watermark.max(Some(ep.created_at));
                continue;
            }
            report.identified += 1;
            let complete = self.collect_case(ep, &criteria.modalities, &mut pacs, &mut report)?;
            if complete {
                watermark = watermark.max(Some(ep.created_at));
            } else {
                held_back = Some(held_back.map_or(ep.created_at, |h| h.min(ep.created_at)));
            }
        }
        // Never move past a case that still needs retrying.
        if let Some(h) = held_back {
            let cap = h - chrono::Duration::nanoseconds(1);
            watermark = Some(watermark.map_or(cap, |w| w.min(cap)));
        }
        self.update_state(|s| {
            s.last_cycle_at = Some(Utc::now());
            s.last_cycle = Some(report.clone());
            s.case_watermark = watermark;
        })?;
        tracing::info!(?report, "cycle finished");
        Ok(report)
    }

    /// Collects every matching study of one case. Returns false when something should be retried.
    fn collect_case(
        &self,
        ep: &ClinicalEpisode,
        modalities: &BTreeSet<String>,
        pacs: &mut PacsClient,
        report: &mut CycleReport,
    ) -> Result<bool, CollectorError> {
        if self.vault.is_opted_out(&ep.national_id) {
            report.excluded_opt_out += 1;
            return Ok(true);
        }
        let record = match self.ensure_registered(&ep.national_id, &ep.local_id) {
            Ok(r) => r,
            Err(e @ (VaultError::InvalidNationalId(_) | VaultError::DuplicateTrialCode(_) | VaultError::AlreadyRegistered)) => {
                report.rejected.push(Rejection {
                    file: ep.episode_id.clone(),
                    kind: RejectKind::Registration,
                    detail: e.to_string(),
                });
                return Ok(true);
            }
            Err(e) => return Err(e.into()),
        };
        self.fault(FaultPoint::AfterRegister)?;

        let found = pacs.find(&FindQuery {
            local_id: Some(ep.local_id.clone()),
            date_from: Some(ep.study_date.clone()),
            date_to: Some(ep.study_date.clone()),
            modality: None,
        })?;
        let mut complete = true;
        for d in found {
            if !modalities.is_empty() && !modalities.iter().any(|m| m.eq_ignore_ascii_case(&d.modality)) {
                continue;
            }
            let key = self.vault.study_key(&d.study_uid);
            if self.vault.study(&key).is_some() {
                report.skipped_existing += 1;
                continue;
            }
            let move_id = key[..24].to_string();
            let dir = self.layout.incoming().join(&move_id);
            layout::remove_dir_if_exists(&dir)?;
            let (delivered, failed) = pacs.move_study(&d.study_uid, &self.config.receiver_ae, &move_id)?;
            let files = read_incoming(&dir)?;
            if failed > 0 || delivered < d.n_images || files.len() < d.n_images {
                tracing::warn!(study = %key, delivered, failed, expected = d.n_images, "incomplete retrieval");
                layout::remove_dir_if_exists(&dir)?;
                report.retrieval_incomplete += 1;
                complete = false;
                continue;
            }
            report.retrieved += 1;
            self.fault(FaultPoint::AfterRetrieve)?;
            let input = StudyInput {
                original_study_uid: &d.study_uid,
                local_id: &ep.local_id,
                files,
                episode: Some(ep),
            };
            self.process_study(&record, input, report)?;
            layout::remove_dir_if_exists(&dir)?;
        }
        Ok(complete)
    }

    /// De-identifies, masks and stages one study, or quarantines it.
    fn process_study(
        &self,
        record: &PseudonymRecord,
        input: StudyInput<'_>,
        report: &mut CycleReport,
    ) -> Result<(), CollectorError> {
        let key = self.vault.study_key(input.original_study_uid);
        let mut images = Vec::with_capacity(input.files.len());
        let mut staged_files = Vec::with_capacity(input.files.len());
        let mut problem: Option<String> = None;
        for (name, bytes) in &input.files {
            match self.deidentify_one(bytes, input.local_id) {
                Ok((img, out)) => {
                    images.push(img);
                    staged_files.push(out);
                }
                Err(reason) => {
                    problem = Some(format!("{name}: {reason}"));
                    break;
                }
            }
        }
        if let Some(reason) = problem {
            self.quarantine(record, &key, &input, &reason)?;
            report.quarantined += 1;
            return Ok(());
        }
        report.deidentified += 1;
        self.fault(FaultPoint::AfterDeid)?;

        let first = &staged_files[0].0;
        let study_uid = first.text(tags::STUDY_INSTANCE_UID).unwrap_or_default().to_string();
        let study_date = first.text(tags::STUDY_DATE).unwrap_or_default().to_string();
        let modality = first.text(tags::MODALITY).unwrap_or_default().to_string();
        self.stage(&record.pseudonym, &study_uid, &staged_files)?;

        let ep = input.episode;
        let study = CollectedStudy {
            key: key.clone(),
            pseudonym: record.pseudonym.clone(),
            study_uid,
            study_date,
            modality,
            status: StudyStatus::Staged,
            images,
            episode_token: ep.map(|e| self.vault.token("episode", &e.episode_id)),
            outcome: ep.map(|e| e.outcome.as_str().to_string()),
            collected_at: Utc::now(),
            quarantine_reason: None,
            episode_id: ep.map(|e| e.episode_id.clone()),
            outcome_date: ep.map(|e| offset_date_value(&e.outcome_date, record.date_offset_days)),
            revised_from: ep.and_then(|e| e.revised_from.map(|o| o.as_str().to_string())),
            year_of_birth: ep.map(|e| e.birth_year),
        };
        self.fault(FaultPoint::BeforeVaultRecord)?;
        self.vault.record_study(study)?;
        self.write_clinical_record(&record.pseudonym)?;
        report.staged += 1;
        report.images_staged += staged_files.len();
        Ok(())
    }

    /// Returns the image summary and the de-identified dataset with its file name, or a
    /// quarantine reason.
    fn deidentify_one(&self, bytes: &[u8], local_id: &str) -> Result<(CollectedImage, (DataSet, String)), String> {
        let mut ds = parse_dataset(bytes).map_err(|e| format!("unparseable: {e}"))?;
        ds.put_text(tags::PATIENT_ID, Vr::LO, local_id);
        let station = ds.text(tags::STATION_NAME).unwrap_or("").trim().to_string();
        let (mut out, rep) = deid::apply(&ds, self.vault.as_ref(), Stage::Primary, &self.policy).map_err(|e| e.to_string())?;
        if !rep.surviving_unpoliced_tags.is_empty() {
            return Err(format!("unpoliced tags survived: {:?}", rep.surviving_unpoliced_tags));
        }
        let mut masked = false;
        if self.config.burn_in_unmasked_stations.contains(&station) {
            return Err(format!("station {station:?} burns in identifiers and has no mask template"));
        }
        if let Some(regions) = self.config.burn_in_regions.get(&station) {
            if regions.is_empty() {
                return Err(format!("station {station:?} has an empty mask template"));
            }
            let (m, changed) = mask_burn_in(&out, regions).map_err(|e| format!("burn-in mask: {e}"))?;
            out = m;
            masked = changed;
        }
        let sop = out.text(tags::SOP_INSTANCE_UID).unwrap_or_default().to_string();
        if !layout::safe_name(&sop) {
            return Err("missing SOP Instance UID".into());
        }
        let img = CollectedImage {
            series_uid: out.text(tags::SERIES_INSTANCE_UID).unwrap_or_default().to_string(),
            sop_uid: sop.clone(),
            modality: out.text(tags::MODALITY).unwrap_or_default().to_string(),
            source_kind: out.source_kind(),
            burn_in_masked: masked,
        };
        Ok((img, (out, format!("{sop}.dcm"))))
    }

    /// Writes into a temp dir, then renames into `staging/<pseudonym>/<study>`.
    fn stage(&self, pseudonym: &str, study_uid: &str, files: &[(DataSet, String)]) -> Result<(), CollectorError> {
        if !layout::safe_name(study_uid) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad study UID").into());
        }
        let parent = self.layout.staging().join(pseudonym);
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".tmp-{study_uid}"));
        layout::remove_dir_if_exists(&tmp)?;
        fs::create_dir_all(&tmp)?;
        for (i, (ds, name)) in files.iter().enumerate() {
            let bytes = serialize_file(ds).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            fs::write(tmp.join(name), bytes)?;
            if i == 0 {
                self.fault(FaultPoint::MidStageWrite)?;
            }
        }
        let target = parent.join(study_uid);
        layout::remove_dir_if_exists(&target)?;
        fs::rename(&tmp, &target)?;
        self.fault(FaultPoint::AfterStageRename)?;
        Ok(())
    }

    fn quarantine(&self, record: &PseudonymRecord, key: &str, input: &StudyInput<'_>, reason: &str) -> Result<(), CollectorError> {
        tracing::warn!(pseudonym = %record.pseudonym, study = %key, %reason, "quarantined");
        let dir = self.layout.quarantine().join(&record.pseudonym).join(key);
        fs::create_dir_all(&dir)?;
        for (name, bytes) in &input.files {
            let safe = if layout::safe_name(name) { name.clone() } else { self.vault.token("file", name) };
            fs::write(dir.join(safe), bytes)?;
        }
        fs::write(dir.join("reason.txt"), reason)?;
        self.vault.record_study(CollectedStudy {
            key: key.to_string(),
            pseudonym: record.pseudonym.clone(),
            study_uid: String::new(),
            study_date: String::new(),
            modality: String::new(),
            status: StudyStatus::Quarantined,
            images: Vec::new(),
            episode_token: None,
            outcome: None,
            collected_at: Utc::now(),
            quarantine_reason: Some(reason.to_string()),
            episode_id: input.episode.map(|e| e.episode_id.clone()),
            outcome_date: None,
            revised_from: None,
            year_of_birth: None,
        })?;
        Ok(())
    }

    /// Rewrites `staging/<pseudonym>/clinical.json` from the vault.
    fn write_clinical_record(&self, pseudonym: &str) -> Result<(), CollectorError> {
        let rec = ClinicalRecord::build(pseudonym, &self.vault.studies_for(pseudonym));
        layout::write_atomic(
            &self.layout.staging().join(pseudonym).join(record::CLINICAL_FILE),
            &serde_json::to_vec_pretty(&rec)?,
        )?;
        Ok(())
    }

    /// Pulls outcome changes for collected episodes, and new studies of known clients.
    pub fn refresh_ground_truth(&self) -> Result<UpdateReport, CollectorError> {
        let _busy = self.try_busy()?;
        self.recover()?;
        let mut clinical = ClinicalClient::connect(self.config.clinical_addr, self.timeout())
            .map_err(|e| CollectorError::PacsUnreachable(format!("clinical system: {e}")))?;
        let studies: Vec<CollectedStudy> = self
            .vault
            .studies()
            .into_iter()
            .filter(|s| s.status != StudyStatus::Quarantined && s.episode_id.is_some())
            .collect();
        let ids: BTreeSet<String> = studies.iter().filter_map(|s| s.episode_id.clone()).collect();
        let mut report = UpdateReport::default();
        let mut touched = BTreeSet::new();
        if !ids.is_empty() {
            let current: BTreeMap<String, ClinicalEpisode> = clinical
                .query(ClinicalQuery::Outcomes {
                    episode_ids: ids.into_iter().collect(),
                })?
                .into_iter()
                .map(|e| (e.episode_id.clone(), e))
                .collect();
            let mut updated_eps = BTreeSet::new();
            for s in studies {
                let Some(ep) = s.episode_id.as_ref().and_then(|id| current.get(id)) else { continue };
                let Some(rec) = self.vault.record(&s.pseudonym) else { continue };
                let outcome = Some(ep.outcome.as_str().to_string());
                let outcome_date = Some(offset_date_value(&ep.outcome_date, rec.date_offset_days));
                let revised_from = ep.revised_from.map(|o| o.as_str().to_string());
                if s.outcome == outcome && s.outcome_date == outcome_date && s.revised_from == revised_from {
                    continue;
                }
                if updated_eps.insert(ep.episode_id.clone()) {
                    report.episodes_updated += 1;
                    if revised_from.is_some() && s.revised_from != revised_from {
                        report.revisions_applied += 1;
                    }
                }
                touched.insert(s.pseudonym.clone());
                self.vault.record_study(CollectedStudy {
                    outcome,
                    outcome_date,
                    revised_from,
                    ..s
                })?;
            }
        }
        for p in &touched {
            self.write_clinical_record(p)?;
        }

        let state = self.load_state()?;
        let since = state.case_watermark.unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
        let fresh: Vec<ClinicalEpisode> = clinical
            .query(ClinicalQuery::NewCasesSince { since })?
            .into_iter()
            .filter(|e| self.vault.record_by_national_id(&e.national_id).is_some())
            .collect();
        if !fresh.is_empty() {
            self.start_receiver()?;
            let mut pacs = PacsClient::connect(self.config.pacs_addr, self.timeout())
                .map_err(|e| CollectorError::PacsUnreachable(format!("PACS: {e}")))?;
            let mut cycle = CycleReport::default();
            for ep in &fresh {
                self.collect_case(ep, &BTreeSet::new(), &mut pacs, &mut cycle)?;
            }
            report.new_studies_linked = cycle.staged;
        }
        self.update_state(|s| s.last_refresh_at = Some(Utc::now()))?;
        Ok(report)
    }

    /// Records the opt-out and removes everything held for the client, here and at the endpoint.
    pub fn opt_out(&self, national_id: &str, source: OptOutSource) -> Result<CascadeReport, CollectorError> {
        let _busy = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        self.vault.record_opt_out(national_id, source)?;
        let cascade = self.vault.remove_subject_by_national_id(national_id)?;
        let mut report = CascadeReport {
            vault_rows_removed: cascade.vault_rows_removed,
            ..Default::default()
        };
        let Some(pseudonym) = cascade.pseudonym else {
            return Ok(report);
        };
        let staged = self.layout.staging().join(&pseudonym);
        report.staged_studies_removed = layout::subdirs(&staged)?.len();
        layout::remove_dir_if_exists(&staged)?;
        layout::remove_dir_if_exists(&self.layout.quarantine().join(&pseudonym))?;
        match self.endpoint_root() {
            Ok(root) => report.published_studies_removed = self.delete_at_endpoint(&root, &pseudonym)?,
            Err(_) => {
                report.endpoint_pending = true;
                self.update_state(|s| {
                    s.pending_deletions.insert(pseudonym.clone());
                })?;
            }
        }
        tracing::info!(%pseudonym, ?report, "opt-out cascade");
        report.pseudonym = Some(pseudonym);
        Ok(report)
    }

    fn delete_at_endpoint(&self, root: &Path, pseudonym: &str) -> Result<usize, CollectorError> {
        let dir = root.join(pseudonym);
        let n = layout::subdirs(&dir)?.len();
        layout::remove_dir_if_exists(&dir)?;
        let notice = serde_json::json!({ "pseudonym": pseudonym, "requested_at": Utc::now() });
        layout::write_atomic(
            &root.join(record::DELETIONS_DIR).join(format!("{pseudonym}.json")),
            &serde_json::to_vec_pretty(&notice)?,
        )?;
        Ok(n)
    }

    /// The endpoint directory, if it exists and accepts writes.
    pub fn endpoint_root(&self) -> Result<PathBuf, CollectorError> {
        let root = self.config.endpoint_path();
        let probe = root.join(".tmp-probe");
        if !root.is_dir() || fs::write(&probe, b"").is_err() {
            return Err(CollectorError::EndpointUnavailable(root));
        }
        let _ = fs::remove_file(probe);
        Ok(root)
    }
}

fn read_incoming(dir: &Path) -> io::Result<Vec<(String, Vec<u8>)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    layout::files_in(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            fs::read(&p).map(|b| (name, b))
        })
        .collect()
}
