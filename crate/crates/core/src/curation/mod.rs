//! Central curation: intake from the site endpoint, second-stage de-identification under
//! fresh aliases, identifier and content scans, linkage, publication and licensed exports.

mod clinical;
mod export;
pub mod scan;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, TryLockError};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::layout::{self, sha256_file};
use crate::collector::record::{CLINICAL_FILE, DELETIONS_DIR};
use crate::deid::{self, DeidError, Policy, Stage};
use crate::dicom::{parse_dataset, serialize_file, tags, DataSet};
use crate::vault::{Vault, VaultConfig, VaultError, VaultSecrets};

pub use clinical::{filter_record, DEFAULT_WHITELIST};
pub use export::{ExportCriteria, ExportReport, Licensee};
pub use scan::{national_ids_in, scan_dataset, scan_published, Finding, FindingKind, ScanRules};

pub const LINKAGE_FILE: &str = "linkage.csv";
pub const LINKAGE_HEADER: &str = "client_s2,study_s2,series_s2,image_s2";

/// Pipeline steps in the order they run.
pub const STEPS: [&str; 7] = [
    "intake",
    "secondary-deid",
    "identifier-scan",
    "content-check",
    "linkage",
    "clinical-filter",
    "publish",
];

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("a curation job is already running")]
    Busy,
    #[error("inbox {0} does not exist")]
    InboxMissing(PathBuf),
    #[error("licensee {0:?} is not registered")]
    UnknownLicensee(String),
    #[error("batch id {0:?} is malformed or already used")]
    BadBatchId(String),
    #[error("copy of {0} failed verification")]
    ChecksumMismatch(PathBuf),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub root: PathBuf,
    /// Where sites deliver; the collector's endpoint.
    pub inbox: PathBuf,
    pub alias_prefix: String,
    pub rules: ScanRules,
    pub clinical_whitelist: Vec<String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            root: PathBuf::from("central"),
            inbox: PathBuf::from("endpoint"),
            alias_prefix: "D".into(),
            rules: ScanRules::default(),
            clinical_whitelist: DEFAULT_WHITELIST.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CentralLayout {
    pub root: PathBuf,
}

impl CentralLayout {
    pub fn vault(&self) -> PathBuf {
        self.root.join("vault")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }
    pub fn published(&self) -> PathBuf {
        self.root.join("published")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
    pub fn quarantine(&self) -> PathBuf {
        self.root.join("quarantine")
    }
    pub fn audit(&self) -> PathBuf {
        self.root.join("audit")
    }
    pub fn catalog(&self) -> PathBuf {
        self.root.join("catalog.json")
    }
    pub fn licensees(&self) -> PathBuf {
        self.root.join("licensees.json")
    }

    fn create(&self) -> io::Result<()> {
        for d in [self.vault(), self.stage1(), self.published(), self.manifests(), self.quarantine(), self.audit()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Published,
    Quarantined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedImage {
    pub series_s2: String,
    pub image_s2: String,
    pub sha256: String,
}

/// Central bookkeeping for one received study. Holds stage-1 identifiers, so it never
/// leaves the curation root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub pseudonym: String,
    pub study_s1: String,
    pub alias: String,
    pub study_s2: Option<String>,
    pub status: EntryStatus,
    pub batch_id: String,
    pub modality: String,
    pub outcome: Option<String>,
    pub images: Vec<PublishedImage>,
    pub flags: BTreeSet<FindingKind>,
    pub failed_step: Option<u8>,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Catalog {
    /// Keyed by `<stage-1 pseudonym>/<stage-1 study UID>`.
    pub entries: BTreeMap<String, CatalogEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub batch_id: String,
    pub started_at: Option<DateTime<Utc>>,
    pub published_at: Option<DateTime<Utc>>,
    /// Studies taken into this batch.
    pub inputs: usize,
    /// Studies published by this batch.
    pub outputs: usize,
    pub quarantined: usize,
    pub deletions_applied: usize,
    /// Step number (1-based) → result.
    pub step_results: BTreeMap<u8, StepResult>,
    pub studies: Vec<String>,
    pub files: Vec<PublishedFile>,
}

impl CurationManifest {
    pub fn steps_passed(&self) -> usize {
        self.step_results.values().filter(|r| r.passed).count()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeletionRecord {
    pub alias: Option<String>,
    pub at: DateTime<Utc>,
    pub published_studies_removed: usize,
    pub export_copies_removed: usize,
    pub vault_rows_removed: usize,
}

struct Failure {
    step: u8,
    reason: String,
}

impl Failure {
    fn at(step: u8, reason: impl Into<String>) -> Failure {
        Failure { step, reason: reason.into() }
    }
}

/// Result of steps 2 to 5 for one study, ready to publish.
struct Curated {
    study_s2: String,
    modality: String,
    files: Vec<(String, Vec<u8>, String, String)>,
    flags: BTreeSet<FindingKind>,
}

pub struct Curator {
    config: CurationConfig,
    layout: CentralLayout,
    vault: Vault,
    policy: Policy,
    busy: Mutex<()>,
}

impl Curator {
    pub fn open(config: CurationConfig, secrets: VaultSecrets) -> Result<Curator, CurationError> {
        let layout = CentralLayout { root: config.root.clone() };
        layout.create()?;
        let vault = Vault::open(&layout.vault(), VaultConfig::alias(&config.alias_prefix), secrets)?;
        Ok(Curator {
            config,
            layout,
            vault,
            policy: Policy::builtin(),
            busy: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &CurationConfig {
        &self.config
    }

    pub fn layout(&self) -> &CentralLayout {
        &self.layout
    }

    pub fn vault(&self) -> &Vault {
        &self.vault
    }

    fn try_busy(&self) -> Result<MutexGuard<'_, ()>, CurationError> {
        match self.busy.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(CurationError::Busy),
        }
    }

    pub fn catalog(&self) -> Result<Catalog, CurationError> {
        match fs::read(self.layout.catalog()) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Catalog::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn save_catalog(&self, c: &Catalog) -> Result<(), CurationError> {
        layout::write_atomic(&self.layout.catalog(), &serde_json::to_vec_pretty(c)?)?;
        Ok(())
    }

    pub fn manifests(&self) -> Result<Vec<CurationManifest>, CurationError> {
        let mut out = Vec::new();
        for f in layout::files_in(&self.layout.manifests())? {
            out.push(serde_json::from_slice(&fs::read(f)?)?);
        }
        Ok(out)
    }

    /// Runs one batch over whatever the inbox holds, under a generated batch id. Deletion
    /// notices are applied first.
    pub fn run_pipeline(&self) -> Result<CurationManifest, CurationError> {
        self.run(None)
    }

    /// Same as [`Curator::run_pipeline`] with a caller-chosen batch id, which must be a plain
    /// file name not used by an earlier batch.
    pub fn run_batch(&self, batch_id: &str) -> Result<CurationManifest, CurationError> {
        self.run(Some(batch_id))
    }

    fn run(&self, requested: Option<&str>) -> Result<CurationManifest, CurationError> {
        let _busy = self.try_busy()?;
        let inbox = self.config.inbox.clone();
        if !inbox.is_dir() {
            return Err(CurationError::InboxMissing(inbox));
        }
        layout::sweep_temp(&self.layout.root)?;
        let started = Utc::now();
        let batch_id = match requested {
            Some(id) => {
                if !layout::safe_name(id) || self.layout.manifests().join(format!("{id}.json")).exists() {
                    return Err(CurationError::BadBatchId(id.to_string()));
                }
                id.to_string()
            }
            None => format!("{}-{:04}", started.format("%Y%m%dT%H%M%S"), self.manifests()?.len() + 1),
        };
        let mut manifest = CurationManifest {
            batch_id: batch_id.clone(),
            started_at: Some(started),
            ..CurationManifest::default()
        };
        let mut steps: BTreeMap<u8, StepResult> = (1..=STEPS.len() as u8)
            .map(|n| (n, StepResult { passed: true, details: Vec::new() }))
            .collect();
        let mut catalog = self.catalog()?;

        manifest.deletions_applied = self.apply_deletions(&inbox, &mut catalog)?;

        // 1: intake into stage1, verified
        let mut touched: BTreeSet<String> = BTreeSet::new();
        for pdir in layout::subdirs(&inbox)? {
            let p = file_name(&pdir);
            if !layout::safe_name(&p) {
                continue;
            }
            for sdir in layout::subdirs(&pdir)? {
                let study = file_name(&sdir);
                if let Err(e) = self.intake_study(&p, &sdir) {
                    fail_step(&mut steps, 1, format!("{p}/{study}: {e}"));
                }
            }
            let clinical = pdir.join(CLINICAL_FILE);
            if clinical.is_file() {
                copy_verified(&clinical, &self.layout.stage1().join(&p).join(CLINICAL_FILE))?;
                fs::remove_file(&clinical)?;
                touched.insert(p.clone());
            }
            if fs::read_dir(&pdir)?.next().is_none() {
                fs::remove_dir(&pdir)?;
            }
        }

        // everything in stage1 not yet catalogued is this batch's input
        let mut pending = Vec::new();
        for pdir in layout::subdirs(&self.layout.stage1())? {
            let p = file_name(&pdir);
            for sdir in layout::subdirs(&pdir)? {
                let key = format!("{p}/{}", file_name(&sdir));
                if !catalog.entries.contains_key(&key) {
                    pending.push((p.clone(), sdir));
                }
            }
        }
        manifest.inputs = pending.len();

        for (p, sdir) in pending {
            let study_s1 = file_name(&sdir);
            let key = format!("{p}/{study_s1}");
            let alias = self.vault.ensure_alias(&p)?.pseudonym;
            touched.insert(p.clone());
            let outcome = self.stage1_outcome(&p, &study_s1);
            match self.curate_study(&sdir) {
                Ok(c) => {
                    let images = self.publish_study(&alias, &c, &mut manifest)?;
                    manifest.studies.push(format!("{alias}/{}", c.study_s2));
                    manifest.outputs += 1;
                    catalog.entries.insert(
                        key,
                        CatalogEntry {
                            pseudonym: p.clone(),
                            study_s1,
                            alias,
                            study_s2: Some(c.study_s2),
                            status: EntryStatus::Published,
                            batch_id: batch_id.clone(),
                            modality: c.modality,
                            outcome,
                            images,
                            flags: c.flags,
                            failed_step: None,
                            reason: None,
                        },
                    );
                }
                Err(f) => {
                    tracing::warn!(study = %key, step = f.step, reason = %f.reason, "study held back");
                    fail_step(&mut steps, f.step, format!("{alias}: {}", f.reason));
                    let qdir = self.layout.quarantine().join(&batch_id).join(&p).join(&study_s1);
                    copy_tree(&sdir, &qdir)?;
                    fs::write(qdir.join("reason.txt"), format!("step {} ({}): {}\n", f.step, STEPS[f.step as usize - 1], f.reason))?;
                    manifest.quarantined += 1;
                    catalog.entries.insert(
                        key,
                        CatalogEntry {
                            pseudonym: p.clone(),
                            study_s1,
                            alias,
                            study_s2: None,
                            status: EntryStatus::Quarantined,
                            batch_id: batch_id.clone(),
                            modality: String::new(),
                            outcome,
                            images: Vec::new(),
                            flags: BTreeSet::new(),
                            failed_step: Some(f.step),
                            reason: Some(f.reason),
                        },
                    );
                }
            }
        }
        self.vault.commit()?;

        // 6: filtered clinical records for every subject touched
        for p in &touched {
            if let Err(e) = self.publish_clinical(p, &catalog, &mut manifest) {
                fail_step(&mut steps, 6, format!("{p}: {e}"));
            }
        }

        // 7: linkage file and catalog
        self.write_linkage(&catalog)?;
        self.save_catalog(&catalog)?;
        let linkage = self.layout.published().join(LINKAGE_FILE);
        manifest.files.push(PublishedFile {
            path: LINKAGE_FILE.into(),
            sha256: sha256_file(&linkage)?,
        });
        manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.step_results = steps;
        manifest.published_at = Some(Utc::now());
        layout::write_atomic(
            &self.layout.manifests().join(format!("{batch_id}.json")),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
        tracing::info!(batch = %batch_id, inputs = manifest.inputs, outputs = manifest.outputs, "curation batch done");
        Ok(manifest)
    }

    fn intake_study(&self, pseudonym: &str, sdir: &Path) -> Result<(), CurationError> {
        let study = file_name(sdir);
        let parent = self.layout.stage1().join(pseudonym);
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".tmp-{study}"));
        layout::remove_dir_if_exists(&tmp)?;
        fs::create_dir_all(&tmp)?;
        for f in layout::files_in(sdir)? {
            let copy = tmp.join(f.file_name().expect("file name"));
            fs::copy(&f, &copy)?;
            if sha256_file(&copy)? != sha256_file(&f)? {
                layout::remove_dir_if_exists(&tmp)?;
                return Err(CurationError::ChecksumMismatch(f));
            }
        }
        let target = parent.join(&study);
        layout::remove_dir_if_exists(&target)?;
        fs::rename(&tmp, &target)?;
        fs::remove_dir_all(sdir)?;
        Ok(())
    }

    /// Steps 2 to 5 for one stage-1 study.
    fn curate_study(&self, sdir: &Path) -> Result<Curated, Failure> {
        let files = layout::files_in(sdir).map_err(|e| Failure::at(1, e.to_string()))?;
        if files.is_empty() {
            return Err(Failure::at(1, "study directory is empty"));
        }
        let mut out = Vec::new();
        let mut flags = BTreeSet::new();
        let mut study_s2 = None;
        let mut modality = String::new();
        for f in files {
            let name = file_name(&f);
            let bytes = fs::read(&f).map_err(|e| Failure::at(1, e.to_string()))?;
            let ds = parse_dataset(&bytes).map_err(|e| Failure::at(2, format!("{name}: {e}")))?;
            // 2
            let (ds, _) = deid::apply(&ds, &self.vault, Stage::Secondary, &self.policy).map_err(|e| match e {
                DeidError::UnregisteredClient(_) => Failure::at(2, format!("{name}: subject has no alias")),
                e => Failure::at(2, format!("{name}: {e}")),
            })?;
            // 3
            let ds = self.identifier_scan(&name, ds)?;
            // 4
            let findings = scan_dataset(&ds, &self.config.rules);
            for (kind, detail) in &findings {
                match kind {
                    FindingKind::DoseReport | FindingKind::MissingPixelData => {
                        return Err(Failure::at(4, format!("{name}: {kind:?}: {detail}")));
                    }
                    FindingKind::DigitisedScan => {
                        flags.insert(*kind);
                    }
                    _ => {}
                }
            }
            // 5
            let get = |t| ds.text(t).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
            let (Some(study), Some(series), Some(sop)) = (
                get(tags::STUDY_INSTANCE_UID),
                get(tags::SERIES_INSTANCE_UID),
                get(tags::SOP_INSTANCE_UID),
            ) else {
                return Err(Failure::at(5, format!("{name}: missing instance identifiers")));
            };
            if study_s2.get_or_insert_with(|| study.clone()) != &study {
                return Err(Failure::at(5, format!("{name}: mixed studies in one directory")));
            }
            if !layout::safe_name(&study) || !layout::safe_name(&sop) {
                return Err(Failure::at(5, format!("{name}: identifiers unusable as file names")));
            }
            if modality.is_empty() {
                modality = get(tags::MODALITY).unwrap_or_default();
            }
            let bytes = serialize_file(&ds).map_err(|e| Failure::at(5, format!("{name}: {e}")))?;
            out.push((format!("{sop}.dcm"), bytes, series, sop));
        }
        Ok(Curated {
            study_s2: study_s2.expect("non-empty study"),
            modality,
            files: out,
            flags,
        })
    }

    /// Identifier patterns and burn-in. Burn-in models with a template are blacked out and
    /// rechecked; without one the study is held back.
    fn identifier_scan(&self, name: &str, mut ds: DataSet) -> Result<DataSet, Failure> {
        let blocking = |ds: &DataSet| -> Vec<(FindingKind, String)> {
            scan_dataset(ds, &self.config.rules)
                .into_iter()
                .filter(|(k, _)| {
                    matches!(k, FindingKind::NationalIdPattern | FindingKind::PersonName | FindingKind::BurnInSuspect)
                })
                .collect()
        };
        let mut found = blocking(&ds);
        if found.iter().any(|(k, _)| *k == FindingKind::BurnInSuspect) {
            if let Some(masked) = scan::black_out(&ds, &self.config.rules) {
                ds = masked;
                found = blocking(&ds);
            }
        }
        match found.first() {
            Some((kind, detail)) => Err(Failure::at(3, format!("{name}: {kind:?}: {detail}"))),
            None => Ok(ds),
        }
    }

    fn publish_study(&self, alias: &str, c: &Curated, manifest: &mut CurationManifest) -> Result<Vec<PublishedImage>, CurationError> {
        let parent = self.layout.published().join(alias);
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".tmp-{}", c.study_s2));
        layout::remove_dir_if_exists(&tmp)?;
        fs::create_dir_all(&tmp)?;
        let mut images = Vec::new();
        for (file, bytes, series, sop) in &c.files {
            fs::write(tmp.join(file), bytes)?;
            let sha = sha256_file(&tmp.join(file))?;
            manifest.files.push(PublishedFile {
                path: format!("{alias}/{}/{file}", c.study_s2),
                sha256: sha.clone(),
            });
            images.push(PublishedImage {
                series_s2: series.clone(),
                image_s2: sop.clone(),
                sha256: sha,
            });
        }
        let target = parent.join(&c.study_s2);
        layout::remove_dir_if_exists(&target)?;
        fs::rename(&tmp, &target)?;
        images.sort_by(|a, b| (&a.series_s2, &a.image_s2).cmp(&(&b.series_s2, &b.image_s2)));
        Ok(images)
    }

    fn stage1_record(&self, pseudonym: &str) -> Option<serde_json::Value> {
        let b = fs::read(self.layout.stage1().join(pseudonym).join(CLINICAL_FILE)).ok()?;
        serde_json::from_slice(&b).ok()
    }

    fn stage1_outcome(&self, pseudonym: &str, study_s1: &str) -> Option<String> {
        let rec = self.stage1_record(pseudonym)?;
        rec.get("episodes")?
            .as_array()?
            .iter()
            .find(|e| e.get("study_uid").and_then(|v| v.as_str()) == Some(study_s1))?
            .get("outcome")?
            .as_str()
            .map(str::to_string)
    }

    /// The filtered record for one alias: whitelisted fields only, identifiers moved into the
    /// alias namespace, and episodes limited to published studies.
    pub fn shared_record(&self, pseudonym: &str, catalog: &Catalog) -> Result<Option<serde_json::Value>, CurationError> {
        let Some(raw) = self.stage1_record(pseudonym) else { return Ok(None) };
        let Some(alias) = self.vault.alias_of(pseudonym).map(|r| r.pseudonym) else { return Ok(None) };
        let published: BTreeMap<&str, &str> = catalog
            .entries
            .values()
            .filter(|e| e.pseudonym == pseudonym && e.status == EntryStatus::Published)
            .filter_map(|e| Some((e.study_s1.as_str(), e.study_s2.as_deref()?)))
            .collect();
        let mut rec = filter_record(&raw, &self.config.clinical_whitelist);
        if let Some(obj) = rec.as_object_mut() {
            if obj.contains_key("pseudonym") {
                obj.insert("pseudonym".into(), alias.clone().into());
            }
            if let Some(eps) = obj.get_mut("episodes").and_then(|v| v.as_array_mut()) {
                eps.retain_mut(|ep| {
                    let s1 = ep.get("study_uid").and_then(|v| v.as_str()).unwrap_or_default().to_string();
                    let Some(s2) = published.get(s1.as_str()) else { return false };
                    ep["study_uid"] = (*s2).into();
                    if let Some(r) = ep.get("episode_ref").and_then(|v| v.as_str()).map(str::to_string) {
                        ep["episode_ref"] = self.vault.token("episode-alias", &r).into();
                    }
                    true
                });
            }
        }
        Ok(Some(rec))
    }

    fn publish_clinical(&self, pseudonym: &str, catalog: &Catalog, manifest: &mut CurationManifest) -> Result<(), CurationError> {
        let Some(rec) = self.shared_record(pseudonym, catalog)? else { return Ok(()) };
        let alias = rec["pseudonym"].as_str().unwrap_or_default().to_string();
        if alias.is_empty() || !self.layout.published().join(&alias).is_dir() {
            return Ok(());
        }
        let path = self.layout.published().join(&alias).join(CLINICAL_FILE);
        layout::write_atomic(&path, &serde_json::to_vec_pretty(&rec)?)?;
        manifest.files.push(PublishedFile {
            path: format!("{alias}/{CLINICAL_FILE}"),
            sha256: sha256_file(&path)?,
        });
        Ok(())
    }

    /// Rebuilds the linkage file from the catalog, sorted.
    fn write_linkage(&self, catalog: &Catalog) -> Result<(), CurationError> {
        let rows = linkage_rows(catalog);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LINKAGE_HEADER.split(','))?;
        for r in &rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        layout::write_atomic(&self.layout.published().join(LINKAGE_FILE), &bytes)?;
        Ok(())
    }

    /// Applies the site's deletion notices: stage-1 copy, published copy, licensed export
    /// copies and the alias itself all go.
    fn apply_deletions(&self, inbox: &Path, catalog: &mut Catalog) -> Result<usize, CurationError> {
        let dir = inbox.join(DELETIONS_DIR);
        if !dir.is_dir() {
            return Ok(0);
        }
        let mut n = 0;
        for notice in layout::files_in(&dir)? {
            let Some(p) = notice.file_stem().map(|s| s.to_string_lossy().into_owned()) else { continue };
            if !layout::safe_name(&p) {
                continue;
            }
            let record = self.delete_subject(&p, catalog)?;
            tracing::info!(alias = ?record.alias, "deletion applied");
            self.save_catalog(catalog)?;
            self.write_linkage(catalog)?;
            export::append_ndjson(&self.layout.audit().join("deletions.ndjson"), &record)?;
            fs::remove_file(&notice)?;
            n += 1;
        }
        Ok(n)
    }

    fn delete_subject(&self, pseudonym: &str, catalog: &mut Catalog) -> Result<DeletionRecord, CurationError> {
        layout::remove_dir_if_exists(&self.config.inbox.join(pseudonym))?;
        layout::remove_dir_if_exists(&self.layout.stage1().join(pseudonym))?;
        let alias = self.vault.alias_of(pseudonym).map(|r| r.pseudonym);
        let published = catalog
            .entries
            .values()
            .filter(|e| e.pseudonym == pseudonym && e.status == EntryStatus::Published)
            .count();
        catalog.entries.retain(|_, e| e.pseudonym != pseudonym);
        let mut export_copies = 0;
        let mut vault_rows = 0;
        if let Some(a) = &alias {
            layout::remove_dir_if_exists(&self.layout.published().join(a))?;
            for dest in self.export_destinations_for(a)? {
                if layout::remove_dir_if_exists(&dest.join(a))? {
                    export_copies += 1;
                }
                export::drop_linkage_rows(&dest, a)?;
            }
            vault_rows = self.vault.remove_subject(a)?.vault_rows_removed;
        }
        Ok(DeletionRecord {
            alias,
            at: Utc::now(),
            published_studies_removed: published,
            export_copies_removed: export_copies,
            vault_rows_removed: vault_rows,
        })
    }
}

/// Sorted `client,study,series,image` rows for every published image.
pub fn linkage_rows(catalog: &Catalog) -> Vec<[String; 4]> {
    let mut rows: Vec<[String; 4]> = catalog
        .entries
        .values()
        .filter(|e| e.status == EntryStatus::Published)
        .flat_map(|e| {
            e.images.iter().map(move |i| {
                [
                    e.alias.clone(),
                    e.study_s2.clone().unwrap_or_default(),
                    i.series_s2.clone(),
                    i.image_s2.clone(),
                ]
            })
        })
        .collect();
    rows.sort();
    rows
}

fn fail_step(steps: &mut BTreeMap<u8, StepResult>, step: u8, detail: String) {
    let r = steps.entry(step).or_default();
    r.passed = false;
    r.details.push(detail);
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn copy_verified(src: &Path, dst: &Path) -> Result<(), CurationError> {
    let parent = dst.parent().expect("destination has a parent");
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".tmp-{}", file_name(dst)));
    fs::copy(src, &tmp)?;
    if sha256_file(&tmp)? != sha256_file(src)? {
        let _ = fs::remove_file(&tmp);
        return Err(CurationError::ChecksumMismatch(src.to_path_buf()));
    }
    fs::rename(&tmp, dst)?;
    Ok(())
}

fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    for f in layout::walk_files(src)? {
        let rel = f.strip_prefix(src).expect("under src");
        let to = dst.join(rel);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(&f, to)?;
    }
    Ok(())
}
