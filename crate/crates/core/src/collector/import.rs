use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout;
use super::{Collector, CollectorError, CycleReport, StudyInput};
use crate::dicom::{parse_dataset, tags};
use crate::vault::VaultError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectKind {
    /// File is not a readable DICOM object.
    ParseFailure,
    /// File present in the directory but not listed in the manifest.
    ManifestGap,
    /// Listed in the manifest but absent from the directory.
    MissingFile,
    /// No national id given and the local id is not registered.
    Unregistered,
    /// Registration refused (bad national id, trial code clash, ...).
    Registration,
    /// Files of one study disagree about the client.
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub file: String,
    pub kind: RejectKind,
    pub detail: String,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    file: String,
    #[serde(default)]
    national_id: Option<String>,
    local_id: String,
}

struct Entry {
    name: String,
    bytes: Vec<u8>,
    local_id: String,
    national_id: Option<String>,
}

impl Collector {
    /// Imports images from external media. Every file must be listed in the CSV manifest
    /// (`file,national_id,local_id`; national id may be blank for registered clients).
    pub fn import_directory(&self, dir: &Path, manifest: &Path) -> Result<CycleReport, CollectorError> {
        let _busy = self.try_busy()?;
        let mut report = CycleReport::default();
        let mut rows: BTreeMap<String, ManifestRow> = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(manifest)
            .map_err(|e| CollectorError::Manifest(e.to_string()))?;
        for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
            let row = row.map_err(|e| CollectorError::Manifest(format!("row {}: {e}", i + 2)))?;
            rows.insert(row.file.clone(), row);
        }

        let manifest_abs = fs::canonicalize(manifest).ok();
        let mut by_study: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
        for path in layout::walk_files(dir)? {
            if fs::canonicalize(&path).ok() == manifest_abs {
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let Some(row) = rows.remove(&rel) else {
                report.rejected.push(reject(&rel, RejectKind::ManifestGap, "not listed in manifest"));
                continue;
            };
            let bytes = fs::read(&path)?;
            let study = match parse_dataset(&bytes) {
                Ok(ds) => ds.text(tags::STUDY_INSTANCE_UID).unwrap_or("").trim().to_string(),
                Err(e) => {
                    report.rejected.push(reject(&rel, RejectKind::ParseFailure, &e.to_string()));
                    continue;
                }
            };
            if study.is_empty() {
                report.rejected.push(reject(&rel, RejectKind::ParseFailure, "no Study Instance UID"));
                continue;
            }
            by_study.entry(study).or_default().push(Entry {
                name: rel,
                bytes,
                local_id: row.local_id,
                national_id: row.national_id.filter(|n| !n.is_empty()),
            });
        }
        for file in rows.into_keys() {
            report.rejected.push(reject(&file, RejectKind::MissingFile, "listed in manifest but not found"));
        }

        for (study_uid, entries) in by_study {
            let local_id = entries[0].local_id.clone();
            if entries.iter().any(|e| e.local_id != local_id) {
                for e in &entries {
                    report.rejected.push(reject(&e.name, RejectKind::Inconsistent, "study spans several local ids"));
                }
                continue;
            }
            report.identified += 1;
            let nid = entries.iter().find_map(|e| e.national_id.clone());
            let record = match &nid {
                Some(n) if self.vault.is_opted_out(n) => {
                    report.excluded_opt_out += 1;
                    continue;
                }
                Some(n) => match self.ensure_registered(n, &local_id) {
                    Ok(r) => r,
                    Err(e @ (VaultError::InvalidNationalId(_) | VaultError::DuplicateTrialCode(_) | VaultError::AlreadyRegistered)) => {
                        for en in &entries {
                            report.rejected.push(reject(&en.name, RejectKind::Registration, &e.to_string()));
                        }
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                },
                None => match self.vault.record_by_local_id(&local_id) {
                    Some(r) if r.opted_out => {
                        report.excluded_opt_out += 1;
                        continue;
                    }
                    Some(r) => r,
                    None => {
                        for en in &entries {
                            report.rejected.push(reject(&en.name, RejectKind::Unregistered, "local id is not registered"));
                        }
                        continue;
                    }
                },
            };
            if self.vault.study(&self.vault.study_key(&study_uid)).is_some() {
                report.skipped_existing += 1;
                continue;
            }
            report.retrieved += 1;
            let input = StudyInput {
                original_study_uid: &study_uid,
                local_id: &local_id,
                files: entries.into_iter().map(|e| (e.name, e.bytes)).collect(),
                episode: None,
            };
            self.process_study(&record, input, &mut report)?;
        }
        tracing::info!(?report, "import finished");
        Ok(report)
    }
}

fn reject(file: &str, kind: RejectKind, detail: &str) -> Rejection {
    Rejection {
        file: file.to_string(),
        kind,
        detail: detail.to_string(),
    }
}
