use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{linkage_rows, Catalog, CurationError, Curator, EntryStatus, LINKAGE_FILE, LINKAGE_HEADER};
use crate::collector::layout;
use crate::collector::record::CLINICAL_FILE;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Licensee {
    pub name: String,
    pub registered_at: DateTime<Utc>,
}

/// Selection for a licensed subset. Empty sets match everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportCriteria {
    pub outcomes: BTreeSet<String>,
    pub modalities: BTreeSet<String>,
    pub max_clients: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub export_id: String,
    pub licensee: String,
    pub destination: PathBuf,
    pub clients: Vec<String>,
    pub studies: usize,
    pub images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExportAudit {
    #[serde(flatten)]
    report: ExportReport,
    criteria: ExportCriteria,
    at: DateTime<Utc>,
}

pub(super) fn append_ndjson<T: Serialize>(path: &Path, row: &T) -> Result<(), CurationError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_all()?;
    Ok(())
}

impl Curator {
    pub fn licensees(&self) -> Result<Vec<Licensee>, CurationError> {
        match fs::read(self.layout.licensees()) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn register_licensee(&self, name: &str) -> Result<Licensee, CurationError> {
        let mut all = self.licensees()?;
        if let Some(l) = all.iter().find(|l| l.name == name) {
            return Ok(l.clone());
        }
        let l = Licensee {
            name: name.to_string(),
            registered_at: Utc::now(),
        };
        all.push(l.clone());
        layout::write_atomic(&self.layout.licensees(), &serde_json::to_vec_pretty(&all)?)?;
        Ok(l)
    }

    /// Audit rows for every export so far, oldest first.
    pub fn export_log(&self) -> Result<Vec<ExportReport>, CurationError> {
        let path = self.layout.audit().join("exports.ndjson");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<ExportAudit>(l)?.report))
            .collect()
    }

    pub(super) fn export_destinations_for(&self, alias: &str) -> Result<Vec<PathBuf>, CurationError> {
        let mut out: Vec<PathBuf> = self
            .export_log()?
            .into_iter()
            .filter(|r| r.clients.iter().any(|c| c == alias))
            .map(|r| r.destination)
            .collect();
        out.dedup();
        Ok(out)
    }

    /// Copies the published studies that match `criteria` into `dest` for a registered
    /// licensee, with their filtered clinical records and linkage rows. Every call is audited,
    /// including ones that select nothing.
    pub fn export_subset(&self, criteria: &ExportCriteria, dest: &Path, licensee: &str) -> Result<ExportReport, CurationError> {
        let _busy = self.try_busy()?;
        if !self.licensees()?.iter().any(|l| l.name == licensee) {
            return Err(CurationError::UnknownLicensee(licensee.to_string()));
        }
        let catalog = self.catalog()?;
        let selected = select(&catalog, criteria);
        let export_id = format!("X{}-{:04}", Utc::now().format("%Y%m%dT%H%M%S"), self.export_log()?.len() + 1);
        let mut report = ExportReport {
            export_id,
            licensee: licensee.to_string(),
            destination: dest.to_path_buf(),
            ..ExportReport::default()
        };
        fs::create_dir_all(dest)?;
        let mut subset = Catalog::default();
        for (key, e) in &selected {
            let study = e.study_s2.as_deref().unwrap_or_default();
            let src = self.layout.published().join(&e.alias).join(study);
            let parent = dest.join(&e.alias);
            fs::create_dir_all(&parent)?;
            let tmp = parent.join(format!(".tmp-{study}"));
            layout::remove_dir_if_exists(&tmp)?;
            fs::create_dir_all(&tmp)?;
            for img in &e.images {
                let name = format!("{}.dcm", img.image_s2);
                fs::copy(src.join(&name), tmp.join(&name))?;
                if layout::sha256_file(&tmp.join(&name))? != img.sha256 {
                    layout::remove_dir_if_exists(&tmp)?;
                    return Err(CurationError::ChecksumMismatch(src.join(&name)));
                }
            }
            layout::remove_dir_if_exists(&parent.join(study))?;
            fs::rename(&tmp, parent.join(study))?;
            report.studies += 1;
            report.images += e.images.len();
            subset.entries.insert((*key).clone(), (*e).clone());
        }
        let clients: BTreeSet<&str> = selected.iter().map(|(_, e)| e.alias.as_str()).collect();
        for alias in &clients {
            let p = selected.iter().find(|(_, e)| e.alias == *alias).map(|(_, e)| e.pseudonym.clone()).unwrap_or_default();
            if let Some(mut rec) = self.shared_record(&p, &catalog)? {
                if let Some(eps) = rec.get_mut("episodes").and_then(|v| v.as_array_mut()) {
                    let keep: BTreeSet<&str> = subset
                        .entries
                        .values()
                        .filter(|e| e.alias == *alias)
                        .filter_map(|e| e.study_s2.as_deref())
                        .collect();
                    eps.retain(|ep| ep.get("study_uid").and_then(|v| v.as_str()).is_some_and(|s| keep.contains(s)));
                }
                layout::write_atomic(&dest.join(alias).join(CLINICAL_FILE), &serde_json::to_vec_pretty(&rec)?)?;
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LINKAGE_HEADER.split(','))?;
        for r in linkage_rows(&subset) {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        layout::write_atomic(&dest.join(LINKAGE_FILE), &bytes)?;
        report.clients = clients.into_iter().map(str::to_string).collect();
        append_ndjson(
            &self.layout.audit().join("exports.ndjson"),
            &ExportAudit {
                report: report.clone(),
                criteria: criteria.clone(),
                at: Utc::now(),
            },
        )?;
        tracing::info!(export = %report.export_id, %licensee, studies = report.studies, "export written");
        Ok(report)
    }
}

/// Removes `alias`'s rows from the linkage file at an export destination. Returns how many
/// rows went.
pub(super) fn drop_linkage_rows(dest: &Path, alias: &str) -> Result<usize, CurationError> {
    let path = dest.join(LINKAGE_FILE);
    if !path.is_file() {
        return Ok(0);
    }
    let mut r = csv::Reader::from_path(&path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(r.headers()?)?;
    let mut dropped = 0;
    for row in r.records() {
        let row = row?;
        if row.get(0) == Some(alias) {
            dropped += 1;
        } else {
            w.write_record(&row)?;
        }
    }
    if dropped > 0 {
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        layout::write_atomic(&path, &bytes)?;
    }
    Ok(dropped)
}

/// Matching published studies, ordered by alias then study, limited to the first
/// `max_clients` aliases.
fn select<'a>(catalog: &'a Catalog, c: &ExportCriteria) -> Vec<(&'a String, &'a super::CatalogEntry)> {
    let mut hits: Vec<(&String, &super::CatalogEntry)> = catalog
        .entries
        .iter()
        .filter(|(_, e)| e.status == EntryStatus::Published)
        .filter(|(_, e)| c.modalities.is_empty() || c.modalities.iter().any(|m| m.eq_ignore_ascii_case(&e.modality)))
        .filter(|(_, e)| c.outcomes.is_empty() || e.outcome.as_ref().is_some_and(|o| c.outcomes.contains(o)))
        .collect();
    hits.sort_by(|a, b| (&a.1.alias, &a.1.study_s2).cmp(&(&b.1.alias, &b.1.study_s2)));
    if let Some(max) = c.max_clients {
        let allowed: BTreeSet<&str> = hits.iter().map(|(_, e)| e.alias.as_str()).collect::<BTreeSet<_>>().into_iter().take(max).collect();
        hits.retain(|(_, e)| allowed.contains(e.alias.as_str()));
    }
    hits
}
