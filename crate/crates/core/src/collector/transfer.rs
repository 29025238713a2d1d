use std::fs;
use std::path::Path;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::layout::{self, sha256_file};
use super::record::CLINICAL_FILE;
use super::{Collector, CollectorError, FaultPoint};
use crate::vault::StudyStatus;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub studies_pushed: usize,
    pub images_pushed: usize,
    pub clinical_records_pushed: usize,
    pub bytes: u64,
    /// Local files removed after verified copies.
    pub local_deleted: usize,
    pub checksum_failures: usize,
    pub deletions_flushed: usize,
}

impl Collector {
    /// Pushes everything staged to the endpoint. Each file is copied to a temp name,
    /// verified by SHA-256, renamed, and only then removed locally. Safe to re-run.
    pub fn transfer_nightly(&self) -> Result<TransferReport, CollectorError> {
        let _busy = self.try_busy()?;
        let root = self.endpoint_root()?;
        let mut report = TransferReport::default();
        layout::sweep_temp(&root)?;

        let mut state = self.load_state()?;
        for p in std::mem::take(&mut state.pending_deletions) {
            self.delete_at_endpoint(&root, &p)?;
            report.deletions_flushed += 1;
        }
        self.save_state(&state)?;

        for pdir in layout::subdirs(&self.layout.staging())? {
            let pseudonym = file_name(&pdir);
            for sdir in layout::subdirs(&pdir)? {
                match self.push_study(&root, &pseudonym, &sdir, &mut report) {
                    Ok(()) => {}
                    Err(CollectorError::ChecksumMismatch(path)) => {
                        tracing::error!(path = %path.display(), "copy failed verification; staging kept");
                        report.checksum_failures += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            let clinical = pdir.join(CLINICAL_FILE);
            if clinical.is_file() {
                let target = root.join(&pseudonym).join(CLINICAL_FILE);
                report.bytes += copy_verified(&clinical, &target)?;
                fs::remove_file(&clinical)?;
                report.clinical_records_pushed += 1;
                report.local_deleted += 1;
            }
            if fs::read_dir(&pdir)?.next().is_none() {
                fs::remove_dir(&pdir)?;
            }
        }
        self.reconcile_transferred(&root)?;
        self.update_state(|s| {
            s.last_transfer_at = Some(Utc::now());
            s.last_transfer = Some(report.clone());
        })?;
        tracing::info!(?report, "transfer finished");
        Ok(report)
    }

    fn push_study(&self, root: &Path, pseudonym: &str, sdir: &Path, report: &mut TransferReport) -> Result<(), CollectorError> {
        let study = file_name(sdir);
        let files = layout::files_in(sdir)?;
        let sums = files.iter().map(|f| sha256_file(f)).collect::<Result<Vec<_>, _>>()?;
        let parent = root.join(pseudonym);
        let target = parent.join(&study);
        if !same_content(&target, &files, &sums)? {
            fs::create_dir_all(&parent)?;
            let tmp = parent.join(format!(".tmp-{study}"));
            layout::remove_dir_if_exists(&tmp)?;
            fs::create_dir_all(&tmp)?;
            for f in &files {
                fs::copy(f, tmp.join(f.file_name().expect("file name")))?;
            }
            if self.faults.take(FaultPoint::TransferCorruptCopy) {
                if let Some(f) = files.first() {
                    let p = tmp.join(f.file_name().expect("file name"));
                    let mut b = fs::read(&p)?;
                    if let Some(x) = b.last_mut() {
                        *x ^= 0xFF;
                    }
                    fs::write(&p, b)?;
                }
            }
            for (f, sum) in files.iter().zip(&sums) {
                let copy = tmp.join(f.file_name().expect("file name"));
                if sha256_file(&copy)? != *sum {
                    layout::remove_dir_if_exists(&tmp)?;
                    return Err(CollectorError::ChecksumMismatch(copy));
                }
            }
            self.fault(FaultPoint::TransferAfterCopy)?;
            layout::remove_dir_if_exists(&target)?;
            fs::rename(&tmp, &target)?;
            self.fault(FaultPoint::TransferAfterRename)?;
        }
        for f in &files {
            report.bytes += fs::metadata(f)?.len();
        }
        report.images_pushed += files.len();
        report.studies_pushed += 1;
        fs::remove_dir_all(sdir)?;
        report.local_deleted += files.len();
        self.fault(FaultPoint::TransferAfterStagingDelete)?;
        self.mark_transferred(pseudonym, &study)?;
        Ok(())
    }

    fn mark_transferred(&self, pseudonym: &str, study_uid: &str) -> Result<(), CollectorError> {
        for s in self.vault.studies_for(pseudonym) {
            if s.study_uid == study_uid {
                self.vault.set_study_status(&s.key, StudyStatus::Transferred)?;
            }
        }
        Ok(())
    }

    /// Staged rows whose files already left staging and sit at the endpoint were pushed by
    /// an interrupted run.
    fn reconcile_transferred(&self, root: &Path) -> Result<(), CollectorError> {
        for s in self.vault.studies() {
            if s.status != StudyStatus::Staged {
                continue;
            }
            let local = self.layout.staging().join(&s.pseudonym).join(&s.study_uid);
            if !local.exists() && root.join(&s.pseudonym).join(&s.study_uid).is_dir() {
                self.vault.set_study_status(&s.key, StudyStatus::Transferred)?;
            }
        }
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn same_content(target: &Path, files: &[std::path::PathBuf], sums: &[String]) -> Result<bool, CollectorError> {
    if !target.is_dir() {
        return Ok(false);
    }
    let existing = layout::files_in(target)?;
    if existing.len() != files.len() {
        return Ok(false);
    }
    for ((e, f), sum) in existing.iter().zip(files).zip(sums) {
        if e.file_name() != f.file_name() || sha256_file(e)? != *sum {
            return Ok(false);
        }
    }
    Ok(true)
}

fn copy_verified(src: &Path, dst: &Path) -> Result<u64, CollectorError> {
    let parent = dst.parent().expect("endpoint file has a parent");
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".tmp-{}", file_name(dst)));
    let n = fs::copy(src, &tmp)?;
    if sha256_file(&tmp)? != sha256_file(src)? {
        let _ = fs::remove_file(&tmp);
        return Err(CollectorError::ChecksumMismatch(tmp));
    }
    fs::rename(&tmp, dst)?;
    Ok(n)
}
