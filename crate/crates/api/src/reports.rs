use std::collections::BTreeSet;
use std::io::{Cursor, Write};

use chrono::Utc;
use imgcollect_core::collector::SiteStatus;
use imgcollect_core::vault::{PseudonymRecord, StudyStatus, Vault};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Overview,
    Clients,
    Studies,
    Images,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::Overview, Section::Clients, Section::Studies, Section::Images];

    pub fn parse(s: &str) -> Option<Section> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "overview" => Section::Overview,
            "clients" => Section::Clients,
            "studies" => Section::Studies,
            "images" => Section::Images,
            _ => return None,
        })
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Section::Overview => "overview.csv",
            Section::Clients => "clients.csv",
            Section::Studies => "studies.csv",
            Section::Images => "images.csv",
        }
    }
}

/// One row per search term.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCheck {
    pub term: String,
    pub registered: bool,
    pub pseudonym: Option<String>,
    pub trial_code: Option<String>,
    pub opted_out: bool,
    pub studies_staged: usize,
    pub studies_transferred: usize,
    pub studies_quarantined: usize,
}

/// Search terms separated by commas, whitespace or new lines.
pub fn split_terms(text: &str) -> Vec<String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn lookup(vault: &Vault, term: &str) -> Option<PseudonymRecord> {
    vault.record_by_national_id(term).or_else(|| vault.record_by_local_id(term))
}

/// Matches each term against the primary (national) id or secondary (hospital) id.
pub fn check_clients(vault: &Vault, terms: &[String]) -> Vec<ClientCheck> {
    terms
        .iter()
        .map(|term| {
            let rec = lookup(vault, term);
            let studies = rec.as_ref().map(|r| vault.studies_for(&r.pseudonym)).unwrap_or_default();
            let count = |st| studies.iter().filter(|s| s.status == st).count();
            ClientCheck {
                term: term.clone(),
                registered: rec.is_some(),
                opted_out: vault.is_opted_out(term) || rec.as_ref().is_some_and(|r| r.opted_out),
                pseudonym: rec.as_ref().map(|r| r.pseudonym.clone()),
                trial_code: rec.as_ref().map(|r| r.trial_code.clone()),
                studies_staged: count(StudyStatus::Staged),
                studies_transferred: count(StudyStatus::Transferred),
                studies_quarantined: count(StudyStatus::Quarantined),
            }
        })
        .collect()
}

pub fn checks_csv(rows: &[ClientCheck]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "term",
            "registered",
            "pseudonym",
            "trial_code",
            "opted_out",
            "studies_staged",
            "studies_transferred",
            "studies_quarantined",
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

fn status_str(s: StudyStatus) -> &'static str {
    match s {
        StudyStatus::Staged => "staged",
        StudyStatus::Transferred => "transferred",
        StudyStatus::Quarantined => "quarantined",
    }
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// One CSV per requested section. Only pseudonyms and remapped UIDs appear.
pub fn section_tables(vault: &Vault, status: &SiteStatus, sections: &BTreeSet<Section>) -> Result<Vec<(Section, Vec<u8>)>, csv::Error> {
    let records = vault.records();
    let studies = vault.studies();
    let mut out = Vec::new();
    for s in sections {
        let bytes = match s {
            Section::Overview => {
                let opt = |t: Option<chrono::DateTime<Utc>>| t.map(|t| t.to_rfc3339()).unwrap_or_default();
                let images: usize = studies.iter().map(|s| s.images.len()).sum();
                table(
                    &["key", "value"],
                    vec![
                        vec!["generated_at".into(), Utc::now().to_rfc3339()],
                        vec!["clients_registered".into(), status.clients.to_string()],
                        vec!["opt_outs".into(), status.opt_outs.to_string()],
                        vec!["studies_staged".into(), status.studies_staged.to_string()],
                        vec!["studies_transferred".into(), status.studies_transferred.to_string()],
                        vec!["studies_quarantined".into(), status.studies_quarantined.to_string()],
                        vec!["images".into(), images.to_string()],
                        vec!["last_cycle_at".into(), opt(status.last_cycle_at)],
                        vec!["last_transfer_at".into(), opt(status.last_transfer_at)],
                    ],
                )?
            }
            Section::Clients => table(
                &["pseudonym", "trial_code", "date_enrolled", "registered_at", "studies"],
                records
                    .iter()
                    .map(|r| {
                        vec![
                            r.pseudonym.clone(),
                            r.trial_code.clone(),
                            r.date_enrolled.map(|d| d.to_string()).unwrap_or_default(),
                            r.created_at.to_rfc3339(),
                            studies.iter().filter(|s| s.pseudonym == r.pseudonym).count().to_string(),
                        ]
                    })
                    .collect(),
            )?,
            Section::Studies => table(
                &["pseudonym", "study_uid", "study_date", "modality", "status", "outcome", "images", "quarantine_reason"],
                studies
                    .iter()
                    .map(|s| {
                        vec![
                            s.pseudonym.clone(),
                            s.study_uid.clone(),
                            s.study_date.clone(),
                            s.modality.clone(),
                            status_str(s.status).into(),
                            s.outcome.clone().unwrap_or_default(),
                            s.images.len().to_string(),
                            s.quarantine_reason.clone().unwrap_or_default(),
                        ]
                    })
                    .collect(),
            )?,
            Section::Images => table(
                &["pseudonym", "study_uid", "series_uid", "sop_uid", "modality", "source_kind", "burn_in_masked", "status"],
                studies
                    .iter()
                    .flat_map(|s| {
                        s.images.iter().map(move |i| {
                            vec![
                                s.pseudonym.clone(),
                                s.study_uid.clone(),
                                i.series_uid.clone(),
                                i.sop_uid.clone(),
                                i.modality.clone(),
                                i.source_kind.as_str().into(),
                                i.burn_in_masked.to_string(),
                                status_str(s.status).into(),
                            ]
                        })
                    })
                    .collect(),
            )?,
        };
        out.push((*s, bytes));
    }
    Ok(out)
}

pub fn zip_tables(tables: &[(Section, Vec<u8>)]) -> zip::result::ZipResult<Vec<u8>> {
    let mut z = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
    for (s, bytes) in tables {
        z.start_file(s.file_name(), opts)?;
        z.write_all(bytes)?;
    }
    Ok(z.finish()?.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terms_split_on_any_separator() {
        assert_eq!(
            split_terms("1111111111 3333333333\nTHIS_IS_NOT_A_NUMBER,9999999999 ,"),
            vec!["1111111111", "3333333333", "THIS_IS_NOT_A_NUMBER", "9999999999"]
        );
        assert!(split_terms(" \n,").is_empty());
    }

    #[test]
    fn sections_parse() {
        assert_eq!(Section::parse(" Images"), Some(Section::Images));
        assert_eq!(Section::parse("tabs"), None);
    }
}
