use std::collections::HashMap;

use chrono::NaiveDate;
use imgcollect_core::national_id::{validate_national_id, InvalidReason};
use imgcollect_core::vault::{Registration, Vault, VaultError};
use serde::{Deserialize, Serialize};

/// Columns of the registration template, in order.
pub const TEMPLATE_HEADER: [&str; 4] = ["Primary ID", "Secondary ID", "Trial Code", "Date Enrolled"];

/// One template row. `row_number` counts the header as row 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRow {
    pub row_number: usize,
    pub primary_id: String,
    pub secondary_id: String,
    pub trial_code: String,
    pub date_enrolled: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowReason {
    InvalidNationalId,
    MissingPrimaryId,
    MissingTrialCode,
    InvalidDate,
    DuplicateTrialCode,
    AlreadyRegistered,
    OptedOut,
    Unreadable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row_number: usize,
    pub reason: RowReason,
    pub detail: String,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchOutcome {
    Accepted { accepted: usize },
    Rejected { errors: Vec<RowError> },
}

pub fn template_csv() -> String {
    format!("{}\n", TEMPLATE_HEADER.join(","))
}

/// Parses an uploaded template. Entirely blank lines are skipped but still counted, so row
/// numbers match what a spreadsheet shows.
pub fn parse_rows(text: &str) -> Result<Vec<BatchRow>, Vec<RowError>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(r) => {
                let field = |i: usize| r.get(i).unwrap_or("").trim().to_string();
                if r.iter().all(|f| f.trim().is_empty()) {
                    continue;
                }
                rows.push(BatchRow {
                    row_number: r.position().map_or(0, |p| p.line() as usize),
                    primary_id: field(0),
                    secondary_id: field(1),
                    trial_code: field(2),
                    date_enrolled: field(3),
                });
            }
            Err(e) => errors.push(RowError {
                row_number: e.position().map_or(0, |p| p.line() as usize),
                reason: RowReason::Unreadable,
                detail: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(errors)
    }
}

/// ISO `YYYY-MM-DD`; empty means not given.
pub fn parse_enrolled(text: &str) -> Result<Option<NaiveDate>, chrono::ParseError> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(None);
    }
    NaiveDate::parse_from_str(t, "%Y-%m-%d").map(Some)
}

fn invalid_id_detail(r: InvalidReason) -> String {
    format!("invalid national id ({r})")
}

/// Field checks that need no vault. Every problem in a row is reported.
pub fn validate_row(row: &BatchRow) -> Vec<RowError> {
    let mut out = Vec::new();
    let mut push = |reason, detail: String| {
        out.push(RowError {
            row_number: row.row_number,
            reason,
            detail,
        })
    };
    if row.primary_id.is_empty() {
        push(RowReason::MissingPrimaryId, "primary id is required".into());
    } else if let Err(r) = validate_national_id(&row.primary_id) {
        push(RowReason::InvalidNationalId, invalid_id_detail(r));
    }
    if row.trial_code.is_empty() {
        push(RowReason::MissingTrialCode, "trial code is required".into());
    }
    if parse_enrolled(&row.date_enrolled).is_err() {
        push(RowReason::InvalidDate, format!("{:?} is not a date (YYYY-MM-DD)", row.date_enrolled));
    }
    out
}

pub fn row_error(row_number: usize, e: &VaultError) -> RowError {
    let reason = match e {
        VaultError::InvalidNationalId(_) => RowReason::InvalidNationalId,
        VaultError::MissingTrialCode => RowReason::MissingTrialCode,
        VaultError::DuplicateTrialCode(_) => RowReason::DuplicateTrialCode,
        VaultError::AlreadyRegistered => RowReason::AlreadyRegistered,
        VaultError::OptedOut => RowReason::OptedOut,
        _ => RowReason::Unreadable,
    };
    RowError {
        row_number,
        reason,
        detail: e.to_string(),
    }
}

fn registration(row: &BatchRow) -> Registration {
    Registration {
        national_id: row.primary_id.clone(),
        local_id: Some(row.secondary_id.clone()).filter(|s| !s.is_empty()),
        trial_code: row.trial_code.clone(),
        date_enrolled: parse_enrolled(&row.date_enrolled).ok().flatten(),
    }
}

/// All or nothing: any row error rejects the batch and nothing is written.
pub fn upload(vault: &Vault, rows: &[BatchRow]) -> BatchOutcome {
    let mut errors: Vec<RowError> = rows.iter().flat_map(validate_row).collect();
    // trial codes repeated inside the file
    let mut first_use: HashMap<&str, usize> = HashMap::new();
    for r in rows.iter().filter(|r| !r.trial_code.is_empty()) {
        if let Some(first) = first_use.get(r.trial_code.as_str()) {
            errors.push(RowError {
                row_number: r.row_number,
                reason: RowReason::DuplicateTrialCode,
                detail: format!("trial code {:?} is also used on row {first}", r.trial_code),
            });
        } else {
            first_use.insert(&r.trial_code, r.row_number);
        }
    }
    if errors.is_empty() {
        let regs: Vec<Registration> = rows.iter().map(registration).collect();
        match vault.register_batch(&regs) {
            Ok(recs) => {
                tracing::info!(accepted = recs.len(), "batch registered");
                return BatchOutcome::Accepted { accepted: recs.len() };
            }
            Err(es) => errors.extend(es.iter().map(|(i, e)| row_error(rows.get(*i).map_or(0, |r| r.row_number), e))),
        }
    }
    errors.sort_by_key(|e| e.row_number);
    BatchOutcome::Rejected { errors }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_numbers_follow_the_sheet() {
        let rows = parse_rows("Primary ID,Secondary ID,Trial Code,Date Enrolled\n1,a,b,\n,,,\n2,c,d\n").unwrap();
        assert_eq!(rows.iter().map(|r| r.row_number).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(rows[1].date_enrolled, "");
    }

    #[test]
    fn dates() {
        assert_eq!(parse_enrolled(""), Ok(None));
        assert!(parse_enrolled("2024-02-29").unwrap().is_some());
        assert!(parse_enrolled("2023-02-29").is_err());
        assert!(parse_enrolled("44/33/2043").is_err());
        assert!(parse_enrolled("banana").is_err());
    }

    #[test]
    fn every_problem_in_a_row_is_listed() {
        let row = BatchRow {
            row_number: 9,
            primary_id: "abc".into(),
            date_enrolled: "x".into(),
            ..BatchRow::default()
        };
        let reasons: Vec<RowReason> = validate_row(&row).into_iter().map(|e| e.reason).collect();
        assert_eq!(reasons, vec![RowReason::InvalidNationalId, RowReason::MissingTrialCode, RowReason::InvalidDate]);
    }
}
