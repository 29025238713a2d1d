use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::dicom::SourceKind;

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

mod hex_bytes_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudonymRecord {
    pub pseudonym: String,
    pub counter: u64,
    #[serde(with = "hex_bytes")]
    pub encrypted_national_id: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub national_id_hash: Vec<u8>,
    #[serde(with = "hex_bytes_opt", default)]
    pub local_id_hash: Option<Vec<u8>>,
    pub date_offset_days: i64,
    pub created_at: DateTime<Utc>,
    pub trial_code: String,
    pub opted_out: bool,
    #[serde(default)]
    pub date_enrolled: Option<NaiveDate>,
}

/// Input to registration. `local_id` may be linked later by the collector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub national_id: String,
    pub local_id: Option<String>,
    pub trial_code: String,
    pub date_enrolled: Option<NaiveDate>,
}

impl Registration {
    pub fn new(national_id: &str, local_id: &str, trial_code: &str) -> Self {
        Registration {
            national_id: national_id.to_string(),
            local_id: Some(local_id.to_string()).filter(|s| !s.trim().is_empty()),
            trial_code: trial_code.to_string(),
            date_enrolled: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UidScope {
    Stage1,
    Stage2,
}

impl UidScope {
    pub fn digit(self) -> u8 {
        match self {
            UidScope::Stage1 => 1,
            UidScope::Stage2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UidMapping {
    #[serde(with = "hex_bytes")]
    pub original_uid_hash: Vec<u8>,
    pub original_uid: String,
    pub replacement_uid: String,
    pub scope: UidScope,
    pub owner: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptOutSource {
    NationalList,
    LocalRequest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptOutEntry {
    #[serde(with = "hex_bytes")]
    pub national_id_hash: Vec<u8>,
    pub source: OptOutSource,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyStatus {
    Staged,
    Transferred,
    Quarantined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectedImage {
    pub series_uid: String,
    pub sop_uid: String,
    pub modality: String,
    pub source_kind: SourceKind,
    pub burn_in_masked: bool,
}

/// One study as collected at the site. UIDs and dates are already de-identified.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectedStudy {
    /// Hex keyed hash of the original Study Instance UID.
    pub key: String,
    pub pseudonym: String,
    pub study_uid: String,
    pub study_date: String,
    pub modality: String,
    pub status: StudyStatus,
    pub images: Vec<CollectedImage>,
    pub episode_token: Option<String>,
    pub outcome: Option<String>,
    pub collected_at: DateTime<Utc>,
    #[serde(default)]
    pub quarantine_reason: Option<String>,
    /// Hospital episode id; never leaves the vault.
    #[serde(default)]
    pub episode_id: Option<String>,
    /// Outcome date with the subject's offset applied.
    #[serde(default)]
    pub outcome_date: Option<String>,
    #[serde(default)]
    pub revised_from: Option<String>,
    #[serde(default)]
    pub year_of_birth: Option<i32>,
}
