use serde::{Deserialize, Serialize};

use crate::vault::{CollectedStudy, StudyStatus};

pub const CLINICAL_FILE: &str = "clinical.json";
/// Endpoint subdirectory holding deletion notices for the central side.
pub const DELETIONS_DIR: &str = "_deletions";

/// Per-subject clinical record shipped next to the images. Dates are offset; episode ids
/// are keyed tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub pseudonym: String,
    pub episodes: Vec<EpisodeRecord>,
    pub demographics_allowed: Demographics,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_ref: Option<String>,
    pub study_uid: String,
    pub study_date: String,
    pub modality: String,
    pub outcome: Option<String>,
    pub outcome_date: Option<String>,
    pub revised_from: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub year_of_birth: Option<i32>,
}

impl ClinicalRecord {
    pub fn build(pseudonym: &str, studies: &[CollectedStudy]) -> ClinicalRecord {
        let mut episodes: Vec<EpisodeRecord> = studies
            .iter()
            .filter(|s| s.status != StudyStatus::Quarantined)
            .map(|s| EpisodeRecord {
                episode_ref: s.episode_token.clone(),
                study_uid: s.study_uid.clone(),
                study_date: s.study_date.clone(),
                modality: s.modality.clone(),
                outcome: s.outcome.clone(),
                outcome_date: s.outcome_date.clone(),
                revised_from: s.revised_from.clone(),
            })
            .collect();
        episodes.sort_by(|a, b| (&a.study_date, &a.study_uid).cmp(&(&b.study_date, &b.study_uid)));
        ClinicalRecord {
            pseudonym: pseudonym.to_string(),
            episodes,
            demographics_allowed: Demographics {
                year_of_birth: studies.iter().find_map(|s| s.year_of_birth),
            },
        }
    }
}
