//! Simulated hospital: PACS with query/retrieve over TCP, clinical system, corpus generator.

mod client;
pub mod corpus;
pub mod protocol;
mod server;

use std::collections::HashMap;
use std::sync::RwLock;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use thiserror::Error;

use crate::dicom::serialize_file;
pub use client::{ClinicalClient, PacsClient};
pub use corpus::{
    seed_corpus, ClinicalEpisode, Corpus, CorpusSpec, Outcome, Sentinel, SentinelKind, SimClient,
    SimImage, SimStudy,
};
use corpus::{build_study, Planter, StudyPlan};
pub use protocol::{ClinicalQuery, FindQuery, Message, ProtocolError, StudyDescriptor};
pub use server::SimServer;

pub const DEFAULT_PACS_PORT: u16 = 11112;
pub const DEFAULT_CLINICAL_PORT: u16 = 11113;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("unknown episode {0}")]
    UnknownEpisode(String),
    #[error("unknown client {0}")]
    UnknownClient(String),
}

/// Fault knobs for exercising partial delivery.
#[derive(Clone, Debug, Default)]
pub struct SimFaults {
    /// Stop a move after this many images have been pushed.
    pub truncate_moves_after: Option<usize>,
}

struct SimState {
    corpus: Corpus,
    planter: Planter,
    clock: DateTime<Utc>,
    faults: SimFaults,
}

pub struct Simulator {
    spec: CorpusSpec,
    state: RwLock<SimState>,
}

impl Simulator {
    pub fn new(spec: CorpusSpec) -> Self {
        let corpus = seed_corpus(&spec);
        let clock = corpus
            .episodes
            .iter()
            .map(|e| e.updated_at)
            .max()
            .unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
        Simulator {
            state: RwLock::new(SimState {
                corpus,
                planter: Planter::new(spec.seed.wrapping_mul(31).wrapping_add(7)),
                clock,
                faults: SimFaults::default(),
            }),
            spec,
        }
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SimState> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SimState> {
        self.state.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn with_corpus<T>(&self, f: impl FnOnce(&Corpus) -> T) -> T {
        f(&self.read().corpus)
    }

    pub fn set_faults(&self, faults: SimFaults) {
        self.write().faults = faults;
    }

    pub fn faults(&self) -> SimFaults {
        self.read().faults.clone()
    }

    pub fn find(&self, q: &FindQuery) -> Vec<StudyDescriptor> {
        let state = self.read();
        state
            .corpus
            .studies
            .iter()
            .filter(|s| q.local_id.as_deref().is_none_or(|l| l == s.local_id))
            .filter(|s| q.modality.as_deref().is_none_or(|m| m.eq_ignore_ascii_case(&s.modality)))
            .filter(|s| q.date_from.as_deref().is_none_or(|d| s.study_date.as_str() >= d))
            .filter(|s| q.date_to.as_deref().is_none_or(|d| s.study_date.as_str() <= d))
            .map(|s| StudyDescriptor {
                study_uid: s.study_uid.clone(),
                local_id: s.local_id.clone(),
                modality: s.modality.clone(),
                study_date: s.study_date.clone(),
                n_images: s.images.len(),
            })
            .collect()
    }

    /// Serialized files of every instance in the study.
    pub fn study_files(&self, study_uid: &str) -> Result<Vec<(String, Vec<u8>)>, SimError> {
        let state = self.read();
        let study = state
            .corpus
            .studies
            .iter()
            .find(|s| s.study_uid == study_uid)
            .ok_or_else(|| SimError::UnknownStudy(study_uid.to_string()))?;
        Ok(study
            .images
            .iter()
            .map(|img| {
                let bytes = serialize_file(&img.dataset).expect("generated images serialize");
                (img.sop_uid.clone(), bytes)
            })
            .collect())
    }

    pub fn clinical(&self, q: &ClinicalQuery) -> Vec<ClinicalEpisode> {
        let state = self.read();
        let eps = state.corpus.episodes.iter();
        match q {
            ClinicalQuery::NewCasesSince { since } => eps.filter(|e| e.created_at > *since).cloned().collect(),
            ClinicalQuery::UpdatedSince { since } => eps.filter(|e| e.updated_at > *since).cloned().collect(),
            ClinicalQuery::Outcomes { episode_ids } => eps
                .filter(|e| episode_ids.contains(&e.episode_id))
                .cloned()
                .collect(),
        }
    }

    fn tick(state: &mut SimState) -> DateTime<Utc> {
        let now = Utc::now();
        state.clock = if now > state.clock { now } else { state.clock + Duration::seconds(1) };
        state.clock
    }

    /// Changes an episode's outcome, remembering the previous one.
    pub fn revise_outcome(&self, episode_id: &str, outcome: Outcome, date: NaiveDate) -> Result<ClinicalEpisode, SimError> {
        let mut state = self.write();
        let at = Self::tick(&mut state);
        let ep = state
            .corpus
            .episodes
            .iter_mut()
            .find(|e| e.episode_id == episode_id)
            .ok_or_else(|| SimError::UnknownEpisode(episode_id.to_string()))?;
        if ep.outcome != outcome {
            ep.revised_from = Some(ep.outcome);
            ep.outcome = outcome;
        }
        ep.outcome_date = date.format("%Y%m%d").to_string();
        ep.updated_at = at;
        Ok(ep.clone())
    }

    /// Adds a new study (and its episode) for an existing client.
    pub fn add_study(&self, local_id: &str, study_date: NaiveDate, outcome: Outcome) -> Result<SimStudy, SimError> {
        let mut state = self.write();
        let at = Self::tick(&mut state);
        let client = state
            .corpus
            .clients
            .iter()
            .find(|c| c.local_id == local_id)
            .cloned()
            .ok_or_else(|| SimError::UnknownClient(local_id.to_string()))?;
        let episode_id = format!("EP{:07}", state.corpus.episodes.len() + 1);
        let study = build_study(
            &mut state.planter,
            &self.spec,
            StudyPlan {
                client: &client,
                episode_id: episode_id.clone(),
                study_date,
                has_unprocessed: false,
                burn_in: false,
                digitised: false,
                unpoliced_name: false,
            },
        );
        state.corpus.episodes.push(ClinicalEpisode {
            episode_id,
            local_id: client.local_id.clone(),
            national_id: client.national_id.clone(),
            birth_year: client.birth_date[..4].parse().unwrap_or(1900),
            study_date: study.study_date.clone(),
            outcome,
            outcome_date: study.study_date.clone(),
            revised_from: None,
            created_at: at,
            updated_at: at,
        });
        state.corpus.studies.push(study.clone());
        Ok(study)
    }

    /// Study lookup by hospital UID, for test oracles.
    pub fn study(&self, study_uid: &str) -> Option<SimStudy> {
        self.read().corpus.studies.iter().find(|s| s.study_uid == study_uid).cloned()
    }

    pub fn episode(&self, episode_id: &str) -> Option<ClinicalEpisode> {
        self.read().corpus.episodes.iter().find(|e| e.episode_id == episode_id).cloned()
    }

    pub fn studies_by_local_id(&self) -> HashMap<String, Vec<String>> {
        let mut m: HashMap<String, Vec<String>> = HashMap::new();
        for s in &self.read().corpus.studies {
            m.entry(s.local_id.clone()).or_default().push(s.study_uid.clone());
        }
        m
    }
}
