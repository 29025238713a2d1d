use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::deid::Rect;
use crate::sim::{Outcome, DEFAULT_CLINICAL_PORT, DEFAULT_PACS_PORT};

pub const DEFAULT_RECEIVER_AE: &str = "SMARTDICOMRCV";

/// Hours (UTC, 0-23) during which cycles may start. `start > end` wraps midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGate {
    pub start_hour: u32,
    pub end_hour: u32,
}

impl WindowGate {
    pub fn is_open(&self, at: DateTime<Utc>) -> bool {
        let h = at.hour();
        if self.start_hour <= self.end_hour {
            (self.start_hour..self.end_hour).contains(&h)
        } else {
            h >= self.start_hour || h < self.end_hour
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectorConfig {
    pub site_dir: PathBuf,
    /// Endpoint directory; a `file://` prefix is accepted.
    pub endpoint: String,
    pub site_prefix: String,
    pub pacs_addr: SocketAddr,
    pub clinical_addr: SocketAddr,
    pub receiver_bind: String,
    pub receiver_ae: String,
    pub io_timeout_secs: u64,
    pub window: Option<WindowGate>,
    /// Station name → pixel regions that carry burned-in identifiers.
    pub burn_in_regions: BTreeMap<String, Vec<Rect>>,
    /// Stations known to burn in identifiers but without a mask template; their studies are quarantined.
    pub burn_in_unmasked_stations: BTreeSet<String>,
    /// Optional site overlay for the tag table (same tab-separated format).
    pub policy_overlay: Option<PathBuf>,
    pub auto_trial_prefix: String,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            site_dir: PathBuf::from("site"),
            endpoint: "endpoint".into(),
            site_prefix: "S01".into(),
            pacs_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PACS_PORT)),
            clinical_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_CLINICAL_PORT)),
            receiver_bind: "127.0.0.1:11114".into(),
            receiver_ae: DEFAULT_RECEIVER_AE.into(),
            io_timeout_secs: 30,
            window: None,
            burn_in_regions: BTreeMap::new(),
            burn_in_unmasked_stations: BTreeSet::new(),
            policy_overlay: None,
            auto_trial_prefix: "AUTO".into(),
        }
    }
}

impl CollectorConfig {
    pub fn endpoint_path(&self) -> PathBuf {
        PathBuf::from(self.endpoint.strip_prefix("file://").unwrap_or(&self.endpoint))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCriteria {
    /// Outcomes collected in full.
    pub include_outcomes: BTreeSet<Outcome>,
    /// Fraction of normal cases collected; selection is a keyed hash so re-runs agree.
    pub normals_sample_rate: f64,
    /// Empty means every modality.
    pub modalities: BTreeSet<String>,
    /// Only clinical cases created after this instant; `None` resumes from the last cycle.
    pub since: Option<DateTime<Utc>>,
    pub ignore_window: bool,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            include_outcomes: [Outcome::Recall, Outcome::BiopsyBenign, Outcome::BiopsyMalignant]
                .into_iter()
                .collect(),
            normals_sample_rate: 1.0,
            modalities: BTreeSet::new(),
            since: None,
            ignore_window: false,
        }
    }
}

impl SelectionCriteria {
    /// Every case, every modality, from the beginning.
    pub fn everything() -> Self {
        SelectionCriteria {
            include_outcomes: [
                Outcome::Normal,
                Outcome::Recall,
                Outcome::BiopsyBenign,
                Outcome::BiopsyMalignant,
                Outcome::Pending,
            ]
            .into_iter()
            .collect(),
            normals_sample_rate: 1.0,
            modalities: BTreeSet::new(),
            since: Some(DateTime::<Utc>::UNIX_EPOCH),
            ignore_window: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn window_wraps_midnight() {
        let g = WindowGate { start_hour: 22, end_hour: 6 };
        let at = |h| Utc.with_ymd_and_hms(2024, 1, 1, h, 0, 0).unwrap();
        assert!(g.is_open(at(23)));
        assert!(g.is_open(at(2)));
        assert!(!g.is_open(at(6)));
        assert!(!g.is_open(at(12)));
        let day = WindowGate { start_hour: 9, end_hour: 17 };
        assert!(day.is_open(at(9)) && !day.is_open(at(17)));
    }

    #[test]
    fn endpoint_uri() {
        let c = CollectorConfig {
            endpoint: "file:///tmp/ep".into(),
            ..Default::default()
        };
        assert_eq!(c.endpoint_path(), PathBuf::from("/tmp/ep"));
    }
}
