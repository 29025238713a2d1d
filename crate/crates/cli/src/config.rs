use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use imgcollect_api::ApiConfig;
use imgcollect_core::collector::CollectorConfig;
use imgcollect_core::curation::CurationConfig;
use imgcollect_core::sim::{CorpusSpec, DEFAULT_CLINICAL_PORT, DEFAULT_PACS_PORT};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Everything the binary reads from its TOML file. Secrets never live here; they come from
/// `IMGCOLLECT_*` (site) and `IMGCOLLECT_CENTRAL_*` (central) environment variables.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub collector: CollectorConfig,
    pub curation: CurationConfig,
    pub api: ApiSection,
    pub sim: SimSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiSection {
    pub bind: SocketAddr,
    pub session_idle_secs: u64,
    pub accounts_file: PathBuf,
}

impl Default for ApiSection {
    fn default() -> Self {
        let d = ApiConfig::default();
        ApiSection {
            bind: d.bind,
            session_idle_secs: d.session_idle_secs,
            accounts_file: PathBuf::from("accounts.json"),
        }
    }
}

impl ApiSection {
    pub fn server(&self) -> ApiConfig {
        ApiConfig {
            bind: self.bind,
            session_idle_secs: self.session_idle_secs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    pub pacs_bind: String,
    pub clinical_bind: String,
    pub corpus: CorpusSpec,
    /// AE title → address the simulated PACS pushes retrieved studies to.
    pub destinations: BTreeMap<String, SocketAddr>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            pacs_bind: format!("127.0.0.1:{DEFAULT_PACS_PORT}"),
            clinical_bind: format!("127.0.0.1:{DEFAULT_CLINICAL_PORT}"),
            corpus: CorpusSpec::default(),
            destinations: BTreeMap::new(),
        }
    }
}

impl Config {
    /// Reads the file if given, otherwise uses defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        match path {
            Some(p) => read_file(p),
            None => Ok(Config::default()),
        }
    }
}

/// Parses TOML, or JSON when the extension says so.
pub fn read_file<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some("toml") | None => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some(other) => bail!("{}: unsupported file type .{other} (use .toml or .json)", path.display()),
    }
}
