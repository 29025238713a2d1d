//! Test harness: wires a simulated hospital to a collector in a temp dir, and scans output
//! trees for planted identifiers.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aho_corasick::AhoCorasick;
use imgcollect_core::collector::{Collector, CollectorConfig, SelectionCriteria};
use imgcollect_core::curation::{CurationConfig, Curator, ScanRules};
use imgcollect_core::deid::Rect;
use imgcollect_core::dicom::{parse_dataset, tags, DataSet, Tag, Value, Vr};
use imgcollect_core::sim::corpus::{burn_in_band, BURN_IN_MODEL, DIGITISER_MODEL};
use imgcollect_core::sim::{Corpus, CorpusSpec, Sentinel, SentinelKind, SimImage, SimServer, Simulator};
use imgcollect_core::vault::VaultSecrets;
use tempfile::TempDir;

pub const SECRETS_LABEL: &str = "harness";

pub fn secrets() -> VaultSecrets {
    VaultSecrets::insecure_for_testing(SECRETS_LABEL)
}

/// Central secrets, independent of every site's.
pub fn central_secrets() -> VaultSecrets {
    VaultSecrets::insecure_for_testing("central-harness")
}

/// Central scan rules knowing the simulator's burn-in and digitiser models.
pub fn central_rules(spec: &CorpusSpec) -> ScanRules {
    let mut rules = ScanRules::default();
    rules.burn_in_models.insert(
        BURN_IN_MODEL.to_string(),
        vec![Rect {
            x: 0,
            y: 0,
            width: spec.columns as u32,
            height: burn_in_band(spec.rows) as u32,
        }],
    );
    rules.digitiser_models.insert(DIGITISER_MODEL.to_string());
    rules
}

/// Simulated PACS and clinical system plus one collection site, all under a temp dir.
pub struct SiteHarness {
    pub sim: Arc<Simulator>,
    pub pacs: SimServer,
    pub clinical: SimServer,
    pub dir: TempDir,
    collector: Option<Arc<Collector>>,
}

impl SiteHarness {
    pub fn new(spec: CorpusSpec) -> SiteHarness {
        let sim = Arc::new(Simulator::new(spec));
        let pacs = SimServer::start_pacs(sim.clone(), "127.0.0.1:0").expect("start pacs");
        let clinical = SimServer::start_clinical(sim.clone(), "127.0.0.1:0").expect("start clinical");
        let dir = tempfile::tempdir().expect("tempdir");
        fs::create_dir_all(dir.path().join("endpoint")).expect("endpoint dir");
        let mut h = SiteHarness {
            sim,
            pacs,
            clinical,
            dir,
            collector: None,
        };
        h.restart();
        h
    }

    /// Site configuration pointing at the simulator, with a mask template for the burn-in station.
    pub fn config(&self) -> CollectorConfig {
        let spec = self.sim.spec();
        let mut cfg = CollectorConfig {
            site_dir: self.dir.path().join("site"),
            endpoint: format!("file://{}", self.endpoint().display()),
            pacs_addr: self.pacs.addr(),
            clinical_addr: self.clinical.addr(),
            receiver_bind: "127.0.0.1:0".into(),
            io_timeout_secs: 10,
            ..CollectorConfig::default()
        };
        cfg.burn_in_regions.insert(
            spec.burn_in_station.clone(),
            vec![Rect {
                x: 0,
                y: 0,
                width: spec.columns as u32,
                height: burn_in_band(spec.rows) as u32,
            }],
        );
        cfg
    }

    pub fn endpoint(&self) -> PathBuf {
        self.dir.path().join("endpoint")
    }

    pub fn staging(&self) -> PathBuf {
        self.dir.path().join("site").join("staging")
    }

    pub fn collector(&self) -> &Collector {
        self.collector.as_ref().expect("collector open")
    }

    /// The running collector, for services that hold it (the admin API).
    pub fn shared_collector(&self) -> Arc<Collector> {
        self.collector.clone().expect("collector open")
    }

    /// Drops the collector (as a crashed process would) and opens a fresh one on the same site.
    pub fn restart(&mut self) {
        let cfg = self.config();
        self.restart_with(cfg);
    }

    pub fn restart_with(&mut self, cfg: CollectorConfig) {
        self.collector = None;
        let c = Collector::open(cfg, secrets()).expect("open collector");
        let addr: SocketAddr = c.start_receiver().expect("receiver");
        self.pacs.register_destination(&c.config().receiver_ae, addr);
        self.collector = Some(Arc::new(c));
    }

    pub fn central_config(&self) -> CurationConfig {
        CurationConfig {
            root: self.dir.path().join("central"),
            inbox: self.endpoint(),
            rules: central_rules(self.sim.spec()),
            ..CurationConfig::default()
        }
    }

    pub fn curator(&self) -> Curator {
        self.curator_with(self.central_config())
    }

    pub fn curator_with(&self, cfg: CurationConfig) -> Curator {
        Curator::open(cfg, central_secrets()).expect("open curator")
    }

    pub fn published(&self) -> PathBuf {
        self.dir.path().join("central").join("published")
    }

    /// Collects every case and pushes it to the endpoint.
    pub fn deliver_all(&self) {
        let c = self.collector();
        c.run_collection_cycle(&SelectionCriteria::everything()).expect("collect");
        c.transfer_nightly().expect("transfer");
    }

    pub fn corpus(&self) -> Corpus {
        self.sim.with_corpus(|c| c.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leak {
    pub file: PathBuf,
    pub tag: Tag,
    pub value: String,
}

fn uid_like(v: &str) -> bool {
    v.bytes().all(|b| b.is_ascii_digit() || b == b'.')
}

/// Planted long values, searched for in raw bytes. Numeric values only count when not
/// preceded by a digit or dot (a remapped UID may contain any 10-digit substring).
pub struct ByteScanner {
    ac: AhoCorasick,
    patterns: Vec<(String, Tag)>,
}

impl ByteScanner {
    pub fn new(corpus: &Corpus) -> ByteScanner {
        let mut seen = HashMap::new();
        for img in corpus.studies.iter().flat_map(|s| &s.images) {
            for s in img.sentinels.iter().filter(|s| s.kind == SentinelKind::Bytes) {
                seen.entry(s.value.clone()).or_insert(s.tag);
            }
        }
        for c in &corpus.clients {
            seen.entry(c.national_id.clone()).or_insert(Tag::new(0x0010, 0x1000));
            seen.entry(c.local_id.clone()).or_insert(tags::PATIENT_ID);
        }
        for e in &corpus.episodes {
            seen.entry(e.episode_id.clone()).or_insert(Tag::new(0, 0));
        }
        let patterns: Vec<(String, Tag)> = seen.into_iter().filter(|(v, _)| v.len() >= 6).collect();
        let ac = AhoCorasick::new(patterns.iter().map(|(v, _)| v.as_bytes())).expect("build scanner");
        ByteScanner { ac, patterns }
    }

    pub fn scan_bytes(&self, bytes: &[u8]) -> Vec<(String, Tag)> {
        let mut out = Vec::new();
        for m in self.ac.find_overlapping_iter(bytes) {
            let (value, tag) = &self.patterns[m.pattern().as_usize()];
            let prev_numeric = m.start() > 0 && {
                let b = bytes[m.start() - 1];
                b.is_ascii_digit() || b == b'.'
            };
            if uid_like(value) && prev_numeric {
                continue;
            }
            out.push((value.clone(), *tag));
        }
        out
    }

    pub fn scan_tree(&self, root: &Path) -> Vec<Leak> {
        let mut leaks = Vec::new();
        for file in files_under(root) {
            let Ok(bytes) = fs::read(&file) else { continue };
            for (value, tag) in self.scan_bytes(&bytes) {
                leaks.push(Leak {
                    file: file.clone(),
                    tag,
                    value,
                });
            }
        }
        leaks
    }
}

/// Literal search for arbitrary identifiers in file contents and paths. A hit only counts
/// when the match is not embedded in a longer token (letters, digits or dots either side).
pub struct NeedleScanner {
    ac: AhoCorasick,
    needles: Vec<String>,
}

fn token_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'.'
}

impl NeedleScanner {
    pub fn new<I: IntoIterator<Item = String>>(needles: I) -> NeedleScanner {
        let mut needles: Vec<String> = needles.into_iter().filter(|n| !n.is_empty()).collect();
        needles.sort();
        needles.dedup();
        let ac = AhoCorasick::new(&needles).expect("build scanner");
        NeedleScanner { ac, needles }
    }

    pub fn len(&self) -> usize {
        self.needles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.needles.is_empty()
    }

    pub fn find(&self, bytes: &[u8]) -> Vec<String> {
        self.ac
            .find_overlapping_iter(bytes)
            .filter(|m| {
                let before = m.start() > 0 && token_byte(bytes[m.start() - 1]);
                let after = m.end() < bytes.len() && token_byte(bytes[m.end()]);
                !before && !after
            })
            .map(|m| self.needles[m.pattern().as_usize()].clone())
            .collect()
    }

    /// Hits in one file's contents. DICOM files are searched value by value, since the
    /// bytes after a value (the next tag) can look like letters or digits.
    pub fn scan_file(&self, file: &Path) -> Vec<String> {
        let Ok(bytes) = fs::read(file) else { return Vec::new() };
        let parsed = file.extension().is_some_and(|e| e == "dcm").then(|| parse_dataset(&bytes).ok()).flatten();
        let Some(ds) = parsed else { return self.find(&bytes) };
        let mut found = Vec::new();
        ds.walk(&mut |_, el| match &el.value {
            Value::Text(t) => found.extend(self.find(t.as_bytes())),
            Value::Bytes(b) => found.extend(self.find(b)),
            _ => {}
        });
        found
    }

    /// `(file, needle)` for every hit under `root` (or in `root` itself when it is a file),
    /// in file contents or in the relative path.
    pub fn scan_tree(&self, root: &Path) -> Vec<(PathBuf, String)> {
        let files = if root.is_file() { vec![root.to_path_buf()] } else { files_under(root) };
        let mut hits = Vec::new();
        for file in files {
            let rel = file.strip_prefix(root).unwrap_or(&file).to_string_lossy().into_owned();
            let mut found = self.find(rel.as_bytes());
            found.extend(self.scan_file(&file));
            hits.extend(found.into_iter().map(|n| (file.clone(), n)));
        }
        hits
    }
}

/// Element-level check of short planted values (dates, times, numbers) for one output
/// image against the source image it came from.
pub fn element_leaks(source: &SimImage, output: &DataSet) -> Vec<(Tag, String)> {
    let mut found = Vec::new();
    output.walk(&mut |path, el| {
        let parent = path.last().map(|p| p.tag);
        let Some(text) = el.as_text().map(str::to_string).or_else(|| el.as_u16().map(|v| v.to_string())) else {
            return;
        };
        for s in source.sentinels.iter().filter(|s| s.kind == SentinelKind::Element) {
            if s.tag == el.tag && s.parent == parent && text.trim() == s.value && !permitted_equal(s) {
                found.push((s.tag, s.value.clone()));
            }
        }
    });
    found
}

/// Values a correct transform may legitimately leave unchanged.
fn permitted_equal(s: &Sentinel) -> bool {
    (s.tag == tags::PATIENT_BIRTH_DATE && s.value.ends_with("0101"))
        || (s.vr == Vr::TM && s.value.trim_end_matches(['0', '.']).is_empty())
}

/// Every regular file under `root`, sorted.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// DICOM files under `root` with their parsed datasets.
pub fn dicom_files(root: &Path) -> Vec<(PathBuf, DataSet)> {
    files_under(root)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "dcm"))
        .map(|p| {
            let ds = parse_dataset(&fs::read(&p).expect("read output")).expect("output parses");
            (p, ds)
        })
        .collect()
}

/// Sources keyed by original SOP Instance UID.
pub fn images_by_sop(corpus: &Corpus) -> HashMap<String, SimImage> {
    corpus
        .studies
        .iter()
        .flat_map(|s| s.images.iter())
        .map(|i| (i.sop_uid.clone(), i.clone()))
        .collect()
}

/// True when the top band of the image (where the burn-in station renders text) is all zero.
pub fn band_cleared(ds: &DataSet) -> bool {
    let rows = ds.u16(tags::ROWS).unwrap_or(0);
    let cols = ds.u16(tags::COLUMNS).unwrap_or(0) as usize;
    let band = burn_in_band(rows) as usize;
    match ds.get(tags::PIXEL_DATA).and_then(|e| match &e.value {
        Value::Bytes(b) => Some(b),
        _ => None,
    }) {
        Some(px) => px.iter().take(band * cols).all(|&b| b == 0),
        None => false,
    }
}
