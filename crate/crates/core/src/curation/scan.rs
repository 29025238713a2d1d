use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::deid::{mask_burn_in, Rect};
use crate::dicom::{parse_dataset, tags, DataSet, Value, Vr};
use crate::national_id::is_valid_national_id;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    /// Image from a model known to render identifiers into pixels, not blacked out.
    BurnInSuspect,
    /// Digitised film or other converted image.
    DigitisedScan,
    /// Screen capture of a dose or protocol page stored as an image.
    DoseReport,
    /// Image object without pixel data.
    MissingPixelData,
    /// A checksum-valid national id somewhere in a text value.
    NationalIdPattern,
    /// A person-name value that is not a pseudonym or the anonymised marker.
    PersonName,
}

impl FindingKind {
    /// Findings that stop publication; the rest are flags carried into the catalog.
    pub fn blocks_publication(self) -> bool {
        !matches!(self, FindingKind::DigitisedScan)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub path: String,
    pub kind: FindingKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanRules {
    /// Model name → pixel regions where the model renders identifiers.
    pub burn_in_models: BTreeMap<String, Vec<Rect>>,
    pub digitiser_models: BTreeSet<String>,
    /// Image Type values marking dose or protocol screen captures.
    pub dose_markers: Vec<String>,
}

impl Default for ScanRules {
    fn default() -> Self {
        ScanRules {
            burn_in_models: BTreeMap::new(),
            digitiser_models: BTreeSet::new(),
            dose_markers: vec!["DOSE".into(), "DOSE_INFO".into(), "SCREEN SAVE".into(), "PATIENT_PROTOCOL".into()],
        }
    }
}

fn national_id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^0-9.])(\d{3})[ -]?(\d{3})[ -]?(\d{4})(?:$|[^0-9.])").expect("valid regex"))
}

fn pseudonym_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Z][A-Z0-9]*-\d+$").expect("valid regex"))
}

/// Checksum-valid national ids appearing in free text.
pub fn national_ids_in(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut at = 0;
    while let Some(c) = national_id_re().captures_at(text, at) {
        let whole = c.get(0).expect("match");
        let id = format!("{}{}{}", &c[1], &c[2], &c[3]);
        if is_valid_national_id(&id) {
            out.push(id);
        }
        // step past the first digit so adjacent candidates are still seen
        at = c.get(1).expect("group").start() + 1;
        if at > whole.end() {
            break;
        }
    }
    out
}

fn person_name_suspect(value: &str) -> bool {
    let v = value.trim();
    !v.is_empty() && v != crate::deid::policy::ANON_PLACEHOLDER && !pseudonym_re().is_match(v)
}

fn model(ds: &DataSet) -> &str {
    ds.text(tags::MANUFACTURER_MODEL_NAME).unwrap_or("").trim()
}

fn pixels(ds: &DataSet) -> Option<&[u8]> {
    match &ds.get(tags::PIXEL_DATA)?.value {
        Value::Bytes(b) => Some(b),
        _ => None,
    }
}

/// True when any pixel inside `regions` is non-zero (8-bit, single sample).
fn regions_dirty(ds: &DataSet, regions: &[Rect]) -> bool {
    let (Some(px), Some(cols), Some(rows)) = (pixels(ds), ds.u16(tags::COLUMNS), ds.u16(tags::ROWS)) else {
        return true;
    };
    let bytes_per = (ds.u16(tags::BITS_ALLOCATED).unwrap_or(8) as usize).div_ceil(8);
    let (cols, rows) = (cols as usize, rows as usize);
    regions.iter().any(|r| {
        (r.y as usize..(r.y + r.height) as usize).take_while(|y| *y < rows).any(|y| {
            (r.x as usize..(r.x + r.width) as usize).take_while(|x| *x < cols).any(|x| {
                let i = (y * cols + x) * bytes_per;
                px.get(i..i + bytes_per).is_some_and(|s| s.iter().any(|b| *b != 0))
            })
        })
    })
}

/// Header and pixel findings for one dataset.
pub fn scan_dataset(ds: &DataSet, rules: &ScanRules) -> Vec<(FindingKind, String)> {
    let mut out = Vec::new();
    ds.walk(&mut |_, el| {
        let Some(text) = el.as_text() else { return };
        if el.vr == Vr::PN {
            if person_name_suspect(text) {
                out.push((FindingKind::PersonName, format!("{} holds a name-like value", el.tag)));
            }
        } else if el.vr != Vr::UI {
            for _ in national_ids_in(text) {
                out.push((FindingKind::NationalIdPattern, format!("{} holds a valid national id", el.tag)));
            }
        }
    });
    if let Some(regions) = rules.burn_in_models.get(model(ds)) {
        if regions.is_empty() || regions_dirty(ds, regions) {
            out.push((FindingKind::BurnInSuspect, format!("model {:?} and burn-in region not blacked out", model(ds))));
        }
    }
    let image_type = ds.text(tags::IMAGE_TYPE).unwrap_or("").to_ascii_uppercase();
    if image_type.split('\\').any(|v| rules.dose_markers.iter().any(|m| v.trim() == m)) {
        out.push((FindingKind::DoseReport, format!("image type {image_type:?}")));
    }
    let conversion = ds.text(tags::CONVERSION_TYPE).unwrap_or("").trim().to_string();
    if !conversion.is_empty() || rules.digitiser_models.contains(model(ds)) {
        out.push((FindingKind::DigitisedScan, format!("conversion type {conversion:?}, model {:?}", model(ds))));
    }
    if pixels(ds).is_none() {
        out.push((FindingKind::MissingPixelData, "no pixel data".into()));
    }
    out
}

/// Blacks out the configured regions of a burn-in model. Returns None when the model has
/// no template.
pub fn black_out(ds: &DataSet, rules: &ScanRules) -> Option<DataSet> {
    let regions = rules.burn_in_models.get(model(ds)).filter(|r| !r.is_empty())?;
    mask_burn_in(ds, regions).ok().map(|(d, _)| d)
}

/// Findings over a published (or any) tree: DICOM files by header and pixels, JSON and CSV
/// files by text.
pub fn scan_published(tree: &Path, rules: &ScanRules) -> Vec<Finding> {
    let mut out = Vec::new();
    for path in crate::collector::layout::walk_files(tree).unwrap_or_default() {
        let rel = path.strip_prefix(tree).unwrap_or(&path).to_string_lossy().into_owned();
        let Ok(bytes) = fs::read(&path) else { continue };
        match path.extension().and_then(|e| e.to_str()) {
            Some("dcm") => match parse_dataset(&bytes) {
                Ok(ds) => {
                    for (kind, detail) in scan_dataset(&ds, rules) {
                        out.push(Finding { path: rel.clone(), kind, detail });
                    }
                }
                Err(e) => out.push(Finding {
                    path: rel.clone(),
                    kind: FindingKind::MissingPixelData,
                    detail: format!("unreadable: {e}"),
                }),
            },
            Some("json") | Some("csv") | Some("ndjson") => {
                let text = String::from_utf8_lossy(&bytes);
                for id in national_ids_in(&text) {
                    let _ = id;
                    out.push(Finding {
                        path: rel.clone(),
                        kind: FindingKind::NationalIdPattern,
                        detail: "valid national id in text".into(),
                    });
                }
            }
            _ => {}
        }
    }
    out
}
