//! Seeded synthetic corpus: clients, clinical episodes and DICOM studies carrying planted PHI.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deid::{builtin_policy, TagPattern};
use crate::dicom::{tags, DataElement, DataSet, SourceKind, Tag, Value, Vr, EXPLICIT_VR_LITTLE_ENDIAN};
use crate::national_id::with_check_digit;

pub const DEFAULT_BURN_IN_STATION: &str = "US-ROOM-BURNIN";
pub const BURN_IN_MODEL: &str = "SIM-US-9";
pub const DEFAULT_MODEL: &str = "SIM-DR-1";
pub const DIGITISER_MODEL: &str = "SIM-FILM-DIGITISER";
const IMPLEMENTATION_CLASS_UID: &str = "1.2.826.0.1.3680043.999.0.1";
/// Study-independent root for simulated hospital UIDs.
const HOSPITAL_UID_ROOT: &str = "2.25";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_clients: usize,
    pub studies_per_client: usize,
    /// Percent of clients whose episodes end in a biopsy.
    pub pct_positive: f64,
    /// Percent of studies that also carry an unprocessed (FOR PROCESSING) copy of every image.
    pub pct_unprocessed: f64,
    /// Percent of studies acquired at the burn-in station.
    pub pct_burn_in: f64,
    /// Percent of studies carrying a person name under a tag the policy does not list.
    pub pct_unpoliced: f64,
    /// Percent of studies that are digitised film (secondary capture).
    pub pct_digitised: f64,
    pub images_per_study: usize,
    pub rows: u16,
    pub columns: u16,
    pub seed: u64,
    pub burn_in_station: String,
    pub first_study_date: NaiveDate,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_clients: 10,
            studies_per_client: 1,
            pct_positive: 20.0,
            pct_unprocessed: 0.0,
            pct_burn_in: 0.0,
            pct_unpoliced: 0.0,
            pct_digitised: 0.0,
            images_per_study: 4,
            rows: 32,
            columns: 32,
            seed: 1,
            burn_in_station: DEFAULT_BURN_IN_STATION.to_string(),
            first_study_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Normal,
    Recall,
    BiopsyBenign,
    BiopsyMalignant,
    Pending,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Normal => "normal",
            Outcome::Recall => "recall",
            Outcome::BiopsyBenign => "biopsy-benign",
            Outcome::BiopsyMalignant => "biopsy-malignant",
            Outcome::Pending => "pending",
        }
    }

    pub fn is_biopsy(self) -> bool {
        matches!(self, Outcome::BiopsyBenign | Outcome::BiopsyMalignant)
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        Some(match s {
            "normal" => Outcome::Normal,
            "recall" => Outcome::Recall,
            "biopsy-benign" => Outcome::BiopsyBenign,
            "biopsy-malignant" => Outcome::BiopsyMalignant,
            "pending" => Outcome::Pending,
            _ => return None,
        })
    }
}

/// One screening episode in the simulated clinical system. Besides the outcome it carries
/// the identifiers and demographics a real clinical feed would include.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEpisode {
    pub episode_id: String,
    pub local_id: String,
    pub national_id: String,
    pub birth_year: i32,
    pub study_date: String,
    pub outcome: Outcome,
    pub outcome_date: String,
    pub revised_from: Option<Outcome>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// How a planted value should be looked for after de-identification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentinelKind {
    /// Long unique byte string; absence is checked by scanning raw file bytes.
    Bytes,
    /// Short or structured value (dates, times, numbers); checked element by element.
    Element,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinel {
    pub tag: Tag,
    pub vr: Vr,
    /// Sequence tag the value sits under, if nested.
    pub parent: Option<Tag>,
    pub value: String,
    pub kind: SentinelKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub sop_uid: String,
    pub series_uid: String,
    pub source_kind: SourceKind,
    pub sentinels: Vec<Sentinel>,
    #[serde(skip)]
    pub dataset: DataSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStudy {
    pub national_id: String,
    pub local_id: String,
    pub episode_id: String,
    pub study_uid: String,
    pub series_uids: Vec<String>,
    pub image_uids: Vec<String>,
    pub modality: String,
    pub study_date: String,
    pub has_unprocessed: bool,
    pub burn_in_station: bool,
    pub digitised: bool,
    pub unpoliced_name: bool,
    pub station_name: String,
    /// First value planted under each tag (top level of the first image).
    pub phi_sentinels: BTreeMap<Tag, String>,
    pub images: Vec<SimImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimClient {
    pub national_id: String,
    pub local_id: String,
    pub birth_date: String,
    pub patient_name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub clients: Vec<SimClient>,
    pub studies: Vec<SimStudy>,
    pub episodes: Vec<ClinicalEpisode>,
}

/// Deterministic source of unique planted values.
pub(crate) struct Planter {
    rng: ChaCha8Rng,
    counter: u64,
    uid_salt: u64,
}

impl Planter {
    pub(crate) fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uid_salt = rng.gen_range(100_000_000..1_000_000_000u64);
        Planter { rng, counter: 0, uid_salt }
    }

    fn next(&mut self) -> u64 {
        self.counter += 1;
        self.counter
    }

    /// 14 characters: fits AE/SH/CS limits.
    fn text(&mut self) -> String {
        format!("PHI{:011}", self.next())
    }

    pub(crate) fn uid(&mut self) -> String {
        let n = self.next();
        format!("{HOSPITAL_UID_ROOT}.{}{:012}", self.uid_salt, n)
    }

    fn date_near(&mut self, anchor: NaiveDate, spread_days: i64) -> NaiveDate {
        anchor + Duration::days(self.rng.gen_range(-spread_days..=spread_days))
    }

    fn time(&mut self) -> String {
        format!(
            "{:02}{:02}{:02}",
            self.rng.gen_range(7..19),
            self.rng.gen_range(0..60),
            self.rng.gen_range(1..60)
        )
    }
}

fn da(d: NaiveDate) -> String {
    d.format("%Y%m%d").to_string()
}

/// Concrete tag for a table pattern, picking a data-bearing element for fully wild elements.
fn instantiate(pattern: TagPattern) -> Option<Tag> {
    match pattern {
        TagPattern::Exact(t) => Some(t),
        TagPattern::Masked { value, mask } => {
            let group = (value >> 16) as u16;
            let element = if mask & 0xFFFF == 0 { 0x3000 } else { value as u16 };
            Some(Tag::new(group, element))
        }
        TagPattern::Private => None,
    }
}

/// Tags whose values the generator sets from study structure rather than fresh sentinels.
fn structural(tag: Tag) -> bool {
    [
        tags::PATIENT_ID,
        tags::PATIENT_BIRTH_DATE,
        tags::PATIENT_NAME,
        tags::STUDY_INSTANCE_UID,
        tags::SERIES_INSTANCE_UID,
        tags::SOP_INSTANCE_UID,
        tags::MEDIA_STORAGE_SOP_INSTANCE_UID,
        tags::STUDY_DATE,
        tags::STATION_NAME,
        tags::REFERENCED_IMAGE_SEQUENCE,
        tags::SOURCE_IMAGE_SEQUENCE,
        Tag::new(0x0010, 0x1000),
    ]
    .contains(&tag)
}

struct ImageCtx<'a> {
    client: &'a SimClient,
    study_uid: &'a str,
    series_uid: &'a str,
    sop_uid: &'a str,
    study_date: NaiveDate,
    modality: &'a str,
    sop_class: &'a str,
    source_kind: SourceKind,
    station: &'a str,
    model: &'a str,
    burn_in: bool,
    digitised: bool,
    unpoliced_name: bool,
    instance: usize,
    siblings: Vec<String>,
    rows: u16,
    columns: u16,
}

fn plant_value(
    p: &mut Planter,
    tag: Tag,
    vr: Vr,
    parent: Option<Tag>,
    anchor: NaiveDate,
    out: &mut Vec<Sentinel>,
) -> Option<DataElement> {
    let (value, kind) = match vr {
        Vr::AE | Vr::CS | Vr::SH | Vr::LO | Vr::LT | Vr::ST | Vr::UT | Vr::UC => (Value::Text(p.text()), SentinelKind::Bytes),
        Vr::PN => (Value::Text(format!("{}^SENT", p.text())), SentinelKind::Bytes),
        Vr::UI => (Value::Text(p.uid()), SentinelKind::Bytes),
        Vr::OB | Vr::OW | Vr::UN => (Value::Bytes(p.text().into_bytes()), SentinelKind::Bytes),
        Vr::DA => (Value::Text(da(p.date_near(anchor, 400))), SentinelKind::Element),
        Vr::TM => (Value::Text(p.time()), SentinelKind::Element),
        Vr::DT => {
            let d = p.date_near(anchor, 30);
            (Value::Text(format!("{}{}", da(d), p.time())), SentinelKind::Element)
        }
        Vr::DS => (Value::Text(format!("1.{}", p.rng.gen_range(100..999))), SentinelKind::Element),
        Vr::IS => (Value::Text(p.rng.gen_range(1..999).to_string()), SentinelKind::Element),
        Vr::US => (Value::U16(vec![p.rng.gen_range(1..=u16::MAX)]), SentinelKind::Element),
        Vr::SQ => return None,
        _ => return None,
    };
    let text = match &value {
        Value::Text(s) => s.clone(),
        Value::Bytes(b) => String::from_utf8_lossy(b).into_owned(),
        Value::U16(v) => v[0].to_string(),
        _ => unreachable!(),
    };
    out.push(Sentinel {
        tag,
        vr,
        parent,
        value: text,
        kind,
    });
    Some(DataElement::new(tag, vr, value))
}

/// Item placed in every cleared sequence: text, person name, date, time, UID, a private
/// element and a nested sequence.
fn sequence_item(p: &mut Planter, seq: Tag, anchor: NaiveDate, out: &mut Vec<Sentinel>) -> DataSet {
    let mut item = DataSet::new();
    for (tag, vr) in [
        (Tag::new(0x0008, 0x0104), Vr::LO),
        (Tag::new(0x0040, 0xA123), Vr::PN),
        (Tag::new(0x0040, 0xA121), Vr::DA),
        (Tag::new(0x0040, 0xA122), Vr::TM),
        (Tag::new(0x0040, 0xA124), Vr::UI),
    ] {
        if let Some(el) = plant_value(p, tag, vr, Some(seq), anchor, out) {
            item.insert(el);
        }
    }
    if let Some(el) = plant_value(p, Tag::new(0x0019, 0x1010), Vr::LO, Some(seq), anchor, out) {
        item.insert(DataElement::text(Tag::new(0x0019, 0x0010), Vr::LO, "SIMPRIV"));
        item.insert(el);
    }
    let content = Tag::new(0x0040, 0xA730);
    let mut nested = DataSet::new();
    if let Some(el) = plant_value(p, Tag::new(0x0040, 0xA123), Vr::PN, Some(content), anchor, out) {
        nested.insert(el);
    }
    item.insert(DataElement::sequence(content, vec![nested]));
    item
}

fn build_image(p: &mut Planter, ctx: &ImageCtx<'_>) -> SimImage {
    let mut s = Vec::new();
    let mut ds = DataSet::new();
    let anchor = ctx.study_date;

    for rule in builtin_policy() {
        let Some(tag) = instantiate(rule.pattern) else {
            continue;
        };
        if structural(tag) {
            continue;
        }
        let Some(vr) = rule.vr else { continue };
        if vr == Vr::SQ {
            let item = sequence_item(p, tag, anchor, &mut s);
            ds.insert(DataElement::sequence(tag, vec![item]));
        } else if let Some(el) = plant_value(p, tag, vr, None, anchor, &mut s) {
            ds.insert(el);
        }
    }

    // private block at top level
    ds.insert(DataElement::text(Tag::new(0x0009, 0x0010), Vr::LO, "SIMVENDOR"));
    if let Some(el) = plant_value(p, Tag::new(0x0009, 0x1001), Vr::LO, None, anchor, &mut s) {
        ds.insert(el);
    }

    let mut structural_text = |tag: Tag, vr: Vr, v: &str, kind: SentinelKind| {
        s.push(Sentinel {
            tag,
            vr,
            parent: None,
            value: v.to_string(),
            kind,
        });
        DataElement::text(tag, vr, v)
    };
    ds.insert(structural_text(tags::PATIENT_ID, Vr::LO, &ctx.client.local_id, SentinelKind::Bytes));
    ds.insert(structural_text(Tag::new(0x0010, 0x1000), Vr::LO, &ctx.client.national_id, SentinelKind::Bytes));
    ds.insert(structural_text(tags::PATIENT_NAME, Vr::PN, &ctx.client.patient_name, SentinelKind::Bytes));
    ds.insert(structural_text(tags::PATIENT_BIRTH_DATE, Vr::DA, &ctx.client.birth_date, SentinelKind::Element));
    ds.insert(structural_text(tags::STUDY_INSTANCE_UID, Vr::UI, ctx.study_uid, SentinelKind::Bytes));
    ds.insert(structural_text(tags::SERIES_INSTANCE_UID, Vr::UI, ctx.series_uid, SentinelKind::Bytes));
    ds.insert(structural_text(tags::SOP_INSTANCE_UID, Vr::UI, ctx.sop_uid, SentinelKind::Bytes));
    ds.insert(structural_text(tags::STUDY_DATE, Vr::DA, &da(ctx.study_date), SentinelKind::Element));
    ds.insert(structural_text(tags::STATION_NAME, Vr::SH, ctx.station, SentinelKind::Element));

    ds.insert(DataElement::text(tags::MEDIA_STORAGE_SOP_INSTANCE_UID, Vr::UI, ctx.sop_uid));
    ds.insert(DataElement::text(tags::MEDIA_STORAGE_SOP_CLASS_UID, Vr::UI, ctx.sop_class));
    ds.insert(DataElement::text(tags::TRANSFER_SYNTAX_UID, Vr::UI, EXPLICIT_VR_LITTLE_ENDIAN));
    ds.insert(DataElement::text(tags::IMPLEMENTATION_CLASS_UID, Vr::UI, IMPLEMENTATION_CLASS_UID));
    ds.insert(DataElement::text(tags::SOP_CLASS_UID, Vr::UI, ctx.sop_class));
    ds.insert(DataElement::text(tags::MODALITY, Vr::CS, ctx.modality));
    ds.insert(DataElement::text(tags::MANUFACTURER, Vr::LO, "SIMVENDOR"));
    ds.insert(DataElement::text(tags::MANUFACTURER_MODEL_NAME, Vr::LO, ctx.model));
    ds.insert(DataElement::text(tags::SERIES_NUMBER, Vr::IS, if ctx.source_kind == SourceKind::ForProcessing { "2" } else { "1" }));
    ds.insert(DataElement::text(tags::INSTANCE_NUMBER, Vr::IS, (ctx.instance + 1).to_string()));
    if let Some(intent) = ctx.source_kind.intent_value() {
        ds.insert(DataElement::text(tags::PRESENTATION_INTENT_TYPE, Vr::CS, intent));
    }
    let image_type = if ctx.source_kind == SourceKind::ForProcessing {
        "ORIGINAL\\PRIMARY"
    } else if ctx.digitised {
        "DERIVED\\SECONDARY"
    } else {
        "DERIVED\\PRIMARY"
    };
    ds.insert(DataElement::text(tags::IMAGE_TYPE, Vr::CS, image_type));
    if ctx.digitised {
        ds.insert(DataElement::text(tags::CONVERSION_TYPE, Vr::CS, "DF"));
    }
    if ctx.unpoliced_name {
        let v = format!("{}^ROGUE", p.text());
        s.push(Sentinel {
            tag: tags::CONSULTING_PHYSICIAN_NAME,
            vr: Vr::PN,
            parent: None,
            value: v.clone(),
            kind: SentinelKind::Bytes,
        });
        ds.insert(DataElement::text(tags::CONSULTING_PHYSICIAN_NAME, Vr::PN, v));
    }

    // references to the sibling images of the same series
    for seq in [tags::REFERENCED_IMAGE_SEQUENCE, tags::SOURCE_IMAGE_SEQUENCE] {
        let items = ctx
            .siblings
            .iter()
            .filter(|u| u.as_str() != ctx.sop_uid)
            .map(|u| {
                DataSet::new()
                    .with(DataElement::text(tags::REFERENCED_SOP_CLASS_UID, Vr::UI, ctx.sop_class))
                    .with(DataElement::text(tags::REFERENCED_SOP_INSTANCE_UID, Vr::UI, u.clone()))
            })
            .collect();
        ds.insert(DataElement::sequence(seq, items));
    }

    let (rows, cols) = (ctx.rows, ctx.columns);
    ds.insert(DataElement::u16(tags::SAMPLES_PER_PIXEL, 1));
    ds.insert(DataElement::text(tags::PHOTOMETRIC_INTERPRETATION, Vr::CS, "MONOCHROME2"));
    ds.insert(DataElement::u16(tags::ROWS, rows));
    ds.insert(DataElement::u16(tags::COLUMNS, cols));
    ds.insert(DataElement::u16(tags::BITS_ALLOCATED, 8));
    ds.insert(DataElement::u16(tags::BITS_STORED, 8));
    ds.insert(DataElement::u16(tags::HIGH_BIT, 7));
    ds.insert(DataElement::u16(tags::PIXEL_REPRESENTATION, 0));
    let mut pixels: Vec<u8> = (0..rows as usize * cols as usize)
        .map(|i| ((i / cols as usize + i % cols as usize + ctx.instance) % 200) as u8 + 20)
        .collect();
    if ctx.burn_in {
        for (y, row) in pixels.chunks_mut(cols as usize).enumerate().take(burn_in_band(rows) as usize) {
            for (x, px) in row.iter_mut().enumerate() {
                *px = if (x + y) % 3 == 0 { 255 } else { 250 };
            }
        }
    }
    if pixels.len() % 2 == 1 {
        pixels.push(0);
    }
    ds.insert(DataElement::bytes(tags::PIXEL_DATA, Vr::OB, pixels));

    SimImage {
        sop_uid: ctx.sop_uid.to_string(),
        series_uid: ctx.series_uid.to_string(),
        source_kind: ctx.source_kind,
        sentinels: s,
        dataset: ds,
    }
}

/// Height of the band at the top of burn-in images that carries rendered identifiers.
pub fn burn_in_band(rows: u16) -> u16 {
    (rows / 8).max(1)
}

/// Exact count of `pct` percent of `n`, rounded half up.
pub fn percent_count(pct: f64, n: usize) -> usize {
    ((pct.clamp(0.0, 100.0) * n as f64 / 100.0) + 0.5).floor() as usize
}

fn utc_noon(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_time(NaiveTime::from_hms_opt(12, 0, 0).expect("valid time")))
}

pub(crate) struct StudyPlan<'a> {
    pub client: &'a SimClient,
    pub episode_id: String,
    pub study_date: NaiveDate,
    pub has_unprocessed: bool,
    pub burn_in: bool,
    pub digitised: bool,
    pub unpoliced_name: bool,
}

pub(crate) fn build_study(p: &mut Planter, spec: &CorpusSpec, plan: StudyPlan<'_>) -> SimStudy {
    let study_uid = p.uid();
    let (modality, sop_class, station, model) = if plan.burn_in {
        ("US", tags::sop_class::ULTRASOUND, spec.burn_in_station.as_str(), BURN_IN_MODEL)
    } else if plan.digitised {
        ("MG", tags::sop_class::SECONDARY_CAPTURE, "FILM-ROOM", DIGITISER_MODEL)
    } else {
        ("MG", tags::sop_class::DIGITAL_MAMMOGRAPHY_PRESENTATION, "MG-ROOM-1", DEFAULT_MODEL)
    };
    let mut series_uids = vec![p.uid()];
    let n = spec.images_per_study;
    let presented: Vec<String> = (0..n).map(|_| p.uid()).collect();
    let mut kinds = vec![(series_uids[0].clone(), SourceKind::ForPresentation, sop_class, presented)];
    if plan.has_unprocessed {
        let series = p.uid();
        series_uids.push(series.clone());
        let raw: Vec<String> = (0..n).map(|_| p.uid()).collect();
        let class = if plan.burn_in || plan.digitised {
            sop_class
        } else {
            tags::sop_class::DIGITAL_MAMMOGRAPHY_PROCESSING
        };
        kinds.push((series, SourceKind::ForProcessing, class, raw));
    }

    let mut images = Vec::new();
    for (series_uid, kind, class, sops) in &kinds {
        for (i, sop) in sops.iter().enumerate() {
            let ctx = ImageCtx {
                client: plan.client,
                study_uid: &study_uid,
                series_uid,
                sop_uid: sop,
                study_date: plan.study_date,
                modality,
                sop_class: class,
                source_kind: *kind,
                station,
                model,
                burn_in: plan.burn_in,
                digitised: plan.digitised,
                unpoliced_name: plan.unpoliced_name,
                instance: i,
                siblings: sops.clone(),
                rows: spec.rows,
                columns: spec.columns,
            };
            images.push(build_image(p, &ctx));
        }
    }
    let phi_sentinels = images
        .first()
        .map(|img| {
            let mut m = BTreeMap::new();
            for s in img.sentinels.iter().filter(|s| s.parent.is_none()) {
                m.entry(s.tag).or_insert_with(|| s.value.clone());
            }
            m
        })
        .unwrap_or_default();
    SimStudy {
        national_id: plan.client.national_id.clone(),
        local_id: plan.client.local_id.clone(),
        episode_id: plan.episode_id,
        image_uids: images.iter().map(|i| i.sop_uid.clone()).collect(),
        series_uids,
        study_uid,
        modality: modality.to_string(),
        study_date: da(plan.study_date),
        has_unprocessed: plan.has_unprocessed,
        burn_in_station: plan.burn_in,
        digitised: plan.digitised,
        unpoliced_name: plan.unpoliced_name,
        station_name: station.to_string(),
        phi_sentinels,
        images,
    }
}

/// Flags `count` of `n` slots, chosen by shuffle.
fn pick(rng: &mut ChaCha8Rng, n: usize, pct: f64) -> Vec<bool> {
    let mut flags = vec![false; n];
    let k = percent_count(pct, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(k) {
        flags[i] = true;
    }
    flags
}

/// Generates the corpus. Same spec, same output.
pub fn seed_corpus(spec: &CorpusSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planter = Planter::new(spec.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut seen = HashSet::new();
    let mut clients = Vec::with_capacity(spec.n_clients);
    while clients.len() < spec.n_clients {
        let Some(nid) = with_check_digit(rng.gen_range(100_000_000..999_999_999)) else {
            continue;
        };
        if !seen.insert(nid.clone()) {
            continue;
        }
        let i = clients.len() + 1;
        let birth = NaiveDate::from_ymd_opt(rng.gen_range(1940..1976), rng.gen_range(1..=12), rng.gen_range(1..=28))
            .expect("valid date");
        clients.push(SimClient {
            national_id: nid,
            local_id: format!("HOSP{:06}", i),
            birth_date: da(birth),
            patient_name: format!("{}^CLIENT{:06}", planter.text(), i),
        });
    }

    let positive = pick(&mut rng, spec.n_clients, spec.pct_positive);
    let total_studies = spec.n_clients * spec.studies_per_client;
    let unprocessed = pick(&mut rng, total_studies, spec.pct_unprocessed);
    let burn_in = pick(&mut rng, total_studies, spec.pct_burn_in);
    let unpoliced = pick(&mut rng, total_studies, spec.pct_unpoliced);
    let digitised = pick(&mut rng, total_studies, spec.pct_digitised);

    let mut studies = Vec::with_capacity(total_studies);
    let mut episodes = Vec::with_capacity(total_studies);
    for (ci, client) in clients.iter().enumerate() {
        let mut date = spec.first_study_date + Duration::days(rng.gen_range(0..365));
        for si in 0..spec.studies_per_client {
            let k = ci * spec.studies_per_client + si;
            let last = si + 1 == spec.studies_per_client;
            let outcome = if positive[ci] && last {
                if rng.gen_bool(0.5) {
                    Outcome::BiopsyMalignant
                } else {
                    Outcome::BiopsyBenign
                }
            } else if rng.gen_bool(0.15) {
                Outcome::Recall
            } else {
                Outcome::Normal
            };
            let episode_id = format!("EP{:07}", k + 1);
            let created = utc_noon(date);
            episodes.push(ClinicalEpisode {
                episode_id: episode_id.clone(),
                local_id: client.local_id.clone(),
                national_id: client.national_id.clone(),
                birth_year: client.birth_date[..4].parse().expect("seeded birth date"),
                study_date: da(date),
                outcome,
                outcome_date: da(date + Duration::days(rng.gen_range(7..60))),
                revised_from: None,
                created_at: created,
                updated_at: created,
            });
            studies.push(build_study(
                &mut planter,
                spec,
                StudyPlan {
                    client,
                    episode_id,
                    study_date: date,
                    has_unprocessed: unprocessed[k],
                    burn_in: burn_in[k] && !digitised[k],
                    digitised: digitised[k],
                    unpoliced_name: unpoliced[k],
                },
            ));
            date += Duration::days(rng.gen_range(300..1100));
        }
    }
    Corpus {
        clients,
        studies,
        episodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::{parse_dataset, serialize_dataset};

    #[test]
    fn empty_spec_empty_corpus() {
        let c = seed_corpus(&CorpusSpec {
            n_clients: 0,
            ..CorpusSpec::default()
        });
        assert!(c.studies.is_empty() && c.clients.is_empty() && c.episodes.is_empty());
    }

    #[test]
    fn counts_and_distinct_local_ids() {
        let c = seed_corpus(&CorpusSpec {
            n_clients: 10,
            studies_per_client: 2,
            ..CorpusSpec::default()
        });
        assert_eq!(c.studies.len(), 20);
        let ids: HashSet<_> = c.studies.iter().map(|s| s.local_id.clone()).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn exact_positive_count() {
        let spec = CorpusSpec {
            n_clients: 100,
            pct_positive: 20.0,
            images_per_study: 1,
            rows: 4,
            columns: 4,
            seed: 42,
            ..CorpusSpec::default()
        };
        let c = seed_corpus(&spec);
        let biopsy: HashSet<_> = c
            .episodes
            .iter()
            .filter(|e| e.outcome.is_biopsy())
            .map(|e| e.local_id.clone())
            .collect();
        assert_eq!(biopsy.len(), 20);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = CorpusSpec {
            n_clients: 3,
            seed: 9,
            pct_unprocessed: 50.0,
            ..CorpusSpec::default()
        };
        let a = seed_corpus(&spec);
        let b = seed_corpus(&spec);
        assert_eq!(a, b);
        for (x, y) in a.studies.iter().zip(&b.studies) {
            for (i, j) in x.images.iter().zip(&y.images) {
                assert_eq!(serialize_dataset(&i.dataset).unwrap(), serialize_dataset(&j.dataset).unwrap());
            }
        }
    }

    #[test]
    fn images_round_trip_and_plant_every_row() {
        let c = seed_corpus(&CorpusSpec {
            n_clients: 1,
            pct_unprocessed: 100.0,
            ..CorpusSpec::default()
        });
        let study = &c.studies[0];
        assert_eq!(study.images.len(), 8);
        let img = &study.images[0];
        let bytes = serialize_dataset(&img.dataset).unwrap();
        assert_eq!(parse_dataset(&bytes).unwrap(), img.dataset);
        let rules = builtin_policy();
        for rule in &rules {
            if let Some(tag) = instantiate(rule.pattern) {
                assert!(img.dataset.contains(tag), "row {} not planted", rule.pattern);
            }
        }
        let bytes_sentinels: Vec<_> = img.sentinels.iter().filter(|s| s.kind == SentinelKind::Bytes).collect();
        let unique: HashSet<_> = bytes_sentinels.iter().map(|s| s.value.clone()).collect();
        assert_eq!(unique.len(), bytes_sentinels.len());
    }
}
