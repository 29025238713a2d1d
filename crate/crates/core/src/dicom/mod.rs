//! Minimal DICOM object model: explicit VR little endian only.

mod parse;
pub mod tags;
mod write;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_dataset, ParseError};
pub use write::{serialize_dataset, serialize_file, WriteError};

/// The only transfer syntax this model reads or writes.
pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

/// A (group, element) pair identifying a header field.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Tag { group, element }
    }

    /// Odd groups are manufacturer-private.
    pub const fn is_private(self) -> bool {
        self.group % 2 == 1
    }

    pub const fn is_file_meta(self) -> bool {
        self.group == 0x0002
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X},{:04X}", self.group, self.element)
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed tag {0:?}: expected GGGG,EEEE")]
pub struct TagParseError(pub String);

impl FromStr for Tag {
    type Err = TagParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (g, e) = trimmed
            .split_once(',')
            .ok_or_else(|| TagParseError(s.to_string()))?;
        if g.len() != 4 || e.len() != 4 {
            return Err(TagParseError(s.to_string()));
        }
        let group = u16::from_str_radix(g, 16).map_err(|_| TagParseError(s.to_string()))?;
        let element = u16::from_str_radix(e, 16).map_err(|_| TagParseError(s.to_string()))?;
        Ok(Tag { group, element })
    }
}

impl From<Tag> for String {
    fn from(t: Tag) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Tag {
    type Error = TagParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Value representation codes understood by the parser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vr {
    AE,
    AS,
    AT,
    CS,
    DA,
    DS,
    DT,
    FD,
    FL,
    IS,
    LO,
    LT,
    OB,
    OD,
    OF,
    OL,
    OV,
    OW,
    PN,
    SH,
    SL,
    SQ,
    SS,
    ST,
    SV,
    TM,
    UC,
    UI,
    UL,
    UN,
    UR,
    US,
    UT,
    UV,
}

impl Vr {
    pub const ALL: [Vr; 34] = [
        Vr::AE,
        Vr::AS,
        Vr::AT,
        Vr::CS,
        Vr::DA,
        Vr::DS,
        Vr::DT,
        Vr::FD,
        Vr::FL,
        Vr::IS,
        Vr::LO,
        Vr::LT,
        Vr::OB,
        Vr::OD,
        Vr::OF,
        Vr::OL,
        Vr::OV,
        Vr::OW,
        Vr::PN,
        Vr::SH,
        Vr::SL,
        Vr::SQ,
        Vr::SS,
        Vr::ST,
        Vr::SV,
        Vr::TM,
        Vr::UC,
        Vr::UI,
        Vr::UL,
        Vr::UN,
        Vr::UR,
        Vr::US,
        Vr::UT,
        Vr::UV,
    ];

    pub fn code(self) -> [u8; 2] {
        let s = self.as_str().as_bytes();
        [s[0], s[1]]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Vr::AE => "AE",
            Vr::AS => "AS",
            Vr::AT => "AT",
            Vr::CS => "CS",
            Vr::DA => "DA",
            Vr::DS => "DS",
            Vr::DT => "DT",
            Vr::FD => "FD",
            Vr::FL => "FL",
            Vr::IS => "IS",
            Vr::LO => "LO",
            Vr::LT => "LT",
            Vr::OB => "OB",
            Vr::OD => "OD",
            Vr::OF => "OF",
            Vr::OL => "OL",
            Vr::OV => "OV",
            Vr::OW => "OW",
            Vr::PN => "PN",
            Vr::SH => "SH",
            Vr::SL => "SL",
            Vr::SQ => "SQ",
            Vr::SS => "SS",
            Vr::ST => "ST",
            Vr::SV => "SV",
            Vr::TM => "TM",
            Vr::UC => "UC",
            Vr::UI => "UI",
            Vr::UL => "UL",
            Vr::UN => "UN",
            Vr::UR => "UR",
            Vr::US => "US",
            Vr::UT => "UT",
            Vr::UV => "UV",
        }
    }

    pub fn from_code(code: [u8; 2]) -> Option<Vr> {
        Vr::ALL.into_iter().find(|vr| vr.code() == code)
    }

    /// VRs encoded with two reserved bytes and a 32-bit length.
    pub fn has_long_length(self) -> bool {
        matches!(
            self,
            Vr::OB
                | Vr::OD
                | Vr::OF
                | Vr::OL
                | Vr::OV
                | Vr::OW
                | Vr::SQ
                | Vr::SV
                | Vr::UC
                | Vr::UN
                | Vr::UR
                | Vr::UT
                | Vr::UV
        )
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            Vr::AE
                | Vr::AS
                | Vr::CS
                | Vr::DA
                | Vr::DS
                | Vr::DT
                | Vr::IS
                | Vr::LO
                | Vr::LT
                | Vr::PN
                | Vr::SH
                | Vr::ST
                | Vr::TM
                | Vr::UC
                | Vr::UI
                | Vr::UR
                | Vr::UT
        )
    }

    pub(crate) fn pad_byte(self) -> u8 {
        if self == Vr::UI {
            0
        } else {
            b' '
        }
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 {
            return Err(format!("unknown VR {s:?}"));
        }
        Vr::from_code([b[0], b[1]]).ok_or_else(|| format!("unknown VR {s:?}"))
    }
}

/// Decoded element payload. Text values are held without their even-length padding.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Text(String),
    Bytes(Vec<u8>),
    U16(Vec<u16>),
    I16(Vec<i16>),
    U32(Vec<u32>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    Sequence(Vec<DataSet>),
}

impl Value {
    pub fn is_empty(&self) -> bool {
        match self {
            Value::Text(s) => s.is_empty(),
            Value::Bytes(b) => b.is_empty(),
            Value::U16(v) => v.is_empty(),
            Value::I16(v) => v.is_empty(),
            Value::U32(v) => v.is_empty(),
            Value::I32(v) => v.is_empty(),
            Value::F32(v) => v.is_empty(),
            Value::F64(v) => v.is_empty(),
            Value::Sequence(v) => v.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataElement {
    pub tag: Tag,
    pub vr: Vr,
    pub value: Value,
}

impl DataElement {
    pub fn new(tag: Tag, vr: Vr, value: Value) -> Self {
        DataElement { tag, vr, value }
    }

    pub fn text(tag: Tag, vr: Vr, value: impl Into<String>) -> Self {
        DataElement::new(tag, vr, Value::Text(value.into()))
    }

    pub fn bytes(tag: Tag, vr: Vr, value: Vec<u8>) -> Self {
        DataElement::new(tag, vr, Value::Bytes(value))
    }

    pub fn u16(tag: Tag, value: u16) -> Self {
        DataElement::new(tag, Vr::US, Value::U16(vec![value]))
    }

    pub fn sequence(tag: Tag, items: Vec<DataSet>) -> Self {
        DataElement::new(tag, Vr::SQ, Value::Sequence(items))
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.value {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_u16(&self) -> Option<u16> {
        match &self.value {
            Value::U16(v) => v.first().copied(),
            _ => None,
        }
    }

    pub fn items(&self) -> &[DataSet] {
        match &self.value {
            Value::Sequence(items) => items,
            _ => &[],
        }
    }
}

/// Processed/unprocessed distinction, read from Presentation Intent Type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    ForPresentation,
    ForProcessing,
    Other,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::ForPresentation => "for-presentation",
            SourceKind::ForProcessing => "for-processing",
            SourceKind::Other => "other",
        }
    }

    /// Presentation Intent Type value written for this kind.
    pub fn intent_value(self) -> Option<&'static str> {
        match self {
            SourceKind::ForPresentation => Some("FOR PRESENTATION"),
            SourceKind::ForProcessing => Some("FOR PROCESSING"),
            SourceKind::Other => None,
        }
    }
}

/// Chain of (sequence tag, item index) steps from the root to an element's parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathStep {
    pub tag: Tag,
    pub item: usize,
}

/// Ordered tag → element map. Sequences hold child data sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSet {
    elements: BTreeMap<Tag, DataElement>,
}

impl DataSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element: DataElement) -> Option<DataElement> {
        self.elements.insert(element.tag, element)
    }

    /// Builder-style insert.
    pub fn with(mut self, element: DataElement) -> Self {
        self.insert(element);
        self
    }

    pub fn put_text(&mut self, tag: Tag, vr: Vr, value: impl Into<String>) {
        self.insert(DataElement::text(tag, vr, value));
    }

    pub fn get(&self, tag: Tag) -> Option<&DataElement> {
        self.elements.get(&tag)
    }

    pub fn get_mut(&mut self, tag: Tag) -> Option<&mut DataElement> {
        self.elements.get_mut(&tag)
    }

    pub fn remove(&mut self, tag: Tag) -> Option<DataElement> {
        self.elements.remove(&tag)
    }

    pub fn contains(&self, tag: Tag) -> bool {
        self.elements.contains_key(&tag)
    }

    pub fn text(&self, tag: Tag) -> Option<&str> {
        self.get(tag).and_then(DataElement::as_text)
    }

    pub fn u16(&self, tag: Tag) -> Option<u16> {
        self.get(tag).and_then(DataElement::as_u16)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Elements in ascending tag order.
    pub fn iter(&self) -> impl Iterator<Item = &DataElement> {
        self.elements.values()
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.elements.keys().copied()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&DataElement) -> bool) {
        self.elements.retain(|_, el| keep(el));
    }

    pub fn has_file_meta(&self) -> bool {
        self.elements.keys().any(|t| t.is_file_meta())
    }

    pub fn source_kind(&self) -> SourceKind {
        match self.text(tags::PRESENTATION_INTENT_TYPE).map(str::trim) {
            Some("FOR PRESENTATION") => SourceKind::ForPresentation,
            Some("FOR PROCESSING") => SourceKind::ForProcessing,
            _ => SourceKind::Other,
        }
    }

    /// Depth-first visit of every element; a sequence is visited before its items' elements.
    pub fn walk<F>(&self, visitor: &mut F)
    where
        F: FnMut(&[PathStep], &DataElement),
    {
        let mut path = Vec::new();
        self.walk_inner(&mut path, visitor);
    }

    fn walk_inner<F>(&self, path: &mut Vec<PathStep>, visitor: &mut F)
    where
        F: FnMut(&[PathStep], &DataElement),
    {
        for el in self.elements.values() {
            visitor(path, el);
            if let Value::Sequence(items) = &el.value {
                for (i, item) in items.iter().enumerate() {
                    path.push(PathStep { tag: el.tag, item: i });
                    item.walk_inner(path, visitor);
                    path.pop();
                }
            }
        }
    }

    /// Total number of elements including every sequence descendant.
    pub fn deep_len(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_, _| n += 1);
        n
    }
}

impl FromIterator<DataElement> for DataSet {
    fn from_iter<I: IntoIterator<Item = DataElement>>(iter: I) -> Self {
        let mut ds = DataSet::new();
        for el in iter {
            ds.insert(el);
        }
        ds
    }
}

/// Non-DICOM image (e.g. ultrasound JPEG) carried as an opaque blob with a sidecar record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpaqueImage {
    #[serde(skip)]
    pub payload: Vec<u8>,
    pub media_type: String,
    pub acquired_at: Option<chrono::NaiveDateTime>,
    pub station_name: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_renders_uppercase_zero_padded() {
        assert_eq!(Tag::new(0x10, 0x10).to_string(), "0010,0010");
        assert_eq!(Tag::new(0x7fe0, 0xa).to_string(), "7FE0,000A");
        assert_eq!("0008,002a".parse::<Tag>().unwrap(), Tag::new(0x0008, 0x002A));
        assert_eq!("(0010,21C0)".parse::<Tag>().unwrap(), Tag::new(0x0010, 0x21C0));
        assert!("0010-0010".parse::<Tag>().is_err());
        assert!("010,0010".parse::<Tag>().is_err());
    }

    #[test]
    fn private_iff_odd_group_exhaustive() {
        for g in 0..=u16::MAX {
            assert_eq!(Tag::new(g, 0x0010).is_private(), g % 2 == 1);
        }
    }

    #[test]
    fn vr_codes_round_trip() {
        for vr in Vr::ALL {
            assert_eq!(Vr::from_code(vr.code()), Some(vr));
            assert_eq!(vr.as_str().parse::<Vr>().unwrap(), vr);
        }
        assert_eq!(Vr::from_code(*b"ZZ"), None);
    }

    fn sq_fixture() -> DataSet {
        let item = |n: u16| {
            DataSet::new()
                .with(DataElement::text(Tag::new(0x0008, 0x0100), Vr::SH, format!("C{n}")))
                .with(DataElement::text(Tag::new(0x0008, 0x0104), Vr::LO, "x"))
        };
        DataSet::new()
            .with(DataElement::sequence(Tag::new(0x0008, 0x1032), vec![item(1), item(2)]))
    }

    #[test]
    fn walk_flat_dataset_visits_in_tag_order() {
        let ds = DataSet::new()
            .with(DataElement::text(tags::PATIENT_NAME, Vr::PN, "A"))
            .with(DataElement::text(tags::MODALITY, Vr::CS, "MG"))
            .with(DataElement::text(tags::STUDY_DATE, Vr::DA, "20240101"));
        let mut seen = Vec::new();
        ds.walk(&mut |_, el| seen.push(el.tag));
        assert_eq!(seen, vec![tags::STUDY_DATE, tags::MODALITY, tags::PATIENT_NAME]);
    }

    #[test]
    fn walk_sequence_visits_parent_then_children() {
        let ds = sq_fixture();
        let mut seen = Vec::new();
        ds.walk(&mut |path, el| seen.push((path.len(), el.tag)));
        assert_eq!(seen.len(), 1 + 4);
        assert_eq!(seen[0], (0, Tag::new(0x0008, 0x1032)));
        assert!(seen[1..].iter().all(|(depth, _)| *depth == 1));
    }

    #[test]
    fn walk_reaches_grandchildren() {
        let inner = sq_fixture();
        let outer = DataSet::new().with(DataElement::sequence(
            Tag::new(0x0040, 0x0275),
            vec![inner.clone(), inner],
        ));
        // count oracle: 1 outer SQ + 2 items x (1 inner SQ + 2 items x 2 leaves)
        let mut depth2 = 0;
        let mut total = 0;
        outer.walk(&mut |path, _| {
            total += 1;
            if path.len() == 2 {
                depth2 += 1;
            }
        });
        assert_eq!(total, 1 + 2 * (1 + 4));
        assert_eq!(depth2, 8);
        assert_eq!(outer.deep_len(), total);
    }

    #[test]
    fn source_kind_from_presentation_intent() {
        let mut ds = DataSet::new();
        assert_eq!(ds.source_kind(), SourceKind::Other);
        ds.put_text(tags::PRESENTATION_INTENT_TYPE, Vr::CS, "FOR PROCESSING");
        assert_eq!(ds.source_kind(), SourceKind::ForProcessing);
        ds.put_text(tags::PRESENTATION_INTENT_TYPE, Vr::CS, "FOR PRESENTATION");
        assert_eq!(ds.source_kind(), SourceKind::ForPresentation);
    }
}
