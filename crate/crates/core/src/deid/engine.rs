use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{ActionKind, DeidAction, Policy, Stage, ANON_PLACEHOLDER};
use crate::dicom::{tags, DataElement, DataSet, Tag, Value, Vr};

/// Substituted for dates that are present but unusable (unparseable, "null", all zeros).
pub const NULL_DATE: &str = "19000101";
/// Birth date written when the source value is absent or unusable.
pub const UNKNOWN_BIRTH_DATE: &str = "01010101";
pub const ZERO_TIME: &str = "000000";
pub const FIXED_DATETIME: &str = "19000101000000";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed UID {0:?}")]
pub struct MalformedUid(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeidError {
    #[error("no registered subject for patient id {0:?}")]
    UnregisteredClient(String),
    #[error("identifying elements not covered by policy: {0:?}")]
    PolicyGap(Vec<Tag>),
    #[error("action {action:?} cannot apply to {tag} with VR {vr}")]
    VrMismatch { tag: Tag, vr: Vr, action: ActionKind },
    #[error(transparent)]
    Uid(#[from] MalformedUid),
}

/// Per-subject values the engine needs from the pseudonym store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectContext {
    pub pseudonym: String,
    pub date_offset_days: i64,
}

/// Pseudonym store as seen by the engine.
pub trait IdentityProvider {
    /// Looks up the subject whose identifier appears in Patient ID.
    fn subject_for(&self, patient_id: &str) -> Option<SubjectContext>;
    /// Returns the stable replacement for `original`, recording `owner` for cascades.
    fn remap_uid(&self, original: &str, owner: &str) -> Result<String, MalformedUid>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidReport {
    pub elements_removed: usize,
    pub elements_modified: usize,
    pub uids_remapped: usize,
    pub private_removed: usize,
    pub burn_in_masked: bool,
    pub surviving_unpoliced_tags: Vec<Tag>,
}

struct Ctx<'a> {
    policy: &'a Policy,
    stage: Stage,
    subject: &'a SubjectContext,
    provider: &'a dyn IdentityProvider,
    report: DeidReport,
}

/// Applies `policy` at `stage`. The subject is found through Patient ID.
///
/// Any PN, DA, TM or DT element no rule covers stops the run with [`DeidError::PolicyGap`];
/// the caller quarantines the object.
pub fn apply(
    ds: &DataSet,
    provider: &dyn IdentityProvider,
    stage: Stage,
    policy: &Policy,
) -> Result<(DataSet, DeidReport), DeidError> {
    let patient_id = ds.text(tags::PATIENT_ID).unwrap_or("").trim().to_string();
    let subject = provider
        .subject_for(&patient_id)
        .ok_or(DeidError::UnregisteredClient(patient_id))?;

    let gaps = unpoliced_tags(ds, policy);
    if !gaps.is_empty() {
        return Err(DeidError::PolicyGap(gaps));
    }

    let mut ctx = Ctx {
        policy,
        stage,
        subject: &subject,
        provider,
        report: DeidReport::default(),
    };
    let out = process(ds, &mut ctx, false)?;
    Ok((out, ctx.report))
}

/// PN/DA/TM/DT elements, at any depth, with no rule and no clearing ancestor.
pub fn unpoliced_tags(ds: &DataSet, policy: &Policy) -> Vec<Tag> {
    fn visit(ds: &DataSet, policy: &Policy, out: &mut Vec<Tag>) {
        for el in ds.iter() {
            if el.tag.is_private() {
                continue;
            }
            match policy.lookup(el.tag) {
                Some(rule) if rule.action.kind == ActionKind::ClearSequenceRecursive => {}
                Some(_) => {
                    for item in el.items() {
                        visit(item, policy, out);
                    }
                }
                None => {
                    if matches!(el.vr, Vr::PN | Vr::DA | Vr::TM | Vr::DT) && !out.contains(&el.tag) {
                        out.push(el.tag);
                    }
                    for item in el.items() {
                        visit(item, policy, out);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    visit(ds, policy, &mut out);
    out.sort();
    out
}

fn process(ds: &DataSet, ctx: &mut Ctx<'_>, cleared: bool) -> Result<DataSet, DeidError> {
    let mut out = DataSet::new();
    for el in ds.iter() {
        if el.tag.is_private() {
            let n = deep_count(el);
            ctx.report.elements_removed += n;
            ctx.report.private_removed += n;
            continue;
        }
        let action = action_for(el, ctx, cleared);
        match action {
            None => {
                if let Value::Sequence(items) = &el.value {
                    let items = items
                        .iter()
                        .map(|item| process(item, ctx, cleared))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.insert(DataElement::sequence(el.tag, items));
                } else {
                    out.insert(el.clone());
                }
            }
            Some(action) if action.kind == ActionKind::ClearSequenceRecursive => {
                let Value::Sequence(items) = &el.value else {
                    return Err(mismatch(el, action.kind));
                };
                let items = items
                    .iter()
                    .map(|item| process(item, ctx, true))
                    .collect::<Result<Vec<_>, _>>()?;
                out.insert(DataElement::sequence(el.tag, items));
            }
            Some(action) => match transform(el, &action, ctx.subject, ctx.provider)? {
                None => ctx.report.elements_removed += deep_count(el),
                Some(new) => {
                    if new.value != el.value {
                        ctx.report.elements_modified += 1;
                        if action.kind == ActionKind::UidRemap {
                            ctx.report.uids_remapped += 1;
                        }
                    }
                    out.insert(new);
                }
            },
        }
    }
    Ok(out)
}

fn action_for(el: &DataElement, ctx: &Ctx<'_>, cleared: bool) -> Option<DeidAction> {
    if let Some(rule) = ctx.policy.lookup(el.tag) {
        // Sequence clearing is walked at both stages; the secondary stage only runs
        // the identifier remaps inside it.
        if rule.action.kind == ActionKind::ClearSequenceRecursive && el.vr == Vr::SQ {
            return Some(rule.action.clone());
        }
        if rule.stage.includes(ctx.stage) {
            return Some(rule.action.clone());
        }
    }
    if cleared {
        let default = DeidAction::vr_default(el.vr);
        if ctx.stage == Stage::Primary
            || default.kind.is_secondary_kind()
            || default.kind == ActionKind::ClearSequenceRecursive
        {
            return Some(default);
        }
    }
    None
}

fn deep_count(el: &DataElement) -> usize {
    1 + el.items().iter().map(DataSet::deep_len).sum::<usize>()
}

fn mismatch(el: &DataElement, action: ActionKind) -> DeidError {
    DeidError::VrMismatch {
        tag: el.tag,
        vr: el.vr,
        action,
    }
}

/// Applies one non-recursive action. `None` means the element is dropped.
pub fn apply_action(
    el: &DataElement,
    action: &DeidAction,
    subject: &SubjectContext,
    provider: &dyn IdentityProvider,
) -> Result<Option<DataElement>, DeidError> {
    transform(el, action, subject, provider)
}

fn transform(
    el: &DataElement,
    action: &DeidAction,
    subject: &SubjectContext,
    provider: &dyn IdentityProvider,
) -> Result<Option<DataElement>, DeidError> {
    use ActionKind::*;
    let text = |s: String| Ok(Some(DataElement::text(el.tag, el.vr, s)));
    let require = |ok: bool| if ok { Ok(()) } else { Err(mismatch(el, action.kind)) };
    match action.kind {
        RemoveElement | RemovePrivate => Ok(None),
        AnonymiseText => {
            require(el.vr.is_text())?;
            text(action.replacement.clone().unwrap_or_else(|| ANON_PLACEHOLDER.to_string()))
        }
        BlankString => {
            require(el.vr.is_text())?;
            text(String::new())
        }
        ZeroNumeric => {
            let value = match el.vr {
                Vr::DS | Vr::IS => Value::Text("0".into()),
                Vr::US => Value::U16(vec![0]),
                Vr::SS => Value::I16(vec![0]),
                Vr::UL => Value::U32(vec![0]),
                Vr::SL => Value::I32(vec![0]),
                Vr::FL => Value::F32(vec![0.0]),
                Vr::FD => Value::F64(vec![0.0]),
                _ => return Err(mismatch(el, action.kind)),
            };
            Ok(Some(DataElement::new(el.tag, el.vr, value)))
        }
        DateOffset => {
            require(el.vr == Vr::DA)?;
            text(offset_date_value(el.as_text().unwrap_or(""), subject.date_offset_days))
        }
        BirthDateRule => {
            require(el.vr == Vr::DA)?;
            text(birth_date_value(el.as_text().unwrap_or("")))
        }
        ZeroTime => {
            require(el.vr == Vr::TM)?;
            text(ZERO_TIME.into())
        }
        FixedDateTime => {
            require(el.vr == Vr::DT)?;
            text(FIXED_DATETIME.into())
        }
        ZeroBytesPair => {
            let value = match el.vr {
                Vr::US => Value::U16(vec![0]),
                Vr::SS => Value::I16(vec![0]),
                Vr::OB | Vr::OW | Vr::UN | Vr::OD | Vr::OF | Vr::OL | Vr::OV => {
                    Value::Bytes(vec![0, 0])
                }
                _ => return Err(mismatch(el, action.kind)),
            };
            Ok(Some(DataElement::new(el.tag, el.vr, value)))
        }
        PseudonymReplace => {
            require(el.vr.is_text())?;
            text(subject.pseudonym.clone())
        }
        UidRemap => {
            require(el.vr == Vr::UI)?;
            let original = el.as_text().unwrap_or("");
            if original.is_empty() {
                return text(String::new());
            }
            let mapped = original
                .split('\\')
                .map(|u| {
                    let u = u.trim();
                    if is_standard_uid(u) {
                        Ok(u.to_string())
                    } else {
                        provider.remap_uid(u, &subject.pseudonym)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            text(mapped.join("\\"))
        }
        ClearSequenceRecursive => Err(mismatch(el, action.kind)),
    }
}

/// UIDs under the standards root name classes and syntaxes, not instances or people.
pub fn is_standard_uid(uid: &str) -> bool {
    uid.starts_with(STANDARD_UID_ROOT)
}

pub const STANDARD_UID_ROOT: &str = "1.2.840.10008.";

pub fn parse_da(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y%m%d").ok()
}

/// Shifts every component of a (possibly multi-valued) DA string.
pub fn offset_date_value(value: &str, offset_days: i64) -> String {
    if value.trim().is_empty() {
        return String::new();
    }
    value
        .split('\\')
        .map(|part| {
            if part.trim().is_empty() {
                return String::new();
            }
            match parse_da(part) {
                Some(d) => (d + Duration::days(offset_days)).format("%Y%m%d").to_string(),
                None => NULL_DATE.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join("\\")
}

/// Keeps the birth year only.
pub fn birth_date_value(value: &str) -> String {
    match parse_da(value.split('\\').next().unwrap_or("")) {
        Some(d) => d.format("%Y0101").to_string(),
        None => UNKNOWN_BIRTH_DATE.to_string(),
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use std::cell::RefCell;
    use std::collections::HashMap;

    use super::*;

    /// Map-backed provider for engine tests; UIDs become "9.<n>" in first-seen order.
    pub struct MapProvider {
        pub subjects: HashMap<String, SubjectContext>,
        pub uids: RefCell<HashMap<String, String>>,
        pub root: &'static str,
    }

    impl MapProvider {
        pub fn single(patient_id: &str, pseudonym: &str, offset: i64) -> Self {
            let mut subjects = HashMap::new();
            subjects.insert(
                patient_id.to_string(),
                SubjectContext {
                    pseudonym: pseudonym.to_string(),
                    date_offset_days: offset,
                },
            );
            MapProvider {
                subjects,
                uids: RefCell::new(HashMap::new()),
                root: "9",
            }
        }
    }

    impl IdentityProvider for MapProvider {
        fn subject_for(&self, patient_id: &str) -> Option<SubjectContext> {
            self.subjects.get(patient_id).cloned()
        }

        fn remap_uid(&self, original: &str, _owner: &str) -> Result<String, MalformedUid> {
            if original.is_empty() || original.contains("..") || !original.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
                return Err(MalformedUid(original.to_string()));
            }
            let mut map = self.uids.borrow_mut();
            let n = map.len() + 1;
            Ok(map.entry(original.to_string()).or_insert_with(|| format!("{}.{n}", self.root)).clone())
        }
    }
}
