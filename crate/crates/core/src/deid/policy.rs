use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{Tag, Vr};

/// Built-in tag table, one record per row plus the private-tags rule.
pub const BUILTIN_POLICY_TSV: &str = include_str!("../../data/deid_policy.tsv");

/// Placeholder written by [`ActionKind::AnonymiseText`] when a rule carries no replacement.
pub const ANON_PLACEHOLDER: &str = "ANON";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("overlay rule for {pattern} uses {kind:?}; overlays may only add RemoveElement or AnonymiseText")]
    WeakeningOverlay { pattern: String, kind: ActionKind },
    #[error("overlay rule for {pattern} collides with a built-in rule")]
    OverlayConflict { pattern: String },
}

/// Exact tag, masked tag (hex digit wildcards), or every private group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TagPattern {
    Exact(Tag),
    Masked { value: u32, mask: u32 },
    Private,
}

impl TagPattern {
    pub fn matches(self, tag: Tag) -> bool {
        let key = (u32::from(tag.group) << 16) | u32::from(tag.element);
        match self {
            TagPattern::Exact(t) => t == tag,
            TagPattern::Masked { value, mask } => key & mask == value,
            TagPattern::Private => tag.is_private(),
        }
    }

    /// Representative concrete tag: wildcards become zero.
    pub fn example_tag(self) -> Option<Tag> {
        match self {
            TagPattern::Exact(t) => Some(t),
            TagPattern::Masked { value, .. } => Some(Tag::new((value >> 16) as u16, value as u16)),
            TagPattern::Private => None,
        }
    }
}

impl FromStr for TagPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("private") {
            return Ok(TagPattern::Private);
        }
        let digits: Vec<char> = s.chars().filter(|c| *c != ',').collect();
        if s.len() != 9 || s.as_bytes()[4] != b',' || digits.len() != 8 {
            return Err(format!("bad tag pattern {s:?}"));
        }
        let mut value = 0u32;
        let mut mask = 0u32;
        for c in digits {
            value <<= 4;
            mask <<= 4;
            if c == 'X' || c == 'x' {
                continue;
            }
            let d = c.to_digit(16).ok_or_else(|| format!("bad tag pattern {s:?}"))?;
            value |= d;
            mask |= 0xF;
        }
        if mask == u32::MAX {
            Ok(TagPattern::Exact(Tag::new((value >> 16) as u16, value as u16)))
        } else {
            Ok(TagPattern::Masked { value, mask })
        }
    }
}

impl fmt::Display for TagPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TagPattern::Exact(t) => write!(f, "{t}"),
            TagPattern::Private => f.write_str("private"),
            TagPattern::Masked { value, mask } => {
                for i in (0..8).rev() {
                    if i == 3 {
                        f.write_str(",")?;
                    }
                    let nibble = (mask >> (i * 4)) & 0xF;
                    if nibble == 0 {
                        f.write_str("X")?;
                    } else {
                        write!(f, "{:X}", (value >> (i * 4)) & 0xF)?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    RemoveElement,
    AnonymiseText,
    BlankString,
    ZeroNumeric,
    DateOffset,
    BirthDateRule,
    ZeroTime,
    FixedDateTime,
    ZeroBytesPair,
    ClearSequenceRecursive,
    PseudonymReplace,
    UidRemap,
    RemovePrivate,
}

impl ActionKind {
    /// Kinds the table applies at both stages; inside cleared sequences only these run at
    /// the secondary stage.
    pub fn is_secondary_kind(self) -> bool {
        matches!(self, ActionKind::PseudonymReplace | ActionKind::UidRemap)
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "RemoveElement" => ActionKind::RemoveElement,
            "AnonymiseText" => ActionKind::AnonymiseText,
            "BlankString" => ActionKind::BlankString,
            "ZeroNumeric" => ActionKind::ZeroNumeric,
            "DateOffset" => ActionKind::DateOffset,
            "BirthDateRule" => ActionKind::BirthDateRule,
            "ZeroTime" => ActionKind::ZeroTime,
            "FixedDateTime" => ActionKind::FixedDateTime,
            "ZeroBytesPair" => ActionKind::ZeroBytesPair,
            "ClearSequenceRecursive" => ActionKind::ClearSequenceRecursive,
            "PseudonymReplace" => ActionKind::PseudonymReplace,
            "UidRemap" => ActionKind::UidRemap,
            "RemovePrivate" => ActionKind::RemovePrivate,
            other => return Err(format!("unknown action {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidAction {
    pub kind: ActionKind,
    pub replacement: Option<String>,
}

impl DeidAction {
    pub const fn of(kind: ActionKind) -> Self {
        DeidAction {
            kind,
            replacement: None,
        }
    }

    /// Action applied to a descendant of a cleared sequence, by VR.
    pub fn vr_default(vr: Vr) -> Self {
        use ActionKind::*;
        let kind = match vr {
            Vr::AE | Vr::LO | Vr::LT | Vr::PN | Vr::SH | Vr::ST | Vr::UC | Vr::UT | Vr::UR => {
                AnonymiseText
            }
            Vr::CS | Vr::AS => BlankString,
            Vr::DA => DateOffset,
            Vr::DS | Vr::IS => ZeroNumeric,
            Vr::DT => FixedDateTime,
            Vr::TM => ZeroTime,
            Vr::UI => UidRemap,
            Vr::US | Vr::SS | Vr::UL | Vr::SL | Vr::FL | Vr::FD => ZeroNumeric,
            Vr::OB | Vr::OW | Vr::UN | Vr::OD | Vr::OF | Vr::OL | Vr::OV => ZeroBytesPair,
            Vr::SQ => ClearSequenceRecursive,
            Vr::AT | Vr::SV | Vr::UV => RemoveElement,
        };
        DeidAction::of(kind)
    }
}

/// Stage column of the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyStage {
    Primary,
    PrimaryAndSecondary,
}

/// Where de-identification runs: at the collection site, or centrally before sharing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Primary,
    Secondary,
}

impl PolicyStage {
    pub fn includes(self, stage: Stage) -> bool {
        match self {
            PolicyStage::Primary => stage == Stage::Primary,
            PolicyStage::PrimaryAndSecondary => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagPolicy {
    pub pattern: TagPattern,
    /// Expected VR; `None` for the private-tags rule.
    pub vr: Option<Vr>,
    pub action: DeidAction,
    pub stage: PolicyStage,
    pub description: String,
}

/// Parses the tab-separated table format shared by the built-in table and site overlays.
pub fn parse_policy_table(text: &str) -> Result<Vec<TagPolicy>, PolicyError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: String| PolicyError::BadRow {
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(format!("expected at least 4 columns, got {}", cols.len())));
        }
        let pattern: TagPattern = cols[0].parse().map_err(bad)?;
        let vr = match cols[1].trim() {
            "--" | "?" | "" => None,
            v => Some(v.parse::<Vr>().map_err(bad)?),
        };
        let (kind_str, replacement) = match cols[2].split_once('=') {
            Some((k, r)) => (k.trim(), Some(r.to_string())),
            None => (cols[2].trim(), None),
        };
        let kind: ActionKind = kind_str.parse().map_err(bad)?;
        let stage = match cols[3].trim() {
            "Primary" | "" => PolicyStage::Primary,
            "PrimaryAndSecondary" => PolicyStage::PrimaryAndSecondary,
            other => return Err(bad(format!("unknown stage {other:?}"))),
        };
        rows.push(TagPolicy {
            pattern,
            vr,
            action: DeidAction { kind, replacement },
            stage,
            description: cols.get(4).map(|s| s.trim().to_string()).unwrap_or_default(),
        });
    }
    Ok(rows)
}

/// The built-in table as a list of rules.
pub fn builtin_policy() -> Vec<TagPolicy> {
    static RULES: std::sync::OnceLock<Vec<TagPolicy>> = std::sync::OnceLock::new();
    RULES
        .get_or_init(|| parse_policy_table(BUILTIN_POLICY_TSV).expect("built-in policy table is well formed"))
        .clone()
}

/// Indexed rule set. Exact rules win over masked ones; private groups are handled first.
#[derive(Clone, Debug)]
pub struct Policy {
    rules: Vec<TagPolicy>,
    exact: HashMap<Tag, usize>,
    masked: Vec<usize>,
    private: Option<usize>,
}

impl Policy {
    pub fn new(rules: Vec<TagPolicy>) -> Self {
        let mut exact = HashMap::new();
        let mut masked = Vec::new();
        let mut private = None;
        for (i, rule) in rules.iter().enumerate() {
            match rule.pattern {
                TagPattern::Exact(t) => {
                    exact.entry(t).or_insert(i);
                }
                TagPattern::Masked { .. } => masked.push(i),
                TagPattern::Private => private = private.or(Some(i)),
            }
        }
        Policy {
            rules,
            exact,
            masked,
            private,
        }
    }

    pub fn builtin() -> Self {
        Policy::new(builtin_policy())
    }

    /// Adds site rules. Overlays cannot weaken the table: only RemoveElement and
    /// AnonymiseText are accepted, and only for tags no built-in rule covers.
    pub fn with_overlay(&self, overlay: Vec<TagPolicy>) -> Result<Policy, PolicyError> {
        for rule in &overlay {
            if !matches!(
                rule.action.kind,
                ActionKind::RemoveElement | ActionKind::AnonymiseText
            ) {
                return Err(PolicyError::WeakeningOverlay {
                    pattern: rule.pattern.to_string(),
                    kind: rule.action.kind,
                });
            }
            let collides = match rule.pattern {
                TagPattern::Private => true,
                TagPattern::Exact(t) => t.is_private() || self.lookup(t).is_some(),
                TagPattern::Masked { .. } => self
                    .rules
                    .iter()
                    .any(|r| r.pattern == rule.pattern),
            };
            if collides {
                return Err(PolicyError::OverlayConflict {
                    pattern: rule.pattern.to_string(),
                });
            }
        }
        let mut rules = self.rules.clone();
        rules.extend(overlay);
        Ok(Policy::new(rules))
    }

    pub fn rules(&self) -> &[TagPolicy] {
        &self.rules
    }

    /// Rule for a public tag (exact first, then masked). Private tags are not looked up here.
    pub fn lookup(&self, tag: Tag) -> Option<&TagPolicy> {
        if let Some(&i) = self.exact.get(&tag) {
            return Some(&self.rules[i]);
        }
        self.masked
            .iter()
            .map(|&i| &self.rules[i])
            .find(|r| r.pattern.matches(tag))
    }

    pub fn private_rule(&self) -> Option<&TagPolicy> {
        self.private.map(|i| &self.rules[i])
    }
}

impl Default for Policy {
    fn default() -> Self {
        Policy::builtin()
    }
}
