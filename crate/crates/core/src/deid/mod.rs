//! Tag-level de-identification and pixel masking.

mod engine;
mod pixel;
pub mod policy;

pub use engine::{
    apply, apply_action, birth_date_value, is_standard_uid, offset_date_value, parse_da,
    unpoliced_tags, DeidError, DeidReport, IdentityProvider, MalformedUid, SubjectContext,
    FIXED_DATETIME, NULL_DATE, STANDARD_UID_ROOT, UNKNOWN_BIRTH_DATE, ZERO_TIME,
};
pub use pixel::{mask_burn_in, PixelError, Rect};
pub use policy::{
    builtin_policy, parse_policy_table, ActionKind, DeidAction, Policy, PolicyError, PolicyStage,
    Stage, TagPattern, TagPolicy,
};

