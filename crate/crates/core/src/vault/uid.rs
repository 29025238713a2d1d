use crate::deid::MalformedUid;

pub const DEFAULT_UID_ROOT: &str = "1.2.826.0.1.3680043.999";
pub const MAX_UID_LEN: usize = 64;

/// Dotted-decimal, non-empty components, no leading zeros, at most 64 characters.
pub fn check_uid(uid: &str) -> Result<(), MalformedUid> {
    let bad = || MalformedUid(uid.to_string());
    if uid.is_empty() || uid.len() > MAX_UID_LEN {
        return Err(bad());
    }
    for part in uid.split('.') {
        if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if part.len() > 1 && part.starts_with('0') {
            return Err(bad());
        }
    }
    Ok(())
}

/// Builds `<root>.<scope>.<n>` where n is taken from `digest`, trimmed so the
/// result fits the 64-character limit.
pub(crate) fn build_uid(root: &str, scope_digit: u8, digest: &[u8; 32]) -> String {
    let prefix = format!("{root}.{scope_digit}.");
    let max_digits = MAX_UID_LEN.saturating_sub(prefix.len()).clamp(1, 38);
    let mut n = u128::from_be_bytes(digest[..16].try_into().expect("16 bytes")) >> 4;
    let limit = 10u128.checked_pow(max_digits as u32);
    if let Some(limit) = limit {
        n %= limit;
    }
    format!("{prefix}{n}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert!(check_uid("1.2.840.10008.1.2.1").is_ok());
        assert!(check_uid("0.1").is_ok());
        for bad in ["", "1..2", "1.02", "1.2.", "a.b", "1.2 ", &"1.".repeat(40)] {
            assert!(check_uid(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn built_uids_fit() {
        let max = build_uid(DEFAULT_UID_ROOT, 1, &[0xFF; 32]);
        assert!(max.len() <= 64, "{max}");
        assert!(check_uid(&max).is_ok());
        let zero = build_uid(DEFAULT_UID_ROOT, 2, &[0; 32]);
        assert_eq!(zero, "1.2.826.0.1.3680043.999.2.0");
    }
}
