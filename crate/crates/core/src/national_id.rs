//! NHS number validation (10 digits, modulus-11 check digit).

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    NonNumeric,
    WrongLength,
    ChecksumFail,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::NonNumeric => "non-numeric",
            InvalidReason::WrongLength => "wrong-length",
            InvalidReason::ChecksumFail => "checksum-fail",
        })
    }
}

/// Validates an NHS number. Surrounding whitespace is ignored; inner spaces are not.
pub fn validate_national_id(id: &str) -> Result<(), InvalidReason> {
    let id = id.trim();
    if !id.bytes().all(|b| b.is_ascii_digit()) || id.is_empty() {
        return Err(InvalidReason::NonNumeric);
    }
    if id.len() != 10 {
        return Err(InvalidReason::WrongLength);
    }
    let digits: Vec<u32> = id.bytes().map(|b| u32::from(b - b'0')).collect();
    let sum: u32 = digits[..9]
        .iter()
        .zip((2..=10).rev())
        .map(|(d, w)| d * w)
        .sum();
    let check = match 11 - sum % 11 {
        11 => 0,
        10 => return Err(InvalidReason::ChecksumFail),
        c => c,
    };
    if check == digits[9] {
        Ok(())
    } else {
        Err(InvalidReason::ChecksumFail)
    }
}

pub fn is_valid_national_id(id: &str) -> bool {
    validate_national_id(id).is_ok()
}

/// Completes a 9-digit stem with its check digit, if the stem has one.
pub fn with_check_digit(stem: u32) -> Option<String> {
    let stem = format!("{:09}", stem % 1_000_000_000);
    (0..10)
        .map(|d| format!("{stem}{d}"))
        .find(|c| is_valid_national_id(c))
}
