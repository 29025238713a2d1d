use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::VaultError;

type HmacSha256 = Hmac<Sha256>;

pub const ENV_VAULT_KEY: &str = "IMGCOLLECT_VAULT_KEY";
pub const ENV_AES_KEY: &str = "IMGCOLLECT_AES_KEY";
pub const ENV_HASH_SALT: &str = "IMGCOLLECT_HASH_SALT";
pub const ENV_TRIAL_SALT: &str = "IMGCOLLECT_TRIAL_SALT";
pub const ENV_AUDIT_CREDENTIAL: &str = "IMGCOLLECT_AUDIT_CREDENTIAL";

const NONCE_LEN: usize = 12;

/// Key material for one vault. Every secret is supplied as a passphrase; keys are its SHA-256.
#[derive(Clone)]
pub struct VaultSecrets {
    vault_key: [u8; 32],
    aes_key: [u8; 32],
    hash_salt: Vec<u8>,
    trial_salt: Vec<u8>,
    audit_digest: [u8; 32],
}

impl fmt::Debug for VaultSecrets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("VaultSecrets { .. }")
    }
}

impl VaultSecrets {
    pub fn from_passphrases(
        vault_key: &str,
        aes_key: &str,
        hash_salt: &str,
        trial_salt: &str,
        audit_credential: &str,
    ) -> Self {
        VaultSecrets {
            vault_key: Sha256::digest(vault_key.as_bytes()).into(),
            aes_key: Sha256::digest(aes_key.as_bytes()).into(),
            hash_salt: hash_salt.as_bytes().to_vec(),
            trial_salt: trial_salt.as_bytes().to_vec(),
            audit_digest: Sha256::digest(audit_credential.as_bytes()).into(),
        }
    }

    pub fn from_env() -> Result<Self, VaultError> {
        Self::from_env_prefixed("IMGCOLLECT")
    }

    /// Reads `<PREFIX>_VAULT_KEY`, `_AES_KEY`, `_HASH_SALT`, `_TRIAL_SALT` and `_AUDIT_CREDENTIAL`.
    pub fn from_env_prefixed(prefix: &str) -> Result<Self, VaultError> {
        let var = |suffix: &str| {
            let name = format!("{prefix}_{suffix}");
            std::env::var(&name)
                .ok()
                .filter(|v| !v.is_empty())
                .ok_or(VaultError::MissingSecret(name))
        };
        Ok(Self::from_passphrases(
            &var("VAULT_KEY")?,
            &var("AES_KEY")?,
            &var("HASH_SALT")?,
            &var("TRIAL_SALT")?,
            &var("AUDIT_CREDENTIAL")?,
        ))
    }

    /// Deterministic secrets derived from a label. Only for tests and the simulator.
    pub fn insecure_for_testing(label: &str) -> Self {
        Self::from_passphrases(
            &format!("{label}-vault"),
            &format!("{label}-aes"),
            &format!("{label}-hash"),
            &format!("{label}-trial"),
            &format!("{label}-audit"),
        )
    }

    /// Same secrets with a different trial salt.
    pub fn with_trial_salt(mut self, trial_salt: &str) -> Self {
        self.trial_salt = trial_salt.as_bytes().to_vec();
        self
    }

    pub(crate) fn check_audit(&self, credential: &str) -> bool {
        let d: [u8; 32] = Sha256::digest(credential.as_bytes()).into();
        // fold rather than early-exit comparison
        d.iter().zip(self.audit_digest.iter()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }

    /// Salted keyed hash used for every identifier match.
    pub fn hash_id(&self, domain: &str, value: &str) -> Vec<u8> {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.hash_salt).expect("hmac accepts any key");
        mac.update(domain.as_bytes());
        mac.update(&[0]);
        mac.update(value.trim().as_bytes());
        mac.finalize().into_bytes().to_vec()
    }

    /// Keyed PRF over the vault key.
    pub(crate) fn prf(&self, domain: &str, data: &[u8]) -> [u8; 32] {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.vault_key).expect("hmac accepts any key");
        mac.update(domain.as_bytes());
        mac.update(&[0]);
        mac.update(data);
        mac.finalize().into_bytes().into()
    }

    fn national_id_cipher(&self) -> Aes256Gcm {
        let mut h = Sha256::new();
        h.update(self.aes_key);
        h.update(&self.trial_salt);
        let key: [u8; 32] = h.finalize().into();
        Aes256Gcm::new_from_slice(&key).expect("32-byte key")
    }

    pub(crate) fn encrypt_national_id(&self, id: &str) -> Vec<u8> {
        seal(&self.national_id_cipher(), id.trim().as_bytes())
    }

    pub(crate) fn decrypt_national_id(&self, blob: &[u8]) -> Result<String, VaultError> {
        let plain = open(&self.national_id_cipher(), blob)?;
        String::from_utf8(plain).map_err(|_| VaultError::Corrupt("national id is not UTF-8".into()))
    }

    pub(crate) fn store_cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(&self.vault_key).expect("32-byte key")
    }
}

/// nonce || ciphertext
pub(crate) fn seal(cipher: &Aes256Gcm, plain: &[u8]) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), plain)
        .expect("AES-GCM encryption does not fail for in-memory buffers");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

pub(crate) fn open(cipher: &Aes256Gcm, blob: &[u8]) -> Result<Vec<u8>, VaultError> {
    if blob.len() < NONCE_LEN {
        return Err(VaultError::Corrupt("ciphertext shorter than nonce".into()));
    }
    let (nonce, ct) = blob.split_at(NONCE_LEN);
    cipher
        .decrypt(Nonce::from_slice(nonce), ct)
        .map_err(|_| VaultError::Corrupt("authentication failed (wrong key or damaged data)".into()))
}
