use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use argon2::password_hash::{rand_core::OsRng, PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_PASSWORD_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    Uploader,
}

/// Stored account. `password_hash` is an argon2 PHC string, salt included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub username: String,
    pub password_hash: String,
    pub role: Role,
}

#[derive(Debug, Error)]
pub enum AccountError {
    #[error("username or password is incorrect")]
    BadCredentials,
    #[error("new password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("account {0:?} already exists")]
    Exists(String),
    #[error("session is missing or expired")]
    InvalidSession,
    #[error("password hashing failed: {0}")]
    Hash(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn hash_password(password: &str) -> Result<String, AccountError> {
    let salt = SaltString::generate(&mut OsRng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| AccountError::Hash(e.to_string()))
}

fn verify_password(password: &str, phc: &str) -> bool {
    PasswordHash::new(phc).is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
}

fn check_strength(password: &str) -> Result<(), AccountError> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(AccountError::WeakPassword);
    }
    Ok(())
}

/// Accounts kept in a JSON file (or only in memory when no path is given).
pub struct AccountStore {
    path: Option<PathBuf>,
    accounts: Mutex<BTreeMap<String, UserAccount>>,
}

impl AccountStore {
    pub fn in_memory() -> Self {
        AccountStore {
            path: None,
            accounts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, AccountError> {
        let accounts = match fs::read(&path) {
            Ok(b) => serde_json::from_slice::<Vec<UserAccount>>(&b)?
                .into_iter()
                .map(|a| (a.username.clone(), a))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(AccountStore {
            path: Some(path),
            accounts: Mutex::new(accounts),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, UserAccount>> {
        self.accounts.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn save(&self, accounts: &BTreeMap<String, UserAccount>) -> Result<(), AccountError> {
        if let Some(path) = &self.path {
            let all: Vec<&UserAccount> = accounts.values().collect();
            imgcollect_core::collector::layout::write_atomic(path, &serde_json::to_vec_pretty(&all)?)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_user(&self, username: &str, password: &str, role: Role) -> Result<(), AccountError> {
        check_strength(password)?;
        let mut accounts = self.lock();
        if accounts.contains_key(username) {
            return Err(AccountError::Exists(username.to_string()));
        }
        accounts.insert(
            username.to_string(),
            UserAccount {
                username: username.to_string(),
                password_hash: hash_password(password)?,
                role,
            },
        );
        self.save(&accounts)
    }

    pub fn authenticate(&self, username: &str, password: &str) -> Result<Role, AccountError> {
        let accounts = self.lock();
        match accounts.get(username) {
            Some(a) if verify_password(password, &a.password_hash) => Ok(a.role),
            _ => Err(AccountError::BadCredentials),
        }
    }

    /// Both problems are reported when the current password is wrong and the new one weak.
    pub fn change_password(&self, username: &str, current: &str, new: &str) -> Result<(), Vec<AccountError>> {
        let mut accounts = self.lock();
        let mut errors = Vec::new();
        let ok = accounts.get(username).is_some_and(|a| verify_password(current, &a.password_hash));
        if !ok {
            errors.push(AccountError::BadCredentials);
        }
        if let Err(e) = check_strength(new) {
            errors.push(e);
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let hash = hash_password(new).map_err(|e| vec![e])?;
        if let Some(a) = accounts.get_mut(username) {
            a.password_hash = hash;
        }
        self.save(&accounts).map_err(|e| vec![e])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub username: String,
    pub role: Role,
}

/// Opaque random tokens, dropped after `idle` without use.
pub struct SessionStore {
    idle: Duration,
    sessions: Mutex<HashMap<String, (Session, Instant)>>,
}

impl SessionStore {
    pub fn new(idle: Duration) -> Self {
        SessionStore {
            idle,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, (Session, Instant)>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create(&self, session: Session) -> String {
        let mut bytes = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        let mut all = self.lock();
        let now = Instant::now();
        all.retain(|_, (_, seen)| now.duration_since(*seen) < self.idle);
        all.insert(token.clone(), (session, now));
        token
    }

    /// Looks up and refreshes a session.
    pub fn touch(&self, token: &str) -> Result<Session, AccountError> {
        let mut all = self.lock();
        let now = Instant::now();
        match all.get_mut(token) {
            Some((s, seen)) if now.duration_since(*seen) < self.idle => {
                *seen = now;
                Ok(s.clone())
            }
            Some(_) => {
                all.remove(token);
                Err(AccountError::InvalidSession)
            }
            None => Err(AccountError::InvalidSession),
        }
    }

    pub fn remove(&self, token: &str) -> bool {
        self.lock().remove(token).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn password_rules() {
        let s = AccountStore::in_memory();
        assert!(matches!(s.add_user("a", "short", Role::Admin), Err(AccountError::WeakPassword)));
        s.add_user("a", "longenough", Role::Admin).unwrap();
        assert_eq!(s.authenticate("a", "longenough").unwrap(), Role::Admin);
        assert!(s.authenticate("a", "wrong").is_err());
        assert!(s.authenticate("nobody", "longenough").is_err());
        let stored = s.lock()["a"].password_hash.clone();
        assert!(!stored.contains("longenough"));
        assert!(stored.starts_with("$argon2"));

        let e = s.change_password("a", "bad", "").unwrap_err();
        assert_eq!(e.len(), 2);
        let e = s.change_password("a", "bad", "12345678").unwrap_err();
        assert!(matches!(e[..], [AccountError::BadCredentials]));
        let e = s.change_password("a", "longenough", "12345").unwrap_err();
        assert!(matches!(e[..], [AccountError::WeakPassword]));
        s.change_password("a", "longenough", "newpassword").unwrap();
        assert!(s.authenticate("a", "newpassword").is_ok());
        assert!(s.authenticate("a", "longenough").is_err());
    }

    #[test]
    fn accounts_persist() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("accounts.json");
        AccountStore::open(p.clone()).unwrap().add_user("op", "password1", Role::Uploader).unwrap();
        let again = AccountStore::open(p).unwrap();
        assert_eq!(again.authenticate("op", "password1").unwrap(), Role::Uploader);
    }

    #[test]
    fn sessions_expire_when_idle() {
        let s = SessionStore::new(Duration::from_millis(30));
        let t = s.create(Session {
            username: "a".into(),
            role: Role::Admin,
        });
        assert_eq!(t.len(), 64);
        assert!(s.touch(&t).is_ok());
        std::thread::sleep(Duration::from_millis(40));
        assert!(s.touch(&t).is_err());
        assert!(s.touch("nonsense").is_err());
    }
}
