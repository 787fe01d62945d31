//! Salted password store and session tokens.
//!
//! The store is a text file with one `user role salt hash` record per line,
//! `hash = hex(sha256(salt ‖ password))`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Consecutive failures after which a user is locked out.
pub const MAX_FAILURES: u32 = 5;
/// Lockout length after [`MAX_FAILURES`] (s).
pub const LOCKOUT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Admin,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Operator => "operator",
            Role::Admin => "admin",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "operator" => Ok(Role::Operator),
            "admin" => Ok(Role::Admin),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AuthError {
    /// Unknown user, wrong password, unknown or expired token.
    #[error("authentication failed")]
    Denied,
    #[error("too many failed logins; retry in {retry_after_s:.0} s")]
    RateLimited { retry_after_s: f64 },
    #[error("credential store {path}: {message}")]
    Store { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Credential {
    role: Role,
    salt: [u8; 16],
    hash: [u8; 32],
}

pub fn hash_password(salt: &[u8], password: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    h.finalize().into()
}

fn constant_time_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CredentialStore {
    users: HashMap<String, Credential>,
}

impl CredentialStore {
    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let err = |message: String| AuthError::Store {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut users = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || err(format!("line {}: expected 'user role salt hash'", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let role = f[1].parse().map_err(|_| bad())?;
            let salt = hex::decode(f[2]).ok().and_then(|v| v.try_into().ok()).ok_or_else(bad)?;
            let hash = hex::decode(f[3]).ok().and_then(|v| v.try_into().ok()).ok_or_else(bad)?;
            users.insert(f[0].to_string(), Credential { role, salt, hash });
        }
        Ok(CredentialStore { users })
    }

    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        let mut names: Vec<_> = self.users.keys().collect();
        names.sort();
        let mut text = String::from("# user role salt sha256(salt||password)\n");
        for n in names {
            let c = &self.users[n];
            text.push_str(&format!("{n} {} {} {}\n", c.role, hex::encode(c.salt), hex::encode(c.hash)));
        }
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        std::fs::write(path, text).map_err(|e| AuthError::Store {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn add_user(&mut self, user: &str, role: Role, password: &str) {
        let salt: [u8; 16] = rand::rng().random();
        self.users.insert(
            user.to_string(),
            Credential {
                role,
                salt,
                hash: hash_password(&salt, password),
            },
        );
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// The user's role if the password matches. Unknown users cost the same
    /// hash computation as known ones.
    pub fn verify(&self, user: &str, password: &str) -> Option<Role> {
        const DUMMY: Credential = Credential {
            role: Role::Operator,
            salt: [0; 16],
            hash: [0; 32],
        };
        let (cred, known) = match self.users.get(user) {
            Some(c) => (c, true),
            None => (&DUMMY, false),
        };
        let ok = constant_time_eq(&hash_password(&cred.salt, password), &cred.hash);
        (ok && known).then_some(cred.role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user: String,
    pub role: Role,
    pub token: String,
    pub issued_at: f64,
    pub expires_at: f64,
}

#[derive(Debug, Default)]
struct Failures {
    count: u32,
    locked_until: f64,
}

/// Live sessions plus per-user failure counters.
#[derive(Debug)]
pub struct SessionTable {
    store: CredentialStore,
    ttl_s: f64,
    sessions: HashMap<String, Session>,
    failures: HashMap<String, Failures>,
}

impl SessionTable {
    pub fn new(store: CredentialStore, ttl_s: f64) -> Self {
        SessionTable {
            store,
            ttl_s,
            sessions: HashMap::new(),
            failures: HashMap::new(),
        }
    }

    pub fn login(&mut self, user: &str, password: &str, now: f64) -> Result<Session, AuthError> {
        let f = self.failures.entry(user.to_string()).or_default();
        if f.count >= MAX_FAILURES && now < f.locked_until {
            return Err(AuthError::RateLimited {
                retry_after_s: f.locked_until - now,
            });
        }
        match self.store.verify(user, password) {
            Some(role) => {
                self.failures.remove(user);
                let token = hex::encode(rand::rng().random::<[u8; 24]>());
                let session = Session {
                    user: user.to_string(),
                    role,
                    token: token.clone(),
                    issued_at: now,
                    expires_at: now + self.ttl_s,
                };
                self.sessions.insert(token, session.clone());
                Ok(session)
            }
            None => {
                if f.count >= MAX_FAILURES {
                    f.count = 0;
                }
                f.count += 1;
                if f.count >= MAX_FAILURES {
                    f.locked_until = now + LOCKOUT_S;
                }
                Err(AuthError::Denied)
            }
        }
    }

    /// The session for `token`; expired sessions are removed.
    pub fn check(&mut self, token: &str, now: f64) -> Result<Session, AuthError> {
        match self.sessions.get(token) {
            Some(s) if now < s.expires_at => Ok(s.clone()),
            Some(_) => {
                self.sessions.remove(token);
                Err(AuthError::Denied)
            }
            None => Err(AuthError::Denied),
        }
    }

    pub fn logout(&mut self, token: &str) -> bool {
        self.sessions.remove(token).is_some()
    }

    pub fn is_live(&self, token: &str, now: f64) -> bool {
        self.sessions.get(token).is_some_and(|s| now < s.expires_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SessionTable {
        let mut store = CredentialStore::default();
        store.add_user("alice", Role::Operator, "pw1");
        store.add_user("root", Role::Admin, "pw2");
        SessionTable::new(store, 100.0)
    }

    #[test]
    fn store_round_trip_and_salting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("creds");
        let mut store = CredentialStore::default();
        store.add_user("a", Role::Operator, "same");
        store.add_user("b", Role::Admin, "same");
        store.save(&path).unwrap();
        let back = CredentialStore::load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.verify("b", "same"), Some(Role::Admin));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("same"));
        let hashes: Vec<&str> = text.lines().skip(1).map(|l| l.split(' ').nth(3).unwrap()).collect();
        assert_ne!(hashes[0], hashes[1]);
    }

    #[test]
    fn unknown_user_and_bad_password_look_alike() {
        let mut t = table();
        let a = t.login("alice", "nope", 0.0).unwrap_err().to_string();
        let b = t.login("mallory", "pw1", 0.0).unwrap_err().to_string();
        assert_eq!(a, b);
    }

    #[test]
    fn tokens_expire() {
        let mut t = table();
        let s = t.login("alice", "pw1", 0.0).unwrap();
        assert!(t.check(&s.token, 99.0).is_ok());
        assert!(matches!(t.check(&s.token, 100.0), Err(AuthError::Denied)));
        assert!(matches!(t.check(&s.token, 1.0), Err(AuthError::Denied)));
    }

    #[test]
    fn rate_limited_after_five_failures() {
        let mut t = table();
        for _ in 0..MAX_FAILURES {
            assert!(matches!(t.login("alice", "x", 0.0), Err(AuthError::Denied)));
        }
        assert!(matches!(t.login("alice", "pw1", 1.0), Err(AuthError::RateLimited { .. })));
        assert!(t.login("root", "pw2", 1.0).is_ok());
        assert!(t.login("alice", "pw1", LOCKOUT_S + 1.0).is_ok());
    }
}
