//! User accounts with salted PBKDF2-HMAC-SHA256 password hashes.
//!
//! A stored hash reads `<salt hex>:<iterations>:<digest hex>`.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;

use super::{check_name, DocumentStore, Query, Result, StoreError};

pub const PASSWORD_ITERATIONS: u32 = 100_000;
const SALT_LEN: usize = 16;
const DIGEST_LEN: usize = 32;
const COLLECTION: &str = "users";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Admin,
}

impl Role {
    /// Admins can do everything operators can.
    pub fn satisfies(self, required: Role) -> bool {
        self >= required
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Operator => "operator",
            Role::Admin => "admin",
        })
    }
}

impl FromStr for Role {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "operator" => Ok(Role::Operator),
            "admin" => Ok(Role::Admin),
            _ => Err(StoreError::Invalid(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    pub password_hash: String,
    pub role: Role,
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; DIGEST_LEN] {
    let mut out = [0u8; DIGEST_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

pub fn hash_password(password: &str) -> String {
    let mut salt = [0u8; SALT_LEN];
    rand::thread_rng().fill_bytes(&mut salt);
    let digest = derive(password, &salt, PASSWORD_ITERATIONS);
    format!("{}:{}:{}", hex::encode(salt), PASSWORD_ITERATIONS, hex::encode(digest))
}

/// Check a password against a stored hash in constant time.
pub fn check_password(stored: &str, password: &str) -> bool {
    let mut parts = stored.split(':');
    let (Some(salt), Some(iter), Some(digest), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    let (Ok(salt), Ok(iterations), Ok(digest)) = (hex::decode(salt), iter.parse::<u32>(), hex::decode(digest)) else {
        return false;
    };
    if iterations == 0 || digest.len() != DIGEST_LEN {
        return false;
    }
    derive(password, &salt, iterations).ct_eq(digest.as_slice()).into()
}

pub struct UserStore<'a> {
    docs: &'a DocumentStore,
}

impl<'a> UserStore<'a> {
    pub fn new(docs: &'a DocumentStore) -> Self {
        Self { docs }
    }

    pub fn get_user(&self, username: &str) -> Option<UserRecord> {
        let v = self.docs.get_document(COLLECTION, username)?;
        serde_json::from_value((*v.doc).clone()).ok()
    }

    /// Create or replace a user with a freshly salted hash.
    pub fn upsert_user(&self, username: &str, password: &str, role: Role) -> Result<UserRecord> {
        check_name(username)?;
        if password.is_empty() {
            return Err(StoreError::Invalid("empty password".into()));
        }
        let rec = UserRecord {
            username: username.to_string(),
            password_hash: hash_password(password),
            role,
        };
        let doc = serde_json::to_value(&rec).expect("user records serialize");
        self.docs.put_document(COLLECTION, username, &doc, None)?;
        Ok(rec)
    }

    pub fn set_role(&self, username: &str, role: Role) -> Result<UserRecord> {
        let mut rec = self.get_user(username).ok_or_else(|| StoreError::NotFound {
            kind: "user",
            id: username.to_string(),
        })?;
        rec.role = role;
        let doc = serde_json::to_value(&rec).expect("user records serialize");
        self.docs.put_document(COLLECTION, username, &doc, None)?;
        Ok(rec)
    }

    /// Unknown users and wrong passwords are indistinguishable.
    pub fn verify_password(&self, username: &str, password: &str) -> bool {
        self.authenticate(username, password).is_some()
    }

    /// The user record when the password matches. Unknown users cost the
    /// same hashing work as known ones.
    pub fn authenticate(&self, username: &str, password: &str) -> Option<UserRecord> {
        match self.get_user(username) {
            Some(rec) if check_password(&rec.password_hash, password) => Some(rec),
            Some(_) => None,
            None => {
                let _ = derive(password, &[0u8; SALT_LEN], PASSWORD_ITERATIONS);
                None
            }
        }
    }

    pub fn list_users(&self) -> Vec<UserRecord> {
        self.docs
            .list_documents(COLLECTION, &Query::default())
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value((*v.doc).clone()).ok())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pbkdf2_reference_vector() {
        // RFC 7914 section 11 test vector for PBKDF2-HMAC-SHA256
        let mut out = [0u8; 64];
        pbkdf2::pbkdf2_hmac::<Sha256>(b"passwd", b"salt", 1, &mut out);
        assert_eq!(
            hex::encode(out),
            "55ac046e56e3089fec1691c22544b605f94185216dde0465e68b9d57c20dacbc\
             49ca9cccf179b645991664b39d77ef317c71b845b1e30bd509112041d3a19783"
        );
    }

    #[test]
    fn hash_format_and_check() {
        let h = hash_password("hunter2");
        let parts: Vec<_> = h.split(':').collect();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].len(), SALT_LEN * 2);
        assert_eq!(parts[1], "100000");
        assert!(check_password(&h, "hunter2"));
        assert!(!check_password(&h, "hunter3"));
        assert!(!check_password("garbage", "hunter2"));
        assert!(!check_password("00:0:00", ""));
    }

    #[test]
    fn hundred_hashes_hundred_salts() {
        let hashes: Vec<_> = (0..100).map(|_| hash_password("same")).collect();
        let salts: HashSet<_> = hashes.iter().map(|h| h.split(':').next().unwrap().to_string()).collect();
        assert_eq!(salts.len(), 100);
        assert!(hashes.iter().all(|h| check_password(h, "same")));
    }

    #[test]
    fn user_lifecycle() {
        let d = tempfile::tempdir().unwrap();
        let docs = DocumentStore::open(d.path()).unwrap();
        let users = UserStore::new(&docs);
        users.upsert_user("alice", "pw", Role::Operator).unwrap();
        assert_eq!(users.authenticate("alice", "pw").unwrap().role, Role::Operator);
        assert!(users.verify_password("alice", "pw"));
        assert!(!users.verify_password("alice", "nope"));
        assert!(!users.verify_password("bob", "pw"));
        users.set_role("alice", Role::Admin).unwrap();
        assert_eq!(users.get_user("alice").unwrap().role, Role::Admin);
        assert!(matches!(users.set_role("bob", Role::Admin), Err(StoreError::NotFound { .. })));
        assert!(users.upsert_user("x", "", Role::Admin).is_err());
        assert_eq!(users.list_users().len(), 1);
        assert!(!users.get_user("alice").unwrap().password_hash.contains("pw:"));
        users.upsert_user("carol", "pw", Role::Operator).unwrap();
        assert_ne!(users.get_user("alice").unwrap().password_hash, users.get_user("carol").unwrap().password_hash);
    }

    #[test]
    fn roles() {
        assert!(Role::Admin.satisfies(Role::Operator));
        assert!(!Role::Operator.satisfies(Role::Admin));
        assert_eq!("admin".parse::<Role>().unwrap(), Role::Admin);
        assert!("root".parse::<Role>().is_err());
    }
}
