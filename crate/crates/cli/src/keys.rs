//! Text formats for authority and peer key files.
//!
//! Both are `name value` lines with base64 values. An authority file holds
//! `public` and `private`; a peer file additionally names its `peer` key and
//! the `authority` public key it trusts.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use keeperring_core::auth::KeyPair;
use keeperring_core::keyspace::{Key, PeerKey};

use crate::CliError;

fn fields(text: &str, what: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| CliError::Input(format!("{what} line {}: expected `name value`", i + 1)))?;
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn b64_field(map: &BTreeMap<String, String>, name: &str, what: &str) -> Result<Vec<u8>, CliError> {
    let v = map.get(name).ok_or_else(|| CliError::Input(format!("{what}: missing `{name}`")))?;
    B64.decode(v).map_err(|_| CliError::Input(format!("{what}: `{name}` is not base64")))
}

pub fn render_authority(kp: &KeyPair) -> String {
    format!("public {}\nprivate {}\n", B64.encode(&kp.public), B64.encode(&kp.private))
}

pub fn parse_authority(text: &str) -> Result<KeyPair, CliError> {
    let map = fields(text, "authority file")?;
    Ok(KeyPair {
        public: b64_field(&map, "public", "authority file")?,
        private: b64_field(&map, "private", "authority file")?,
    })
}

#[derive(Debug)]
pub struct PeerKeyFile {
    pub peer: PeerKey,
    pub keypair: KeyPair,
    pub authority_public: Vec<u8>,
}

pub fn render_peer(f: &PeerKeyFile) -> String {
    format!(
        "peer {}\npublic {}\nprivate {}\nauthority {}\n",
        f.peer,
        B64.encode(&f.keypair.public),
        B64.encode(&f.keypair.private),
        B64.encode(&f.authority_public)
    )
}

pub fn parse_peer(text: &str) -> Result<PeerKeyFile, CliError> {
    let what = "key file";
    let map = fields(text, what)?;
    let peer = map.get("peer").ok_or_else(|| CliError::Input(format!("{what}: missing `peer`")))?;
    let key: Key = peer.parse().map_err(|_| CliError::Input(format!("{what}: bad peer key")))?;
    let peer = PeerKey::try_from_key(key).map_err(|e| CliError::Input(format!("{what}: {e}")))?;
    Ok(PeerKeyFile {
        peer,
        keypair: KeyPair { public: b64_field(&map, "public", what)?, private: b64_field(&map, "private", what)? },
        authority_public: b64_field(&map, "authority", what)?,
    })
}
