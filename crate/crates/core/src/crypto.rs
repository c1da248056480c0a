//! Thin wrappers over the primitives the trusted core relies on:
//! HMAC-SHA256 tags, SHA-256 digests, HKDF key derivation and
//! ChaCha20-Poly1305 sealing.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};

pub const KEY_LEN: usize = 32;
pub const MAC_LEN: usize = 32;
pub const DIGEST_LEN: usize = 32;

pub type Key = [u8; KEY_LEN];
pub type Tag = [u8; MAC_LEN];
pub type Digest = [u8; DIGEST_LEN];

type HmacSha256 = Hmac<Sha256>;

pub fn mac(key: &Key, data: &[u8]) -> Tag {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}

/// Constant-time tag comparison.
pub fn verify_mac(key: &Key, data: &[u8], tag: &Tag) -> bool {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.verify_slice(tag).is_ok()
}

pub fn digest(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn derive_key(master: &Key, info: &[u8]) -> Key {
    let hk = Hkdf::<Sha256>::new(None, master);
    let mut out = [0u8; KEY_LEN];
    hk.expand(info, &mut out)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    out
}

fn nonce_from(n: u64, domain: u32) -> [u8; 12] {
    let mut nonce = [0u8; 12];
    nonce[..4].copy_from_slice(&domain.to_le_bytes());
    nonce[4..].copy_from_slice(&n.to_le_bytes());
    nonce
}

/// Encrypts `plain`; `(domain, counter)` must never repeat under one key.
pub fn seal(key: &Key, domain: u32, counter: u64, aad: &[u8], plain: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(key.into());
    let nonce = nonce_from(counter, domain);
    cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plain, aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

pub fn open(key: &Key, domain: u32, counter: u64, aad: &[u8], sealed: &[u8]) -> Option<Vec<u8>> {
    let cipher = ChaCha20Poly1305::new(key.into());
    let nonce = nonce_from(counter, domain);
    cipher
        .decrypt(Nonce::from_slice(&nonce), Payload { msg: sealed, aad })
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hmac_matches_rfc4231_case_2() {
        // RFC 4231 test case 2 uses a 4-byte key; our wrapper takes 32 bytes,
        // so check the underlying construction directly.
        let mut m = <HmacSha256 as Mac>::new_from_slice(b"Jefe").unwrap();
        m.update(b"what do ya want for nothing?");
        let tag = m.finalize().into_bytes();
        assert_eq!(
            hex::encode(tag),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn mac_verifies_and_detects_change() {
        let key = [9u8; 32];
        let tag = mac(&key, b"payload");
        assert!(verify_mac(&key, b"payload", &tag));
        assert!(!verify_mac(&key, b"payloae", &tag));
        assert!(!verify_mac(&[8u8; 32], b"payload", &tag));
    }

    #[test]
    fn seal_open_round_trip_and_aad_binding() {
        let key = derive_key(&[1u8; 32], b"test");
        let ct = seal(&key, 1, 42, b"meta", b"secret value");
        assert_ne!(&ct[..12], b"secret value");
        assert_eq!(open(&key, 1, 42, b"meta", &ct).unwrap(), b"secret value");
        assert!(open(&key, 1, 42, b"other", &ct).is_none());
        assert!(open(&key, 1, 43, b"meta", &ct).is_none());
    }

    #[test]
    fn derived_keys_depend_on_info() {
        let m = [3u8; 32];
        assert_ne!(derive_key(&m, b"a"), derive_key(&m, b"b"));
        assert_eq!(derive_key(&m, b"a"), derive_key(&m, b"a"));
    }
}
