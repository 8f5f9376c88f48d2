//! Thin wrappers around the authenticated cipher and key derivation used by
//! puzzles, tokens and order blobs.

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use rand::RngCore;
use sha2::{Digest, Sha256};

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

pub type SymmetricKey = [u8; KEY_LEN];

/// Authentication failed while opening a ciphertext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authenticated decryption failed")]
pub struct AeadError;

pub fn random_nonce<R: RngCore + ?Sized>(rng: &mut R) -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    nonce
}

/// Encrypts in place and returns the detached tag. Ciphertext length equals
/// plaintext length.
pub fn seal_detached(key: &SymmetricKey, nonce: &[u8; NONCE_LEN], buf: &mut [u8]) -> [u8; TAG_LEN] {
    let cipher = Aes128Gcm::new(key.into());
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(nonce), b"", buf)
        .expect("AES-GCM encryption of an in-memory buffer cannot fail");
    tag.into()
}

pub fn open_detached(
    key: &SymmetricKey,
    nonce: &[u8; NONCE_LEN],
    buf: &mut [u8],
    tag: &[u8; TAG_LEN],
) -> Result<(), AeadError> {
    let cipher = Aes128Gcm::new(key.into());
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(nonce), b"", buf, Tag::from_slice(tag))
        .map_err(|_| AeadError)
}

/// `ciphertext || tag`
pub fn seal(key: &SymmetricKey, nonce: &[u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(plaintext.len() + TAG_LEN);
    out.extend_from_slice(plaintext);
    let tag = seal_detached(key, nonce, &mut out);
    out.extend_from_slice(&tag);
    out
}

pub fn open(key: &SymmetricKey, nonce: &[u8; NONCE_LEN], sealed: &[u8]) -> Result<Vec<u8>, AeadError> {
    if sealed.len() < TAG_LEN {
        return Err(AeadError);
    }
    let (body, tag) = sealed.split_at(sealed.len() - TAG_LEN);
    let mut out = body.to_vec();
    let tag: [u8; TAG_LEN] = tag.try_into().expect("split at TAG_LEN");
    open_detached(key, nonce, &mut out, &tag)?;
    Ok(out)
}

/// SHA-256 of `material`, truncated to a cipher key.
pub fn kdf(material: &[u8]) -> SymmetricKey {
    let digest = Sha256::digest(material);
    let mut key = [0u8; KEY_LEN];
    key.copy_from_slice(&digest[..KEY_LEN]);
    key
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn seal_open_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = kdf(b"k");
        let nonce = random_nonce(&mut rng);
        let sealed = seal(&key, &nonce, b"hello");
        assert_eq!(sealed.len(), 5 + TAG_LEN);
        assert_eq!(open(&key, &nonce, &sealed).unwrap(), b"hello");
    }

    #[test]
    fn flipped_bit_is_rejected() {
        let key = kdf(b"k");
        let nonce = [7u8; NONCE_LEN];
        let mut sealed = seal(&key, &nonce, b"hello");
        sealed[0] ^= 1;
        assert_eq!(open(&key, &nonce, &sealed), Err(AeadError));
        assert_eq!(open(&key, &nonce, &sealed[..3]), Err(AeadError));
    }
}
