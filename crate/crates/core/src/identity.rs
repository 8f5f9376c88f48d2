//! Entity key pairs: Ed25519 for signatures, X25519 for encrypting order
//! entries to a device.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::crypto::{self, NONCE_LEN, TAG_LEN};

const HYBRID_INFO: &[u8] = b"tokenring/order-entry/v1";

/// Bytes added by [`encrypt_to`]: ephemeral public key, nonce and tag.
pub const HYBRID_OVERHEAD: usize = 32 + NONCE_LEN + TAG_LEN;

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("ciphertext could not be opened with this key")]
    Decrypt,
    #[error("ciphertext too short")]
    Truncated,
    #[error("invalid key material: {0}")]
    BadKey(String),
}

/// A secret identity. Owner, hub and every device hold one.
#[derive(Clone)]
pub struct Identity {
    id: String,
    signing: SigningKey,
    exchange: StaticSecret,
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Identity").field("id", &self.id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicIdentity {
    pub id: String,
    pub verifying: VerifyingKey,
    pub exchange: PublicKey,
}

impl Identity {
    pub fn generate<R: RngCore + ?Sized>(id: impl Into<String>, rng: &mut R) -> Self {
        let mut signing = [0u8; 32];
        let mut exchange = [0u8; 32];
        rng.fill_bytes(&mut signing);
        rng.fill_bytes(&mut exchange);
        Self::from_secret_bytes(id, signing, exchange)
    }

    pub fn from_secret_bytes(id: impl Into<String>, signing: [u8; 32], exchange: [u8; 32]) -> Self {
        Identity {
            id: id.into(),
            signing: SigningKey::from_bytes(&signing),
            exchange: StaticSecret::from(exchange),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicIdentity {
        PublicIdentity {
            id: self.id.clone(),
            verifying: self.signing.verifying_key(),
            exchange: PublicKey::from(&self.exchange),
        }
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }

    pub fn decrypt(&self, blob: &[u8]) -> Result<Vec<u8>, IdentityError> {
        if blob.len() < HYBRID_OVERHEAD {
            return Err(IdentityError::Truncated);
        }
        let ephemeral: [u8; 32] = blob[..32].try_into().unwrap();
        let nonce: [u8; NONCE_LEN] = blob[32..32 + NONCE_LEN].try_into().unwrap();
        let shared = self.exchange.diffie_hellman(&PublicKey::from(ephemeral));
        let key = hybrid_key(shared.as_bytes(), &ephemeral, PublicKey::from(&self.exchange).as_bytes());
        crypto::open(&key, &nonce, &blob[32 + NONCE_LEN..]).map_err(|_| IdentityError::Decrypt)
    }

    pub fn to_file(&self) -> IdentityFile {
        IdentityFile {
            id: self.id.clone(),
            signing_secret: hex::encode(self.signing.to_bytes()),
            exchange_secret: hex::encode(self.exchange.to_bytes()),
            public: self.public().to_file(),
        }
    }

    pub fn from_file(file: &IdentityFile) -> Result<Self, IdentityError> {
        Ok(Self::from_secret_bytes(
            file.id.clone(),
            decode_32(&file.signing_secret)?,
            decode_32(&file.exchange_secret)?,
        ))
    }
}

impl PublicIdentity {
    pub fn verify(&self, message: &[u8], signature: &[u8; 64]) -> bool {
        self.verifying
            .verify(message, &Signature::from_bytes(signature))
            .is_ok()
    }

    pub fn to_file(&self) -> PublicIdentityFile {
        PublicIdentityFile {
            id: self.id.clone(),
            verifying_key: hex::encode(self.verifying.to_bytes()),
            exchange_key: hex::encode(self.exchange.as_bytes()),
        }
    }

    pub fn from_file(file: &PublicIdentityFile) -> Result<Self, IdentityError> {
        let verifying = VerifyingKey::from_bytes(&decode_32(&file.verifying_key)?)
            .map_err(|e| IdentityError::BadKey(e.to_string()))?;
        Ok(PublicIdentity {
            id: file.id.clone(),
            verifying,
            exchange: PublicKey::from(decode_32(&file.exchange_key)?),
        })
    }
}

/// Ephemeral-static X25519, HKDF-SHA256, AES-128-GCM.
/// Output: `[32 ephemeral pk][12 nonce][ciphertext][16 tag]`.
pub fn encrypt_to<R: RngCore + ?Sized>(recipient: &PublicIdentity, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let mut eph_bytes = [0u8; 32];
    rng.fill_bytes(&mut eph_bytes);
    let ephemeral = StaticSecret::from(eph_bytes);
    let ephemeral_pk = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&recipient.exchange);
    let key = hybrid_key(shared.as_bytes(), ephemeral_pk.as_bytes(), recipient.exchange.as_bytes());
    let nonce = crypto::random_nonce(rng);
    let mut out = Vec::with_capacity(plaintext.len() + HYBRID_OVERHEAD);
    out.extend_from_slice(ephemeral_pk.as_bytes());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&crypto::seal(&key, &nonce, plaintext));
    out
}

fn hybrid_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> crypto::SymmetricKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; crypto::KEY_LEN];
    hk.expand(HYBRID_INFO, &mut key)
        .expect("16 bytes is a valid HKDF-SHA256 output length");
    key
}

fn decode_32(text: &str) -> Result<[u8; 32], IdentityError> {
    let bytes = hex::decode(text).map_err(|e| IdentityError::BadKey(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|_| IdentityError::BadKey("expected 32 bytes".into()))
}

/// On-disk form written by `keygen`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityFile {
    pub id: String,
    pub signing_secret: String,
    pub exchange_secret: String,
    pub public: PublicIdentityFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicIdentityFile {
    pub id: String,
    pub verifying_key: String,
    pub exchange_key: String,
}
