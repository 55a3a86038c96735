//! Somewhat-homomorphic encryption interface with a transparent backend.
//!
//! The protocol needs encrypt/decrypt, ciphertext addition and subtraction,
//! multiplication by a plaintext constant, and a single level of
//! ciphertext-ciphertext multiplication (the squared-distance computation is
//! bilinear in the two parties' coordinates, so no additive-only scheme can
//! express it). The reference backend here is a transparent carrier: the
//! payload stores the signed plaintext and the key id enforces access
//! discipline. The simulated attack consumes only post-decryption values, so
//! nothing downstream depends on the carrier being opaque; a real SHE
//! implementation can be substituted behind this same surface.
//!
//! Plaintexts are signed 64-bit integers and every operation checks for
//! overflow, which pins the plaintext bound at magnitude `< 2^63`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SheError {
    #[error("ciphertexts under different keys ({0} vs {1}) cannot be combined")]
    KeyMismatch(u64, u64),
    #[error("plaintext magnitude exceeds the supported bound")]
    PlaintextOverflow,
}

/// Identifier linking a ciphertext to the key pair that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    id: KeyId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretKey {
    id: KeyId,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// Draws a fresh key pair; the id comes from the caller's RNG so runs are
/// reproducible under a fixed seed.
pub fn keygen<R: Rng + ?Sized>(rng: &mut R) -> KeyPair {
    let id = KeyId(rng.gen());
    KeyPair {
        public: PublicKey { id },
        secret: SecretKey { id },
    }
}

impl PublicKey {
    pub fn id(&self) -> KeyId {
        self.id
    }
}

impl SecretKey {
    pub fn id(&self) -> KeyId {
        self.id
    }
}

/// An encryption of a signed integer under one key pair. The payload is
/// private to this module; everything outside goes through `decrypt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ciphertext {
    key: KeyId,
    payload: i64,
}

pub fn encrypt(m: i64, pk: &PublicKey) -> Ciphertext {
    Ciphertext {
        key: pk.id,
        payload: m,
    }
}

pub fn decrypt(ct: &Ciphertext, sk: &SecretKey) -> Result<i64, SheError> {
    if ct.key != sk.id {
        return Err(SheError::KeyMismatch(ct.key.0, sk.id.0));
    }
    Ok(ct.payload)
}

fn check_keys(a: &Ciphertext, b: &Ciphertext) -> Result<KeyId, SheError> {
    if a.key != b.key {
        return Err(SheError::KeyMismatch(a.key.0, b.key.0));
    }
    Ok(a.key)
}

/// Homomorphic addition: decrypts to the sum of the plaintexts.
pub fn ct_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, SheError> {
    let key = check_keys(a, b)?;
    let payload = a
        .payload
        .checked_add(b.payload)
        .ok_or(SheError::PlaintextOverflow)?;
    Ok(Ciphertext { key, payload })
}

/// Homomorphic subtraction: decrypts to the difference of the plaintexts.
pub fn ct_sub(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, SheError> {
    let key = check_keys(a, b)?;
    let payload = a
        .payload
        .checked_sub(b.payload)
        .ok_or(SheError::PlaintextOverflow)?;
    Ok(Ciphertext { key, payload })
}

/// Multiplication of a ciphertext by a plaintext constant.
pub fn ct_plain_mult(a: &Ciphertext, k: i64) -> Result<Ciphertext, SheError> {
    let payload = a
        .payload
        .checked_mul(k)
        .ok_or(SheError::PlaintextOverflow)?;
    Ok(Ciphertext {
        key: a.key,
        payload,
    })
}

/// Ciphertext-ciphertext multiplication (one multiplicative level, as an SHE
/// scheme provides); required for the encrypted squared-distance step.
pub fn ct_mult(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, SheError> {
    let key = check_keys(a, b)?;
    let payload = a
        .payload
        .checked_mul(b.payload)
        .ok_or(SheError::PlaintextOverflow)?;
    Ok(Ciphertext { key, payload })
}
