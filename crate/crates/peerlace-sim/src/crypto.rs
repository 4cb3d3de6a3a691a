//! Key pairs, signatures, password encryption, and the key-wrapping service.
//!
//! Peers authenticate join announcements with signatures and exchange store
//! passwords encrypted to the recipient's public key. Two schemes implement
//! that contract:
//!
//! * [`CryptoScheme::Rsa2048`] — real RSA: PSS signatures and OAEP
//!   encryption, both over SHA-256. Key generation costs real time, so
//!   scenarios pay for realism.
//! * [`CryptoScheme::FakeDeterministic`] — a structurally faithful test
//!   double built from SHA-256. Signatures verify, ciphertexts round-trip,
//!   tampering is detected — but anyone holding the public key can forge
//!   and decrypt. It exists so protocol tests run in milliseconds; it is
//!   not security.
//!
//! Private keys never sit in peer state in the clear: they are wrapped by a
//! [`KmsKey`], the stand-in for a managed key service, using
//! ChaCha20-Poly1305, and unwrapped only at the moment of use.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chacha20poly1305::aead::Aead;
use chacha20poly1305::{ChaCha20Poly1305, Key as AeadKey, KeyInit, Nonce as AeadNonce};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{
    DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey,
};
use rsa::pss::{BlindedSigningKey, Signature as PssSignature, VerifyingKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Verifier};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::SimError;

const RSA_BITS: usize = 2048;
/// OAEP-SHA256 over a 2048-bit modulus: 256 − 2·32 − 2 bytes of plaintext.
const RSA_OAEP_MAX_MSG: usize = 190;

const FAKE_NONCE_LEN: usize = 16;
const FAKE_TAG_LEN: usize = 16;

const TAG_RSA: u8 = 0x01;
const TAG_FAKE: u8 = 0x02;

/// Which signature/encryption scheme a scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CryptoScheme {
    #[serde(rename = "rsa2048")]
    Rsa2048,
    #[serde(rename = "fake")]
    FakeDeterministic,
}

/// A peer's public identity: verifies signatures, encrypts to the peer.
#[derive(Debug, Clone, PartialEq)]
pub enum PublicKey {
    Rsa(RsaPublicKey),
    /// The 32-byte public identifier of a fake keypair.
    Fake(Vec<u8>),
}

/// A peer's private key. The `Debug` form is redacted so key material can
/// never leak through logs or assertion messages.
#[derive(Clone, PartialEq)]
pub enum PrivateKey {
    Rsa(Box<RsaPrivateKey>),
    /// The 32-byte secret of a fake keypair.
    Fake(Vec<u8>),
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scheme = match self {
            PrivateKey::Rsa(_) => "rsa2048",
            PrivateKey::Fake(_) => "fake",
        };
        write!(f, "PrivateKey({scheme}, redacted)")
    }
}

fn sha256_parts(parts: &[&[u8]]) -> Vec<u8> {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().to_vec()
}

/// Derives the fake public identifier from its secret.
fn fake_public_id(secret: &[u8]) -> Vec<u8> {
    sha256_parts(&[b"fake-pub", secret])
}

/// SHA-256-in-counter-mode keystream used by the fake cipher.
fn fake_keystream(public_id: &[u8], nonce: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut counter: u32 = 0;
    while out.len() < len {
        let block = sha256_parts(&[b"fake-enc", public_id, nonce, &counter.to_le_bytes()]);
        out.extend_from_slice(&block);
        counter += 1;
    }
    out.truncate(len);
    out
}

fn fake_tag(public_id: &[u8], nonce: &[u8], msg: &[u8]) -> Vec<u8> {
    let mut tag = sha256_parts(&[b"fake-tag", public_id, nonce, msg]);
    tag.truncate(FAKE_TAG_LEN);
    tag
}

/// Generates a fresh keypair under `scheme` from the caller's RNG, so key
/// material is reproducible from the scenario seed.
pub fn generate_keypair<R: RngCore + CryptoRng>(
    scheme: CryptoScheme,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey), SimError> {
    match scheme {
        CryptoScheme::Rsa2048 => {
            let private = RsaPrivateKey::new(rng, RSA_BITS)
                .map_err(|_| SimError::Crypto("RSA key generation failed"))?;
            let public = RsaPublicKey::from(&private);
            Ok((PublicKey::Rsa(public), PrivateKey::Rsa(Box::new(private))))
        }
        CryptoScheme::FakeDeterministic => {
            let mut secret = vec![0u8; 32];
            rng.fill_bytes(&mut secret);
            let public = fake_public_id(&secret);
            Ok((PublicKey::Fake(public), PrivateKey::Fake(secret)))
        }
    }
}

/// Signs `msg`. RSA-PSS signing is randomized, so two signatures over the
/// same message differ yet both verify; the fake scheme is deterministic.
pub fn sign<R: RngCore + CryptoRng>(
    key: &PrivateKey,
    msg: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, SimError> {
    match key {
        PrivateKey::Rsa(private) => {
            let signer = BlindedSigningKey::<Sha256>::new((**private).clone());
            let sig = signer
                .try_sign_with_rng(rng, msg)
                .map_err(|_| SimError::Crypto("PSS signing failed"))?;
            Ok(sig.to_vec())
        }
        PrivateKey::Fake(secret) => {
            let public_id = fake_public_id(secret);
            Ok(sha256_parts(&[b"fake-sig", &public_id, msg]))
        }
    }
}

/// Checks `sig` over `msg` against `key`. Malformed signatures simply fail.
pub fn verify(key: &PublicKey, msg: &[u8], sig: &[u8]) -> bool {
    match key {
        PublicKey::Rsa(public) => {
            let verifier = VerifyingKey::<Sha256>::new(public.clone());
            match PssSignature::try_from(sig) {
                Ok(sig) => verifier.verify(msg, &sig).is_ok(),
                Err(_) => false,
            }
        }
        PublicKey::Fake(public_id) => sig == sha256_parts(&[b"fake-sig", public_id, msg]),
    }
}

/// Encrypts `msg` so only the holder of the matching private key can read
/// it (for the fake scheme: so only tests can, see the module docs).
pub fn encrypt_for<R: RngCore + CryptoRng>(
    key: &PublicKey,
    msg: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, SimError> {
    match key {
        PublicKey::Rsa(public) => {
            if msg.len() > RSA_OAEP_MAX_MSG {
                return Err(SimError::Crypto("message too long for RSA-OAEP"));
            }
            public
                .encrypt(rng, Oaep::new::<Sha256>(), msg)
                .map_err(|_| SimError::Crypto("OAEP encryption failed"))
        }
        PublicKey::Fake(public_id) => {
            let mut nonce = vec![0u8; FAKE_NONCE_LEN];
            rng.fill_bytes(&mut nonce);
            let keystream = fake_keystream(public_id, &nonce, msg.len());
            let body: Vec<u8> = msg.iter().zip(&keystream).map(|(m, k)| m ^ k).collect();
            let tag = fake_tag(public_id, &nonce, msg);
            let mut ct = nonce;
            ct.extend_from_slice(&body);
            ct.extend_from_slice(&tag);
            Ok(ct)
        }
    }
}

/// Decrypts a ciphertext produced by [`encrypt_for`]. Any tampering — or
/// the wrong recipient key — fails.
pub fn decrypt(key: &PrivateKey, ct: &[u8]) -> Result<Vec<u8>, SimError> {
    match key {
        PrivateKey::Rsa(private) => private
            .decrypt(Oaep::new::<Sha256>(), ct)
            .map_err(|_| SimError::Crypto("OAEP decryption failed")),
        PrivateKey::Fake(secret) => {
            if ct.len() < FAKE_NONCE_LEN + FAKE_TAG_LEN {
                return Err(SimError::Crypto("fake ciphertext too short"));
            }
            let public_id = fake_public_id(secret);
            let (nonce, rest) = ct.split_at(FAKE_NONCE_LEN);
            let (body, tag) = rest.split_at(rest.len() - FAKE_TAG_LEN);
            let keystream = fake_keystream(&public_id, nonce, body.len());
            let msg: Vec<u8> = body.iter().zip(&keystream).map(|(c, k)| c ^ k).collect();
            if tag != fake_tag(&public_id, nonce, &msg) {
                return Err(SimError::Crypto("fake ciphertext failed integrity check"));
            }
            Ok(msg)
        }
    }
}

/// Serializes a public key to base64 for embedding in announcement JSON.
pub fn encode_public_key(key: &PublicKey) -> String {
    let bytes = match key {
        PublicKey::Rsa(public) => {
            let der = public
                .to_pkcs1_der()
                .expect("encoding a valid RSA public key cannot fail");
            let mut v = vec![TAG_RSA];
            v.extend_from_slice(der.as_bytes());
            v
        }
        PublicKey::Fake(public_id) => {
            let mut v = vec![TAG_FAKE];
            v.extend_from_slice(public_id);
            v
        }
    };
    BASE64.encode(bytes)
}

/// Parses a public key produced by [`encode_public_key`].
pub fn decode_public_key(encoded: &str) -> Result<PublicKey, SimError> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|_| SimError::Crypto("public key is not valid base64"))?;
    match bytes.split_first() {
        Some((&TAG_RSA, der)) => RsaPublicKey::from_pkcs1_der(der)
            .map(PublicKey::Rsa)
            .map_err(|_| SimError::Crypto("malformed RSA public key")),
        Some((&TAG_FAKE, id)) if id.len() == 32 => Ok(PublicKey::Fake(id.to_vec())),
        _ => Err(SimError::Crypto("unknown public key encoding")),
    }
}

/// Serializes a private key to bytes, ready for [`KmsKey::wrap`].
pub fn encode_private_key(key: &PrivateKey) -> Vec<u8> {
    match key {
        PrivateKey::Rsa(private) => {
            let der = private
                .to_pkcs1_der()
                .expect("encoding a valid RSA private key cannot fail");
            let mut v = vec![TAG_RSA];
            v.extend_from_slice(der.as_bytes());
            v
        }
        PrivateKey::Fake(secret) => {
            let mut v = vec![TAG_FAKE];
            v.extend_from_slice(secret);
            v
        }
    }
}

/// Parses bytes produced by [`encode_private_key`].
pub fn decode_private_key(bytes: &[u8]) -> Result<PrivateKey, SimError> {
    match bytes.split_first() {
        Some((&TAG_RSA, der)) => RsaPrivateKey::from_pkcs1_der(der)
            .map(|key| PrivateKey::Rsa(Box::new(key)))
            .map_err(|_| SimError::Crypto("malformed RSA private key")),
        Some((&TAG_FAKE, secret)) if secret.len() == 32 => Ok(PrivateKey::Fake(secret.to_vec())),
        _ => Err(SimError::Crypto("unknown private key encoding")),
    }
}

/// The managed-key-service stand-in: one symmetric root key per peer that
/// wraps the peer's private key at rest with ChaCha20-Poly1305. `Debug `is
/// redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct KmsKey {
    key_id: String,
    secret: [u8; 32],
}

impl fmt::Debug for KmsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KmsKey({}, redacted)", self.key_id)
    }
}

impl KmsKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let key_id = format!("kms-{:016x}", rng.next_u64());
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self { key_id, secret }
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    /// Encrypts `plaintext` under this root key. The fresh random nonce is
    /// prepended, so wrapping the same bytes twice yields different blobs.
    pub fn wrap<R: RngCore + CryptoRng>(&self, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
        let mut nonce_bytes = [0u8; 12];
        rng.fill_bytes(&mut nonce_bytes);
        let cipher = ChaCha20Poly1305::new(&AeadKey::from(self.secret));
        let body = cipher
            .encrypt(&AeadNonce::from(nonce_bytes), plaintext)
            .expect("ChaCha20-Poly1305 encryption cannot fail");
        let mut out = nonce_bytes.to_vec();
        out.extend_from_slice(&body);
        out
    }

    /// Decrypts a blob produced by [`Self::wrap`]; any modification fails
    /// the authenticator.
    pub fn unwrap(&self, wrapped: &[u8]) -> Result<Vec<u8>, SimError> {
        if wrapped.len() < 12 {
            return Err(SimError::Crypto("wrapped blob too short"));
        }
        let (nonce_bytes, body) = wrapped.split_at(12);
        let nonce: [u8; 12] = nonce_bytes.try_into().expect("split_at(12) yields 12 bytes");
        let cipher = ChaCha20Poly1305::new(&AeadKey::from(self.secret));
        cipher
            .decrypt(&AeadNonce::from(nonce), body)
            .map_err(|_| SimError::Crypto("wrapped blob failed integrity check"))
    }
}

/// A peer's key material as held in peer state: the public half in the
/// clear, the private half only as a KMS-wrapped blob.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub wrapped_private: Vec<u8>,
}

impl KeyPair {
    /// Generates a keypair and immediately wraps the private half.
    pub fn generate<R: RngCore + CryptoRng>(
        scheme: CryptoScheme,
        kms: &KmsKey,
        rng: &mut R,
    ) -> Result<Self, SimError> {
        let (public, private) = generate_keypair(scheme, rng)?;
        let wrapped_private = kms.wrap(&encode_private_key(&private), rng);
        Ok(Self {
            public,
            wrapped_private,
        })
    }

    /// Unwraps and parses the private key for immediate use.
    pub fn unwrap_private(&self, kms: &KmsKey) -> Result<PrivateKey, SimError> {
        decode_private_key(&kms.unwrap(&self.wrapped_private)?)
    }
}
