//! RSA identity layer: payload serialization, PKCS#1 v1.5 signatures over
//! SHA-256, and the 32-bit fingerprint used by the spread-spectrum schemes.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use rsa::RsaPublicKey as PublicKey;

pub const KEY_BITS: usize = 1024;
pub const SIGNATURE_BYTES: usize = KEY_BITS / 8;
pub const PRIVATE_KEY_FILE: &str = "rsa_private.pem";
pub const PUBLIC_KEY_FILE: &str = "rsa_public.pem";
pub const DEFAULT_CORR_THRESHOLD: f64 = 0.5;
pub const FINGERPRINT_BITS: usize = 32;

static KEY_STORE_LOCK: Mutex<()> = Mutex::new(());

#[derive(Clone, Debug)]
pub struct KeyPair {
    private_key: RsaPrivateKey,
    public_key: RsaPublicKey,
    key_id: String,
}

impl KeyPair {
    pub fn from_private(private_key: RsaPrivateKey) -> Result<Self> {
        let bits = private_key.n().bits();
        if bits != KEY_BITS {
            return Err(Error::InvalidParams(format!(
                "RSA modulus is {bits} bits, expected {KEY_BITS}"
            )));
        }
        let public_key = private_key.to_public_key();
        let key_id = key_id(&public_key);
        Ok(KeyPair {
            private_key,
            public_key,
            key_id,
        })
    }

    /// Fresh RSA-1024 pair from the supplied generator.
    pub fn generate<R: rsa::rand_core::CryptoRngCore + ?Sized>(rng: &mut R) -> Result<Self> {
        let private_key = RsaPrivateKey::new(rng, KEY_BITS)
            .map_err(|e| Error::InvalidParams(format!("key generation failed: {e}")))?;
        KeyPair::from_private(private_key)
    }

    pub fn public_key(&self) -> &RsaPublicKey {
        &self.public_key
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn private_pem(&self) -> String {
        self.private_key
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encoding an in-memory RSA key")
            .to_string()
    }

    pub fn public_pem(&self) -> String {
        self.public_key
            .to_public_key_pem(LineEnding::LF)
            .expect("encoding an in-memory RSA key")
    }
}

fn public_der(pk: &RsaPublicKey) -> Vec<u8> {
    pk.to_public_key_der()
        .expect("encoding an in-memory RSA key")
        .as_bytes()
        .to_vec()
}

/// Hex SHA-256 of the SubjectPublicKeyInfo DER encoding.
pub fn key_id(pk: &RsaPublicKey) -> String {
    hex::encode(Sha256::digest(public_der(pk)))
}

/// Seed for the spread-spectrum noise: first 8 bytes of SHA-256 over the
/// public key encoding, big-endian. Anyone holding the public key can
/// regenerate the carrier.
pub fn prn_seed(pk: &RsaPublicKey) -> u64 {
    let digest = Sha256::digest(public_der(pk));
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

fn key_store_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::KeyStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_pem(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| key_store_err(path, format!("unreadable: {e}")))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("pem.tmp");
    fs::write(&tmp, contents).map_err(|e| key_store_err(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| key_store_err(path, e.to_string()))
}

/// Loads the public half only, as a verifier would.
pub fn load_public_key(dir: impl AsRef<Path>) -> Result<RsaPublicKey> {
    let path = dir.as_ref().join(PUBLIC_KEY_FILE);
    if !path.exists() {
        return Err(key_store_err(&path, "public key not found"));
    }
    let pk = RsaPublicKey::from_public_key_pem(&read_pem(&path)?)
        .map_err(|e| key_store_err(&path, format!("corrupt public key: {e}")))?;
    if pk.n().bits() != KEY_BITS {
        return Err(key_store_err(&path, "public key is not RSA-1024"));
    }
    Ok(pk)
}

/// Returns the pair stored in `dir`, generating and persisting one when the
/// directory holds no key. A damaged or partial store is an error, never a
/// reason to regenerate.
pub fn keypair_load_or_generate(dir: impl AsRef<Path>) -> Result<KeyPair> {
    let dir = dir.as_ref();
    let _guard = KEY_STORE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let private_path = dir.join(PRIVATE_KEY_FILE);
    let public_path = dir.join(PUBLIC_KEY_FILE);

    if private_path.exists() {
        let sk = RsaPrivateKey::from_pkcs8_pem(&read_pem(&private_path)?)
            .map_err(|e| key_store_err(&private_path, format!("corrupt private key: {e}")))?;
        let kp = KeyPair::from_private(sk).map_err(|e| key_store_err(&private_path, e.to_string()))?;
        if public_path.exists() {
            let stored = load_public_key(dir)?;
            if stored != kp.public_key {
                return Err(key_store_err(&public_path, "public key does not match private key"));
            }
        } else {
            write_atomic(&public_path, &kp.public_pem())?;
        }
        return Ok(kp);
    }
    if public_path.exists() {
        return Err(key_store_err(
            &private_path,
            "public key present without its private key",
        ));
    }

    fs::create_dir_all(dir).map_err(|e| key_store_err(dir, e.to_string()))?;
    log::info!("generating RSA-{KEY_BITS} key pair in {}", dir.display());
    let kp = KeyPair::generate(&mut rand::rngs::OsRng)?;
    write_atomic(&private_path, &kp.private_pem())?;
    write_atomic(&public_path, &kp.public_pem())?;
    Ok(kp)
}

/// The identity record that gets signed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub user_id: String,
    pub rules_version: u32,
    pub timestamp: u64,
}

impl PayloadSpec {
    pub fn new(user_id: impl Into<String>, rules_version: u32, timestamp: u64) -> Self {
        PayloadSpec {
            user_id: user_id.into(),
            rules_version,
            timestamp,
        }
    }

    /// Inverse of [`generate_payload`].
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidIdentity(format!("unparseable payload: {why}"));
        let text = std::str::from_utf8(bytes).map_err(|_| bad("not UTF-8"))?;
        let mut parts = text.split('|');
        let (Some(version), Some(user), Some(ts), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected three fields"));
        };
        let rules_version = version
            .strip_prefix('v')
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad version field"))?;
        let timestamp = ts.parse().map_err(|_| bad("bad timestamp"))?;
        if user.is_empty() {
            return Err(bad("empty user id"));
        }
        Ok(PayloadSpec::new(user, rules_version, timestamp))
    }
}

/// Canonical `v<rules_version>|<user_id>|<timestamp>` UTF-8 bytes.
pub fn generate_payload(spec: &PayloadSpec) -> Result<Vec<u8>> {
    if spec.user_id.is_empty() {
        return Err(Error::InvalidIdentity("user id is empty".into()));
    }
    if spec.user_id.contains('|') {
        return Err(Error::InvalidIdentity(format!(
            "user id {:?} contains the field delimiter '|'",
            spec.user_id
        )));
    }
    Ok(format!("v{}|{}|{}", spec.rules_version, spec.user_id, spec.timestamp).into_bytes())
}

/// Payload bytes plus their signature, as issued to one carrier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPayload {
    #[serde(with = "utf8_or_hex")]
    pub payload_bytes: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
    pub bit_length: usize,
    /// Human-readable label, only ever logged.
    pub plaintext_label: String,
}

impl SignedPayload {
    pub fn fingerprint(&self) -> Fingerprint32 {
        derive_fingerprint(self)
    }

    pub fn identity(&self) -> Result<PayloadSpec> {
        PayloadSpec::parse(&self.payload_bytes)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

mod utf8_or_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(bytes) {
            Ok(text) => s.serialize_str(text),
            Err(_) => s.serialize_str(&format!("hex:{}", hex::encode(bytes))),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        match s.strip_prefix("hex:") {
            Some(h) => hex::decode(h).map_err(serde::de::Error::custom),
            None => Ok(s.into_bytes()),
        }
    }
}

/// PKCS#1 v1.5 / SHA-256 signature; deterministic for a fixed key and payload.
pub fn sign_payload(kp: &KeyPair, payload_bytes: &[u8]) -> SignedPayload {
    let signer = SigningKey::<Sha256>::new(kp.private_key.clone());
    let signature = signer.sign(payload_bytes).to_vec();
    debug_assert_eq!(signature.len(), SIGNATURE_BYTES);
    let plaintext_label = String::from_utf8_lossy(payload_bytes).into_owned();
    SignedPayload {
        payload_bytes: payload_bytes.to_vec(),
        bit_length: signature.len() * 8,
        signature,
        plaintext_label,
    }
}

/// `generate_payload` followed by `sign_payload`.
pub fn issue(kp: &KeyPair, spec: &PayloadSpec) -> Result<SignedPayload> {
    Ok(sign_payload(kp, &generate_payload(spec)?))
}

/// False for anything that is not a valid 128-byte signature over `payload`.
pub fn verify_signature(pk: &RsaPublicKey, payload: &[u8], candidate: &[u8]) -> bool {
    if candidate.len() != SIGNATURE_BYTES {
        return false;
    }
    let Ok(sig) = Signature::try_from(candidate) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(pk.clone())
        .verify(payload, &sig)
        .is_ok()
}

/// First 32 bits of a SHA-256 digest, most significant bit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint32(pub u32);

impl Fingerprint32 {
    pub fn of_signature(signature: &[u8]) -> Self {
        let digest = Sha256::digest(signature);
        Fingerprint32(u32::from_be_bytes(digest[..4].try_into().unwrap()))
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        assert_eq!(bits.len(), FINGERPRINT_BITS);
        Fingerprint32(bits.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b)))
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0 >> (31 - i)) & 1 == 1
    }

    pub fn bits(&self) -> [bool; FINGERPRINT_BITS] {
        std::array::from_fn(|i| self.bit(i))
    }

    /// `+1` for a set bit, `−1` otherwise.
    pub fn bipolar(&self) -> [i8; FINGERPRINT_BITS] {
        std::array::from_fn(|i| if self.bit(i) { 1 } else { -1 })
    }

    pub fn hex(&self) -> String {
        format!("{:08x}", self.0)
    }
}

pub fn derive_fingerprint(sp: &SignedPayload) -> Fingerprint32 {
    Fingerprint32::of_signature(&sp.signature)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintMatch {
    pub correlation: f64,
    pub ber: f64,
    pub valid: bool,
}

/// Bipolar correlation and bit error rate between two fingerprints.
///
/// Both are computed from the Hamming distance, so `correlation == 1 − 2·ber`
/// holds exactly (every value is a multiple of 1/32).
pub fn fingerprint_match(
    recovered: Fingerprint32,
    expected: Fingerprint32,
    threshold: f64,
) -> FingerprintMatch {
    let errors = (recovered.0 ^ expected.0).count_ones() as i32;
    let n = FINGERPRINT_BITS as f64;
    let correlation = f64::from(FINGERPRINT_BITS as i32 - 2 * errors) / n;
    FingerprintMatch {
        correlation,
        ber: f64::from(errors) / n,
        valid: correlation >= threshold,
    }
}
