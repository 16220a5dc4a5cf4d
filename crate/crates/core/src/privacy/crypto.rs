use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::Path;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{Tag, XChaCha20Poly1305, XNonce};
use hmac::{Hmac, Mac};
use rand::{Rng, RngCore};
use sha2::{Digest, Sha256};

use super::PrivacyError;
use crate::recommender::{ImpressionEvent, TimeOfDay};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;
const STORE_MAGIC: &[u8; 8] = b"ADSEALE1";

/// A 32-byte symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct StoreKey([u8; KEY_LEN]);

impl std::fmt::Debug for StoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StoreKey({})", self.id())
    }
}

impl StoreKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PrivacyError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| PrivacyError::KeyLength(bytes.len()))?;
        Ok(Self(arr))
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// First 8 bytes of the key's SHA-256, hex encoded.
    pub fn id(&self) -> String {
        Sha256::digest(self.0)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Writes the raw key bytes to a new file readable only by its owner.
pub fn write_key_file(path: &Path, key: &StoreKey) -> Result<(), PrivacyError> {
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(key.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn read_key_file(path: &Path) -> Result<StoreKey, PrivacyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    StoreKey::from_bytes(&bytes)
}

/// Authenticated ciphertext of a local store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedStore {
    pub key_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedStore {
    /// `magic ‖ key id length (u8) ‖ key id ‖ nonce ‖ tag ‖ ciphertext`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STORE_MAGIC.to_vec();
        out.push(self.key_id.len() as u8);
        out.extend(self.key_id.as_bytes());
        out.extend(self.nonce);
        out.extend(self.tag);
        out.extend(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PrivacyError> {
        let bad = || PrivacyError::Decode("malformed encrypted store".into());
        let rest = bytes.strip_prefix(STORE_MAGIC.as_slice()).ok_or_else(bad)?;
        let (&id_len, rest) = rest.split_first().ok_or_else(bad)?;
        let id_len = usize::from(id_len);
        if rest.len() < id_len + NONCE_LEN + TAG_LEN {
            return Err(bad());
        }
        let (id, rest) = rest.split_at(id_len);
        let (nonce, rest) = rest.split_at(NONCE_LEN);
        let (tag, ciphertext) = rest.split_at(TAG_LEN);
        Ok(Self {
            key_id: String::from_utf8(id.to_vec()).map_err(|_| bad())?,
            nonce: nonce.try_into().expect("nonce length"),
            tag: tag.try_into().expect("tag length"),
            ciphertext: ciphertext.to_vec(),
        })
    }
}

/// XChaCha20-Poly1305 with a fresh random nonce drawn from `rng`. The key id
/// is bound as associated data.
pub fn encrypt_store_with<R: RngCore + ?Sized>(plaintext: &[u8], key: &StoreKey, rng: &mut R) -> Result<EncryptedStore, PrivacyError> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = XChaCha20Poly1305::new_from_slice(key.as_bytes()).map_err(|_| PrivacyError::KeyLength(KEY_LEN))?;
    let key_id = key.id();
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(XNonce::from_slice(&nonce), key_id.as_bytes(), &mut buf)
        .map_err(|_| PrivacyError::Authentication)?;
    Ok(EncryptedStore { key_id, nonce, tag: tag.into(), ciphertext: buf })
}

/// [`encrypt_store_with`] using the thread-local OS-seeded generator.
pub fn encrypt_store(plaintext: &[u8], key: &StoreKey) -> Result<EncryptedStore, PrivacyError> {
    encrypt_store_with(plaintext, key, &mut rand::rng())
}

/// Fails with [`PrivacyError::Authentication`] on a wrong key or any
/// modification of the store.
pub fn decrypt_store(store: &EncryptedStore, key: &StoreKey) -> Result<Vec<u8>, PrivacyError> {
    let cipher = XChaCha20Poly1305::new_from_slice(key.as_bytes()).map_err(|_| PrivacyError::KeyLength(KEY_LEN))?;
    let mut buf = store.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            XNonce::from_slice(&store.nonce),
            store.key_id.as_bytes(),
            &mut buf,
            Tag::from_slice(&store.tag),
        )
        .map_err(|_| PrivacyError::Authentication)?;
    Ok(buf)
}

/// HMAC-SHA256 pseudonym of an identifier under `key` (first 16 bytes, hex).
pub fn pseudonym(key: &[u8], id: &str) -> String {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(id.as_bytes());
    let digest = mac.finalize().into_bytes();
    let hex: String = digest[..16].iter().map(|b| format!("{b:02x}")).collect();
    format!("p_{hex}")
}

/// Start of the time-of-day bucket containing `ts`. Night runs past
/// midnight, so early-morning times map to the previous day's 21:00.
pub fn coarsen_timestamp(ts: i64) -> i64 {
    let day = ts.div_euclid(86_400) * 86_400;
    let start = day + TimeOfDay::from_timestamp(ts).start_seconds();
    if start > ts {
        start - 86_400
    } else {
        start
    }
}

/// Replaces user ids with keyed pseudonyms and timestamps with their bucket
/// start; every other field is kept.
pub fn anonymize(events: &[ImpressionEvent], key: &[u8]) -> Vec<ImpressionEvent> {
    events
        .iter()
        .map(|e| ImpressionEvent { user_id: pseudonym(key, &e.user_id), ts: coarsen_timestamp(e.ts), ..e.clone() })
        .collect()
}

/// Random key material for pseudonyms.
pub fn random_pseudonym_key<R: Rng + ?Sized>(rng: &mut R) -> [u8; KEY_LEN] {
    let mut k = [0u8; KEY_LEN];
    rng.fill_bytes(&mut k);
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::Device;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(seed: u64) -> StoreKey {
        StoreKey::generate(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn flipping_first_ciphertext_byte_fails() {
        let k = key(1);
        let mut s = encrypt_store(b"profile bytes", &k).unwrap();
        s.ciphertext[0] ^= 1;
        assert!(matches!(decrypt_store(&s, &k), Err(PrivacyError::Authentication)));
    }

    #[test]
    fn fresh_nonce_per_encryption() {
        let k = key(2);
        let a = encrypt_store(b"same", &k).unwrap();
        let b = encrypt_store(b"same", &k).unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn wrong_key_fails() {
        let s = encrypt_store(b"secret", &key(3)).unwrap();
        assert!(matches!(decrypt_store(&s, &key(4)), Err(PrivacyError::Authentication)));
    }

    #[test]
    fn serialized_store_round_trips() {
        let k = key(5);
        let s = encrypt_store(b"abc", &k).unwrap();
        let back = EncryptedStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(decrypt_store(&back, &k).unwrap(), b"abc");
        assert!(EncryptedStore::from_bytes(b"ADSEALE1").is_err());
    }

    #[test]
    fn key_file_is_private_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.key");
        let k = key(6);
        write_key_file(&path, &k).unwrap();
        assert_eq!(read_key_file(&path).unwrap(), k);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(std::fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
        }
        std::fs::write(dir.path().join("short"), [0u8; 31]).unwrap();
        assert!(matches!(read_key_file(&dir.path().join("short")), Err(PrivacyError::KeyLength(31))));
        assert!(write_key_file(&path, &k).is_err());
    }

    #[test]
    fn coarsening_maps_to_bucket_start() {
        let day = 19_000 * 86_400;
        assert_eq!(coarsen_timestamp(day + 7 * 3600 + 59), day + 5 * 3600);
        assert_eq!(coarsen_timestamp(day + 23 * 3600), day + 21 * 3600);
        assert_eq!(coarsen_timestamp(day + 2 * 3600), day - 3 * 3600);
        assert_eq!(coarsen_timestamp(day + 12 * 3600), day + 12 * 3600);
    }

    fn ev(user: &str, ts: i64) -> ImpressionEvent {
        ImpressionEvent {
            user_id: user.into(),
            ad_id: "A1".into(),
            ts,
            clicked: true,
            converted: true,
            ad_category: "Travel".into(),
            device: Device::Tablet,
            time_of_day: TimeOfDay::from_timestamp(ts),
        }
    }

    #[test]
    fn pseudonyms_are_stable_and_keyed() {
        let k1 = [1u8; 32];
        let k2 = [2u8; 32];
        let out = anonymize(&[ev("U001", 100_000), ev("U001", 200_000), ev("U002", 100_000)], &k1);
        assert_eq!(out[0].user_id, out[1].user_id);
        assert_ne!(out[0].user_id, out[2].user_id);
        assert_ne!(out[0].user_id, anonymize(&[ev("U001", 0)], &k2)[0].user_id);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_single_bit_tamper(
            data in prop::collection::vec(any::<u8>(), 0..4096),
            seed in any::<u64>(),
            bit in any::<prop::sample::Index>(),
        ) {
            let k = key(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let s = encrypt_store_with(&data, &k, &mut rng).unwrap();
            prop_assert_eq!(decrypt_store(&s, &k).unwrap(), data.clone());
            let mut bytes = s.to_bytes();
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            if let Ok(t) = EncryptedStore::from_bytes(&bytes) {
                prop_assert!(decrypt_store(&t, &k).is_err());
            }
        }

        #[test]
        fn anonymization_preserves_other_fields(ts in -1_000_000_000i64..4_000_000_000, user in "[A-Z0-9]{1,8}") {
            let e = ev(&user, ts);
            let a = anonymize(std::slice::from_ref(&e), b"k").remove(0);
            prop_assert_eq!(&a.ad_id, &e.ad_id);
            prop_assert_eq!(a.clicked, e.clicked);
            prop_assert_eq!(a.converted, e.converted);
            prop_assert_eq!(&a.ad_category, &e.ad_category);
            prop_assert_eq!(a.device, e.device);
            prop_assert_eq!(a.time_of_day, e.time_of_day);
            prop_assert_eq!(TimeOfDay::from_timestamp(a.ts), e.time_of_day);
            prop_assert!(a.ts <= e.ts && e.ts - a.ts < 86_400);
        }
    }
}
