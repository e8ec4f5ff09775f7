//! Detached signature records kept in the trailing signatures section.
//!
//! A record binds byte ranges of the logical payloads of other sections to a
//! signature. Records are only ever appended, so successive signatures over
//! the same range accumulate. Record layout (little-endian):
//!
//! ```text
//! u8 algorithm | u16 signer_len | signer_id | u64 signed_at_micros
//! u16 range_count | range_count × (u8 section_kind | u64 offset | u64 length)
//! u16 signature_len | signature
//! ```
//!
//! The signed message is the SHA-256 canonical digest of
//! `format_version u16 | item_id u64 | series_id u64 | version_id u32` followed,
//! per covered range, by `kind u8 | offset u64 | length u64 | payload bytes`.

use std::io::{Read, Seek, Write};

use ed25519_dalek::{Signer, Verifier};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::wire::{Reader, Writer};
use crate::format::{ItemHandle, ItemHeader, SectionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveredRange {
    pub kind: SectionKind,
    pub offset: u64,
    pub length: u64,
}

impl CoveredRange {
    pub fn whole(kind: SectionKind, length: u64) -> Self {
        Self {
            kind,
            offset: 0,
            length,
        }
    }

    pub fn end(&self) -> u64 {
        self.offset.saturating_add(self.length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    HmacSha256,
    Ed25519,
    /// Algorithm code this build does not know; kept so the record still
    /// round-trips.
    Other(u8),
}

impl Algorithm {
    fn code(self) -> u8 {
        match self {
            Algorithm::HmacSha256 => 1,
            Algorithm::Ed25519 => 2,
            Algorithm::Other(c) => c,
        }
    }

    fn from_code(code: u8) -> Self {
        match code {
            1 => Algorithm::HmacSha256,
            2 => Algorithm::Ed25519,
            c => Algorithm::Other(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureRecord {
    pub covered: Vec<CoveredRange>,
    pub algorithm: Algorithm,
    pub signer_id: String,
    pub signed_at: u64,
    pub signature: Vec<u8>,
}

impl SignatureRecord {
    pub fn validate(&self) -> Result<()> {
        if self.signer_id.len() > u16::MAX as usize
            || self.covered.len() > u16::MAX as usize
            || self.signature.len() > u16::MAX as usize
        {
            return Err(Error::InvalidItem("signature record field too long".into()));
        }
        if self.covered.iter().any(|r| r.kind == SectionKind::Signatures) {
            return Err(Error::InvalidItem(
                "signature records cannot cover the signatures section".into(),
            ));
        }
        if matches!(self.algorithm, Algorithm::Other(0)) {
            return Err(Error::InvalidItem("algorithm code 0 is reserved".into()));
        }
        Ok(())
    }

    fn encode(&self, w: &mut Writer<'_>) {
        w.u8(self.algorithm.code());
        w.u16(self.signer_id.len() as u16);
        w.bytes(self.signer_id.as_bytes());
        w.u64(self.signed_at);
        w.u16(self.covered.len() as u16);
        for r in &self.covered {
            w.u8(r.kind.code());
            w.u64(r.offset);
            w.u64(r.length);
        }
        w.u16(self.signature.len() as u16);
        w.bytes(&self.signature);
    }

    fn decode(r: &mut Reader<'_>) -> Option<std::result::Result<Self, String>> {
        let algorithm = match r.u8()? {
            0 => return Some(Err("algorithm code 0".into())),
            c => Algorithm::from_code(c),
        };
        let signer_len = r.u16()? as usize;
        let signer_id = match std::str::from_utf8(r.take(signer_len)?) {
            Ok(s) => s.to_owned(),
            Err(_) => return Some(Err("signer id is not UTF-8".into())),
        };
        let signed_at = r.u64()?;
        let count = r.u16()? as usize;
        let mut covered = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = match SectionKind::from_code(r.u8()?) {
                Ok(SectionKind::Signatures) => {
                    return Some(Err("record covers the signatures section".into()))
                }
                Ok(k) => k,
                Err(e) => return Some(Err(e.to_string())),
            };
            covered.push(CoveredRange {
                kind,
                offset: r.u64()?,
                length: r.u64()?,
            });
        }
        let sig_len = r.u16()? as usize;
        let signature = r.take(sig_len)?.to_vec();
        Some(Ok(SignatureRecord {
            covered,
            algorithm,
            signer_id,
            signed_at,
            signature,
        }))
    }
}

pub fn encode_records(records: &[SignatureRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut w = Writer::new(&mut out);
    for r in records {
        r.encode(&mut w);
    }
    out
}

pub fn decode_records(payload: &[u8]) -> std::result::Result<Vec<SignatureRecord>, String> {
    let mut r = Reader::new(payload);
    let mut out = Vec::new();
    while !r.is_empty() {
        let at = r.position();
        match SignatureRecord::decode(&mut r) {
            Some(Ok(rec)) => out.push(rec),
            Some(Err(e)) => return Err(format!("record at byte {at}: {e}")),
            None => return Err(format!("record at byte {at} runs past end of section")),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verification {
    Valid,
    Invalid,
    AlgorithmUnsupported,
}

/// Digest binding the item identity and the covered payload bytes. Returns
/// `None` when a range no longer fits its section.
fn canonical_digest<F: Read + Seek>(
    handle: &mut ItemHandle<F>,
    covered: &[CoveredRange],
) -> Result<Option<[u8; 32]>> {
    let header: ItemHeader = handle.header().clone();
    let mut hasher = Sha256::new();
    hasher.update(header.format_version.to_le_bytes());
    hasher.update(header.identity.item_id.get().to_le_bytes());
    hasher.update(header.identity.series_id.get().to_le_bytes());
    hasher.update(header.identity.version_id.to_le_bytes());
    let mut cache: Vec<(SectionKind, Vec<u8>)> = Vec::new();
    for range in covered {
        if !cache.iter().any(|(k, _)| *k == range.kind) {
            let payload = handle.read_section(range.kind)?;
            cache.push((range.kind, payload));
        }
        let payload = &cache.iter().find(|(k, _)| *k == range.kind).unwrap().1;
        if range.offset.checked_add(range.length).is_none_or(|end| end > payload.len() as u64) {
            return Ok(None);
        }
        hasher.update([range.kind.code()]);
        hasher.update(range.offset.to_le_bytes());
        hasher.update(range.length.to_le_bytes());
        hasher.update(&payload[range.offset as usize..range.end() as usize]);
    }
    Ok(Some(hasher.finalize().into()))
}

fn key32(key: &[u8], what: &str) -> Result<[u8; 32]> {
    key.try_into()
        .map_err(|_| Error::Key(format!("{what} must be 32 bytes, got {}", key.len())))
}

/// Ed25519 verifying key for a 32-byte signing seed.
pub fn ed25519_public_key(seed: &[u8]) -> Result<[u8; 32]> {
    let sk = ed25519_dalek::SigningKey::from_bytes(&key32(seed, "ed25519 seed")?);
    Ok(sk.verifying_key().to_bytes())
}

/// Signs the covered ranges and appends the record. `key` is the shared
/// secret for HMAC-SHA256 or the 32-byte seed for Ed25519.
pub fn sign<F: Read + Write + Seek>(
    handle: &mut ItemHandle<F>,
    covered: Vec<CoveredRange>,
    algorithm: Algorithm,
    key: &[u8],
    signer_id: &str,
    signed_at: u64,
    allow_after_seal: bool,
) -> Result<usize> {
    if covered.is_empty() {
        return Err(Error::InvalidItem("signature must cover at least one range".into()));
    }
    for r in &covered {
        if r.kind == SectionKind::Signatures {
            return Err(Error::InvalidItem(
                "signature records cannot cover the signatures section".into(),
            ));
        }
        let section_length = handle.header().section(r.kind).byte_length;
        if r.offset.checked_add(r.length).is_none_or(|end| end > section_length) {
            return Err(Error::RangeOutOfBounds {
                kind: r.kind,
                offset: r.offset,
                length: r.length,
                section_length,
            });
        }
    }
    if handle.header().sealed && !allow_after_seal {
        return Err(Error::SealedFile);
    }
    let digest = canonical_digest(handle, &covered)?.expect("ranges checked above");
    let signature = match algorithm {
        Algorithm::HmacSha256 => {
            if key.is_empty() {
                return Err(Error::Key("HMAC key is empty".into()));
            }
            let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
            mac.update(&digest);
            mac.finalize().into_bytes().to_vec()
        }
        Algorithm::Ed25519 => {
            let sk = ed25519_dalek::SigningKey::from_bytes(&key32(key, "ed25519 seed")?);
            sk.sign(&digest).to_bytes().to_vec()
        }
        Algorithm::Other(c) => {
            return Err(Error::Key(format!("cannot sign with unknown algorithm {c}")))
        }
    };
    let record = SignatureRecord {
        covered,
        algorithm,
        signer_id: signer_id.to_owned(),
        signed_at,
        signature,
    };
    record.validate()?;

    let mut payload = handle.read_section(SectionKind::Signatures)?;
    let index = decode_records(&payload)
        .map_err(|reason| Error::CorruptSection {
            kind: SectionKind::Signatures,
            reason,
        })?
        .len();
    record.encode(&mut Writer::new(&mut payload));
    handle.append_signatures(&payload, allow_after_seal)?;
    Ok(index)
}

/// Recomputes the digest over the current bytes and checks record `index`.
/// `key` is the HMAC secret or the 32-byte Ed25519 verifying key.
pub fn verify<F: Read + Seek>(
    handle: &mut ItemHandle<F>,
    index: usize,
    key: &[u8],
) -> Result<Verification> {
    let records = decode_records(&handle.read_section(SectionKind::Signatures)?).map_err(
        |reason| Error::CorruptSection {
            kind: SectionKind::Signatures,
            reason,
        },
    )?;
    let record = records.get(index).ok_or(Error::RecordNotFound(index))?;
    let Some(digest) = canonical_digest(handle, &record.covered)? else {
        return Ok(Verification::Invalid);
    };
    let ok = match record.algorithm {
        Algorithm::HmacSha256 => {
            let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
            mac.update(&digest);
            mac.verify_slice(&record.signature).is_ok()
        }
        Algorithm::Ed25519 => {
            let vk = ed25519_dalek::VerifyingKey::from_bytes(&key32(key, "ed25519 public key")?)
                .map_err(|e| Error::Key(e.to_string()))?;
            match ed25519_dalek::Signature::from_slice(&record.signature) {
                Ok(sig) => vk.verify(&digest, &sig).is_ok(),
                Err(_) => false,
            }
        }
        Algorithm::Other(_) => return Ok(Verification::AlgorithmUnsupported),
    };
    Ok(if ok {
        Verification::Valid
    } else {
        Verification::Invalid
    })
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::format::{encode_item, decode_item, ItemFile, ItemIdentity, MetadataEntry};
    use crate::store::ItemId;

    const KEY: &[u8] = b"test-key";

    fn handle() -> ItemHandle<Cursor<Vec<u8>>> {
        let mut it = ItemFile::new(ItemIdentity::first_version(ItemId::new(77).unwrap()));
        it.metadata.push(MetadataEntry::string("author", "ana"));
        it.content = b"The quick brown fox".to_vec();
        ItemHandle::open(Cursor::new(encode_item(&it, 512).unwrap())).unwrap()
    }

    fn whole_content(h: &ItemHandle<Cursor<Vec<u8>>>) -> Vec<CoveredRange> {
        let len = h.header().section(SectionKind::Content).byte_length;
        vec![CoveredRange::whole(SectionKind::Content, len)]
    }

    #[test]
    fn sign_then_verify() {
        let mut h = handle();
        let cov = whole_content(&h);
        let idx = sign(&mut h, cov, Algorithm::HmacSha256, KEY, "alice", 1, true).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(verify(&mut h, 0, KEY).unwrap(), Verification::Valid);
        assert_eq!(verify(&mut h, 0, b"other").unwrap(), Verification::Invalid);
        assert!(matches!(verify(&mut h, 1, KEY), Err(Error::RecordNotFound(1))));
    }

    #[test]
    fn successive_signatures_accumulate() {
        let mut h = handle();
        let cov = whole_content(&h);
        sign(&mut h, cov.clone(), Algorithm::HmacSha256, KEY, "a", 1, true).unwrap();
        let before = h.read_section(SectionKind::Signatures).unwrap();
        let seed = [9u8; 32];
        let idx = sign(&mut h, cov, Algorithm::Ed25519, &seed, "b", 2, true).unwrap();
        assert_eq!(idx, 1);
        let after = h.read_section(SectionKind::Signatures).unwrap();
        assert!(after.starts_with(&before));
        assert_eq!(verify(&mut h, 0, KEY).unwrap(), Verification::Valid);
        let pk = ed25519_public_key(&seed).unwrap();
        assert_eq!(verify(&mut h, 1, &pk).unwrap(), Verification::Valid);
        let item = decode_item(h.into_inner().get_ref()).unwrap();
        assert_eq!(item.signatures.len(), 2);
    }

    #[test]
    fn range_past_section_end_is_rejected() {
        let mut h = handle();
        let len = h.header().section(SectionKind::Content).byte_length;
        let err = sign(
            &mut h,
            vec![CoveredRange {
                kind: SectionKind::Content,
                offset: 1,
                length: len,
            }],
            Algorithm::HmacSha256,
            KEY,
            "a",
            0,
            true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::RangeOutOfBounds { .. }));
        let err = sign(
            &mut h,
            vec![CoveredRange::whole(SectionKind::Signatures, 0)],
            Algorithm::HmacSha256,
            KEY,
            "a",
            0,
            true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidItem(_)));
    }

    #[test]
    fn signing_leaves_other_sections_untouched() {
        let mut h = handle();
        let before: Vec<_> = [SectionKind::Metadata, SectionKind::Relations, SectionKind::Content]
            .iter()
            .map(|&k| h.read_section(k).unwrap())
            .collect();
        let cov = whole_content(&h);
        sign(&mut h, cov, Algorithm::HmacSha256, KEY, "a", 0, true).unwrap();
        let after: Vec<_> = [SectionKind::Metadata, SectionKind::Relations, SectionKind::Content]
            .iter()
            .map(|&k| h.read_section(k).unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sealed_signing_follows_policy() {
        let mut h = handle();
        h.seal().unwrap();
        let cov = whole_content(&h);
        assert!(matches!(
            sign(&mut h, cov.clone(), Algorithm::HmacSha256, KEY, "a", 0, false),
            Err(Error::SealedFile)
        ));
        sign(&mut h, cov, Algorithm::HmacSha256, KEY, "a", 0, true).unwrap();
        assert_eq!(verify(&mut h, 0, KEY).unwrap(), Verification::Valid);
    }

    #[test]
    fn unknown_algorithm_is_reported() {
        let mut h = handle();
        let cov = whole_content(&h);
        sign(&mut h, cov, Algorithm::HmacSha256, KEY, "a", 0, true).unwrap();
        let mut bytes = h.into_inner().into_inner();
        let header = crate::format::decode_header(&bytes).unwrap();
        let sig = header.section(SectionKind::Signatures);
        let off = sig.extents[0].start_page as usize * 512;
        bytes[off] = 0x7f;
        // header checksum does not cover payloads, so the file still opens
        let mut h = ItemHandle::open(Cursor::new(bytes)).unwrap();
        assert_eq!(
            verify(&mut h, 0, KEY).unwrap(),
            Verification::AlgorithmUnsupported
        );
    }

    #[test]
    fn record_codec_rejects_truncation() {
        let rec = SignatureRecord {
            covered: vec![CoveredRange::whole(SectionKind::Content, 4)],
            algorithm: Algorithm::HmacSha256,
            signer_id: "s".into(),
            signed_at: 5,
            signature: vec![1; 32],
        };
        let bytes = encode_records(std::slice::from_ref(&rec));
        assert_eq!(decode_records(&bytes).unwrap(), vec![rec]);
        for cut in 1..bytes.len() {
            assert!(decode_records(&bytes[..cut]).is_err());
        }
    }
}
