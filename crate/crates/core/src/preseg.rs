//! Alternative tokenization that never crosses a character boundary.
//!
//! A viable bigram's phrase is cut into the characters wholly inside the
//! prefix, the bridged character, and the characters wholly inside the
//! suffix. Each part is encoded on its own and the ids are concatenated, so
//! no merge can span a part boundary.

use serde::{Deserialize, Serialize};

use crate::bpe::{EncodeMode, TokenId, TokenizerModel};
use crate::error::{Error, Result};
use crate::forge::BigramCandidate;
use crate::utf8::{analyze_token_bytes, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedEncoding {
    pub segments: Vec<Segment>,
    pub flat_ids: Vec<TokenId>,
    /// Every output token is a complete character sequence on its own.
    pub avoids_incomplete: bool,
}

pub fn natural_tokenization(model: &TokenizerModel, phrase: &str, mode: EncodeMode) -> Result<Vec<TokenId>> {
    model.encode_with(phrase.as_bytes(), mode)
}

fn all_complete(model: &TokenizerModel, ids: &[TokenId]) -> bool {
    ids.iter().all(|&id| {
        model
            .token_bytes(id)
            .is_some_and(|b| analyze_token_bytes(b).role == Role::Complete)
    })
}

pub fn presegment_tokenize(model: &TokenizerModel, bigram: &BigramCandidate) -> Result<SegmentedEncoding> {
    let phrase = bigram
        .phrase()
        .ok_or(Error::InvalidUtf8 { offset: 0 })?;
    let bridged = bigram
        .bridged_range()
        .ok_or_else(|| Error::Config("bigram has no character across its boundary".into()))?;
    let parts = [
        &phrase[..bridged.start],
        &phrase[bridged.clone()],
        &phrase[bridged.end..],
    ];
    let mut segments = Vec::with_capacity(3);
    for text in parts.into_iter().filter(|t| !t.is_empty()) {
        let ids = model.encode_with(text.as_bytes(), EncodeMode::MergeOnly)?;
        segments.push(Segment {
            text: text.to_owned(),
            ids,
        });
    }
    let flat_ids: Vec<TokenId> = segments.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let avoids_incomplete = all_complete(model, &flat_ids);
    Ok(SegmentedEncoding {
        segments,
        flat_ids,
        avoids_incomplete,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternativeReport {
    pub decode_equal: bool,
    pub avoids_incomplete: bool,
    pub differs_from_natural: bool,
    pub natural_len: usize,
    pub alternative_len: usize,
    pub flags: Vec<String>,
}

impl AlternativeReport {
    /// Usable in the alternative-tokenization experiment set.
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Check an alternative encoding against the bigram's natural tokenization.
/// Only a decode mismatch is an error; everything else is flagged.
pub fn verify_alternative(
    model: &TokenizerModel,
    enc: &SegmentedEncoding,
    bigram: &BigramCandidate,
) -> Result<AlternativeReport> {
    let decoded = model.decode(&enc.flat_ids)?;
    if decoded != bigram.joined_bytes {
        return Err(Error::DecodeMismatch(format!(
            "{:?} vs {:?}",
            String::from_utf8_lossy(&decoded),
            String::from_utf8_lossy(&bigram.joined_bytes)
        )));
    }
    let natural = vec![bigram.prefix, bigram.suffix];
    let differs = enc.flat_ids != natural;
    let mut flags = Vec::new();
    if !enc.avoids_incomplete {
        flags.push("alternative contains an incomplete token".to_owned());
    }
    if !differs {
        flags.push("alternative equals the natural tokenization".to_owned());
    }
    if enc.flat_ids.len() < natural.len() {
        flags.push("alternative is shorter than the natural tokenization".to_owned());
    }
    Ok(AlternativeReport {
        decode_equal: true,
        avoids_incomplete: enc.avoids_incomplete,
        differs_from_natural: differs,
        natural_len: natural.len(),
        alternative_len: enc.flat_ids.len(),
        flags,
    })
}

/// One JSON-lines record of `preseg` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresegRecord {
    pub phrase: String,
    pub natural_ids: Vec<TokenId>,
    pub alt_ids: Vec<TokenId>,
    pub avoids_incomplete: bool,
    /// Reasons to keep this phrase out of the alternative set; empty when usable.
    #[serde(default)]
    pub flags: Vec<String>,
}
