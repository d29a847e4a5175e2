//! Byte-level BPE model with deterministic, rank-ordered merge inference.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::utf8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: TokenId,
    pub bytes: Vec<u8>,
}

impl Token {
    pub fn new(id: u32, bytes: impl Into<Vec<u8>>) -> Self {
        Token {
            id: TokenId(id),
            bytes: bytes.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    /// Lower merges first.
    pub rank: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretokenizerMode {
    #[default]
    None,
    Regex,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretokenizerConfig {
    pub mode: PretokenizerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

impl PretokenizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn regex(pattern: impl Into<String>) -> Self {
        PretokenizerConfig {
            mode: PretokenizerMode::Regex,
            pattern: Some(pattern.into()),
        }
    }

    fn compile(&self) -> Result<Option<Regex>> {
        match (self.mode, &self.pattern) {
            (PretokenizerMode::None, None) => Ok(None),
            (PretokenizerMode::None, Some(_)) => Err(Error::Pattern(
                "pattern given with mode \"none\"".into(),
            )),
            (PretokenizerMode::Regex, None) => {
                Err(Error::Pattern("mode \"regex\" requires a pattern".into()))
            }
            (PretokenizerMode::Regex, Some(p)) => Regex::new(p)
                .map(Some)
                .map_err(|e| Error::Pattern(e.to_string())),
        }
    }
}

/// How input is cut into pieces before merges run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodeMode {
    /// The whole input is one piece.
    #[default]
    MergeOnly,
    /// Split with the model's pre-tokenizer (falls back to one piece when the
    /// model has none).
    Pretokenized,
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<Vec<u8>>,
    specials: BTreeSet<TokenId>,
    by_bytes: HashMap<Vec<u8>, TokenId>,
    byte_tokens: [Option<TokenId>; 256],
    merges: Vec<MergeRule>,
    pair_ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    pretokenizer: PretokenizerConfig,
    splitter: Option<Regex>,
}

fn show(bytes: &[u8]) -> String {
    format!("{:?}", String::from_utf8_lossy(bytes))
}

impl TokenizerModel {
    /// Build and validate a model. Merge ranks are the positions in `merges`.
    ///
    /// Token ids must be exactly `0..tokens.len()`. Byte sequences must be
    /// unique among non-special tokens; special tokens never take part in
    /// merges or text encoding.
    pub fn new(
        tokens: Vec<Token>,
        merges: Vec<(Vec<u8>, Vec<u8>)>,
        pretokenizer: PretokenizerConfig,
        specials: impl IntoIterator<Item = TokenId>,
    ) -> Result<Self> {
        let n = tokens.len();
        let mut slots: Vec<Option<Vec<u8>>> = vec![None; n];
        for tok in tokens {
            let idx = tok.id.index();
            if idx >= n {
                return Err(Error::parse(
                    format!("token id {}", tok.id),
                    format!("ids must be dense in 0..{n}"),
                ));
            }
            if tok.bytes.is_empty() {
                return Err(Error::parse(format!("token id {}", tok.id), "empty byte sequence"));
            }
            if slots[idx].is_some() {
                return Err(Error::parse(format!("token id {}", tok.id), "duplicate id"));
            }
            slots[idx] = Some(tok.bytes);
        }
        let tokens: Vec<Vec<u8>> = slots.into_iter().map(|s| s.expect("dense ids")).collect();

        let specials: BTreeSet<TokenId> = specials.into_iter().collect();
        if let Some(bad) = specials.iter().find(|id| id.index() >= n) {
            return Err(Error::parse(format!("special {bad}"), "id outside the vocabulary"));
        }

        let mut by_bytes = HashMap::with_capacity(n);
        let mut byte_tokens = [None; 256];
        for (i, bytes) in tokens.iter().enumerate() {
            let id = TokenId(i as u32);
            if specials.contains(&id) {
                continue;
            }
            if let Some(prev) = by_bytes.insert(bytes.clone(), id) {
                return Err(Error::parse(
                    format!("token id {id}"),
                    format!("duplicate bytes {} (also id {prev})", show(bytes)),
                ));
            }
            if let [b] = bytes.as_slice() {
                byte_tokens[*b as usize] = Some(id);
            }
        }

        let mut pair_ranks = HashMap::with_capacity(merges.len());
        let mut rules = Vec::with_capacity(merges.len());
        for (rank, (left, right)) in merges.into_iter().enumerate() {
            let entry = || format!("merge #{rank} ({} + {})", show(&left), show(&right));
            let l = *by_bytes
                .get(&left)
                .ok_or_else(|| Error::parse(entry(), "left side is not in the vocabulary"))?;
            let r = *by_bytes
                .get(&right)
                .ok_or_else(|| Error::parse(entry(), "right side is not in the vocabulary"))?;
            let joined = [left.as_slice(), right.as_slice()].concat();
            let m = *by_bytes
                .get(&joined)
                .ok_or_else(|| Error::parse(entry(), "merged result is not in the vocabulary"))?;
            let rank = rank as u32;
            // a repeated pair keeps its first (highest priority) rank
            pair_ranks.entry((l, r)).or_insert((rank, m));
            rules.push(MergeRule { left, right, rank });
        }

        let splitter = pretokenizer.compile()?;
        Ok(TokenizerModel {
            tokens,
            specials,
            by_bytes,
            byte_tokens,
            merges: rules,
            pair_ranks,
            pretokenizer,
            splitter,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All 256 single-byte tokens are present, so every input is encodable.
    pub fn is_byte_complete(&self) -> bool {
        self.byte_tokens.iter().all(Option::is_some)
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id.index()).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.by_bytes.get(bytes).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains(&id)
    }

    pub fn specials(&self) -> &BTreeSet<TokenId> {
        &self.specials
    }

    /// Every token in id order, specials included.
    pub fn tokens(&self) -> impl Iterator<Item = (TokenId, &[u8])> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, b)| (TokenId(i as u32), b.as_slice()))
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn pretokenizer(&self) -> &PretokenizerConfig {
        &self.pretokenizer
    }

    /// Same vocabulary and merges with a different pre-tokenizer.
    pub fn with_pretokenizer(&self, pretokenizer: PretokenizerConfig) -> Result<Self> {
        let splitter = pretokenizer.compile()?;
        Ok(TokenizerModel {
            pretokenizer,
            splitter,
            ..self.clone()
        })
    }

    /// Encode with the model's configured pre-tokenizer.
    pub fn encode(&self, input: &[u8]) -> Result<Vec<TokenId>> {
        self.encode_with(input, EncodeMode::Pretokenized)
    }

    pub fn encode_with(&self, input: &[u8], mode: EncodeMode) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(input.len());
        match (&self.splitter, mode) {
            (Some(re), EncodeMode::Pretokenized) => {
                for chunk in input.utf8_chunks() {
                    let text = chunk.valid();
                    let base = text.as_ptr() as usize - input.as_ptr() as usize;
                    let mut last = 0;
                    for m in re.find_iter(text) {
                        let m = m.map_err(|e| Error::Pattern(e.to_string()))?;
                        if m.start() > last {
                            self.encode_piece(&text.as_bytes()[last..m.start()], base + last, &mut out)?;
                        }
                        self.encode_piece(m.as_str().as_bytes(), base + m.start(), &mut out)?;
                        last = m.end();
                    }
                    if last < text.len() {
                        self.encode_piece(&text.as_bytes()[last..], base + last, &mut out)?;
                    }
                    let invalid = chunk.invalid();
                    if !invalid.is_empty() {
                        self.encode_piece(invalid, base + text.len(), &mut out)?;
                    }
                }
            }
            _ => self.encode_piece(input, 0, &mut out)?,
        }
        Ok(out)
    }

    /// Merge-only BPE over one piece: start from single-byte tokens and apply
    /// the lowest-ranked applicable merge (leftmost on ties) until none apply.
    fn encode_piece(&self, piece: &[u8], offset: usize, out: &mut Vec<TokenId>) -> Result<()> {
        let mut ids = Vec::with_capacity(piece.len());
        for (i, &b) in piece.iter().enumerate() {
            match self.byte_tokens[b as usize] {
                Some(id) => ids.push(id),
                None => {
                    return Err(Error::Unencodable {
                        byte: b,
                        offset: offset + i,
                    })
                }
            }
        }
        if ids.len() < 2 {
            out.extend(ids);
            return Ok(());
        }

        // ranks[i] is the merge available for (ids[i], ids[i+1])
        let lookup = |a: TokenId, b: TokenId| self.pair_ranks.get(&(a, b)).copied();
        let mut ranks: Vec<Option<(u32, TokenId)>> =
            ids.windows(2).map(|w| lookup(w[0], w[1])).collect();
        loop {
            let mut best: Option<(usize, u32, TokenId)> = None;
            for (i, r) in ranks.iter().enumerate() {
                if let Some((rank, merged)) = *r {
                    if best.is_none_or(|(_, b, _)| rank < b) {
                        best = Some((i, rank, merged));
                    }
                }
            }
            let Some((i, _, merged)) = best else { break };
            ids[i] = merged;
            ids.remove(i + 1);
            ranks.remove(i);
            if i < ranks.len() {
                ranks[i] = lookup(ids[i], ids[i + 1]);
            }
            if i > 0 {
                ranks[i - 1] = lookup(ids[i - 1], ids[i]);
            }
        }
        out.extend(ids);
        Ok(())
    }

    /// Concatenated token bytes; no character validation.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id).ok_or(Error::UnknownId(id))?);
        }
        Ok(out)
    }

    /// Decode and require well-formed UTF-8.
    pub fn decode_strict(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode(ids)?;
        utf8::validate(&bytes).map_err(|offset| Error::InvalidUtf8 { offset })?;
        Ok(String::from_utf8(bytes).expect("validated"))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// {a, b, ab} with the single merge (a, b).
    pub(crate) fn toy_ab() -> TokenizerModel {
        TokenizerModel::new(
            vec![Token::new(0, "a"), Token::new(1, "b"), Token::new(2, "ab")],
            vec![(b"a".to_vec(), b"b".to_vec())],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap()
    }

    #[test]
    fn single_merge() {
        let m = toy_ab();
        assert_eq!(m.encode(b"ab").unwrap(), vec![TokenId(2)]);
        assert_eq!(m.encode(b"ba").unwrap(), vec![TokenId(1), TokenId(0)]);
        assert_eq!(m.encode(b"abab").unwrap(), vec![TokenId(2), TokenId(2)]);
        assert_eq!(m.decode(&[TokenId(0), TokenId(1)]).unwrap(), b"ab");
        assert!(!m.is_byte_complete());
    }

    #[test]
    fn unencodable_byte() {
        let err = toy_ab().encode(b"abc").unwrap_err();
        assert!(matches!(err, Error::Unencodable { byte: b'c', offset: 2 }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = TokenizerModel::new(
            vec![Token::new(0, "a"), Token::new(0, "b")],
            vec![],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn merge_with_unknown_side_rejected() {
        let err = TokenizerModel::new(
            vec![Token::new(0, "a"), Token::new(1, "b")],
            vec![(b"a".to_vec(), b"b".to_vec())],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap_err();
        assert!(err.to_string().contains("merge #0"), "{err}");
    }

    #[test]
    fn rank_order_decides() {
        // abc: (b,c) outranks (a,b), so the result is [a, bc]
        let m = TokenizerModel::new(
            vec![
                Token::new(0, "a"),
                Token::new(1, "b"),
                Token::new(2, "c"),
                Token::new(3, "bc"),
                Token::new(4, "ab"),
            ],
            vec![(b"b".to_vec(), b"c".to_vec()), (b"a".to_vec(), b"b".to_vec())],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap();
        assert_eq!(m.encode(b"abc").unwrap(), vec![TokenId(0), TokenId(3)]);
    }

    #[test]
    fn leftmost_on_repeated_pair() {
        // aaa with (a,a): leftmost pair merges first -> [aa, a]
        let m = TokenizerModel::new(
            vec![Token::new(0, "a"), Token::new(1, "aa")],
            vec![(b"a".to_vec(), b"a".to_vec())],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap();
        assert_eq!(m.encode(b"aaa").unwrap(), vec![TokenId(1), TokenId(0)]);
    }

    #[test]
    fn decode_strict_errors() {
        let mut tokens: Vec<Token> = (0..=255u8).map(|b| Token::new(b as u32, vec![b])).collect();
        tokens.push(Token::new(256, vec![0x9F, 0xE8, 0x83, 0xBD]));
        tokens.push(Token::new(257, "能"));
        tokens.push(Token::new(258, vec![0xE8, 0x83]));
        let m = TokenizerModel::new(
            tokens,
            vec![
                (vec![0xE8], vec![0x83]),
                (vec![0xE8, 0x83], vec![0xBD]),
            ],
            PretokenizerConfig::none(),
            [],
        )
        .unwrap();
        assert!(matches!(
            m.decode_strict(&[TokenId(256)]),
            Err(Error::InvalidUtf8 { offset: 0 })
        ));
        assert_eq!(m.decode_strict(&[TokenId(257)]).unwrap(), "能");
        assert_eq!(m.decode_strict(&[]).unwrap(), "");
        assert!(matches!(m.decode(&[TokenId(999)]), Err(Error::UnknownId(TokenId(999)))));
    }

    #[test]
    fn regex_pretokenizer_splits_pieces() {
        let mut tokens: Vec<Token> = (0..=255u8).map(|b| Token::new(b as u32, vec![b])).collect();
        tokens.push(Token::new(256, " b"));
        let merges = vec![(b" ".to_vec(), b"b".to_vec())];
        let m = TokenizerModel::new(
            tokens,
            merges,
            PretokenizerConfig::regex(r"[a-z]+| ?[a-z]+"),
            [],
        )
        .unwrap();
        // "a b": pieces "a", " b"
        assert_eq!(m.encode(b"a b").unwrap(), vec![TokenId(97), TokenId(256)]);
        // a pattern that never matches the space leaves it as its own gap piece
        let m2 = m.with_pretokenizer(PretokenizerConfig::regex("[a-z]+")).unwrap();
        assert_eq!(m2.encode(b"a b").unwrap(), vec![TokenId(97), TokenId(32), TokenId(98)]);
        assert_eq!(
            m2.encode_with(b"a b", EncodeMode::MergeOnly).unwrap(),
            vec![TokenId(97), TokenId(256)]
        );
        // invalid bytes survive as their own piece
        assert_eq!(m2.decode(&m2.encode(b"a\xffb").unwrap()).unwrap(), b"a\xffb");
    }

    #[test]
    fn bad_pattern() {
        assert!(matches!(
            toy_ab().with_pretokenizer(PretokenizerConfig::regex("(")),
            Err(Error::Pattern(_))
        ));
    }
}
