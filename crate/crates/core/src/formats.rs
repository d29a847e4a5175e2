//! Tokenizer file formats.
//!
//! * the native bundle (base64 bytes per token, merges as base64 pairs),
//! * the common `tokenizer.json` definition with a byte-remapped, text-keyed
//!   vocabulary and space-separated merges,
//! * rank-ordered base64 vocabularies: tiktoken text files and tekken JSON.
//!   These carry no merge list; merges are derived from the ranks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bpe::{PretokenizerConfig, Token, TokenId, TokenizerModel};
use crate::error::{Error, Result};

/// Pattern applied by a byte-level pre-tokenizer that has `use_regex` set.
pub const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Pre-tokenizer pattern shipped with the Llama 3 family.
pub const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

/// Pre-tokenizer pattern shipped with Qwen.
pub const QWEN_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

/// The byte ↔ printable codepoint remap used by byte-level tokenizer files.
///
/// Printable bytes 0x21–0x7E, 0xA1–0xAC and 0xAE–0xFF map to themselves; the
/// remaining 68 bytes map in ascending order to U+0100, U+0101, ….
#[derive(Debug, Clone)]
pub struct ByteAlphabet {
    to_char: [char; 256],
    to_byte: HashMap<char, u8>,
}

impl Default for ByteAlphabet {
    fn default() -> Self {
        Self::standard()
    }
}

impl ByteAlphabet {
    pub fn standard() -> Self {
        let printable =
            |b: u8| matches!(b, 0x21..=0x7E | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut to_char = ['\0'; 256];
        let mut next = 0x100u32;
        for b in 0..=255u8 {
            to_char[b as usize] = if printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(next).expect("below surrogates");
                next += 1;
                c
            };
        }
        let to_byte = to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        ByteAlphabet { to_char, to_byte }
    }

    pub fn char_for(&self, b: u8) -> char {
        self.to_char[b as usize]
    }

    pub fn byte_for(&self, c: char) -> Option<u8> {
        self.to_byte.get(&c).copied()
    }

    pub fn encode(&self, bytes: &[u8]) -> String {
        bytes.iter().map(|&b| self.char_for(b)).collect()
    }

    pub fn decode(&self, text: &str) -> Option<Vec<u8>> {
        text.chars().map(|c| self.byte_for(c)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleToken {
    pub id: u32,
    pub bytes_b64: String,
}

/// On-disk native bundle. `merges` order defines rank 0, 1, 2, ….
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bundle {
    pub vocab: Vec<BundleToken>,
    #[serde(default)]
    pub merges: Vec<[String; 2]>,
    #[serde(default)]
    pub pretokenizer: PretokenizerConfig,
    #[serde(default)]
    pub specials: Vec<u32>,
}

fn b64(entry: impl FnOnce() -> String, s: &str) -> Result<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| Error::parse(entry(), format!("bad base64: {e}")))
}

impl Bundle {
    pub fn from_model(model: &TokenizerModel) -> Self {
        Bundle {
            vocab: model
                .tokens()
                .map(|(id, bytes)| BundleToken {
                    id: id.0,
                    bytes_b64: B64.encode(bytes),
                })
                .collect(),
            merges: model
                .merges()
                .iter()
                .map(|m| [B64.encode(&m.left), B64.encode(&m.right)])
                .collect(),
            pretokenizer: model.pretokenizer().clone(),
            specials: model.specials().iter().map(|id| id.0).collect(),
        }
    }

    pub fn into_model(self) -> Result<TokenizerModel> {
        let mut tokens = Vec::with_capacity(self.vocab.len());
        for t in &self.vocab {
            let bytes = b64(|| format!("vocab id {}", t.id), &t.bytes_b64)?;
            tokens.push(Token::new(t.id, bytes));
        }
        let mut merges = Vec::with_capacity(self.merges.len());
        for (i, [l, r]) in self.merges.iter().enumerate() {
            merges.push((
                b64(|| format!("merge #{i}"), l)?,
                b64(|| format!("merge #{i}"), r)?,
            ));
        }
        TokenizerModel::new(
            tokens,
            merges,
            self.pretokenizer,
            self.specials.into_iter().map(TokenId),
        )
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn import_bundle(path: impl AsRef<Path>) -> Result<TokenizerModel> {
    let data = read(path.as_ref())?;
    parse_bundle(&data)
}

pub fn parse_bundle(data: &[u8]) -> Result<TokenizerModel> {
    let bundle: Bundle = serde_json::from_slice(data)?;
    bundle.into_model()
}

pub fn bundle_json(model: &TokenizerModel) -> String {
    serde_json::to_string(&Bundle::from_model(model)).expect("bundle serializes")
}

pub fn import_tokenizer_json(path: impl AsRef<Path>) -> Result<TokenizerModel> {
    let data = read(path.as_ref())?;
    parse_tokenizer_json(&data)
}

/// Parse a `tokenizer.json` BPE definition. Vocabulary keys are mapped back to
/// raw bytes through [`ByteAlphabet::standard`]; added tokens keep their
/// literal UTF-8 content and are excluded from analysis as specials.
pub fn parse_tokenizer_json(data: &[u8]) -> Result<TokenizerModel> {
    let root: Value = serde_json::from_slice(data)?;
    let model = root
        .get("model")
        .ok_or_else(|| Error::parse("model", "missing"))?;
    if let Some(kind) = model.get("type").and_then(Value::as_str) {
        if kind != "BPE" {
            return Err(Error::parse("model.type", format!("unsupported model type {kind:?}")));
        }
    }
    if model.get("ignore_merges").and_then(Value::as_bool) == Some(true) {
        log::warn!("tokenizer sets ignore_merges; whole-word vocabulary lookups are not replicated");
    }
    let alphabet = ByteAlphabet::standard();

    let vocab = model
        .get("vocab")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::parse("model.vocab", "missing or not an object"))?;
    let mut by_id: HashMap<u32, Vec<u8>> = HashMap::with_capacity(vocab.len());
    for (key, id) in vocab {
        let id = id
            .as_u64()
            .ok_or_else(|| Error::parse(format!("vocab key {key:?}"), "id is not an integer"))?
            as u32;
        let bytes = alphabet.decode(key).ok_or_else(|| {
            Error::parse(
                format!("vocab key {key:?}"),
                "contains a codepoint outside the byte remap alphabet",
            )
        })?;
        if by_id.insert(id, bytes).is_some() {
            return Err(Error::parse(format!("vocab key {key:?}"), "duplicate id"));
        }
    }

    let mut specials = Vec::new();
    if let Some(added) = root.get("added_tokens").and_then(Value::as_array) {
        for (i, t) in added.iter().enumerate() {
            let id = t
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::parse(format!("added_tokens[{i}]"), "missing id"))?
                as u32;
            let content = t
                .get("content")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::parse(format!("added_tokens[{i}]"), "missing content"))?;
            by_id.entry(id).or_insert_with(|| content.as_bytes().to_vec());
            specials.push(TokenId(id));
        }
    }

    let mut merges = Vec::new();
    if let Some(list) = model.get("merges").and_then(Value::as_array) {
        merges.reserve(list.len());
        for (i, m) in list.iter().enumerate() {
            let (l, r) = match m {
                Value::String(s) => s
                    .split_once(' ')
                    .ok_or_else(|| Error::parse(format!("merges[{i}]"), "expected \"left right\""))?,
                Value::Array(pair) if pair.len() == 2 => (
                    pair[0].as_str().unwrap_or_default(),
                    pair[1].as_str().unwrap_or_default(),
                ),
                _ => return Err(Error::parse(format!("merges[{i}]"), "expected a pair")),
            };
            let decode = |side: &str| {
                alphabet.decode(side).ok_or_else(|| {
                    Error::parse(
                        format!("merges[{i}] {side:?}"),
                        "contains a codepoint outside the byte remap alphabet",
                    )
                })
            };
            merges.push((decode(l)?, decode(r)?));
        }
    }

    let pretokenizer = root
        .get("pre_tokenizer")
        .map(pretokenizer_from_json)
        .unwrap_or_default();

    let tokens = by_id.into_iter().map(|(id, b)| Token::new(id, b)).collect();
    TokenizerModel::new(tokens, merges, pretokenizer, specials)
}

fn pretokenizer_from_json(v: &Value) -> PretokenizerConfig {
    fn find(v: &Value) -> Option<String> {
        match v.get("type").and_then(Value::as_str)? {
            "Sequence" => v
                .get("pretokenizers")?
                .as_array()?
                .iter()
                .find_map(find),
            "Split" => v
                .get("pattern")?
                .get("Regex")?
                .as_str()
                .map(str::to_owned),
            "ByteLevel" if v.get("use_regex").and_then(Value::as_bool).unwrap_or(true) => {
                Some(GPT2_PATTERN.to_owned())
            }
            _ => None,
        }
    }
    find(v).map(PretokenizerConfig::regex).unwrap_or_default()
}

/// Derive merges from a rank-ordered vocabulary: every split of a token into
/// two vocabulary entries becomes a merge, ordered by the rank of the merged
/// token, then by the ranks of its left and right halves.
fn merges_from_ranks(ranked: &[Vec<u8>]) -> Vec<(Vec<u8>, Vec<u8>)> {
    let rank: HashMap<&[u8], usize> = ranked
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_slice(), i))
        .collect();
    let mut merges = Vec::new();
    let mut local = Vec::new();
    for tok in ranked {
        local.clear();
        for k in 1..tok.len() {
            let (l, r) = tok.split_at(k);
            if let (Some(&rl), Some(&rr)) = (rank.get(l), rank.get(r)) {
                local.push((rl, rr, k));
            }
        }
        local.sort_unstable();
        merges.extend(local.iter().map(|&(_, _, k)| (tok[..k].to_vec(), tok[k..].to_vec())));
    }
    merges
}

/// Options for rank-ordered vocabularies, which carry neither a
/// pre-tokenizer nor (for tiktoken files) the special tokens.
#[derive(Debug, Clone, Default)]
pub struct RankedImportOptions {
    /// Placeholder special tokens appended after the ranked tokens (tiktoken).
    pub extra_specials: usize,
    /// Pre-tokenizer pattern to record in the model.
    pub pattern: Option<String>,
}

pub fn import_tiktoken(path: impl AsRef<Path>, opts: &RankedImportOptions) -> Result<TokenizerModel> {
    let data = read(path.as_ref())?;
    parse_tiktoken(&data, opts)
}

/// Parse `base64 rank` lines. Ranks become token ids and must be dense.
pub fn parse_tiktoken(data: &[u8], opts: &RankedImportOptions) -> Result<TokenizerModel> {
    let text = std::str::from_utf8(data).map_err(|_| Error::parse("tiktoken file", "not UTF-8"))?;
    let mut ranked: Vec<Option<Vec<u8>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry = || format!("line {}", lineno + 1);
        let (tok, rank) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(entry(), "expected \"<base64> <rank>\""))?;
        let rank: usize = rank
            .trim()
            .parse()
            .map_err(|_| Error::parse(entry(), "rank is not an integer"))?;
        let bytes = b64(entry, tok)?;
        if rank >= ranked.len() {
            ranked.resize(rank + 1, None);
        }
        if ranked[rank].replace(bytes).is_some() {
            return Err(Error::parse(entry(), "duplicate id"));
        }
    }
    let ranked: Vec<Vec<u8>> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::parse(format!("rank {i}"), "missing rank")))
        .collect::<Result<_>>()?;

    let merges = merges_from_ranks(&ranked);
    let n = ranked.len();
    let mut tokens: Vec<Token> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, b)| Token::new(i as u32, b))
        .collect();
    let mut specials = Vec::new();
    for k in 0..opts.extra_specials {
        let id = (n + k) as u32;
        tokens.push(Token::new(id, format!("<|special_{k}|>")));
        specials.push(TokenId(id));
    }
    let pretokenizer = opts
        .pattern
        .as_ref()
        .map(PretokenizerConfig::regex)
        .unwrap_or_default();
    TokenizerModel::new(tokens, merges, pretokenizer, specials)
}

pub fn import_tekken(path: impl AsRef<Path>) -> Result<TokenizerModel> {
    let data = read(path.as_ref())?;
    parse_tekken(&data)
}

/// Parse a tekken JSON vocabulary: special tokens occupy the first
/// `default_num_special_tokens` ids, ranked tokens follow, and the ranked
/// list is cut so the total equals `default_vocab_size`.
pub fn parse_tekken(data: &[u8]) -> Result<TokenizerModel> {
    #[derive(Deserialize)]
    struct Config {
        pattern: Option<String>,
        default_vocab_size: Option<usize>,
        default_num_special_tokens: Option<usize>,
    }
    #[derive(Deserialize)]
    struct Entry {
        rank: usize,
        token_bytes: String,
    }
    #[derive(Deserialize)]
    struct Special {
        rank: usize,
        token_str: String,
    }
    #[derive(Deserialize)]
    struct Tekken {
        config: Config,
        vocab: Vec<Entry>,
        #[serde(default)]
        special_tokens: Vec<Special>,
    }

    let tk: Tekken = serde_json::from_slice(data)?;
    let num_special = tk
        .config
        .default_num_special_tokens
        .unwrap_or(tk.special_tokens.len());
    let inner_size = tk
        .config
        .default_vocab_size
        .map(|v| v.saturating_sub(num_special))
        .unwrap_or(tk.vocab.len())
        .min(tk.vocab.len());

    let mut ranked: Vec<Option<Vec<u8>>> = vec![None; inner_size];
    for e in &tk.vocab {
        if e.rank >= inner_size {
            continue;
        }
        let bytes = b64(|| format!("vocab rank {}", e.rank), &e.token_bytes)?;
        if ranked[e.rank].replace(bytes).is_some() {
            return Err(Error::parse(format!("vocab rank {}", e.rank), "duplicate id"));
        }
    }
    let ranked: Vec<Vec<u8>> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::parse(format!("vocab rank {i}"), "missing rank")))
        .collect::<Result<_>>()?;

    let merges = merges_from_ranks(&ranked);
    let mut special_names: Vec<String> = (0..num_special).map(|i| format!("<SPECIAL_{i}>")).collect();
    for s in tk.special_tokens {
        if s.rank < num_special {
            special_names[s.rank] = s.token_str;
        }
    }
    let mut tokens = Vec::with_capacity(num_special + inner_size);
    for (i, name) in special_names.into_iter().enumerate() {
        tokens.push(Token::new(i as u32, name));
    }
    for (i, b) in ranked.into_iter().enumerate() {
        tokens.push(Token::new((num_special + i) as u32, b));
    }
    let pretokenizer = tk
        .config
        .pattern
        .map(PretokenizerConfig::regex)
        .unwrap_or_default();
    TokenizerModel::new(tokens, merges, pretokenizer, (0..num_special as u32).map(TokenId))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerFormat {
    Bundle,
    TokenizerJson,
    Tekken,
    Tiktoken,
}

/// Guess the format of a tokenizer file from its content.
pub fn detect_format(data: &[u8]) -> Result<TokenizerFormat> {
    let head = data.iter().find(|b| !b.is_ascii_whitespace());
    if head != Some(&b'{') {
        return Ok(TokenizerFormat::Tiktoken);
    }
    let v: Value = serde_json::from_slice(data)?;
    if v.get("model").is_some() {
        Ok(TokenizerFormat::TokenizerJson)
    } else if v.get("config").is_some() && v.get("vocab").is_some_and(Value::is_array) {
        Ok(TokenizerFormat::Tekken)
    } else if v.get("vocab").is_some_and(Value::is_array) {
        Ok(TokenizerFormat::Bundle)
    } else {
        Err(Error::parse("tokenizer file", "unrecognized JSON layout"))
    }
}

/// Load any supported tokenizer file.
pub fn load_tokenizer(path: impl AsRef<Path>, opts: &RankedImportOptions) -> Result<TokenizerModel> {
    let data = read(path.as_ref())?;
    match detect_format(&data)? {
        TokenizerFormat::Bundle => parse_bundle(&data),
        TokenizerFormat::TokenizerJson => parse_tokenizer_json(&data),
        TokenizerFormat::Tekken => parse_tekken(&data),
        TokenizerFormat::Tiktoken => parse_tiktoken(&data, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::EncodeMode;

    #[test]
    fn remap_alphabet() {
        let a = ByteAlphabet::standard();
        assert_eq!(a.char_for(0x41), 'A');
        assert_eq!(a.char_for(0x20), '\u{120}');
        assert_eq!(a.char_for(0x00), '\u{100}');
        assert_eq!(a.char_for(0xAD), '\u{143}');
        let distinct: std::collections::HashSet<char> = (0..=255u8).map(|b| a.char_for(b)).collect();
        assert_eq!(distinct.len(), 256);
        // the 68 remapped bytes occupy U+0100..=U+0143
        assert_eq!((0..=255u8).filter(|&b| a.char_for(b) as u32 >= 0x100).count(), 68);
        assert_eq!(a.decode(&a.encode(&[0, 32, 200, 255])).unwrap(), vec![0, 32, 200, 255]);
    }

    #[test]
    fn minimal_bundle() {
        let vocab: Vec<BundleToken> = (0..256u32)
            .map(|b| BundleToken {
                id: b,
                bytes_b64: B64.encode([b as u8]),
            })
            .collect();
        let json = serde_json::json!({ "vocab": vocab, "merges": [] }).to_string();
        let m = parse_bundle(json.as_bytes()).unwrap();
        assert_eq!(m.len(), 256);
        assert!(m.is_byte_complete());
    }

    #[test]
    fn bundle_errors() {
        let dup = r#"{"vocab":[{"id":0,"bytes_b64":"YQ=="},{"id":0,"bytes_b64":"Yg=="}],"merges":[]}"#;
        let err = parse_bundle(dup.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");

        assert!(matches!(parse_bundle(b"{not json"), Err(Error::Json(_))));

        let unknown = r#"{"vocab":[{"id":0,"bytes_b64":"YQ=="}],"merges":[["YQ==","Yg=="]]}"#;
        let err = parse_bundle(unknown.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("merge #0"), "{err}");
    }

    #[test]
    fn toy_bundle_encodes_merge() {
        let json = r#"{"vocab":[{"id":0,"bytes_b64":"YQ=="},{"id":1,"bytes_b64":"Yg=="},{"id":2,"bytes_b64":"YWI="}],
            "merges":[["YQ==","Yg=="]],"pretokenizer":{"mode":"none"},"specials":[]}"#;
        let m = parse_bundle(json.as_bytes()).unwrap();
        assert_eq!(m.encode(b"ab").unwrap(), vec![TokenId(2)]);
    }

    #[test]
    fn tokenizer_json_import() {
        let a = ByteAlphabet::standard();
        let json = serde_json::json!({
            "added_tokens": [{"id": 4, "content": "<|end|>", "special": true}],
            "pre_tokenizer": {"type": "ByteLevel", "add_prefix_space": false, "use_regex": true},
            "model": {
                "type": "BPE",
                "vocab": {
                    "a": 0, a.encode(b" ").as_str(): 1,
                    a.encode(b" a").as_str(): 2, a.encode(&[0xE3]).as_str(): 3
                },
                "merges": [format!("{} a", a.encode(b" "))]
            }
        });
        let m = parse_tokenizer_json(json.to_string().as_bytes()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.token_bytes(TokenId(3)).unwrap(), &[0xE3]);
        assert!(m.is_special(TokenId(4)));
        assert_eq!(m.encode_with(b" a", EncodeMode::MergeOnly).unwrap(), vec![TokenId(2)]);
        assert_eq!(m.pretokenizer().pattern.as_deref(), Some(GPT2_PATTERN));
    }

    #[test]
    fn tokenizer_json_rejects_unmapped_key() {
        let json = r#"{"model":{"type":"BPE","vocab":{"a":0," b":1},"merges":[]}}"#;
        let err = parse_tokenizer_json(json.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("\" b\""), "{err}");
    }

    #[test]
    fn tiktoken_derives_merges() {
        let lines = ["a", "b", "c", "ab", "abc"]
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{} {i}", B64.encode(t)))
            .collect::<Vec<_>>()
            .join("\n");
        let m = parse_tiktoken(lines.as_bytes(), &RankedImportOptions { extra_specials: 2, pattern: None })
            .unwrap();
        assert_eq!(m.len(), 7);
        assert!(m.is_special(TokenId(6)));
        assert_eq!(m.encode(b"abc").unwrap(), vec![TokenId(4)]);
        assert_eq!(m.encode(b"cab").unwrap(), vec![TokenId(2), TokenId(3)]);
        // (a,b) from "ab", then (ab,c) from "abc"
        assert_eq!(m.merges().len(), 2);
    }

    #[test]
    fn tekken_layout() {
        let vocab: Vec<_> = ["a", "b", "ab", "zz"]
            .iter()
            .enumerate()
            .map(|(i, t)| serde_json::json!({"rank": i, "token_bytes": B64.encode(t), "token_str": t}))
            .collect();
        let json = serde_json::json!({
            "config": {"pattern": "[a-z]+", "default_vocab_size": 5, "default_num_special_tokens": 2},
            "vocab": vocab,
            "special_tokens": [{"rank": 0, "token_str": "<unk>", "is_control": true}]
        });
        let m = parse_tekken(json.to_string().as_bytes()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.token_bytes(TokenId(0)).unwrap(), b"<unk>");
        assert_eq!(m.encode(b"ab").unwrap(), vec![TokenId(4)]);
        assert_eq!(
            detect_format(json.to_string().as_bytes()).unwrap(),
            TokenizerFormat::Tekken
        );
    }
}
