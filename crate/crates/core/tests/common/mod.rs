#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use improbable_core::formats::{self, RankedImportOptions};
use improbable_core::{PretokenizerConfig, Token, TokenizerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHABET: &str = "サーミ能カタ한국어中文字éãабвгαβγ😀ab";

/// Byte-level BPE trained on random words over [`ALPHABET`], plus a few
/// planted prefix/suffix tokens straddling character boundaries.
pub struct Synthetic {
    pub model: TokenizerModel,
    pub merges: Vec<(Vec<u8>, Vec<u8>)>,
}

pub fn synthetic_model(seed: u64, trained_merges: usize) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chars: Vec<char> = ALPHABET.chars().collect();
    let words: Vec<Vec<u8>> = (0..300)
        .map(|_| {
            let n = rng.random_range(2..=6);
            (0..n)
                .map(|_| chars[rng.random_range(0..chars.len())])
                .collect::<String>()
                .into_bytes()
        })
        .collect();

    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashSet<Vec<u8>> = vocab.iter().cloned().collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    let mut pieces: Vec<Vec<Vec<u8>>> = words.iter().map(|w| w.iter().map(|&b| vec![b]).collect()).collect();

    for _ in 0..trained_merges {
        let mut freq: BTreeMap<(Vec<u8>, Vec<u8>), usize> = BTreeMap::new();
        for p in &pieces {
            for w in p.windows(2) {
                *freq.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
        // most frequent, smallest pair on ties
        let Some((pair, _)) = freq.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) else {
            break;
        };
        let joined = [pair.0.clone(), pair.1.clone()].concat();
        for p in pieces.iter_mut() {
            let mut out = Vec::with_capacity(p.len());
            let mut i = 0;
            while i < p.len() {
                if i + 1 < p.len() && p[i] == pair.0 && p[i + 1] == pair.1 {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(p[i].clone());
                    i += 1;
                }
            }
            *p = out;
        }
        if known.insert(joined.clone()) {
            vocab.push(joined);
        }
        merges.push(pair);
    }

    // planted: サー<E3 83>, <9F>能, <B5>ー, é<E3>
    let planted: [&[u8]; 4] = [
        &[0xE3, 0x82, 0xB5, 0xE3, 0x83, 0xBC, 0xE3, 0x83],
        &[0x9F, 0xE8, 0x83, 0xBD],
        &[0xB5, 0xE3, 0x83, 0xBC],
        &[0xC3, 0xA9, 0xE3],
    ];
    for t in planted {
        for end in 2..=t.len() {
            let (l, r) = (t[..end - 1].to_vec(), t[end - 1..end].to_vec());
            let joined = t[..end].to_vec();
            if known.insert(joined.clone()) {
                vocab.push(joined);
                merges.push((l, r));
            }
        }
    }

    let tokens: Vec<Token> = vocab.iter().enumerate().map(|(i, b)| Token::new(i as u32, b.clone())).collect();
    let model = TokenizerModel::new(tokens, merges.clone(), PretokenizerConfig::none(), []).expect("consistent");
    Synthetic { model, merges }
}

/// Textbook greedy BPE: repeatedly merge the lowest-ranked adjacent pair,
/// leftmost first. Quadratic and obviously correct.
pub fn naive_encode(merges: &[(Vec<u8>, Vec<u8>)], vocab: &HashMap<Vec<u8>, u32>, bytes: &[u8]) -> Vec<u32> {
    let ranks: HashMap<(&[u8], &[u8]), usize> = merges
        .iter()
        .enumerate()
        .map(|(i, (l, r))| ((l.as_slice(), r.as_slice()), i))
        .rev()
        .collect();
    let mut parts: Vec<Vec<u8>> = bytes.iter().map(|&b| vec![b]).collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..parts.len().saturating_sub(1) {
            if let Some(&r) = ranks.get(&(parts[i].as_slice(), parts[i + 1].as_slice())) {
                if best.is_none_or(|(br, _)| r < br) {
                    best = Some((r, i));
                }
            }
        }
        let Some((_, i)) = best else { break };
        let right = parts.remove(i + 1);
        parts[i].extend(right);
    }
    parts.iter().map(|p| vocab[p]).collect()
}

pub fn vocab_map(model: &TokenizerModel) -> HashMap<Vec<u8>, u32> {
    model
        .tokens()
        .filter(|(id, _)| !model.is_special(*id))
        .map(|(id, b)| (b.to_vec(), id.0))
        .collect()
}

/// Every ordered pair of multi-byte tokens, judged with std UTF-8 checks and
/// the naive encoder.
pub fn brute_force_legal(s: &Synthetic) -> Vec<(u32, u32)> {
    let vocab = vocab_map(&s.model);
    let toks: Vec<(u32, &[u8])> = s.model.tokens().map(|(id, b)| (id.0, b)).collect();
    let mut out = Vec::new();
    for &(a, ab) in &toks {
        if !std_is_prefix(ab) {
            continue;
        }
        for &(b, bb) in &toks {
            if !std_is_suffix(bb) {
                continue;
            }
            let joined = [ab, bb].concat();
            if std::str::from_utf8(&joined).is_ok() && naive_encode(&s.merges, &vocab, &joined) == [a, b] {
                out.push((a, b));
            }
        }
    }
    out
}

/// Prefix role by the standard library alone: the only defect is an
/// unfinished sequence at the very end.
pub fn std_is_prefix(b: &[u8]) -> bool {
    b.len() > 1 && matches!(std::str::from_utf8(b), Err(e) if e.error_len().is_none())
}

/// Suffix role: one to three continuation bytes, then well-formed text.
pub fn std_is_suffix(b: &[u8]) -> bool {
    if b.len() < 2 {
        return false;
    }
    let k = b.iter().take_while(|&&x| x & 0xC0 == 0x80).count();
    (1..=3).contains(&k) && std::str::from_utf8(&b[k..]).is_ok()
}

/// Random well-formed text of up to `max_chars` characters, drawn from
/// several script ranges and the full scalar space.
pub fn random_text(rng: &mut impl Rng, max_chars: usize) -> String {
    let n = rng.random_range(0..=max_chars);
    (0..n)
        .map(|_| match rng.random_range(0..6) {
            0 => rng.random_range(0x20u32..0x7F),
            1 => rng.random_range(0xA0u32..0x250),
            2 => rng.random_range(0x3040u32..0x3100),
            3 => rng.random_range(0x4E00u32..0x9FFF),
            4 => rng.random_range(0x1F300u32..0x1FAFF),
            _ => rng.random_range(0u32..0x110000),
        })
        .filter_map(char::from_u32)
        .collect()
}

pub struct RealTokenizer {
    pub name: &'static str,
    pub files: &'static [&'static str],
    pub extra_specials: usize,
    pub pattern: Option<&'static str>,
    pub incomplete: usize,
    pub legal_bigrams: usize,
}

pub const REAL_TOKENIZERS: [RealTokenizer; 5] = [
    RealTokenizer {
        name: "Llama-3.1",
        files: &["llama-3.1.tiktoken", "llama-3.1.tokenizer.json"],
        extra_specials: 256,
        pattern: Some(formats::LLAMA3_PATTERN),
        incomplete: 1224,
        legal_bigrams: 71_000,
    },
    RealTokenizer {
        name: "Exaone",
        files: &["exaone-3.0.tokenizer.json"],
        extra_specials: 0,
        pattern: None,
        incomplete: 1222,
        legal_bigrams: 36_000,
    },
    RealTokenizer {
        name: "Qwen2.5",
        files: &["qwen2.5.tiktoken", "qwen2.5.tokenizer.json"],
        extra_specials: 22,
        pattern: Some(formats::QWEN_PATTERN),
        incomplete: 1320,
        legal_bigrams: 39_000,
    },
    RealTokenizer {
        name: "Mistral-Nemo",
        files: &["mistral-nemo.tekken.json", "mistral-nemo.tokenizer.json"],
        extra_specials: 0,
        pattern: None,
        incomplete: 1307,
        legal_bigrams: 135_000,
    },
    RealTokenizer {
        name: "Command-R",
        files: &["command-r.tokenizer.json"],
        extra_specials: 0,
        pattern: None,
        incomplete: 2956,
        legal_bigrams: 1_479_000,
    },
];

pub fn tokenizer_dir() -> PathBuf {
    std::env::var_os("IMPROBABLE_TOKENIZER_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../tokenizers"))
}

impl RealTokenizer {
    pub fn path(&self) -> Option<PathBuf> {
        let dir = tokenizer_dir();
        self.files.iter().map(|f| dir.join(f)).find(|p| p.is_file())
    }

    pub fn load(&self) -> Option<TokenizerModel> {
        let path = self.path()?;
        let opts = RankedImportOptions {
            extra_specials: self.extra_specials,
            pattern: self.pattern.map(str::to_owned),
        };
        match formats::load_tokenizer(&path, &opts) {
            Ok(m) => Some(m),
            Err(e) => panic!("{} failed to load from {}: {e}", self.name, path.display()),
        }
    }
}
