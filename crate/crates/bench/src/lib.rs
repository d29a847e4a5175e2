//! Synthetic inputs shared by the benchmarks.

use improbable_core::{Token, TokenizerModel, PretokenizerConfig};

/// Base bytes plus merges that build every two-byte prefix of a run of CJK
/// characters and the full characters, giving a few thousand tokens.
pub fn synthetic_model(chars: usize) -> TokenizerModel {
    let mut tokens: Vec<Token> = (0..=255u8).map(|b| Token::new(b as u32, vec![b])).collect();
    let mut merges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for c in ('\u{4E00}'..).take(chars) {
        let mut buf = [0u8; 4];
        let b = c.encode_utf8(&mut buf).as_bytes().to_vec();
        for (l, r) in [(b[..1].to_vec(), b[1..2].to_vec()), (b[..2].to_vec(), b[2..].to_vec())] {
            let joined = [l.clone(), r.clone()].concat();
            if seen.insert(joined.clone()) {
                tokens.push(Token::new(tokens.len() as u32, joined));
                merges.push((l, r));
            }
        }
    }
    TokenizerModel::new(tokens, merges, PretokenizerConfig::none(), []).expect("synthetic model is consistent")
}

pub fn sample_text(len: usize) -> String {
    ('\u{4E00}'..).take(len).collect()
}
