//! Per-vocabulary incomplete token statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{Token, TokenizerModel};
use crate::script::unicode_version;
use crate::utf8::{analyze_token_bytes, is_incomplete, CountingPolicy, Role, TokenStructure};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub complete: usize,
    pub prefix: usize,
    pub suffix: usize,
    pub dual: usize,
    pub malformed: usize,
}

impl RoleCounts {
    fn add(&mut self, role: Role) {
        match role {
            Role::Complete => self.complete += 1,
            Role::Prefix => self.prefix += 1,
            Role::Suffix => self.suffix += 1,
            Role::Dual => self.dual += 1,
            Role::Malformed => self.malformed += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.complete + self.prefix + self.suffix + self.dual + self.malformed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusReport {
    pub vocab_size: usize,
    pub specials: usize,
    /// Role counts over every non-special token.
    pub counts: RoleCounts,
    /// Role counts restricted to multi-byte tokens.
    pub multi_byte_counts: RoleCounts,
    pub incomplete_total: usize,
    pub policy: CountingPolicy,
    pub unicode_version: String,
}

pub fn census(model: &TokenizerModel, policy: CountingPolicy) -> CensusReport {
    let analysed: Vec<(usize, Role, bool)> = model
        .tokens()
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter(|(id, _)| !model.is_special(*id))
        .map(|(_, bytes)| {
            let s = analyze_token_bytes(bytes);
            (bytes.len(), s.role, is_incomplete(&s, bytes, policy))
        })
        .collect();

    let mut counts = RoleCounts::default();
    let mut multi_byte_counts = RoleCounts::default();
    let mut incomplete_total = 0;
    for (len, role, incomplete) in analysed {
        counts.add(role);
        if len > 1 {
            multi_byte_counts.add(role);
        }
        incomplete_total += incomplete as usize;
    }
    CensusReport {
        vocab_size: model.len(),
        specials: model.specials().len(),
        counts,
        multi_byte_counts,
        incomplete_total,
        policy,
        unicode_version: unicode_version(),
    }
}

/// Every incomplete non-special token with its structure, in id order.
pub fn list_incomplete(model: &TokenizerModel, policy: CountingPolicy) -> Vec<(Token, TokenStructure)> {
    model
        .tokens()
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter(|(id, _)| !model.is_special(*id))
        .filter_map(|(id, bytes)| {
            let s = analyze_token_bytes(bytes);
            is_incomplete(&s, bytes, policy).then(|| {
                (
                    Token {
                        id,
                        bytes: bytes.to_vec(),
                    },
                    s,
                )
            })
        })
        .collect()
}

impl CensusReport {
    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let c = &self.counts;
        let m = &self.multi_byte_counts;
        let mut out = String::new();
        out.push_str(&format!(
            "vocab size {} ({} specials excluded)\npolicy {}\nunicode {}\n",
            self.vocab_size,
            self.specials,
            self.policy.label(),
            self.unicode_version
        ));
        out.push_str(&format!("{:<10}{:>10}{:>12}\n", "role", "all", "multi-byte"));
        for (name, a, b) in [
            ("complete", c.complete, m.complete),
            ("prefix", c.prefix, m.prefix),
            ("suffix", c.suffix, m.suffix),
            ("dual", c.dual, m.dual),
            ("malformed", c.malformed, m.malformed),
        ] {
            out.push_str(&format!("{name:<10}{a:>10}{b:>12}\n"));
        }
        out.push_str(&format!("incomplete total {}\n", self.incomplete_total));
        out
    }
}
