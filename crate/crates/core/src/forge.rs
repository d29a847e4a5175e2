//! Improbable bigram enumeration, viability checking and sampling.
//!
//! A candidate pairs a prefix token (clean head, trailing partial character
//! missing `k` continuation bytes) with a suffix token (exactly `k` leading
//! continuation bytes, clean tail). The joined bytes complete one character
//! across the boundary, the bridged character.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{EncodeMode, Token, TokenId, TokenizerModel};
use crate::census::list_incomplete;
use crate::error::{Error, Result};
use crate::rank::Ranking;
use crate::script::{script_of, scripts_in, Script};
use crate::utf8::{self, CountingPolicy, Role, TokenStructure};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Viability {
    Unchecked,
    Viable,
    InvalidUtf8,
    Retokenized { actual: Vec<TokenId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigramCandidate {
    pub prefix: TokenId,
    pub suffix: TokenId,
    pub joined_bytes: Vec<u8>,
    /// Byte offset of the token boundary inside `joined_bytes`.
    pub boundary: usize,
    pub bridged_char: Option<char>,
    pub viability: Viability,
    pub scripts: BTreeSet<Script>,
}

impl BigramCandidate {
    pub fn new(prefix: &Token, suffix: &Token) -> Self {
        BigramCandidate {
            prefix: prefix.id,
            suffix: suffix.id,
            joined_bytes: [prefix.bytes.as_slice(), suffix.bytes.as_slice()].concat(),
            boundary: prefix.bytes.len(),
            bridged_char: None,
            viability: Viability::Unchecked,
            scripts: BTreeSet::new(),
        }
    }

    pub fn is_viable(&self) -> bool {
        self.viability == Viability::Viable
    }

    /// The joined text, when it is well-formed UTF-8.
    pub fn phrase(&self) -> Option<&str> {
        std::str::from_utf8(&self.joined_bytes).ok()
    }

    /// Byte range of the character that straddles the boundary.
    pub fn bridged_range(&self) -> Option<std::ops::Range<usize>> {
        let text = self.phrase()?;
        text.char_indices()
            .map(|(i, c)| i..i + c.len_utf8())
            .find(|r| r.start < self.boundary && self.boundary < r.end)
    }
}

/// Prefix × suffix pairs whose deficit and excess match, in canonical order
/// (prefix id, then suffix id). Dual, Malformed and single-byte tokens never
/// take a slot.
pub fn enumerate_structural_pairs(
    inventory: &[(Token, TokenStructure)],
) -> impl Iterator<Item = BigramCandidate> + '_ {
    let (prefixes, suffixes) = split_roles(inventory);
    prefixes.into_iter().flat_map(move |p| {
        let group = suffixes.get(&p.1).cloned().unwrap_or_default();
        group.into_iter().map(move |s| BigramCandidate::new(p.0, s))
    })
}

type Slots<'a> = (Vec<(&'a Token, u8)>, BTreeMap<u8, Vec<&'a Token>>);

fn split_roles(inventory: &[(Token, TokenStructure)]) -> Slots<'_> {
    let mut prefixes = Vec::new();
    let mut suffixes: BTreeMap<u8, Vec<&Token>> = BTreeMap::new();
    for (tok, s) in inventory {
        if tok.bytes.len() < 2 {
            continue;
        }
        match s.role {
            Role::Prefix => prefixes.push((tok, s.deficit_tail)),
            Role::Suffix => suffixes.entry(s.excess_head).or_default().push(tok),
            _ => {}
        }
    }
    prefixes.sort_by_key(|(t, _)| t.id);
    for group in suffixes.values_mut() {
        group.sort_by_key(|t| t.id);
    }
    (prefixes, suffixes)
}

fn viability_of(model: &TokenizerModel, cand: &BigramCandidate, mode: EncodeMode) -> Viability {
    if !utf8::is_valid(&cand.joined_bytes) {
        return Viability::InvalidUtf8;
    }
    match model.encode_with(&cand.joined_bytes, mode) {
        Ok(ids) if ids.as_slice() == [cand.prefix, cand.suffix] => Viability::Viable,
        Ok(actual) => Viability::Retokenized { actual },
        // byte-incomplete toy vocabularies only
        Err(_) => Viability::Retokenized { actual: vec![] },
    }
}

/// Decode-encode test: the joined bytes must be valid UTF-8 and encode back
/// to exactly `[prefix, suffix]`.
pub fn check_viability(model: &TokenizerModel, mut cand: BigramCandidate, mode: EncodeMode) -> BigramCandidate {
    cand.viability = viability_of(model, &cand, mode);
    if cand.is_viable() {
        cand.bridged_char = cand
            .bridged_range()
            .and_then(|r| cand.phrase().and_then(|t| t[r].chars().next()));
        cand.scripts = scripts_in(cand.phrase().unwrap_or_default());
    }
    cand
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViabilityCounts {
    pub structural_pairs: usize,
    pub viable: usize,
    pub invalid_utf8: usize,
    pub retokenized: usize,
}

impl std::ops::Add for ViabilityCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ViabilityCounts {
            structural_pairs: self.structural_pairs + o.structural_pairs,
            viable: self.viable + o.viable,
            invalid_utf8: self.invalid_utf8 + o.invalid_utf8,
            retokenized: self.retokenized + o.retokenized,
        }
    }
}

/// Outcome counts over every structural pair, computed in parallel.
pub fn viability_counts(model: &TokenizerModel, policy: CountingPolicy, mode: EncodeMode) -> ViabilityCounts {
    let inventory = list_incomplete(model, policy);
    let (prefixes, suffixes) = split_roles(&inventory);
    prefixes
        .par_iter()
        .map(|&(p, deficit)| {
            let mut c = ViabilityCounts::default();
            for s in suffixes.get(&deficit).map(Vec::as_slice).unwrap_or_default() {
                c.structural_pairs += 1;
                match viability_of(model, &BigramCandidate::new(p, s), mode) {
                    Viability::Viable => c.viable += 1,
                    Viability::InvalidUtf8 => c.invalid_utf8 += 1,
                    _ => c.retokenized += 1,
                }
            }
            c
        })
        .reduce(ViabilityCounts::default, |a, b| a + b)
}

/// Number of structural pairs that pass the decode-encode test.
pub fn count_legal_bigrams(model: &TokenizerModel, policy: CountingPolicy, mode: EncodeMode) -> usize {
    viability_counts(model, policy, mode).viable
}

/// Every viable candidate, fully populated, in canonical order.
pub fn viable_bigrams(model: &TokenizerModel, policy: CountingPolicy, mode: EncodeMode) -> Vec<BigramCandidate> {
    let inventory = list_incomplete(model, policy);
    let (prefixes, suffixes) = split_roles(&inventory);
    prefixes
        .par_iter()
        .flat_map_iter(|&(p, deficit)| {
            suffixes
                .get(&deficit)
                .map(Vec::as_slice)
                .unwrap_or_default()
                .iter()
                .map(move |s| check_viability(model, BigramCandidate::new(p, s), mode))
                .filter(BigramCandidate::is_viable)
        })
        .collect()
}

/// At least two distinct scripts other than Common and Inherited among the
/// phrase's characters.
pub fn multilingual_filter(cand: &BigramCandidate) -> bool {
    if !cand.is_viable() {
        return false;
    }
    let text = cand.phrase().unwrap_or_default();
    let distinct: BTreeSet<Script> = text
        .chars()
        .map(script_of)
        .filter(|s| !s.is_shared())
        .collect();
    distinct.len() >= 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub require_multilingual: bool,
    pub sample_size: usize,
    pub rng_seed: u64,
    pub well_trained_only: bool,
    pub policy: CountingPolicy,
    pub mode: EncodeMode,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            require_multilingual: true,
            sample_size: 100,
            rng_seed: 0,
            well_trained_only: true,
            policy: CountingPolicy::default(),
            mode: EncodeMode::MergeOnly,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::Config("sample_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub bigrams: Vec<BigramCandidate>,
    /// Candidates that passed every filter before sampling.
    pub pool_size: usize,
    pub warnings: Vec<String>,
}

/// Seeded uniform sample without replacement from the filtered pool of
/// viable candidates. Returned in canonical order.
pub fn sample_improbable_bigrams(
    model: &TokenizerModel,
    ranking: Option<&Ranking>,
    config: &ForgeConfig,
) -> Result<SampleOutcome> {
    config.validate()?;
    let ranking = match (config.well_trained_only, ranking) {
        (true, None) => {
            return Err(Error::Config(
                "well_trained_only requires a ranking".into(),
            ))
        }
        (true, Some(r)) => {
            if r.len() != model.len() {
                return Err(Error::Config(format!(
                    "ranking covers {} tokens, vocabulary has {}",
                    r.len(),
                    model.len()
                )));
            }
            Some(r)
        }
        (false, _) => None,
    };

    let pool: Vec<BigramCandidate> = viable_bigrams(model, config.policy, config.mode)
        .into_iter()
        .filter(|c| !config.require_multilingual || multilingual_filter(c))
        .filter(|c| ranking.is_none_or(|r| r.is_well_trained(c.prefix) && r.is_well_trained(c.suffix)))
        .collect();

    let mut warnings = Vec::new();
    if pool.is_empty() {
        warnings.push("candidate pool is empty".to_owned());
        return Ok(SampleOutcome {
            bigrams: vec![],
            pool_size: 0,
            warnings,
        });
    }
    let k = config.sample_size.min(pool.len());
    if k < config.sample_size {
        warnings.push(format!(
            "only {} candidates available, fewer than the requested {}",
            pool.len(),
            config.sample_size
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    let pool_size = pool.len();
    let mut pool: Vec<Option<BigramCandidate>> = pool.into_iter().map(Some).collect();
    let bigrams = picked.into_iter().map(|i| pool[i].take().expect("distinct")).collect();
    Ok(SampleOutcome {
        bigrams,
        pool_size,
        warnings,
    })
}

/// One JSON-lines record of forge output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeRecord {
    pub prefix_id: TokenId,
    pub suffix_id: TokenId,
    pub phrase: Option<String>,
    pub bridged_char: Option<char>,
    pub scripts: BTreeSet<Script>,
    pub viability: Viability,
}

impl From<&BigramCandidate> for ForgeRecord {
    fn from(c: &BigramCandidate) -> Self {
        ForgeRecord {
            prefix_id: c.prefix,
            suffix_id: c.suffix,
            phrase: c.phrase().map(str::to_owned),
            bridged_char: c.bridged_char,
            scripts: c.scripts.clone(),
            viability: c.viability.clone(),
        }
    }
}

impl ForgeRecord {
    /// Rebuild the candidate against `model`.
    pub fn to_candidate(&self, model: &TokenizerModel) -> Result<BigramCandidate> {
        let p = model.token_bytes(self.prefix_id).ok_or(Error::UnknownId(self.prefix_id))?;
        let s = model.token_bytes(self.suffix_id).ok_or(Error::UnknownId(self.suffix_id))?;
        Ok(BigramCandidate {
            prefix: self.prefix_id,
            suffix: self.suffix_id,
            joined_bytes: [p, s].concat(),
            boundary: p.len(),
            bridged_char: self.bridged_char,
            viability: self.viability.clone(),
            scripts: self.scripts.clone(),
        })
    }
}
