//! Trainedness ranking from embedding matrices and matched baseline tokens.
//!
//! Scores follow one polarity throughout: higher score means less trained.
//! A [`Ranking`] orders tokens most-trained first, so the less-trained
//! neighbours of position `i` sit at `i + 1, i + 2, …`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{EncodeMode, Token, TokenId, TokenizerModel};
use crate::error::{Error, Result};
use crate::forge::BigramCandidate;
use crate::utf8::{analyze_token_bytes, Role, TokenStructure};

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dims {
            return Err(Error::Embedding(format!(
                "expected {} values for {rows}x{dims}, got {}",
                rows * dims,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Embedding(format!(
                "non-finite value at row {}, column {}",
                i / dims.max(1),
                i % dims.max(1)
            )));
        }
        Ok(EmbeddingMatrix { rows, dims, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    /// Fails unless there is exactly one row per vocabulary entry.
    pub fn check_vocab(&self, model: &TokenizerModel) -> Result<()> {
        if self.rows != model.len() {
            return Err(Error::Embedding(format!(
                "matrix has {} rows but the vocabulary has {} tokens",
                self.rows,
                model.len()
            )));
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `EMB1`, little-endian u32 rows, u32 dims, then rows×dims f32.
    pub fn from_binary(data: &[u8]) -> Result<Self> {
        if data.len() < 12 || &data[..4] != MAGIC {
            return Err(Error::Embedding("missing EMB1 header".into()));
        }
        let rows = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        let payload = &data[12..];
        let expected = rows * dims * 4;
        if payload.len() != expected {
            return Err(Error::Embedding(format!(
                "expected {expected} bytes, got {}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dims, values)
    }

    /// Header `id,v0,…,v{d-1}`, then one row per token id.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Embedding("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"id") {
            return Err(Error::Embedding("CSV header must start with \"id\"".into()));
        }
        let dims = cols.len() - 1;
        let mut rows: Vec<Option<Vec<f32>>> = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let mut fields = line.split(',').map(str::trim);
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Embedding(format!("line {lineno}: bad id")))?;
            let vals: Vec<f32> = fields
                .map(|f| f.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Embedding(format!("line {lineno}: {e}")))?;
            if vals.len() != dims {
                return Err(Error::Embedding(format!(
                    "line {lineno}: expected {dims} values, got {}",
                    vals.len()
                )));
            }
            if id >= rows.len() {
                rows.resize(id + 1, None);
            }
            if rows[id].replace(vals).is_some() {
                return Err(Error::Embedding(format!("line {lineno}: duplicate id {id}")));
            }
        }
        let n = rows.len();
        let mut values = Vec::with_capacity(n * dims);
        for (id, r) in rows.into_iter().enumerate() {
            values.extend(r.ok_or_else(|| Error::Embedding(format!("missing row for id {id}")))?);
        }
        Self::new(n, dims, values)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.starts_with(MAGIC) {
        EmbeddingMatrix::from_binary(&data)
    } else {
        let text = std::str::from_utf8(&data)
            .map_err(|_| Error::Embedding("neither EMB1 binary nor UTF-8 CSV".into()))?;
        EmbeddingMatrix::from_csv(text)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    /// Cosine similarity to the mean embedding of a reference set of unused
    /// tokens.
    #[default]
    CosineToUnusedMean,
    /// Negated L2 norm of the row.
    L2Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub values: Vec<f64>,
    pub method: ScoringMethod,
    pub reference_set: Vec<TokenId>,
    /// Rows with zero norm, scored +∞.
    pub zero_norm_rows: Vec<TokenId>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn score_tokens(
    matrix: &EmbeddingMatrix,
    method: ScoringMethod,
    reference_set: &[TokenId],
) -> Result<Scores> {
    let mean = match method {
        ScoringMethod::CosineToUnusedMean => {
            if reference_set.is_empty() {
                return Err(Error::Scoring("reference set is empty".into()));
            }
            let mut mean = vec![0f64; matrix.dims];
            for id in reference_set {
                if id.index() >= matrix.rows {
                    return Err(Error::Scoring(format!("reference id {id} outside the matrix")));
                }
                for (m, &x) in mean.iter_mut().zip(matrix.row(id.index())) {
                    *m += x as f64;
                }
            }
            let n = reference_set.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if mean_norm == 0.0 {
                return Err(Error::Scoring("reference mean has zero norm".into()));
            }
            Some((mean, mean_norm))
        }
        ScoringMethod::L2Norm => None,
    };

    let values: Vec<f64> = (0..matrix.rows)
        .into_par_iter()
        .map(|i| {
            let row = matrix.row(i);
            let n = norm(row);
            if n == 0.0 {
                return f64::INFINITY;
            }
            match &mean {
                Some((mean, mean_norm)) => {
                    let dot: f64 = row.iter().zip(mean).map(|(&x, m)| x as f64 * m).sum();
                    dot / (n * mean_norm)
                }
                None => -n,
            }
        })
        .collect();
    let zero_norm_rows = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_infinite())
        .map(|(i, _)| TokenId(i as u32))
        .collect();
    Ok(Scores {
        values,
        method,
        reference_set: reference_set.to_vec(),
        zero_norm_rows,
    })
}

/// Tokens whose own bytes do not encode back to themselves; the encoder can
/// never emit them from text. Specials are skipped.
pub fn unreachable_tokens(model: &TokenizerModel) -> Vec<TokenId> {
    model
        .tokens()
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter(|(id, _)| !model.is_special(*id))
        .filter(|(id, bytes)| {
            model
                .encode_with(bytes, EncodeMode::MergeOnly)
                .map_or(true, |ids| ids.as_slice() != [*id])
        })
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub scores: Vec<f64>,
    /// Token ids, most trained first.
    pub order: Vec<TokenId>,
    pub method: ScoringMethod,
    pub reference_set: Vec<TokenId>,
    #[serde(skip)]
    positions: Vec<usize>,
}

pub fn rank_by_training(scores: Scores) -> Ranking {
    let mut order: Vec<TokenId> = (0..scores.values.len() as u32).map(TokenId).collect();
    order.sort_by(|a, b| {
        scores.values[a.index()]
            .total_cmp(&scores.values[b.index()])
            .then(a.cmp(b))
    });
    let mut ranking = Ranking {
        scores: scores.values,
        order,
        method: scores.method,
        reference_set: scores.reference_set,
        positions: Vec::new(),
    };
    ranking.index_positions();
    ranking
}

impl Ranking {
    fn index_positions(&mut self) {
        self.positions = vec![0; self.order.len()];
        for (pos, id) in self.order.iter().enumerate() {
            self.positions[id.index()] = pos;
        }
    }

    /// Restore the position index after deserializing.
    pub fn reindexed(mut self) -> Self {
        self.index_positions();
        self
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn position(&self, id: TokenId) -> Option<usize> {
        self.positions.get(id.index()).copied()
    }

    /// Position strictly inside the most-trained floor(n/2) entries.
    pub fn is_well_trained(&self, id: TokenId) -> bool {
        self.position(id).is_some_and(|p| p < self.len() / 2)
    }
}

pub fn well_trained_incomplete(
    ranking: &Ranking,
    inventory: &[(Token, TokenStructure)],
) -> BTreeSet<TokenId> {
    inventory
        .iter()
        .map(|(t, _)| t.id)
        .filter(|&id| ranking.is_well_trained(id))
        .collect()
}

fn is_baseline_eligible(model: &TokenizerModel, id: TokenId) -> bool {
    !model.is_special(id)
        && model
            .token_bytes(id)
            .is_some_and(|b| b.len() > 1 && analyze_token_bytes(b).role == Role::Complete)
}

/// Eligible complete tokens near `tok` within `radius` positions, in scan
/// order: less-trained side by distance, then more-trained side by distance.
/// Distances are signed, positive towards less trained.
fn counterpart_candidates(
    model: &TokenizerModel,
    ranking: &Ranking,
    tok: TokenId,
    radius: usize,
) -> Result<Vec<(TokenId, isize)>> {
    let i = ranking.position(tok).ok_or(Error::UnknownId(tok))?;
    let n = ranking.len();
    let less = (i + 1..n.min(i + radius + 1)).map(|p| (p, (p - i) as isize));
    let more = (i.saturating_sub(radius)..i).rev().map(|p| (p, -((i - p) as isize)));
    Ok(less
        .chain(more)
        .map(|(p, d)| (ranking.order[p], d))
        .filter(|&(id, _)| is_baseline_eligible(model, id))
        .collect())
}

/// Nearest complete, non-special, multi-byte token on the less-trained side
/// of `tok`, falling back to the more-trained side.
pub fn baseline_counterpart(model: &TokenizerModel, ranking: &Ranking, tok: TokenId) -> Result<TokenId> {
    counterpart_candidates(model, ranking, tok, ranking.len())?
        .first()
        .map(|&(id, _)| id)
        .ok_or(Error::NoCounterpart(tok))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Largest rank distance searched for either slot.
    pub radius: usize,
    /// Require the baseline phrase to encode back to exactly the chosen pair.
    /// Turning this off takes the first counterpart pair as is.
    pub require_stable: bool,
    pub mode: EncodeMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            radius: 64,
            require_stable: true,
            mode: EncodeMode::MergeOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineBigram {
    pub source_prefix: TokenId,
    pub source_suffix: TokenId,
    pub prefix: TokenId,
    pub suffix: TokenId,
    pub phrase: String,
    pub prefix_distance: isize,
    pub suffix_distance: isize,
    pub stable: bool,
}

pub fn build_baseline_bigram(
    model: &TokenizerModel,
    ranking: &Ranking,
    imp: &BigramCandidate,
    cfg: &BaselineConfig,
) -> Result<BaselineBigram> {
    let lefts = counterpart_candidates(model, ranking, imp.prefix, cfg.radius)?;
    let rights = counterpart_candidates(model, ranking, imp.suffix, cfg.radius)?;
    if lefts.is_empty() {
        return Err(Error::NoCounterpart(imp.prefix));
    }
    if rights.is_empty() {
        return Err(Error::NoCounterpart(imp.suffix));
    }

    // pairs by combined scan index, then by left index
    let mut attempted = Vec::new();
    for total in 0..lefts.len() + rights.len() - 1 {
        let lo = total.saturating_sub(rights.len() - 1);
        for li in lo..=total.min(lefts.len() - 1) {
            let (l, ld) = lefts[li];
            let (r, rd) = rights[total - li];
            let ids = [l, r];
            let bytes = model.decode(&ids)?;
            let stable = model.encode_with(&bytes, cfg.mode)? == ids;
            if stable || !cfg.require_stable {
                let phrase = String::from_utf8(bytes).expect("complete tokens are valid UTF-8");
                return Ok(BaselineBigram {
                    source_prefix: imp.prefix,
                    source_suffix: imp.suffix,
                    prefix: l,
                    suffix: r,
                    phrase,
                    prefix_distance: ld,
                    suffix_distance: rd,
                    stable,
                });
            }
            attempted.push((l, r));
        }
    }
    Err(Error::RadiusExhausted {
        radius: cfg.radius,
        attempted,
    })
}

/// Baselines for a whole improbable set, in input order.
pub fn build_baselines(
    model: &TokenizerModel,
    ranking: &Ranking,
    set: &[BigramCandidate],
    cfg: &BaselineConfig,
) -> Vec<Result<BaselineBigram>> {
    set.par_iter()
        .map(|c| build_baseline_bigram(model, ranking, c, cfg))
        .collect()
}

/// Ids of the reference set given as a list, deduplicated, keeping order.
pub fn dedup_ids(ids: impl IntoIterator<Item = TokenId>) -> Vec<TokenId> {
    let mut seen = HashSet::new();
    ids.into_iter().filter(|id| seen.insert(*id)).collect()
}
