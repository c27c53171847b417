//! Name, description and parameter similarity between two documented APIs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AbstractType, ApiRecord, Corpus};

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - d(a, b) / max(len(a), len(b))`; two empty names score 1.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// `1 - |n1 - n2| / max(n1, n2)`; two parameterless APIs score 1.
pub fn count_similarity(n1: usize, n2: usize) -> f64 {
    let most = n1.max(n2);
    if most == 0 {
        return 1.0;
    }
    1.0 - n1.abs_diff(n2) as f64 / most as f64
}

/// Greedy pairing of two functional-parameter type lists.
///
/// Each parameter of `a` takes the nearest unused parameter of `b` with a
/// compatible type (same position first). Returns the pairs `(i, j)`.
pub fn pair_types(a: &[AbstractType], b: &[AbstractType]) -> Vec<(usize, usize)> {
    let mut used = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (i, ta) in a.iter().enumerate() {
        let best = b
            .iter()
            .enumerate()
            .filter(|(j, tb)| !used[*j] && ta.compatible(**tb))
            .min_by_key(|(j, _)| (j.abs_diff(i), *j))
            .map(|(j, _)| j);
        if let Some(j) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// `sum(S_i) / max(n1, n2)` over greedily paired parameters; both empty -> 1.
pub fn type_similarity(a: &[AbstractType], b: &[AbstractType]) -> f64 {
    let most = a.len().max(b.len());
    if most == 0 {
        return 1.0;
    }
    pair_types(a, b).len() as f64 / most as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamScores {
    pub count_sim: f64,
    pub type_sim: f64,
    pub param_sim: f64,
}

/// Count plus type similarity over functional parameters only.
pub fn param_similarity(a: &ApiRecord, b: &ApiRecord) -> ParamScores {
    let ta = a.functional_types();
    let tb = b.functional_types();
    let count_sim = count_similarity(ta.len(), tb.len());
    let type_sim = type_similarity(&ta, &tb);
    ParamScores {
        count_sim,
        type_sim,
        param_sim: count_sim + type_sim,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub name_sim: f64,
    pub desc_sim: f64,
    pub count_sim: f64,
    pub type_sim: f64,
    pub param_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub provider_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    /// The provider cannot serve this request as configured (missing
    /// vector, wrong dimension, mismatched providers).
    #[error("embedding provider misconfigured: {0}")]
    Config(String),
    /// The provider was configured correctly but failed while running.
    #[error("embedding provider failed: {0}")]
    Runtime(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, record: &ApiRecord) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Cosine similarity; 0 when either vector is zero.
pub fn description_similarity(
    va: &EmbeddingVector,
    vb: &EmbeddingVector,
) -> Result<f64, EmbeddingError> {
    if va.provider_id != vb.provider_id {
        return Err(EmbeddingError::Config(format!(
            "vectors from different providers `{}` and `{}`",
            va.provider_id, vb.provider_id
        )));
    }
    if va.values.len() != vb.values.len() {
        return Err(EmbeddingError::Config(format!(
            "vector lengths differ ({} vs {})",
            va.values.len(),
            vb.values.len()
        )));
    }
    let (na, nb) = (va.norm(), vb.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = va.values.iter().zip(&vb.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lowercase word tokens with punctuation stripped. Underscores and digits
/// stay inside tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .map(|t| t.trim_matches('_').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Term-frequency vectors over a fixed vocabulary, L2-normalized.
///
/// The vocabulary is the sorted union of tokens from every description the
/// provider was fitted on; tokens outside it are ignored.
#[derive(Debug, Clone)]
pub struct LexicalProvider {
    vocabulary: BTreeMap<String, usize>,
}

impl LexicalProvider {
    pub const ID: &'static str = "lexical-tf";

    pub fn fit<'a, I>(descriptions: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = descriptions.into_iter().flat_map(tokenize).collect();
        tokens.sort();
        tokens.dedup();
        let vocabulary = tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        LexicalProvider { vocabulary }
    }

    pub fn fit_corpora<'a, I>(corpora: I) -> Self
    where
        I: IntoIterator<Item = &'a Corpus>,
    {
        Self::fit(
            corpora
                .into_iter()
                .flat_map(|c| c.records.iter().map(|r| r.description.as_str())),
        )
    }

    pub fn dimension(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.vocabulary.len()];
        for token in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&token) {
                values[i] += 1.0;
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector {
            provider_id: Self::ID.to_string(),
            values,
        }
    }
}

impl EmbeddingProvider for LexicalProvider {
    fn id(&self) -> &str {
        Self::ID
    }

    fn embed(&self, record: &ApiRecord) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_text(&record.description))
    }
}

#[derive(Debug, Deserialize)]
struct SidecarRecord {
    source: String,
    name: String,
    vector: Vec<f64>,
}

/// Vectors computed elsewhere (e.g. by a sentence encoder), keyed by
/// `(source, qualified_name)`.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    id: String,
    dimension: usize,
    vectors: HashMap<(String, String), Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EmbeddingError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&format!("precomputed:{}", path.display()), &text)
    }

    pub fn parse(id: &str, text: &str) -> Result<Self, EmbeddingError> {
        let mut vectors = HashMap::new();
        let mut dimension = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord = serde_json::from_str(line)
                .map_err(|e| EmbeddingError::Config(format!("line {}: {e}", n + 1)))?;
            match dimension {
                None => dimension = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(EmbeddingError::Config(format!(
                        "line {}: vector length {} differs from {d}",
                        n + 1,
                        rec.vector.len()
                    )))
                }
                Some(_) => {}
            }
            vectors.insert((rec.source, rec.name), rec.vector);
        }
        Ok(PrecomputedProvider {
            id: id.to_string(),
            dimension: dimension.unwrap_or(0),
            vectors,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, record: &ApiRecord) -> Result<EmbeddingVector, EmbeddingError> {
        if record.description.trim().is_empty() {
            return Ok(EmbeddingVector {
                provider_id: self.id.clone(),
                values: vec![0.0; self.dimension],
            });
        }
        let key = (record.source_id.clone(), record.qualified_name.clone());
        let values = self.vectors.get(&key).ok_or_else(|| {
            EmbeddingError::Config(format!(
                "no vector for {}:{}",
                record.source_id, record.qualified_name
            ))
        })?;
        Ok(EmbeddingVector {
            provider_id: self.id.clone(),
            values: values.clone(),
        })
    }
}

/// All five scores for a pair of records.
pub fn score_pair(
    a: &ApiRecord,
    b: &ApiRecord,
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityScores, EmbeddingError> {
    let desc_sim = description_similarity(&provider.embed(a)?, &provider.embed(b)?)?;
    let p = param_similarity(a, b);
    Ok(SimilarityScores {
        name_sim: name_similarity(&a.normalized_name, &b.normalized_name),
        desc_sim,
        count_sim: p.count_sim,
        type_sim: p.type_sim,
        param_sim: p.param_sim,
    })
}
