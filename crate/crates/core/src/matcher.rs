//! Three-stage matching of a reference corpus against target corpora.
//!
//! Stage 1 keeps targets whose normalized name scores at least
//! [`NAME_THRESHOLD`]. Stage 2 ranks survivors by description similarity
//! and keeps either the clear winner or the top three. Stage 3 accepts the
//! best candidate whose functional parameters match exactly
//! (`param_sim == 2`).

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_signature, AliasMap, AlignedSignature};
use crate::corpus::{ApiRecord, Corpus};
use crate::similarity::{
    description_similarity, name_similarity, param_similarity, EmbeddingError, EmbeddingProvider,
    EmbeddingVector, SimilarityScores,
};

pub const NAME_THRESHOLD: f64 = 0.5;
pub const RELATIVE_MARGIN: f64 = 0.3;
pub const TOP_K: usize = 3;
const PARAM_EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub reference: String,
    pub candidate: String,
    pub scores: SimilarityScores,
    pub stage_reached: u8,
    pub accepted: bool,
}

fn candidate(reference: &ApiRecord, target: &ApiRecord) -> MatchCandidate {
    MatchCandidate {
        reference: reference.qualified_name.clone(),
        candidate: target.qualified_name.clone(),
        scores: SimilarityScores {
            name_sim: name_similarity(&reference.normalized_name, &target.normalized_name),
            desc_sim: 0.0,
            count_sim: 0.0,
            type_sim: 0.0,
            param_sim: 0.0,
        },
        stage_reached: 1,
        accepted: false,
    }
}

pub fn stage1_candidates(reference: &ApiRecord, target: &Corpus) -> Vec<MatchCandidate> {
    target
        .records
        .iter()
        .map(|t| candidate(reference, t))
        .filter(|c| c.scores.name_sim >= NAME_THRESHOLD)
        .collect()
}

fn by_rank(a: &MatchCandidate, b: &MatchCandidate) -> Ordering {
    b.scores
        .desc_sim
        .total_cmp(&a.scores.desc_sim)
        .then(b.scores.name_sim.total_cmp(&a.scores.name_sim))
        .then(a.candidate.cmp(&b.candidate))
}

/// Keeps the top candidate if its relative margin `(s1 - s2) / s1` over the
/// runner-up is at least [`RELATIVE_MARGIN`], otherwise the top three.
/// Candidates tied with the leader are never split off.
///
/// Candidates must already carry `desc_sim`; see [`score_descriptions`].
pub fn select_by_margin(mut cands: Vec<MatchCandidate>) -> Vec<MatchCandidate> {
    if cands.is_empty() {
        return cands;
    }
    cands.sort_by(by_rank);
    let s1 = cands[0].scores.desc_sim;
    if s1 <= 0.0 {
        return Vec::new();
    }
    let keep = if cands.len() == 1 {
        1
    } else {
        let s2 = cands[1].scores.desc_sim;
        let tied = cands.iter().filter(|c| c.scores.desc_sim == s1).count();
        if (s1 - s2) / s1 >= RELATIVE_MARGIN {
            1
        } else {
            TOP_K.max(tied).min(cands.len())
        }
    };
    cands.truncate(keep);
    for c in &mut cands {
        c.stage_reached = 2;
    }
    cands
}

fn score_descriptions(
    cands: &mut [MatchCandidate],
    reference: &ApiRecord,
    reference_vec: &EmbeddingVector,
    target: &Corpus,
    provider: &dyn EmbeddingProvider,
) -> Result<(), EmbeddingError> {
    for c in cands.iter_mut() {
        let rec = target
            .get(&c.candidate)
            .expect("candidate comes from the target corpus");
        c.scores.desc_sim = description_similarity(reference_vec, &provider.embed(rec)?)?;
    }
    debug_assert!(cands.iter().all(|c| c.reference == reference.qualified_name));
    Ok(())
}

pub fn stage2_semantic_filter(
    cands: Vec<MatchCandidate>,
    reference: &ApiRecord,
    target: &Corpus,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<MatchCandidate>, EmbeddingError> {
    if cands.is_empty() {
        return Ok(cands);
    }
    let mut cands = cands;
    let reference_vec = provider.embed(reference)?;
    score_descriptions(&mut cands, reference, &reference_vec, target, provider)?;
    Ok(select_by_margin(cands))
}

/// Scores parameters for every candidate and accepts the best one with
/// `param_sim == 2`: highest `desc_sim`, then `name_sim`, then name order.
pub fn stage3_structural_verify(
    cands: &mut [MatchCandidate],
    reference: &ApiRecord,
    target: &Corpus,
) -> Option<usize> {
    for c in cands.iter_mut() {
        let rec = target
            .get(&c.candidate)
            .expect("candidate comes from the target corpus");
        let p = param_similarity(reference, rec);
        c.scores.count_sim = p.count_sim;
        c.scores.type_sim = p.type_sim;
        c.scores.param_sim = p.param_sim;
        c.stage_reached = 3;
    }
    let best = cands
        .iter()
        .enumerate()
        .filter(|(_, c)| (c.scores.param_sim - 2.0).abs() <= PARAM_EXACT_TOL)
        .min_by(|(_, a), (_, b)| by_rank(a, b))
        .map(|(i, _)| i);
    if let Some(i) = best {
        cands[i].accepted = true;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub scores: SimilarityScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiGroup {
    pub group_id: String,
    /// Reference member first, then one accepted member per target source.
    pub members: Vec<ApiRecord>,
    pub pairwise: Vec<PairScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<AlignedSignature>,
    /// Set when alignment failed; such groups are not fuzzed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_error: Option<String>,
}

impl ApiGroup {
    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.source_id.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub reference_apis: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub groups: usize,
    pub grouped_apis: usize,
    pub alignment_failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MatchOutcome {
    pub groups: Vec<ApiGroup>,
    pub stats: StageStats,
    pub candidates: Vec<MatchCandidate>,
}

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("at least one target corpus is required")]
    NoTargets,
    #[error("source `{0}` appears in more than one corpus")]
    DuplicateSource(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

struct RefResult {
    members: Vec<ApiRecord>,
    candidates: Vec<MatchCandidate>,
    counts: [usize; 3],
}

fn match_reference(
    reference: &ApiRecord,
    targets: &[&Corpus],
    provider: &dyn EmbeddingProvider,
) -> Result<RefResult, EmbeddingError> {
    let mut members = vec![reference.clone()];
    let mut candidates = Vec::new();
    let mut counts = [0usize; 3];
    for target in targets {
        let s1 = stage1_candidates(reference, target);
        counts[0] += s1.len();
        let mut s2 = stage2_semantic_filter(s1, reference, target, provider)?;
        counts[1] += s2.len();
        if let Some(i) = stage3_structural_verify(&mut s2, reference, target) {
            counts[2] += 1;
            members.push(target.get(&s2[i].candidate).unwrap().clone());
        }
        candidates.extend(s2);
    }
    Ok(RefResult {
        members,
        candidates,
        counts,
    })
}

fn pairwise_scores(
    members: &[ApiRecord],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<PairScore>, EmbeddingError> {
    let vectors = members
        .iter()
        .map(|m| provider.embed(m))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let p = param_similarity(&members[i], &members[j]);
            out.push(PairScore {
                a: members[i].qualified_name.clone(),
                b: members[j].qualified_name.clone(),
                scores: SimilarityScores {
                    name_sim: name_similarity(
                        &members[i].normalized_name,
                        &members[j].normalized_name,
                    ),
                    desc_sim: description_similarity(&vectors[i], &vectors[j])?,
                    count_sim: p.count_sim,
                    type_sim: p.type_sim,
                    param_sim: p.param_sim,
                },
            });
        }
    }
    Ok(out)
}

/// Runs all three stages for every reference record against every target.
///
/// Reference records are matched in parallel; results keep reference order.
pub fn build_groups(
    reference: &Corpus,
    targets: &[&Corpus],
    provider: &dyn EmbeddingProvider,
    aliases: &AliasMap,
) -> Result<MatchOutcome, MatchError> {
    if targets.is_empty() {
        return Err(MatchError::NoTargets);
    }
    let mut sources = vec![reference.source_id.as_str()];
    for t in targets {
        if sources.contains(&t.source_id.as_str()) {
            return Err(MatchError::DuplicateSource(t.source_id.clone()));
        }
        sources.push(&t.source_id);
    }

    let per_ref: Vec<RefResult> = reference
        .records
        .par_iter()
        .map(|r| match_reference(r, targets, provider))
        .collect::<Result<_, _>>()?;

    let mut outcome = MatchOutcome::default();
    outcome.stats.reference_apis = reference.len();
    for result in per_ref {
        outcome.stats.stage1 += result.counts[0];
        outcome.stats.stage2 += result.counts[1];
        outcome.stats.stage3 += result.counts[2];
        outcome.candidates.extend(result.candidates);
        if result.members.len() < 2 {
            continue;
        }
        let pairwise = pairwise_scores(&result.members, provider)?;
        let (aligned, alignment_error) = match align_signature(&result.members, aliases) {
            Ok(sig) => (Some(sig), None),
            Err(e) => {
                outcome.stats.alignment_failures += 1;
                (None, Some(e.to_string()))
            }
        };
        outcome.stats.groups += 1;
        outcome.stats.grouped_apis += result.members.len();
        outcome.groups.push(ApiGroup {
            group_id: result.members[0].qualified_name.clone(),
            members: result.members,
            pairwise,
            aligned,
            alignment_error,
        });
    }
    Ok(outcome)
}

/// One JSON object per group per line.
pub fn write_groups<W: Write>(mut out: W, groups: &[ApiGroup]) -> std::io::Result<()> {
    for g in groups {
        serde_json::to_writer(&mut out, g)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_groups<R: BufRead>(input: R) -> Result<Vec<ApiGroup>, String> {
    let mut groups = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let g: ApiGroup =
            serde_json::from_str(&line).map_err(|e| format!("group line {}: {e}", n + 1))?;
        groups.push(g);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, CorpusRules};
    use crate::similarity::LexicalProvider;

    fn corpus(source: &str, entries: &[(&str, &str, &str)]) -> Corpus {
        // (name, description, params as "name:type,...")
        let text: Vec<String> = entries
            .iter()
            .map(|(name, desc, params)| {
                let params: Vec<serde_json::Value> = params
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        let (n, t) = p.split_once(':').unwrap();
                        serde_json::json!({"name": n, "type": t})
                    })
                    .collect();
                serde_json::json!({"source": source, "name": name, "description": desc, "params": params})
                    .to_string()
            })
            .collect();
        parse_corpus(&text.join("\n"), &CorpusRules::default()).unwrap()
    }

    fn cand(name: &str, desc_sim: f64) -> MatchCandidate {
        MatchCandidate {
            reference: "r".into(),
            candidate: name.into(),
            scores: SimilarityScores {
                name_sim: 1.0,
                desc_sim,
                count_sim: 0.0,
                type_sim: 0.0,
                param_sim: 0.0,
            },
            stage_reached: 1,
            accepted: false,
        }
    }

    #[test]
    fn stage1_examples() {
        let reference = corpus("pytorch", &[("torch.argsort", "sort", "input:Tensor")]);
        let r = &reference.records[0];
        let target = corpus("jax", &[("jax.numpy.argsort", "sort", "a:Array")]);
        let c = stage1_candidates(r, &target);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].scores.name_sim, 1.0);

        let target = corpus("jax", &[("jax.lax.conv2d", "conv", "a:Array")]);
        assert!(stage1_candidates(r, &target).is_empty());
    }

    #[test]
    fn stage1_partial_overlap_is_below_threshold() {
        let reference = corpus("pytorch", &[("torch.nn.crossentropy_loss", "loss", "")]);
        let target = corpus("tensorflow", &[("tf.nn.softmax_cross_entropy", "loss", "")]);
        let sim = name_similarity("crossentropy_loss", "softmax_cross_entropy");
        assert!((sim - (1.0 - 14.0 / 21.0)).abs() < 1e-12);
        assert!(stage1_candidates(&reference.records[0], &target).is_empty());
    }

    #[test]
    fn margin_selection() {
        let kept = select_by_margin(vec![cand("a", 0.95), cand("b", 0.60), cand("c", 0.55)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].candidate, "a");

        let kept = select_by_margin(vec![cand("a", 0.90), cand("b", 0.88), cand("c", 0.30)]);
        assert_eq!(kept.len(), 3);

        let kept = select_by_margin(vec![cand("only", 0.1)]);
        assert_eq!(kept.len(), 1);

        assert!(select_by_margin(vec![cand("a", 0.0), cand("b", -0.2)]).is_empty());
        assert!(select_by_margin(vec![]).is_empty());

        let kept = select_by_margin(vec![
            cand("a", 0.5),
            cand("b", 0.5),
            cand("c", 0.5),
            cand("d", 0.5),
            cand("e", 0.1),
        ]);
        assert_eq!(kept.len(), 4);
    }

    #[test]
    fn stage3_prefers_description() {
        let reference = corpus("pytorch", &[("torch.f", "d", "input:Tensor,dim:int")]);
        let target = corpus(
            "jax",
            &[
                ("jax.f", "d", "a:Array,axis:int"),
                ("jax.g", "d", "a:Array,axis:int"),
                ("jax.h", "d", "a:Array,axis:int,k:int"),
            ],
        );
        let mut cands = vec![cand("jax.f", 0.8), cand("jax.g", 0.9), cand("jax.h", 0.95)];
        let best = stage3_structural_verify(&mut cands, &reference.records[0], &target).unwrap();
        assert_eq!(cands[best].candidate, "jax.g");
        assert!(cands[best].accepted);
        assert!(!cands[2].accepted);
        assert!(cands[2].scores.param_sim < 2.0);
    }

    #[test]
    fn no_survivors_no_group() {
        let reference = corpus("pytorch", &[("torch.argsort", "sorts", "input:Tensor")]);
        let target = corpus("jax", &[("jax.numpy.conv", "conv", "a:Array")]);
        let provider = LexicalProvider::fit_corpora([&reference, &target]);
        let out = build_groups(&reference, &[&target], &provider, &AliasMap::default()).unwrap();
        assert!(out.groups.is_empty());
        assert_eq!(out.stats.stage1, 0);
    }

    #[test]
    fn groups_round_trip() {
        let reference = corpus(
            "pytorch",
            &[("torch.argsort", "indices that sort", "input:Tensor,dim:int")],
        );
        let target = corpus(
            "jax",
            &[("jax.numpy.argsort", "indices that sort an array", "a:Array,axis:int")],
        );
        let provider = LexicalProvider::fit_corpora([&reference, &target]);
        let out = build_groups(&reference, &[&target], &provider, &AliasMap::default()).unwrap();
        assert_eq!(out.groups.len(), 1);
        let mut buf = Vec::new();
        write_groups(&mut buf, &out.groups).unwrap();
        let back = read_groups(buf.as_slice()).unwrap();
        assert_eq!(back, out.groups);
    }

    #[test]
    fn duplicate_sources_rejected() {
        let a = corpus("jax", &[("jax.f", "d", "")]);
        let provider = LexicalProvider::fit_corpora([&a]);
        assert!(matches!(
            build_groups(&a, &[&a], &provider, &AliasMap::default()),
            Err(MatchError::DuplicateSource(_))
        ));
        assert!(matches!(
            build_groups(&a, &[], &provider, &AliasMap::default()),
            Err(MatchError::NoTargets)
        ));
    }
}
