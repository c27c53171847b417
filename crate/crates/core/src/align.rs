//! Parameter alignment of a matched group against its reference member.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AbstractType, ApiRecord};

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("alias map line {line}: expected `alias -> canonical`")]
    AliasSyntax { line: usize },
    #[error("cannot read alias map {path}: {message}")]
    AliasIo { path: String, message: String },
    #[error("{member}: {found} functional parameters, reference has {expected}")]
    CountMismatch {
        member: String,
        expected: usize,
        found: usize,
    },
    #[error("{member}: no type-compatible parameter for canonical `{canonical}` ({ty})")]
    Unresolvable {
        member: String,
        canonical: String,
        ty: AbstractType,
    },
}

/// Canonical parameter names for common aliases.
#[derive(Debug, Clone)]
pub struct AliasMap {
    aliases: BTreeMap<String, String>,
}

const DEFAULT_ALIASES: &[(&str, &str)] = &[
    ("dim", "axis"),
    ("axis", "axis"),
    ("axes", "axis"),
    ("x", "input"),
    ("values", "input"),
    ("input", "input"),
    ("a", "input"),
    ("other", "other"),
    ("b", "other"),
    ("y", "other"),
];

impl Default for AliasMap {
    fn default() -> Self {
        AliasMap {
            aliases: DEFAULT_ALIASES
                .iter()
                .map(|(a, c)| (a.to_string(), c.to_string()))
                .collect(),
        }
    }
}

impl AliasMap {
    pub fn empty() -> Self {
        AliasMap {
            aliases: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, alias: &str, canonical: &str) {
        self.aliases
            .insert(alias.trim().to_lowercase(), canonical.trim().to_lowercase());
    }

    /// Parses `alias -> canonical` lines on top of the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self, AlignError> {
        let mut map = AliasMap::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (alias, canonical) = line
                .split_once("->")
                .ok_or(AlignError::AliasSyntax { line: n + 1 })?;
            if alias.trim().is_empty() || canonical.trim().is_empty() {
                return Err(AlignError::AliasSyntax { line: n + 1 });
            }
            map.insert(alias, canonical);
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AlignError::AliasIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Lowercase, apply the alias map, then fold indexed names
    /// (`tensor2`, `input_2`) to `input_2`.
    pub fn normalize(&self, raw: &str) -> String {
        let lowered = raw.trim().to_lowercase();
        if let Some(canonical) = self.aliases.get(&lowered) {
            return canonical.clone();
        }
        let stem = lowered.trim_end_matches(|c: char| c.is_ascii_digit());
        let digits = &lowered[stem.len()..];
        if !digits.is_empty() {
            let stem = stem.trim_end_matches('_');
            if stem == "tensor" || stem == "input" {
                return format!("input_{digits}");
            }
        }
        lowered
    }
}

pub fn normalize_param_name(raw: &str) -> String {
    AliasMap::default().normalize(raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalParam {
    pub canonical_name: String,
    pub abstract_type: AbstractType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedSignature {
    pub canonical_params: Vec<CanonicalParam>,
    /// One entry per group member; `order[i]` is the member's functional
    /// parameter position receiving canonical argument `i`.
    pub per_member_order: Vec<Vec<usize>>,
}

impl AlignedSignature {
    /// Reorders a canonical argument tuple into one member's order.
    pub fn permute<T: Clone>(order: &[usize], canonical_args: &[T]) -> Vec<T> {
        let mut out: Vec<Option<T>> = vec![None; order.len()];
        for (i, &j) in order.iter().enumerate() {
            out[j] = Some(canonical_args[i].clone());
        }
        out.into_iter()
            .map(|v| v.expect("alignment order is a permutation"))
            .collect()
    }
}

/// Aligns each member's functional parameters to the reference member
/// (`members[0]`).
///
/// Matching runs in three passes: equal normalized name with a compatible
/// type, then type compatibility alone choosing the nearest original
/// position (lowest index on ties).
pub fn align_signature(
    members: &[ApiRecord],
    aliases: &AliasMap,
) -> Result<AlignedSignature, AlignError> {
    let Some(reference) = members.first() else {
        return Ok(AlignedSignature {
            canonical_params: Vec::new(),
            per_member_order: Vec::new(),
        });
    };
    let canonical_params: Vec<CanonicalParam> = reference
        .functional_params()
        .map(|p| CanonicalParam {
            canonical_name: aliases.normalize(&p.name),
            abstract_type: p.abstract_type,
        })
        .collect();

    let mut per_member_order = Vec::with_capacity(members.len());
    for member in members {
        let params: Vec<(String, AbstractType)> = member
            .functional_params()
            .map(|p| (aliases.normalize(&p.name), p.abstract_type))
            .collect();
        if params.len() != canonical_params.len() {
            return Err(AlignError::CountMismatch {
                member: member.qualified_name.clone(),
                expected: canonical_params.len(),
                found: params.len(),
            });
        }

        let mut order: Vec<Option<usize>> = vec![None; canonical_params.len()];
        let mut used = vec![false; params.len()];

        for (i, cp) in canonical_params.iter().enumerate() {
            let hit = params.iter().enumerate().position(|(j, (name, ty))| {
                !used[j] && *name == cp.canonical_name && ty.compatible(cp.abstract_type)
            });
            if let Some(j) = hit {
                used[j] = true;
                order[i] = Some(j);
            }
        }

        for (i, cp) in canonical_params.iter().enumerate() {
            if order[i].is_some() {
                continue;
            }
            let nearest = params
                .iter()
                .enumerate()
                .filter(|(j, (_, ty))| !used[*j] && ty.compatible(cp.abstract_type))
                .min_by_key(|(j, _)| (j.abs_diff(i), *j))
                .map(|(j, _)| j);
            match nearest {
                Some(j) => {
                    used[j] = true;
                    order[i] = Some(j);
                }
                None => {
                    return Err(AlignError::Unresolvable {
                        member: member.qualified_name.clone(),
                        canonical: cp.canonical_name.clone(),
                        ty: cp.abstract_type,
                    })
                }
            }
        }

        per_member_order.push(order.into_iter().map(|j| j.unwrap()).collect());
    }

    Ok(AlignedSignature {
        canonical_params,
        per_member_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ParamRole, ParamSpec};
    use AbstractType::*;

    fn rec(name: &str, params: &[(&str, AbstractType)]) -> ApiRecord {
        ApiRecord {
            source_id: name.split('.').next().unwrap().into(),
            qualified_name: name.into(),
            normalized_name: crate::corpus::normalize_api_name(name),
            description: std::string::String::new(),
            params: params
                .iter()
                .map(|(n, t)| ParamSpec {
                    name: n.to_string(),
                    raw_type: t.to_string(),
                    abstract_type: *t,
                    role: ParamRole::Functional,
                    has_default: false,
                })
                .collect(),
        }
    }

    #[test]
    fn param_name_examples() {
        assert_eq!(normalize_param_name("dim"), "axis");
        assert_eq!(normalize_param_name("axis"), "axis");
        assert_eq!(normalize_param_name("Axes"), "axis");
        assert_eq!(normalize_param_name("tensor2"), "input_2");
        assert_eq!(normalize_param_name("input1"), "input_1");
        assert_eq!(normalize_param_name("input_3"), "input_3");
        assert_eq!(normalize_param_name("values"), "input");
        assert_eq!(normalize_param_name("logits"), "logits");
        assert_eq!(normalize_param_name("conv2"), "conv2");
    }

    #[test]
    fn matmul_aliases() {
        let torch = rec("torch.matmul", &[("input", Tensor), ("other", Tensor)]);
        let jax = rec("jax.numpy.matmul", &[("a", Tensor), ("b", Tensor)]);
        let sig = align_signature(&[torch, jax], &AliasMap::default()).unwrap();
        assert_eq!(sig.per_member_order, vec![vec![0, 1], vec![0, 1]]);
        assert_eq!(sig.canonical_params[0].canonical_name, "input");
        assert_eq!(sig.canonical_params[1].canonical_name, "other");
    }

    #[test]
    fn swapped_order_by_name() {
        let r = rec("torch.f", &[("input", Tensor), ("axis", Int)]);
        let m = rec("jax.f", &[("axis", Int), ("input", Tensor)]);
        let sig = align_signature(&[r, m], &AliasMap::default()).unwrap();
        assert_eq!(sig.per_member_order[1], vec![1, 0]);
        let args = AlignedSignature::permute(&sig.per_member_order[1], &["t", "ax"]);
        assert_eq!(args, vec!["ax", "t"]);
    }

    #[test]
    fn identity_when_identical() {
        let r = rec("torch.f", &[("input", Tensor), ("dim", Int)]);
        let m = rec("tf.f", &[("x", Tensor), ("axis", Int)]);
        let sig = align_signature(&[r.clone(), m, r], &AliasMap::default()).unwrap();
        assert!(sig.per_member_order.iter().all(|o| o == &vec![0, 1]));
    }

    #[test]
    fn positional_fallback_for_same_type() {
        let r = rec("torch.clamp", &[("input", Tensor), ("min", Float), ("max", Float)]);
        let m = rec(
            "tf.clip",
            &[("a", Tensor), ("a_min", Float), ("a_max", Float)],
        );
        let sig = align_signature(&[r, m], &AliasMap::default()).unwrap();
        assert_eq!(sig.per_member_order[1], vec![0, 1, 2]);
    }

    #[test]
    fn unresolvable_types() {
        let r = rec("torch.f", &[("input", Tensor), ("axis", Int)]);
        let m = rec("tf.f", &[("input", Tensor), ("flag", Bool)]);
        assert!(matches!(
            align_signature(&[r, m], &AliasMap::default()),
            Err(AlignError::Unresolvable { .. })
        ));
    }

    #[test]
    fn alias_file() {
        let map = AliasMap::parse("# extra\nlogits -> input\nfeatures->input\n").unwrap();
        assert_eq!(map.normalize("logits"), "input");
        assert_eq!(map.normalize("dim"), "axis");
        assert!(AliasMap::parse("bogus line").is_err());
    }
}
