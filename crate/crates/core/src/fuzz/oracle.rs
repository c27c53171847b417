//! Crash, NaN and inconsistency oracles over one evaluated input.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::variance::{compute_variance, deviation_vector, flatten_outputs, VarianceResult};
use crate::backend::{ExecutionOutcome, Status};
use crate::value::{edge_classes, SeedTuple, ValueIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oracle {
    Crash,
    #[serde(rename = "nan")]
    NaN,
    Inconsistency,
}

impl Oracle {
    pub fn as_str(self) -> &'static str {
        match self {
            Oracle::Crash => "crash",
            Oracle::NaN => "nan",
            Oracle::Inconsistency => "inconsistency",
        }
    }
}

impl fmt::Display for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub oracle: Oracle,
    /// Backends on the minority side of the disagreement, sorted.
    pub diverging: Vec<String>,
    pub sigma2: Option<f64>,
}

/// Fires when any backend crashed or timed out.
pub fn oracle_crash(outcomes: &[ExecutionOutcome]) -> Option<Verdict> {
    let mut diverging: Vec<String> = outcomes
        .iter()
        .filter(|o| matches!(o.status, Status::Crash | Status::Timeout))
        .map(|o| o.backend_id.clone())
        .collect();
    if diverging.is_empty() {
        return None;
    }
    diverging.sort();
    Some(Verdict {
        oracle: Oracle::Crash,
        diverging,
        sigma2: None,
    })
}

/// Fires when some, but not all, successful outputs contain NaN.
pub fn oracle_nan(outcomes: &[ExecutionOutcome]) -> Option<Verdict> {
    let ok: Vec<&ExecutionOutcome> = outcomes.iter().filter(|o| o.is_ok()).collect();
    let with: Vec<&str> = ok.iter().filter(|o| o.nan_present).map(|o| o.backend_id.as_str()).collect();
    let without: Vec<&str> = ok.iter().filter(|o| !o.nan_present).map(|o| o.backend_id.as_str()).collect();
    if with.is_empty() || without.is_empty() {
        return None;
    }
    let minority = if with.len() < without.len() { with } else { without };
    let mut diverging: Vec<String> = minority.into_iter().map(str::to_string).collect();
    diverging.sort();
    Some(Verdict {
        oracle: Oracle::NaN,
        diverging,
        sigma2: None,
    })
}

/// Backends whose flattened output differs from the most common one.
fn minority_by_output(ok: &[&ExecutionOutcome]) -> Vec<String> {
    let keys: Vec<String> = ok
        .iter()
        .map(|o| {
            let f = flatten_outputs(&o.outputs);
            format!("{:?}|{:?}", f.layout, f.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        })
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for k in &keys {
        *counts.entry(k.as_str()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    // Among equally common outputs, the first backend's output wins.
    let majority = keys
        .iter()
        .find(|k| counts[k.as_str()] == top)
        .cloned()
        .unwrap_or_default();
    let mut out: Vec<String> = ok
        .iter()
        .zip(&keys)
        .filter(|(_, k)| **k != majority)
        .map(|(o, _)| o.backend_id.clone())
        .collect();
    out.sort();
    out
}

/// Fires on incomparable outputs, any integer mismatch, or a real-valued
/// variance at or above `threshold`.
pub fn oracle_inconsistency(
    ok: &[&ExecutionOutcome],
    variance: &VarianceResult,
    threshold: f64,
) -> Option<Verdict> {
    if ok.len() < 2 {
        return None;
    }
    let fires = !variance.comparable || variance.integer_mismatches > 0 || variance.sigma2 >= threshold;
    if !fires {
        return None;
    }
    let diverging = if variance.comparable && variance.integer_mismatches == 0 {
        // Real-valued: the backend deviating most at the highest-variance element.
        let dev = deviation_vector(ok, variance);
        let e = variance
            .variance
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
            .0;
        let worst = dev
            .deviations
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a[e].abs().total_cmp(&b[e].abs()))
            .map(|(i, _)| variance.backends[i].clone());
        worst.into_iter().collect()
    } else {
        minority_by_output(ok)
    };
    Some(Verdict {
        oracle: Oracle::Inconsistency,
        diverging,
        sigma2: variance.comparable.then_some(variance.sigma2),
    })
}

/// All oracles in precedence order; at most one verdict per input.
pub fn evaluate(outcomes: &[ExecutionOutcome], threshold: f64) -> (Option<Verdict>, Option<VarianceResult>) {
    if let Some(v) = oracle_crash(outcomes) {
        return (Some(v), None);
    }
    let ok: Vec<&ExecutionOutcome> = outcomes.iter().filter(|o| o.is_ok()).collect();
    let variance = (ok.len() >= 2).then(|| compute_variance(&ok));
    if let Some(v) = oracle_nan(outcomes) {
        return (Some(v), variance);
    }
    let verdict = variance
        .as_ref()
        .and_then(|var| oracle_inconsistency(&ok, var, threshold));
    (verdict, variance)
}

/// Coarse description of a trigger: argument kinds, tensor dtypes and the
/// edge-case classes present.
pub fn coarse_signature(trigger: &SeedTuple) -> String {
    let kinds: Vec<String> = trigger
        .args
        .iter()
        .map(|a| match a {
            ValueIR::Tensor(t) => format!("tensor:{}", t.dtype),
            other => other.kind().as_str().to_string(),
        })
        .collect();
    format!("{}|{}", kinds.join(","), edge_classes(&trigger.args).join(","))
}

pub fn fingerprint(group_id: &str, oracle: Oracle, diverging: &[String], trigger: &SeedTuple) -> String {
    let mut sorted = diverging.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for part in [group_id, oracle.as_str(), &sorted.join(","), &coarse_signature(trigger)] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{DType, Tensor};

    fn ok(id: &str, v: f64) -> ExecutionOutcome {
        ExecutionOutcome {
            backend_id: id.into(),
            status: Status::Ok,
            outputs: vec![ValueIR::Tensor(Tensor::real(DType::F32, vec![], vec![v]))],
            error_text: None,
            nan_present: v.is_nan(),
            duration_ms: 0.0,
        }
    }

    fn failed(id: &str, status: Status) -> ExecutionOutcome {
        ExecutionOutcome {
            backend_id: id.into(),
            status,
            outputs: vec![],
            error_text: Some("x".into()),
            nan_present: false,
            duration_ms: 0.0,
        }
    }

    #[test]
    fn nan_subset() {
        let v = oracle_nan(&[ok("torch", f64::NAN), ok("tf", 0.0), ok("jax", f64::NAN)]).unwrap();
        assert_eq!(v.diverging, vec!["tf".to_string()]);
        assert!(oracle_nan(&[ok("a", f64::NAN), ok("b", f64::NAN)]).is_none());
        assert!(oracle_nan(&[ok("a", 1.0), ok("b", 2.0)]).is_none());
    }

    #[test]
    fn inconsistency_threshold() {
        // sigma2 of {0, 1} is 0.25
        let (a, b) = (ok("a", 0.0), ok("b", 1.0));
        let (v, _) = evaluate(&[a, b], 0.1);
        let v = v.unwrap();
        assert_eq!(v.oracle, Oracle::Inconsistency);
        assert_eq!(v.sigma2, Some(0.25));
        // sigma2 of {0, 0.4472} is 0.05
        let (v, var) = evaluate(&[ok("a", 0.0), ok("b", 0.05f64.sqrt() * 2.0)], 0.1);
        assert!(v.is_none());
        assert!((var.unwrap().sigma2 - 0.05).abs() < 1e-6);
    }

    #[test]
    fn precedence() {
        let outs = [ok("a", f64::NAN), ok("b", 0.0), failed("c", Status::Crash)];
        let (v, _) = evaluate(&outs, 0.1);
        assert_eq!(v.unwrap().oracle, Oracle::Crash);
        let outs = [ok("a", f64::NAN), ok("b", 5.0)];
        assert_eq!(evaluate(&outs, 0.1).0.unwrap().oracle, Oracle::NaN);
        let outs = [ok("a", 1.0), failed("b", Status::Timeout)];
        assert_eq!(evaluate(&outs, 0.1).0.unwrap().diverging, vec!["b".to_string()]);
        // errors alongside agreeing outputs are not findings
        let outs = [ok("a", 1.0), ok("b", 1.0), failed("c", Status::Error)];
        assert!(evaluate(&outs, 0.1).0.is_none());
    }

    #[test]
    fn integer_mismatch_minority() {
        let idx = |id: &str, v: Vec<i64>| ExecutionOutcome {
            backend_id: id.into(),
            status: Status::Ok,
            outputs: vec![ValueIR::Tensor(Tensor::int(vec![2], v))],
            error_text: None,
            nan_present: false,
            duration_ms: 0.0,
        };
        let outs = [idx("a", vec![0, 1]), idx("b", vec![1, 0]), idx("c", vec![0, 1])];
        let (v, _) = evaluate(&outs, 0.1);
        let v = v.unwrap();
        assert_eq!(v.oracle, Oracle::Inconsistency);
        assert_eq!(v.diverging, vec!["b".to_string()]);
    }

    #[test]
    fn fingerprint_ignores_order_and_values() {
        let s1 = SeedTuple {
            group_id: "g".into(),
            rng_seed: 1,
            args: vec![ValueIR::Tensor(Tensor::real(DType::F32, vec![2], vec![0.5, -0.0]))],
        };
        let mut s2 = s1.clone();
        s2.args[0] = ValueIR::Tensor(Tensor::real(DType::F32, vec![3], vec![0.1, 0.2, -0.0]));
        let a = fingerprint("g", Oracle::NaN, &["x".into(), "y".into()], &s1);
        let b = fingerprint("g", Oracle::NaN, &["y".into(), "x".into()], &s2);
        assert_eq!(a, b);
        assert_ne!(a, fingerprint("g", Oracle::Inconsistency, &["x".into(), "y".into()], &s1));
        assert_eq!(a.len(), 64);
    }
}
