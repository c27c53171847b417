//! Variance-guided differential fuzzing of matched API groups.

pub mod mutate;
pub mod oracle;
pub mod variance;

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{AlignedSignature, CanonicalParam};
use crate::backend::{BackendError, BackendHandle, ExecutionOutcome, Status};
use crate::gen::{validate_args, ArgRole, EdgeCaseConfig, GenConfig, SeedGenerator, ShapePolicy};
use crate::matcher::ApiGroup;
use crate::value::{SeedTuple, ValueIR};

pub use mutate::{accept, acceptance_probability, cool, mutate, MutationClass};
pub use oracle::{evaluate, fingerprint, Oracle, Verdict};
pub use variance::{compute_variance, deviation_vector, DeviationVector, VarianceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Guided,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub tests_per_group: usize,
    pub stagnation_limit: usize,
    pub min_improvement: f64,
    pub inconsistency_threshold: f64,
    pub initial_temperature: f64,
    pub temperature_decay: f64,
    pub temperature_floor: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub timeout_secs: f64,
    pub strategy: Strategy,
    pub rank_max: usize,
    pub dim_max: usize,
    pub edge_element_prob: f64,
    pub edge_variant_prob: f64,
    /// Normalized API names whose tensors are generated as complex.
    pub complex_apis: Vec<String>,
    /// Normalized API names whose tensors end in a square matrix.
    pub square_apis: Vec<String>,
    pub verify_seeds: usize,
    pub verify_tolerance: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            tests_per_group: 500,
            stagnation_limit: 20,
            min_improvement: 0.001,
            inconsistency_threshold: 0.1,
            initial_temperature: 0.1,
            temperature_decay: 0.95,
            temperature_floor: 1e-3,
            noise_scale: 1.0,
            seed: 0,
            timeout_secs: 10.0,
            strategy: Strategy::Guided,
            rank_max: 4,
            dim_max: 6,
            edge_element_prob: 0.05,
            edge_variant_prob: 0.1,
            complex_apis: Vec::new(),
            square_apis: Vec::new(),
            verify_seeds: 10,
            verify_tolerance: 0.001,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("tests_per_group", self.tests_per_group as f64),
            ("stagnation_limit", self.stagnation_limit as f64),
            ("min_improvement", self.min_improvement),
            ("inconsistency_threshold", self.inconsistency_threshold),
            ("initial_temperature", self.initial_temperature),
            ("temperature_decay", self.temperature_decay),
            ("temperature_floor", self.temperature_floor),
            ("timeout_secs", self.timeout_secs),
            ("rank_max", self.rank_max as f64),
            ("dim_max", self.dim_max as f64),
            ("verify_seeds", self.verify_seeds as f64),
            ("verify_tolerance", self.verify_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.temperature_decay > 1.0 {
            return Err("temperature_decay must be at most 1".into());
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err("noise_scale must be non-negative".into());
        }
        for (name, p) in [
            ("edge_element_prob", self.edge_element_prob),
            ("edge_variant_prob", self.edge_variant_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn gen_config(&self, op: &str) -> GenConfig {
        GenConfig {
            rank_max: self.rank_max,
            dim_max: self.dim_max,
            complex: self.complex_apis.iter().any(|a| a == op),
            shape_policy: if self.square_apis.iter().any(|a| a == op) {
                ShapePolicy::Square
            } else {
                ShapePolicy::Same
            },
            edge: EdgeCaseConfig {
                element_prob: self.edge_element_prob,
                variant_prob: self.edge_variant_prob,
            },
            ..GenConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCall {
    pub source: String,
    pub api: String,
    pub order: Vec<usize>,
}

/// Which backend runs which member, and how canonical arguments are
/// permuted for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallPlan {
    pub group_id: String,
    /// Normalized name of the reference member.
    pub op: String,
    pub canonical: Vec<CanonicalParam>,
    pub calls: Vec<PlannedCall>,
}

impl CallPlan {
    /// Keeps every member whose source has a backend exposing it. Fails when
    /// fewer than two members remain.
    pub fn build(group: &ApiGroup, handles: &[BackendHandle]) -> Result<CallPlan, String> {
        let aligned: &AlignedSignature = group
            .aligned
            .as_ref()
            .ok_or_else(|| format!("group {} has no aligned signature", group.group_id))?;
        let calls: Vec<PlannedCall> = group
            .members
            .iter()
            .zip(&aligned.per_member_order)
            .filter(|(m, _)| {
                handles
                    .iter()
                    .any(|h| h.backend_id == m.source_id && h.supports(&m.qualified_name))
            })
            .map(|(m, order)| PlannedCall {
                source: m.source_id.clone(),
                api: m.qualified_name.clone(),
                order: order.clone(),
            })
            .collect();
        if calls.len() < 2 {
            return Err(format!(
                "group {}: {} member(s) have a backend, need at least 2",
                group.group_id,
                calls.len()
            ));
        }
        Ok(CallPlan {
            group_id: group.group_id.clone(),
            op: group.members[0].normalized_name.clone(),
            canonical: aligned.canonical_params.clone(),
            calls,
        })
    }

    pub fn roles(&self) -> Result<Vec<ArgRole>, String> {
        crate::gen::arg_roles(&self.canonical).map_err(|e| e.to_string())
    }

    /// Runs every member on its backend with the canonical arguments.
    pub fn execute(&self, handles: &mut [BackendHandle], args: &[ValueIR]) -> Vec<ExecutionOutcome> {
        self.calls
            .iter()
            .map(|call| {
                let member_args = AlignedSignature::permute(&call.order, args);
                match handles.iter_mut().find(|h| h.backend_id == call.source) {
                    Some(h) => h.call(&call.api, &member_args),
                    None => ExecutionOutcome {
                        backend_id: call.source.clone(),
                        status: Status::Error,
                        outputs: Vec::new(),
                        error_text: Some(format!("no backend for source {}", call.source)),
                        nan_present: false,
                        duration_ms: 0.0,
                    },
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub group_id: String,
    pub oracle: Oracle,
    pub fingerprint: String,
    /// 1-based evaluation count at which the input was run.
    pub evaluation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    pub diverging: Vec<String>,
    pub roles: Vec<ArgRole>,
    pub calls: Vec<PlannedCall>,
    pub trigger: SeedTuple,
    pub outcomes: Vec<ExecutionOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub group_id: String,
    pub evaluations: usize,
    pub findings: Vec<Finding>,
    /// Inputs on which each oracle fired, before deduplication.
    pub hits: BTreeMap<Oracle, usize>,
    pub first_finding_at: Option<usize>,
    pub restarts: usize,
    pub aborted: Option<String>,
}

/// Per-group random stream derived from the master seed.
pub fn group_rng(master_seed: u64, group_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(group_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(master_seed ^ u64::from_le_bytes(head))
}

struct Current {
    seed: SeedTuple,
    score: f64,
    dev: Option<DeviationVector>,
}

/// Fuzzes one group. Never runs more than `tests_per_group` evaluations.
pub fn run_campaign(plan: &CallPlan, handles: &mut [BackendHandle], cfg: &CampaignConfig) -> Result<CampaignReport, String> {
    let roles = plan.roles()?;
    let gen = SeedGenerator::new(plan.group_id.clone(), plan.canonical.clone(), cfg.gen_config(&plan.op))
        .map_err(|e| e.to_string())?;
    let mut rng = group_rng(cfg.seed, &plan.group_id);
    let mut report = CampaignReport {
        group_id: plan.group_id.clone(),
        evaluations: 0,
        findings: Vec::new(),
        hits: BTreeMap::new(),
        first_finding_at: None,
        restarts: 0,
        aborted: None,
    };
    let mut seen = HashSet::new();
    let mut all_error_streak = 0;
    let mut temperature = cfg.initial_temperature;
    let mut current: Option<Current> = None;
    let mut stale = 0;
    let mut fresh_index = 0u64;

    while report.evaluations < cfg.tests_per_group {
        let (candidate, is_fresh) = match (&current, cfg.strategy) {
            (Some(c), Strategy::Guided) => {
                let (m, _) = mutate(&c.seed, &roles, c.dev.as_ref(), &mut rng, temperature, cfg.noise_scale);
                (m, false)
            }
            _ => {
                let s = gen.fresh(rng.random(), fresh_index);
                fresh_index += 1;
                (s, true)
            }
        };
        let outcomes = plan.execute(handles, &candidate.args);
        report.evaluations += 1;

        if outcomes.iter().all(|o| o.status == Status::Error) {
            all_error_streak += 1;
            if all_error_streak == report.evaluations && all_error_streak >= cfg.stagnation_limit {
                let first = outcomes
                    .iter()
                    .find_map(|o| o.error_text.clone())
                    .unwrap_or_default();
                report.aborted = Some(format!(
                    "every backend failed on the first {all_error_streak} inputs; last error: {first}"
                ));
                break;
            }
        }

        let (verdict, var) = evaluate(&outcomes, cfg.inconsistency_threshold);
        if let Some(v) = verdict {
            *report.hits.entry(v.oracle).or_default() += 1;
            report.first_finding_at.get_or_insert(report.evaluations);
            let fp = fingerprint(&plan.group_id, v.oracle, &v.diverging, &candidate);
            if seen.insert(fp.clone()) {
                report.findings.push(Finding {
                    group_id: plan.group_id.clone(),
                    oracle: v.oracle,
                    fingerprint: fp,
                    evaluation: report.evaluations,
                    sigma2: v.sigma2,
                    diverging: v.diverging,
                    roles: roles.clone(),
                    calls: plan.calls.clone(),
                    trigger: candidate.clone(),
                    outcomes: outcomes.clone(),
                });
            }
        }

        if cfg.strategy == Strategy::Random {
            continue;
        }
        let (score, dev) = match &var {
            Some(v) if v.comparable => {
                let ok: Vec<&ExecutionOutcome> = outcomes.iter().filter(|o| o.is_ok()).collect();
                (v.sigma2, Some(deviation_vector(&ok, v)))
            }
            _ => (0.0, None),
        };
        if is_fresh {
            current = Some(Current { seed: candidate, score, dev });
            stale = 0;
            continue;
        }
        let cur = current.as_mut().expect("mutation needs a current input");
        if score >= cur.score + cfg.min_improvement {
            stale = 0;
        } else {
            stale += 1;
        }
        if accept(cur.score, score, temperature, cfg.min_improvement, &mut rng) {
            *cur = Current { seed: candidate, score, dev };
            temperature = cool(temperature, cfg.temperature_decay, cfg.temperature_floor);
        }
        if stale >= cfg.stagnation_limit {
            current = None;
            stale = 0;
            temperature = cfg.initial_temperature;
            report.restarts += 1;
        }
    }
    Ok(report)
}

/// Runs many groups on a pool of `jobs` threads. Each group gets its own
/// backend handles from `make_handles`; results keep the order of `plans`.
pub fn run_campaigns<F>(
    plans: &[CallPlan],
    make_handles: F,
    cfg: &CampaignConfig,
    jobs: usize,
) -> Vec<Result<CampaignReport, String>>
where
    F: Fn() -> Result<Vec<BackendHandle>, BackendError> + Sync,
{
    let run = |plan: &CallPlan| {
        let mut handles = make_handles().map_err(|e| e.to_string())?;
        run_campaign(plan, &mut handles, cfg)
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(|| plans.par_iter().map(run).collect()),
        Err(_) => plans.iter().map(run).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub group_id: String,
    pub seeds: usize,
    pub max_deviation: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Largest element-wise spread (max minus min) between backends. Differing
/// NaN positions count as an infinite spread.
pub fn max_spread(ok: &[&ExecutionOutcome]) -> Option<f64> {
    let flat: Vec<_> = ok.iter().map(|o| variance::flatten_outputs(&o.outputs)).collect();
    let first = flat.first()?;
    if flat.iter().any(|f| f.values.len() != first.values.len() || f.layout != first.layout) {
        return None;
    }
    let mut worst: f64 = 0.0;
    for e in 0..first.values.len() {
        let col = flat.iter().map(|f| f.values[e]);
        if col.clone().all(|x| x == first.values[e] || (x.is_nan() && first.values[e].is_nan())) {
            continue;
        }
        if col.clone().any(f64::is_nan) {
            return Some(f64::INFINITY);
        }
        let hi = col.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = col.fold(f64::INFINITY, f64::min);
        worst = worst.max(hi - lo);
    }
    Some(worst)
}

/// Passes when every member runs and outputs agree within `tolerance` on
/// every seed.
pub fn verify_seeds(
    plan: &CallPlan,
    handles: &mut [BackendHandle],
    seeds: &[SeedTuple],
    tolerance: f64,
) -> VerifyReport {
    let mut report = VerifyReport {
        group_id: plan.group_id.clone(),
        seeds: seeds.len(),
        max_deviation: 0.0,
        passed: true,
        failure: None,
    };
    for (k, seed) in seeds.iter().enumerate() {
        let outcomes = plan.execute(handles, &seed.args);
        if let Some(bad) = outcomes.iter().find(|o| !o.is_ok()) {
            report.passed = false;
            report.failure = Some(format!(
                "seed {k}: {} returned {:?}: {}",
                bad.backend_id,
                bad.status,
                bad.error_text.clone().unwrap_or_default()
            ));
            return report;
        }
        let ok: Vec<&ExecutionOutcome> = outcomes.iter().collect();
        match max_spread(&ok) {
            Some(d) => report.max_deviation = report.max_deviation.max(d),
            None => {
                report.passed = false;
                report.failure = Some(format!("seed {k}: output shapes differ"));
                return report;
            }
        }
        if report.max_deviation >= tolerance {
            report.passed = false;
            report.failure = Some(format!(
                "seed {k}: deviation {} exceeds {tolerance}",
                report.max_deviation
            ));
            return report;
        }
    }
    report
}

/// Behavioral check on `verify_seeds` plain random inputs.
pub fn verify_group(plan: &CallPlan, handles: &mut [BackendHandle], cfg: &CampaignConfig) -> Result<VerifyReport, String> {
    let gen = SeedGenerator::new(plan.group_id.clone(), plan.canonical.clone(), cfg.gen_config(&plan.op))
        .map_err(|e| e.to_string())?;
    let mut rng = group_rng(cfg.seed, &plan.group_id);
    let seeds: Vec<SeedTuple> = (0..cfg.verify_seeds as u64)
        .map(|i| gen.generate(rng.random(), i))
        .collect();
    Ok(verify_seeds(plan, handles, &seeds, cfg.verify_tolerance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub group_id: String,
    pub expected: Oracle,
    pub observed: Option<Oracle>,
    pub diverging: Vec<String>,
    pub reproduced: bool,
    pub outcomes: Vec<ExecutionOutcome>,
}

/// Re-executes a finding's trigger and re-applies the oracles.
pub fn replay(finding: &Finding, handles: &mut [BackendHandle], threshold: f64) -> Result<ReplayResult, String> {
    validate_args(&finding.roles, &finding.trigger.args).map_err(|e| format!("invalid trigger: {e}"))?;
    let plan = CallPlan {
        group_id: finding.group_id.clone(),
        op: String::new(),
        canonical: Vec::new(),
        calls: finding.calls.clone(),
    };
    let outcomes = plan.execute(handles, &finding.trigger.args);
    let (verdict, _) = evaluate(&outcomes, threshold);
    let observed = verdict.as_ref().map(|v| v.oracle);
    Ok(ReplayResult {
        group_id: finding.group_id.clone(),
        expected: finding.oracle,
        observed,
        diverging: verdict.map(|v| v.diverging).unwrap_or_default(),
        reproduced: observed == Some(finding.oracle),
        outcomes,
    })
}
