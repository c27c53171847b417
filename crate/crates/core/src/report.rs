//! Config files, run manifests and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fuzz::{CampaignConfig, CampaignReport, Finding, Oracle, Strategy, VerifyReport};
use crate::matcher::StageStats;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("config: {0}")]
    Invalid(String),
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Applies one `key = value` setting.
pub fn apply_setting(cfg: &mut CampaignConfig, key: &str, value: &str) -> Result<(), Option<String>> {
    let r = match key {
        "tests_per_group" => parse_num(value).map(|v| cfg.tests_per_group = v),
        "stagnation_limit" => parse_num(value).map(|v| cfg.stagnation_limit = v),
        "min_improvement" => parse_num(value).map(|v| cfg.min_improvement = v),
        "inconsistency_threshold" => parse_num(value).map(|v| cfg.inconsistency_threshold = v),
        "initial_temperature" => parse_num(value).map(|v| cfg.initial_temperature = v),
        "temperature_decay" => parse_num(value).map(|v| cfg.temperature_decay = v),
        "temperature_floor" => parse_num(value).map(|v| cfg.temperature_floor = v),
        "noise_scale" => parse_num(value).map(|v| cfg.noise_scale = v),
        "seed" => parse_num(value).map(|v| cfg.seed = v),
        "timeout_secs" => parse_num(value).map(|v| cfg.timeout_secs = v),
        "rank_max" => parse_num(value).map(|v| cfg.rank_max = v),
        "dim_max" => parse_num(value).map(|v| cfg.dim_max = v),
        "edge_element_prob" => parse_num(value).map(|v| cfg.edge_element_prob = v),
        "edge_variant_prob" => parse_num(value).map(|v| cfg.edge_variant_prob = v),
        "verify_seeds" => parse_num(value).map(|v| cfg.verify_seeds = v),
        "verify_tolerance" => parse_num(value).map(|v| cfg.verify_tolerance = v),
        "complex_apis" => {
            cfg.complex_apis = parse_list(value);
            Ok(())
        }
        "square_apis" => {
            cfg.square_apis = parse_list(value);
            Ok(())
        }
        "strategy" => match value {
            "guided" => {
                cfg.strategy = Strategy::Guided;
                Ok(())
            }
            "random" => {
                cfg.strategy = Strategy::Random;
                Ok(())
            }
            _ => Err("expected guided or random".to_string()),
        },
        _ => return Err(None),
    };
    r.map_err(Some)
}

/// Flat `key = value` text; `#` starts a comment. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<CampaignConfig, ConfigError> {
    let mut cfg = CampaignConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
        let (key, value) = (key.trim(), value.trim());
        apply_setting(&mut cfg, key, value).map_err(|e| match e {
            None => ConfigError::UnknownKey {
                line: n + 1,
                key: key.to_string(),
            },
            Some(message) => ConfigError::Value {
                line: n + 1,
                key: key.to_string(),
                message,
            },
        })?;
    }
    cfg.validate().map_err(ConfigError::Invalid)?;
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&std::fs::read(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub source: String,
    pub spec: String,
    pub version: String,
}

/// Everything needed to rerun a command, plus wall-clock timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<CampaignConfig>,
    pub inputs: Vec<FileDigest>,
    pub backends: Vec<BackendInfo>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json_lines<W: Write, T: Serialize>(mut out: W, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_findings(text: &str) -> Result<Vec<Finding>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| format!("findings line {}: {e}", n + 1)))
        .collect()
}

/// One summary record per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_id: String,
    pub status: String,
    pub evaluations: usize,
    pub findings: BTreeMap<Oracle, usize>,
    pub hits: BTreeMap<Oracle, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_finding_at: Option<usize>,
    pub restarts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl GroupSummary {
    pub fn from_report(r: &CampaignReport) -> Self {
        let mut findings = BTreeMap::new();
        for f in &r.findings {
            *findings.entry(f.oracle).or_default() += 1;
        }
        GroupSummary {
            group_id: r.group_id.clone(),
            status: if r.aborted.is_some() { "aborted" } else { "ran" }.into(),
            evaluations: r.evaluations,
            findings,
            hits: r.hits.clone(),
            first_finding_at: r.first_finding_at,
            restarts: r.restarts,
            note: r.aborted.clone(),
        }
    }

    pub fn skipped(group_id: &str, reason: &str) -> Self {
        GroupSummary {
            group_id: group_id.to_string(),
            status: "skipped".into(),
            evaluations: 0,
            findings: BTreeMap::new(),
            hits: BTreeMap::new(),
            first_finding_at: None,
            restarts: 0,
            note: Some(reason.to_string()),
        }
    }
}

pub fn fuzz_summary_text(groups: &[GroupSummary]) -> String {
    let mut s = String::new();
    let mut totals: BTreeMap<Oracle, usize> = BTreeMap::new();
    let _ = writeln!(s, "{:<40} {:>8} {:>6} {:>6} {:>6}  status", "group", "evals", "crash", "nan", "incon");
    for g in groups {
        let get = |o| g.findings.get(&o).copied().unwrap_or(0);
        for o in [Oracle::Crash, Oracle::NaN, Oracle::Inconsistency] {
            *totals.entry(o).or_default() += get(o);
        }
        let _ = writeln!(
            s,
            "{:<40} {:>8} {:>6} {:>6} {:>6}  {}{}",
            g.group_id,
            g.evaluations,
            get(Oracle::Crash),
            get(Oracle::NaN),
            get(Oracle::Inconsistency),
            g.status,
            g.note.as_deref().map(|n| format!(": {n}")).unwrap_or_default()
        );
    }
    let _ = writeln!(
        s,
        "\n{} groups, {} crash, {} nan, {} inconsistency findings",
        groups.len(),
        totals.get(&Oracle::Crash).unwrap_or(&0),
        totals.get(&Oracle::NaN).unwrap_or(&0),
        totals.get(&Oracle::Inconsistency).unwrap_or(&0)
    );
    s
}

pub fn verify_summary_text(reports: &[VerifyReport], skipped: &[(String, String)]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "{} {} seeds={} max_deviation={:e}{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.group_id,
            r.seeds,
            r.max_deviation,
            r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default()
        );
    }
    for (g, why) in skipped {
        let _ = writeln!(s, "SKIP {g} ({why})");
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    let _ = writeln!(s, "\n{passed}/{} groups passed", reports.len());
    s
}

pub fn match_stats_text(stats: &StageStats) -> String {
    format!(
        "reference APIs:      {}\n\
         stage 1 candidates:  {}\n\
         stage 2 candidates:  {}\n\
         stage 3 accepted:    {}\n\
         groups:              {}\n\
         grouped APIs:        {}\n\
         alignment failures:  {}\n",
        stats.reference_apis,
        stats.stage1,
        stats.stage2,
        stats.stage3,
        stats.groups,
        stats.grouped_apis,
        stats.alignment_failures
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let cfg = parse_config(
            "# demo\ntests_per_group = 50\nseed=7\nstrategy = random\ncomplex_apis = angle, Abs\n\n",
        )
        .unwrap();
        assert_eq!(cfg.tests_per_group, 50);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.strategy, Strategy::Random);
        assert_eq!(cfg.complex_apis, vec!["angle".to_string(), "abs".to_string()]);
        assert_eq!(cfg.inconsistency_threshold, 0.1);
    }

    #[test]
    fn config_errors() {
        assert_eq!(
            parse_config("bogus = 1"),
            Err(ConfigError::UnknownKey {
                line: 1,
                key: "bogus".into()
            })
        );
        assert!(matches!(parse_config("seed"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(parse_config("seed = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(
            parse_config("inconsistency_threshold = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(parse_config("strategy = greedy"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn digest_tracks_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, b"a").unwrap();
        let d1 = FileDigest::of(&p).unwrap();
        std::fs::write(&p, b"a").unwrap();
        assert_eq!(d1, FileDigest::of(&p).unwrap());
        std::fs::write(&p, b"b").unwrap();
        assert_ne!(d1.sha256, FileDigest::of(&p).unwrap().sha256);
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
