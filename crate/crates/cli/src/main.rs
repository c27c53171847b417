use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crossfuzz_core::align::AliasMap;
use crossfuzz_core::backend::{BackendHandle, BackendSpec};
use crossfuzz_core::corpus::{load_corpus, Corpus, CorpusRules};
use crossfuzz_core::fuzz::{self, CallPlan, CampaignConfig, Finding};
use crossfuzz_core::matcher::{build_groups, read_groups, write_groups, ApiGroup};
use crossfuzz_core::report::{
    self, parse_config, BackendInfo, FileDigest, GroupSummary, RunManifest,
};
use crossfuzz_core::similarity::{EmbeddingProvider, LexicalProvider, PrecomputedProvider};

/// Bad flags, config or input files. Exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "crossfuzz", version, about = "Match equivalent APIs across libraries and fuzz them differentially")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group equivalent APIs across documentation corpora.
    Match(MatchArgs),
    /// Fuzz every group and report crash, NaN and inconsistency findings.
    Fuzz(FuzzArgs),
    /// Check that group members agree on plain random inputs.
    Verify(VerifyArgs),
    /// Re-run a recorded finding.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct MatchArgs {
    /// Corpus file (JSON lines); give at least two.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    /// Source id of the reference corpus (default: the first corpus).
    #[arg(long)]
    reference: Option<String>,
    /// Extra parameter aliases, one `alias -> canonical` per line.
    #[arg(long)]
    alias_map: Option<PathBuf>,
    /// Precomputed description embeddings (JSON lines).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BackendArgs {
    /// SOURCE=ref:stable, SOURCE=ref:ftz or SOURCE=worker:COMMAND; repeatable.
    #[arg(long = "backends", required = true, value_delimiter = ',')]
    backends: Vec<String>,
    /// Flat `key = value` campaign config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long)]
    groups: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Groups fuzzed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    groups: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Findings file written by `fuzz`.
    #[arg(long)]
    findings: PathBuf,
    /// Zero-based record index; all records when omitted.
    #[arg(long)]
    index: Option<usize>,
    #[command(flatten)]
    backend: BackendArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let started = report::unix_now();
    if a.corpora.len() < 2 {
        return Err(usage("match needs at least two --corpus files"));
    }
    let rules = CorpusRules::default();
    let mut corpora: Vec<Corpus> = Vec::new();
    for p in &a.corpora {
        corpora.push(load_corpus(p, &rules).map_err(|e| usage(format!("{}: {e}", p.display())))?);
    }
    let ref_id = a.reference.clone().unwrap_or_else(|| corpora[0].source_id.clone());
    let ref_pos = corpora
        .iter()
        .position(|c| c.source_id == ref_id)
        .ok_or_else(|| usage(format!("no corpus has source `{ref_id}`")))?;
    let aliases = match &a.alias_map {
        Some(p) => AliasMap::load(p).map_err(|e| usage(e.to_string()))?,
        None => AliasMap::default(),
    };
    let provider: Box<dyn EmbeddingProvider> = match &a.embeddings {
        Some(p) => Box::new(PrecomputedProvider::load(p).map_err(|e| usage(e.to_string()))?),
        None => Box::new(LexicalProvider::fit_corpora(corpora.iter())),
    };
    let targets: Vec<&Corpus> = corpora
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ref_pos)
        .map(|(_, c)| c)
        .collect();
    let outcome = build_groups(&corpora[ref_pos], &targets, provider.as_ref(), &aliases)
        .map_err(|e| usage(e.to_string()))?;

    create_out(&a.out)?;
    let mut groups = Vec::new();
    write_groups(&mut groups, &outcome.groups)?;
    write_file(&a.out.join("groups.jsonl"), &groups)?;
    let mut cands = Vec::new();
    report::write_json_lines(&mut cands, &outcome.candidates)?;
    write_file(&a.out.join("candidates.jsonl"), &cands)?;
    let stats = report::match_stats_text(&outcome.stats);
    write_file(&a.out.join("match_stats.txt"), stats.as_bytes())?;

    let mut inputs: Vec<FileDigest> = a.corpora.iter().map(FileDigest::of).collect::<std::io::Result<_>>()?;
    for extra in [&a.alias_map, &a.embeddings].into_iter().flatten() {
        inputs.push(FileDigest::of(extra)?);
    }
    write_manifest(&a.out, "match", 0, None, inputs, Vec::new(), started)?;
    print!("{stats}");
    for g in &outcome.groups {
        let members: Vec<&str> = g.members.iter().map(|m| m.qualified_name.as_str()).collect();
        println!("group {}: {}", g.group_id, members.join(", "));
    }
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: Option<CampaignConfig>,
    inputs: Vec<FileDigest>,
    backends: Vec<BackendInfo>,
    started: u64,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        inputs,
        backends,
        started_unix: started,
        finished_unix: report::unix_now(),
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

struct Setup {
    config: CampaignConfig,
    specs: Vec<BackendSpec>,
    inputs: Vec<FileDigest>,
}

fn setup(b: &BackendArgs) -> Result<Setup> {
    let mut inputs = Vec::new();
    let mut config = match &b.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            inputs.push(FileDigest::of(p)?);
            parse_config(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => CampaignConfig::default(),
    };
    if let Some(seed) = b.seed {
        config.seed = seed;
    }
    let specs = b
        .backends
        .iter()
        .map(|s| s.parse::<BackendSpec>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &specs {
        if !seen.insert(s.source.clone()) {
            return Err(usage(format!("source `{}` has two backends", s.source)));
        }
    }
    Ok(Setup { config, specs, inputs })
}

fn build_handles(specs: &[BackendSpec], config: &CampaignConfig) -> Result<Vec<BackendHandle>> {
    specs
        .iter()
        .map(|s| s.build(config.timeout()).map_err(|e| anyhow!(e)))
        .collect()
}

fn backend_info(specs: &[BackendSpec], handles: &[BackendHandle]) -> Vec<BackendInfo> {
    specs
        .iter()
        .zip(handles)
        .map(|(s, h)| BackendInfo {
            source: s.source.clone(),
            spec: s.to_string(),
            version: h.version(),
        })
        .collect()
}

fn load_groups(path: &Path) -> Result<Vec<ApiGroup>> {
    let f = fs::File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    read_groups(BufReader::new(f)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Plans every group; groups without two runnable members are skipped.
fn plan_groups(groups: &[ApiGroup], handles: &[BackendHandle]) -> (Vec<CallPlan>, Vec<(String, String)>) {
    let mut plans = Vec::new();
    let mut skipped = Vec::new();
    for g in groups {
        match CallPlan::build(g, handles).and_then(|p| p.roles().map(|_| p)) {
            Ok(p) => plans.push(p),
            Err(e) => {
                eprintln!("warning: skipping group {}: {e}", g.group_id);
                skipped.push((g.group_id.clone(), e));
            }
        }
    }
    (plans, skipped)
}

fn cmd_fuzz(a: FuzzArgs) -> Result<()> {
    let started = report::unix_now();
    let s = setup(&a.backend)?;
    let groups = load_groups(&a.groups)?;
    let handles = build_handles(&s.specs, &s.config)?;
    let backends = backend_info(&s.specs, &handles);
    let (plans, skipped) = plan_groups(&groups, &handles);
    drop(handles);

    let results = fuzz::run_campaigns(
        &plans,
        || s.specs.iter().map(|b| b.build(s.config.timeout())).collect(),
        &s.config,
        a.jobs,
    );

    let mut findings: Vec<&Finding> = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let reports: Vec<_> = plans.iter().zip(&results).collect();
    for (plan, r) in &reports {
        match r {
            Ok(rep) => {
                findings.extend(rep.findings.iter());
                summaries.push(GroupSummary::from_report(rep));
            }
            Err(e) => {
                failures.push(format!("{}: {e}", plan.group_id));
                summaries.push(GroupSummary::skipped(&plan.group_id, e));
            }
        }
    }
    for (g, why) in &skipped {
        summaries.push(GroupSummary::skipped(g, why));
    }

    create_out(&a.out)?;
    let mut buf = Vec::new();
    report::write_json_lines(&mut buf, &findings)?;
    write_file(&a.out.join("findings.jsonl"), &buf)?;
    let mut buf = Vec::new();
    report::write_json_lines(&mut buf, &summaries)?;
    write_file(&a.out.join("summary.jsonl"), &buf)?;
    let text = report::fuzz_summary_text(&summaries);
    write_file(&a.out.join("summary.txt"), text.as_bytes())?;
    let mut inputs = s.inputs.clone();
    inputs.push(FileDigest::of(&a.groups)?);
    write_manifest(&a.out, "fuzz", s.config.seed, Some(s.config.clone()), inputs, backends, started)?;
    print!("{text}");
    if !failures.is_empty() {
        bail!("backend failure in {} group(s): {}", failures.len(), failures.join("; "));
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let started = report::unix_now();
    let s = setup(&a.backend)?;
    let groups = load_groups(&a.groups)?;
    let mut handles = build_handles(&s.specs, &s.config)?;
    let backends = backend_info(&s.specs, &handles);
    let (plans, skipped) = plan_groups(&groups, &handles);
    let mut reports = Vec::new();
    for p in &plans {
        reports.push(fuzz::verify_group(p, &mut handles, &s.config).map_err(|e| anyhow!(e))?);
    }
    let text = report::verify_summary_text(&reports, &skipped);
    if let Some(out) = &a.out {
        create_out(out)?;
        let mut buf = Vec::new();
        report::write_json_lines(&mut buf, &reports)?;
        write_file(&out.join("verify.jsonl"), &buf)?;
        write_file(&out.join("verify.txt"), text.as_bytes())?;
        let mut inputs = s.inputs.clone();
        inputs.push(FileDigest::of(&a.groups)?);
        write_manifest(out, "verify", s.config.seed, Some(s.config.clone()), inputs, backends, started)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let s = setup(&a.backend)?;
    let text = fs::read_to_string(&a.findings).map_err(|e| usage(format!("{}: {e}", a.findings.display())))?;
    let findings = report::read_findings(&text).map_err(usage)?;
    let selected: Vec<&Finding> = match a.index {
        Some(i) => vec![findings
            .get(i)
            .ok_or_else(|| usage(format!("no finding at index {i}; file has {}", findings.len())))?],
        None => findings.iter().collect(),
    };
    let mut handles = build_handles(&s.specs, &s.config)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for f in selected {
        let r = fuzz::replay(f, &mut handles, s.config.inconsistency_threshold).map_err(usage)?;
        writeln!(out, "finding {} ({}) in {}", &f.fingerprint[..12], f.oracle, f.group_id)?;
        for o in &r.outcomes {
            let detail = match (&o.error_text, o.outputs.first()) {
                (Some(e), _) => e.clone(),
                (None, Some(v)) => truncate(&v.to_json().to_string(), 120),
                (None, None) => String::new(),
            };
            writeln!(out, "  {:<12} {:?}{} {}", o.backend_id, o.status, if o.nan_present { " nan" } else { "" }, detail)?;
        }
        match (r.reproduced, r.observed) {
            (true, _) => writeln!(out, "  verdict: reproduced {}", f.oracle)?,
            (false, Some(o)) => writeln!(out, "  verdict: not reproduced (observed {o})")?,
            (false, None) => writeln!(out, "  verdict: not reproduced")?,
        }
    }
    Ok(())
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        let mut end = n;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}
