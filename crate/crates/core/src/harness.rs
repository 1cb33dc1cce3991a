//! Corpus execution, detection tables, forgery statistics and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::interp::{prepare, run, run_unoptimized_oracle, ExecError, ExecResult, Limits, Stats, Verdict};
use crate::memspace::RegionLayout;
use crate::miniir::load;
use crate::optpasses::{count_checks, OptLevel};
use crate::pacore::AddressConfig;
use crate::runtime::{Runtime, ViolationKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("no corpus files in {0}")]
    EmptyCorpus(PathBuf),
    #[error("bad corpus file name {0:?}: {1}")]
    BadName(String, &'static str),
    #[error("trial count {trials} is below the minimum {min} for p = {p}")]
    TooFewTrials { trials: u64, min: u64, p: u32 },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// Completes without a report.
    Clean,
    /// Reports a violation, of the given kind when one is named.
    Detect(Option<ViolationKind>),
    /// A known gap: a bad program that must run to completion undetected.
    Miss,
}

impl Expectation {
    pub fn describe(self) -> String {
        match self {
            Expectation::Clean => "clean".into(),
            Expectation::Detect(None) => "detect".into(),
            Expectation::Detect(Some(k)) => k.name().into(),
            Expectation::Miss => "miss".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub file_name: String,
    pub cwe: u32,
    pub name: String,
    pub variant: Variant,
    pub expect: Expectation,
}

/// Parses `cwe<k>_<name>_{good|bad}[_expect=<kind|miss>].ir`.
pub fn parse_corpus_name(file_name: &str) -> Result<(u32, String, Variant, Expectation), HarnessError> {
    let bad = |why| HarnessError::BadName(file_name.to_string(), why);
    let stem = file_name.strip_suffix(".ir").ok_or_else(|| bad("missing .ir suffix"))?;
    let rest = stem.strip_prefix("cwe").ok_or_else(|| bad("missing cwe prefix"))?;
    let (num, rest) = rest.split_once('_').ok_or_else(|| bad("missing name"))?;
    let cwe = num.parse().map_err(|_| bad("CWE number is not numeric"))?;
    let (rest, tag) = match rest.rsplit_once("_expect=") {
        Some((r, t)) => (r, Some(t)),
        None => (rest, None),
    };
    let (name, variant) = rest.rsplit_once('_').ok_or_else(|| bad("missing good/bad variant"))?;
    if name.is_empty() {
        return Err(bad("empty name"));
    }
    let variant = match variant {
        "good" => Variant::Good,
        "bad" => Variant::Bad,
        _ => return Err(bad("variant must be good or bad")),
    };
    let expect = match (variant, tag) {
        (Variant::Good, None) => Expectation::Clean,
        (Variant::Good, Some(_)) => return Err(bad("good variants take no expectation")),
        (Variant::Bad, None) => Expectation::Detect(None),
        (Variant::Bad, Some("miss")) => Expectation::Miss,
        (Variant::Bad, Some(k)) => {
            Expectation::Detect(Some(ViolationKind::from_name(k).ok_or_else(|| bad("unknown violation kind"))?))
        }
    };
    Ok((cwe, name.to_string(), variant, expect))
}

/// All `.ir` files of a corpus directory, sorted by name.
pub fn discover(dir: &Path) -> Result<Vec<CorpusEntry>, HarnessError> {
    let rd = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(dir.to_path_buf(), e))?;
    let mut entries = Vec::new();
    for item in rd {
        let item = item.map_err(|e| HarnessError::Io(dir.to_path_buf(), e))?;
        let file_name = item.file_name().to_string_lossy().into_owned();
        if !file_name.ends_with(".ir") {
            continue;
        }
        let (cwe, name, variant, expect) = parse_corpus_name(&file_name)?;
        entries.push(CorpusEntry {
            path: item.path(),
            file_name,
            cwe,
            name,
            variant,
            expect,
        });
    }
    if entries.is_empty() {
        return Err(HarnessError::EmptyCorpus(dir.to_path_buf()));
    }
    entries.sort_by(|a, b| a.file_name.cmp(&b.file_name));
    Ok(entries)
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusOptions {
    pub cfg: AddressConfig,
    pub seed: u64,
    pub limits: Limits,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            cfg: AddressConfig::default(),
            seed: 1,
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CheckCounts {
    pub static_full: usize,
    pub static_fast: usize,
    pub dynamic_full: u64,
    pub dynamic_fast: u64,
}

impl CheckCounts {
    fn new(program: &crate::miniir::Program, stats: &Stats) -> Self {
        let (static_full, static_fast) = count_checks(program);
        CheckCounts {
            static_full,
            static_fast,
            dynamic_full: stats.checks_full,
            dynamic_fast: stats.checks_fast,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FileOutcome {
    pub entry: CorpusEntry,
    /// Verdict with all optimizations enabled.
    pub verdict: Verdict,
    pub unoptimized: CheckCounts,
    pub optimized: CheckCounts,
    pub opts_agree: bool,
    pub oracle_agrees: bool,
    pub problems: Vec<String>,
}

impl FileOutcome {
    pub fn detected(&self) -> bool {
        self.verdict.violation().is_some()
    }
}

fn same_verdict(a: &Verdict, b: &Verdict) -> bool {
    match (a, b) {
        (Verdict::Completed(x), Verdict::Completed(y)) => x == y,
        (Verdict::Violation(x), Verdict::Violation(y)) => x.location() == y.location(),
        _ => false,
    }
}

pub fn describe_verdict(v: &Verdict) -> String {
    match v {
        Verdict::Completed(code) => format!("completed({code})"),
        Verdict::Violation(r) => format!(
            "{} in @{} at {}",
            r.kind.name(),
            r.function,
            r.inst_index.map_or("?".to_string(), |i| format!("#{i}"))
        ),
    }
}

fn expectation_met(expect: Expectation, v: &Verdict) -> bool {
    match (expect, v) {
        (Expectation::Clean | Expectation::Miss, Verdict::Completed(_)) => true,
        (Expectation::Detect(None), Verdict::Violation(_)) => true,
        (Expectation::Detect(Some(k)), Verdict::Violation(r)) => r.kind == k,
        _ => false,
    }
}

/// Runs one corpus file three ways: unoptimized, fully optimized, and
/// through the per-byte oracle.
pub fn run_file(entry: &CorpusEntry, opts: &CorpusOptions) -> Result<FileOutcome, HarnessError> {
    let text = std::fs::read_to_string(&entry.path).map_err(|e| HarnessError::Io(entry.path.clone(), e))?;
    let source = load(&text).map_err(ExecError::from)?;
    let plain = prepare(&source, OptLevel::None)?;
    let tuned = prepare(&source, OptLevel::All)?;
    let none = run(&plain, opts.cfg, opts.seed, opts.limits)?;
    let all = run(&tuned, opts.cfg, opts.seed, opts.limits)?;
    let oracle = run_unoptimized_oracle(&source, opts.cfg, opts.seed, opts.limits)?;

    let opts_agree = same_verdict(&none.verdict, &all.verdict);
    let oracle_agrees = same_verdict(&oracle.verdict, &all.verdict);
    let mut problems = Vec::new();
    if !expectation_met(entry.expect, &all.verdict) {
        let what = match entry.variant {
            Variant::Good => "false positive",
            Variant::Bad => "expectation not met",
        };
        problems.push(format!(
            "{what}: expected {}, got {}",
            entry.expect.describe(),
            describe_verdict(&all.verdict)
        ));
    }
    if !opts_agree {
        problems.push(format!(
            "optimization changed the verdict: {} unoptimized, {} optimized",
            describe_verdict(&none.verdict),
            describe_verdict(&all.verdict)
        ));
    }
    if !oracle_agrees {
        problems.push(format!("oracle disagrees: {}", describe_verdict(&oracle.verdict)));
    }
    if all.stats.checks_full > none.stats.checks_full {
        problems.push(format!(
            "optimized run executed more full checks ({} > {})",
            all.stats.checks_full, none.stats.checks_full
        ));
    }
    Ok(FileOutcome {
        entry: entry.clone(),
        unoptimized: CheckCounts::new(&plain, &none.stats),
        optimized: CheckCounts::new(&tuned, &all.stats),
        verdict: all.verdict,
        opts_agree,
        oracle_agrees,
        problems,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryRow {
    pub cwe: u32,
    /// Bad variants expected to be detected.
    pub bad: usize,
    pub detected: usize,
    /// Bad variants documenting a known gap.
    pub expected_misses: usize,
    pub good: usize,
    pub false_positives: usize,
}

impl CategoryRow {
    /// Detected over expected-detectable bad variants, in percent.
    pub fn prevention_ratio(&self) -> f64 {
        if self.bad == 0 {
            100.0
        } else {
            100.0 * self.detected as f64 / self.bad as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub files: Vec<FileOutcome>,
    /// Files that could not be executed at all.
    pub errors: Vec<(String, String)>,
}

impl CorpusReport {
    pub fn categories(&self) -> Vec<CategoryRow> {
        let mut rows: BTreeMap<u32, CategoryRow> = BTreeMap::new();
        for f in &self.files {
            let row = rows.entry(f.entry.cwe).or_insert(CategoryRow {
                cwe: f.entry.cwe,
                ..CategoryRow::default()
            });
            match (f.entry.variant, f.entry.expect) {
                (Variant::Good, _) => {
                    row.good += 1;
                    row.false_positives += usize::from(f.detected());
                }
                (Variant::Bad, Expectation::Miss) => row.expected_misses += 1,
                (Variant::Bad, _) => {
                    row.bad += 1;
                    row.detected += usize::from(f.detected());
                }
            }
        }
        rows.into_values().collect()
    }

    pub fn false_positives(&self) -> usize {
        self.categories().iter().map(|r| r.false_positives).sum()
    }

    /// Every unmet expectation, parity failure or execution error, with the
    /// file it came from.
    pub fn mismatches(&self) -> Vec<String> {
        let mut out: Vec<String> = self.errors.iter().map(|(f, e)| format!("{f}: {e}")).collect();
        for f in &self.files {
            out.extend(f.problems.iter().map(|p| format!("{}: {p}", f.entry.file_name)));
        }
        out
    }

    pub fn all_met(&self) -> bool {
        self.mismatches().is_empty()
    }

    pub fn render_detection_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>4} {:>9} {:>8} {:>5} {:>5} {:>8}", "CWE", "bad", "detected", "ratio", "miss", "good", "false+");
        for r in self.categories() {
            let _ = writeln!(
                s,
                "{:<6} {:>4} {:>9} {:>7.1}% {:>5} {:>5} {:>8}",
                r.cwe,
                r.bad,
                r.detected,
                r.prevention_ratio(),
                r.expected_misses,
                r.good,
                r.false_positives
            );
        }
        s
    }

    pub fn render_check_table(&self) -> String {
        let mut s = String::new();
        let width = self.files.iter().map(|f| f.entry.file_name.len()).max().unwrap_or(4);
        let _ = writeln!(
            s,
            "{:<width$}  {:>11} {:>11} {:>12} {:>12} {:>12}",
            "file", "static none", "static all", "dyn.full none", "dyn.full all", "dyn.fast all"
        );
        for f in &self.files {
            let _ = writeln!(
                s,
                "{:<width$}  {:>11} {:>6}+{:<4} {:>12} {:>12} {:>12}",
                f.entry.file_name,
                f.unoptimized.static_full,
                f.optimized.static_full,
                f.optimized.static_fast,
                f.unoptimized.dynamic_full,
                f.optimized.dynamic_full,
                f.optimized.dynamic_fast
            );
        }
        s
    }

    pub fn to_json(&self) -> CorpusJson {
        CorpusJson {
            categories: self.categories(),
            false_positives: self.false_positives(),
            mismatches: self.mismatches(),
            files: self
                .files
                .iter()
                .map(|f| FileJson {
                    file: f.entry.file_name.clone(),
                    cwe: f.entry.cwe,
                    variant: f.entry.variant,
                    expect: f.entry.expect.describe(),
                    verdict: describe_verdict(&f.verdict),
                    unoptimized: f.unoptimized,
                    optimized: f.optimized,
                    opts_agree: f.opts_agree,
                    oracle_agrees: f.oracle_agrees,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FileJson {
    pub file: String,
    pub cwe: u32,
    pub variant: Variant,
    pub expect: String,
    pub verdict: String,
    pub unoptimized: CheckCounts,
    pub optimized: CheckCounts,
    pub opts_agree: bool,
    pub oracle_agrees: bool,
}

#[derive(Debug, Serialize)]
pub struct CorpusJson {
    pub categories: Vec<CategoryRow>,
    pub false_positives: usize,
    pub mismatches: Vec<String>,
    pub files: Vec<FileJson>,
}

/// Runs every file of `dir` in parallel. Each execution owns its state.
pub fn run_corpus(dir: &Path, opts: &CorpusOptions) -> Result<CorpusReport, HarnessError> {
    let entries = discover(dir)?;
    let results: Vec<_> = entries.par_iter().map(|e| (e, run_file(e, opts))).collect();
    let mut report = CorpusReport {
        files: Vec::new(),
        errors: Vec::new(),
    };
    for (e, r) in results {
        match r {
            Ok(outcome) => report.files.push(outcome),
            Err(err) => report.errors.push((e.file_name.clone(), err.to_string())),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollideStats {
    pub trials: u64,
    pub successes: u64,
    pub p: u32,
    pub rate: f64,
    pub expected: f64,
    pub z: f64,
}

/// Smallest accepted trial count for PAC width `p`.
pub fn min_trials(p: u32) -> u64 {
    10u64 << p
}

/// Allocates one object and authenticates `trials` copies of its pointer
/// carrying uniformly random PAC fields against it.
pub fn collide(trials: u64, cfg: AddressConfig, seed: u64) -> Result<CollideStats, HarnessError> {
    let p = cfg.pac_bits();
    if trials == 0 || trials < min_trials(p) {
        return Err(HarnessError::TooFewTrials {
            trials,
            min: min_trials(p),
            p,
        });
    }
    let mut rt = Runtime::new(cfg, RegionLayout::default(), seed).map_err(ExecError::from)?;
    let target = rt.protected_malloc(16).map_err(ExecError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut successes = 0u64;
    for _ in 0..trials {
        let forged = cfg.with_pac_field(target, rng.gen());
        if cfg.non_address_bits(rt.authenticate(forged)) == 0 {
            successes += 1;
        }
    }
    let q = 1.0 / (1u64 << p) as f64;
    let n = trials as f64;
    let sigma = (n * q * (1.0 - q)).sqrt();
    Ok(CollideStats {
        trials,
        successes,
        p,
        rate: successes as f64 / n,
        expected: q,
        z: (successes as f64 - n * q) / sigma,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfigJson {
    pub n: u32,
    pub p: u32,
    pub seed: u64,
    pub opts: String,
}

/// Machine-readable result of a single run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub verdict: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_value: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inst_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointer_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub found_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub stats: Stats,
    pub config: RunConfigJson,
}

impl RunReport {
    pub fn new(result: &ExecResult, cfg: &AddressConfig, seed: u64, opts: &str) -> Self {
        let mut r = RunReport {
            verdict: "Completed",
            exit_value: None,
            kind: None,
            function: None,
            inst_index: None,
            pointer_hex: None,
            found_id: None,
            message: None,
            stats: result.stats,
            config: RunConfigJson {
                n: cfg.va_bits(),
                p: cfg.pac_bits(),
                seed,
                opts: opts.to_string(),
            },
        };
        match &result.verdict {
            Verdict::Completed(code) => r.exit_value = Some(*code),
            Verdict::Violation(v) => {
                r.verdict = "Violation";
                r.kind = Some(v.kind.name());
                r.function = Some(v.function.clone());
                r.inst_index = v.inst_index;
                r.pointer_hex = Some(format!("{:#018x}", v.pointer.0));
                r.found_id = Some(v.found_id.0);
                r.message = Some(v.message.clone());
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_names() {
        let (cwe, name, v, e) = parse_corpus_name("cwe416_reuse_after_realloc_bad_expect=UseAfterFree.ir").unwrap();
        assert_eq!((cwe, name.as_str(), v), (416, "reuse_after_realloc", Variant::Bad));
        assert_eq!(e, Expectation::Detect(Some(ViolationKind::UseAfterFree)));
        let (_, name, v, e) = parse_corpus_name("cwe121_struct_member_bad_expect=miss.ir").unwrap();
        assert_eq!((name.as_str(), v, e), ("struct_member", Variant::Bad, Expectation::Miss));
        assert_eq!(parse_corpus_name("cwe122_a_good.ir").unwrap().3, Expectation::Clean);
        assert_eq!(parse_corpus_name("cwe122_a_bad.ir").unwrap().3, Expectation::Detect(None));
        for bad in [
            "cwe12_x_good.txt",
            "x_good.ir",
            "cwe12_good.ir",
            "cweX_a_good.ir",
            "cwe1_a_ugly.ir",
            "cwe1_a_good_expect=miss.ir",
            "cwe1_a_bad_expect=Nonsense.ir",
        ] {
            assert!(parse_corpus_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = std::env::temp_dir().join(format!("pacsan-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        assert!(matches!(discover(&dir), Err(HarnessError::EmptyCorpus(_))));
        std::fs::remove_dir(&dir).unwrap();
    }

    #[test]
    fn collide_rejects_small_trial_counts() {
        let cfg = AddressConfig::new(52).unwrap();
        assert!(collide(0, cfg, 1).is_err());
        assert!(collide(10 * 2048 - 1, cfg, 1).is_err());
        let s = collide(10 * 2048, cfg, 1).unwrap();
        assert_eq!(s.p, 11);
        assert!(s.z.abs() < 6.0);
    }
}
