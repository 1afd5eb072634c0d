//! Running generated test scripts.
//!
//! The real executor is an external coverage shim invoked as
//! `<cmd> --task-file <path> --script-file <path> --timeout <s>`, which prints
//! one JSON [`CoverageOutcome`] line on stdout. [`RecordedSandbox`] replays
//! outcomes from a fixture file instead, for runs without the shim.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::corpus::TaskRecord;
use crate::strategy::{Observation, StrategyId};

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to launch coverage shim {command:?}: {reason}")]
    Launch { command: String, reason: String },
    #[error("coverage shim exited with {status}: {stderr}")]
    ShimFailed { status: String, stderr: String },
    #[error("coverage shim output is not a verdict line: {0}")]
    BadVerdict(String),
    #[error("invalid coverage outcome: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {reason}")]
    Fixture { path: PathBuf, line: usize, reason: String },
    #[error("no recorded outcome for task {task_id} ({strategy}) and no default")]
    NoRecord { task_id: u64, strategy: StrategyId },
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Verdict for one generated test script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageOutcome {
    pub task_id: u64,
    pub syntax_ok: bool,
    pub tests_run: u32,
    pub tests_passed: u32,
    pub tests_failed: u32,
    pub tests_errored: u32,
    pub coverage_percent: f64,
    pub duration_s: f64,
    pub error: Option<String>,
}

impl CoverageOutcome {
    pub const NO_SCRIPT: &'static str = "no test script extracted";

    /// Outcome recorded when a completion held no extractable script.
    pub fn no_script(task_id: u64) -> Self {
        CoverageOutcome {
            task_id,
            syntax_ok: false,
            tests_run: 0,
            tests_passed: 0,
            tests_failed: 0,
            tests_errored: 0,
            coverage_percent: 0.0,
            duration_s: 0.0,
            error: Some(Self::NO_SCRIPT.to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let sum = self.tests_passed + self.tests_failed + self.tests_errored;
        if self.tests_run != sum {
            return Err(SandboxError::Invalid(format!(
                "tests_run {} != passed + failed + errored ({sum})",
                self.tests_run
            )));
        }
        if !(0.0..=100.0).contains(&self.coverage_percent) {
            return Err(SandboxError::Invalid(format!(
                "coverage_percent {} outside [0, 100]",
                self.coverage_percent
            )));
        }
        if !self.syntax_ok && (self.tests_run != 0 || self.coverage_percent != 0.0) {
            return Err(SandboxError::Invalid(
                "syntax_ok = false requires tests_run = 0 and coverage_percent = 0".into(),
            ));
        }
        if self.duration_s < 0.0 || !self.duration_s.is_finite() {
            return Err(SandboxError::Invalid(format!("duration_s {}", self.duration_s)));
        }
        Ok(())
    }

    pub fn all_passed(&self) -> bool {
        self.syntax_ok && self.error.is_none() && self.tests_run > 0 && self.tests_run == self.tests_passed
    }

    /// Feedback text for the next ReAct round.
    pub fn observation(&self) -> Observation {
        if self.all_passed() {
            return Observation::passed();
        }
        let mut text = if !self.syntax_ok {
            "the script could not be parsed".to_string()
        } else {
            format!(
                "{} tests run: {} passed, {} failed, {} errored; statement coverage {:.1}%",
                self.tests_run, self.tests_passed, self.tests_failed, self.tests_errored, self.coverage_percent
            )
        };
        if let Some(e) = &self.error {
            text.push_str(&format!("\nerror: {e}"));
        }
        Observation::failed(text)
    }

    /// Single-line JSON with exactly the outcome fields.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("outcomes always serialize")
    }
}

/// Writes the outcome as one JSON line and nothing else.
pub fn emit_report(outcome: &CoverageOutcome, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", outcome.to_json_line())
}

/// Parses the last non-empty stdout line of the shim.
pub fn parse_verdict(stdout: &str) -> Result<CoverageOutcome, SandboxError> {
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| SandboxError::BadVerdict("empty output".into()))?;
    let outcome: CoverageOutcome =
        serde_json::from_str(line).map_err(|e| SandboxError::BadVerdict(format!("{e}: {line}")))?;
    outcome.validate()?;
    Ok(outcome)
}

pub trait Sandbox: Send + Sync {
    fn execute(&self, task: &TaskRecord, strategy: StrategyId, script: &str) -> Result<CoverageOutcome, SandboxError>;

    fn describe(&self) -> String;
}

/// Subprocess executor around the external coverage shim.
#[derive(Debug, Clone)]
pub struct ShimSandbox {
    pub command: Vec<String>,
    pub timeout_s: f64,
    pub run_challenge_tests: bool,
    /// Extra wall time granted past the shim's own timeout before it is killed.
    pub kill_grace: Duration,
}

impl ShimSandbox {
    pub fn new(command: Vec<String>, timeout_s: f64) -> Self {
        ShimSandbox {
            command,
            timeout_s,
            run_challenge_tests: false,
            kill_grace: Duration::from_secs(5),
        }
    }

    /// Checks the shim command can be spawned.
    pub fn probe(&self) -> Result<(), SandboxError> {
        let (prog, _) = self.split()?;
        Command::new(prog)
            .arg("--help")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|_| ())
            .map_err(|e| SandboxError::Launch {
                command: self.command.join(" "),
                reason: e.to_string(),
            })
    }

    fn split(&self) -> Result<(&str, &[String]), SandboxError> {
        match self.command.split_first() {
            Some((p, rest)) => Ok((p.as_str(), rest)),
            None => Err(SandboxError::Launch {
                command: String::new(),
                reason: "empty command".into(),
            }),
        }
    }
}

impl Sandbox for ShimSandbox {
    fn execute(&self, task: &TaskRecord, _strategy: StrategyId, script: &str) -> Result<CoverageOutcome, SandboxError> {
        let (prog, args) = self.split()?;
        let dir = tempfile::tempdir()?;
        let task_path = dir.path().join("task.json");
        let script_path = dir.path().join("test_generated.py");
        let mut shipped = task.clone();
        if !self.run_challenge_tests {
            shipped.challenge_test_list.clear();
        }
        fs::write(&task_path, serde_json::to_vec(&shipped).expect("task serializes"))?;
        fs::write(&script_path, script)?;

        let mut child = Command::new(prog)
            .args(args)
            .arg("--task-file")
            .arg(&task_path)
            .arg("--script-file")
            .arg(&script_path)
            .arg("--timeout")
            .arg(format!("{}", self.timeout_s))
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SandboxError::Launch {
                command: self.command.join(" "),
                reason: e.to_string(),
            })?;

        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });

        let limit = Duration::from_secs_f64(self.timeout_s.max(0.0)) + self.kill_grace;
        let status = match child.wait_timeout(limit)? {
            Some(status) => status,
            None => {
                // Grandchildren may keep the pipes open; the readers are left detached.
                let _ = child.kill();
                let _ = child.wait();
                let mut outcome = CoverageOutcome::no_script(task.task_id);
                outcome.syntax_ok = true;
                outcome.error = Some("timeout".into());
                outcome.duration_s = limit.as_secs_f64();
                return Ok(outcome);
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(SandboxError::ShimFailed {
                status: status.to_string(),
                stderr: stderr.trim().to_string(),
            });
        }
        let mut outcome = parse_verdict(&stdout)?;
        outcome.task_id = task.task_id;
        Ok(outcome)
    }

    fn describe(&self) -> String {
        format!("shim: {}", self.command.join(" "))
    }
}

/// One fixture line: an outcome plus optional match conditions.
#[derive(Debug, Clone, Deserialize)]
struct RecordedLine {
    #[serde(default)]
    task_id: Option<u64>,
    #[serde(default)]
    strategy: Option<String>,
    /// Matches only scripts containing this substring.
    #[serde(default, rename = "match")]
    contains: Option<String>,
    syntax_ok: bool,
    tests_run: u32,
    tests_passed: u32,
    tests_failed: u32,
    tests_errored: u32,
    coverage_percent: f64,
    #[serde(default)]
    duration_s: f64,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Clone)]
struct Recorded {
    task_id: Option<u64>,
    strategy: Option<StrategyId>,
    contains: Option<String>,
    outcome: CoverageOutcome,
}

impl Recorded {
    fn specificity(&self) -> usize {
        self.task_id.is_some() as usize + self.strategy.is_some() as usize + self.contains.is_some() as usize
    }

    fn matches(&self, task_id: u64, strategy: StrategyId, script: &str) -> bool {
        self.task_id.is_none_or(|t| t == task_id)
            && self.strategy.is_none_or(|s| s == strategy)
            && self.contains.as_deref().is_none_or(|m| script.contains(m))
    }
}

/// Replays recorded outcomes. The most specific matching line wins; earlier
/// lines win ties. A line with no conditions is the default.
#[derive(Debug, Clone)]
pub struct RecordedSandbox {
    source: PathBuf,
    records: Vec<Recorded>,
}

impl RecordedSandbox {
    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let raw = fs::read_to_string(path).map_err(|e| SandboxError::Fixture {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        Self::parse(path, &raw)
    }

    pub fn parse(path: &Path, raw: &str) -> Result<Self, SandboxError> {
        let fixture_err = |line: usize, reason: String| SandboxError::Fixture {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut records = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let r: RecordedLine = serde_json::from_str(line).map_err(|e| fixture_err(i + 1, e.to_string()))?;
            let strategy = r
                .strategy
                .as_deref()
                .map(str::parse::<StrategyId>)
                .transpose()
                .map_err(|e| fixture_err(i + 1, e.to_string()))?;
            let outcome = CoverageOutcome {
                task_id: r.task_id.unwrap_or(0),
                syntax_ok: r.syntax_ok,
                tests_run: r.tests_run,
                tests_passed: r.tests_passed,
                tests_failed: r.tests_failed,
                tests_errored: r.tests_errored,
                coverage_percent: r.coverage_percent,
                duration_s: r.duration_s,
                error: r.error,
            };
            outcome.validate().map_err(|e| fixture_err(i + 1, e.to_string()))?;
            records.push(Recorded {
                task_id: r.task_id,
                strategy,
                contains: r.contains,
                outcome,
            });
        }
        Ok(RecordedSandbox {
            source: path.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Sandbox for RecordedSandbox {
    fn execute(&self, task: &TaskRecord, strategy: StrategyId, script: &str) -> Result<CoverageOutcome, SandboxError> {
        let mut best: Option<&Recorded> = None;
        for r in self
            .records
            .iter()
            .filter(|r| r.matches(task.task_id, strategy, script))
        {
            if best.is_none_or(|b| r.specificity() > b.specificity()) {
                best = Some(r);
            }
        }
        let mut outcome = best.map(|r| r.outcome.clone()).ok_or(SandboxError::NoRecord {
            task_id: task.task_id,
            strategy,
        })?;
        outcome.task_id = task.task_id;
        Ok(outcome)
    }

    fn describe(&self) -> String {
        format!("recorded: {} ({} lines)", self.source.display(), self.records.len())
    }
}

/// Caches outcomes per script so a ReAct round and the final measurement
/// never run the same script twice.
pub struct MemoSandbox<'a> {
    inner: &'a dyn Sandbox,
    cache: Mutex<HashMap<(u64, String), CoverageOutcome>>,
}

impl<'a> MemoSandbox<'a> {
    pub fn new(inner: &'a dyn Sandbox) -> Self {
        MemoSandbox {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl Sandbox for MemoSandbox<'_> {
    fn execute(&self, task: &TaskRecord, strategy: StrategyId, script: &str) -> Result<CoverageOutcome, SandboxError> {
        let key = (task.task_id, script.to_string());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let out = self.inner.execute(task, strategy, script)?;
        self.cache.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::task;

    fn outcome(cov: f64) -> CoverageOutcome {
        CoverageOutcome {
            task_id: 1,
            syntax_ok: true,
            tests_run: 3,
            tests_passed: 2,
            tests_failed: 1,
            tests_errored: 0,
            coverage_percent: cov,
            duration_s: 0.2,
            error: None,
        }
    }

    #[test]
    fn report_is_one_parseable_line() {
        let mut buf = Vec::new();
        emit_report(&outcome(80.0), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1);
        assert!(s.contains("\"coverage_percent\":80.0"));
        let back = parse_verdict(&s).unwrap();
        assert_eq!(back, outcome(80.0));
    }

    #[test]
    fn report_with_error_has_non_null_error() {
        let mut o = outcome(10.0);
        o.error = Some("timeout".into());
        let v: serde_json::Value = serde_json::from_str(&o.to_json_line()).unwrap();
        assert_eq!(v["error"], "timeout");
        assert_eq!(v.as_object().unwrap().len(), 9);
    }

    #[test]
    fn invariants_enforced() {
        let mut o = outcome(50.0);
        o.tests_run = 4;
        assert!(o.validate().is_err());
        let mut o = outcome(50.0);
        o.syntax_ok = false;
        assert!(o.validate().is_err());
        assert!(outcome(100.5).validate().is_err());
        CoverageOutcome::no_script(3).validate().unwrap();
    }

    #[test]
    fn verdict_takes_last_line() {
        let out = format!("collecting...\n{}\n\n", outcome(40.0).to_json_line());
        assert_eq!(parse_verdict(&out).unwrap().coverage_percent, 40.0);
        assert!(parse_verdict("garbage").is_err());
    }

    #[test]
    fn observation_text() {
        let mut o = outcome(90.0);
        assert!(!o.observation().all_passed);
        assert!(o.observation().text.contains("1 failed"));
        o.tests_failed = 0;
        o.tests_passed = 3;
        assert_eq!(o.observation(), Observation::passed());
    }

    #[test]
    fn recorded_specificity() {
        let raw = r#"
{"syntax_ok": true, "tests_run": 1, "tests_passed": 1, "tests_failed": 0, "tests_errored": 0, "coverage_percent": 50.0}
{"task_id": 2, "syntax_ok": true, "tests_run": 1, "tests_passed": 1, "tests_failed": 0, "tests_errored": 0, "coverage_percent": 60.0}
{"task_id": 2, "strategy": "REACT", "match": "draft", "syntax_ok": true, "tests_run": 2, "tests_passed": 1, "tests_failed": 1, "tests_errored": 0, "coverage_percent": 70.0}
"#;
        let sb = RecordedSandbox::parse(Path::new("fx.jsonl"), raw).unwrap();
        let t1 = task(1);
        let t2 = task(2);
        let cov = |t: &TaskRecord, s, script| sb.execute(t, s, script).unwrap().coverage_percent;
        assert_eq!(cov(&t1, StrategyId::React, "draft"), 50.0);
        assert_eq!(cov(&t2, StrategyId::Cot, "draft"), 60.0);
        assert_eq!(cov(&t2, StrategyId::React, "# draft"), 70.0);
        assert_eq!(cov(&t2, StrategyId::React, "final"), 60.0);
        assert_eq!(sb.execute(&t2, StrategyId::React, "x").unwrap().task_id, 2);
    }

    #[test]
    fn recorded_without_default_errors() {
        let raw = r#"{"task_id": 2, "syntax_ok": true, "tests_run": 0, "tests_passed": 0, "tests_failed": 0, "tests_errored": 0, "coverage_percent": 0.0}"#;
        let sb = RecordedSandbox::parse(Path::new("fx.jsonl"), raw).unwrap();
        assert!(matches!(
            sb.execute(&task(3), StrategyId::Cot, "x"),
            Err(SandboxError::NoRecord { task_id: 3, .. })
        ));
    }

    #[test]
    fn recorded_rejects_invalid_lines() {
        let raw = r#"{"syntax_ok": false, "tests_run": 1, "tests_passed": 1, "tests_failed": 0, "tests_errored": 0, "coverage_percent": 0.0}"#;
        assert!(matches!(
            RecordedSandbox::parse(Path::new("fx.jsonl"), raw),
            Err(SandboxError::Fixture { line: 1, .. })
        ));
    }

    #[cfg(unix)]
    mod shim {
        use super::*;
        use std::os::unix::fs::PermissionsExt;

        fn fake_shim(dir: &Path, body: &str) -> Vec<String> {
            let p = dir.join("fake_shim.sh");
            fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
            fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
            vec![p.display().to_string()]
        }

        #[test]
        fn shim_receives_flags_and_files() {
            let dir = tempfile::tempdir().unwrap();
            // Echo a verdict whose coverage encodes whether both files exist.
            let cmd = fake_shim(
                dir.path(),
                r#"
while [ $# -gt 0 ]; do
  case "$1" in
    --task-file) TASK="$2"; shift 2;;
    --script-file) SCRIPT="$2"; shift 2;;
    --timeout) TO="$2"; shift 2;;
    *) shift;;
  esac
done
grep -q '"task_id":7' "$TASK" || exit 3
grep -q 'assert' "$SCRIPT" || exit 4
[ "$TO" = "30" ] || exit 5
echo 'noise on stdout'
echo '{"task_id":7,"syntax_ok":true,"tests_run":2,"tests_passed":2,"tests_failed":0,"tests_errored":0,"coverage_percent":80.0,"duration_s":0.1,"error":null}'
"#,
            );
            let sb = ShimSandbox::new(cmd, 30.0);
            let out = sb.execute(&task(7), StrategyId::Zeroshot, "assert True\n").unwrap();
            assert_eq!(out.coverage_percent, 80.0);
            assert!(out.all_passed());
        }

        #[test]
        fn shim_malfunction_is_error() {
            let dir = tempfile::tempdir().unwrap();
            let cmd = fake_shim(dir.path(), "echo boom >&2; exit 9");
            let err = ShimSandbox::new(cmd, 30.0)
                .execute(&task(1), StrategyId::Zeroshot, "assert True")
                .unwrap_err();
            assert!(matches!(err, SandboxError::ShimFailed { stderr, .. } if stderr == "boom"));
        }

        #[test]
        fn hung_shim_is_killed_as_timeout() {
            let dir = tempfile::tempdir().unwrap();
            let cmd = fake_shim(dir.path(), "sleep 30");
            let mut sb = ShimSandbox::new(cmd, 0.0);
            sb.kill_grace = Duration::from_millis(200);
            let started = std::time::Instant::now();
            let out = sb.execute(&task(1), StrategyId::Zeroshot, "assert True").unwrap();
            assert_eq!(out.error.as_deref(), Some("timeout"));
            assert_eq!(out.coverage_percent, 0.0);
            assert!(started.elapsed() < Duration::from_secs(10));
        }
    }
}
