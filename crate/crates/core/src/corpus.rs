//! MBPP-style task corpora.
//!
//! A corpus file is line-delimited JSON, one task per line, using the public
//! MBPP field names (`task_id`, `text`, `code`, `test_list`,
//! `test_setup_code`, `challenge_test_list`).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record ({field}): {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}:{line}: duplicate task_id {task_id} (first seen on line {first_line})")]
    DuplicateTask {
        path: PathBuf,
        line: usize,
        first_line: usize,
        task_id: u64,
    },
    #[error("requested {k} exemplars from a corpus of {size} tasks; k must be smaller than the corpus")]
    TooManyExemplars { k: usize, size: usize },
}

/// One task: the reference solution is the system under test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub text: String,
    pub code: String,
    pub test_list: Vec<String>,
    #[serde(default)]
    pub test_setup_code: String,
    #[serde(default)]
    pub challenge_test_list: Vec<String>,
}

impl TaskRecord {
    /// Checks the per-record invariants. Returns the offending field name.
    fn check(&self) -> Result<(), (&'static str, &'static str)> {
        if self.task_id == 0 {
            return Err(("task_id", "must be a positive integer"));
        }
        if self.code.trim().is_empty() {
            return Err(("code", "must be non-empty"));
        }
        if self.test_list.is_empty() {
            return Err(("test_list", "must be non-empty"));
        }
        Ok(())
    }
}

const REQUIRED_FIELDS: [&str; 4] = ["task_id", "text", "code", "test_list"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub path: PathBuf,
    pub tasks: Vec<TaskRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task for a global execution index, wrapping around the corpus.
    pub fn task_for_execution(&self, execution: u64) -> &TaskRecord {
        let n = self.tasks.len() as u64;
        &self.tasks[(execution % n) as usize]
    }
}

/// Loads and validates a corpus, keeping file order and truncating to `limit`.
pub fn load_corpus(path: &Path, limit: Option<usize>) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let tasks = parse_corpus(path, &raw, limit)?;
    log::info!("loaded {} tasks from {}", tasks.len(), path.display());
    Ok(Corpus {
        path: path.to_path_buf(),
        tasks,
    })
}

fn parse_corpus(path: &Path, raw: &str, limit: Option<usize>) -> Result<Vec<TaskRecord>, CorpusError> {
    let malformed = |line: usize, field: &str, reason: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        reason,
    };

    let mut tasks = Vec::new();
    let mut seen: std::collections::HashMap<u64, usize> = Default::default();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if limit.is_some_and(|l| tasks.len() >= l) {
            break;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed(lineno, "<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(lineno, "<record>", "expected a JSON object".into()))?;
        if let Some(missing) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(malformed(lineno, missing, "missing field".into()));
        }
        let task: TaskRecord = serde_json::from_value(value.clone()).map_err(|e| {
            // Name the field whose type is wrong when serde does not say.
            let field = REQUIRED_FIELDS
                .iter()
                .chain(["test_setup_code", "challenge_test_list"].iter())
                .find(|f| e.to_string().contains(**f) || field_has_wrong_type(obj, f))
                .copied()
                .unwrap_or("<record>");
            malformed(lineno, field, e.to_string())
        })?;
        task.check()
            .map_err(|(field, reason)| malformed(lineno, field, reason.into()))?;
        if let Some(&first_line) = seen.get(&task.task_id) {
            return Err(CorpusError::DuplicateTask {
                path: path.to_path_buf(),
                line: lineno,
                first_line,
                task_id: task.task_id,
            });
        }
        seen.insert(task.task_id, lineno);
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(malformed(0, "<file>", "corpus contains no records".into()));
    }
    Ok(tasks)
}

fn field_has_wrong_type(obj: &serde_json::Map<String, serde_json::Value>, field: &str) -> bool {
    use serde_json::Value;
    match (field, obj.get(field)) {
        ("task_id", Some(v)) => !v.is_u64(),
        ("text" | "code" | "test_setup_code", Some(v)) => !matches!(v, Value::String(_)),
        ("test_list" | "challenge_test_list", Some(Value::Array(items))) => items.iter().any(|i| !i.is_string()),
        ("test_list" | "challenge_test_list", Some(_)) => true,
        _ => false,
    }
}

/// Serializes tasks back to the line-delimited corpus format.
pub fn write_corpus(tasks: &[TaskRecord]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task records always serialize"));
        out.push('\n');
    }
    out
}

/// Seeded exemplar draw for few-shot prompting. Never returns `exclude_id`.
pub fn select_fewshot_exemplars(
    corpus: &[TaskRecord],
    k: usize,
    exclude_id: u64,
    seed: u64,
) -> Result<Vec<TaskRecord>, CorpusError> {
    if k == 0 || k >= corpus.len() {
        return Err(CorpusError::TooManyExemplars { k, size: corpus.len() });
    }
    let pool: Vec<&TaskRecord> = corpus.iter().filter(|t| t.task_id != exclude_id).collect();
    if pool.len() < k {
        return Err(CorpusError::TooManyExemplars { k, size: corpus.len() });
    }
    // Mix the excluded id into the stream so each task gets its own draw.
    let stream = seed ^ exclude_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    Ok(pool.choose_multiple(&mut rng, k).map(|t| (*t).clone()).collect())
}

/// Distinct task ids, for validation output.
pub fn task_ids(tasks: &[TaskRecord]) -> HashSet<u64> {
    tasks.iter().map(|t| t.task_id).collect()
}
