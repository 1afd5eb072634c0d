//! Consolidation of batch logs and coverage records into summaries.

mod plots;
mod summary;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::meter::{read_log, BatchMeasurement, LogError};
use crate::metrics::{
    effective_coverage, normalize_coverage, rel_close, IdentityViolation, MetricsError, PrimaryAggregate,
};
use crate::sandbox::CoverageOutcome;
use crate::strategy::StrategyId;

pub use plots::{emit_plot_data, Figure, PlotFile};
pub use summary::{
    emit_summary, format_sig, parse_summary_csv, ReportContext, SqMode, SummaryFormat, SUMMARY_FIXED_COLUMNS,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    CoverageLine { path: PathBuf, line: usize, reason: String },
    #[error("no batch logs to consolidate")]
    EmptyInput,
    #[error("duplicate batch {key} in {first} and {second}")]
    DuplicateBatch {
        key: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("duplicate coverage record {key} in {first} and {second}")]
    DuplicateRecord {
        key: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{path}: batch {batch_id}: {reason}")]
    Inconsistent {
        path: PathBuf,
        batch_id: u32,
        reason: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("summary aborted: {0}")]
    Identity(#[from] IdentityViolation),
    #[error("unknown figure {0:?}; expected one of {1}")]
    UnknownFigure(String, String),
    #[error("summary csv line {line}: {reason}")]
    SummaryParse { line: usize, reason: String },
}

/// File-name stem shared by a pair's batch log, coverage file and trace.
pub fn pair_stem(model: &str, strategy: StrategyId) -> String {
    let slug: String = model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{slug}__{}", strategy.dir_name())
}

/// One execution's verdict tagged with where it ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub model: String,
    pub strategy: StrategyId,
    pub batch_id: u32,
    /// Zero-based execution index within the batch.
    pub execution: u32,
    #[serde(flatten)]
    pub outcome: CoverageOutcome,
}

impl CoverageRecord {
    fn key(&self) -> String {
        format!(
            "({}, {}, batch {}, execution {})",
            self.model, self.strategy, self.batch_id, self.execution
        )
    }
}

pub fn write_coverage_records(path: &Path, records: &[CoverageRecord]) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

pub fn parse_coverage_records(path: &Path, raw: &str) -> Result<Vec<CoverageRecord>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CoverageRecord = serde_json::from_str(line).map_err(|e| ReportError::CoverageLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        r.outcome.validate().map_err(|e| ReportError::CoverageLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_coverage_records(path: &Path) -> Result<Vec<CoverageRecord>, ReportError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_coverage_records(path, &raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub path: PathBuf,
    pub rows: usize,
    /// Hex sha256 of the file bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetRow {
    pub measurement: BatchMeasurement,
    pub coverage: Vec<CoverageRecord>,
}

impl DatasetRow {
    pub fn missing_executions(&self) -> usize {
        (self.measurement.n_executions as usize).saturating_sub(self.coverage.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnifiedDataset {
    /// Sorted by model, canonical strategy order, then batch id.
    pub rows: Vec<DatasetRow>,
    pub log_provenance: Vec<Provenance>,
    pub coverage_provenance: Vec<Provenance>,
    /// Coverage records whose batch is not in any log.
    pub orphan_records: usize,
}

impl UnifiedDataset {
    pub fn missing_coverage(&self) -> usize {
        self.rows.iter().map(DatasetRow::missing_executions).sum()
    }

    /// Digest of the joined content, independent of input file order.
    pub fn digest(&self) -> String {
        let body = serde_json::to_vec(&(&self.rows, self.orphan_records)).expect("dataset serializes");
        hex::encode(Sha256::digest(body))
    }
}

fn read_bytes(path: &Path) -> Result<(Vec<u8>, String), ReportError> {
    let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((bytes, digest))
}

type PairKey = (String, usize);

fn pair_key(model: &str, strategy: StrategyId) -> PairKey {
    (model.to_string(), strategy.order())
}

/// Joins batch logs with coverage records.
pub fn consolidate(log_paths: &[PathBuf], coverage_paths: &[PathBuf]) -> Result<UnifiedDataset, ReportError> {
    if log_paths.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut batches: BTreeMap<(PairKey, u32), (BatchMeasurement, PathBuf)> = BTreeMap::new();
    let mut log_provenance = Vec::new();
    for path in log_paths {
        let (_, digest) = read_bytes(path)?;
        let rows = read_log(path)?;
        log_provenance.push(Provenance {
            path: path.clone(),
            rows: rows.len(),
            digest,
        });
        for m in rows {
            let sum = m.component_sum();
            if !rel_close(m.energy_consumed, sum, 1e-9) {
                return Err(ReportError::Inconsistent {
                    path: path.clone(),
                    batch_id: m.batch_id,
                    reason: format!("energy_consumed {} != cpu + gpu + ram = {sum}", m.energy_consumed),
                });
            }
            if m.total_tokens != m.input_tokens + m.output_tokens {
                return Err(ReportError::Inconsistent {
                    path: path.clone(),
                    batch_id: m.batch_id,
                    reason: "total_tokens != input_tokens + output_tokens".into(),
                });
            }
            let key = (pair_key(&m.model, m.strategy), m.batch_id);
            if let Some((_, first)) = batches.get(&key) {
                return Err(ReportError::DuplicateBatch {
                    key: format!("({}, {}, batch {})", m.model, m.strategy, m.batch_id),
                    first: first.clone(),
                    second: path.clone(),
                });
            }
            batches.insert(key, (m, path.clone()));
        }
    }

    let mut records: HashMap<(PairKey, u32), BTreeMap<u32, (CoverageRecord, PathBuf)>> = HashMap::new();
    let mut coverage_provenance = Vec::new();
    for path in coverage_paths {
        let (bytes, digest) = read_bytes(path)?;
        let raw = String::from_utf8(bytes).map_err(|e| ReportError::CoverageLine {
            path: path.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        let recs = parse_coverage_records(path, &raw)?;
        coverage_provenance.push(Provenance {
            path: path.clone(),
            rows: recs.len(),
            digest,
        });
        for r in recs {
            let slot = records.entry((pair_key(&r.model, r.strategy), r.batch_id)).or_default();
            if let Some((prev, first)) = slot.get(&r.execution) {
                return Err(ReportError::DuplicateRecord {
                    key: prev.key(),
                    first: first.clone(),
                    second: path.clone(),
                });
            }
            slot.insert(r.execution, (r, path.clone()));
        }
    }

    let mut rows = Vec::with_capacity(batches.len());
    for (key, (measurement, _)) in batches {
        let coverage = records
            .remove(&key)
            .map(|m| m.into_values().map(|(r, _)| r).collect())
            .unwrap_or_default();
        rows.push(DatasetRow { measurement, coverage });
    }
    let orphan_records = records.values().map(BTreeMap::len).sum();
    if orphan_records > 0 {
        log::warn!("{orphan_records} coverage record(s) match no logged batch");
    }
    Ok(UnifiedDataset {
        rows,
        log_provenance,
        coverage_provenance,
        orphan_records,
    })
}

/// Sums each pair's batches. Q is absent when any execution lacks a record.
pub fn aggregate(dataset: &UnifiedDataset) -> Result<Vec<PrimaryAggregate>, ReportError> {
    let mut out: Vec<PrimaryAggregate> = Vec::new();
    let mut percents: Vec<f64> = Vec::new();
    let mut complete = true;
    let finish = |agg: &mut PrimaryAggregate, percents: &mut Vec<f64>, complete: bool| -> Result<(), ReportError> {
        agg.q = if complete && !percents.is_empty() {
            Some(normalize_coverage(percents)?)
        } else {
            None
        };
        percents.clear();
        if agg.t == 0 {
            return Err(MetricsError::ZeroTokens { pair: agg.pair() }.into());
        }
        Ok(())
    };
    for row in &dataset.rows {
        let m = &row.measurement;
        let same = out
            .last()
            .is_some_and(|a| a.model == m.model && a.strategy == m.strategy);
        if !same {
            if let Some(prev) = out.last_mut() {
                finish(prev, &mut percents, complete)?;
            }
            complete = true;
            out.push(PrimaryAggregate {
                model: m.model.clone(),
                strategy: m.strategy,
                t: 0,
                tau: 0.0,
                co2: 0.0,
                e_cpu: 0.0,
                e_gpu: 0.0,
                e_ram: 0.0,
                q: None,
            });
        }
        let agg = out.last_mut().expect("pushed above");
        agg.t += m.total_tokens;
        agg.tau += m.duration;
        agg.co2 += m.emissions;
        agg.e_cpu += m.cpu_energy;
        agg.e_gpu += m.gpu_energy;
        agg.e_ram += m.ram_energy;
        complete &= row.missing_executions() == 0;
        percents.extend(row.coverage.iter().map(|r| effective_coverage(&r.outcome)));
    }
    if let Some(last) = out.last_mut() {
        finish(last, &mut percents, complete)?;
    }
    Ok(out)
}

impl ReportContext {
    pub fn from_dataset(ds: &UnifiedDataset) -> Self {
        let mut backends = BTreeSet::new();
        let (mut co2, mut energy) = (0.0, 0.0);
        for r in &ds.rows {
            backends.insert(format!(
                "cpu={} gpu={}",
                r.measurement.cpu_backend, r.measurement.gpu_backend
            ));
            co2 += r.measurement.emissions;
            energy += r.measurement.energy_consumed;
        }
        ReportContext {
            backends: backends.into_iter().collect(),
            implied_intensity: (energy > 0.0).then(|| co2 / energy),
            missing_coverage: ds.missing_coverage(),
            orphan_records: ds.orphan_records,
            corpus_wrapped: None,
        }
    }
}
