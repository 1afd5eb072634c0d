//! Prompt template files.
//!
//! Layout: `<dir>/system.txt` plus `<dir>/<strategy>/<turn_index>.txt`.
//! Placeholders are `{{name}}`; task fields are substituted at render time,
//! round slots (`observation`, `subproblems`) when the next round is built.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::StrategyId;
use crate::corpus::TaskRecord;

pub const TEMPLATE_VERSION: &str = "1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{{{name}}}}} is not available in this turn")]
    MisplacedPlaceholder { template: String, name: String },
    #[error("template {template}: unterminated placeholder at byte {offset}")]
    Unterminated { template: String, offset: usize },
    #[error("template {template}: {reason}")]
    Io { template: String, reason: String },
    #[error("strategy {strategy} expects {expected} turn templates, found {found}")]
    TurnCount {
        strategy: StrategyId,
        expected: usize,
        found: usize,
    },
}

/// Values filled in when a later round is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundSlot {
    Observation,
    Subproblems,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Slot(RoundSlot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

const PLACEHOLDERS: [&str; 5] = ["text", "code", "exemplars", "observation", "subproblems"];

fn pieces<'a>(name: &str, raw: &'a str) -> Result<Vec<Piece<'a>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = raw;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            out.push(Piece::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(TemplateError::Unterminated {
            template: name.to_string(),
            offset: offset + start,
        })?;
        let key = after[..end].trim();
        if !PLACEHOLDERS.contains(&key) {
            return Err(TemplateError::UnknownPlaceholder {
                template: name.to_string(),
                name: key.to_string(),
            });
        }
        out.push(Piece::Placeholder(key));
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    Ok(out)
}

/// A full set of templates for all seven strategies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    pub source: Option<PathBuf>,
    system: String,
    turns: BTreeMap<StrategyId, Vec<String>>,
}

macro_rules! builtin {
    ($path:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $path))
    };
}

impl TemplateSet {
    /// Templates compiled into the library (mirrors `crates/core/templates`).
    pub fn builtin() -> Self {
        let mut turns = BTreeMap::new();
        turns.insert(StrategyId::Zeroshot, vec![builtin!("zeroshot/0.txt").to_string()]);
        turns.insert(StrategyId::Fewshot, vec![builtin!("fewshot/0.txt").to_string()]);
        turns.insert(StrategyId::Cot, vec![builtin!("cot/0.txt").to_string()]);
        turns.insert(
            StrategyId::Ltm,
            vec![builtin!("ltm/0.txt").to_string(), builtin!("ltm/1.txt").to_string()],
        );
        turns.insert(StrategyId::Pot, vec![builtin!("pot/0.txt").to_string()]);
        turns.insert(StrategyId::ScCot, vec![builtin!("sc_cot/0.txt").to_string()]);
        turns.insert(
            StrategyId::React,
            vec![builtin!("react/0.txt").to_string(), builtin!("react/1.txt").to_string()],
        );
        TemplateSet {
            version: builtin!("VERSION").trim().to_string(),
            source: None,
            system: builtin!("system.txt").to_string(),
            turns,
        }
    }

    /// Loads a template directory and checks every file parses.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |p: PathBuf| {
            fs::read_to_string(&p).map_err(|e| TemplateError::Io {
                template: p.display().to_string(),
                reason: e.to_string(),
            })
        };
        let version = read(dir.join("VERSION"))
            .map(|v| v.trim().to_string())
            .unwrap_or_else(|_| "unversioned".to_string());
        let system = read(dir.join("system.txt"))?;
        let mut turns = BTreeMap::new();
        for s in StrategyId::ALL {
            let mut list = Vec::new();
            for i in 0..s.turn_count() {
                list.push(read(dir.join(s.dir_name()).join(format!("{i}.txt")))?);
            }
            let extra = dir.join(s.dir_name()).join(format!("{}.txt", s.turn_count()));
            if extra.exists() {
                return Err(TemplateError::TurnCount {
                    strategy: s,
                    expected: s.turn_count(),
                    found: s.turn_count() + 1,
                });
            }
            turns.insert(s, list);
        }
        let set = TemplateSet {
            version,
            source: Some(dir.to_path_buf()),
            system,
            turns,
        };
        set.check()?;
        Ok(set)
    }

    /// Parses every template and checks placeholder placement.
    pub fn check(&self) -> Result<(), TemplateError> {
        check_placement("system.txt", &self.system, &[])?;
        for (s, list) in &self.turns {
            for (i, raw) in list.iter().enumerate() {
                let allowed = allowed_slots(*s, i);
                check_placement(&template_name(*s, i), raw, &allowed)?;
            }
        }
        Ok(())
    }

    pub fn system_segments(&self, task: &TaskRecord, exemplars: &str) -> Result<Vec<Segment>, TemplateError> {
        resolve("system.txt", &self.system, task, exemplars, &[])
    }

    pub fn turn_segments(
        &self,
        strategy: StrategyId,
        index: usize,
        task: &TaskRecord,
        exemplars: &str,
    ) -> Result<Vec<Segment>, TemplateError> {
        let list = &self.turns[&strategy];
        let raw = list.get(index).ok_or(TemplateError::TurnCount {
            strategy,
            expected: strategy.turn_count(),
            found: list.len(),
        })?;
        resolve(
            &template_name(strategy, index),
            raw,
            task,
            exemplars,
            &allowed_slots(strategy, index),
        )
    }
}

fn template_name(strategy: StrategyId, index: usize) -> String {
    format!("{}/{}.txt", strategy.dir_name(), index)
}

fn allowed_slots(strategy: StrategyId, index: usize) -> Vec<RoundSlot> {
    match (strategy, index) {
        (StrategyId::React, 1) => vec![RoundSlot::Observation],
        (StrategyId::Ltm, 1) => vec![RoundSlot::Subproblems],
        _ => vec![],
    }
}

fn slot_for(name: &str) -> Option<RoundSlot> {
    match name {
        "observation" => Some(RoundSlot::Observation),
        "subproblems" => Some(RoundSlot::Subproblems),
        _ => None,
    }
}

fn check_placement(name: &str, raw: &str, allowed: &[RoundSlot]) -> Result<(), TemplateError> {
    for p in pieces(name, raw)? {
        if let Piece::Placeholder(key) = p {
            if let Some(slot) = slot_for(key) {
                if !allowed.contains(&slot) {
                    return Err(TemplateError::MisplacedPlaceholder {
                        template: name.to_string(),
                        name: key.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn resolve(
    name: &str,
    raw: &str,
    task: &TaskRecord,
    exemplars: &str,
    allowed: &[RoundSlot],
) -> Result<Vec<Segment>, TemplateError> {
    let mut segments: Vec<Segment> = Vec::new();
    let push_text = |segments: &mut Vec<Segment>, t: &str| {
        if let Some(Segment::Text(prev)) = segments.last_mut() {
            prev.push_str(t);
        } else {
            segments.push(Segment::Text(t.to_string()));
        }
    };
    for p in pieces(name, raw)? {
        match p {
            Piece::Text(t) => push_text(&mut segments, t),
            Piece::Placeholder("text") => push_text(&mut segments, task.text.trim()),
            Piece::Placeholder("code") => push_text(&mut segments, task.code.trim_end()),
            Piece::Placeholder("exemplars") => {
                if exemplars.is_empty() {
                    return Err(TemplateError::MisplacedPlaceholder {
                        template: name.to_string(),
                        name: "exemplars".to_string(),
                    });
                }
                push_text(&mut segments, exemplars.trim_end())
            }
            Piece::Placeholder(key) => {
                let slot = slot_for(key).expect("placeholder names are validated");
                if !allowed.contains(&slot) {
                    return Err(TemplateError::MisplacedPlaceholder {
                        template: name.to_string(),
                        name: key.to_string(),
                    });
                }
                segments.push(Segment::Slot(slot));
            }
        }
    }
    Ok(segments)
}
