//! Prompt strategies and their interaction plans.
//!
//! A strategy renders into an [`InteractionPlan`]: the conversation to open
//! with, how many independent samples to draw, how many feedback rounds are
//! allowed, and how the final script is picked from the completions.

mod consensus;
mod extract;
mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskRecord;

pub use consensus::{assertion_set, jaccard, select_consensus, ConsensusError};
pub use extract::extract_test_script;
pub use templates::{RoundSlot, Segment, TemplateError, TemplateSet, TEMPLATE_VERSION};

/// The seven strategies, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyId {
    Zeroshot,
    Fewshot,
    Cot,
    Ltm,
    Pot,
    ScCot,
    React,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::Zeroshot,
        StrategyId::Fewshot,
        StrategyId::Cot,
        StrategyId::Ltm,
        StrategyId::Pot,
        StrategyId::ScCot,
        StrategyId::React,
    ];

    /// Identifier used in logs and config files.
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Zeroshot => "ZEROSHOT",
            StrategyId::Fewshot => "FEWSHOT",
            StrategyId::Cot => "COT",
            StrategyId::Ltm => "LTM",
            StrategyId::Pot => "POT",
            StrategyId::ScCot => "SC_COT",
            StrategyId::React => "REACT",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            StrategyId::Zeroshot => "Zeroshot",
            StrategyId::Fewshot => "Fewshot",
            StrategyId::Cot => "CoT",
            StrategyId::Ltm => "LtM",
            StrategyId::Pot => "PoT",
            StrategyId::ScCot => "SC_CoT",
            StrategyId::React => "ReAct",
        }
    }

    /// Template directory name.
    pub fn dir_name(self) -> &'static str {
        match self {
            StrategyId::Zeroshot => "zeroshot",
            StrategyId::Fewshot => "fewshot",
            StrategyId::Cot => "cot",
            StrategyId::Ltm => "ltm",
            StrategyId::Pot => "pot",
            StrategyId::ScCot => "sc_cot",
            StrategyId::React => "react",
        }
    }

    /// Number of turn templates the strategy needs.
    pub fn turn_count(self) -> usize {
        match self {
            StrategyId::Ltm | StrategyId::React => 2,
            _ => 1,
        }
    }

    /// Position in the reporting order.
    pub fn order(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown strategy {0:?}")]
pub struct UnknownStrategy(pub String);

impl FromStr for StrategyId {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "zeroshot" => StrategyId::Zeroshot,
            "fewshot" => StrategyId::Fewshot,
            "cot" => StrategyId::Cot,
            "ltm" | "leasttomost" => StrategyId::Ltm,
            "pot" | "programofthought" => StrategyId::Pot,
            "sccot" | "selfconsistency" => StrategyId::ScCot,
            "react" => StrategyId::React,
            _ => return Err(UnknownStrategy(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionRule {
    Single,
    Consensus,
    LastRound,
}

/// Knobs for the strategies that have any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    /// Independent samples drawn by self-consistency.
    pub sc_samples: u32,
    /// Feedback rounds allowed for ReAct.
    pub react_max_rounds: u32,
    /// Exemplars shown to few-shot.
    pub fewshot_k: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            sc_samples: 5,
            react_max_rounds: 3,
            fewshot_k: 2,
        }
    }
}

/// A role-tagged turn with task fields already substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTemplate {
    pub role: Role,
    pub segments: Vec<Segment>,
}

impl TurnTemplate {
    pub fn slots(&self) -> impl Iterator<Item = RoundSlot> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(slot) => Some(*slot),
            Segment::Text(_) => None,
        })
    }

    /// Fills the round slot (if any) and returns the message text.
    pub fn fill(&self, slot_value: &str) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(_) => out.push_str(slot_value),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPlan {
    pub strategy: StrategyId,
    pub task_id: u64,
    /// System preamble followed by one template per turn.
    pub turns: Vec<TurnTemplate>,
    pub n_samples: u32,
    pub max_rounds: u32,
    pub selection_rule: SelectionRule,
}

impl InteractionPlan {
    /// Messages for the first round.
    pub fn initial_messages(&self) -> Vec<Message> {
        // Turns before the first user turn (the preamble) plus the first user turn.
        let mut out = Vec::new();
        for turn in &self.turns {
            out.push(Message::new(turn.role, turn.fill("")));
            if turn.role == Role::User {
                break;
            }
        }
        out
    }

    /// The follow-up user turn used by multi-round strategies.
    fn followup_turn(&self) -> Option<&TurnTemplate> {
        self.turns.iter().filter(|t| t.role == Role::User).nth(1)
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("FEWSHOT needs at least one exemplar")]
    MissingExemplars,
    #[error("{0} does not take exemplars")]
    UnexpectedExemplars(StrategyId),
    #[error("invalid strategy parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("next_round called on a finished interaction")]
    AlreadyFinished,
}

/// Renders a strategy for one task.
pub fn render_plan(
    strategy: StrategyId,
    task: &TaskRecord,
    exemplars: &[TaskRecord],
    params: &StrategyParams,
    templates: &TemplateSet,
) -> Result<InteractionPlan, StrategyError> {
    match (strategy, exemplars.is_empty()) {
        (StrategyId::Fewshot, true) => return Err(StrategyError::MissingExemplars),
        (s, false) if s != StrategyId::Fewshot => return Err(StrategyError::UnexpectedExemplars(s)),
        _ => {}
    }
    let (n_samples, max_rounds, selection_rule) = match strategy {
        StrategyId::ScCot => {
            if params.sc_samples == 0 {
                return Err(StrategyError::InvalidParams("sc_samples must be >= 1".into()));
            }
            (params.sc_samples, 1, SelectionRule::Consensus)
        }
        StrategyId::React => {
            if params.react_max_rounds == 0 {
                return Err(StrategyError::InvalidParams("react_max_rounds must be >= 1".into()));
            }
            (1, params.react_max_rounds, SelectionRule::LastRound)
        }
        StrategyId::Ltm => (1, 2, SelectionRule::LastRound),
        _ => (1, 1, SelectionRule::Single),
    };

    let exemplar_text = render_exemplars(exemplars);
    let mut turns = vec![TurnTemplate {
        role: Role::System,
        segments: templates.system_segments(task, &exemplar_text)?,
    }];
    for index in 0..strategy.turn_count() {
        turns.push(TurnTemplate {
            role: Role::User,
            segments: templates.turn_segments(strategy, index, task, &exemplar_text)?,
        });
    }
    Ok(InteractionPlan {
        strategy,
        task_id: task.task_id,
        turns,
        n_samples,
        max_rounds,
        selection_rule,
    })
}

fn render_exemplars(exemplars: &[TaskRecord]) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("### Example {}\nProblem: {}\n\n", i + 1, ex.text.trim()));
        out.push_str(&format!("```python\n{}\n```\n\n", ex.code.trim_end()));
        out.push_str("Tests:\n```python\n");
        if !ex.test_setup_code.trim().is_empty() {
            out.push_str(ex.test_setup_code.trim_end());
            out.push('\n');
        }
        for t in &ex.test_list {
            out.push_str(t.trim_end());
            out.push('\n');
        }
        out.push_str("```\n");
    }
    out
}

/// Sandbox feedback handed to the next round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub text: String,
    pub all_passed: bool,
}

impl Observation {
    pub const ALL_PASSED: &'static str = "all tests passed";

    pub fn passed() -> Self {
        Observation {
            text: Self::ALL_PASSED.to_string(),
            all_passed: true,
        }
    }

    pub fn failed(text: impl Into<String>) -> Self {
        Observation {
            text: text.into(),
            all_passed: false,
        }
    }
}

/// Conversation state carried between rounds of one execution.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub messages: Vec<Message>,
    pub rounds_executed: u32,
    pub last_completion: Option<String>,
    finished: bool,
}

impl RoundState {
    pub fn new(plan: &InteractionPlan) -> Self {
        RoundState {
            messages: plan.initial_messages(),
            rounds_executed: 0,
            last_completion: None,
            finished: false,
        }
    }

    /// Marks a round as executed with its primary completion.
    pub fn record_round(&mut self, completion: &str) {
        self.rounds_executed += 1;
        self.last_completion = Some(completion.to_string());
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextRound {
    Messages(Vec<Message>),
    Terminal,
}

/// Decides whether another round is due and builds its messages.
///
/// ReAct feeds the sandbox observation back and stops early once every test
/// passes. Least-to-most feeds the decomposition from round one into round
/// two. Everything else stops after one round.
pub fn next_round(
    plan: &InteractionPlan,
    state: &mut RoundState,
    observation: Option<&Observation>,
) -> Result<NextRound, StrategyError> {
    if state.finished {
        return Err(StrategyError::AlreadyFinished);
    }
    let stop = state.rounds_executed >= plan.max_rounds
        || match plan.strategy {
            StrategyId::React => observation.is_some_and(|o| o.all_passed),
            StrategyId::Ltm => false,
            _ => true,
        };
    let followup = plan.followup_turn();
    if stop || followup.is_none() {
        state.finished = true;
        return Ok(NextRound::Terminal);
    }
    let followup = followup.expect("checked above");
    let previous = state.last_completion.clone().unwrap_or_default();
    let slot_value = match plan.strategy {
        StrategyId::React => observation
            .map(|o| o.text.clone())
            .unwrap_or_else(|| "no observation available".to_string()),
        _ => previous.clone(),
    };
    let mut messages = state.messages.clone();
    messages.push(Message::new(Role::Assistant, previous));
    messages.push(Message::new(Role::User, followup.fill(&slot_value)));
    state.messages = messages.clone();
    Ok(NextRound::Messages(messages))
}
