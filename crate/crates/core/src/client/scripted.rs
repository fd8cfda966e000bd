//! Deterministic reference agents used to validate the harness offline.

use super::{Agent, AgentInfo, ClientError, Completion, OracleView};
use crate::parse::extract_states;
use crate::prompt::MessageList;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::LazyLock;

static QUERY_ATOM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([a-zA-Z0-9]+)\(([a-zA-Z0-9]+-\d)\)=\?").expect("valid query pattern"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScriptedAgentKind {
    /// Returns the expected answer verbatim.
    Oracle,
    /// Repeats the most recent `Answer:` line found in the prompt.
    CopyLastAnswer,
    /// Uniform random literal for every queried atom.
    RandomTruth { seed: u64 },
    /// Expected answer, but every untouched state is flipped with probability `p`.
    Forgetful { p: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedAgent {
    pub kind: ScriptedAgentKind,
}

impl ScriptedAgent {
    pub fn new(kind: ScriptedAgentKind) -> Self {
        Self { kind }
    }
}

/// RNG keyed on the agent seed and the exact message bytes.
fn message_rng(seed: u64, messages: &MessageList) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for m in messages {
        h.update(serde_json::to_vec(&m.role).unwrap_or_default());
        h.update([0]);
        h.update(m.content.as_bytes());
        h.update([0]);
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn copy_last_answer(messages: &MessageList) -> Result<String, ClientError> {
    messages
        .iter()
        .flat_map(|m| m.content.lines())
        .filter_map(|line| line.trim_start().strip_prefix("Answer: "))
        .next_back()
        .map(str::to_string)
        .ok_or(ClientError::NoPreviousAnswer)
}

fn random_truth(seed: u64, messages: &MessageList) -> Result<String, ClientError> {
    let question = messages
        .iter()
        .flat_map(|m| m.content.lines())
        .rfind(|line| line.trim_start().starts_with("Question:"))
        .ok_or(ClientError::NoQuestion)?;
    let mut rng = message_rng(seed, messages);
    let atoms: Vec<String> = QUERY_ATOM
        .captures_iter(question)
        .map(|c| {
            let token = if rng.random_bool(0.5) { "True" } else { "False" };
            format!("{}({})={token}", &c[1], &c[2])
        })
        .collect();
    if atoms.is_empty() {
        return Err(ClientError::NoQuestion);
    }
    Ok(format!("Answer: {}", atoms.join(", ")))
}

fn forgetful(p: f64, seed: u64, messages: &MessageList, view: &OracleView) -> String {
    let previous: HashMap<String, bool> = extract_states(&view.previous_answer)
        .into_iter()
        .map(|a| (a.key(), a.value()))
        .collect();
    let mut rng = message_rng(seed, messages);
    let atoms: Vec<String> = extract_states(&view.expected_answer)
        .into_iter()
        .map(|a| {
            let mut value = a.value();
            let untouched = previous.get(&a.key()) == Some(&value);
            if untouched && rng.random_bool(p.clamp(0.0, 1.0)) {
                value = !value;
            }
            let token = if value { "True" } else { "False" };
            format!("{}({})={token}", a.functor, a.argument)
        })
        .collect();
    format!("Answer: {}", atoms.join(", "))
}

impl Agent for ScriptedAgent {
    fn complete(&self, messages: &MessageList, view: &OracleView) -> Result<Completion, ClientError> {
        let content = match self.kind {
            ScriptedAgentKind::Oracle => view.expected_answer.clone(),
            ScriptedAgentKind::CopyLastAnswer => copy_last_answer(messages)?,
            ScriptedAgentKind::RandomTruth { seed } => random_truth(seed, messages)?,
            ScriptedAgentKind::Forgetful { p, seed } => forgetful(p, seed, messages, view),
        };
        Ok(Completion { content, retries: 0 })
    }

    fn info(&self) -> AgentInfo {
        let name = match self.kind {
            ScriptedAgentKind::Oracle => "oracle".to_string(),
            ScriptedAgentKind::CopyLastAnswer => "copy-last".to_string(),
            ScriptedAgentKind::RandomTruth { seed } => format!("random(seed={seed})"),
            ScriptedAgentKind::Forgetful { p, seed } => format!("forgetful(p={p},seed={seed})"),
        };
        AgentInfo {
            name,
            model: None,
            decoding: None,
        }
    }
}
