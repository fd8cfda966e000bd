//! State-EM / Step-EM scoring and per-state transition classification.
//!
//! Everything is compared in rendered-token space: a prediction matches when
//! its literal equals the literal the oracle would have rendered, so the
//! counter-intuitive variants need no special handling here.

use crate::env::StateId;
use crate::parse::PredictionMap;
use crate::prompt::ExpectedAtom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("previous and current expectations cover different states")]
    MismatchedQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub matched: usize,
    pub queried: usize,
    /// Parsed atoms addressing queried states.
    pub predicted: usize,
    pub state_em: f64,
    pub step_em: bool,
}

impl StepScore {
    pub fn step_em_value(&self) -> f64 {
        if self.step_em {
            1.0
        } else {
            0.0
        }
    }
}

fn predicted_value(pred: &PredictionMap, atom: &ExpectedAtom) -> Option<bool> {
    pred.get(&atom.functor, &atom.argument)
}

pub fn score_step(pred: &PredictionMap, expected: &[ExpectedAtom]) -> StepScore {
    let queried = expected.len();
    let mut matched = 0;
    let mut predicted = 0;
    for atom in expected {
        if let Some(v) = predicted_value(pred, atom) {
            predicted += 1;
            if v == atom.rendered {
                matched += 1;
            }
        }
    }
    let state_em = if queried == 0 {
        0.0
    } else {
        matched as f64 / queried as f64
    };
    let step_em = matched == queried && predicted == queried && pred.anomalies.unknown_atoms.is_empty();
    StepScore {
        matched,
        queried,
        predicted,
        state_em,
        step_em,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    /// Changed state predicted at its new value.
    #[serde(rename = "CU")]
    CorrectUpdate,
    /// Changed state predicted wrong.
    #[serde(rename = "FU")]
    FailedUpdate,
    #[serde(rename = "MC")]
    MaintainCorrectness,
    /// Untouched, correct before, wrong now.
    #[serde(rename = "HU_IO")]
    HallucinatedIncorrect,
    /// Untouched, wrong before, still the same wrong value.
    #[serde(rename = "DR")]
    DirtyRead,
    /// Untouched, wrong before, correct now.
    #[serde(rename = "HU_AC")]
    HallucinatedAccidentallyCorrect,
    #[serde(rename = "UNRESOLVED")]
    Unresolved,
}

impl Transition {
    pub const ALL: [Self; 7] = [
        Self::CorrectUpdate,
        Self::FailedUpdate,
        Self::MaintainCorrectness,
        Self::HallucinatedIncorrect,
        Self::DirtyRead,
        Self::HallucinatedAccidentallyCorrect,
        Self::Unresolved,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            Self::CorrectUpdate => "CU",
            Self::FailedUpdate => "FU",
            Self::MaintainCorrectness => "MC",
            Self::HallucinatedIncorrect => "HU_IO",
            Self::DirtyRead => "DR",
            Self::HallucinatedAccidentallyCorrect => "HU_AC",
            Self::Unresolved => "UNRESOLVED",
        }
    }

    /// `Some(true)` for correct outcomes, `Some(false)` for incorrect, `None` when unresolved.
    pub fn outcome_correct(&self) -> Option<bool> {
        match self {
            Self::CorrectUpdate | Self::MaintainCorrectness | Self::HallucinatedAccidentallyCorrect => Some(true),
            Self::FailedUpdate | Self::HallucinatedIncorrect | Self::DirtyRead => Some(false),
            Self::Unresolved => None,
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub cu: usize,
    pub fu: usize,
    pub mc: usize,
    pub hu_io: usize,
    pub dr: usize,
    pub hu_ac: usize,
    pub unresolved: usize,
}

impl TransitionCounts {
    pub fn get(&self, t: Transition) -> usize {
        match t {
            Transition::CorrectUpdate => self.cu,
            Transition::FailedUpdate => self.fu,
            Transition::MaintainCorrectness => self.mc,
            Transition::HallucinatedIncorrect => self.hu_io,
            Transition::DirtyRead => self.dr,
            Transition::HallucinatedAccidentallyCorrect => self.hu_ac,
            Transition::Unresolved => self.unresolved,
        }
    }

    pub fn record(&mut self, t: Transition) {
        let slot = match t {
            Transition::CorrectUpdate => &mut self.cu,
            Transition::FailedUpdate => &mut self.fu,
            Transition::MaintainCorrectness => &mut self.mc,
            Transition::HallucinatedIncorrect => &mut self.hu_io,
            Transition::DirtyRead => &mut self.dr,
            Transition::HallucinatedAccidentallyCorrect => &mut self.hu_ac,
            Transition::Unresolved => &mut self.unresolved,
        };
        *slot += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.cu += other.cu;
        self.fu += other.fu;
        self.mc += other.mc;
        self.hu_io += other.hu_io;
        self.dr += other.dr;
        self.hu_ac += other.hu_ac;
        self.unresolved += other.unresolved;
    }

    pub fn correct(&self) -> usize {
        self.cu + self.mc + self.hu_ac
    }

    pub fn incorrect(&self) -> usize {
        self.fu + self.hu_io + self.dr
    }

    pub fn resolved(&self) -> usize {
        self.correct() + self.incorrect()
    }

    pub fn total(&self) -> usize {
        self.resolved() + self.unresolved
    }

    /// Share of resolved states falling in `t`; zero when nothing resolved.
    pub fn fraction(&self, t: Transition) -> f64 {
        match self.resolved() {
            0 => 0.0,
            n => self.get(t) as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTransition {
    pub state: StateId,
    pub category: Transition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub states: Vec<StateTransition>,
    pub counts: TransitionCounts,
}

/// Classifies each queried state between two consecutive queried steps.
///
/// `None` predictions (failed queries) make every state unresolved.
pub fn classify_transitions(
    prev_pred: Option<&PredictionMap>,
    cur_pred: Option<&PredictionMap>,
    prev_expected: &[ExpectedAtom],
    cur_expected: &[ExpectedAtom],
    changed: &[StateId],
) -> Result<TransitionRecord, MetricsError> {
    let same_query = prev_expected.len() == cur_expected.len()
        && prev_expected
            .iter()
            .zip(cur_expected)
            .all(|(p, c)| p.state == c.state && p.functor == c.functor && p.argument == c.argument);
    if !same_query {
        return Err(MetricsError::MismatchedQuery);
    }
    let changed: BTreeSet<StateId> = changed.iter().copied().collect();

    let mut record = TransitionRecord {
        states: Vec::with_capacity(cur_expected.len()),
        counts: TransitionCounts::default(),
    };
    for (prev, cur) in prev_expected.iter().zip(cur_expected) {
        let p_prev = prev_pred.and_then(|p| predicted_value(p, prev));
        let p_cur = cur_pred.and_then(|p| predicted_value(p, cur));
        let category = match (p_prev, p_cur) {
            (Some(p_prev), Some(p_cur)) => {
                if changed.contains(&cur.state) {
                    if p_cur == cur.rendered {
                        Transition::CorrectUpdate
                    } else {
                        Transition::FailedUpdate
                    }
                } else {
                    match (p_prev == prev.rendered, p_cur == cur.rendered) {
                        (true, true) => Transition::MaintainCorrectness,
                        (true, false) => Transition::HallucinatedIncorrect,
                        (false, true) => Transition::HallucinatedAccidentallyCorrect,
                        (false, false) => Transition::DirtyRead,
                    }
                }
            }
            _ => Transition::Unresolved,
        };
        record.counts.record(category);
        record.states.push(StateTransition {
            state: cur.state,
            category,
        });
    }
    Ok(record)
}

/// One queried step of one trial, as fed to [`aggregate_curves`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub step: usize,
    /// `None` when the query failed.
    pub score: Option<StepScore>,
    pub transitions: Option<TransitionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub scored: usize,
    pub failed: usize,
    pub mean_state_em: f64,
    pub mean_step_em: f64,
    pub transitions: TransitionCounts,
}

impl CurvePoint {
    pub fn response_rate(&self) -> f64 {
        match self.scored + self.failed {
            0 => 0.0,
            n => self.scored as f64 / n as f64,
        }
    }
}

/// Order-independent mean: values are sorted before summation.
pub fn stable_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-step means over scored trials and summed transition counts.
pub fn aggregate_curves(trials: &[Vec<StepObservation>]) -> Vec<CurvePoint> {
    #[derive(Default)]
    struct Acc {
        state: Vec<f64>,
        step: Vec<f64>,
        failed: usize,
        transitions: TransitionCounts,
    }
    let mut by_step: BTreeMap<usize, Acc> = BTreeMap::new();
    for obs in trials.iter().flatten() {
        let acc = by_step.entry(obs.step).or_default();
        match &obs.score {
            Some(s) => {
                acc.state.push(s.state_em);
                acc.step.push(s.step_em_value());
            }
            None => acc.failed += 1,
        }
        if let Some(t) = &obs.transitions {
            acc.transitions.merge(t);
        }
    }
    by_step
        .into_iter()
        .map(|(step, mut acc)| CurvePoint {
            step,
            scored: acc.state.len(),
            failed: acc.failed,
            mean_state_em: stable_mean(&mut acc.state),
            mean_step_em: stable_mean(&mut acc.step),
            transitions: acc.transitions,
        })
        .collect()
}
