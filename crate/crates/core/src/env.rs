//! Ground-truth state machine for the box-and-key environment.
//!
//! Every step opens one previously unopened box and obtains one previously
//! unobtained key. States only ever move from `false` to `true`.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Largest box or key count the answer grammar can address (one index digit).
pub const MAX_ENTITIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("{kind} index {index} out of range (have {limit})")]
    OutOfRange {
        kind: StateKind,
        index: usize,
        limit: usize,
    },
    #[error("{0} was already set by an earlier step")]
    RepeatedTarget(StateId),
    #[error("invalid environment size: {num_boxes} boxes, {num_keys} keys (each must be 1..={MAX_ENTITIES})")]
    InvalidConfig { num_boxes: usize, num_keys: usize },
    #[error("state has {got_boxes} boxes / {got_keys} keys, config expects {num_boxes} / {num_keys}")]
    ShapeMismatch {
        got_boxes: usize,
        got_keys: usize,
        num_boxes: usize,
        num_keys: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryOrdering {
    /// `(box 0, key 0), (box 1, key 1), ...`
    #[default]
    Interleaved,
    /// All boxes ascending, then all keys ascending.
    BoxesThenKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_boxes: usize,
    pub num_keys: usize,
    #[serde(default)]
    pub query_ordering: QueryOrdering,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_boxes: 10,
            num_keys: 10,
            query_ordering: QueryOrdering::Interleaved,
        }
    }
}

impl EnvConfig {
    pub fn new(num_boxes: usize, num_keys: usize) -> Result<Self, EnvError> {
        Self {
            num_boxes,
            num_keys,
            query_ordering: QueryOrdering::Interleaved,
        }
        .validated()
    }

    pub fn with_ordering(mut self, ordering: QueryOrdering) -> Self {
        self.query_ordering = ordering;
        self
    }

    pub fn validated(self) -> Result<Self, EnvError> {
        let ok = |n: usize| (1..=MAX_ENTITIES).contains(&n);
        if ok(self.num_boxes) && ok(self.num_keys) {
            Ok(self)
        } else {
            Err(EnvError::InvalidConfig {
                num_boxes: self.num_boxes,
                num_keys: self.num_keys,
            })
        }
    }

    pub fn total_states(&self) -> usize {
        self.num_boxes + self.num_keys
    }

    /// Queried states in this config's ordering.
    pub fn query(&self) -> Vec<StateId> {
        let mut out = Vec::with_capacity(self.total_states());
        match self.query_ordering {
            QueryOrdering::Interleaved => {
                for i in 0..self.num_boxes.max(self.num_keys) {
                    if i < self.num_boxes {
                        out.push(StateId::boxed(i));
                    }
                    if i < self.num_keys {
                        out.push(StateId::key(i));
                    }
                }
            }
            QueryOrdering::BoxesThenKeys => {
                out.extend((0..self.num_boxes).map(StateId::boxed));
                out.extend((0..self.num_keys).map(StateId::key));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Box,
    Key,
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateKind::Box => "box",
            StateKind::Key => "key",
        })
    }
}

/// Abstract identity of one queried state, e.g. "box 4 is opened".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId {
    pub kind: StateKind,
    pub index: usize,
}

impl StateId {
    pub fn boxed(index: usize) -> Self {
        Self {
            kind: StateKind::Box,
            index,
        }
    }

    pub fn key(index: usize) -> Self {
        Self {
            kind: StateKind::Key,
            index,
        }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind, self.index)
    }
}

/// One step: open `box`, retrieve `key`. The two indices are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepAction {
    #[serde(rename = "box")]
    pub box_index: usize,
    #[serde(rename = "key")]
    pub key_index: usize,
}

impl StepAction {
    pub fn new(box_index: usize, key_index: usize) -> Self {
        Self { box_index, key_index }
    }

    /// The two states this step changes.
    pub fn touched(&self) -> [StateId; 2] {
        [StateId::boxed(self.box_index), StateId::key(self.key_index)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundState {
    opened: Vec<bool>,
    obtained: Vec<bool>,
}

impl GroundState {
    pub fn initial(config: &EnvConfig) -> Self {
        Self {
            opened: vec![false; config.num_boxes],
            obtained: vec![false; config.num_keys],
        }
    }

    /// Builds a state from explicit flag vectors (fixtures, compressed starts).
    pub fn from_flags(opened: Vec<bool>, obtained: Vec<bool>) -> Self {
        Self { opened, obtained }
    }

    pub fn opened(&self) -> &[bool] {
        &self.opened
    }

    pub fn obtained(&self) -> &[bool] {
        &self.obtained
    }

    pub fn get(&self, id: StateId) -> Option<bool> {
        match id.kind {
            StateKind::Box => self.opened.get(id.index).copied(),
            StateKind::Key => self.obtained.get(id.index).copied(),
        }
    }

    /// Number of `true` flags across both vectors.
    pub fn count_true(&self) -> usize {
        self.opened.iter().chain(&self.obtained).filter(|v| **v).count()
    }

    /// Returns a new state with `action` applied; `self` is untouched.
    pub fn apply(&self, action: StepAction) -> Result<Self, EnvError> {
        let check = |kind, index: usize, flags: &[bool]| {
            let id = StateId { kind, index };
            match flags.get(index) {
                None => Err(EnvError::OutOfRange {
                    kind,
                    index,
                    limit: flags.len(),
                }),
                Some(true) => Err(EnvError::RepeatedTarget(id)),
                Some(false) => Ok(()),
            }
        };
        check(StateKind::Box, action.box_index, &self.opened)?;
        check(StateKind::Key, action.key_index, &self.obtained)?;
        let mut next = self.clone();
        next.opened[action.box_index] = true;
        next.obtained[action.key_index] = true;
        Ok(next)
    }

    /// Applies every action in order.
    pub fn replay<'a>(&self, actions: impl IntoIterator<Item = &'a StepAction>) -> Result<Self, EnvError> {
        actions.into_iter().try_fold(self.clone(), |s, a| s.apply(*a))
    }

    /// `(state, value)` pairs in the config's query ordering.
    pub fn enumerate(&self, config: &EnvConfig) -> Result<Vec<(StateId, bool)>, EnvError> {
        if self.opened.len() != config.num_boxes || self.obtained.len() != config.num_keys {
            return Err(EnvError::ShapeMismatch {
                got_boxes: self.opened.len(),
                got_keys: self.obtained.len(),
                num_boxes: config.num_boxes,
                num_keys: config.num_keys,
            });
        }
        Ok(config
            .query()
            .into_iter()
            .map(|id| (id, self.get(id).unwrap_or(false)))
            .collect())
    }
}

/// Convenience free functions mirroring the method API.
pub fn initial_state(config: &EnvConfig) -> GroundState {
    GroundState::initial(config)
}

pub fn apply_step(state: &GroundState, action: StepAction) -> Result<GroundState, EnvError> {
    state.apply(action)
}

pub fn enumerate(state: &GroundState, config: &EnvConfig) -> Result<Vec<(StateId, bool)>, EnvError> {
    state.enumerate(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cfg(b: usize, k: usize) -> EnvConfig {
        EnvConfig::new(b, k).unwrap()
    }

    #[test]
    fn initial_is_all_false() {
        for n in [2, 5, 10] {
            let s = initial_state(&cfg(n, n));
            assert_eq!(s.opened(), vec![false; n].as_slice());
            assert_eq!(s.obtained(), vec![false; n].as_slice());
        }
    }

    #[test]
    fn apply_sets_exactly_two_flags() {
        let s0 = initial_state(&cfg(5, 5));
        let s1 = apply_step(&s0, StepAction::new(3, 2)).unwrap();
        assert_eq!(s1.opened(), &[false, false, false, true, false]);
        assert_eq!(s1.obtained(), &[false, false, true, false, false]);
        // value semantics
        assert_eq!(s0.count_true(), 0);
    }

    #[test]
    fn repeated_target_rejected() {
        let s = initial_state(&cfg(5, 5)).apply(StepAction::new(3, 1)).unwrap();
        assert_eq!(
            s.apply(StepAction::new(3, 0)),
            Err(EnvError::RepeatedTarget(StateId::boxed(3)))
        );
        assert_eq!(
            s.apply(StepAction::new(0, 1)),
            Err(EnvError::RepeatedTarget(StateId::key(1)))
        );
    }

    #[test]
    fn out_of_range_rejected() {
        let s = initial_state(&cfg(2, 3));
        assert!(matches!(
            s.apply(StepAction::new(2, 0)),
            Err(EnvError::OutOfRange {
                kind: StateKind::Box,
                index: 2,
                limit: 2
            })
        ));
        assert!(matches!(
            s.apply(StepAction::new(0, 3)),
            Err(EnvError::OutOfRange {
                kind: StateKind::Key,
                ..
            })
        ));
    }

    #[test]
    fn config_bounds() {
        assert!(EnvConfig::new(0, 3).is_err());
        assert!(EnvConfig::new(11, 3).is_err());
        assert!(EnvConfig::new(10, 10).is_ok());
        assert_eq!(EnvConfig::default().total_states(), 20);
    }

    #[test]
    fn enumerate_interleaved_matches_worked_example() {
        let c = cfg(2, 2);
        let s = GroundState {
            opened: vec![true, false],
            obtained: vec![false, false],
        };
        assert_eq!(
            enumerate(&s, &c).unwrap(),
            vec![
                (StateId::boxed(0), true),
                (StateId::key(0), false),
                (StateId::boxed(1), false),
                (StateId::key(1), false),
            ]
        );
    }

    #[test]
    fn enumerate_boxes_then_keys() {
        let c = cfg(2, 3).with_ordering(QueryOrdering::BoxesThenKeys);
        let ids: Vec<_> = c.query();
        assert_eq!(
            ids,
            vec![
                StateId::boxed(0),
                StateId::boxed(1),
                StateId::key(0),
                StateId::key(1),
                StateId::key(2)
            ]
        );
    }

    #[test]
    fn enumerate_uneven_interleaved() {
        let ids = cfg(3, 1).query();
        assert_eq!(
            ids,
            vec![StateId::boxed(0), StateId::key(0), StateId::boxed(1), StateId::boxed(2)]
        );
    }

    #[test]
    fn enumerate_shape_mismatch() {
        let s = initial_state(&cfg(2, 2));
        assert!(matches!(s.enumerate(&cfg(3, 2)), Err(EnvError::ShapeMismatch { .. })));
    }

    #[test]
    fn all_false_ten_by_ten() {
        let c = EnvConfig::default();
        let e = initial_state(&c).enumerate(&c).unwrap();
        assert_eq!(e.len(), 20);
        assert!(e.iter().all(|(_, v)| !v));
    }

    fn actions(n: usize) -> impl Strategy<Value = (usize, Vec<StepAction>)> {
        (1..=n)
            .prop_flat_map(move |count| {
                (
                    Just(count),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                )
            })
            .prop_map(|(count, boxes, keys)| {
                let steps = boxes
                    .into_iter()
                    .zip(keys)
                    .take(count)
                    .map(|(b, k)| StepAction::new(b, k))
                    .collect();
                (count, steps)
            })
    }

    proptest! {
        // Set-based simulation as an independent oracle.
        #[test]
        fn replay_matches_set_oracle((count, steps) in actions(10)) {
            let c = EnvConfig::default();
            let s = initial_state(&c).replay(&steps).unwrap();
            let opened: BTreeSet<_> = steps.iter().map(|a| a.box_index).collect();
            let obtained: BTreeSet<_> = steps.iter().map(|a| a.key_index).collect();
            for i in 0..10 {
                prop_assert_eq!(s.opened()[i], opened.contains(&i));
                prop_assert_eq!(s.obtained()[i], obtained.contains(&i));
            }
            let e = s.enumerate(&c).unwrap();
            prop_assert_eq!(e.len(), 20);
            prop_assert_eq!(e.iter().filter(|(_, v)| *v).count(), 2 * count);
        }

        #[test]
        fn permutation_invariant((_c, steps) in actions(10), seed in any::<u64>()) {
            let c = EnvConfig::default();
            let mut shuffled = steps.clone();
            // deterministic rotation + reversal by seed
            let r = (seed as usize) % shuffled.len();
            shuffled.rotate_left(r);
            if seed % 2 == 0 { shuffled.reverse(); }
            let a = initial_state(&c).replay(&steps).unwrap();
            let b = initial_state(&c).replay(&shuffled).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn orderings_are_permutations(b in 1usize..=10, k in 1usize..=10) {
            let c = cfg(b, k);
            let mut x = c.query();
            let mut y = c.with_ordering(QueryOrdering::BoxesThenKeys).query();
            prop_assert_eq!(x.len(), b + k);
            x.sort();
            y.sort();
            prop_assert_eq!(x, y);
        }
    }
}
