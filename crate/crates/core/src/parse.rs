//! Extraction of state atoms from free-form model output.

use crate::env::StateId;
use crate::genesis::Lexicon;
use crate::prompt::atom_parts;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

/// Normative extraction grammar.
pub const ATOM_PATTERN: &str = r"([a-zA-Z0-9]+)\(([a-zA-Z0-9]+-\d)\)=(True|true|False|false)";

static ATOM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(ATOM_PATTERN).expect("valid atom pattern"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAtom {
    pub functor: String,
    pub argument: String,
    pub truth_token: String,
    /// Offset into the trimmed text.
    pub byte_offset: usize,
}

impl RawAtom {
    pub fn value(&self) -> bool {
        self.truth_token.eq_ignore_ascii_case("true")
    }

    pub fn key(&self) -> String {
        atom_key(&self.functor, &self.argument)
    }
}

/// Map key for a `(functor, argument)` pair: `F(a-0)`.
pub fn atom_key(functor: &str, argument: &str) -> String {
    format!("{functor}({argument})")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomalies {
    pub duplicate_conflicts: usize,
    pub duplicate_agreements: usize,
    pub unknown_atoms: Vec<RawAtom>,
    pub missing_states: Vec<StateId>,
}

impl Anomalies {
    pub fn is_clean(&self) -> bool {
        self.duplicate_conflicts == 0
            && self.duplicate_agreements == 0
            && self.unknown_atoms.is_empty()
            && self.missing_states.is_empty()
    }
}

/// Predicted values for queried states, keyed by [`atom_key`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMap {
    pub entries: BTreeMap<String, bool>,
    pub anomalies: Anomalies,
}

impl PredictionMap {
    pub fn get(&self, functor: &str, argument: &str) -> Option<bool> {
        self.entries.get(&atom_key(functor, argument)).copied()
    }
}

/// All non-overlapping grammar matches in leading/trailing-whitespace-trimmed `text`.
pub fn extract_states(text: &str) -> Vec<RawAtom> {
    let trimmed = text.trim();
    ATOM_RE
        .captures_iter(trimmed)
        .map(|c| RawAtom {
            functor: c[1].to_string(),
            argument: c[2].to_string(),
            truth_token: c[3].to_string(),
            byte_offset: c.get(0).map_or(0, |m| m.start()),
        })
        .collect()
}

/// Buckets atoms against the queried states. Later duplicates overwrite earlier ones.
pub fn normalize(atoms: &[RawAtom], reference_query: &[StateId], lexicon: &Lexicon) -> PredictionMap {
    let queried: HashMap<String, StateId> = reference_query
        .iter()
        .map(|&id| {
            let (f, a) = atom_parts(lexicon, id);
            (atom_key(&f, &a), id)
        })
        .collect();

    let mut out = PredictionMap::default();
    for atom in atoms {
        let key = atom.key();
        if !queried.contains_key(&key) {
            out.anomalies.unknown_atoms.push(atom.clone());
            continue;
        }
        let value = atom.value();
        if let Some(previous) = out.entries.insert(key, value) {
            if previous == value {
                out.anomalies.duplicate_agreements += 1;
            } else {
                out.anomalies.duplicate_conflicts += 1;
            }
        }
    }
    out.anomalies.missing_states = reference_query
        .iter()
        .filter(|&&id| {
            let (f, a) = atom_parts(lexicon, id);
            !out.entries.contains_key(&atom_key(&f, &a))
        })
        .copied()
        .collect();
    out
}

/// `extract_states` followed by `normalize`.
pub fn parse_response(text: &str, reference_query: &[StateId], lexicon: &Lexicon) -> PredictionMap {
    normalize(&extract_states(text), reference_query, lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, GroundState, StepAction};
    use crate::genesis::{InstructionVariant, LexiconMode};
    use crate::prompt::render_answer;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon {
            opened_functor: "NvSWxzvJb".into(),
            obtained_functor: "B".into(),
            box_prefix: "jqC".into(),
            key_prefix: "bsS".into(),
            mode: LexiconMode::SYNTHETIC,
        }
    }

    fn single_letter() -> Lexicon {
        Lexicon {
            opened_functor: "F".into(),
            obtained_functor: "G".into(),
            box_prefix: "a".into(),
            key_prefix: "b".into(),
            mode: LexiconMode::SYNTHETIC,
        }
    }

    #[test]
    fn extracts_model_answer_line() {
        let atoms = extract_states("NvSWxzvJb(jqC-0)=True, B(bsS-0)=True");
        assert_eq!(atoms.len(), 2);
        assert!(atoms.iter().all(RawAtom::value));
        assert_eq!(atoms[1].functor, "B");
        assert_eq!(atoms[1].argument, "bsS-0");
        assert_eq!(atoms[1].byte_offset, 23);
    }

    #[test]
    fn trims_and_keeps_lowercase_token() {
        let atoms = extract_states("  \nOPENED(BOX-1)=false");
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].truth_token, "false");
        assert_eq!(atoms[0].byte_offset, 0);
        assert!(!atoms[0].value());
    }

    #[test]
    fn no_match_is_empty() {
        assert!(extract_states("I opened the box.").is_empty());
        assert!(extract_states("").is_empty());
        assert!(extract_states("OPENED(BOX-10)=True OPENED(BOX-1)=TRUE").is_empty());
    }

    #[test]
    fn last_duplicate_wins() {
        let env = EnvConfig::new(1, 1).unwrap();
        let atoms = extract_states("F(a-0)=True F(a-0)=False");
        let map = normalize(&atoms, &env.query(), &single_letter());
        assert_eq!(map.get("F", "a-0"), Some(false));
        assert_eq!(map.anomalies.duplicate_conflicts, 1);
        assert_eq!(map.anomalies.duplicate_agreements, 0);
        assert_eq!(map.anomalies.missing_states, vec![StateId::key(0)]);
    }

    #[test]
    fn agreement_counted_separately() {
        let env = EnvConfig::new(1, 1).unwrap();
        let map = parse_response("F(a-0)=True F(a-0)=true G(b-0)=False", &env.query(), &single_letter());
        assert_eq!(map.anomalies.duplicate_agreements, 1);
        assert_eq!(map.anomalies.duplicate_conflicts, 0);
        assert!(map.anomalies.missing_states.is_empty());
    }

    #[test]
    fn exact_cover_is_clean() {
        let env = EnvConfig::new(2, 2).unwrap();
        let map = parse_response(
            "NvSWxzvJb(jqC-0)=True, B(bsS-0)=False, NvSWxzvJb(jqC-1)=False, B(bsS-1)=False",
            &env.query(),
            &lex(),
        );
        assert!(map.anomalies.is_clean());
        assert_eq!(map.entries.len(), 4);
    }

    #[test]
    fn unknown_and_missing() {
        let env = EnvConfig::default();
        let s = GroundState::initial(&env);
        let full = render_answer(&s, &env, &Lexicon::natural(), InstructionVariant::Normal);
        // drop the last atom: 19 of 20
        let cut = full.rfind(", ").unwrap();
        let text = format!("{} OPENED(CRATE-2)=True", &full[..cut]);
        let map = parse_response(&text, &env.query(), &Lexicon::natural());
        assert_eq!(map.entries.len(), 19);
        assert_eq!(map.anomalies.missing_states, vec![StateId::key(9)]);
        assert_eq!(map.anomalies.unknown_atoms.len(), 1);
        assert_eq!(map.anomalies.unknown_atoms[0].argument, "CRATE-2");
    }

    #[test]
    fn rendered_answer_round_trips() {
        let env = EnvConfig::default();
        let s = GroundState::initial(&env).apply(StepAction::new(4, 7)).unwrap();
        for variant in InstructionVariant::ALL {
            let text = render_answer(&s, &env, &lex(), variant);
            let map = parse_response(&text, &env.query(), &lex());
            assert!(map.anomalies.is_clean());
            assert_eq!(map.get("NvSWxzvJb", "jqC-4"), Some(!variant.flips_truth()));
        }
    }

    proptest! {
        #[test]
        fn extraction_is_total(text in any::<String>()) {
            let atoms = extract_states(&text);
            for a in &atoms {
                prop_assert!(text.trim().get(a.byte_offset..).is_some());
            }
        }

        #[test]
        fn normalize_is_deterministic(text in r"([FGx]\([ab]-[0-3]\)=(True|False) ?){0,12}") {
            let env = EnvConfig::new(2, 2).unwrap();
            let atoms = extract_states(&text);
            let a = normalize(&atoms, &env.query(), &single_letter());
            let b = normalize(&atoms, &env.query(), &single_letter());
            prop_assert_eq!(&a, &b);
            let covered = a.entries.len() + a.anomalies.missing_states.len();
            prop_assert_eq!(covered, 4);
            prop_assert_eq!(
                atoms.len(),
                a.entries.len() + a.anomalies.unknown_atoms.len()
                    + a.anomalies.duplicate_conflicts + a.anomalies.duplicate_agreements
            );
        }
    }
}
