//! Rendering of instructions, step/query/answer blocks and chat message lists.
//!
//! All truth rendering happens here. Under both counter-intuitive variants the
//! literal `False` denotes an opened box / obtained key, and demonstrations use
//! the same flipped convention as the expected answers.

use crate::env::{EnvConfig, GroundState, StateId, StateKind, StepAction};
use crate::genesis::{InstructionVariant, Lexicon};
use serde::{Deserialize, Serialize};

pub const SYSTEM_MESSAGE: &str = "You are a helpful assistant.";
pub const STEP_ZERO: &str = "Step-0: Initialization. Do nothing.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Ordered chat messages; always starts with [`SYSTEM_MESSAGE`].
pub type MessageList = Vec<Message>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderStyle {
    /// One system message and one user message holding everything.
    #[default]
    Traditional,
    /// Demonstration answers attributed to the assistant.
    FakedMultiRound,
}

/// One demonstrated step: its text, the question, and the full answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoBlock {
    pub step: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    /// Step-0 first.
    pub demo_blocks: Vec<DemoBlock>,
    pub bare_steps: Vec<String>,
    pub test_step: String,
    pub test_question: String,
}

pub fn render_truth(value: bool, variant: InstructionVariant) -> &'static str {
    if value != variant.flips_truth() {
        "True"
    } else {
        "False"
    }
}

pub fn functor(lexicon: &Lexicon, kind: StateKind) -> &str {
    match kind {
        StateKind::Box => &lexicon.opened_functor,
        StateKind::Key => &lexicon.obtained_functor,
    }
}

pub fn prefix(lexicon: &Lexicon, kind: StateKind) -> &str {
    match kind {
        StateKind::Box => &lexicon.box_prefix,
        StateKind::Key => &lexicon.key_prefix,
    }
}

/// The `(functor, argument)` pair naming a state, e.g. `("OPENED", "BOX-3")`.
pub fn atom_parts(lexicon: &Lexicon, id: StateId) -> (String, String) {
    (
        functor(lexicon, id.kind).to_string(),
        format!("{}-{}", prefix(lexicon, id.kind), id.index),
    )
}

pub fn render_instruction(lexicon: &Lexicon, variant: InstructionVariant, env: &EnvConfig) -> String {
    let box_arg = format!("{}-{}", lexicon.box_prefix, 3.min(env.num_boxes - 1));
    let key_arg = format!("{}-{}", lexicon.key_prefix, 1.min(env.num_keys - 1));
    let opened = &lexicon.opened_functor;
    let obtained = &lexicon.obtained_functor;

    let mut text = format!(
        "Instructions: As an agent, you need to find the way to go out of this quest. \
         Currently, there are several boxes in front of you and there is a key inside each box. \
         You can use only one of these keys to open the door and finish this quest. \
         There are {} boxes and {} keys here.",
        env.num_boxes, env.num_keys
    );
    if lexicon.mode.any_synthetic() {
        text.push_str(&format!(
            " Boxes are identified as {}-X and Keys are identified as {}-X.",
            lexicon.box_prefix, lexicon.key_prefix
        ));
    }

    // (literal, negated?) for the "set" sentence pair and the "unset" pair
    let (set, unset) = match variant {
        InstructionVariant::Normal => (("True", ""), ("False", "not ")),
        InstructionVariant::CounterOutputFormat => (("False", ""), ("True", "not ")),
        InstructionVariant::CounterLanguageInstruction => (("True", "Not "), ("False", "")),
    };
    for (literal, neg) in [set, unset] {
        text.push_str(&format!(
            " {opened}({box_arg})={literal} means that {box_arg} has {neg}been opened. \
             {obtained}({key_arg})={literal} means that {key_arg} has {neg}been obtained."
        ));
    }
    text
}

pub fn render_step(step_index: usize, action: StepAction, lexicon: &Lexicon, distractor: Option<&str>) -> String {
    if step_index == 0 {
        return STEP_ZERO.to_string();
    }
    let mut s = format!(
        "Step-{step_index}: Open {}-{} and retrieve {}-{}.",
        lexicon.box_prefix, action.box_index, lexicon.key_prefix, action.key_index
    );
    if let Some(d) = distractor {
        s.push(' ');
        s.push_str(d);
    }
    s
}

pub fn render_query(env: &EnvConfig, lexicon: &Lexicon) -> String {
    let atoms: Vec<String> = env
        .query()
        .into_iter()
        .map(|id| {
            let (f, a) = atom_parts(lexicon, id);
            format!("{f}({a})=?")
        })
        .collect();
    format!("Question: {}", atoms.join(" "))
}

/// One expected atom in rendered-token space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedAtom {
    pub state: StateId,
    pub functor: String,
    pub argument: String,
    /// `true` iff the rendered literal is `True`.
    pub rendered: bool,
}

impl ExpectedAtom {
    pub fn token(&self) -> &'static str {
        if self.rendered {
            "True"
        } else {
            "False"
        }
    }
}

/// The expected enumeration for `state`, in config ordering, rendered under `variant`.
pub fn expected_atoms(
    state: &GroundState,
    env: &EnvConfig,
    lexicon: &Lexicon,
    variant: InstructionVariant,
) -> Vec<ExpectedAtom> {
    env.query()
        .into_iter()
        .map(|id| {
            let value = state.get(id).unwrap_or(false);
            let (functor, argument) = atom_parts(lexicon, id);
            ExpectedAtom {
                state: id,
                functor,
                argument,
                rendered: render_truth(value, variant) == "True",
            }
        })
        .collect()
}

pub fn format_answer(atoms: &[ExpectedAtom]) -> String {
    let body: Vec<String> = atoms
        .iter()
        .map(|a| format!("{}({})={}", a.functor, a.argument, a.token()))
        .collect();
    format!("Answer: {}", body.join(", "))
}

pub fn render_answer(state: &GroundState, env: &EnvConfig, lexicon: &Lexicon, variant: InstructionVariant) -> String {
    format_answer(&expected_atoms(state, env, lexicon, variant))
}

pub fn assemble(bundle: &PromptBundle, style: RenderStyle) -> MessageList {
    let mut messages = vec![Message::new(Role::System, SYSTEM_MESSAGE)];
    let tail = bundle
        .bare_steps
        .iter()
        .map(String::as_str)
        .chain([bundle.test_step.as_str(), bundle.test_question.as_str()]);
    match style {
        RenderStyle::Traditional => {
            let mut lines: Vec<&str> = vec![&bundle.instruction];
            for d in &bundle.demo_blocks {
                lines.extend([d.step.as_str(), d.question.as_str(), d.answer.as_str()]);
            }
            lines.extend(tail);
            messages.push(Message::new(Role::User, lines.join("\n")));
        }
        RenderStyle::FakedMultiRound => {
            messages.push(Message::new(Role::User, bundle.instruction.clone()));
            for d in &bundle.demo_blocks {
                messages.push(Message::new(Role::User, format!("{}\n{}", d.step, d.question)));
                messages.push(Message::new(Role::Assistant, d.answer.clone()));
            }
            messages.push(Message::new(Role::User, tail.collect::<Vec<_>>().join("\n")));
        }
    }
    messages
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genesis::LexiconMode;

    fn listing_lexicon() -> Lexicon {
        Lexicon {
            opened_functor: "NvSWxzvJb".into(),
            obtained_functor: "B".into(),
            box_prefix: "jqC".into(),
            key_prefix: "bsS".into(),
            mode: LexiconMode::SYNTHETIC,
        }
    }

    fn env(n: usize) -> EnvConfig {
        EnvConfig::new(n, n).unwrap()
    }

    #[test]
    fn truth_rendering() {
        use InstructionVariant::*;
        assert_eq!(render_truth(true, Normal), "True");
        assert_eq!(render_truth(false, Normal), "False");
        assert_eq!(render_truth(true, CounterOutputFormat), "False");
        assert_eq!(render_truth(false, CounterOutputFormat), "True");
        assert_eq!(render_truth(false, CounterLanguageInstruction), "True");
        assert_eq!(render_truth(true, CounterLanguageInstruction), "False");
    }

    #[test]
    fn natural_normal_instruction() {
        let text = render_instruction(&Lexicon::natural(), InstructionVariant::Normal, &env(10));
        assert!(text.starts_with("Instructions: As an agent, you need to find the way to go out of this quest."));
        assert!(text.contains("OPENED(BOX-3)=True means that BOX-3 has been opened."));
        assert!(text.contains("OBTAINED(KEY-1)=True means that KEY-1 has been obtained."));
        assert!(text.contains("OPENED(BOX-3)=False means that BOX-3 has not been opened."));
        assert!(text.contains("There are 10 boxes and 10 keys here."));
        assert!(!text.contains("identified as"));
    }

    #[test]
    fn counter_output_format_instruction() {
        let text = render_instruction(&Lexicon::natural(), InstructionVariant::CounterOutputFormat, &env(10));
        assert!(text.contains(
            "OPENED(BOX-3)=False means that BOX-3 has been opened. \
             OBTAINED(KEY-1)=False means that KEY-1 has been obtained. \
             OPENED(BOX-3)=True means that BOX-3 has not been opened. \
             OBTAINED(KEY-1)=True means that KEY-1 has not been obtained."
        ));
    }

    #[test]
    fn counter_language_instruction() {
        let text = render_instruction(
            &Lexicon::natural(),
            InstructionVariant::CounterLanguageInstruction,
            &env(10),
        );
        assert!(text.contains(
            "OPENED(BOX-3)=True means that BOX-3 has Not been opened. \
             OBTAINED(KEY-1)=True means that KEY-1 has Not been obtained. \
             OPENED(BOX-3)=False means that BOX-3 has been opened. \
             OBTAINED(KEY-1)=False means that KEY-1 has been obtained."
        ));
    }

    #[test]
    fn synthetic_instruction_explains_identifiers() {
        let text = render_instruction(&listing_lexicon(), InstructionVariant::Normal, &env(5));
        assert!(text.contains("There are 5 boxes and 5 keys here."));
        assert!(text.contains("Boxes are identified as jqC-X and Keys are identified as bsS-X."));
        assert!(text.contains("NvSWxzvJb(jqC-3)=True means that jqC-3 has been opened."));
    }

    #[test]
    fn small_env_examples_stay_in_range() {
        let text = render_instruction(&Lexicon::natural(), InstructionVariant::Normal, &env(1));
        assert!(text.contains("OPENED(BOX-0)=True"));
        assert!(text.contains("OBTAINED(KEY-0)=True"));
    }

    #[test]
    fn step_rendering() {
        let lex = listing_lexicon();
        let a = StepAction::new(3, 2);
        assert_eq!(render_step(1, a, &lex, None), "Step-1: Open jqC-3 and retrieve bsS-2.");
        assert_eq!(
            render_step(1, a, &lex, Some("It is a nice day!")),
            "Step-1: Open jqC-3 and retrieve bsS-2. It is a nice day!"
        );
        assert_eq!(
            render_step(0, a, &lex, Some("ignored")),
            "Step-0: Initialization. Do nothing."
        );
    }

    #[test]
    fn query_rendering() {
        assert_eq!(
            render_query(&env(2), &listing_lexicon()),
            "Question: NvSWxzvJb(jqC-0)=? B(bsS-0)=? NvSWxzvJb(jqC-1)=? B(bsS-1)=?"
        );
        let q = render_query(&env(10), &Lexicon::natural());
        assert_eq!(q.matches("=?").count(), 20);
        assert!(q.starts_with("Question: OPENED(BOX-0)=? OBTAINED(KEY-0)=?"));
    }

    #[test]
    fn answer_rendering() {
        let e2 = env(2);
        let s = GroundState::from_flags(vec![true, false], vec![false, false]);
        assert_eq!(
            render_answer(&s, &e2, &listing_lexicon(), InstructionVariant::Normal),
            "Answer: NvSWxzvJb(jqC-0)=True, B(bsS-0)=False, NvSWxzvJb(jqC-1)=False, B(bsS-1)=False"
        );

        let e10 = env(10);
        let zero = GroundState::initial(&e10);
        let normal = render_answer(&zero, &e10, &Lexicon::natural(), InstructionVariant::Normal);
        assert_eq!(normal.matches("=False").count(), 20);
        let flipped = render_answer(
            &zero,
            &e10,
            &Lexicon::natural(),
            InstructionVariant::CounterOutputFormat,
        );
        assert_eq!(flipped.matches("=True").count(), 20);
    }

    fn bundle() -> PromptBundle {
        let demo = |i: usize| DemoBlock {
            step: format!("Step-{i}: s"),
            question: "Question: q".into(),
            answer: format!("Answer: a{i}"),
        };
        PromptBundle {
            instruction: "Instructions: x".into(),
            demo_blocks: (0..3).map(demo).collect(),
            bare_steps: vec!["Step-3: b".into()],
            test_step: "Step-4: t".into(),
            test_question: "Question: q".into(),
        }
    }

    #[test]
    fn traditional_is_two_messages() {
        let m = assemble(&bundle(), RenderStyle::Traditional);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], Message::new(Role::System, SYSTEM_MESSAGE));
        assert_eq!(
            m[1].content,
            "Instructions: x\nStep-0: s\nQuestion: q\nAnswer: a0\nStep-1: s\nQuestion: q\nAnswer: a1\n\
             Step-2: s\nQuestion: q\nAnswer: a2\nStep-3: b\nStep-4: t\nQuestion: q"
        );
    }

    #[test]
    fn faked_multi_round_layout() {
        let b = bundle();
        let m = assemble(&b, RenderStyle::FakedMultiRound);
        // system, instruction, (user, assistant) per demo, then the test turn
        assert_eq!(m.len(), 3 + 2 * b.demo_blocks.len());
        assert_eq!(m[0].role, Role::System);
        assert_eq!(m[1], Message::new(Role::User, "Instructions: x"));
        for (i, d) in b.demo_blocks.iter().enumerate() {
            assert_eq!(m[2 + 2 * i].role, Role::User);
            assert_eq!(m[3 + 2 * i], Message::new(Role::Assistant, d.answer.clone()));
        }
        assert_eq!(m.last().unwrap().content, "Step-3: b\nStep-4: t\nQuestion: q");

        let trad = &assemble(&b, RenderStyle::Traditional)[1].content;
        for msg in &m[1..] {
            assert!(trad.contains(&msg.content));
        }
    }
}
