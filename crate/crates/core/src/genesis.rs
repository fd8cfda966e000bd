//! Seeded generation of test instances.
//!
//! An [`Instance`] is a pure function of `(seed, InstanceSettings)`. Independent
//! ChaCha streams are used for the step sequence, the lexicon and the
//! distractors, so switching the instruction variant or the lexicon mode never
//! changes the underlying action sequence for a given seed.

use crate::env::{EnvConfig, EnvError, StepAction};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Shot counts used by the experiment matrix.
pub const SHOT_COUNTS: [usize; 3] = [2, 3, 5];

const MAX_TOKEN_LEN: usize = 10;
const MAX_RESAMPLES: usize = 1000;
const ALPHANUMERIC: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

const STREAM_STEPS: u64 = 0;
const STREAM_LEXICON: u64 = 1;
const STREAM_DISTRACTORS: u64 = 2;

static BUNDLED_DISTRACTORS: &str = include_str!("../data/distractors.txt");

#[derive(Debug, Error)]
pub enum GenError {
    #[error("could not draw a valid lexicon after {0} attempts")]
    GeneratorExhausted(usize),
    #[error("cannot draw {count} steps from an environment with {num_boxes} boxes and {num_keys} keys")]
    CountTooLarge {
        count: usize,
        num_boxes: usize,
        num_keys: usize,
    },
    #[error("distractor pool is empty")]
    EmptyPool,
    #[error("unsupported shot count {n_shots}: need one of {SHOT_COUNTS:?} leaving at least one extra step (max {max_steps} steps)")]
    InvalidShots { n_shots: usize, max_steps: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("reading distractor file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolMode {
    Natural,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LexiconMode {
    pub functor: SymbolMode,
    pub argument: SymbolMode,
}

impl LexiconMode {
    pub const NATURAL: Self = Self::new(SymbolMode::Natural, SymbolMode::Natural);
    pub const SYNTHETIC: Self = Self::new(SymbolMode::Synthetic, SymbolMode::Synthetic);

    pub const fn new(functor: SymbolMode, argument: SymbolMode) -> Self {
        Self { functor, argument }
    }

    /// All four functor/argument combinations.
    pub fn all() -> [Self; 4] {
        use SymbolMode::*;
        [
            Self::new(Natural, Natural),
            Self::new(Synthetic, Natural),
            Self::new(Natural, Synthetic),
            Self::new(Synthetic, Synthetic),
        ]
    }

    /// Short tag such as `nl-sl` (functor first).
    pub fn tag(&self) -> &'static str {
        use SymbolMode::*;
        match (self.functor, self.argument) {
            (Natural, Natural) => "nl-nl",
            (Synthetic, Natural) => "sl-nl",
            (Natural, Synthetic) => "nl-sl",
            (Synthetic, Synthetic) => "sl-sl",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::all().into_iter().find(|m| m.tag() == tag)
    }

    pub fn label(&self) -> &'static str {
        use SymbolMode::*;
        match (self.functor, self.argument) {
            (Natural, Natural) => "NL Functor + NL Argument",
            (Synthetic, Natural) => "SL Functor + NL Argument",
            (Natural, Synthetic) => "NL Functor + SL Argument",
            (Synthetic, Synthetic) => "SL Functor + SL Argument",
        }
    }

    pub fn any_synthetic(&self) -> bool {
        self.functor == SymbolMode::Synthetic || self.argument == SymbolMode::Synthetic
    }
}

impl fmt::Display for LexiconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Surface symbols used to render state atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lexicon {
    pub opened_functor: String,
    pub obtained_functor: String,
    pub box_prefix: String,
    pub key_prefix: String,
    pub mode: LexiconMode,
}

impl Lexicon {
    pub fn natural() -> Self {
        Self {
            opened_functor: "OPENED".into(),
            obtained_functor: "OBTAINED".into(),
            box_prefix: "BOX".into(),
            key_prefix: "KEY".into(),
            mode: LexiconMode::NATURAL,
        }
    }

    pub fn tokens(&self) -> [&str; 4] {
        [
            &self.opened_functor,
            &self.obtained_functor,
            &self.box_prefix,
            &self.key_prefix,
        ]
    }

    /// Checks token shape, pairwise distinctness and truth-literal collisions.
    pub fn is_valid(&self) -> bool {
        let tokens = self.tokens();
        let shape_ok = tokens.iter().all(|t| is_symbol_token(t));
        let literal_free = tokens
            .iter()
            .all(|t| !t.eq_ignore_ascii_case("true") && !t.eq_ignore_ascii_case("false"));
        let distinct = (0..4).all(|i| (i + 1..4).all(|j| tokens[i] != tokens[j]));
        shape_ok && literal_free && distinct
    }
}

fn is_symbol_token(t: &str) -> bool {
    (1..=MAX_TOKEN_LEN).contains(&t.len()) && t.bytes().all(|b| b.is_ascii_alphanumeric())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionVariant {
    #[default]
    Normal,
    /// Meaning statements swap which truth literal denotes "opened".
    CounterOutputFormat,
    /// Literals stay put; negation in the meaning prose is moved instead.
    CounterLanguageInstruction,
}

impl InstructionVariant {
    pub const ALL: [Self; 3] = [
        Self::Normal,
        Self::CounterLanguageInstruction,
        Self::CounterOutputFormat,
    ];

    /// Whether rendered truth literals are flipped relative to ground truth.
    pub fn flips_truth(&self) -> bool {
        !matches!(self, Self::Normal)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::CounterOutputFormat => "counter-output-format",
            Self::CounterLanguageInstruction => "counter-language-instruction",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    /// Row-block heading used in summary tables.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Normal => "Normal Instruction",
            Self::CounterLanguageInstruction => "Counter-Intuitive Instruction (On NL)",
            Self::CounterOutputFormat => "Counter-Intuitive Instruction (Truth Values Switching)",
        }
    }
}

impl fmt::Display for InstructionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Everything except the seed that determines an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceSettings {
    pub env: EnvConfig,
    pub mode: LexiconMode,
    pub variant: InstructionVariant,
    pub n_shots: usize,
    pub distractors: bool,
}

impl InstanceSettings {
    pub fn new(mode: LexiconMode, variant: InstructionVariant, n_shots: usize) -> Self {
        Self {
            env: EnvConfig::default(),
            mode,
            variant,
            n_shots,
            distractors: false,
        }
    }

    pub fn with_distractors(mut self, on: bool) -> Self {
        self.distractors = on;
        self
    }

    /// Longest episode the environment allows: every step consumes one box and one key.
    pub fn max_steps(&self) -> usize {
        self.env.num_boxes.min(self.env.num_keys)
    }

    /// Cell tag, e.g. `sl-sl.normal.2shot` or `nl-nl.normal.5shot.distract`.
    pub fn cell_tag(&self) -> String {
        let mut tag = format!("{}.{}.{}shot", self.mode.tag(), self.variant.tag(), self.n_shots);
        if self.distractors {
            tag.push_str(".distract");
        }
        tag
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub lexicon: Lexicon,
    pub variant: InstructionVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<Vec<String>>,
    pub steps: Vec<StepAction>,
    pub n_shots: usize,
}

impl Instance {
    pub fn distractor(&self, step: usize) -> Option<&str> {
        // steps are 1-based in rendering
        step.checked_sub(1)
            .and_then(|i| self.distractors.as_ref()?.get(i))
            .map(String::as_str)
    }

    /// Steps after the demonstration window, including the test step.
    pub fn post_demo_steps(&self) -> usize {
        self.steps.len().saturating_sub(self.n_shots)
    }
}

/// Sentences appended to steps as distractors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistractorPool {
    sentences: Vec<String>,
}

impl Default for DistractorPool {
    fn default() -> Self {
        Self::bundled()
    }
}

impl DistractorPool {
    pub fn bundled() -> Self {
        Self::from_lines(BUNDLED_DISTRACTORS).expect("bundled distractor pool is non-empty")
    }

    pub fn new(sentences: Vec<String>) -> Result<Self, GenError> {
        if sentences.is_empty() {
            return Err(GenError::EmptyPool);
        }
        Ok(Self { sentences })
    }

    /// Newline-delimited sentences; blank lines are skipped.
    pub fn from_lines(text: &str) -> Result<Self, GenError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self, GenError> {
        Self::from_lines(&std::fs::read_to_string(path)?)
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn random_token<R: Rng + ?Sized>(rng: &mut R) -> String {
    let len = rng.random_range(1..=MAX_TOKEN_LEN);
    (0..len)
        .map(|_| *ALPHANUMERIC.choose(rng).expect("non-empty alphabet") as char)
        .collect()
}

pub fn gen_lexicon<R: Rng + ?Sized>(rng: &mut R, mode: LexiconMode) -> Result<Lexicon, GenError> {
    let natural = Lexicon::natural();
    for _ in 0..MAX_RESAMPLES {
        let mut pick = |m: SymbolMode, nat: &str| match m {
            SymbolMode::Natural => nat.to_string(),
            SymbolMode::Synthetic => random_token(rng),
        };
        let lex = Lexicon {
            opened_functor: pick(mode.functor, &natural.opened_functor),
            obtained_functor: pick(mode.functor, &natural.obtained_functor),
            box_prefix: pick(mode.argument, &natural.box_prefix),
            key_prefix: pick(mode.argument, &natural.key_prefix),
            mode,
        };
        if lex.is_valid() {
            return Ok(lex);
        }
    }
    Err(GenError::GeneratorExhausted(MAX_RESAMPLES))
}

/// Draws `count` steps; boxes and keys are each sampled without replacement,
/// independently of one another.
pub fn gen_steps<R: Rng + ?Sized>(rng: &mut R, env: &EnvConfig, count: usize) -> Result<Vec<StepAction>, GenError> {
    if count > env.num_boxes.min(env.num_keys) {
        return Err(GenError::CountTooLarge {
            count,
            num_boxes: env.num_boxes,
            num_keys: env.num_keys,
        });
    }
    let mut boxes: Vec<usize> = (0..env.num_boxes).collect();
    let mut keys: Vec<usize> = (0..env.num_keys).collect();
    let (boxes, _) = boxes.partial_shuffle(rng, count);
    let boxes = boxes.to_vec();
    let (keys, _) = keys.partial_shuffle(rng, count);
    Ok(boxes
        .into_iter()
        .zip(keys.iter().copied())
        .map(|(b, k)| StepAction::new(b, k))
        .collect())
}

pub fn gen_distractor<R: Rng + ?Sized>(rng: &mut R, pool: &DistractorPool) -> Result<String, GenError> {
    pool.sentences.choose(rng).cloned().ok_or(GenError::EmptyPool)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates a fully resolved instance using the bundled distractor pool.
pub fn gen_instance(seed: u64, settings: &InstanceSettings) -> Result<Instance, GenError> {
    gen_instance_with_pool(seed, settings, &DistractorPool::bundled())
}

pub fn gen_instance_with_pool(
    seed: u64,
    settings: &InstanceSettings,
    pool: &DistractorPool,
) -> Result<Instance, GenError> {
    let env = settings.env.validated()?;
    let max_steps = settings.max_steps();
    let n_shots = settings.n_shots;
    if !SHOT_COUNTS.contains(&n_shots) || n_shots + 1 > max_steps {
        return Err(GenError::InvalidShots { n_shots, max_steps });
    }

    let mut step_rng = stream(seed, STREAM_STEPS);
    let extra = step_rng.random_range(1..=max_steps - n_shots);
    let steps = gen_steps(&mut step_rng, &env, n_shots + extra)?;

    let lexicon = gen_lexicon(&mut stream(seed, STREAM_LEXICON), settings.mode)?;

    let distractors = if settings.distractors {
        let mut rng = stream(seed, STREAM_DISTRACTORS);
        Some(
            (0..steps.len())
                .map(|_| gen_distractor(&mut rng, pool))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };

    Ok(Instance {
        id: format!("{}-{seed:016x}", settings.cell_tag()),
        seed,
        env,
        lexicon,
        variant: settings.variant,
        distractors,
        steps,
        n_shots,
    })
}
