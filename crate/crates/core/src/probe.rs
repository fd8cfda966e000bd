//! Experiment protocols: final-query testing, intermediate state probing and
//! compressed initialization.

use crate::client::{Agent, ClientError, OracleView};
use crate::env::{EnvError, GroundState, StepAction};
use crate::genesis::Instance;
use crate::metrics::{classify_transitions, score_step, MetricsError, StepObservation, StepScore, TransitionRecord};
use crate::parse::{parse_response, PredictionMap};
use crate::prompt::{
    assemble, expected_atoms, format_answer, render_instruction, render_query, render_step, DemoBlock, ExpectedAtom,
    MessageList, PromptBundle, RenderStyle, STEP_ZERO,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    FinalQuery,
    IntermediateProbing,
    /// Skip the first `k` steps; query every remaining step when `per_step`.
    CompressedInit {
        k: usize,
        per_step: bool,
    },
}

impl Protocol {
    pub fn tag(&self) -> String {
        match self {
            Protocol::FinalQuery => "final".into(),
            Protocol::IntermediateProbing => "intermediate".into(),
            Protocol::CompressedInit { k, per_step: false } => format!("compressed-k{k}"),
            Protocol::CompressedInit { k, per_step: true } => format!("compressed-k{k}-per-step"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("compression length {k} must satisfy 1 <= k < {len}")]
    BadK { k: usize, len: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("fatal client error: {0}")]
    Fatal(ClientError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// The view of an instance a protocol runs over: an initial state, the steps
/// still to apply (1-based in rendering) and the demonstration window.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    instance: &'a Instance,
    /// Original index of this episode's Step-0.
    offset: usize,
    steps: &'a [StepAction],
    /// `states[t]` is the ground state after `t` episode steps.
    states: Vec<GroundState>,
    demos: usize,
}

impl<'a> Episode<'a> {
    pub fn full(instance: &'a Instance) -> Result<Self, ProbeError> {
        Self::skip(instance, 0)
    }

    /// Compressed view with the first `k` steps folded into Step-0.
    pub fn compressed(instance: &'a Instance, k: usize) -> Result<Self, ProbeError> {
        if k == 0 || k >= instance.steps.len() {
            return Err(ProbeError::BadK {
                k,
                len: instance.steps.len(),
            });
        }
        Self::skip(instance, k)
    }

    fn skip(instance: &'a Instance, k: usize) -> Result<Self, ProbeError> {
        let initial = GroundState::initial(&instance.env).replay(&instance.steps[..k])?;
        let steps = &instance.steps[k..];
        let mut states = Vec::with_capacity(steps.len() + 1);
        states.push(initial);
        for &a in steps {
            let next = states.last().expect("nonempty").apply(a)?;
            states.push(next);
        }
        Ok(Self {
            instance,
            offset: k,
            steps,
            states,
            demos: instance.n_shots.min(steps.len().saturating_sub(1)),
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of demonstrated steps after Step-0.
    pub fn demos(&self) -> usize {
        self.demos
    }

    pub fn state(&self, t: usize) -> &GroundState {
        &self.states[t]
    }

    pub fn expected(&self, t: usize) -> Vec<ExpectedAtom> {
        let i = self.instance;
        expected_atoms(&self.states[t], &i.env, &i.lexicon, i.variant)
    }

    pub fn answer_text(&self, t: usize) -> String {
        format_answer(&self.expected(t))
    }

    fn step_text(&self, t: usize) -> String {
        if t == 0 {
            return STEP_ZERO.to_string();
        }
        let i = self.instance;
        render_step(t, self.steps[t - 1], &i.lexicon, i.distractor(self.offset + t))
    }

    /// Prompt for a query at step `s` (1-based).
    pub fn bundle_for(&self, s: usize) -> PromptBundle {
        let i = self.instance;
        let question = render_query(&i.env, &i.lexicon);
        let shown = (s - 1).min(self.demos);
        let demo_blocks = (0..=shown)
            .map(|t| DemoBlock {
                step: self.step_text(t),
                question: question.clone(),
                answer: self.answer_text(t),
            })
            .collect();
        PromptBundle {
            instruction: render_instruction(&i.lexicon, i.variant, &i.env),
            demo_blocks,
            bare_steps: (shown + 1..s).map(|t| self.step_text(t)).collect(),
            test_step: self.step_text(s),
            test_question: question,
        }
    }

    pub fn messages_for(&self, s: usize, style: RenderStyle) -> MessageList {
        assemble(&self.bundle_for(s), style)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub step: usize,
    pub messages: MessageList,
    pub expected_answer: String,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub failure: Option<String>,
    #[serde(default)]
    pub prediction: Option<PredictionMap>,
    #[serde(default)]
    pub score: Option<StepScore>,
}

impl QueryRecord {
    pub fn responded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTransitions {
    pub step: usize,
    pub record: TransitionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub instance_id: String,
    pub protocol: Protocol,
    pub style: RenderStyle,
    /// Number of demonstrated steps after Step-0.
    pub demo_window: usize,
    pub queries: Vec<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Vec<StepTransitions>>,
}

impl Trial {
    pub fn observations(&self) -> Vec<StepObservation> {
        self.queries
            .iter()
            .map(|q| StepObservation {
                step: q.step,
                score: q.score,
                transitions: self
                    .transitions
                    .as_ref()
                    .and_then(|ts| ts.iter().find(|t| t.step == q.step))
                    .map(|t| t.record.counts),
            })
            .collect()
    }

    pub fn responded(&self) -> usize {
        self.queries.iter().filter(|q| q.responded()).count()
    }
}

fn query<A: Agent + ?Sized>(
    episode: &Episode<'_>,
    s: usize,
    style: RenderStyle,
    agent: &A,
) -> Result<QueryRecord, ProbeError> {
    let i = episode.instance;
    let messages = episode.messages_for(s, style);
    let expected = episode.expected(s);
    let view = OracleView {
        expected_answer: format_answer(&expected),
        previous_answer: episode.answer_text(s - 1),
    };
    let mut record = QueryRecord {
        step: s,
        messages,
        expected_answer: view.expected_answer.clone(),
        response: None,
        retries: 0,
        failure: None,
        prediction: None,
        score: None,
    };
    match agent.complete(&record.messages, &view) {
        Ok(c) => {
            let pred = parse_response(&c.content, &i.env.query(), &i.lexicon);
            record.score = Some(score_step(&pred, &expected));
            record.prediction = Some(pred);
            record.response = Some(c.content);
            record.retries = c.retries;
        }
        Err(e) if e.is_fatal() => return Err(ProbeError::Fatal(e)),
        Err(e) => {
            warn!(instance = %i.id, step = s, error = %e, "query failed");
            record.failure = Some(e.to_string());
        }
    }
    Ok(record)
}

fn run_single<A: Agent + ?Sized>(
    episode: &Episode<'_>,
    protocol: Protocol,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    let last = episode.len();
    Ok(Trial {
        instance_id: episode.instance.id.clone(),
        protocol,
        style,
        demo_window: episode.demos(),
        queries: vec![query(episode, last, style, agent)?],
        transitions: None,
    })
}

fn run_per_step<A: Agent + ?Sized>(
    episode: &Episode<'_>,
    protocol: Protocol,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    let i = episode.instance;
    let query_ids = i.env.query();
    let mut queries = Vec::with_capacity(episode.len());
    for s in 1..=episode.len() {
        queries.push(query(episode, s, style, agent)?);
    }
    let mut transitions = Vec::with_capacity(queries.len());
    for s in 1..=episode.len() {
        // inside the demonstration window the shown answer stands in for a prediction
        let demo_prev;
        let prev = if s - 1 <= episode.demos() {
            demo_prev = parse_response(&episode.answer_text(s - 1), &query_ids, &i.lexicon);
            Some(&demo_prev)
        } else {
            queries[s - 2].prediction.as_ref()
        };
        let record = classify_transitions(
            prev,
            queries[s - 1].prediction.as_ref(),
            &episode.expected(s - 1),
            &episode.expected(s),
            &episode.steps[s - 1].touched(),
        )?;
        transitions.push(StepTransitions { step: s, record });
    }
    Ok(Trial {
        instance_id: i.id.clone(),
        protocol,
        style,
        demo_window: episode.demos(),
        queries,
        transitions: Some(transitions),
    })
}

pub fn run_final_query<A: Agent + ?Sized>(
    instance: &Instance,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    run_single(&Episode::full(instance)?, Protocol::FinalQuery, style, agent)
}

pub fn run_intermediate_probing<A: Agent + ?Sized>(
    instance: &Instance,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    run_per_step(&Episode::full(instance)?, Protocol::IntermediateProbing, style, agent)
}

pub fn run_compressed_init<A: Agent + ?Sized>(
    instance: &Instance,
    k: usize,
    per_step: bool,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    let episode = Episode::compressed(instance, k)?;
    let protocol = Protocol::CompressedInit { k, per_step };
    if per_step {
        run_per_step(&episode, protocol, style, agent)
    } else {
        run_single(&episode, protocol, style, agent)
    }
}

pub fn run_trial<A: Agent + ?Sized>(
    instance: &Instance,
    protocol: Protocol,
    style: RenderStyle,
    agent: &A,
) -> Result<Trial, ProbeError> {
    match protocol {
        Protocol::FinalQuery => run_final_query(instance, style, agent),
        Protocol::IntermediateProbing => run_intermediate_probing(instance, style, agent),
        Protocol::CompressedInit { k, per_step } => run_compressed_init(instance, k, per_step, style, agent),
    }
}

/// Runs trials on up to `concurrency` worker threads. Output order matches
/// input order. Per-trial errors are returned in place; the first fatal
/// client error aborts the whole batch.
pub fn run_batch<A: Agent + ?Sized>(
    instances: &[Instance],
    protocol: Protocol,
    style: RenderStyle,
    agent: &A,
    concurrency: usize,
) -> Result<Vec<Result<Trial, ProbeError>>, ProbeError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| ProbeError::Pool(e.to_string()))?;
    pool.install(|| {
        instances
            .par_iter()
            .map(|inst| match run_trial(inst, protocol, style, agent) {
                Err(ProbeError::Fatal(e)) => Err(ProbeError::Fatal(e)),
                other => Ok(other),
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{AgentInfo, Completion, ScriptedAgent, ScriptedAgentKind};
    use crate::genesis::{gen_instance, InstanceSettings, InstructionVariant, LexiconMode};
    use crate::prompt::Role;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn instance(seed: u64, n_shots: usize) -> Instance {
        let settings = InstanceSettings::new(LexiconMode::SYNTHETIC, InstructionVariant::Normal, n_shots);
        gen_instance(seed, &settings).unwrap()
    }

    fn oracle() -> ScriptedAgent {
        ScriptedAgent::new(ScriptedAgentKind::Oracle)
    }

    #[test]
    fn final_query_shape() {
        let inst = instance(3, 2);
        let trial = run_final_query(&inst, RenderStyle::Traditional, &oracle()).unwrap();
        assert_eq!(trial.queries.len(), 1);
        assert_eq!(trial.queries[0].step, inst.steps.len());
        assert!(trial.queries[0].score.as_ref().unwrap().step_em);
        let bundle = Episode::full(&inst).unwrap().bundle_for(inst.steps.len());
        assert_eq!(bundle.demo_blocks.len(), 3);
        assert_eq!(bundle.bare_steps.len(), inst.steps.len() - 3);
        assert_eq!(bundle.demo_blocks[0].step, STEP_ZERO);
    }

    #[test]
    fn probing_queries_every_step() {
        let inst = instance(5, 3);
        let trial = run_intermediate_probing(&inst, RenderStyle::Traditional, &oracle()).unwrap();
        let steps: Vec<_> = trial.queries.iter().map(|q| q.step).collect();
        assert_eq!(steps, (1..=inst.steps.len()).collect::<Vec<_>>());
        assert!(trial.queries.iter().all(|q| q.score.as_ref().unwrap().step_em));
        for t in trial.transitions.unwrap() {
            let c = &t.record.counts;
            assert_eq!(c.cu, 2);
            assert_eq!(c.mc, 18);
        }
    }

    #[test]
    fn first_probe_shows_only_step_zero() {
        let inst = instance(8, 2);
        let b = Episode::full(&inst).unwrap().bundle_for(1);
        assert_eq!(b.demo_blocks.len(), 1);
        assert_eq!(b.demo_blocks[0].step, STEP_ZERO);
        assert!(b.bare_steps.is_empty());
        assert!(b.test_step.starts_with("Step-1: "));
    }

    #[test]
    fn last_probe_matches_final_query() {
        for seed in 0..20 {
            for style in [RenderStyle::Traditional, RenderStyle::FakedMultiRound] {
                let inst = instance(seed, [2, 3, 5][seed as usize % 3]);
                let fq = run_final_query(&inst, style, &oracle()).unwrap();
                let ip = run_intermediate_probing(&inst, style, &oracle()).unwrap();
                assert_eq!(fq.queries[0].messages, ip.queries.last().unwrap().messages);
            }
        }
    }

    #[test]
    fn compression_renumbers_and_preserves_state() {
        let inst = instance(11, 2);
        let len = inst.steps.len();
        let k = len - 1;
        let ep = Episode::compressed(&inst, k).unwrap();
        assert_eq!(ep.len(), 1);
        assert_eq!(ep.demos(), 0);
        let replayed = GroundState::initial(&inst.env).replay(&inst.steps[..k]).unwrap();
        assert_eq!(ep.state(0), &replayed);
        let b = ep.bundle_for(1);
        assert_eq!(
            b.demo_blocks[0].answer,
            crate::prompt::render_answer(&replayed, &inst.env, &inst.lexicon, inst.variant)
        );
        assert!(b.test_step.starts_with("Step-1: "));
        let trial = run_compressed_init(&inst, k, false, RenderStyle::Traditional, &oracle()).unwrap();
        assert!(trial.queries[0].score.as_ref().unwrap().step_em);
    }

    #[test]
    fn bad_k_rejected() {
        let inst = instance(1, 2);
        let len = inst.steps.len();
        for k in [0, len, len + 3] {
            assert!(matches!(
                run_compressed_init(&inst, k, false, RenderStyle::Traditional, &oracle()),
                Err(ProbeError::BadK { .. })
            ));
        }
    }

    #[test]
    fn skip_zero_is_the_full_episode() {
        let inst = instance(2, 3);
        let a = Episode::skip(&inst, 0).unwrap();
        let b = Episode::full(&inst).unwrap();
        for s in 1..=inst.steps.len() {
            assert_eq!(a.bundle_for(s), b.bundle_for(s));
        }
    }

    #[test]
    fn reruns_are_identical() {
        let inst = instance(4, 2);
        let agent = ScriptedAgent::new(ScriptedAgentKind::RandomTruth { seed: 3 });
        let a = run_intermediate_probing(&inst, RenderStyle::Traditional, &agent).unwrap();
        let b = run_intermediate_probing(&inst, RenderStyle::Traditional, &agent).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    /// Fails every query at one step.
    struct FailAt(usize, AtomicUsize);

    impl Agent for FailAt {
        fn complete(&self, messages: &MessageList, view: &OracleView) -> Result<Completion, ClientError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            let last = &messages.last().unwrap().content;
            if last.contains(&format!("Step-{}: ", self.0)) && !last.contains(&format!("Step-{}: ", self.0 + 1)) {
                return Err(ClientError::Exhausted {
                    attempts: 1,
                    last: "boom".into(),
                });
            }
            Ok(Completion {
                content: view.expected_answer.clone(),
                retries: 0,
            })
        }

        fn info(&self) -> AgentInfo {
            AgentInfo {
                name: "fail-at".into(),
                model: None,
                decoding: None,
            }
        }
    }

    #[test]
    fn failed_query_leaves_neighbours_unresolved() {
        let inst = instance(21, 2);
        assert!(inst.steps.len() >= 4);
        let agent = FailAt(3, AtomicUsize::new(0));
        let trial = run_intermediate_probing(&inst, RenderStyle::Traditional, &agent).unwrap();
        assert_eq!(agent.1.load(Ordering::SeqCst), inst.steps.len());
        assert!(!trial.queries[2].responded());
        let tr = trial.transitions.unwrap();
        assert_eq!(tr[2].record.counts.unresolved, 20);
        if inst.steps.len() > 3 {
            assert_eq!(tr[3].record.counts.unresolved, 20);
        }
        assert_eq!(tr[1].record.counts.unresolved, 0);
    }

    #[test]
    fn fatal_errors_abort() {
        struct Denied;
        impl Agent for Denied {
            fn complete(&self, _: &MessageList, _: &OracleView) -> Result<Completion, ClientError> {
                Err(ClientError::Auth { status: 401 })
            }
            fn info(&self) -> AgentInfo {
                AgentInfo {
                    name: "denied".into(),
                    model: None,
                    decoding: None,
                }
            }
        }
        let insts: Vec<_> = (0..4).map(|s| instance(s, 2)).collect();
        let r = run_batch(&insts, Protocol::FinalQuery, RenderStyle::Traditional, &Denied, 2);
        assert!(matches!(r, Err(ProbeError::Fatal(_))));
    }

    #[test]
    fn batch_preserves_order() {
        let insts: Vec<_> = (0..16).map(|s| instance(s, 2)).collect();
        let trials: Vec<Trial> = run_batch(&insts, Protocol::FinalQuery, RenderStyle::FakedMultiRound, &oracle(), 4)
            .unwrap()
            .into_iter()
            .map(Result::unwrap)
            .collect();
        let ids: Vec<_> = trials.iter().map(|t| t.instance_id.clone()).collect();
        let want: Vec<_> = insts.iter().map(|i| i.id.clone()).collect();
        assert_eq!(ids, want);
        assert!(trials[0].queries[0].messages.iter().any(|m| m.role == Role::Assistant));
    }

    #[test]
    fn batch_keeps_per_trial_errors() {
        let insts: Vec<_> = (0..6).map(|s| instance(s, 2)).collect();
        let k = insts.iter().map(|i| i.steps.len()).min().unwrap();
        let out = run_batch(
            &insts,
            Protocol::CompressedInit { k, per_step: false },
            RenderStyle::Traditional,
            &oracle(),
            3,
        )
        .unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().any(|r| matches!(r, Err(ProbeError::BadK { .. }))));
    }
}
