//! Model-call interface shared by the four roles (generator, verifier,
//! iterator, comparator), plus call accounting.
//!
//! Every call goes through [`Caller`], which pins the decoding parameters of
//! the role and records one [`CallRecord`] per logical call.

mod scripted;
pub mod sim;
pub mod wire;

use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Answer, Decoding, Problem, RunConfig};
use crate::template::PromptSet;

pub use scripted::ScriptedBackend;
pub use sim::{simulate_iterate, IterateMode, ScriptedWorld, Simulator};
pub use wire::{RetryPolicy, WireBackend, WireConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Verifier,
    Iterator,
    Comparator,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Generator, Role::Verifier, Role::Iterator, Role::Comparator];
}

/// What a call is for. Together with the problem id, iteration and particle
/// index it identifies a call uniquely within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Generate,
    Score,
    Compare,
    LocalRefine,
    Explore,
    ScoreProposal,
    Critique,
    Rewrite,
    Debate,
    Conform,
    Synthesize,
    ScoreFinal,
    Aggregate,
}

impl CallPurpose {
    pub fn role(self) -> Role {
        use CallPurpose::*;
        match self {
            Generate | Aggregate => Role::Generator,
            Score | ScoreProposal | ScoreFinal => Role::Verifier,
            Compare => Role::Comparator,
            LocalRefine | Explore | Critique | Rewrite | Debate | Conform | Synthesize => Role::Iterator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallMeta {
    pub problem_id: String,
    pub iteration: usize,
    pub particle_index: usize,
    pub purpose: CallPurpose,
}

/// Structured facts the harness already knows about a call. Wire backends
/// ignore them; the simulator uses them instead of parsing prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallHints {
    /// Answer of the trace being verified or revised.
    pub current_answer: Option<Answer>,
    /// Number of steps of the trace being verified.
    pub n_steps: usize,
    /// Answer a rewrite is steered toward (conformist and follower moves).
    pub target_answer: Option<Answer>,
    /// Answers of other candidates (debate peers, synthesis groups,
    /// aggregation candidates, or the A/B pair of a comparison).
    pub other_answers: Vec<Option<Answer>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatCall {
    pub role: Role,
    pub prompt: String,
    pub decoding: Decoding,
    pub meta: CallMeta,
    pub hints: CallHints,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// True when the provider did not report usage and it was estimated from
    /// character counts.
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    /// `⌈chars / 4⌉` per side.
    pub fn estimate(prompt: &str, completion: &str) -> Self {
        Self {
            input_tokens: (prompt.chars().count() as u64).div_ceil(4),
            output_tokens: (completion.chars().count() as u64).div_ceil(4),
            estimated: true,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Attempts made, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportStatus {
    Ok,
    RetriableError,
    FatalError,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{status:?} after {attempts} attempt(s): {message}")]
pub struct BackendError {
    pub status: TransportStatus,
    pub message: String,
    pub attempts: u32,
}

impl BackendError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            status: TransportStatus::FatalError,
            message: message.into(),
            attempts: 1,
        }
    }
}

/// A model endpoint. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn call(&self, call: &ChatCall) -> Result<ChatReply, BackendError>;
}

/// One backend per role.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn ChatBackend>,
    pub verifier: Arc<dyn ChatBackend>,
    pub iterator: Arc<dyn ChatBackend>,
    pub comparator: Arc<dyn ChatBackend>,
}

impl Backends {
    pub fn uniform(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            generator: backend.clone(),
            verifier: backend.clone(),
            iterator: backend.clone(),
            comparator: backend,
        }
    }

    pub fn for_role(&self, role: Role) -> &dyn ChatBackend {
        match role {
            Role::Generator => self.generator.as_ref(),
            Role::Verifier => self.verifier.as_ref(),
            Role::Iterator => self.iterator.as_ref(),
            Role::Comparator => self.comparator.as_ref(),
        }
    }
}

/// Accounting entry for one logical call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub meta: CallMeta,
    pub role: Role,
    pub usage: Usage,
    pub status: TransportStatus,
    pub attempts: u32,
    #[serde(default)]
    pub latency_ms: u64,
}

impl CallRecord {
    fn sort_key(&self) -> (usize, CallPurpose, usize) {
        (self.meta.iteration, self.meta.purpose, self.meta.particle_index)
    }
}

/// Thread-safe collector of call records.
#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn push(&self, record: CallRecord) {
        self.records.lock().expect("call log poisoned").push(record);
    }

    /// Drains the log in a scheduling-independent order.
    pub fn take_sorted(&self) -> Vec<CallRecord> {
        let mut records = std::mem::take(&mut *self.records.lock().expect("call log poisoned"));
        records.sort_by_key(CallRecord::sort_key);
        records
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to issue calls for one problem.
pub struct Caller<'a> {
    pub problem: &'a Problem,
    pub backends: &'a Backends,
    pub prompts: &'a PromptSet,
    pub config: &'a RunConfig,
    pub log: &'a CallLog,
}

impl Caller<'_> {
    pub fn decoding(&self, role: Role) -> Decoding {
        let d = &self.config.decoding;
        match role {
            Role::Generator => d.generator,
            Role::Iterator => d.iterator,
            // Verifier and comparator always decode greedily.
            Role::Verifier => Decoding {
                temperature: 0.0,
                ..d.verifier
            },
            Role::Comparator => Decoding {
                temperature: 0.0,
                ..d.comparator
            },
        }
    }

    pub fn call(
        &self,
        purpose: CallPurpose,
        iteration: usize,
        particle_index: usize,
        prompt: String,
        hints: CallHints,
    ) -> Result<ChatReply, BackendError> {
        let role = purpose.role();
        let call = ChatCall {
            role,
            decoding: self.decoding(role),
            prompt,
            meta: CallMeta {
                problem_id: self.problem.id.clone(),
                iteration,
                particle_index,
                purpose,
            },
            hints,
        };
        let started = Instant::now();
        let result = self.backends.for_role(role).call(&call);
        let record = match &result {
            Ok(reply) => CallRecord {
                meta: call.meta,
                role,
                usage: reply.usage,
                status: TransportStatus::Ok,
                attempts: reply.attempts,
                latency_ms: reply.latency_ms,
            },
            Err(err) => CallRecord {
                meta: call.meta,
                role,
                usage: Usage::default(),
                status: err.status,
                attempts: err.attempts,
                latency_ms: started.elapsed().as_millis() as u64,
            },
        };
        self.log.push(record);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_estimate_rounds_up() {
        let u = Usage::estimate("abcde", "");
        assert_eq!((u.input_tokens, u.output_tokens, u.estimated), (2, 0, true));
        assert_eq!(Usage::estimate("abcd", "abcdefgh").output_tokens, 2);
    }

    #[test]
    fn verifier_and_comparator_are_greedy() {
        let mut config = RunConfig::default();
        config.decoding.verifier.temperature = 0.7;
        config.decoding.comparator.temperature = 0.5;
        let problem = Problem::new("p", "q");
        let backends = Backends::uniform(Arc::new(ScriptedBackend::constant("x")));
        let prompts = PromptSet::default();
        let log = CallLog::default();
        let caller = Caller {
            problem: &problem,
            backends: &backends,
            prompts: &prompts,
            config: &config,
            log: &log,
        };
        assert_eq!(caller.decoding(Role::Verifier).temperature, 0.0);
        assert_eq!(caller.decoding(Role::Comparator).temperature, 0.0);
        assert_eq!(caller.decoding(Role::Generator).temperature, 0.8);
        assert_eq!(caller.decoding(Role::Iterator).top_p, 0.9);
    }
}
