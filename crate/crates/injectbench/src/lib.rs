//! Benchmark harness for prompt-injection attacks on instruction-following
//! chat models.
//!
//! The crate measures how often adversarial text smuggled into a task's data
//! hijacks the model away from its original instruction, how well defenses
//! hold up, and — through an iterative refinement loop — synthesizes new
//! detection prompts that meet configurable quality gates.
//!
//! # Layout
//!
//! * [`task`] — benchmark tasks, datasets, prompt assembly, answer judging
//! * [`attack`] — attack strategies that splice an injected instruction into
//!   task data, plus attack ranking
//! * [`defense`] — prevention (delimiters, paraphrasing) and detection
//!   (known-answer, prompt-classifier) defenses
//! * [`gateway`] — model backends: mock, HTTP, response cache, batching
//! * [`metrics`] — trial records, tallies, rates and composite scores
//! * [`run`] — trial planning and resumable, cached execution over a worker
//!   pool
//! * [`report`] — ranking tables, score matrices and temperature sweeps
//!   rendered from stored metrics
//! * [`refine`] — the defense-prompt synthesis loop
//!
//! Start with the `examples/` directory: each file demonstrates one
//! capability end to end against a scripted in-process backend.

pub mod attack;
pub mod builtin;
pub mod config;
pub mod defense;
pub mod gateway;
pub mod metrics;
pub mod refine;
pub mod report;
pub mod run;
pub mod task;

pub use attack::{
    apply_attack, build_goal_hijack_payload, rank_attacks, select_top_attacks, AttackError,
    AttackPayload, AttackScores, AttackSpec, AttackStrategy, RankedAttack, DEFAULT_TOP_K,
};
pub use config::{
    BackendConfig, ConfigError, RefineConfig, RunConfig, TaskEntry, Thresholds, API_KEY_ENV,
};
pub use defense::{
    build_known_answer_probe, judge_known_answer, known_answer_secret, parse_classifier_verdict,
    wrap_with_delimiters, DefenseError, DefenseKind, DefenseSpec, DetectionVerdict, PromptStyle,
    SeedPrompt,
};
pub use gateway::{
    cache_key, run_batch, CachedBackend, ChatRequest, ChatResponse, DiskCache, GatewayError,
    HttpBackend, MockBackend, ModelBackend, RetryPolicy, ScriptedBehavior,
};
pub use metrics::{
    aggregate, DefenseMetrics, MetricsError, MetricsReport, Phase, ScoreWeights, Tallies,
    TrialRecord,
};
pub use refine::{
    build_feedback, evaluate_candidate, gate_violations, generate_candidates, generate_defenses,
    parse_prompt_blocks, CandidateRecord, Evidence, EvidenceKind, Generation, RefineError,
    RefineOptions, RefineOutcome, RefinerExchange, RefinerSettings, StopReason,
};
pub use report::{emit_report, load_metrics, render_ranking_table, ReportError, ReportFormat};
pub use run::{
    execute_run, plan_trials, Clock, ExecuteOptions, LogicalClock, RunError, RunManifest,
    RunSummary, SystemClock, TrialPlan, TrialSpec,
};
pub use task::{
    assemble_prompt, judge_answer, load_dataset, normalize, AnswerJudge, DatasetItem, JudgeRule,
    TaskError, TaskKind, TaskSpec,
};
