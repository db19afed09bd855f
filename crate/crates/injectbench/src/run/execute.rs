//! Trial execution over a worker pool, with append-only persistence.
//!
//! The reference phase always runs to completion first (attacked trials
//! compare against its outputs), then clean and attacked trials stream
//! through the pool. Records go through a single writer so the trial log
//! stays line-atomic; every line is flushed as it is written.
//!
//! Detection defenses cost two completions per trial — the detection query
//! and the undefended task execution — so false positives, false negatives
//! and utility all come from the same trial.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use sha2::{Digest, Sha256};

use crate::attack::{apply_attack, build_goal_hijack_payload, AttackPayload, AttackSpec};
use crate::config::{BackendConfig, RunConfig, TaskEntry};
use crate::defense::{
    build_known_answer_probe, judge_known_answer, known_answer_secret, parse_classifier_verdict,
    wrap_with_delimiters, DefenseMechanism, DefenseSpec, PARAPHRASE_INSTRUCTION,
};
use crate::gateway::{CachedBackend, ChatRequest, ChatResponse, DiskCache, ModelBackend};
use crate::metrics::{aggregate, temperature_key, MetricsReport, Phase, TrialRecord};
use crate::task::{assemble_prompt, judge_answer, normalize, AnswerJudge};

use super::persist::{
    load_trials, read_manifest, write_bytes_atomic, write_json_atomic, FailureRecord, JsonlWriter,
    RunLock, RunPaths,
};
use super::schedule::{plan_trials, TrialSpec, GOAL_HIJACK_ITEM_ID, GOAL_HIJACK_TASK_ID};
use super::{Clock, RunError, RunManifest, SystemClock};

/// Knobs for one execution pass over a run directory.
pub struct ExecuteOptions {
    pub run_dir: PathBuf,
    /// Response cache location; defaults to `run_dir/cache`. Point several
    /// runs at one directory to share completions.
    pub cache_dir: Option<PathBuf>,
    /// Allow continuing a directory that already holds trials.
    pub resume: bool,
    /// Execute at most this many new trials, then stop (the run resumes
    /// later); mainly for tests and smoke runs.
    pub max_trials: Option<usize>,
    pub clock: Arc<dyn Clock>,
    /// Replaces the configured victim backend (tests inject inspectable
    /// mocks this way).
    pub victim_override: Option<Arc<dyn ModelBackend>>,
    pub paraphraser_override: Option<Arc<dyn ModelBackend>>,
}

impl ExecuteOptions {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_dir: run_dir.into(),
            cache_dir: None,
            resume: false,
            max_trials: None,
            clock: Arc::new(SystemClock),
            victim_override: None,
            paraphraser_override: None,
        }
    }

    pub fn with_resume(mut self) -> Self {
        self.resume = true;
        self
    }

    pub fn with_max_trials(mut self, n: usize) -> Self {
        self.max_trials = Some(n);
        self
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_victim(mut self, backend: Arc<dyn ModelBackend>) -> Self {
        self.victim_override = Some(backend);
        self
    }

    pub fn with_paraphraser(mut self, backend: Arc<dyn ModelBackend>) -> Self {
        self.paraphraser_override = Some(backend);
        self
    }
}

/// What one execution pass did.
#[derive(Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    /// Present once every planned trial has a record.
    pub metrics: Option<MetricsReport>,
    /// New trials recorded by this pass.
    pub executed: usize,
    /// Planned trials already on disk when the pass started.
    pub skipped: usize,
    /// Trials that failed in this pass (they retry on the next resume).
    pub failed: usize,
    pub interrupted: bool,
}

/// Executes (or resumes) a run in `options.run_dir`.
pub fn execute_run(config: &RunConfig, options: &ExecuteOptions) -> Result<RunSummary, RunError> {
    let paths = RunPaths::new(&options.run_dir);
    std::fs::create_dir_all(&paths.root).map_err(|source| RunError::io(&paths.root, source))?;
    let _lock = RunLock::acquire(&paths.lock())?;

    // Snapshot handling: first pass writes it, later passes must match it.
    let snapshot = config.snapshot_json();
    let digest = config.digest();
    match std::fs::read(paths.config()) {
        Ok(existing) => {
            let found = hex_sha256(&existing);
            if found != digest {
                return Err(RunError::ConfigDrift {
                    expected: found,
                    found: digest,
                });
            }
        }
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
            write_bytes_atomic(&paths.config(), snapshot.as_bytes())?;
        }
        Err(source) => return Err(RunError::io(&paths.config(), source)),
    }

    let plan = plan_trials(config)?;
    let existing = load_trials(&paths.trials())?;
    if !existing.is_empty() && !options.resume {
        return Err(RunError::WouldOverwrite {
            path: paths.trials().display().to_string(),
        });
    }
    let existing_ids: BTreeSet<&str> = existing.iter().map(|r| r.trial_id.as_str()).collect();

    // Select the work for this pass: planned, not yet recorded, budget-capped.
    let todo: Vec<&TrialSpec> = plan
        .trials
        .iter()
        .filter(|t| !existing_ids.contains(t.trial_id.as_str()))
        .collect();
    let skipped = plan.trials.len() - todo.len();
    let budget = options.max_trials.unwrap_or(usize::MAX).min(todo.len());
    let interrupted_by_budget = budget < todo.len();
    let selected = &todo[..budget];
    let (ref_selected, rest_selected): (Vec<&TrialSpec>, Vec<&TrialSpec>) =
        selected.iter().partition(|t| t.phase == Phase::Reference);

    // Backends, each behind the shared on-disk cache.
    let cache_dir = options.cache_dir.clone().unwrap_or_else(|| paths.cache());
    let victim_raw = match &options.victim_override {
        Some(backend) => backend.clone(),
        None => config.victim.build()?,
    };
    let paraphraser_raw = match (&options.paraphraser_override, &config.paraphraser) {
        (Some(backend), _) => backend.clone(),
        (None, Some(cfg)) => cfg.build()?,
        (None, None) => victim_raw.clone(),
    };
    let victim = Arc::new(CachedBackend::new(victim_raw, DiskCache::open(&cache_dir)?));
    let paraphraser = Arc::new(CachedBackend::new(
        paraphraser_raw,
        DiskCache::open(&cache_dir)?,
    ));

    let ctx = TrialContext::new(
        config,
        victim.clone(),
        paraphraser.clone(),
        options.clock.as_ref(),
    );

    // Phase 1: references. Phase 2 reads their outputs, so the pool drains
    // completely in between.
    let empty = ReferenceMap::new();
    let (ref_records, ref_failed) = run_pool(&ctx, &empty, &ref_selected, &paths)?;
    let mut references = ReferenceMap::new();
    for record in existing.iter().chain(ref_records.iter()) {
        if record.phase == Phase::Reference {
            references.insert(
                (
                    record.target_task.clone(),
                    temperature_key(record.temperature),
                    record.item_id.clone(),
                ),
                normalize(&record.output),
            );
        }
    }

    // Phase 2: clean and attacked trials.
    let (main_records, main_failed) = run_pool(&ctx, &references, &rest_selected, &paths)?;

    let executed = ref_records.len() + main_records.len();
    let failed = ref_failed + main_failed;
    let completed = existing.len() + executed;
    let interrupted = interrupted_by_budget || failed > 0;

    let now = options.clock.now();
    let created_at = read_manifest(&paths.manifest())?
        .map(|m| m.created_at)
        .unwrap_or(now);
    let manifest = RunManifest {
        run_id: config.run_id.clone(),
        config_digest: digest,
        model: config.victim.model().to_string(),
        planned: plan.counts,
        completed,
        failed,
        interrupted,
        cache_hits: victim.hits() + paraphraser.hits(),
        cache_misses: victim.misses() + paraphraser.misses(),
        created_at,
        updated_at: now,
    };
    write_json_atomic(&paths.manifest(), &manifest)?;

    // Metrics only exist for a complete run; partial aggregates would be
    // silently biased toward whatever happened to finish first.
    let metrics = if manifest.is_complete() {
        let mut all = existing;
        all.extend(ref_records);
        all.extend(main_records);
        let report = aggregate(&all, config.weights)?;
        write_json_atomic(&paths.metrics(), &report)?;
        Some(report)
    } else {
        None
    };

    Ok(RunSummary {
        manifest,
        metrics,
        executed,
        skipped,
        failed,
        interrupted,
    })
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            use std::fmt::Write;
            write!(s, "{b:02x}").expect("writing to String cannot fail");
            s
        })
}

type ReferenceMap = BTreeMap<(String, String, String), String>;

// ─── Worker pool ────────────────────────────────────────────────────────────

enum Outcome {
    Done(TrialRecord),
    Failed(FailureRecord),
}

/// Executes `specs` over the configured pool; the calling thread is the
/// single writer. Returns the new records and the failure count.
fn run_pool(
    ctx: &TrialContext<'_>,
    references: &ReferenceMap,
    specs: &[&TrialSpec],
    paths: &RunPaths,
) -> Result<(Vec<TrialRecord>, usize), RunError> {
    if specs.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut trial_writer = JsonlWriter::append(&paths.trials())?;
    let mut error_writer = JsonlWriter::append(&paths.errors())?;
    let workers = ctx.parallelism.min(specs.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Outcome>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            scope.spawn(|| {
                let tx = tx; // move the clone, not the original
                loop {
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    let Some(spec) = specs.get(index) else { break };
                    let outcome = match execute_trial(ctx, references, spec) {
                        Ok(record) => Outcome::Done(record),
                        Err(err) => Outcome::Failed(FailureRecord {
                            trial_id: spec.trial_id.clone(),
                            message: err.to_string(),
                            timestamp: ctx.clock.now(),
                        }),
                    };
                    if tx.send(outcome).is_err() {
                        break; // writer bailed; stop claiming work
                    }
                }
            });
        }
        drop(tx);

        let mut records = Vec::new();
        let mut failed = 0usize;
        for outcome in rx {
            match outcome {
                Outcome::Done(record) => {
                    trial_writer.write_line(&record)?;
                    records.push(record);
                }
                Outcome::Failed(failure) => {
                    error_writer.write_line(&failure)?;
                    failed += 1;
                }
            }
        }
        Ok((records, failed))
    })
}

// ─── Single-trial execution ─────────────────────────────────────────────────

struct TrialContext<'a> {
    config: &'a RunConfig,
    tasks: BTreeMap<&'a str, &'a TaskEntry>,
    attacks: BTreeMap<&'a str, &'a AttackSpec>,
    defenses: BTreeMap<&'a str, &'a DefenseSpec>,
    victim: Arc<CachedBackend>,
    paraphraser: Arc<CachedBackend>,
    paraphraser_model: String,
    secret: String,
    hijack_payload: AttackPayload,
    hijack_judge: AnswerJudge,
    parallelism: usize,
    clock: &'a dyn Clock,
}

impl<'a> TrialContext<'a> {
    fn new(
        config: &'a RunConfig,
        victim: Arc<CachedBackend>,
        paraphraser: Arc<CachedBackend>,
        clock: &'a dyn Clock,
    ) -> Self {
        let paraphraser_model = config
            .paraphraser
            .as_ref()
            .map(BackendConfig::model)
            .unwrap_or_else(|| config.victim.model())
            .to_string();
        Self {
            config,
            tasks: config
                .tasks
                .iter()
                .map(|t| (t.spec.id.as_str(), t))
                .collect(),
            attacks: config.attacks.iter().map(|a| (a.id.as_str(), a)).collect(),
            defenses: config.defenses.iter().map(|d| (d.id.as_str(), d)).collect(),
            victim,
            paraphraser,
            paraphraser_model,
            secret: known_answer_secret(config.seed),
            hijack_payload: build_goal_hijack_payload(&config.goal_hijack_phrase),
            hijack_judge: AnswerJudge::target_phrase(config.goal_hijack_phrase.clone()),
            parallelism: config.parallelism.max(1),
            clock,
        }
    }

    fn task(&self, id: &str) -> Result<&'a TaskEntry, RunError> {
        self.tasks
            .get(id)
            .copied()
            .ok_or_else(|| RunError::MissingReference {
                key: format!("task '{id}'"),
            })
    }

    fn victim_request(
        &self,
        system: Option<String>,
        user: String,
        temperature: f64,
    ) -> ChatRequest {
        ChatRequest {
            model: self.config.victim.model().to_string(),
            system,
            user,
            temperature,
            max_tokens: self.config.max_tokens,
            seed: Some(self.config.seed),
        }
    }
}

fn execute_trial(
    ctx: &TrialContext<'_>,
    references: &ReferenceMap,
    spec: &TrialSpec,
) -> Result<TrialRecord, RunError> {
    match spec.phase {
        Phase::Reference => execute_reference(ctx, spec),
        Phase::Clean => execute_clean(ctx, spec),
        Phase::Attacked => execute_attacked(ctx, references, spec),
    }
}

fn base_record(ctx: &TrialContext<'_>, spec: &TrialSpec, response: &ChatResponse) -> TrialRecord {
    TrialRecord {
        trial_id: spec.trial_id.clone(),
        phase: spec.phase,
        target_task: spec.target_task.clone(),
        injected_task: spec.injected_task.clone(),
        attack: spec.attack.clone(),
        defense: spec.defense.clone(),
        defense_kind: spec
            .defense
            .as_deref()
            .and_then(|id| ctx.defenses.get(id))
            .map(|d| d.kind()),
        temperature: spec.temperature,
        item_id: spec.item_id.clone(),
        model: response.model.clone(),
        output: response.text.clone(),
        target_correct: None,
        injection_success: None,
        matched_reference: None,
        flagged: None,
        parse_ok: None,
        cached: response.cached,
        latency_ms: response.latency_ms,
        timestamp: ctx.clock.now(),
    }
}

/// Runs an injected payload alone, undefended.
fn execute_reference(ctx: &TrialContext<'_>, spec: &TrialSpec) -> Result<TrialRecord, RunError> {
    let user = if spec.target_task == GOAL_HIJACK_TASK_ID {
        ctx.hijack_payload.instruction.clone()
    } else {
        let task = ctx.task(&spec.target_task)?;
        assemble_prompt(&task.spec, &task.items[spec.item_index].data)?
    };
    let response = ctx
        .victim
        .complete(&ctx.victim_request(None, user, spec.temperature))?;
    Ok(base_record(ctx, spec, &response))
}

fn execute_clean(ctx: &TrialContext<'_>, spec: &TrialSpec) -> Result<TrialRecord, RunError> {
    let task = ctx.task(&spec.target_task)?;
    let item = &task.items[spec.item_index];
    let defense_id = spec
        .defense
        .as_deref()
        .expect("clean trials carry a defense");
    let defense = ctx.defenses[defense_id];

    let defended = run_defended(ctx, task, &item.data, defense, spec.temperature)?;
    let mut record = base_record(ctx, spec, &defended.response);
    record.target_correct = Some(
        task.spec
            .judge_output(&defended.response.text, &item.expected),
    );
    record.flagged = defended.flagged;
    record.parse_ok = defended.parse_ok;
    Ok(record)
}

fn execute_attacked(
    ctx: &TrialContext<'_>,
    references: &ReferenceMap,
    spec: &TrialSpec,
) -> Result<TrialRecord, RunError> {
    let target = ctx.task(&spec.target_task)?;
    let item = &target.items[spec.item_index];
    let injected_id = spec
        .injected_task
        .as_deref()
        .expect("attacked trials carry an injected task");
    let attack = ctx.attacks[spec
        .attack
        .as_deref()
        .expect("attacked trials carry an attack")];
    let defense = ctx.defenses[spec
        .defense
        .as_deref()
        .expect("attacked trials carry a defense")];

    // The payload: either the goal-hijack instruction or a sibling task's
    // instruction and the item at the same index.
    let (payload, payload_item_id) = if injected_id == GOAL_HIJACK_TASK_ID {
        (ctx.hijack_payload.clone(), GOAL_HIJACK_ITEM_ID.to_string())
    } else {
        let injected = ctx.task(injected_id)?;
        let injected_item = &injected.items[spec.item_index];
        (
            AttackPayload {
                instruction: injected.spec.instruction.clone(),
                data: Some(injected_item.data.clone()),
                expected: injected_item.expected.clone(),
            },
            injected_item.item_id.clone(),
        )
    };

    let compromised = apply_attack(attack, &item.data, &payload)?;
    let defended = run_defended(ctx, target, &compromised, defense, spec.temperature)?;
    let output = &defended.response.text;

    let injection_success = if injected_id == GOAL_HIJACK_TASK_ID {
        judge_answer(&ctx.hijack_judge, &[], output, &payload.expected)
    } else {
        let injected = ctx.task(injected_id)?;
        judge_answer(
            &injected.spec.judge,
            &injected.spec.label_set,
            output,
            &payload.expected,
        )
    };
    let matched_reference = references
        .get(&(
            injected_id.to_string(),
            temperature_key(spec.temperature),
            payload_item_id,
        ))
        .map(|reference| normalize(output) == *reference);

    let mut record = base_record(ctx, spec, &defended.response);
    record.target_correct = Some(target.spec.judge_output(output, &item.expected));
    record.injection_success = Some(injection_success);
    record.matched_reference = matched_reference;
    record.flagged = defended.flagged;
    record.parse_ok = defended.parse_ok;
    Ok(record)
}

struct DefendedOutcome {
    response: ChatResponse,
    flagged: Option<bool>,
    parse_ok: Option<bool>,
}

/// Applies one defense around a task execution over (possibly compromised)
/// data.
///
/// Prevention rewrites the prompt before the single victim call. Detection
/// performs its query first, then executes the task undefended, so utility
/// and detector quality are measured on the same trial.
fn run_defended(
    ctx: &TrialContext<'_>,
    task: &TaskEntry,
    data: &str,
    defense: &DefenseSpec,
    temperature: f64,
) -> Result<DefendedOutcome, RunError> {
    match &defense.mechanism {
        DefenseMechanism::Delimiters => {
            let prompt = wrap_with_delimiters(&task.spec.instruction, data);
            let response = ctx
                .victim
                .complete(&ctx.victim_request(None, prompt, temperature))?;
            Ok(DefendedOutcome {
                response,
                flagged: None,
                parse_ok: None,
            })
        }
        DefenseMechanism::Paraphrase => {
            let para_request = ChatRequest {
                model: ctx.paraphraser_model.clone(),
                system: None,
                user: format!("{PARAPHRASE_INSTRUCTION}\n\n{data}"),
                temperature,
                max_tokens: ctx.config.max_tokens,
                seed: Some(ctx.config.seed),
            };
            let paraphrased = ctx.paraphraser.complete(&para_request)?;
            let prompt = assemble_prompt(&task.spec, &paraphrased.text)?;
            let response = ctx
                .victim
                .complete(&ctx.victim_request(None, prompt, temperature))?;
            Ok(DefendedOutcome {
                response,
                flagged: None,
                parse_ok: None,
            })
        }
        DefenseMechanism::KnownAnswer => {
            let probe = build_known_answer_probe(&ctx.secret, data)?;
            let probe_response =
                ctx.victim
                    .complete(&ctx.victim_request(None, probe, temperature))?;
            let verdict = judge_known_answer(&probe_response.text, &ctx.secret);
            let prompt = assemble_prompt(&task.spec, data)?;
            let response = ctx
                .victim
                .complete(&ctx.victim_request(None, prompt, temperature))?;
            Ok(DefendedOutcome {
                response,
                flagged: Some(verdict.flagged),
                parse_ok: Some(verdict.parse_ok),
            })
        }
        DefenseMechanism::PromptClassifier(classifier) => {
            let query = ctx.victim_request(
                Some(classifier.prompt_text.clone()),
                data.to_string(),
                temperature,
            );
            let query_response = ctx.victim.complete(&query)?;
            let verdict = parse_classifier_verdict(
                &query_response.text,
                &classifier.positive_marker,
                &classifier.negative_marker,
            );
            let prompt = assemble_prompt(&task.spec, data)?;
            let response = ctx
                .victim
                .complete(&ctx.victim_request(None, prompt, temperature))?;
            Ok(DefendedOutcome {
                response,
                flagged: Some(verdict.flagged),
                parse_ok: Some(verdict.parse_ok),
            })
        }
    }
}
