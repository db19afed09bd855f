//! Deterministic trial planning.
//!
//! A plan enumerates every trial of a run up front, in a fixed order, with a
//! unique id per trial. Ids are stable across invocations of the same
//! config, which is what makes resume (skip ids already recorded) and
//! kill/rerun workflows safe.
//!
//! Three phases:
//!
//! * **reference** — each injected payload alone, undefended, once per
//!   temperature and item; their outputs are what attacked trials are
//!   compared against for the match rate.
//! * **clean** — every task × defense × temperature × item, unattacked;
//!   feeds utility (`pna`) and false positives.
//! * **attacked** — the full target × injected task grid (diagonal
//!   included) × attack × defense × temperature × item. Goal-hijack attacks
//!   carry their own instruction instead of a second task and are recorded
//!   under the pseudo injected-task id `goal-hijack`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::metrics::{temperature_key, Phase};

use super::RunError;

/// Injected-task id under which goal-hijack trials are recorded. Reserved;
/// config validation rejects real tasks with this id.
pub const GOAL_HIJACK_TASK_ID: &str = "goal-hijack";

/// Item id used by goal-hijack reference trials (the payload has no dataset).
pub const GOAL_HIJACK_ITEM_ID: &str = "phrase";

/// One planned trial: everything needed to execute it, minus the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: String,
    pub phase: Phase,
    /// For reference trials this is the task being referenced (possibly
    /// [`GOAL_HIJACK_TASK_ID`]); otherwise the task under attack.
    pub target_task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<String>,
    pub temperature: f64,
    /// Index into the target task's items (and, because target and injected
    /// tasks draw the same count, into the injected task's items too).
    pub item_index: usize,
    pub item_id: String,
}

/// Per-phase totals of a plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCounts {
    pub reference: usize,
    pub clean: usize,
    pub attacked: usize,
}

impl PlanCounts {
    pub fn total(&self) -> usize {
        self.reference + self.clean + self.attacked
    }
}

/// The full, ordered trial list for a config.
#[derive(Debug, Clone)]
pub struct TrialPlan {
    pub trials: Vec<TrialSpec>,
    pub counts: PlanCounts,
}

/// Enumerates every trial for a validated config.
///
/// The order is reference phase, then clean, then attacked, each in nested
/// config order — so two calls with the same config produce identical plans.
pub fn plan_trials(config: &RunConfig) -> Result<TrialPlan, RunError> {
    config.validate()?;

    let mut trials = Vec::new();
    let mut counts = PlanCounts::default();
    let items = config.items_per_task;
    let has_goal_hijack = config.attacks.iter().any(|a| a.strategy.is_goal_hijack());

    // Reference phase: every task that can be injected, plus the goal-hijack
    // payload when such an attack is configured.
    for task in &config.tasks {
        for &temperature in &config.temperatures {
            for index in 0..items {
                let item = &task.items[index];
                trials.push(TrialSpec {
                    trial_id: format!(
                        "ref|{}|t{}|i{index}",
                        task.spec.id,
                        temperature_key(temperature)
                    ),
                    phase: Phase::Reference,
                    target_task: task.spec.id.clone(),
                    injected_task: None,
                    attack: None,
                    defense: None,
                    temperature,
                    item_index: index,
                    item_id: item.item_id.clone(),
                });
                counts.reference += 1;
            }
        }
    }
    if has_goal_hijack {
        for &temperature in &config.temperatures {
            trials.push(TrialSpec {
                trial_id: format!(
                    "ref|{GOAL_HIJACK_TASK_ID}|t{}|i0",
                    temperature_key(temperature)
                ),
                phase: Phase::Reference,
                target_task: GOAL_HIJACK_TASK_ID.to_string(),
                injected_task: None,
                attack: None,
                defense: None,
                temperature,
                item_index: 0,
                item_id: GOAL_HIJACK_ITEM_ID.to_string(),
            });
            counts.reference += 1;
        }
    }

    // Clean phase.
    for task in &config.tasks {
        for defense in &config.defenses {
            for &temperature in &config.temperatures {
                for index in 0..items {
                    let item = &task.items[index];
                    trials.push(TrialSpec {
                        trial_id: format!(
                            "cln|{}|{}|t{}|i{index}",
                            task.spec.id,
                            defense.id,
                            temperature_key(temperature)
                        ),
                        phase: Phase::Clean,
                        target_task: task.spec.id.clone(),
                        injected_task: None,
                        attack: None,
                        defense: Some(defense.id.clone()),
                        temperature,
                        item_index: index,
                        item_id: item.item_id.clone(),
                    });
                    counts.clean += 1;
                }
            }
        }
    }

    // Attacked phase: task-pair grid for ordinary attacks, target-only loop
    // for goal-hijack attacks.
    for target in &config.tasks {
        for attack in &config.attacks {
            let injected_ids: Vec<&str> = if attack.strategy.is_goal_hijack() {
                vec![GOAL_HIJACK_TASK_ID]
            } else {
                config.tasks.iter().map(|t| t.spec.id.as_str()).collect()
            };
            for injected in injected_ids {
                for defense in &config.defenses {
                    for &temperature in &config.temperatures {
                        for index in 0..items {
                            let item = &target.items[index];
                            trials.push(TrialSpec {
                                trial_id: format!(
                                    "atk|{}|{injected}|{}|{}|t{}|i{index}",
                                    target.spec.id,
                                    attack.id,
                                    defense.id,
                                    temperature_key(temperature)
                                ),
                                phase: Phase::Attacked,
                                target_task: target.spec.id.clone(),
                                injected_task: Some(injected.to_string()),
                                attack: Some(attack.id.clone()),
                                defense: Some(defense.id.clone()),
                                temperature,
                                item_index: index,
                                item_id: item.item_id.clone(),
                            });
                            counts.attacked += 1;
                        }
                    }
                }
            }
        }
    }

    // Planning invariant: ids are unique by construction; a collision means
    // the id scheme broke, not the config.
    let mut seen = BTreeSet::new();
    for trial in &trials {
        if !seen.insert(trial.trial_id.as_str()) {
            return Err(RunError::DuplicatePlannedTrial {
                trial_id: trial.trial_id.clone(),
            });
        }
    }

    Ok(TrialPlan { trials, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackSpec, AttackStrategy};
    use crate::config::BackendConfig;
    use crate::defense::DefenseSpec;

    fn tiny_config() -> RunConfig {
        let mut config =
            RunConfig::with_defaults("plan-test", BackendConfig::mock_static("m", "ok"));
        config.tasks.truncate(2);
        config.items_per_task = 1;
        config.temperatures = vec![0.0, 0.7];
        config.attacks = vec![AttackSpec::of(AttackStrategy::Naive)];
        config.defenses = vec![DefenseSpec::delimiters("delimiting")];
        config
    }

    #[test]
    fn counts_match_the_grid_arithmetic() {
        // 2 tasks, 1 ordinary attack, 1 defense, 2 temperatures, 1 item:
        // 2·2·1·1·2·1 = 8 attacked, 2·1·2·1 = 4 clean, 2·2·1 = 4 reference.
        let plan = plan_trials(&tiny_config()).unwrap();
        assert_eq!(plan.counts.attacked, 8);
        assert_eq!(plan.counts.clean, 4);
        assert_eq!(plan.counts.reference, 4);
        assert_eq!(plan.counts.total(), plan.trials.len());
    }

    #[test]
    fn goal_hijack_iterates_targets_only() {
        let mut config = tiny_config();
        config
            .attacks
            .push(AttackSpec::of(AttackStrategy::GoalHijack));
        let plan = plan_trials(&config).unwrap();
        // The hijack attack adds one payload per target (not the task grid):
        // 2 targets · 1 defense · 2 temps · 1 item = 4 attacked trials, plus
        // one reference per temperature.
        assert_eq!(plan.counts.attacked, 8 + 4);
        assert_eq!(plan.counts.reference, 4 + 2);
        let hijack_refs: Vec<&TrialSpec> = plan
            .trials
            .iter()
            .filter(|t| t.phase == Phase::Reference && t.target_task == GOAL_HIJACK_TASK_ID)
            .collect();
        assert_eq!(hijack_refs.len(), 2);
        assert_eq!(hijack_refs[0].item_id, GOAL_HIJACK_ITEM_ID);
        assert!(plan.trials.iter().any(|t| {
            t.phase == Phase::Attacked && t.injected_task.as_deref() == Some(GOAL_HIJACK_TASK_ID)
        }));
    }

    #[test]
    fn ids_are_unique_and_readable() {
        let plan = plan_trials(&tiny_config()).unwrap();
        let ids: BTreeSet<&str> = plan.trials.iter().map(|t| t.trial_id.as_str()).collect();
        assert_eq!(ids.len(), plan.trials.len());
        assert!(ids.contains("ref|spam-detection|t0|i0"));
        assert!(ids.contains("cln|spam-detection|delimiting|t0.7|i0"));
        assert!(ids.contains("atk|spam-detection|sentiment-analysis|naive|delimiting|t0|i0"));
    }

    #[test]
    fn planning_is_deterministic() {
        let config = tiny_config();
        let a = plan_trials(&config).unwrap();
        let b = plan_trials(&config).unwrap();
        assert_eq!(a.trials, b.trials);
    }

    #[test]
    fn reference_phase_always_precedes_the_rest() {
        let plan = plan_trials(&tiny_config()).unwrap();
        let first_non_reference = plan
            .trials
            .iter()
            .position(|t| t.phase != Phase::Reference)
            .unwrap();
        assert!(plan.trials[..first_non_reference]
            .iter()
            .all(|t| t.phase == Phase::Reference));
        assert_eq!(first_non_reference, plan.counts.reference);
    }

    #[test]
    fn invalid_config_is_rejected_at_planning() {
        let mut config = tiny_config();
        config.items_per_task = 999;
        assert!(plan_trials(&config).is_err());
    }
}
