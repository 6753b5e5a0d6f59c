//! The experiment state machine.
//!
//! Every change goes through a [`LogRecord`]: the live path decides what
//! record to write, appends it to the sink, then folds it into the state with
//! [`ExperimentState::apply`]. Replay uses the same `apply`, so a state is
//! exactly the fold of its log.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{self, Assignment, AssignmentRecord, ConversionOutcome, Shortfall};
use crate::config::{ExperimentConfig, FieldError};
use crate::evolution::{
    self, check_stopping, Candidate, CandidateEstimate, CandidateStatus, GenerationReport,
    StopDecision, StopReason,
};
use crate::persistence::{
    LogRecord, NewCandidate, PersistError, RecordBody, RecordSink, SCHEMA_VERSION,
};
use crate::space::{Genome, SearchSpace};
use crate::stats::{self, IntervalMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Draft,
    Running,
    Stopped,
}

impl ExperimentStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentStatus::Draft => "draft",
            ExperimentStatus::Running => "running",
            ExperimentStatus::Stopped => "stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("expected an experiment_created record, found {0}")]
    NotCreated(&'static str),
    #[error("expected sequence {expected}, found {actual}")]
    Sequence { expected: u64, actual: u64 },
    #[error("{kind} is not allowed while the experiment is {status}")]
    Status {
        kind: &'static str,
        status: &'static str,
    },
    #[error("unknown candidate {0}")]
    UnknownCandidate(u64),
    #[error("candidate {0} is discarded")]
    Discarded(u64),
    #[error(
        "conversion for {user_id} does not match an open assignment to candidate {candidate_id}"
    )]
    Unmatched { user_id: String, candidate_id: u64 },
    #[error("offspring id {actual} does not follow the last candidate id (expected {expected})")]
    OffspringId { expected: u64, actual: u64 },
    #[error("invalid config in log: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("experiment is {}", .0.as_str())]
    WrongStatus(ExperimentStatus),
    #[error("generation is not mature: {} candidates short", .0.iter().filter(|s| s.remaining > 0).count())]
    NotMature(Vec<Shortfall>),
    #[error("log must be empty to create an experiment")]
    LogNotEmpty,
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("state transition rejected: {0}")]
    Apply(#[from] ApplyError),
}

/// Answer stored for a request that carried an idempotency key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyedOutcome {
    Assigned {
        candidate_id: u64,
        sticky_until: i64,
    },
    Converted {
        candidate_id: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    pub space: SearchSpace,
    pub created_at: i64,
    pub status: ExperimentStatus,
    pub stop_reason: Option<StopReason>,
    /// Index of the generation currently being evaluated.
    pub generation: u32,
    /// Every candidate ever created; `candidates[i].id == i`.
    pub candidates: Vec<Candidate>,
    pub assignments: BTreeMap<String, AssignmentRecord>,
    pub history: Vec<GenerationReport>,
    /// Breeding RNG, checkpointed into every generation record.
    #[serde(with = "crate::persistence::rng_checkpoint")]
    pub rng: ChaCha8Rng,
    pub last_sequence: u64,
    pub last_timestamp: i64,
    pub total_impressions: u64,
    pub total_conversions: u64,
    pub unattributed_conversions: u64,
    pub idempotency: BTreeMap<String, KeyedOutcome>,
}

impl ExperimentState {
    pub fn from_created(record: &LogRecord) -> Result<Self, ApplyError> {
        let RecordBody::ExperimentCreated {
            experiment_id,
            config,
        } = &record.body
        else {
            return Err(ApplyError::NotCreated(record.body.kind()));
        };
        if record.sequence != 1 {
            return Err(ApplyError::Sequence {
                expected: 1,
                actual: record.sequence,
            });
        }
        let space = config
            .space()
            .map_err(|e| ApplyError::Config(e.to_string()))?;
        Ok(Self {
            experiment_id: experiment_id.clone(),
            config: config.clone(),
            space,
            created_at: record.timestamp,
            status: ExperimentStatus::Draft,
            stop_reason: None,
            generation: 0,
            candidates: Vec::new(),
            assignments: BTreeMap::new(),
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.evolution.rng_seed),
            last_sequence: 1,
            last_timestamp: record.timestamp,
            total_impressions: 0,
            total_conversions: 0,
            unattributed_conversions: 0,
            idempotency: BTreeMap::new(),
        })
    }

    fn require(&self, kind: &'static str, allowed: &[ExperimentStatus]) -> Result<(), ApplyError> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(ApplyError::Status {
                kind,
                status: self.status.as_str(),
            })
        }
    }

    fn servable(&self, id: u64) -> Result<(), ApplyError> {
        match self.candidates.get(id as usize) {
            None => Err(ApplyError::UnknownCandidate(id)),
            Some(c) if !c.is_live() => Err(ApplyError::Discarded(id)),
            Some(_) => Ok(()),
        }
    }

    fn count_impression(&mut self, id: u64) {
        let candidate = &mut self.candidates[id as usize];
        candidate.impressions += 1;
        candidate.generation_impressions += 1;
        self.total_impressions += 1;
    }

    /// The single state transition. Rejects records that do not follow the
    /// current state; a rejected record leaves the state untouched.
    pub fn apply(&mut self, record: &LogRecord) -> Result<(), ApplyError> {
        use ExperimentStatus::*;
        if record.sequence != self.last_sequence + 1 {
            return Err(ApplyError::Sequence {
                expected: self.last_sequence + 1,
                actual: record.sequence,
            });
        }
        let kind = record.body.kind();
        let mut keyed = None;
        match &record.body {
            RecordBody::ExperimentCreated { .. } => {
                return Err(ApplyError::Status {
                    kind,
                    status: self.status.as_str(),
                })
            }
            RecordBody::Started { population, rng } => {
                self.require(kind, &[Draft])?;
                self.candidates = population.clone();
                self.rng = rng.clone();
                self.status = Running;
            }
            RecordBody::Assignment {
                user_id,
                candidate_id,
                expires_at,
            } => {
                self.require(kind, &[Running])?;
                self.servable(*candidate_id)?;
                self.count_impression(*candidate_id);
                self.assignments.insert(
                    user_id.clone(),
                    AssignmentRecord {
                        user_id: user_id.clone(),
                        candidate_id: *candidate_id,
                        assigned_at: record.timestamp,
                        expires_at: *expires_at,
                        converted: false,
                    },
                );
                keyed = Some(KeyedOutcome::Assigned {
                    candidate_id: *candidate_id,
                    sticky_until: *expires_at,
                });
            }
            RecordBody::Impression { candidate_id, .. } => {
                self.require(kind, &[Running])?;
                self.servable(*candidate_id)?;
                self.count_impression(*candidate_id);
            }
            RecordBody::Conversion {
                user_id,
                candidate_id,
            } => {
                self.require(kind, &[Running, Stopped])?;
                match candidate_id {
                    Some(id) => {
                        let open = self.assignments.get(user_id).filter(|a| {
                            a.candidate_id == *id && !a.converted && a.is_current(record.timestamp)
                        });
                        let candidate = self
                            .candidates
                            .get(*id as usize)
                            .ok_or(ApplyError::UnknownCandidate(*id))?;
                        if open.is_none() || candidate.conversions >= candidate.impressions {
                            return Err(ApplyError::Unmatched {
                                user_id: user_id.clone(),
                                candidate_id: *id,
                            });
                        }
                        self.candidates[*id as usize].conversions += 1;
                        self.assignments
                            .get_mut(user_id)
                            .expect("checked")
                            .converted = true;
                        self.total_conversions += 1;
                    }
                    None => self.unattributed_conversions += 1,
                }
                keyed = Some(KeyedOutcome::Converted {
                    candidate_id: *candidate_id,
                });
            }
            RecordBody::GenerationAdvanced {
                report,
                offspring,
                rng,
            } => {
                self.require(kind, &[Running])?;
                for (expected, child) in (self.candidates.len() as u64..).zip(offspring) {
                    if child.id != expected {
                        return Err(ApplyError::OffspringId {
                            expected,
                            actual: child.id,
                        });
                    }
                }
                for id in &report.discarded {
                    self.servable(*id)?;
                }
                for id in &report.discarded {
                    self.candidates[*id as usize].status = CandidateStatus::Discarded;
                }
                for candidate in &mut self.candidates {
                    candidate.generation_impressions = 0;
                }
                self.generation = report.generation + 1;
                for child in offspring {
                    self.candidates.push(Candidate::new(
                        child.id,
                        child.genome.clone(),
                        self.generation,
                    ));
                }
                self.history.push(report.clone());
                self.rng = rng.clone();
                let now = record.timestamp;
                self.assignments.retain(|_, a| a.is_current(now));
            }
            RecordBody::Stopped { reason } => {
                self.require(kind, &[Draft, Running])?;
                self.status = Stopped;
                self.stop_reason = Some(*reason);
            }
        }
        if let (Some(key), Some(outcome)) = (&record.idempotency_key, keyed) {
            self.idempotency.insert(key.clone(), outcome);
        }
        self.last_sequence = record.sequence;
        self.last_timestamp = record.timestamp;
        Ok(())
    }

    pub fn candidate(&self, id: u64) -> Option<&Candidate> {
        self.candidates.get(id as usize)
    }

    pub fn control(&self) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.is_control())
    }

    /// Active, non-control candidates.
    pub fn active(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.is_active())
    }

    pub fn maturity_status(&self) -> Vec<Shortfall> {
        allocator::maturity_status(&self.candidates, self.config.evolution.maturity_age)
    }

    pub fn is_mature(&self) -> bool {
        allocator::is_mature(&self.candidates, self.config.evolution.maturity_age)
    }

    /// The best candidate judged at the most recent generation boundary.
    pub fn best_so_far(&self) -> Option<&Candidate> {
        self.history
            .iter()
            .rev()
            .find_map(|r| r.best_candidate_id)
            .and_then(|id| self.candidate(id))
    }

    /// Element name → value name for a candidate.
    pub fn design(&self, id: u64) -> Option<Vec<(String, String)>> {
        let candidate = self.candidate(id)?;
        Some(
            self.space
                .describe(&candidate.genome)
                .into_iter()
                .map(|(e, v)| (e.to_string(), v.to_string()))
                .collect(),
        )
    }

    /// The current open assignment of a user, if it still points at a live candidate.
    pub fn sticky_assignment(&self, user_id: &str, now: i64) -> Option<&AssignmentRecord> {
        self.assignments
            .get(user_id)
            .filter(|a| a.is_current(now))
            .filter(|a| self.candidate(a.candidate_id).is_some_and(|c| c.is_live()))
    }
}

/// A state machine bound to the sink its records are written to.
#[derive(Debug)]
pub struct Experiment<S> {
    state: ExperimentState,
    sink: S,
}

impl<S: RecordSink> Experiment<S> {
    pub fn create(
        id: &str,
        config: ExperimentConfig,
        now: i64,
        mut sink: S,
    ) -> Result<Self, ExperimentError> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(ExperimentError::Invalid(errors));
        }
        if sink.last_sequence() != 0 {
            return Err(ExperimentError::LogNotEmpty);
        }
        let record = LogRecord {
            schema_version: SCHEMA_VERSION,
            sequence: 1,
            timestamp: now,
            body: RecordBody::ExperimentCreated {
                experiment_id: id.to_string(),
                config,
            },
            idempotency_key: None,
        };
        sink.append(&record)?;
        let state = ExperimentState::from_created(&record)?;
        Ok(Self { state, sink })
    }

    pub fn from_state(state: ExperimentState, sink: S) -> Self {
        Self { state, sink }
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn into_parts(self) -> (ExperimentState, S) {
        (self.state, self.sink)
    }

    fn commit(
        &mut self,
        body: RecordBody,
        now: i64,
        key: Option<&str>,
    ) -> Result<u64, ExperimentError> {
        let record = LogRecord {
            schema_version: SCHEMA_VERSION,
            sequence: self.state.last_sequence + 1,
            timestamp: now,
            body,
            idempotency_key: key.map(str::to_string),
        };
        // Durable first; records built here always satisfy apply().
        self.sink.append(&record)?;
        self.state.apply(&record)?;
        Ok(record.sequence)
    }

    /// Draft → running: seeds the initial population around Control.
    pub fn start(&mut self, now: i64) -> Result<usize, ExperimentError> {
        if self.state.status != ExperimentStatus::Draft {
            return Err(ExperimentError::WrongStatus(self.state.status));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.evolution.rng_seed);
        let population = evolution::initialize_population(
            &self.state.space,
            &self.state.config.evolution,
            &mut rng,
        );
        let size = population.len();
        self.commit(RecordBody::Started { population, rng }, now, None)?;
        Ok(size)
    }

    pub fn assign(&mut self, user_id: &str, now: i64) -> Result<Assignment, ExperimentError> {
        self.assign_keyed(user_id, now, None)
    }

    pub fn assign_keyed(
        &mut self,
        user_id: &str,
        now: i64,
        key: Option<&str>,
    ) -> Result<Assignment, ExperimentError> {
        if let Some(KeyedOutcome::Assigned {
            candidate_id,
            sticky_until,
        }) = key.and_then(|k| self.state.idempotency.get(k))
        {
            return Ok(Assignment {
                candidate_id: *candidate_id,
                sticky_until: *sticky_until,
                sticky: false,
            });
        }
        if self.state.status != ExperimentStatus::Running {
            return Err(ExperimentError::WrongStatus(self.state.status));
        }
        if let Some(record) = self.state.sticky_assignment(user_id, now) {
            let assignment = Assignment {
                candidate_id: record.candidate_id,
                sticky_until: record.expires_at,
                sticky: true,
            };
            if self.state.config.allocator.count_sticky_visits {
                self.commit(
                    RecordBody::Impression {
                        user_id: user_id.to_string(),
                        candidate_id: assignment.candidate_id,
                    },
                    now,
                    None,
                )?;
                self.after_impression(now)?;
            }
            return Ok(assignment);
        }
        let evo = &self.state.config.evolution;
        let mut rng = allocator::allocation_rng(evo.rng_seed, self.state.last_sequence + 1);
        let candidate_id = allocator::route_new_user(
            &self.state.candidates,
            evo.maturity_age,
            evo.control_holdout_fraction,
            &mut rng,
        );
        let expires_at = now.saturating_add(self.state.config.allocator.sticky_ttl_ms as i64);
        self.commit(
            RecordBody::Assignment {
                user_id: user_id.to_string(),
                candidate_id,
                expires_at,
            },
            now,
            key,
        )?;
        self.after_impression(now)?;
        Ok(Assignment {
            candidate_id,
            sticky_until: expires_at,
            sticky: false,
        })
    }

    fn after_impression(&mut self, now: i64) -> Result<(), ExperimentError> {
        if self.state.config.allocator.auto_advance
            && self.state.active().next().is_some()
            && self.state.is_mature()
        {
            self.advance_unchecked(now)?;
        }
        if self.state.status == ExperimentStatus::Running {
            let budget = self.state.config.stopping.interaction_budget;
            if budget.is_some_and(|b| self.state.total_impressions >= b) {
                self.commit(
                    RecordBody::Stopped {
                        reason: StopReason::Budget,
                    },
                    now,
                    None,
                )?;
            }
        }
        Ok(())
    }

    pub fn record_conversion(
        &mut self,
        user_id: &str,
        now: i64,
    ) -> Result<ConversionOutcome, ExperimentError> {
        self.record_conversion_keyed(user_id, now, None)
    }

    /// Attributes a conversion to the user's open assignment, at most once per assignment.
    pub fn record_conversion_keyed(
        &mut self,
        user_id: &str,
        now: i64,
        key: Option<&str>,
    ) -> Result<ConversionOutcome, ExperimentError> {
        if let Some(KeyedOutcome::Converted { candidate_id }) =
            key.and_then(|k| self.state.idempotency.get(k))
        {
            return Ok(match candidate_id {
                Some(id) => ConversionOutcome::Attributed { candidate_id: *id },
                None => ConversionOutcome::Unattributed,
            });
        }
        if self.state.status == ExperimentStatus::Draft {
            return Err(ExperimentError::WrongStatus(self.state.status));
        }
        let open = self
            .state
            .assignments
            .get(user_id)
            .filter(|a| a.is_current(now))
            .map(|a| (a.candidate_id, a.converted));
        let outcome = match open {
            Some((candidate_id, true)) => return Ok(ConversionOutcome::Duplicate { candidate_id }),
            Some((candidate_id, false)) => ConversionOutcome::Attributed { candidate_id },
            None => ConversionOutcome::Unattributed,
        };
        self.commit(
            RecordBody::Conversion {
                user_id: user_id.to_string(),
                candidate_id: outcome.candidate_id(),
            },
            now,
            key,
        )?;
        Ok(outcome)
    }

    /// Manual generation advance; rejected until every maturity quota is met.
    pub fn advance(&mut self, now: i64) -> Result<GenerationReport, ExperimentError> {
        if self.state.status != ExperimentStatus::Running {
            return Err(ExperimentError::WrongStatus(self.state.status));
        }
        if !self.state.is_mature() {
            let short = self
                .state
                .maturity_status()
                .into_iter()
                .filter(|s| s.remaining > 0)
                .collect();
            return Err(ExperimentError::NotMature(short));
        }
        self.advance_unchecked(now)
    }

    fn advance_unchecked(&mut self, now: i64) -> Result<GenerationReport, ExperimentError> {
        let state = &self.state;
        let evo = &state.config.evolution;
        let active: Vec<&Candidate> = state.active().collect();
        let (retained, discarded) = evolution::select_survivors(&active, evo.population_size);
        let estimate = |c: &Candidate| {
            stats::estimate(c.conversions, c.impressions, 0.95, IntervalMethod::Wald).ok()
        };
        let estimates = retained
            .iter()
            .chain(&discarded)
            .filter_map(|c| {
                estimate(c).map(|e| CandidateEstimate {
                    candidate_id: c.id,
                    estimate: e,
                })
            })
            .collect();
        let control = state.control();
        let next_generation = state.generation + 1;
        let decision = check_stopping(
            next_generation,
            state.total_impressions,
            retained.first().copied(),
            control,
            evo,
            &state.config.stopping,
        );
        let mut rng = state.rng.clone();
        let offspring = if decision == StopDecision::Continue && !retained.is_empty() {
            let live: HashSet<Genome> = retained
                .iter()
                .map(|c| c.genome.clone())
                .chain(control.map(|c| c.genome.clone()))
                .collect();
            evolution::breed(
                &state.space,
                &retained,
                &live,
                evo,
                state.candidates.len() as u64,
                next_generation,
                &mut rng,
            )
            .into_iter()
            .map(|c| NewCandidate {
                id: c.id,
                genome: c.genome,
            })
            .collect()
        } else {
            Vec::new()
        };
        let report = GenerationReport {
            generation: state.generation,
            estimates,
            control: control.and_then(estimate),
            retained: retained.iter().map(|c| c.id).collect(),
            discarded: discarded.iter().map(|c| c.id).collect(),
            best_candidate_id: retained.first().map(|c| c.id),
            total_interactions: state.total_impressions,
        };
        self.commit(
            RecordBody::GenerationAdvanced {
                report: report.clone(),
                offspring,
                rng,
            },
            now,
            None,
        )?;
        if let StopDecision::Stop(reason) = decision {
            self.commit(RecordBody::Stopped { reason }, now, None)?;
        }
        Ok(report)
    }

    pub fn stop(&mut self, now: i64) -> Result<(), ExperimentError> {
        if self.state.status == ExperimentStatus::Stopped {
            return Err(ExperimentError::WrongStatus(self.state.status));
        }
        self.commit(
            RecordBody::Stopped {
                reason: StopReason::Manual,
            },
            now,
            None,
        )?;
        Ok(())
    }
}
