//! Simulated traffic against a hidden ground-truth conversion model.
//!
//! The model is logistic in a reference coding: Control sits at the
//! intercept, each non-control value adds a main effect, and interaction terms
//! add their delta only when a genome matches every one of their
//! (element, value) pairs. [`brute_force_optimum`] enumerates the space to find
//! the true best design, which is what acceptance runs are scored against.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    AllocatorConfig, ConditionConfig, EffectConfig, ElementConfig, ExperimentConfig, FieldError,
    InteractionConfig, ModelConfig, ScenarioConfig,
};
use crate::evolution::{EvolutionConfig, GenerationReport, StopReason, StoppingConfig};
use crate::experiment::{Experiment, ExperimentError, ExperimentState, ExperimentStatus};
use crate::persistence::{LogRecord, MemoryLog, RecordSink};
use crate::space::{CapExceeded, Genome, SearchSpace};
use crate::stats::{self, IntervalMethod};

const USER_SALT: u64 = 0x05E5_7A7E_0000_0001;
const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown element {0:?}")]
    UnknownElement(String),
    #[error("element {element:?} has no value {value:?}")]
    UnknownValue { element: String, value: String },
    #[error("pair ({element}, {value}) is outside the space")]
    OutOfSpace { element: usize, value: usize },
    #[error("main effects on control values are fixed at zero (element {0})")]
    ControlEffect(usize),
    #[error("an interaction needs at least two pairs on distinct elements")]
    DegenerateInteraction,
    #[error("effect sizes must be finite")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("config has no scenario section")]
    NoScenario,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// (element index, value index) pairs that must all match.
    pub pairs: Vec<(usize, usize)>,
    pub logit_delta: f64,
}

impl Interaction {
    pub fn matches(&self, genome: &Genome) -> bool {
        self.pairs.iter().all(|&(e, v)| genome.choice(e) == v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub base_logit: f64,
    /// `main_effects[element][value]`; column 0 is always zero.
    pub main_effects: Vec<Vec<f64>>,
    pub interactions: Vec<Interaction>,
}

impl GroundTruthModel {
    /// A flat model: every design converts at `base_rate`.
    pub fn flat(space: &SearchSpace, base_rate: f64) -> Self {
        Self {
            base_logit: logit(base_rate),
            main_effects: space
                .value_counts()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
            interactions: Vec::new(),
        }
    }

    pub fn set_main_effect(
        &mut self,
        element: usize,
        value: usize,
        logit_delta: f64,
    ) -> Result<(), ModelError> {
        if !logit_delta.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let row = self
            .main_effects
            .get_mut(element)
            .ok_or(ModelError::OutOfSpace { element, value })?;
        if value >= row.len() {
            return Err(ModelError::OutOfSpace { element, value });
        }
        if value == 0 {
            return Err(ModelError::ControlEffect(element));
        }
        row[value] = logit_delta;
        Ok(())
    }

    pub fn add_interaction(
        &mut self,
        pairs: Vec<(usize, usize)>,
        logit_delta: f64,
    ) -> Result<(), ModelError> {
        if !logit_delta.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let elements: HashSet<usize> = pairs.iter().map(|&(e, _)| e).collect();
        if pairs.len() < 2 || elements.len() != pairs.len() {
            return Err(ModelError::DegenerateInteraction);
        }
        for &(element, value) in &pairs {
            let in_space = self
                .main_effects
                .get(element)
                .is_some_and(|row| value < row.len());
            if !in_space {
                return Err(ModelError::OutOfSpace { element, value });
            }
        }
        self.interactions.push(Interaction { pairs, logit_delta });
        Ok(())
    }

    pub fn from_config(space: &SearchSpace, config: &ModelConfig) -> Result<Self, ModelError> {
        if !(config.base_rate > 0.0 && config.base_rate < 1.0) {
            return Err(ModelError::NonFinite);
        }
        let resolve = |element: &str, value: &str| -> Result<(usize, usize), ModelError> {
            let e = space
                .element_index(element)
                .ok_or_else(|| ModelError::UnknownElement(element.to_string()))?;
            let v = space
                .value_index(e, value)
                .ok_or_else(|| ModelError::UnknownValue {
                    element: element.to_string(),
                    value: value.to_string(),
                })?;
            Ok((e, v))
        };
        let mut model = Self::flat(space, config.base_rate);
        for effect in &config.main_effects {
            let (e, v) = resolve(&effect.element, &effect.value)?;
            model.set_main_effect(e, v, effect.logit_delta)?;
        }
        for interaction in &config.interactions {
            let pairs = interaction
                .when
                .iter()
                .map(|c| resolve(&c.element, &c.value))
                .collect::<Result<Vec<_>, _>>()?;
            model.add_interaction(pairs, interaction.logit_delta)?;
        }
        Ok(model)
    }

    pub fn logit_of(&self, genome: &Genome) -> f64 {
        let main: f64 = genome
            .choices()
            .iter()
            .zip(&self.main_effects)
            .map(|(&v, row)| row[v as usize])
            .sum();
        let joint: f64 = self
            .interactions
            .iter()
            .filter(|i| i.matches(genome))
            .map(|i| i.logit_delta)
            .sum();
        self.base_logit + main + joint
    }

    pub fn true_rate(&self, genome: &Genome) -> f64 {
        logistic(self.logit_of(genome))
    }

    /// Multiplies every effect by `factor`, leaving the intercept alone.
    pub fn scale_effects(&mut self, factor: f64) {
        for row in &mut self.main_effects {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
        for interaction in &mut self.interactions {
            interaction.logit_delta *= factor;
        }
    }
}

/// One Bernoulli conversion draw at the genome's true rate.
pub fn sample_user<R: Rng + ?Sized>(
    model: &GroundTruthModel,
    genome: &Genome,
    rng: &mut R,
) -> bool {
    rng.random::<f64>() < model.true_rate(genome)
}

/// Exhaustive argmax of the true rate; ties go to the lexicographically first genome.
pub fn brute_force_optimum(
    model: &GroundTruthModel,
    space: &SearchSpace,
    cap: u128,
) -> Result<(Genome, f64), CapExceeded> {
    let mut best: Option<(Genome, f64)> = None;
    for genome in space.enumerate(cap)? {
        let logit = model.logit_of(&genome);
        if best.as_ref().is_none_or(|(_, b)| logit > *b) {
            best = Some((genome, logit));
        }
    }
    let (genome, logit) = best.expect("spaces are never empty");
    Ok((genome, logistic(logit)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationScenario {
    /// Experiment config; its stopping budget is set to `interaction_budget`.
    pub config: ExperimentConfig,
    pub space: SearchSpace,
    pub model: GroundTruthModel,
    pub interaction_budget: u64,
    pub users_per_day: u64,
    pub seed: u64,
    pub noiseless: bool,
}

impl SimulationScenario {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, SimulationError> {
        let scenario = config
            .scenario
            .as_ref()
            .ok_or(SimulationError::NoScenario)?;
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(SimulationError::Invalid(errors));
        }
        let space = config.space().map_err(|e| {
            SimulationError::Invalid(vec![FieldError::new("elements", e.to_string())])
        })?;
        let model = GroundTruthModel::from_config(&space, &scenario.model)?;
        let mut config = config.clone();
        config.stopping.interaction_budget = Some(scenario.interaction_budget);
        Ok(Self {
            space,
            model,
            interaction_budget: scenario.interaction_budget,
            users_per_day: scenario.users_per_day,
            seed: scenario.seed,
            noiseless: scenario.noiseless,
            config,
        })
    }

    /// Overrides every seed (evolution, routing and user draws).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.config.evolution.rng_seed = seed;
        if let Some(s) = self.config.scenario.as_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn experiment_id(&self) -> String {
        self.config
            .experiment_id
            .clone()
            .unwrap_or_else(|| slug(&self.config.name))
    }

    /// The uniform draw that decides whether user `index` converts.
    pub fn user_draw(&self, index: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ USER_SALT);
        rng.set_stream(index);
        rng.random::<f64>()
    }

    /// Virtual arrival time of the `index`-th user.
    pub fn timestamp(&self, index: u64) -> i64 {
        (index as i128 * DAY_MS as i128 / self.users_per_day as i128) as i64
    }
}

/// Lower-case, dash-separated identifier derived from a display name.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let out = out.trim_matches('-').to_string();
    if out.is_empty() {
        "experiment".into()
    } else {
        out
    }
}

/// One day of the three tracked curves: current best, active mean, control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyPoint {
    pub day: u64,
    pub best_rate: Option<f64>,
    pub best_ci_low: Option<f64>,
    pub best_ci_high: Option<f64>,
    pub population_mean_rate: Option<f64>,
    pub control_rate: Option<f64>,
    pub control_ci_low: Option<f64>,
    pub control_ci_high: Option<f64>,
}

impl DailyPoint {
    pub fn observe(day: u64, state: &ExperimentState) -> Self {
        let evaluated: Vec<_> = state.active().filter(|c| c.impressions > 0).collect();
        let best = evaluated
            .iter()
            .copied()
            .min_by(|a, b| stats::rank_order(a, b));
        let est = |c: &crate::evolution::Candidate| {
            stats::estimate(c.conversions, c.impressions, 0.95, IntervalMethod::Wald).ok()
        };
        let best = best.and_then(est);
        let control = state.control().and_then(est);
        let mean = if evaluated.is_empty() {
            None
        } else {
            Some(evaluated.iter().map(|c| c.rate()).sum::<f64>() / evaluated.len() as f64)
        };
        Self {
            day,
            best_rate: best.map(|e| e.rate),
            best_ci_low: best.map(|e| e.ci_low),
            best_ci_high: best.map(|e| e.ci_high),
            population_mean_rate: mean,
            control_rate: control.map(|e| e.rate),
            control_ci_low: control.map(|e| e.ci_low),
            control_ci_high: control.map(|e| e.ci_high),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub state: ExperimentState,
    pub reports: Vec<GenerationReport>,
    pub daily: Vec<DailyPoint>,
    /// Users that arrived.
    pub interactions: u64,
    /// The budget ran out part-way through a generation.
    pub truncated: bool,
}

impl SimulationTrace {
    /// The candidate judged best at the last generation boundary.
    pub fn best_candidate(&self) -> Option<&crate::evolution::Candidate> {
        self.state.best_so_far()
    }
}

/// Step-wise driver: one virtual user per [`Simulation::step`].
///
/// Each user is assigned, then converts according to the model: a Bernoulli
/// draw, or in noiseless mode whenever the candidate's conversions lag
/// `true_rate × impressions`. The day series is sampled every
/// `users_per_day` arrivals.
#[derive(Debug)]
pub struct Simulation<'a, S> {
    scenario: &'a SimulationScenario,
    experiment: Experiment<S>,
    next_user: u64,
    daily: Vec<DailyPoint>,
}

impl<'a, S: RecordSink> Simulation<'a, S> {
    /// Creates and starts the experiment on `sink`.
    pub fn start(scenario: &'a SimulationScenario, sink: S) -> Result<Self, SimulationError> {
        let mut experiment =
            Experiment::create(&scenario.experiment_id(), scenario.config.clone(), 0, sink)?;
        experiment.start(0)?;
        Ok(Self {
            scenario,
            experiment,
            next_user: 0,
            daily: Vec::new(),
        })
    }

    /// Picks a run back up from a recovered experiment. Every simulated user
    /// is new, so the next user index is the impression count. Days before the
    /// resume point are not in the resumed daily series.
    pub fn resume(scenario: &'a SimulationScenario, experiment: Experiment<S>) -> Self {
        let next_user = experiment.state().total_impressions;
        Self {
            scenario,
            experiment,
            next_user,
            daily: Vec::new(),
        }
    }

    pub fn experiment(&self) -> &Experiment<S> {
        &self.experiment
    }

    pub fn next_user(&self) -> u64 {
        self.next_user
    }

    pub fn is_running(&self) -> bool {
        self.experiment.state().status == ExperimentStatus::Running
    }

    /// Simulates one user. Returns false once the experiment has stopped.
    pub fn step(&mut self) -> Result<bool, SimulationError> {
        if !self.is_running() {
            return Ok(false);
        }
        let index = self.next_user;
        let now = self.scenario.timestamp(index);
        let user = format!("v{index}");
        let assignment = self.experiment.assign(&user, now)?;
        let candidate = self
            .experiment
            .state()
            .candidate(assignment.candidate_id)
            .expect("assigned candidate exists");
        let p = self.scenario.model.true_rate(&candidate.genome);
        let converted = if self.scenario.noiseless {
            (candidate.conversions + 1) as f64 <= p * candidate.impressions as f64
        } else {
            self.scenario.user_draw(index) < p
        };
        if converted {
            self.experiment.record_conversion(&user, now)?;
        }
        let state = self.experiment.state();
        if !state.config.allocator.auto_advance
            && state.status == ExperimentStatus::Running
            && state.active().next().is_some()
            && state.is_mature()
        {
            self.experiment.advance(now)?;
        }
        self.next_user += 1;
        if self.next_user.is_multiple_of(self.scenario.users_per_day) {
            let day = self.next_user / self.scenario.users_per_day;
            self.daily
                .push(DailyPoint::observe(day, self.experiment.state()));
        }
        Ok(self.is_running())
    }

    /// Steps until the experiment stops or `end_user` users have arrived.
    pub fn run_until(&mut self, end_user: u64) -> Result<(), SimulationError> {
        while self.next_user < end_user && self.step()? {}
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), SimulationError> {
        self.run_until(u64::MAX)
    }

    pub fn finish(mut self) -> (SimulationTrace, S) {
        let upd = self.scenario.users_per_day;
        if !self.next_user.is_multiple_of(upd) {
            let day = self.next_user / upd + 1;
            self.daily
                .push(DailyPoint::observe(day, self.experiment.state()));
        }
        let (state, sink) = self.experiment.into_parts();
        let truncated = state.stop_reason == Some(StopReason::Budget)
            && state.active().any(|c| c.generation_impressions > 0);
        let trace = SimulationTrace {
            reports: state.history.clone(),
            daily: self.daily,
            interactions: self.next_user,
            truncated,
            state,
        };
        (trace, sink)
    }
}

/// Runs a scenario to completion, keeping the event log in memory.
pub fn run_scenario(
    scenario: &SimulationScenario,
) -> Result<(SimulationTrace, Vec<LogRecord>), SimulationError> {
    let (trace, log) = run_scenario_with(scenario, MemoryLog::new())?;
    Ok((trace, log.records))
}

pub fn run_scenario_with<S: RecordSink>(
    scenario: &SimulationScenario,
    sink: S,
) -> Result<(SimulationTrace, S), SimulationError> {
    let mut sim = Simulation::start(scenario, sink)?;
    sim.run()?;
    Ok(sim.finish())
}

pub const CASE_STUDY_CONTROL_RATE: f64 = 0.0561;
pub const CASE_STUDY_OPTIMUM_RATE: f64 = 0.0822;
pub const CASE_STUDY_BUDGET: u64 = 599_008;

type RawElement = (&'static str, &'static [&'static str], &'static [f64]);

const CASE_STUDY_ELEMENTS: [RawElement; 9] = [
    (
        "background_color",
        &[
            "white",
            "light_gray",
            "yellow",
            "orange",
            "light_green",
            "teal",
            "pink",
            "cream",
            "sky_blue",
        ],
        &[0.0, -0.04, 0.27, 0.05, -0.02, -0.06, -0.10, 0.01, -0.03],
    ),
    (
        "button_color",
        &["blue", "white", "green", "orange", "red", "black", "gray"],
        &[0.0, 0.07, 0.02, -0.03, -0.08, -0.05, -0.07],
    ),
    (
        "call_to_action",
        &[
            "Request Info",
            "Get Started",
            "Find my Program",
            "Learn More",
            "Apply Now",
            "Start Today",
            "See Programs",
        ],
        &[0.0, -0.01, 0.0, -0.04, -0.02, -0.03, -0.06],
    ),
    (
        "headline",
        &[
            "Find the right program",
            "Start your career",
            "Online degrees that fit",
            "Get matched in minutes",
            "Explore 500+ programs",
            "Your future starts here",
            "Compare schools",
            "Learn on your schedule",
            "Take the next step",
        ],
        &[0.0, -0.02, -0.05, -0.01, -0.08, -0.03, -0.06, -0.04, -0.02],
    ),
    (
        "button_text_color",
        &["white", "black", "yellow"],
        &[0.0, -0.02, -0.09],
    ),
    (
        "widget_layout",
        &["stacked", "side_by_side", "compact", "wide"],
        &[0.0, -0.05, -0.01, -0.04],
    ),
    ("font", &["sans", "serif"], &[0.0, -0.06]),
    ("border", &["square", "rounded"], &[0.0, -0.01]),
    ("icon", &["hidden", "shown"], &[0.0, -0.03]),
];

/// (element, value) conditions and raw logit deltas.
const CASE_STUDY_INTERACTIONS: [(&[(&str, &str)], f64); 3] = [
    (
        &[("background_color", "yellow"), ("button_color", "white")],
        0.04,
    ),
    (
        &[
            ("button_color", "white"),
            ("call_to_action", "Find my Program"),
        ],
        0.03,
    ),
    // Decoy: rewards a combination away from the optimum.
    (
        &[("background_color", "orange"), ("button_color", "green")],
        0.08,
    ),
];

/// The planted best design of the case-study model.
pub fn case_study_optimum() -> Genome {
    Genome::new(vec![2, 1, 2, 0, 0, 0, 0, 0, 0])
}

/// Nine elements with 9·7·7·9·3·4·2·2·2 = 381,024 designs, Control at 5.61%
/// and a planted optimum at 8.22%.
pub fn case_study_config() -> ExperimentConfig {
    let elements: Vec<ElementConfig> = CASE_STUDY_ELEMENTS
        .iter()
        .map(|(name, values, _)| ElementConfig {
            name: (*name).into(),
            values: values.iter().map(|v| (*v).into()).collect(),
            display: None,
        })
        .collect();
    let optimum = case_study_optimum();
    let raw_optimum: f64 = CASE_STUDY_ELEMENTS
        .iter()
        .zip(optimum.choices())
        .map(|((_, _, effects), &v)| effects[v as usize])
        .sum::<f64>()
        + CASE_STUDY_INTERACTIONS
            .iter()
            .filter(|(when, _)| {
                when.iter().all(|(e, v)| {
                    let (i, (_, values, _)) = CASE_STUDY_ELEMENTS
                        .iter()
                        .enumerate()
                        .find(|(_, (name, _, _))| name == e)
                        .expect("known element");
                    values[optimum.choice(i)] == *v
                })
            })
            .map(|(_, d)| d)
            .sum::<f64>();
    let scale = (logit(CASE_STUDY_OPTIMUM_RATE) - logit(CASE_STUDY_CONTROL_RATE)) / raw_optimum;
    let main_effects = CASE_STUDY_ELEMENTS
        .iter()
        .flat_map(|(name, values, effects)| {
            values
                .iter()
                .zip(effects.iter())
                .skip(1)
                .filter(|(_, d)| **d != 0.0)
                .map(move |(v, d)| EffectConfig {
                    element: (*name).into(),
                    value: (*v).into(),
                    logit_delta: d * scale,
                })
        })
        .collect();
    let interactions = CASE_STUDY_INTERACTIONS
        .iter()
        .map(|(when, d)| InteractionConfig {
            when: when
                .iter()
                .map(|(e, v)| ConditionConfig {
                    element: (*e).into(),
                    value: (*v).into(),
                })
                .collect(),
            logit_delta: d * scale,
        })
        .collect();
    ExperimentConfig {
        preset: None,
        name: "education-lead-widget".into(),
        experiment_id: Some("case-study".into()),
        elements,
        evolution: EvolutionConfig {
            population_size: 25,
            maturity_age: 2_000,
            mutation_probability: 0.2,
            max_generations: 4,
            rng_seed: 42,
            initial_population_cap: 37,
            control_holdout_fraction: 0.1,
            ..EvolutionConfig::default()
        },
        allocator: AllocatorConfig::default(),
        stopping: StoppingConfig {
            interaction_budget: Some(CASE_STUDY_BUDGET),
            ..StoppingConfig::default()
        },
        scenario: Some(ScenarioConfig {
            model: ModelConfig {
                base_rate: CASE_STUDY_CONTROL_RATE,
                main_effects,
                interactions,
            },
            interaction_budget: CASE_STUDY_BUDGET,
            users_per_day: 10_000,
            seed: 42,
            noiseless: false,
        }),
    }
}

pub fn build_case_study_scenario() -> SimulationScenario {
    SimulationScenario::from_config(&case_study_config()).expect("case-study fixture is valid")
}
