//! The experiment config document (JSON).
//!
//! One document describes the design space, evolution and allocation
//! parameters, stopping rules and, optionally, a simulated-traffic scenario.
//! `{"preset": "case_study"}` expands to the built-in case-study scenario.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{EvolutionConfig, StoppingConfig};
use crate::space::{ElementSpec, SearchSpace, SpaceError};

/// A validation failure tied to a config path such as `elements[2].values`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementConfig {
    pub name: String,
    pub values: Vec<String>,
    /// Free-form rendering hints; carried through, never interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocatorConfig {
    /// How long a user keeps seeing the same design.
    pub sticky_ttl_ms: u64,
    /// Count a fresh impression on every sticky revisit instead of once per assignment.
    pub count_sticky_visits: bool,
    /// Advance the generation as soon as every maturity quota is filled.
    pub auto_advance: bool,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            sticky_ttl_ms: 24 * 60 * 60 * 1000,
            count_sticky_visits: false,
            auto_advance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CaseStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub element: String,
    pub value: String,
    pub logit_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub element: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub when: Vec<ConditionConfig>,
    pub logit_delta: f64,
}

/// Ground-truth conversion model written against element and value names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Conversion rate of the Control design.
    pub base_rate: f64,
    #[serde(default)]
    pub main_effects: Vec<EffectConfig>,
    #[serde(default)]
    pub interactions: Vec<InteractionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub interaction_budget: u64,
    #[serde(default = "default_users_per_day")]
    pub users_per_day: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Replace Bernoulli draws with deterministic expected-value conversions.
    #[serde(default)]
    pub noiseless: bool,
}

fn default_users_per_day() -> u64 {
    10_000
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<String>,
    #[serde(default)]
    pub elements: Vec<ElementConfig>,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub allocator: AllocatorConfig,
    #[serde(default)]
    pub stopping: StoppingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
}

impl ExperimentConfig {
    /// Parses, expands presets and validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut config: ExperimentConfig = serde_json::from_str(text)?;
        if let Some(Preset::CaseStudy) = config.preset {
            let id = config.experiment_id.take();
            config = crate::simulator::case_study_config();
            config.experiment_id = id.or(config.experiment_id);
        }
        let errors = config.validate();
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn space(&self) -> Result<SearchSpace, SpaceError> {
        SearchSpace::new(
            self.elements
                .iter()
                .map(|e| ElementSpec {
                    name: e.name.clone(),
                    values: e.values.clone(),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if self.name.trim().is_empty() {
            errors.push(FieldError::new("name", "must not be empty"));
        }
        if let Some(id) = &self.experiment_id {
            if id.is_empty()
                || !id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                errors.push(FieldError::new(
                    "experiment_id",
                    "must be non-empty [A-Za-z0-9_-]",
                ));
            }
        }
        if self.elements.is_empty() {
            errors.push(FieldError::new(
                "elements",
                "search space must have at least one element",
            ));
        }
        for (i, element) in self.elements.iter().enumerate() {
            if element.name.is_empty() {
                errors.push(FieldError::new(
                    format!("elements[{i}].name"),
                    "must not be empty",
                ));
            }
            if element.values.len() < 2 {
                errors.push(FieldError::new(
                    format!("elements[{i}].values"),
                    "values must have length ≥ 2",
                ));
            }
        }
        if errors.is_empty() {
            if let Err(e) = self.space() {
                errors.push(FieldError::new("elements", e.to_string()));
            }
        }
        errors.extend(self.evolution.validate());
        if self.allocator.sticky_ttl_ms == 0 {
            errors.push(FieldError::new("allocator.sticky_ttl_ms", "must be ≥ 1"));
        }
        if let Some(scenario) = &self.scenario {
            errors.extend(self.validate_scenario(scenario));
        }
        errors
    }

    fn validate_scenario(&self, scenario: &ScenarioConfig) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let rate = scenario.model.base_rate;
        if !(rate > 0.0 && rate < 1.0) {
            errors.push(FieldError::new(
                "scenario.model.base_rate",
                "must lie strictly between 0 and 1",
            ));
        }
        if scenario.users_per_day == 0 {
            errors.push(FieldError::new("scenario.users_per_day", "must be ≥ 1"));
        }
        let demand = self.evolution.population_size as u64 * self.evolution.maturity_age;
        if scenario.interaction_budget < demand {
            errors.push(FieldError::new(
                "scenario.interaction_budget",
                format!("must be ≥ population_size × maturity_age ({demand})"),
            ));
        }
        if let Ok(space) = self.space() {
            if let Err(e) = crate::simulator::GroundTruthModel::from_config(&space, &scenario.model)
            {
                errors.push(FieldError::new("scenario.model", e.to_string()));
            }
        }
        errors
    }
}

/// The template written by `ascend init`: a three-element toy space with a planted model.
pub fn template_config() -> ExperimentConfig {
    let elements = vec![
        ElementConfig {
            name: "headline".into(),
            values: vec![
                "Request Info".into(),
                "Get Started".into(),
                "Find my Program".into(),
            ],
            display: Some(serde_json::json!({"selector": "#widget h2"})),
        },
        ElementConfig {
            name: "button_color".into(),
            values: vec!["blue".into(), "white".into(), "green".into()],
            display: Some(serde_json::json!({"selector": "#widget button"})),
        },
        ElementConfig {
            name: "background".into(),
            values: vec!["plain".into(), "yellow".into()],
            display: None,
        },
    ];
    let effect = |element: &str, value: &str, logit_delta: f64| EffectConfig {
        element: element.into(),
        value: value.into(),
        logit_delta,
    };
    let cond = |element: &str, value: &str| ConditionConfig {
        element: element.into(),
        value: value.into(),
    };
    ExperimentConfig {
        preset: None,
        name: "toy-widget".into(),
        experiment_id: None,
        elements,
        evolution: EvolutionConfig {
            population_size: 4,
            maturity_age: 500,
            max_generations: 4,
            initial_population_cap: 16,
            ..EvolutionConfig::default()
        },
        allocator: AllocatorConfig::default(),
        stopping: StoppingConfig::default(),
        scenario: Some(ScenarioConfig {
            model: ModelConfig {
                base_rate: 0.05,
                main_effects: vec![
                    effect("headline", "Get Started", 0.10),
                    effect("headline", "Find my Program", 0.40),
                    effect("button_color", "white", 0.10),
                    effect("button_color", "green", -0.10),
                    effect("background", "yellow", 0.05),
                ],
                interactions: vec![InteractionConfig {
                    when: vec![cond("button_color", "white"), cond("background", "yellow")],
                    logit_delta: 0.35,
                }],
            },
            interaction_budget: 20_000,
            users_per_day: 2_000,
            seed: 42,
            noiseless: false,
        }),
    }
}

/// Template text with inline `_comment` keys; serde ignores them on load.
pub fn template_document() -> String {
    let mut value = serde_json::to_value(template_config()).expect("template serializes");
    let obj = value.as_object_mut().expect("object");
    obj.insert(
        "_comment".into(),
        serde_json::json!(
            "Ascend experiment config. elements: value index 0 is the control design. \
             evolution: population_size n is retained and bred each generation; maturity_age is the \
             per-generation impression quota. scenario drives `ascend simulate`; drop it for live serving. \
             For the nine-element case-study fixture replace this document with {\"preset\": \"case_study\"}."
        ),
    );
    let mut text = serde_json::to_string_pretty(&value).expect("template serializes");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_validates_and_round_trips() {
        let text = template_document();
        let parsed = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(parsed, template_config());
        assert_eq!(parsed.space().unwrap().element_count(), 3);
        assert!(text.contains(r#"{\"preset\": \"case_study\"}"#));
    }

    #[test]
    fn case_study_preset_expands() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "case_study", "experiment_id": "cs"}"#)
            .unwrap();
        assert_eq!(cfg.space().unwrap().size(), 381_024);
        assert_eq!(cfg.experiment_id.as_deref(), Some("cs"));
    }

    #[test]
    fn single_value_element_is_rejected_with_field_path() {
        let err = ExperimentConfig::from_json(
            r#"{"name":"x","elements":[{"name":"a","values":["only"]},{"name":"b","values":["p","q"]}]}"#,
        )
        .unwrap_err();
        match err {
            ConfigError::Invalid(errors) => {
                assert_eq!(errors[0].field, "elements[0].values");
                assert_eq!(errors[0].message, "values must have length ≥ 2");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn scenario_budget_must_cover_one_generation() {
        let mut cfg = template_config();
        cfg.scenario.as_mut().unwrap().interaction_budget = 10;
        let fields: Vec<_> = cfg.validate().into_iter().map(|e| e.field).collect();
        assert_eq!(fields, vec!["scenario.interaction_budget"]);
    }

    #[test]
    fn unknown_model_reference_is_rejected() {
        let mut cfg = template_config();
        cfg.scenario.as_mut().unwrap().model.main_effects[0].value = "nope".into();
        assert_eq!(cfg.validate()[0].field, "scenario.model");
    }
}
