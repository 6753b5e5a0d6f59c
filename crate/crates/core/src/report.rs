//! The experiment report shared by the HTTP API and the CLI, plus CSV writers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evolution::{Candidate, CandidateStatus, GenerationReport};
use crate::experiment::ExperimentState;
use crate::simulator::DailyPoint;
use crate::stats::{self, IntervalMethod};

pub const DEFAULT_TOP: usize = 10;

const CAVEAT: &str =
    "Significance is an unadjusted two-proportion z-test of each row against Control; \
with many candidates compared, some rows will clear the 95% bar by chance.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub candidate_id: u64,
    pub genome: String,
    pub design: BTreeMap<String, String>,
    pub birth_generation: u32,
    pub status: CandidateStatus,
    pub impressions: u64,
    pub conversions: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub improvement_pct: Option<f64>,
    pub p_value: Option<f64>,
    pub significant_95: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub retained: usize,
    pub discarded: usize,
    pub best_candidate_id: Option<u64>,
    pub best_rate: Option<f64>,
    pub best_ci_low: Option<f64>,
    pub best_ci_high: Option<f64>,
    pub control_rate: Option<f64>,
    pub total_interactions: u64,
}

impl GenerationSummary {
    pub fn of(report: &GenerationReport) -> Self {
        let best = report
            .best_candidate_id
            .and_then(|id| report.estimates.iter().find(|e| e.candidate_id == id))
            .map(|e| e.estimate);
        Self {
            generation: report.generation,
            retained: report.retained.len(),
            discarded: report.discarded.len(),
            best_candidate_id: report.best_candidate_id,
            best_rate: best.map(|e| e.rate),
            best_ci_low: best.map(|e| e.ci_low),
            best_ci_high: best.map(|e| e.ci_high),
            control_rate: report.control.map(|e| e.rate),
            total_interactions: report.total_interactions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment_id: String,
    pub name: String,
    pub status: String,
    pub stop_reason: Option<String>,
    pub generation: u32,
    pub space_size: u128,
    pub total_interactions: u64,
    pub total_conversions: u64,
    pub unattributed_conversions: u64,
    pub ci_level: f64,
    pub interval_method: IntervalMethod,
    /// Judged best at the last generation boundary.
    pub best_candidate_id: Option<u64>,
    pub control: Option<ReportRow>,
    /// Live candidates that reached the maturity quota, best first.
    pub top: Vec<ReportRow>,
    pub generations: Vec<GenerationSummary>,
    pub note: String,
}

impl Report {
    pub fn build(state: &ExperimentState, top: usize) -> Self {
        let m = state.config.evolution.maturity_age;
        let control = state.control().filter(|c| c.impressions > 0);
        let mut eligible: Vec<&Candidate> = state.active().filter(|c| c.impressions >= m).collect();
        eligible.sort_by(|a, b| stats::rank_order(a, b));
        eligible.truncate(top);
        Self {
            experiment_id: state.experiment_id.clone(),
            name: state.config.name.clone(),
            status: state.status.as_str().into(),
            stop_reason: state.stop_reason.map(|r| r.as_str().into()),
            generation: state.generation,
            space_size: state.space.size(),
            total_interactions: state.total_impressions,
            total_conversions: state.total_conversions,
            unattributed_conversions: state.unattributed_conversions,
            ci_level: 0.95,
            interval_method: IntervalMethod::Wald,
            best_candidate_id: state.best_so_far().map(|c| c.id),
            control: control.map(|c| row(state, c, None)),
            top: eligible
                .into_iter()
                .map(|c| row(state, c, control))
                .collect(),
            generations: state.history.iter().map(GenerationSummary::of).collect(),
            note: CAVEAT.into(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// The `top` table as CSV.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "candidate_id",
                "genome",
                "impressions",
                "conversions",
                "rate",
                "ci_low",
                "ci_high",
                "improvement_pct",
                "significant_95",
            ])
            .expect("in-memory write");
        for r in &self.top {
            writer
                .write_record([
                    r.candidate_id.to_string(),
                    r.genome.clone(),
                    r.impressions.to_string(),
                    r.conversions.to_string(),
                    r.rate.to_string(),
                    r.ci_low.to_string(),
                    r.ci_high.to_string(),
                    r.improvement_pct.map(|x| x.to_string()).unwrap_or_default(),
                    r.significant_95.to_string(),
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
    }
}

fn row(state: &ExperimentState, c: &Candidate, control: Option<&Candidate>) -> ReportRow {
    let est = stats::estimate(c.conversions, c.impressions, 0.95, IntervalMethod::Wald)
        .expect("impressions > 0");
    let (improvement_pct, p_value) = match control {
        Some(ctrl) => {
            let test = stats::two_proportion_test(
                ctrl.conversions,
                ctrl.impressions,
                c.conversions,
                c.impressions,
            )
            .expect("valid counts");
            (
                stats::improvement_over_control(est.rate, ctrl.rate()).ok(),
                Some(test.p_value_two_sided),
            )
        }
        None => (None, None),
    };
    ReportRow {
        candidate_id: c.id,
        genome: state.space.genome_label(&c.genome),
        design: state
            .space
            .describe(&c.genome)
            .into_iter()
            .map(|(e, v)| (e.to_string(), v.to_string()))
            .collect(),
        birth_generation: c.birth_generation,
        status: c.status,
        impressions: c.impressions,
        conversions: c.conversions,
        rate: est.rate,
        ci_low: est.ci_low,
        ci_high: est.ci_high,
        improvement_pct,
        p_value,
        significant_95: p_value.is_some_and(|p| p < 0.05),
    }
}

pub fn generations_csv(reports: &[GenerationReport]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in reports {
        writer
            .serialize(GenerationSummary::of(r))
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
}

pub fn daily_csv(points: &[DailyPoint]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for p in points {
        writer.serialize(p).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::template_config;
    use crate::simulator::{run_scenario, SimulationScenario};

    fn finished() -> ExperimentState {
        run_scenario(&SimulationScenario::from_config(&template_config()).unwrap())
            .unwrap()
            .0
            .state
    }

    #[test]
    fn report_lists_mature_live_candidates_best_first() {
        let state = finished();
        let report = Report::build(&state, 3);
        assert!(report.top.len() <= 3 && !report.top.is_empty());
        for pair in report.top.windows(2) {
            assert!(pair[0].rate >= pair[1].rate);
        }
        for r in &report.top {
            assert!(r.impressions >= state.config.evolution.maturity_age);
            assert_eq!(r.status, CandidateStatus::Active);
            assert!(r.ci_low <= r.rate && r.rate <= r.ci_high);
            assert_eq!(r.design.len(), 3);
        }
        assert_eq!(report.generations.len(), state.history.len());
        assert_eq!(report.status, "stopped");
        assert!(report.control.is_some());
    }

    #[test]
    fn json_is_stable() {
        let state = finished();
        let a = Report::build(&state, 5).to_json_pretty();
        let b = Report::build(&state, 5).to_json_pretty();
        assert_eq!(a, b);
        let back: Report = serde_json::from_str(&a).unwrap();
        assert_eq!(back, Report::build(&state, 5));
    }

    #[test]
    fn csv_shape() {
        let state = finished();
        let report = Report::build(&state, 4);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "candidate_id,genome,impressions,conversions,rate,ci_low,ci_high,improvement_pct,significant_95"
        );
        assert_eq!(lines.len(), report.top.len() + 1);
        assert!(!csv.contains('\r'));
        let g = generations_csv(&state.history);
        assert!(g.starts_with("generation,retained,discarded,best_candidate_id"));
        assert_eq!(g.lines().count(), state.history.len() + 1);
    }
}
