//! Turns a responses file into distance, consistency, and confidence
//! reports. Shared by the `evaluate` and `replay` commands; everything is
//! deterministic given the inputs and the run seed.

use crate::cohorts::{partition_by, Attribute, CohortError, CountryMap, PartitionAux, RuleSet};
use crate::data::{
    assemble_sequence, DataError, FileMeta, ProbeResponse, Scenario, SelectionSequence, Survey,
    UserProfile,
};
use crate::metrics::{
    adaptation_baseline, consistency_baseline, consistency_score, emd, group_distance,
    MetricsError,
};
use crate::probe::mean_confidence;
use crate::report::{ConfidenceReport, ConsistencyReport, DistanceReport, PairDistance};
use crate::seed::derive_seed;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no responses to evaluate")]
    NoResponses,
}

pub struct EvaluationInputs<'a> {
    pub survey: &'a Survey,
    pub profiles: &'a [UserProfile],
    pub responses: &'a [ProbeResponse],
    pub attributes: &'a [Attribute],
    pub country_map: Option<&'a CountryMap>,
    pub job_rules: Option<&'a RuleSet>,
    pub position_rules: Option<&'a RuleSet>,
    /// user_id -> label maps from an endpoint-backed classifier; take
    /// precedence over the rule files.
    pub job_assignments: Option<&'a std::collections::BTreeMap<String, String>>,
    pub position_assignments: Option<&'a std::collections::BTreeMap<String, String>>,
    pub seed: u64,
    /// Exclude degenerate one-hot fallbacks from centroid math.
    pub strict_degenerate: bool,
    pub meta: FileMeta,
}

pub struct EvaluationOutputs {
    pub distance_reports: Vec<DistanceReport>,
    pub consistency: Option<ConsistencyReport>,
    pub confidence: ConfidenceReport,
    pub warnings: Vec<String>,
}

/// Report file name for one (scenario, attribute) distance report.
pub fn distance_report_name(scenario: Scenario, attribute: &str) -> String {
    format!("distance_{scenario}_{attribute}.json")
}

pub fn run_evaluation(inputs: &EvaluationInputs<'_>) -> Result<EvaluationOutputs, EvaluateError> {
    if inputs.responses.is_empty() {
        return Err(EvaluateError::NoResponses);
    }
    let mut warnings = Vec::new();
    let mut distance_reports = Vec::new();

    for scenario in [Scenario::Profile, Scenario::Dialogue] {
        // Degenerate fallbacks only leave the centroid math under the
        // strict flag; confidence and consistency always see everything.
        let scenario_responses: Vec<&ProbeResponse> = inputs
            .responses
            .iter()
            .filter(|r| r.scenario == scenario)
            .filter(|r| !(inputs.strict_degenerate && r.distribution.is_degenerate()))
            .collect();
        if scenario_responses.is_empty() {
            continue;
        }
        let users_with_data: BTreeSet<&str> = scenario_responses
            .iter()
            .map(|r| r.user_id.as_str())
            .collect();
        let covered: Vec<UserProfile> = inputs
            .profiles
            .iter()
            .filter(|p| users_with_data.contains(p.user_id.as_str()))
            .cloned()
            .collect();

        for &attribute in inputs.attributes {
            let aux = match attribute {
                Attribute::Age | Attribute::Education => PartitionAux::None,
                Attribute::DevelopmentLevel => match inputs.country_map {
                    Some(map) => PartitionAux::Countries(map),
                    None => {
                        return Err(CohortError::MissingAux {
                            attribute: "development_level",
                            what: "a country development map",
                        }
                        .into())
                    }
                },
                Attribute::JobCategory => match (inputs.job_assignments, inputs.job_rules) {
                    (Some(assignments), _) => PartitionAux::Precomputed(assignments),
                    (None, Some(rules)) => PartitionAux::Rules(rules),
                    (None, None) => {
                        return Err(CohortError::MissingAux {
                            attribute: "job_category",
                            what: "classification rules or precomputed labels",
                        }
                        .into())
                    }
                },
                Attribute::PositionLevel => {
                    match (inputs.position_assignments, inputs.position_rules) {
                        (Some(assignments), _) => PartitionAux::Precomputed(assignments),
                        (None, Some(rules)) => PartitionAux::Rules(rules),
                        (None, None) => {
                            return Err(CohortError::MissingAux {
                                attribute: "position_level",
                                what: "classification rules or precomputed labels",
                            }
                            .into())
                        }
                    }
                }
            };
            let partition = partition_by(attribute, &covered, &aux)?;
            if partition.groups.len() < 2 {
                warnings.push(format!(
                    "{scenario}/{attribute}: only {} group(s), skipping distances",
                    partition.groups.len()
                ));
                continue;
            }

            let mut group_responses: BTreeMap<String, Vec<&ProbeResponse>> = BTreeMap::new();
            for (label, members) in &partition.groups {
                let members_set: BTreeSet<&str> = members.iter().map(String::as_str).collect();
                group_responses.insert(
                    label.clone(),
                    scenario_responses
                        .iter()
                        .filter(|r| members_set.contains(r.user_id.as_str()))
                        .copied()
                        .collect(),
                );
            }

            let baseline =
                adaptation_baseline(&group_responses, &scenario_responses, inputs.survey)?;
            let labels: Vec<String> = group_responses.keys().cloned().collect();
            let mut pairs = Vec::new();
            for i in 0..labels.len() {
                for j in (i + 1)..labels.len() {
                    let distance = group_distance(
                        &group_responses[&labels[i]],
                        &group_responses[&labels[j]],
                        inputs.survey,
                    )?;
                    let ratio = (baseline > 0.0).then(|| distance / baseline);
                    pairs.push(PairDistance {
                        group_a: labels[i].clone(),
                        group_b: labels[j].clone(),
                        distance,
                        ratio,
                    });
                }
            }
            let group_sizes: BTreeMap<String, usize> = partition
                .groups
                .iter()
                .map(|(label, members)| (label.clone(), members.len()))
                .collect();
            distance_reports.push(DistanceReport {
                meta: inputs.meta.clone(),
                attribute: attribute.label().to_string(),
                scenario,
                groups: labels,
                group_sizes,
                baseline,
                undefined_baseline: baseline <= 0.0,
                pairs,
            });
        }
    }

    let consistency = build_consistency(inputs, &mut warnings)?;
    let confidence = build_confidence(inputs);

    Ok(EvaluationOutputs {
        distance_reports,
        consistency,
        confidence,
        warnings,
    })
}

fn sequences_for(
    inputs: &EvaluationInputs<'_>,
    scenario: Scenario,
) -> Result<BTreeMap<String, SelectionSequence>, EvaluateError> {
    let mut by_user: BTreeMap<String, Vec<&ProbeResponse>> = BTreeMap::new();
    for r in inputs.responses.iter().filter(|r| r.scenario == scenario) {
        by_user.entry(r.user_id.clone()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (user, responses) in by_user {
        // only users with a complete sheet enter the consistency pairing
        if responses.len() != inputs.survey.m() {
            continue;
        }
        let seq = assemble_sequence(&responses, inputs.survey)?;
        out.insert(user, seq);
    }
    Ok(out)
}

fn build_consistency(
    inputs: &EvaluationInputs<'_>,
    warnings: &mut Vec<String>,
) -> Result<Option<ConsistencyReport>, EvaluateError> {
    let profile_seqs = sequences_for(inputs, Scenario::Profile)?;
    let dialogue_seqs = sequences_for(inputs, Scenario::Dialogue)?;
    if profile_seqs.is_empty() || dialogue_seqs.is_empty() {
        warnings.push("consistency skipped: one scenario has no complete sheets".into());
        return Ok(None);
    }
    let mut pairs: Vec<(SelectionSequence, SelectionSequence)> = Vec::new();
    for (user, su) in &profile_seqs {
        if let Some(sd) = dialogue_seqs.get(user) {
            pairs.push((su.clone(), sd.clone()));
        }
    }
    if pairs.len() < 2 {
        warnings.push(format!(
            "consistency skipped: {} matched user(s), need at least 2",
            pairs.len()
        ));
        return Ok(None);
    }
    let mean_emd = consistency_score(&pairs)?;
    let pairing_seed = derive_seed(inputs.seed, "consistency-derangement", 0);
    let baseline_emd = consistency_baseline(&pairs, pairing_seed)?;
    let ratio = (baseline_emd > 0.0).then(|| mean_emd / baseline_emd);
    let mut per_user = BTreeMap::new();
    for (su, sd) in &pairs {
        per_user.insert(su.user_id.clone(), emd(su, sd)?);
    }
    Ok(Some(ConsistencyReport {
        meta: inputs.meta.clone(),
        users: pairs.len(),
        mean_emd,
        baseline_emd,
        ratio,
        pairing_seed,
        per_user,
    }))
}

fn build_confidence(inputs: &EvaluationInputs<'_>) -> ConfidenceReport {
    let mut mean = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for scenario in [Scenario::Profile, Scenario::Dialogue] {
        let count = inputs
            .responses
            .iter()
            .filter(|r| r.scenario == scenario)
            .count();
        if count == 0 {
            continue;
        }
        counts.insert(scenario.to_string(), count);
        if let Ok(value) = mean_confidence(inputs.responses, scenario) {
            mean.insert(scenario.to_string(), value);
        }
    }
    ConfidenceReport {
        meta: inputs.meta.clone(),
        mean_confidence: mean,
        response_counts: counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{OptionDistribution, ProbeMeta, SurveyOption, SurveyQuestion};

    fn survey(m: u16) -> Survey {
        Survey::new(
            (1..=m)
                .map(|id| SurveyQuestion {
                    question_id: id,
                    text: format!("Question {id}?"),
                    options: (1..=5)
                        .map(|oid| SurveyOption {
                            option_id: oid,
                            label: format!("option {oid}"),
                        })
                        .collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn profile(user: &str, age: u16) -> UserProfile {
        serde_json::from_value(serde_json::json!({
            "user_id": user,
            "age": age,
            "gender": "male",
            "job_title": "Engineer",
            "education_level": "Bachelor",
            "nationality": "Japan",
        }))
        .unwrap()
    }

    fn response(user: &str, scenario: Scenario, question: u16, hot: u8) -> ProbeResponse {
        ProbeResponse {
            user_id: user.into(),
            question_id: question,
            scenario,
            selected_option_id: hot,
            justification: "j".into(),
            distribution: OptionDistribution::one_hot_fallback(hot).unwrap(),
            raw_logprobs: vec![],
            meta: ProbeMeta::default(),
        }
    }

    #[test]
    fn identical_groups_give_zero_distances() {
        let survey = survey(3);
        let profiles = vec![profile("u1", 23), profile("u2", 65)];
        let mut responses = Vec::new();
        for user in ["u1", "u2"] {
            for q in 1..=3 {
                responses.push(response(user, Scenario::Profile, q, 2));
            }
        }
        let inputs = EvaluationInputs {
            survey: &survey,
            profiles: &profiles,
            responses: &responses,
            attributes: &[Attribute::Age],
            country_map: None,
            job_rules: None,
            position_rules: None,
            job_assignments: None,
            position_assignments: None,
            seed: 1,
            strict_degenerate: false,
            meta: FileMeta::new(1),
        };
        let out = run_evaluation(&inputs).unwrap();
        assert_eq!(out.distance_reports.len(), 1);
        let report = &out.distance_reports[0];
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(report.pairs[0].distance, 0.0);
        assert!(report.undefined_baseline);
        assert!(report.pairs[0].ratio.is_none());
        // one scenario only: consistency is skipped, not an error
        assert!(out.consistency.is_none());
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn consistency_pairs_matched_users() {
        let survey = survey(2);
        let profiles = vec![profile("u1", 23), profile("u2", 30), profile("u3", 41)];
        let mut responses = Vec::new();
        for user in ["u1", "u2", "u3"] {
            for q in 1..=2 {
                responses.push(response(user, Scenario::Profile, q, 1));
                responses.push(response(user, Scenario::Dialogue, q, 5));
            }
        }
        let inputs = EvaluationInputs {
            survey: &survey,
            profiles: &profiles,
            responses: &responses,
            attributes: &[],
            country_map: None,
            job_rules: None,
            position_rules: None,
            job_assignments: None,
            position_assignments: None,
            seed: 3,
            strict_degenerate: false,
            meta: FileMeta::new(3),
        };
        let out = run_evaluation(&inputs).unwrap();
        let consistency = out.consistency.unwrap();
        assert_eq!(consistency.users, 3);
        assert!((consistency.mean_emd - 4.0).abs() <= 1e-12);
        // derangement shuffles across users that all answered the same way
        assert!((consistency.baseline_emd - 4.0).abs() <= 1e-12);
        assert_eq!(consistency.ratio, Some(1.0));
        assert_eq!(out.confidence.response_counts["profile"], 6);
    }
}
