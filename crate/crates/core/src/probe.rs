//! Survey probing: render scenario prompts, query the target model, and
//! turn option-token log probabilities into normalized distributions.

use crate::data::{
    Dialogue, OptionDistribution, ProbeMeta, ProbeResponse, Role, Scenario, Survey,
    SurveyQuestion, UserProfile,
};
use crate::gateway::{
    ChatRequest, ChatResponse, EndpointConfig, FieldKind, Gateway, GatewayError, Message,
    OutputSchema,
};
use crate::seed::derive_seed;
use crate::templates::TemplateSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("dialogue has no turns")]
    EmptyDialogue,
    #[error("could not locate the selected option token in the output")]
    OptionTokenNotLocated,
    #[error("dialogue user '{0}' has no profile")]
    MissingProfile(String),
    #[error("{count} probe items stayed unanswered after retries; first: {first}")]
    Unanswered { count: usize, first: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub target: EndpointConfig,
    /// Query twice: free-form reasoning first, then the schema-constrained
    /// answer with the reasoning appended.
    #[serde(default)]
    pub reasoning_mode: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Which scenarios a probe run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioSelection {
    Profile,
    Dialogue,
    #[default]
    Both,
}

impl ScenarioSelection {
    pub fn includes(&self, scenario: Scenario) -> bool {
        match self {
            ScenarioSelection::Both => true,
            ScenarioSelection::Profile => scenario == Scenario::Profile,
            ScenarioSelection::Dialogue => scenario == Scenario::Dialogue,
        }
    }
}

/// Raw per-option logprobs read at the extraction position.
#[derive(Debug, Clone)]
pub struct RawOptionLogprobs {
    /// Index k holds the logprob observed for option id k+1, if any.
    pub logprobs: [Option<f64>; 5],
    pub source_position: usize,
}

fn answer_schema() -> OutputSchema {
    OutputSchema::new("survey_answer")
        .field(
            "selected_option_id",
            FieldKind::Integer {
                min: Some(1),
                max: Some(5),
            },
            true,
        )
        .field("justification", FieldKind::Text { non_empty: true }, true)
}

const SCHEMA_INSTRUCTION: &str = "Reply only with a JSON object: \
{\"selected_option_id\": <integer 1-5>, \"justification\": \"<one or two sentences>\"}";

fn options_block(question: &SurveyQuestion) -> String {
    question
        .ordered_options()
        .iter()
        .map(|o| format!("{}. {}", o.option_id, o.label))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Prompt for the explicit-profile scenario: a personalization system frame
/// plus one user message holding the profile and the question in the third
/// person.
pub fn render_profile_prompt(
    templates: &TemplateSet,
    profile: &UserProfile,
    question: &SurveyQuestion,
) -> Vec<Message> {
    vec![
        Message::system(templates.get("probe_profile_system.txt")),
        Message::user(templates.render(
            "probe_profile_user.txt",
            &[
                ("PROFILE", &profile.prompt_block()),
                ("QUESTION", &question.text),
                ("OPTIONS", &options_block(question)),
                ("SCHEMA", SCHEMA_INSTRUCTION),
            ],
        )),
    ]
}

/// Prompt for the dialogue-history scenario: the dialogue replayed as
/// alternating messages, then the question posed in the first person.
pub fn render_dialogue_prompt(
    templates: &TemplateSet,
    dialogue: &Dialogue,
    question: &SurveyQuestion,
) -> Result<Vec<Message>, ProbeError> {
    if dialogue.turns.is_empty() {
        return Err(ProbeError::EmptyDialogue);
    }
    let mut messages: Vec<Message> = dialogue
        .turns
        .iter()
        .map(|t| match t.role {
            Role::User => Message::user(&t.content),
            Role::Assistant => Message::assistant(&t.content),
        })
        .collect();
    messages.push(Message::user(templates.render(
        "probe_dialogue_user.txt",
        &[
            ("QUESTION", &question.text),
            ("OPTIONS", &options_block(question)),
            ("SCHEMA", SCHEMA_INSTRUCTION),
        ],
    )));
    Ok(messages)
}

fn trim_token(token: &str) -> &str {
    token.trim().trim_matches('"')
}

fn option_index(token: &str) -> Option<usize> {
    match trim_token(token) {
        "1" => Some(0),
        "2" => Some(1),
        "3" => Some(2),
        "4" => Some(3),
        "5" => Some(4),
        _ => None,
    }
}

/// Read the option distribution out of a response's token logprobs.
///
/// The extraction position is the first token after the
/// `selected_option_id` field name whose trimmed text equals the selected
/// digit. Its top alternatives map onto option ids; absent options get
/// probability 0.0 and the masses are normalized to sum to 1. When no
/// option token is visible at all (or the response carries no logprobs),
/// the fallback is a one-hot at the selected id, flagged degenerate.
pub fn extract_option_distribution(
    response: &ChatResponse,
    selected_option_id: u8,
) -> Result<(OptionDistribution, RawOptionLogprobs), ProbeError> {
    let empty = RawOptionLogprobs {
        logprobs: [None; 5],
        source_position: 0,
    };
    if response.token_logprobs.is_empty() {
        return Ok((
            OptionDistribution::one_hot_fallback(selected_option_id)?,
            empty,
        ));
    }

    // Token offsets inside the concatenated stream locate "after the field
    // name" deterministically.
    let mut stream = String::new();
    let mut spans = Vec::with_capacity(response.token_logprobs.len());
    for t in &response.token_logprobs {
        spans.push(stream.len());
        stream.push_str(&t.token);
    }
    let field_end = stream
        .find("selected_option_id")
        .map(|idx| idx + "selected_option_id".len())
        .ok_or(ProbeError::OptionTokenNotLocated)?;
    let digit = selected_option_id.to_string();
    let position = response
        .token_logprobs
        .iter()
        .zip(&spans)
        .find(|(t, &start)| start >= field_end && trim_token(&t.token) == digit)
        .map(|(t, _)| t.position)
        .ok_or(ProbeError::OptionTokenNotLocated)?;

    let entry = &response.token_logprobs[position];
    let mut logprobs: [Option<f64>; 5] = [None; 5];
    for (token, lp) in &entry.alternatives {
        if let Some(idx) = option_index(token) {
            // alternatives arrive ranked, so the first hit per id wins
            if logprobs[idx].is_none() {
                logprobs[idx] = Some(*lp);
            }
        }
    }
    if let Some(idx) = option_index(&entry.token) {
        if logprobs[idx].is_none() {
            logprobs[idx] = Some(entry.logprob);
        }
    }

    let raw = RawOptionLogprobs {
        logprobs,
        source_position: position,
    };
    if logprobs.iter().all(Option::is_none) {
        return Ok((
            OptionDistribution::one_hot_fallback(selected_option_id)?,
            raw,
        ));
    }
    let mut masses = [0.0; 5];
    for (k, lp) in logprobs.iter().enumerate() {
        if let Some(lp) = lp {
            masses[k] = lp.exp();
        }
    }
    Ok((OptionDistribution::from_masses(masses)?, raw))
}

/// What a single probe item is asked against.
pub enum ProbeContext<'a> {
    Profile(&'a UserProfile),
    Dialogue(&'a Dialogue),
}

impl ProbeContext<'_> {
    fn scenario(&self) -> Scenario {
        match self {
            ProbeContext::Profile(_) => Scenario::Profile,
            ProbeContext::Dialogue(_) => Scenario::Dialogue,
        }
    }

    fn user_id(&self) -> &str {
        match self {
            ProbeContext::Profile(p) => &p.user_id,
            ProbeContext::Dialogue(d) => &d.user_id,
        }
    }
}

pub struct ValueProbe {
    gateway: Gateway,
    templates: TemplateSet,
    reasoning_mode: bool,
    seed: u64,
}

impl ValueProbe {
    pub fn new(cfg: &ProbeConfig, templates: TemplateSet) -> Result<Self, ProbeError> {
        Ok(Self {
            gateway: Gateway::new(cfg.target.clone())?,
            templates,
            reasoning_mode: cfg.reasoning_mode,
            seed: cfg.seed,
        })
    }

    /// Ask one survey question in one context and build the stored
    /// response. When the model's reported id disagrees with the extracted
    /// distribution's argmax, the argmax wins and the reported id moves to
    /// metadata.
    pub async fn probe_one(
        &self,
        question: &SurveyQuestion,
        context: &ProbeContext<'_>,
        seed: u64,
    ) -> Result<ProbeResponse, ProbeError> {
        let messages = match context {
            ProbeContext::Profile(profile) => {
                render_profile_prompt(&self.templates, profile, question)
            }
            ProbeContext::Dialogue(dialogue) => {
                render_dialogue_prompt(&self.templates, dialogue, question)?
            }
        };
        let request = ChatRequest::new(messages)
            .with_schema(answer_schema())
            .with_logprobs()
            .with_seed(seed);

        let (value, response, mut meta) = if self.reasoning_mode {
            let outcome = self.gateway.two_pass_reason(&request).await?;
            let meta = ProbeMeta {
                reported_option_id: None,
                empty_reasoning: outcome.empty_reasoning,
                passes: Some(2),
            };
            (outcome.value, outcome.response, meta)
        } else {
            let outcome = self.gateway.complete_structured(&request).await?;
            (outcome.value, outcome.response, ProbeMeta::default())
        };

        let reported = value["selected_option_id"]
            .as_i64()
            .expect("schema guarantees selected_option_id") as u8;
        let justification = value["justification"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        let (distribution, raw) = extract_option_distribution(&response, reported)?;
        let argmax = distribution.argmax_option();
        if argmax != reported {
            meta.reported_option_id = Some(reported);
        }
        let raw_logprobs: Vec<(String, f64)> = raw
            .logprobs
            .iter()
            .enumerate()
            .filter_map(|(k, lp)| lp.map(|lp| ((k + 1).to_string(), lp)))
            .collect();
        Ok(ProbeResponse {
            user_id: context.user_id().to_string(),
            question_id: question.question_id,
            scenario: context.scenario(),
            selected_option_id: argmax,
            justification,
            distribution,
            raw_logprobs,
            meta,
        })
    }

    /// Probe every (user, question) item for the selected scenarios.
    ///
    /// Items run concurrently under the gateway limit; failed items get one
    /// extra round, and the run fails if anything is still unanswered.
    /// Output is sorted by (user_id, scenario, question_id).
    pub async fn probe_run(
        &self,
        survey: &Survey,
        profiles: &[UserProfile],
        dialogues: &[Dialogue],
        selection: ScenarioSelection,
    ) -> Result<Vec<ProbeResponse>, ProbeError> {
        let by_id: BTreeMap<&str, &UserProfile> =
            profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
        for d in dialogues {
            if !by_id.contains_key(d.user_id.as_str()) {
                return Err(ProbeError::MissingProfile(d.user_id.clone()));
            }
        }

        let mut items: Vec<(ProbeContext<'_>, &SurveyQuestion, u64)> = Vec::new();
        let mut counter = 0u64;
        if selection.includes(Scenario::Profile) {
            for profile in profiles {
                for question in survey.questions() {
                    items.push((
                        ProbeContext::Profile(profile),
                        question,
                        derive_seed(self.seed, "probe", counter),
                    ));
                    counter += 1;
                }
            }
        }
        if selection.includes(Scenario::Dialogue) {
            for dialogue in dialogues {
                for question in survey.questions() {
                    items.push((
                        ProbeContext::Dialogue(dialogue),
                        question,
                        derive_seed(self.seed, "probe", counter),
                    ));
                    counter += 1;
                }
            }
        }

        let first_round = futures::future::join_all(
            items
                .iter()
                .map(|(ctx, question, seed)| self.probe_one(question, ctx, *seed)),
        )
        .await;
        let mut responses = Vec::with_capacity(items.len());
        let mut failed: Vec<(&(ProbeContext<'_>, &SurveyQuestion, u64), String)> = Vec::new();
        for (item, outcome) in items.iter().zip(first_round) {
            match outcome {
                Ok(r) => responses.push(r),
                Err(e) => failed.push((item, e.to_string())),
            }
        }
        if !failed.is_empty() {
            let retry = futures::future::join_all(
                failed
                    .iter()
                    .map(|((ctx, question, seed), _)| self.probe_one(question, ctx, *seed)),
            )
            .await;
            let mut still_failed = Vec::new();
            for ((item, _), outcome) in failed.iter().zip(retry) {
                match outcome {
                    Ok(r) => responses.push(r),
                    Err(e) => still_failed.push((
                        format!(
                            "{}/{}/q{}",
                            item.0.user_id(),
                            item.0.scenario(),
                            item.1.question_id
                        ),
                        e.to_string(),
                    )),
                }
            }
            if !still_failed.is_empty() {
                let (what, why) = &still_failed[0];
                return Err(ProbeError::Unanswered {
                    count: still_failed.len(),
                    first: format!("{what}: {why}"),
                });
            }
        }
        responses.sort_by(|a, b| {
            (&a.user_id, a.scenario, a.question_id).cmp(&(&b.user_id, b.scenario, b.question_id))
        });
        Ok(responses)
    }
}

/// Mean over responses of the probability assigned to the selected option.
pub fn mean_confidence(responses: &[ProbeResponse], scenario: Scenario) -> Result<f64, ProbeError> {
    let maxima: Vec<f64> = responses
        .iter()
        .filter(|r| r.scenario == scenario)
        .map(|r| r.distribution.max_prob())
        .collect();
    if maxima.is_empty() {
        return Err(ProbeError::Data(crate::data::DataError::MissingQuestion(1)));
    }
    Ok(maxima.iter().sum::<f64>() / maxima.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::TokenLogprob;

    fn question() -> SurveyQuestion {
        serde_json::from_value(serde_json::json!({
            "id": 1,
            "text": "How important is it to have challenging work?",
            "options": [
                {"id": 3, "label": "moderately important"},
                {"id": 1, "label": "of utmost importance"},
                {"id": 2, "label": "very important"},
                {"id": 5, "label": "of little importance"},
                {"id": 4, "label": "slightly important"}
            ]
        }))
        .unwrap()
    }

    fn profile() -> UserProfile {
        serde_json::from_value(serde_json::json!({
            "user_id": "u1",
            "age": 23,
            "gender": "male",
            "job_title": "Data Scientist",
            "education_level": "Bachelor",
            "nationality": "Japan"
        }))
        .unwrap()
    }

    fn structured_response(tokens: Vec<TokenLogprob>) -> ChatResponse {
        let text: String = tokens.iter().map(|t| t.token.clone()).collect();
        ChatResponse {
            text,
            token_logprobs: tokens,
            finish_reason: "stop".into(),
        }
    }

    fn token(position: usize, token: &str, logprob: f64, top: Vec<(&str, f64)>) -> TokenLogprob {
        TokenLogprob {
            position,
            token: token.into(),
            logprob,
            alternatives: top.into_iter().map(|(t, lp)| (t.into(), lp)).collect(),
        }
    }

    #[test]
    fn profile_prompt_contains_every_field_and_ordered_options() {
        let messages = render_profile_prompt(&TemplateSet::builtin(), &profile(), &question());
        assert_eq!(messages.len(), 2);
        let user = &messages[1].content;
        for needle in ["age: 23", "Data Scientist", "Bachelor", "Japan", "male"] {
            assert!(user.contains(needle), "missing {needle}");
        }
        let i1 = user.find("1. of utmost importance").unwrap();
        let i5 = user.find("5. of little importance").unwrap();
        assert!(i1 < i5);
    }

    #[test]
    fn dialogue_prompt_replays_turns_and_asks_first_person() {
        let dialogue: Dialogue = serde_json::from_value(serde_json::json!({
            "user_id": "u1",
            "turns": [
                {"role": "user", "content": "q1"},
                {"role": "assistant", "content": "a1"},
                {"role": "user", "content": "q2"},
                {"role": "assistant", "content": "a2"},
                {"role": "user", "content": "q3"},
                {"role": "assistant", "content": "a3"}
            ],
            "generation_meta": {"simulator_model": "s", "detector_model": "d", "qa_model": "q", "seed": 0}
        }))
        .unwrap();
        let messages =
            render_dialogue_prompt(&TemplateSet::builtin(), &dialogue, &question()).unwrap();
        assert_eq!(messages.len(), 7);
        assert!(messages[6].content.contains("Assume you are me"));
    }

    #[test]
    fn extraction_reproduces_the_reference_distribution() {
        // exp(logprob) proportional to {0.1, 0.7, 0.05, -, 0.15} for ids 1,2,3,5
        let scale: f64 = 0.5;
        let resp = structured_response(vec![
            token(0, "{\"selected_option_id\": ", -0.1, vec![]),
            token(
                1,
                "2",
                (scale * 0.7).ln(),
                vec![
                    ("2", (scale * 0.7).ln()),
                    ("5", (scale * 0.15).ln()),
                    ("1", (scale * 0.1).ln()),
                    ("3", (scale * 0.05).ln()),
                    (" the", -9.0),
                ],
            ),
            token(2, ", \"justification\": \"fits\"}", -0.2, vec![]),
        ]);
        let (dist, raw) = extract_option_distribution(&resp, 2).unwrap();
        let expected = [0.1, 0.7, 0.05, 0.0, 0.15];
        for k in 0..5 {
            assert!(
                (dist.probs()[k] - expected[k]).abs() <= 1e-9,
                "bin {k}: {} vs {}",
                dist.probs()[k],
                expected[k]
            );
        }
        assert!(!dist.is_degenerate());
        assert_eq!(raw.source_position, 1);
        assert_eq!(dist.argmax_option(), 2);
    }

    #[test]
    fn extraction_single_support_normalizes_to_one_hot() {
        let resp = structured_response(vec![
            token(0, "{\"selected_option_id\": ", -0.1, vec![]),
            token(1, "3", -0.9, vec![("3", -0.9), ("no", -2.0)]),
            token(2, "}", -0.2, vec![]),
        ]);
        let (dist, _) = extract_option_distribution(&resp, 3).unwrap();
        assert_eq!(dist.probs(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(!dist.is_degenerate());
    }

    #[test]
    fn extraction_renormalizes_partial_masses() {
        let resp = structured_response(vec![
            token(0, "{\"selected_option_id\": ", -0.1, vec![]),
            token(
                1,
                "1",
                (0.2f64).ln(),
                vec![("1", (0.2f64).ln()), ("2", (0.2f64).ln())],
            ),
            token(2, "}", -0.2, vec![]),
        ]);
        let (dist, _) = extract_option_distribution(&resp, 1).unwrap();
        assert_eq!(dist.probs(), &[0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn extraction_falls_back_to_one_hot_when_no_option_survives() {
        let resp = structured_response(vec![
            token(0, "{\"selected_option_id\": ", -0.1, vec![]),
            token(1, "4", -0.5, vec![(" the", -1.0), ("and", -2.0)]),
        ]);
        // the digit token itself carries a usable logprob, so force absence
        let mut resp = resp;
        resp.token_logprobs[1].token = "four".into();
        let err = extract_option_distribution(&resp, 4);
        assert!(matches!(err, Err(ProbeError::OptionTokenNotLocated)));

        // no logprobs at all -> degenerate one-hot
        let bare = ChatResponse {
            text: "{\"selected_option_id\": 4, \"justification\": \"x\"}".into(),
            token_logprobs: vec![],
            finish_reason: "stop".into(),
        };
        let (dist, _) = extract_option_distribution(&bare, 4).unwrap();
        assert!(dist.is_degenerate());
        assert_eq!(dist.probs(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn extraction_skips_digits_before_the_field_name() {
        let resp = structured_response(vec![
            token(0, "option ", -0.1, vec![]),
            token(1, "3", -0.3, vec![("3", -0.3)]),
            token(2, " {\"selected_option_id\": ", -0.1, vec![]),
            token(3, "3", -0.7, vec![("3", -0.7), ("1", -1.2)]),
            token(4, "}", -0.1, vec![]),
        ]);
        let (_, raw) = extract_option_distribution(&resp, 3).unwrap();
        assert_eq!(raw.source_position, 3);
    }

    #[test]
    fn mean_confidence_forced_cases() {
        let mk = |probs: [f64; 5], scenario: Scenario| {
            let dist = OptionDistribution::from_masses(probs).unwrap();
            ProbeResponse {
                user_id: "u".into(),
                question_id: 1,
                scenario,
                selected_option_id: dist.argmax_option(),
                justification: "j".into(),
                distribution: dist,
                raw_logprobs: vec![],
                meta: ProbeMeta::default(),
            }
        };
        let single = vec![mk([0.1, 0.7, 0.05, 0.0, 0.15], Scenario::Profile)];
        assert!((mean_confidence(&single, Scenario::Profile).unwrap() - 0.7).abs() <= 1e-12);

        let hots = vec![
            mk([1.0, 0.0, 0.0, 0.0, 0.0], Scenario::Dialogue),
            mk([0.0, 0.0, 1.0, 0.0, 0.0], Scenario::Dialogue),
        ];
        assert!((mean_confidence(&hots, Scenario::Dialogue).unwrap() - 1.0).abs() <= 1e-12);
        assert!(mean_confidence(&hots, Scenario::Profile).is_err());
    }
}
