//! Three-agent dialogue generation: a user simulator proposes questions, an
//! out-of-context detector gates (or revises) them, and a QA endpoint
//! answers with the full history prepended.

use crate::data::{Dialogue, DialogueTurn, GenerationMeta, Role, UserProfile};
use crate::gateway::{
    ChatRequest, EndpointConfig, FieldKind, Gateway, GatewayError, Message, OutputSchema,
};
use crate::seed::derive_seed;
use crate::templates::TemplateSet;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("simulator output unparseable: {0}")]
    UnparseableSimulatorOutput(String),
    #[error("detector verdict unparseable: {0}")]
    UnparseableVerdict(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid factory config: {0}")]
    InvalidConfig(String),
}

/// What the detector does with an out-of-context question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OocMode {
    /// Use the detector's rewritten question and keep going.
    #[default]
    Revise,
    /// Drop the whole profile, reproducing the generation procedure
    /// literally.
    Discard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactoryConfig {
    pub simulator: EndpointConfig,
    pub detector: EndpointConfig,
    pub qa: EndpointConfig,
    /// Cap on messages already in the history when the loop checks whether
    /// to stop (so a finished dialogue holds at most `max_runs + 1`
    /// messages).
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default)]
    pub ooc_mode: OocMode,
    #[serde(default)]
    pub seed: u64,
    /// Recorded verbatim in each dialogue's generation metadata; omitted by
    /// default so reruns stay byte-identical.
    #[serde(default)]
    pub timestamp: Option<String>,
}

fn default_max_runs() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulatorOutput {
    pub question: String,
    pub end_conversation: bool,
}

#[derive(Debug, Clone)]
pub struct OocVerdict {
    pub in_context: bool,
    pub revised_question: Option<String>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    OocDiscard,
    UpstreamFailure(String),
    EndedImmediately,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub user_id: String,
    pub reason: SkipReason,
}

#[derive(Debug)]
pub enum DialogueOutcome {
    Generated(Dialogue),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnKind {
    Initial,
    Subsequent,
}

/// Result of one corpus run; dialogues and skips both preserve the input
/// profile order.
#[derive(Debug)]
pub struct CorpusResult {
    pub dialogues: Vec<Dialogue>,
    pub skips: Vec<SkipRecord>,
}

const DEFAULT_OBJECTIVES: &str = "Seek practical career advice that fits your age, education, \
occupation, and background. Over the conversation, cover more than one angle: growth, skills, \
trade-offs, or concrete next moves.";

const DEFAULT_TERMINATION: &str = "End the conversation once you have received useful advice on \
your main concerns and there is nothing natural left to ask.";

fn simulator_schema() -> OutputSchema {
    OutputSchema::new("simulator_turn")
        .field("question", FieldKind::Text { non_empty: false }, true)
        .field("end_conversation", FieldKind::Boolean, true)
}

fn verdict_schema() -> OutputSchema {
    OutputSchema::new("ooc_verdict")
        .field("in_context", FieldKind::Boolean, true)
        .field("revised_question", FieldKind::Text { non_empty: false }, false)
        .field("reasons", FieldKind::TextList, false)
}

pub struct DialogueFactory {
    simulator: Gateway,
    detector: Gateway,
    qa: Gateway,
    templates: TemplateSet,
    max_runs: usize,
    ooc_mode: OocMode,
    seed: u64,
    timestamp: Option<String>,
    meta_models: (String, String, String),
}

impl DialogueFactory {
    pub fn new(cfg: &FactoryConfig, templates: TemplateSet) -> Result<Self, FactoryError> {
        if cfg.max_runs < 2 {
            return Err(FactoryError::InvalidConfig(
                "max_runs must be >= 2".into(),
            ));
        }
        Ok(Self {
            simulator: Gateway::new(cfg.simulator.clone())?,
            detector: Gateway::new(cfg.detector.clone())?,
            qa: Gateway::new(cfg.qa.clone())?,
            templates,
            max_runs: cfg.max_runs,
            ooc_mode: cfg.ooc_mode,
            seed: cfg.seed,
            timestamp: cfg.timestamp.clone(),
            meta_models: (
                cfg.simulator.model_name.clone(),
                cfg.detector.model_name.clone(),
                cfg.qa.model_name.clone(),
            ),
        })
    }

    fn history_block(history: &[DialogueTurn]) -> String {
        history
            .iter()
            .map(|t| match t.role {
                Role::User => format!("User: {}", t.content),
                Role::Assistant => format!("Assistant: {}", t.content),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Ask the simulator for the next user question (or an end signal).
    ///
    /// The history is embedded in a single message block so the simulator
    /// cannot confuse its own role with the assistant's.
    pub async fn simulate_user_turn(
        &self,
        profile: &UserProfile,
        history: &[DialogueTurn],
        kind: TurnKind,
        seed: u64,
    ) -> Result<SimulatorOutput, FactoryError> {
        debug_assert_eq!(kind == TurnKind::Initial, history.is_empty());
        let user_text = match kind {
            TurnKind::Initial => self.templates.render(
                "simulator_initial.txt",
                &[
                    ("PROFILE", &profile.prompt_block()),
                    ("OBJECTIVES", DEFAULT_OBJECTIVES),
                    ("TERMINATION", DEFAULT_TERMINATION),
                ],
            ),
            TurnKind::Subsequent => self.templates.render(
                "simulator_followup.txt",
                &[
                    ("PROFILE", &profile.prompt_block()),
                    ("HISTORY_BLOCK", &Self::history_block(history)),
                    ("OBJECTIVES", DEFAULT_OBJECTIVES),
                    ("TERMINATION", DEFAULT_TERMINATION),
                ],
            ),
        };
        let request = ChatRequest::new(vec![
            Message::system(self.templates.get("simulator_system.txt")),
            Message::user(user_text),
        ])
        .with_schema(simulator_schema())
        .with_seed(seed);
        let outcome = self.simulator.complete_structured(&request).await?;
        let output: SimulatorOutput = serde_json::from_value(outcome.value)
            .map_err(|e| FactoryError::UnparseableSimulatorOutput(e.to_string()))?;
        if !output.end_conversation && output.question.trim().is_empty() {
            return Err(FactoryError::UnparseableSimulatorOutput(
                "question empty without end flag".into(),
            ));
        }
        Ok(output)
    }

    /// Check profile consistency and first-person framing; in revise mode a
    /// failing question comes back rewritten.
    pub async fn check_out_of_context(
        &self,
        profile: &UserProfile,
        question: &str,
        seed: u64,
    ) -> Result<OocVerdict, FactoryError> {
        if question.trim().is_empty() {
            return Err(FactoryError::EmptyQuestion);
        }
        let request = ChatRequest::new(vec![
            Message::system(self.templates.get("ooc_system.txt")),
            Message::user(self.templates.render(
                "ooc_user.txt",
                &[("PROFILE", &profile.prompt_block()), ("QUESTION", question)],
            )),
        ])
        .with_schema(verdict_schema())
        .with_seed(seed);
        let outcome = self.detector.complete_structured(&request).await?;
        let value = outcome.value;
        let in_context = value["in_context"]
            .as_bool()
            .ok_or_else(|| FactoryError::UnparseableVerdict("in_context missing".into()))?;
        let revised = value["revised_question"]
            .as_str()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from);
        let reasons = value["reasons"]
            .as_array()
            .map(|arr| {
                arr.iter()
                    .filter_map(Value::as_str)
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        let revised_question = match (in_context, self.ooc_mode) {
            (false, OocMode::Revise) => Some(revised.ok_or_else(|| {
                FactoryError::UnparseableVerdict(
                    "revise mode requires a revised_question on failure".into(),
                )
            })?),
            _ => None,
        };
        Ok(OocVerdict {
            in_context,
            revised_question,
            reasons,
        })
    }

    /// Answer a user question with every prior turn prepended verbatim.
    pub async fn answer_question(
        &self,
        history: &[DialogueTurn],
        question: &str,
    ) -> Result<String, FactoryError> {
        if question.trim().is_empty() {
            return Err(FactoryError::EmptyQuestion);
        }
        let mut messages: Vec<Message> = history
            .iter()
            .map(|t| match t.role {
                Role::User => Message::user(&t.content),
                Role::Assistant => Message::assistant(&t.content),
            })
            .collect();
        messages.push(Message::user(question));
        let response = self.qa.chat_complete(&ChatRequest::new(messages)).await?;
        Ok(response.text)
    }

    /// Run the full generation loop for one profile.
    ///
    /// Control flow: initial question, OOC gate, answer; then repeat
    /// {subsequent question; stop when the end flag is set or the history
    /// already holds `max_runs` messages; OOC gate; answer}. In discard
    /// mode any OOC hit skips the profile; in revise mode the rewritten
    /// question is used and generation continues.
    pub async fn generate_dialogue(&self, profile: &UserProfile, index: u64) -> DialogueOutcome {
        match self.try_generate(profile, index).await {
            Ok(outcome) => outcome,
            Err(err) => DialogueOutcome::Skipped(SkipReason::UpstreamFailure(err.to_string())),
        }
    }

    async fn try_generate(
        &self,
        profile: &UserProfile,
        index: u64,
    ) -> Result<DialogueOutcome, FactoryError> {
        let dialogue_seed = derive_seed(self.seed, "dialogue", index);
        let mut call = 0u64;
        let mut next_seed = || {
            call += 1;
            derive_seed(dialogue_seed, "call", call)
        };

        let mut history: Vec<DialogueTurn> = Vec::new();
        let first = self
            .simulate_user_turn(profile, &history, TurnKind::Initial, next_seed())
            .await?;
        if first.end_conversation {
            return Ok(DialogueOutcome::Skipped(SkipReason::EndedImmediately));
        }
        let mut question = first.question;
        let verdict = self
            .check_out_of_context(profile, &question, next_seed())
            .await?;
        if !verdict.in_context {
            match self.ooc_mode {
                OocMode::Discard => {
                    return Ok(DialogueOutcome::Skipped(SkipReason::OocDiscard))
                }
                OocMode::Revise => {
                    question = verdict
                        .revised_question
                        .expect("revise-mode verdict carries a rewrite");
                }
            }
        }
        let answer = self.answer_question(&history, &question).await?;
        history.push(DialogueTurn {
            role: Role::User,
            content: question,
        });
        history.push(DialogueTurn {
            role: Role::Assistant,
            content: answer,
        });

        loop {
            let turn = self
                .simulate_user_turn(profile, &history, TurnKind::Subsequent, next_seed())
                .await?;
            if turn.end_conversation || history.len() >= self.max_runs {
                break;
            }
            let mut question = turn.question;
            let verdict = self
                .check_out_of_context(profile, &question, next_seed())
                .await?;
            if !verdict.in_context {
                match self.ooc_mode {
                    OocMode::Discard => {
                        return Ok(DialogueOutcome::Skipped(SkipReason::OocDiscard))
                    }
                    OocMode::Revise => {
                        question = verdict
                            .revised_question
                            .expect("revise-mode verdict carries a rewrite");
                    }
                }
            }
            let answer = self.answer_question(&history, &question).await?;
            history.push(DialogueTurn {
                role: Role::User,
                content: question,
            });
            history.push(DialogueTurn {
                role: Role::Assistant,
                content: answer,
            });
        }

        let meta = GenerationMeta {
            simulator_model: self.meta_models.0.clone(),
            detector_model: self.meta_models.1.clone(),
            qa_model: self.meta_models.2.clone(),
            seed: dialogue_seed,
            timestamp: self.timestamp.clone(),
        };
        let dialogue = Dialogue::new(profile.user_id.clone(), history, meta)
            .map_err(|e| FactoryError::InvalidConfig(e.to_string()))?;
        Ok(DialogueOutcome::Generated(dialogue))
    }

    /// One dialogue attempt per profile, run concurrently under the gateway
    /// limits; output preserves the input profile order.
    pub async fn generate_corpus(&self, profiles: &[UserProfile]) -> CorpusResult {
        let attempts = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| self.generate_dialogue(p, i as u64));
        let outcomes = futures::future::join_all(attempts).await;
        let mut dialogues = Vec::new();
        let mut skips = Vec::new();
        for (profile, outcome) in profiles.iter().zip(outcomes) {
            match outcome {
                DialogueOutcome::Generated(d) => dialogues.push(d),
                DialogueOutcome::Skipped(reason) => skips.push(SkipRecord {
                    user_id: profile.user_id.clone(),
                    reason,
                }),
            }
        }
        CorpusResult { dialogues, skips }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_two_runs() {
        let endpoint = EndpointConfig::new("http://127.0.0.1:1", "m");
        let cfg = FactoryConfig {
            simulator: endpoint.clone(),
            detector: endpoint.clone(),
            qa: endpoint,
            max_runs: 1,
            ooc_mode: OocMode::Revise,
            seed: 0,
            timestamp: None,
        };
        assert!(DialogueFactory::new(&cfg, TemplateSet::builtin()).is_err());
    }

    #[test]
    fn skip_reason_serializes_compactly() {
        let record = SkipRecord {
            user_id: "u1".into(),
            reason: SkipReason::OocDiscard,
        };
        let line = serde_json::to_string(&record).unwrap();
        assert_eq!(line, r#"{"user_id":"u1","reason":{"kind":"ooc_discard"}}"#);
    }
}
