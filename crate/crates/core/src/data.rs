//! Domain types and file IO: surveys, user profiles, dialogues, probe
//! responses, and selection sequences.
//!
//! Everything here is immutable after construction and safe to share across
//! tasks. Artifact files are line-delimited JSON with an optional leading
//! `{"_meta": ...}` line; the survey file is a single JSON document.

use crate::metrics::{Distribution5, MetricsError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("schema violation{}: {reason}", question_suffix(*question_id))]
    SchemaViolation {
        question_id: Option<u16>,
        reason: String,
    },
    #[error("duplicate user_id '{0}'")]
    DuplicateUserId(String),
    #[error("field '{field}' out of range for user '{user_id}': {value}")]
    FieldOutOfRange {
        user_id: String,
        field: &'static str,
        value: i64,
    },
    #[error("unknown education level '{value}' for user '{user_id}'")]
    UnknownEducationLevel { user_id: String, value: String },
    #[error("invalid dialogue for user '{user_id}': {reason}")]
    InvalidDialogue { user_id: String, reason: String },
    #[error("missing question {0}")]
    MissingQuestion(u16),
    #[error("duplicate question {0}")]
    DuplicateQuestion(u16),
    #[error("unknown question {0}")]
    UnknownQuestion(u16),
    #[error("responses mix users or scenarios")]
    MixedUsersOrScenarios,
    #[error("invalid response for user '{user_id}' question {question_id}: {reason}")]
    InvalidResponse {
        user_id: String,
        question_id: u16,
        reason: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn question_suffix(id: Option<u16>) -> String {
    match id {
        Some(q) => format!(" at question {q}"),
        None => String::new(),
    }
}

// ---------------------------------------------------------------------------
// Survey
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyOption {
    #[serde(rename = "id")]
    pub option_id: u8,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    #[serde(rename = "id")]
    pub question_id: u16,
    pub text: String,
    pub options: Vec<SurveyOption>,
}

impl SurveyQuestion {
    /// Option labels in option_id order, regardless of file order.
    pub fn ordered_options(&self) -> Vec<&SurveyOption> {
        let mut opts: Vec<&SurveyOption> = self.options.iter().collect();
        opts.sort_by_key(|o| o.option_id);
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Survey {
    questions: Vec<SurveyQuestion>,
}

impl Survey {
    pub fn new(questions: Vec<SurveyQuestion>) -> Result<Self, DataError> {
        let survey = Self { questions };
        survey.validate()?;
        Ok(survey)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.questions.is_empty() {
            return Err(DataError::SchemaViolation {
                question_id: None,
                reason: "survey has no questions".into(),
            });
        }
        for (idx, q) in self.questions.iter().enumerate() {
            if q.question_id != (idx + 1) as u16 {
                return Err(DataError::SchemaViolation {
                    question_id: Some(q.question_id),
                    reason: format!(
                        "question ids must be contiguous from 1; position {} holds id {}",
                        idx + 1,
                        q.question_id
                    ),
                });
            }
            if q.text.trim().is_empty() {
                return Err(DataError::SchemaViolation {
                    question_id: Some(q.question_id),
                    reason: "question text is empty".into(),
                });
            }
            if q.options.len() != 5 {
                return Err(DataError::SchemaViolation {
                    question_id: Some(q.question_id),
                    reason: format!("expected exactly 5 options, found {}", q.options.len()),
                });
            }
            let ids: BTreeSet<u8> = q.options.iter().map(|o| o.option_id).collect();
            if ids != BTreeSet::from([1, 2, 3, 4, 5]) {
                return Err(DataError::SchemaViolation {
                    question_id: Some(q.question_id),
                    reason: "option ids must be exactly {1,2,3,4,5}".into(),
                });
            }
        }
        Ok(())
    }

    pub fn questions(&self) -> &[SurveyQuestion] {
        &self.questions
    }

    pub fn question(&self, question_id: u16) -> Option<&SurveyQuestion> {
        self.questions.get(question_id.checked_sub(1)? as usize)
    }

    /// Number of questions (the `m` used throughout the measurements).
    pub fn m(&self) -> usize {
        self.questions.len()
    }
}

#[derive(Serialize, Deserialize)]
struct SurveyFile {
    questions: Vec<SurveyQuestion>,
}

pub fn load_survey(path: &Path) -> Result<Survey, DataError> {
    let text = read_file(path)?;
    let file: SurveyFile = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Survey::new(file.questions)
}

pub fn save_survey(path: &Path, survey: &Survey) -> Result<(), DataError> {
    let file = SurveyFile {
        questions: survey.questions.clone(),
    };
    let body = serde_json::to_string_pretty(&file).expect("survey serializes");
    std::fs::write(path, body + "\n").map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// Ordered education attainment; unseen strings are rejected, not coerced.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum EducationLevel {
    HighSchool,
    Bachelor,
    Master,
    PhD,
}

impl EducationLevel {
    pub const ALL: [EducationLevel; 4] = [
        EducationLevel::HighSchool,
        EducationLevel::Bachelor,
        EducationLevel::Master,
        EducationLevel::PhD,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            EducationLevel::HighSchool => "HighSchool",
            EducationLevel::Bachelor => "Bachelor",
            EducationLevel::Master => "Master",
            EducationLevel::PhD => "PhD",
        }
    }
}

impl fmt::Display for EducationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRecord", into = "ProfileRecord")]
pub struct UserProfile {
    pub user_id: String,
    pub age: u16,
    pub gender: String,
    pub job_title: String,
    pub education_level: EducationLevel,
    pub nationality: String,
}

impl UserProfile {
    /// Multi-line `field: value` block used by prompt templates.
    pub fn prompt_block(&self) -> String {
        format!(
            "age: {}\ngender: {}\njob title: {}\neducation: {}\nnationality: {}",
            self.age, self.gender, self.job_title, self.education_level, self.nationality
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    user_id: String,
    age: i64,
    gender: String,
    job_title: String,
    education_level: String,
    nationality: String,
}

impl TryFrom<ProfileRecord> for UserProfile {
    type Error = DataError;

    fn try_from(r: ProfileRecord) -> Result<Self, Self::Error> {
        if !(14..=100).contains(&r.age) {
            return Err(DataError::FieldOutOfRange {
                user_id: r.user_id,
                field: "age",
                value: r.age,
            });
        }
        let education_level = EducationLevel::ALL
            .iter()
            .find(|level| level.label() == r.education_level)
            .copied()
            .ok_or_else(|| DataError::UnknownEducationLevel {
                user_id: r.user_id.clone(),
                value: r.education_level.clone(),
            })?;
        Ok(UserProfile {
            user_id: r.user_id,
            age: r.age as u16,
            gender: r.gender,
            job_title: r.job_title,
            education_level,
            nationality: r.nationality,
        })
    }
}

impl From<UserProfile> for ProfileRecord {
    fn from(p: UserProfile) -> Self {
        ProfileRecord {
            user_id: p.user_id,
            age: p.age as i64,
            gender: p.gender,
            job_title: p.job_title,
            education_level: p.education_level.label().to_string(),
            nationality: p.nationality,
        }
    }
}

pub fn load_profiles(path: &Path) -> Result<Vec<UserProfile>, DataError> {
    let (_, profiles): (_, Vec<UserProfile>) = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for p in &profiles {
        if !seen.insert(p.user_id.clone()) {
            return Err(DataError::DuplicateUserId(p.user_id.clone()));
        }
    }
    Ok(profiles)
}

// ---------------------------------------------------------------------------
// Dialogues
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub simulator_model: String,
    pub detector_model: String,
    pub qa_model: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DialogueRecord", into = "DialogueRecord")]
pub struct Dialogue {
    pub user_id: String,
    pub turns: Vec<DialogueTurn>,
    pub generation_meta: GenerationMeta,
}

impl Dialogue {
    pub fn new(
        user_id: String,
        turns: Vec<DialogueTurn>,
        generation_meta: GenerationMeta,
    ) -> Result<Self, DataError> {
        let d = Self {
            user_id,
            turns,
            generation_meta,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| DataError::InvalidDialogue {
            user_id: self.user_id.clone(),
            reason,
        };
        if self.turns.len() < 2 || self.turns.len() % 2 != 0 {
            return Err(fail(format!(
                "turn count must be even and >= 2, got {}",
                self.turns.len()
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(fail(format!("turn {i} breaks user/assistant alternation")));
            }
            if turn.content.trim().is_empty() {
                return Err(fail(format!("turn {i} is empty")));
            }
        }
        Ok(())
    }

    /// Plain-text transcript, one `User:`/`Assistant:` line per turn.
    pub fn transcript(&self) -> String {
        self.turns
            .iter()
            .map(|t| match t.role {
                Role::User => format!("User: {}", t.content),
                Role::Assistant => format!("Assistant: {}", t.content),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    user_id: String,
    turns: Vec<DialogueTurn>,
    generation_meta: GenerationMeta,
}

impl TryFrom<DialogueRecord> for Dialogue {
    type Error = DataError;
    fn try_from(r: DialogueRecord) -> Result<Self, Self::Error> {
        Dialogue::new(r.user_id, r.turns, r.generation_meta)
    }
}

impl From<Dialogue> for DialogueRecord {
    fn from(d: Dialogue) -> Self {
        DialogueRecord {
            user_id: d.user_id,
            turns: d.turns,
            generation_meta: d.generation_meta,
        }
    }
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>, DataError> {
    let (_, dialogues): (_, Vec<Dialogue>) = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for d in &dialogues {
        if !seen.insert(d.user_id.clone()) {
            return Err(DataError::DuplicateUserId(d.user_id.clone()));
        }
    }
    Ok(dialogues)
}

// ---------------------------------------------------------------------------
// Probe responses
// ---------------------------------------------------------------------------

/// How the user's attributes reached the probed model.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Profile,
    Dialogue,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Profile => f.write_str("profile"),
            Scenario::Dialogue => f.write_str("dialogue"),
        }
    }
}

/// Normalized probability over the five option ids, with a flag marking
/// one-hot fallbacks built when no option token survived extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionDistribution {
    dist: Distribution5,
    degenerate: bool,
}

impl OptionDistribution {
    pub fn new(probs: [f64; 5]) -> Result<Self, DataError> {
        Ok(Self {
            dist: Distribution5::new(probs)?,
            degenerate: false,
        })
    }

    pub fn from_masses(masses: [f64; 5]) -> Result<Self, DataError> {
        Ok(Self {
            dist: Distribution5::from_masses(masses)?,
            degenerate: false,
        })
    }

    /// Fallback distribution: all mass on `option_id`, flagged degenerate.
    pub fn one_hot_fallback(option_id: u8) -> Result<Self, DataError> {
        Ok(Self {
            dist: Distribution5::one_hot(option_id)?,
            degenerate: true,
        })
    }

    pub fn probs(&self) -> &[f64; 5] {
        self.dist.probs()
    }

    pub fn distribution(&self) -> &Distribution5 {
        &self.dist
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Highest-probability option id, lowest id on ties.
    pub fn argmax_option(&self) -> u8 {
        self.dist.argmax_option()
    }

    /// Probability of the most likely option.
    pub fn max_prob(&self) -> f64 {
        self.probs().iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeMeta {
    /// Option id the model reported when it disagreed with the extracted
    /// distribution's argmax.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_option_id: Option<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_reasoning: bool,
    /// Upstream calls made for this response (2 under the two-pass protocol).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passes: Option<u8>,
}

impl ProbeMeta {
    pub fn is_empty(&self) -> bool {
        *self == ProbeMeta::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeResponseRecord", into = "ProbeResponseRecord")]
pub struct ProbeResponse {
    pub user_id: String,
    pub question_id: u16,
    pub scenario: Scenario,
    pub selected_option_id: u8,
    pub justification: String,
    pub distribution: OptionDistribution,
    pub raw_logprobs: Vec<(String, f64)>,
    pub meta: ProbeMeta,
}

impl ProbeResponse {
    fn validate(&self) -> Result<(), DataError> {
        let argmax = self.distribution.argmax_option();
        if self.selected_option_id != argmax {
            return Err(DataError::InvalidResponse {
                user_id: self.user_id.clone(),
                question_id: self.question_id,
                reason: format!(
                    "selected_option_id {} is not the distribution argmax {argmax}",
                    self.selected_option_id
                ),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeResponseRecord {
    user_id: String,
    question_id: u16,
    scenario: Scenario,
    selected_option_id: u8,
    justification: String,
    distribution: [f64; 5],
    #[serde(default)]
    degenerate: bool,
    raw_logprobs: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "ProbeMeta::is_empty")]
    meta: ProbeMeta,
}

impl TryFrom<ProbeResponseRecord> for ProbeResponse {
    type Error = DataError;

    fn try_from(r: ProbeResponseRecord) -> Result<Self, Self::Error> {
        let distribution = OptionDistribution {
            dist: Distribution5::new(r.distribution)?,
            degenerate: r.degenerate,
        };
        let response = ProbeResponse {
            user_id: r.user_id,
            question_id: r.question_id,
            scenario: r.scenario,
            selected_option_id: r.selected_option_id,
            justification: r.justification,
            distribution,
            raw_logprobs: r.raw_logprobs,
            meta: r.meta,
        };
        response.validate()?;
        Ok(response)
    }
}

impl From<ProbeResponse> for ProbeResponseRecord {
    fn from(r: ProbeResponse) -> Self {
        ProbeResponseRecord {
            user_id: r.user_id,
            question_id: r.question_id,
            scenario: r.scenario,
            selected_option_id: r.selected_option_id,
            justification: r.justification,
            distribution: *r.distribution.probs(),
            degenerate: r.distribution.is_degenerate(),
            raw_logprobs: r.raw_logprobs,
            meta: r.meta,
        }
    }
}

pub fn load_responses(path: &Path) -> Result<(Option<FileMeta>, Vec<ProbeResponse>), DataError> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// Selection sequences
// ---------------------------------------------------------------------------

/// One user's selected option ids across the whole survey, in question order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSequence {
    pub user_id: String,
    pub scenario: Scenario,
    pub values: Vec<u8>,
}

/// Build the selection sequence for one (user, scenario) from its responses.
///
/// Input order does not matter; every question id 1..=m must appear exactly
/// once.
pub fn assemble_sequence(
    responses: &[&ProbeResponse],
    survey: &Survey,
) -> Result<SelectionSequence, DataError> {
    let m = survey.m();
    let first = responses.first().ok_or(DataError::MissingQuestion(1))?;
    let mut values: Vec<Option<u8>> = vec![None; m];
    for r in responses {
        if r.user_id != first.user_id || r.scenario != first.scenario {
            return Err(DataError::MixedUsersOrScenarios);
        }
        if r.question_id == 0 || r.question_id as usize > m {
            return Err(DataError::UnknownQuestion(r.question_id));
        }
        let slot = &mut values[(r.question_id - 1) as usize];
        if slot.is_some() {
            return Err(DataError::DuplicateQuestion(r.question_id));
        }
        *slot = Some(r.selected_option_id);
    }
    let mut out = Vec::with_capacity(m);
    for (idx, v) in values.into_iter().enumerate() {
        out.push(v.ok_or(DataError::MissingQuestion((idx + 1) as u16))?);
    }
    Ok(SelectionSequence {
        user_id: first.user_id.clone(),
        scenario: first.scenario,
        values: out,
    })
}

// ---------------------------------------------------------------------------
// Line-delimited file plumbing
// ---------------------------------------------------------------------------

/// Replay metadata carried on the first line of every artifact file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
}

impl FileMeta {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: String::new(),
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: FileMeta,
}

fn read_file(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a line-delimited file of `T` records, honoring an optional leading
/// meta line.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Option<FileMeta>, Vec<T>), DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut meta = None;
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(m) = serde_json::from_str::<MetaLine>(trimmed) {
                meta = Some(m.meta);
                continue;
            }
        }
        let item: T = serde_json::from_str(trimmed).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok((meta, items))
}

/// Serialize records (with an optional leading meta line) to bytes.
pub fn jsonl_bytes<T: Serialize>(meta: Option<&FileMeta>, items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(meta) = meta {
        let line = serde_json::to_string(&MetaLine { meta: meta.clone() })
            .expect("meta serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    meta: Option<&FileMeta>,
    items: &[T],
) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| DataError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&jsonl_bytes(meta, items))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_survey(m: u16) -> Survey {
        let questions = (1..=m)
            .map(|id| SurveyQuestion {
                question_id: id,
                text: format!("How important is workplace factor {id} to you?"),
                options: (1..=5)
                    .map(|oid| SurveyOption {
                        option_id: oid,
                        label: format!("choice {oid}"),
                    })
                    .collect(),
            })
            .collect();
        Survey::new(questions).unwrap()
    }

    fn response(user: &str, scenario: Scenario, question: u16, selected: u8) -> ProbeResponse {
        let mut masses = [0.05; 5];
        masses[(selected - 1) as usize] = 0.8;
        ProbeResponse {
            user_id: user.into(),
            question_id: question,
            scenario,
            selected_option_id: selected,
            justification: "fits".into(),
            distribution: OptionDistribution::from_masses(masses).unwrap(),
            raw_logprobs: vec![],
            meta: ProbeMeta::default(),
        }
    }

    #[test]
    fn survey_validation_catches_bad_shapes() {
        assert!(Survey::new(vec![]).is_err());

        let mut q = small_survey(1).questions()[0].clone();
        q.options.pop();
        let err = Survey::new(vec![q]).unwrap_err();
        assert!(matches!(
            err,
            DataError::SchemaViolation {
                question_id: Some(1),
                ..
            }
        ));

        let mut q = small_survey(1).questions()[0].clone();
        q.options[4].option_id = 4; // duplicate id
        assert!(Survey::new(vec![q]).is_err());
    }

    #[test]
    fn survey_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("survey.json");
        let survey = small_survey(18);
        save_survey(&path, &survey).unwrap();
        let loaded = load_survey(&path).unwrap();
        assert_eq!(survey, loaded);
        assert_eq!(loaded.m(), 18);
    }

    #[test]
    fn missing_survey_file_is_reported() {
        let err = load_survey(Path::new("/nonexistent/survey.json")).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    #[test]
    fn profile_validation() {
        let line = |age: i64, edu: &str| {
            format!(
                r#"{{"user_id":"u1","age":{age},"gender":"female","job_title":"Nurse","education_level":"{edu}","nationality":"Japan"}}"#
            )
        };
        let ok: UserProfile = serde_json::from_str(&line(23, "Bachelor")).unwrap();
        assert_eq!(ok.age, 23);

        let err = serde_json::from_str::<UserProfile>(&line(-5, "Bachelor")).unwrap_err();
        assert!(err.to_string().contains("out of range"));

        let err = serde_json::from_str::<UserProfile>(&line(30, "Diploma")).unwrap_err();
        assert!(err.to_string().contains("education"));
    }

    #[test]
    fn duplicate_profiles_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.jsonl");
        let record = r#"{"user_id":"u1","age":23,"gender":"male","job_title":"Data Scientist","education_level":"Bachelor","nationality":"Japan"}"#;
        std::fs::write(&path, format!("{record}\n{record}\n")).unwrap();
        assert!(matches!(
            load_profiles(&path),
            Err(DataError::DuplicateUserId(_))
        ));
    }

    #[test]
    fn dialogue_must_alternate_and_start_with_user() {
        let meta = GenerationMeta::default();
        let user = |c: &str| DialogueTurn {
            role: Role::User,
            content: c.into(),
        };
        let asst = |c: &str| DialogueTurn {
            role: Role::Assistant,
            content: c.into(),
        };
        assert!(Dialogue::new("u".into(), vec![user("q"), asst("a")], meta.clone()).is_ok());
        assert!(Dialogue::new("u".into(), vec![asst("a"), user("q")], meta.clone()).is_err());
        assert!(Dialogue::new("u".into(), vec![user("q")], meta.clone()).is_err());
        assert!(Dialogue::new(
            "u".into(),
            vec![user("q"), asst("a"), user("q2")],
            meta
        )
        .is_err());
    }

    #[test]
    fn assemble_sequence_happy_path_and_errors() {
        let survey = small_survey(18);
        let responses: Vec<ProbeResponse> = (1..=18)
            .map(|q| response("u1", Scenario::Profile, q, (q % 5 + 1) as u8))
            .collect();
        let refs: Vec<&ProbeResponse> = responses.iter().collect();
        let seq = assemble_sequence(&refs, &survey).unwrap();
        assert_eq!(seq.values.len(), 18);
        assert_eq!(seq.values[0], 2);

        // permutation invariance
        let mut shuffled: Vec<&ProbeResponse> = refs.clone();
        shuffled.reverse();
        assert_eq!(assemble_sequence(&shuffled, &survey).unwrap(), seq);

        let short: Vec<&ProbeResponse> = refs[..17].to_vec();
        assert!(matches!(
            assemble_sequence(&short, &survey),
            Err(DataError::MissingQuestion(18))
        ));

        let mut doubled = refs.clone();
        doubled.push(refs[0]);
        assert!(matches!(
            assemble_sequence(&doubled, &survey),
            Err(DataError::DuplicateQuestion(1))
        ));

        let other = response("u1", Scenario::Dialogue, 1, 2);
        let mixed: Vec<&ProbeResponse> = vec![refs[0], &other];
        assert!(matches!(
            assemble_sequence(&mixed, &survey),
            Err(DataError::MixedUsersOrScenarios)
        ));
    }

    #[test]
    fn response_record_rejects_argmax_mismatch() {
        let json = r#"{"user_id":"u","question_id":1,"scenario":"profile","selected_option_id":1,"justification":"x","distribution":[0.1,0.7,0.05,0.0,0.15],"raw_logprobs":[]}"#;
        let err = serde_json::from_str::<ProbeResponse>(json).unwrap_err();
        assert!(err.to_string().contains("argmax"));
    }

    #[test]
    fn jsonl_meta_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        let items = vec![response("u1", Scenario::Profile, 1, 2)];
        let meta = FileMeta::new(7);
        write_jsonl(&path, Some(&meta), &items).unwrap();
        let (read_meta, read_items): (Option<FileMeta>, Vec<ProbeResponse>) =
            read_jsonl(&path).unwrap();
        assert_eq!(read_meta.unwrap().seed, 7);
        assert_eq!(read_items, items);
    }
}
