//! Attribute-based grouping of profiles: age brackets, education levels,
//! nationality development levels, and rule- or endpoint-classified job
//! categories and position levels.

use crate::data::UserProfile;
use crate::gateway::{ChatRequest, FieldKind, Gateway, GatewayError, Message, OutputSchema};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("age {0} below the supported range")]
    FieldOutOfRange(i64),
    #[error("country '{0}' is not in the development map")]
    UnmappedCountry(String),
    #[error("no classification rule matched '{0}'")]
    NoRuleMatched(String),
    #[error("attribute '{attribute}' needs {what}")]
    MissingAux {
        attribute: &'static str,
        what: &'static str,
    },
    #[error("cannot assign user '{user_id}': {source}")]
    UnmappedValue {
        user_id: String,
        #[source]
        source: Box<CohortError>,
    },
    #[error("rule label '{label}' is not in the label set")]
    UnknownRuleLabel { label: String },
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How group membership was derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Direct,
    Mapped,
    Classified,
}

/// One attribute's grouping of users; groups are disjoint and non-empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortPartition {
    pub attribute: String,
    pub groups: BTreeMap<String, BTreeSet<String>>,
    pub provenance: Provenance,
}

/// The grouping attributes the measurements support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Age,
    Education,
    DevelopmentLevel,
    JobCategory,
    PositionLevel,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Age,
        Attribute::Education,
        Attribute::DevelopmentLevel,
        Attribute::JobCategory,
        Attribute::PositionLevel,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Education => "education",
            Attribute::DevelopmentLevel => "development_level",
            Attribute::JobCategory => "job_category",
            Attribute::PositionLevel => "position_level",
        }
    }

    pub fn parse(label: &str) -> Option<Attribute> {
        Attribute::ALL.iter().find(|a| a.label() == label).copied()
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Age bracket labels in ascending order; boundaries are lower-inclusive
/// ("30" falls in "30-40", 60 and up in ">60").
pub const AGE_BRACKETS: [&str; 5] = ["<30", "30-40", "40-50", "50-60", ">60"];

pub fn age_bracket(age: u16) -> Result<&'static str, CohortError> {
    if age < 14 {
        return Err(CohortError::FieldOutOfRange(age as i64));
    }
    Ok(match age {
        a if a < 30 => AGE_BRACKETS[0],
        a if a < 40 => AGE_BRACKETS[1],
        a if a < 50 => AGE_BRACKETS[2],
        a if a < 60 => AGE_BRACKETS[3],
        _ => AGE_BRACKETS[4],
    })
}

/// Development taxonomy used by the nationality grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DevLevel {
    Developed,
    Developing,
    ThirdWorld,
}

impl DevLevel {
    pub fn label(&self) -> &'static str {
        match self {
            DevLevel::Developed => "Developed",
            DevLevel::Developing => "Developing",
            DevLevel::ThirdWorld => "Third World",
        }
    }

    fn parse(label: &str) -> Option<DevLevel> {
        match label.trim() {
            "Developed" => Some(DevLevel::Developed),
            "Developing" => Some(DevLevel::Developing),
            "Third World" => Some(DevLevel::ThirdWorld),
            _ => None,
        }
    }
}

/// Country name (case/whitespace-normalized) to development level.
#[derive(Debug, Clone, Default)]
pub struct CountryMap {
    entries: BTreeMap<String, DevLevel>,
}

fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

impl CountryMap {
    /// Load a `country<TAB>label` file.
    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path).map_err(|e| CohortError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((country, label)) = line.split_once('\t') else {
                return Err(CohortError::Io {
                    path: path.display().to_string(),
                    message: format!("line {}: expected country<TAB>label", idx + 1),
                });
            };
            let level = DevLevel::parse(label).ok_or_else(|| CohortError::Io {
                path: path.display().to_string(),
                message: format!("line {}: unknown development label '{label}'", idx + 1),
            })?;
            entries.insert(normalize(country), level);
        }
        Ok(Self { entries })
    }

    pub fn from_entries(entries: &[(&str, DevLevel)]) -> Self {
        Self {
            entries: entries
                .iter()
                .map(|(c, l)| (normalize(c), *l))
                .collect(),
        }
    }
}

pub fn development_level(country: &str, map: &CountryMap) -> Result<DevLevel, CohortError> {
    map.entries
        .get(&normalize(country))
        .copied()
        .ok_or_else(|| CohortError::UnmappedCountry(country.trim().to_string()))
}

/// Candidate labels for a classification attribute.
#[derive(Debug, Clone)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, CohortError> {
        if labels.is_empty() {
            return Err(CohortError::EmptyLabelSet);
        }
        Ok(Self { labels })
    }

    /// Load a one-label-per-line file.
    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path).map_err(|e| CohortError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Keyword rules for the deterministic mapping backend. Matching is
/// case-insensitive substring; the longest matching keyword wins, file
/// order breaks ties.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<(String, String)>,
}

impl RuleSet {
    /// Load a `keyword<TAB>label` file.
    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path).map_err(|e| CohortError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut rules = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((keyword, label)) = line.split_once('\t') else {
                return Err(CohortError::Io {
                    path: path.display().to_string(),
                    message: format!("line {}: expected keyword<TAB>label", idx + 1),
                });
            };
            rules.push((normalize(keyword), label.trim().to_string()));
        }
        Ok(Self { rules })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self {
            rules: pairs
                .iter()
                .map(|(k, l)| (normalize(k), l.to_string()))
                .collect(),
        }
    }

    /// Every label appearing in the rules.
    pub fn label_set(&self) -> Result<LabelSet, CohortError> {
        let mut seen = BTreeSet::new();
        let labels: Vec<String> = self
            .rules
            .iter()
            .filter(|(_, l)| seen.insert(l.clone()))
            .map(|(_, l)| l.clone())
            .collect();
        LabelSet::new(labels)
    }
}

/// Pure rule-based classification.
pub fn classify_with_rules(text: &str, rules: &RuleSet) -> Result<String, CohortError> {
    let haystack = normalize(text);
    let mut best: Option<(usize, &str)> = None;
    for (keyword, label) in &rules.rules {
        if haystack.contains(keyword.as_str()) {
            let better = match best {
                None => true,
                Some((len, _)) => keyword.len() > len,
            };
            if better {
                best = Some((keyword.len(), label));
            }
        }
    }
    best.map(|(_, label)| label.to_string())
        .ok_or_else(|| CohortError::NoRuleMatched(text.to_string()))
}

/// Single-choice classification through a chat endpoint, constrained to the
/// label set.
pub async fn classify_with_endpoint(
    text: &str,
    labels: &LabelSet,
    gateway: &Gateway,
) -> Result<String, CohortError> {
    let schema = OutputSchema::new("classification").field(
        "label",
        FieldKind::Choice {
            options: labels.labels().to_vec(),
        },
        true,
    );
    let listed = labels.labels().join("\n- ");
    let request = ChatRequest::new(vec![
        Message::system(
            "Classify the given text into exactly one of the candidate labels. \
             Reply only with a JSON object: {\"label\": \"<one of the candidates>\"}",
        ),
        Message::user(format!("Text: {text}\n\nCandidates:\n- {listed}")),
    ])
    .with_schema(schema);
    let outcome = gateway.complete_structured(&request).await?;
    Ok(outcome.value["label"]
        .as_str()
        .expect("schema guarantees label")
        .to_string())
}

/// Classification backend selector.
pub enum ClassifierBackend<'a> {
    MappingFile(&'a RuleSet),
    Endpoint(&'a Gateway),
}

pub async fn classify_text(
    text: &str,
    labels: &LabelSet,
    backend: &ClassifierBackend<'_>,
) -> Result<String, CohortError> {
    match backend {
        ClassifierBackend::MappingFile(rules) => {
            let label = classify_with_rules(text, rules)?;
            if !labels.labels().contains(&label) {
                return Err(CohortError::UnknownRuleLabel { label });
            }
            Ok(label)
        }
        ClassifierBackend::Endpoint(gateway) => {
            classify_with_endpoint(text, labels, gateway).await
        }
    }
}

/// Auxiliary inputs for attributes that need mapping or classification.
pub enum PartitionAux<'a> {
    None,
    Countries(&'a CountryMap),
    Rules(&'a RuleSet),
    /// Pre-computed user_id -> label assignments (endpoint-backed runs).
    Precomputed(&'a BTreeMap<String, String>),
}

/// Assign every profile to exactly one group for the given attribute.
pub fn partition_by(
    attribute: Attribute,
    profiles: &[UserProfile],
    aux: &PartitionAux<'_>,
) -> Result<CohortPartition, CohortError> {
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut insert = |label: String, user_id: &str| {
        groups.entry(label).or_default().insert(user_id.to_string());
    };
    let wrap = |user_id: &str, source: CohortError| CohortError::UnmappedValue {
        user_id: user_id.to_string(),
        source: Box::new(source),
    };

    let provenance = match attribute {
        Attribute::Age => {
            for p in profiles {
                let label = age_bracket(p.age).map_err(|e| wrap(&p.user_id, e))?;
                insert(label.to_string(), &p.user_id);
            }
            Provenance::Direct
        }
        Attribute::Education => {
            for p in profiles {
                insert(p.education_level.label().to_string(), &p.user_id);
            }
            Provenance::Direct
        }
        Attribute::DevelopmentLevel => {
            let PartitionAux::Countries(map) = aux else {
                return Err(CohortError::MissingAux {
                    attribute: "development_level",
                    what: "a country development map",
                });
            };
            for p in profiles {
                let level =
                    development_level(&p.nationality, map).map_err(|e| wrap(&p.user_id, e))?;
                insert(level.label().to_string(), &p.user_id);
            }
            Provenance::Mapped
        }
        Attribute::JobCategory | Attribute::PositionLevel => {
            match aux {
                PartitionAux::Rules(rules) => {
                    for p in profiles {
                        let label = classify_with_rules(&p.job_title, rules)
                            .map_err(|e| wrap(&p.user_id, e))?;
                        insert(label, &p.user_id);
                    }
                }
                PartitionAux::Precomputed(assignments) => {
                    for p in profiles {
                        let label = assignments.get(&p.user_id).ok_or_else(|| {
                            wrap(
                                &p.user_id,
                                CohortError::NoRuleMatched(p.job_title.clone()),
                            )
                        })?;
                        insert(label.clone(), &p.user_id);
                    }
                }
                _ => {
                    return Err(CohortError::MissingAux {
                        attribute: attribute.label(),
                        what: "classification rules or precomputed labels",
                    })
                }
            }
            Provenance::Classified
        }
    };

    Ok(CohortPartition {
        attribute: attribute.label().to_string(),
        groups,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(user: &str, age: u16, edu: &str, title: &str, country: &str) -> UserProfile {
        serde_json::from_value(serde_json::json!({
            "user_id": user,
            "age": age,
            "gender": "female",
            "job_title": title,
            "education_level": edu,
            "nationality": country,
        }))
        .unwrap()
    }

    #[test]
    fn age_brackets_follow_the_lower_inclusive_convention() {
        assert_eq!(age_bracket(23).unwrap(), "<30");
        assert_eq!(age_bracket(29).unwrap(), "<30");
        assert_eq!(age_bracket(30).unwrap(), "30-40");
        assert_eq!(age_bracket(40).unwrap(), "40-50");
        assert_eq!(age_bracket(50).unwrap(), "50-60");
        assert_eq!(age_bracket(60).unwrap(), ">60");
        assert_eq!(age_bracket(65).unwrap(), ">60");
        assert!(age_bracket(10).is_err());
    }

    #[test]
    fn age_bracket_is_monotone() {
        let order = |label: &str| AGE_BRACKETS.iter().position(|b| *b == label).unwrap();
        let mut last = 0;
        for age in 14..=100 {
            let idx = order(age_bracket(age).unwrap());
            assert!(idx >= last);
            last = idx;
        }
    }

    #[test]
    fn development_level_normalizes_lookup() {
        let map = CountryMap::from_entries(&[("Japan", DevLevel::Developed)]);
        assert_eq!(
            development_level("Japan", &map).unwrap(),
            DevLevel::Developed
        );
        assert_eq!(
            development_level("  japan ", &map).unwrap(),
            DevLevel::Developed
        );
        assert!(matches!(
            development_level("Atlantis", &map),
            Err(CohortError::UnmappedCountry(_))
        ));
    }

    #[test]
    fn rules_prefer_the_longest_match() {
        let rules = RuleSet::from_pairs(&[
            ("chief", "C-Suite"),
            ("chief of staff", "Senior Management"),
            ("engineer", "Science and Technology"),
        ]);
        assert_eq!(
            classify_with_rules("Software Engineer", &rules).unwrap(),
            "Science and Technology"
        );
        assert_eq!(
            classify_with_rules("Chief of Staff", &rules).unwrap(),
            "Senior Management"
        );
        assert_eq!(
            classify_with_rules("Chief Financial Officer", &rules).unwrap(),
            "C-Suite"
        );
        assert!(matches!(
            classify_with_rules("Ceramics Artist", &rules),
            Err(CohortError::NoRuleMatched(_))
        ));
    }

    #[test]
    fn partitions_cover_disjointly() {
        let profiles = vec![
            profile("u1", 23, "HighSchool", "Engineer", "Japan"),
            profile("u2", 35, "Bachelor", "Teacher", "India"),
            profile("u3", 65, "PhD", "Chief of Staff", "Japan"),
            profile("u4", 44, "Master", "Nurse", "Somalia"),
        ];

        let by_edu = partition_by(Attribute::Education, &profiles, &PartitionAux::None).unwrap();
        assert_eq!(by_edu.groups.len(), 4);

        let by_age = partition_by(Attribute::Age, &profiles, &PartitionAux::None).unwrap();
        assert_eq!(
            by_age.groups.keys().cloned().collect::<Vec<_>>(),
            vec!["30-40", "40-50", "<30", ">60"]
        );

        // disjoint and covering
        let mut seen = BTreeSet::new();
        for members in by_age.groups.values() {
            for m in members {
                assert!(seen.insert(m.clone()));
            }
        }
        assert_eq!(seen.len(), profiles.len());

        assert!(matches!(
            partition_by(Attribute::DevelopmentLevel, &profiles, &PartitionAux::None),
            Err(CohortError::MissingAux { .. })
        ));
    }
}
