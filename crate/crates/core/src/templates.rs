//! Prompt templates for the generation, judging, and probing stages.
//!
//! Templates are plain text files with `{NAME}` placeholders. The wording is
//! operator-editable; the placeholder contract per file is not.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template file '{0}' not found in {1}")]
    MissingTemplate(String, String),
    #[error("template '{file}' is missing required placeholder {{{placeholder}}}")]
    PlaceholderMissing { file: String, placeholder: String },
    #[error("io error reading template '{file}': {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
}

/// Template file names and the placeholders each must contain.
pub const TEMPLATE_CONTRACT: &[(&str, &[&str])] = &[
    ("simulator_system.txt", &[]),
    (
        "simulator_initial.txt",
        &["PROFILE", "OBJECTIVES", "TERMINATION"],
    ),
    (
        "simulator_followup.txt",
        &["PROFILE", "HISTORY_BLOCK", "OBJECTIVES", "TERMINATION"],
    ),
    ("ooc_system.txt", &[]),
    ("ooc_user.txt", &["PROFILE", "QUESTION"]),
    ("probe_profile_system.txt", &[]),
    (
        "probe_profile_user.txt",
        &["PROFILE", "QUESTION", "OPTIONS", "SCHEMA"],
    ),
    (
        "probe_dialogue_user.txt",
        &["QUESTION", "OPTIONS", "SCHEMA"],
    ),
    ("judge_system.txt", &[]),
    ("judge_attribute_coverage.txt", &["PROFILE", "DIALOGUE"]),
    ("judge_attribute_correctness.txt", &["PROFILE", "DIALOGUE"]),
    ("judge_question_diversity.txt", &["PROFILE", "DIALOGUE"]),
    ("judge_relevance.txt", &["PROFILE", "DIALOGUE"]),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    files: BTreeMap<String, String>,
}

impl TemplateSet {
    /// Load every contracted template from a directory.
    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let mut files = BTreeMap::new();
        for (name, placeholders) in TEMPLATE_CONTRACT {
            let path = dir.join(name);
            if !path.exists() {
                return Err(TemplateError::MissingTemplate(
                    name.to_string(),
                    dir.display().to_string(),
                ));
            }
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                file: name.to_string(),
                source,
            })?;
            check_placeholders(name, placeholders, &text)?;
            files.insert(name.to_string(), text);
        }
        Ok(Self { files })
    }

    /// The built-in template set shipped with the binary.
    pub fn builtin() -> Self {
        let files = BTreeMap::from(
            [
                (
                    "simulator_system.txt",
                    include_str!("../assets/templates/simulator_system.txt"),
                ),
                (
                    "simulator_initial.txt",
                    include_str!("../assets/templates/simulator_initial.txt"),
                ),
                (
                    "simulator_followup.txt",
                    include_str!("../assets/templates/simulator_followup.txt"),
                ),
                (
                    "ooc_system.txt",
                    include_str!("../assets/templates/ooc_system.txt"),
                ),
                (
                    "ooc_user.txt",
                    include_str!("../assets/templates/ooc_user.txt"),
                ),
                (
                    "probe_profile_system.txt",
                    include_str!("../assets/templates/probe_profile_system.txt"),
                ),
                (
                    "probe_profile_user.txt",
                    include_str!("../assets/templates/probe_profile_user.txt"),
                ),
                (
                    "probe_dialogue_user.txt",
                    include_str!("../assets/templates/probe_dialogue_user.txt"),
                ),
                (
                    "judge_system.txt",
                    include_str!("../assets/templates/judge_system.txt"),
                ),
                (
                    "judge_attribute_coverage.txt",
                    include_str!("../assets/templates/judge_attribute_coverage.txt"),
                ),
                (
                    "judge_attribute_correctness.txt",
                    include_str!("../assets/templates/judge_attribute_correctness.txt"),
                ),
                (
                    "judge_question_diversity.txt",
                    include_str!("../assets/templates/judge_question_diversity.txt"),
                ),
                (
                    "judge_relevance.txt",
                    include_str!("../assets/templates/judge_relevance.txt"),
                ),
            ]
            .map(|(k, v)| (k.to_string(), v.to_string())),
        );
        Self { files }
    }

    pub fn get(&self, name: &str) -> &str {
        self.files
            .get(name)
            .unwrap_or_else(|| panic!("template '{name}' is not part of the contract"))
    }

    /// Fill `{NAME}` placeholders in the named template.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> String {
        let mut text = self.get(name).to_string();
        for (key, value) in values {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        text.trim_end().to_string()
    }
}

fn check_placeholders(
    file: &str,
    placeholders: &[&str],
    text: &str,
) -> Result<(), TemplateError> {
    for p in placeholders {
        if !text.contains(&format!("{{{p}}}")) {
            return Err(TemplateError::PlaceholderMissing {
                file: file.to_string(),
                placeholder: p.to_string(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_set_satisfies_the_contract() {
        let set = TemplateSet::builtin();
        for (name, placeholders) in TEMPLATE_CONTRACT {
            check_placeholders(name, placeholders, set.get(name)).unwrap();
        }
    }

    #[test]
    fn load_rejects_template_without_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        // copy the builtin set, then break one file
        let builtin = TemplateSet::builtin();
        for (name, _) in TEMPLATE_CONTRACT {
            std::fs::write(dir.path().join(name), builtin.get(name)).unwrap();
        }
        std::fs::write(
            dir.path().join("probe_profile_user.txt"),
            "question only: {QUESTION} {OPTIONS} {SCHEMA}",
        )
        .unwrap();
        let err = TemplateSet::load(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            TemplateError::PlaceholderMissing { ref placeholder, .. } if placeholder == "PROFILE"
        ));
    }

    #[test]
    fn render_fills_placeholders() {
        let set = TemplateSet::builtin();
        let text = set.render(
            "ooc_user.txt",
            &[("PROFILE", "age: 23"), ("QUESTION", "What next?")],
        );
        assert!(text.contains("age: 23"));
        assert!(text.contains("What next?"));
        assert!(!text.contains("{PROFILE}"));
    }
}
