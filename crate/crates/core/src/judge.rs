//! Dialogue quality scoring via a judge endpoint, multi-seed averaging, and
//! the rater-agreement statistics (Pearson, ICC(3,k)) used to check the
//! judge against human ratings.

use crate::data::{Dialogue, UserProfile};
use crate::gateway::{ChatRequest, FieldKind, Gateway, GatewayError, Message, OutputSchema};
use crate::templates::TemplateSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("score {0} outside 0..=5")]
    ScoreOutOfRange(i64),
    #[error("no scores to aggregate")]
    EmptyGroup,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("between-target variance is zero")]
    DegenerateBetweenVariance,
    #[error("rating matrix is incomplete: {0}")]
    IncompleteMatrix(String),
}

/// The four scored dimensions.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Dimension {
    AttributeCoverage,
    AttributeCorrectness,
    QuestionDiversity,
    Relevance,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::AttributeCoverage,
        Dimension::AttributeCorrectness,
        Dimension::QuestionDiversity,
        Dimension::Relevance,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Dimension::AttributeCoverage => "AttributeCoverage",
            Dimension::AttributeCorrectness => "AttributeCorrectness",
            Dimension::QuestionDiversity => "QuestionDiversity",
            Dimension::Relevance => "Relevance",
        }
    }

    fn template(&self) -> &'static str {
        match self {
            Dimension::AttributeCoverage => "judge_attribute_coverage.txt",
            Dimension::AttributeCorrectness => "judge_attribute_correctness.txt",
            Dimension::QuestionDiversity => "judge_question_diversity.txt",
            Dimension::Relevance => "judge_relevance.txt",
        }
    }

    pub fn parse(label: &str) -> Option<Dimension> {
        Dimension::ALL.iter().find(|d| d.label() == label).copied()
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeScore {
    pub dialogue_user_id: String,
    pub dimension: Dimension,
    pub score: f64,
    pub rationale: String,
    pub seed: u64,
}

fn judge_schema() -> OutputSchema {
    OutputSchema::new("judge_score")
        .field(
            "score",
            FieldKind::Integer {
                min: Some(0),
                max: Some(5),
            },
            true,
        )
        .field("rationale", FieldKind::Text { non_empty: true }, true)
}

pub struct DialogueJudge {
    gateway: Gateway,
    templates: TemplateSet,
}

impl DialogueJudge {
    pub fn new(gateway: Gateway, templates: TemplateSet) -> Self {
        Self { gateway, templates }
    }

    /// Score one (dialogue, dimension) pair under one seed. Each dimension
    /// is judged in a separate call so the rubrics do not condition each
    /// other.
    pub async fn judge_dimension(
        &self,
        dialogue: &Dialogue,
        profile: &UserProfile,
        dimension: Dimension,
        seed: u64,
    ) -> Result<JudgeScore, JudgeError> {
        let request = ChatRequest::new(vec![
            Message::system(self.templates.get("judge_system.txt")),
            Message::user(self.templates.render(
                dimension.template(),
                &[
                    ("PROFILE", &profile.prompt_block()),
                    ("DIALOGUE", &dialogue.transcript()),
                ],
            )),
        ])
        .with_schema(judge_schema())
        .with_seed(seed);
        let outcome = self.gateway.complete_structured(&request).await?;
        let score = outcome.value["score"]
            .as_i64()
            .ok_or(JudgeError::ScoreOutOfRange(-1))?;
        if !(0..=5).contains(&score) {
            return Err(JudgeError::ScoreOutOfRange(score));
        }
        let rationale = outcome.value["rationale"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(JudgeScore {
            dialogue_user_id: dialogue.user_id.clone(),
            dimension,
            score: score as f64,
            rationale,
            seed,
        })
    }
}

/// Seed-averaged scores per dialogue and dimension, plus corpus-level means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreAggregate {
    pub per_dialogue: BTreeMap<String, BTreeMap<Dimension, f64>>,
    pub corpus_means: BTreeMap<Dimension, f64>,
}

/// Arithmetic mean over seeds per (dialogue, dimension), then over dialogues
/// per dimension. Input order never matters.
pub fn aggregate_scores(scores: &[JudgeScore]) -> Result<ScoreAggregate, JudgeError> {
    if scores.is_empty() {
        return Err(JudgeError::EmptyGroup);
    }
    let mut sums: BTreeMap<(String, Dimension), (f64, usize)> = BTreeMap::new();
    for s in scores {
        let entry = sums
            .entry((s.dialogue_user_id.clone(), s.dimension))
            .or_insert((0.0, 0));
        entry.0 += s.score;
        entry.1 += 1;
    }
    let mut per_dialogue: BTreeMap<String, BTreeMap<Dimension, f64>> = BTreeMap::new();
    for ((user, dimension), (sum, count)) in &sums {
        per_dialogue
            .entry(user.clone())
            .or_default()
            .insert(*dimension, sum / *count as f64);
    }
    let mut corpus_means = BTreeMap::new();
    for dimension in Dimension::ALL {
        let values: Vec<f64> = per_dialogue
            .values()
            .filter_map(|dims| dims.get(&dimension).copied())
            .collect();
        if !values.is_empty() {
            corpus_means.insert(dimension, values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    Ok(ScoreAggregate {
        per_dialogue,
        corpus_means,
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, JudgeError> {
    if x.len() != y.len() {
        return Err(JudgeError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(JudgeError::TooFewSamples {
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mean_x) * (b - mean_y);
        var_x += (a - mean_x).powi(2);
        var_y += (b - mean_y).powi(2);
    }
    if var_x <= 0.0 {
        return Err(JudgeError::ZeroVariance("x"));
    }
    if var_y <= 0.0 {
        return Err(JudgeError::ZeroVariance("y"));
    }
    Ok((cov / (var_x.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0))
}

/// Complete targets-by-raters score matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingMatrix {
    targets: Vec<String>,
    raters: Vec<String>,
    cells: Vec<Vec<f64>>,
}

impl RatingMatrix {
    pub fn new(
        targets: Vec<String>,
        raters: Vec<String>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self, JudgeError> {
        if targets.len() < 2 {
            return Err(JudgeError::TooFewSamples {
                need: 2,
                got: targets.len(),
            });
        }
        if raters.len() < 2 {
            return Err(JudgeError::TooFewSamples {
                need: 2,
                got: raters.len(),
            });
        }
        if cells.len() != targets.len() {
            return Err(JudgeError::IncompleteMatrix(format!(
                "{} rows for {} targets",
                cells.len(),
                targets.len()
            )));
        }
        for (i, row) in cells.iter().enumerate() {
            if row.len() != raters.len() {
                return Err(JudgeError::IncompleteMatrix(format!(
                    "row {i} has {} cells for {} raters",
                    row.len(),
                    raters.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(JudgeError::IncompleteMatrix(format!(
                    "row {i} holds a non-finite score"
                )));
            }
        }
        Ok(Self {
            targets,
            raters,
            cells,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }
}

/// ICC(3,k): (BMS - EMS) / BMS from the two-way ANOVA without interaction,
/// for the average of k fixed raters.
pub fn icc3k(matrix: &RatingMatrix) -> Result<f64, JudgeError> {
    let n = matrix.n_targets();
    let k = matrix.n_raters();
    let cells = matrix.cells();
    let grand: f64 = cells.iter().flatten().sum::<f64>() / (n * k) as f64;

    let row_means: Vec<f64> = cells
        .iter()
        .map(|row| row.iter().sum::<f64>() / k as f64)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| cells.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();

    let ss_targets: f64 = k as f64 * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_raters: f64 = n as f64 * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = cells
        .iter()
        .flatten()
        .map(|v| (v - grand).powi(2))
        .sum::<f64>();
    let ss_error = (ss_total - ss_targets - ss_raters).max(0.0);

    let bms = ss_targets / (n - 1) as f64;
    let ems = ss_error / ((n - 1) * (k - 1)) as f64;
    if bms < 1e-12 {
        return Err(JudgeError::DegenerateBetweenVariance);
    }
    Ok((bms - ems) / bms)
}

/// One line of the human ratings file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanRating {
    pub item_id: String,
    pub rater_id: String,
    pub dimension: Dimension,
    pub score: f64,
}

/// Mean human score per (item, dimension) across raters.
pub fn human_means(
    ratings: &[HumanRating],
) -> BTreeMap<Dimension, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<Dimension, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in ratings {
        let entry = sums
            .entry(r.dimension)
            .or_default()
            .entry(r.item_id.clone())
            .or_insert((0.0, 0));
        entry.0 += r.score;
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(dim, items)| {
            (
                dim,
                items
                    .into_iter()
                    .map(|(item, (sum, count))| (item, sum / count as f64))
                    .collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(user: &str, dimension: Dimension, value: f64, seed: u64) -> JudgeScore {
        JudgeScore {
            dialogue_user_id: user.into(),
            dimension,
            score: value,
            rationale: "because".into(),
            seed,
        }
    }

    #[test]
    fn aggregate_means_over_seeds() {
        let values = [4.0, 4.0, 4.0, 5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        let scores: Vec<JudgeScore> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| score("d1", Dimension::AttributeCoverage, v, i as u64))
            .collect();
        let agg = aggregate_scores(&scores).unwrap();
        let got = agg.per_dialogue["d1"][&Dimension::AttributeCoverage];
        assert!((got - 4.1).abs() <= 1e-12);
        assert!((agg.corpus_means[&Dimension::AttributeCoverage] - 4.1).abs() <= 1e-12);
    }

    #[test]
    fn aggregate_single_seed_is_identity() {
        let agg =
            aggregate_scores(&[score("d1", Dimension::Relevance, 3.0, 0)]).unwrap();
        assert_eq!(agg.per_dialogue["d1"][&Dimension::Relevance], 3.0);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(matches!(aggregate_scores(&[]), Err(JudgeError::EmptyGroup)));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut scores: Vec<JudgeScore> = (0..6)
            .map(|i| score("d1", Dimension::QuestionDiversity, i as f64 % 5.0, i))
            .collect();
        let forward = aggregate_scores(&scores).unwrap();
        scores.reverse();
        let backward = aggregate_scores(&scores).unwrap();
        assert_eq!(
            forward.per_dialogue["d1"][&Dimension::QuestionDiversity],
            backward.per_dialogue["d1"][&Dimension::QuestionDiversity]
        );
    }

    #[test]
    fn pearson_forced_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(JudgeError::ZeroVariance("x"))
        ));
        assert!(matches!(
            pearson(&[1.0], &[1.0]),
            Err(JudgeError::TooFewSamples { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(JudgeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pearson_matches_direct_formula_oracle() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.2, 1.9, 3.4, 3.8];
        // independent evaluation of cov / (sigma_x * sigma_y)
        let n = 4.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        let expected = cov / (sx * sy);
        assert!((pearson(&x, &y).unwrap() - expected).abs() <= 1e-12);
    }

    fn matrix(cells: Vec<Vec<f64>>) -> RatingMatrix {
        let targets = (0..cells.len()).map(|i| format!("t{i}")).collect();
        let raters = (0..cells[0].len()).map(|j| format!("r{j}")).collect();
        RatingMatrix::new(targets, raters, cells).unwrap()
    }

    #[test]
    fn icc_identical_raters_is_one() {
        let m = matrix(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        assert!((icc3k(&m).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn icc_constant_targets_is_degenerate() {
        let m = matrix(vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(matches!(
            icc3k(&m),
            Err(JudgeError::DegenerateBetweenVariance)
        ));
    }

    #[test]
    fn icc_is_affine_invariant() {
        let base = vec![
            vec![4.0, 3.5, 4.5],
            vec![2.0, 2.5, 1.5],
            vec![5.0, 4.5, 5.0],
            vec![3.0, 3.5, 2.5],
        ];
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|row| row.iter().map(|v| 2.0 * v + 10.0).collect())
            .collect();
        let a = icc3k(&matrix(base)).unwrap();
        let b = icc3k(&matrix(shifted)).unwrap();
        assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn matrix_constructor_rejects_gaps() {
        assert!(RatingMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["r1".into(), "r2".into()],
            vec![vec![1.0, 2.0], vec![1.0]],
        )
        .is_err());
        assert!(RatingMatrix::new(
            vec!["a".into()],
            vec!["r1".into(), "r2".into()],
            vec![vec![1.0, 2.0]],
        )
        .is_err());
    }
}
