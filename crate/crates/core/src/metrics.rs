//! Divergence math over 5-bin option distributions: Jensen-Shannon
//! divergence, the Jensen-Shannon centroid, group distances with their
//! adaptation baseline, the 1-D earth mover's distance over ordinal
//! selections, and the derangement-based consistency baseline.
//!
//! All functions are pure and deterministic given their inputs (plus an
//! explicit seed where one applies).

use crate::data::{ProbeResponse, SelectionSequence, Survey};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Number of answer options per question.
pub const BINS: usize = 5;

const LN_2: f64 = std::f64::consts::LN_2;

/// Objective improvement below which the centroid solver stops.
pub const CENTROID_TOL: f64 = 1e-9;
/// Iteration cap for the centroid solver.
pub const CENTROID_MAX_ITERS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("selection value {0} outside 1..=5")]
    ValueOutOfRange(u8),
    #[error("empty input")]
    EmptyInput,
    #[error("group has no responses")]
    EmptyGroup,
    #[error("groups share no question ids")]
    NoSharedQuestions,
    #[error("sequences for '{left}' and '{right}' are not a matched pair")]
    UnmatchedPair { left: String, right: String },
    #[error("need at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("baseline is zero")]
    ZeroBaseline,
}

/// A probability distribution over the five option ids.
///
/// Construction renormalizes when the mass is within 1e-6 of 1 and rejects
/// anything further off; afterwards the sum is within 1e-9 of 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct Distribution5([f64; BINS]);

impl Distribution5 {
    pub fn new(probs: [f64; BINS]) -> Result<Self, MetricsError> {
        for (k, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(MetricsError::InvalidDistribution(format!(
                    "bin {} is not finite",
                    k + 1
                )));
            }
            if p < 0.0 {
                return Err(MetricsError::InvalidDistribution(format!(
                    "bin {} is negative ({p})",
                    k + 1
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::InvalidDistribution(format!(
                "mass sums to {sum}, not 1"
            )));
        }
        let mut out = probs;
        for p in &mut out {
            *p /= sum;
        }
        Ok(Self(out))
    }

    /// Normalize arbitrary non-negative masses into a distribution.
    pub fn from_masses(masses: [f64; BINS]) -> Result<Self, MetricsError> {
        let sum: f64 = masses.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(MetricsError::InvalidDistribution(format!(
                "masses sum to {sum}"
            )));
        }
        let mut out = masses;
        for p in &mut out {
            *p /= sum;
        }
        Self::new(out)
    }

    pub fn uniform() -> Self {
        Self([1.0 / BINS as f64; BINS])
    }

    /// All mass on one option id (1-based).
    pub fn one_hot(option_id: u8) -> Result<Self, MetricsError> {
        if !(1..=BINS as u8).contains(&option_id) {
            return Err(MetricsError::ValueOutOfRange(option_id));
        }
        let mut probs = [0.0; BINS];
        probs[(option_id - 1) as usize] = 1.0;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64; BINS] {
        &self.0
    }

    /// 1-based id of the largest bin, lowest id on ties.
    pub fn argmax_option(&self) -> u8 {
        let mut best = 0usize;
        for k in 1..BINS {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        (best + 1) as u8
    }
}

impl TryFrom<[f64; BINS]> for Distribution5 {
    type Error = MetricsError;
    fn try_from(probs: [f64; BINS]) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<Distribution5> for [f64; BINS] {
    fn from(d: Distribution5) -> Self {
        d.0
    }
}

/// Jensen-Shannon divergence, base 2, in [0, 1].
///
/// Uses the convention 0·log 0 = 0. Distributions that agree bin-wise
/// within 1e-12 yield exactly 0.
pub fn jsd(p: &Distribution5, q: &Distribution5) -> f64 {
    let (p, q) = (p.probs(), q.probs());
    let mut max_gap = 0.0f64;
    for k in 0..BINS {
        max_gap = max_gap.max((p[k] - q[k]).abs());
    }
    if max_gap <= 1e-12 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..BINS {
        let m = 0.5 * (p[k] + q[k]);
        let left = if p[k] > 0.0 {
            0.5 * p[k] * (p[k] / m).ln()
        } else {
            0.0
        };
        let right = if q[k] > 0.0 {
            0.5 * q[k] * (q[k] / m).ln()
        } else {
            0.0
        };
        // one commutative addition per bin keeps jsd(p,q) bit-equal to jsd(q,p)
        acc += left + right;
    }
    (acc / LN_2).clamp(0.0, 1.0)
}

/// Solution of the Jensen-Shannon centroid program.
#[derive(Debug, Clone)]
pub struct CentroidResult {
    pub centroid: Distribution5,
    /// Total JSD from the centroid to every input.
    pub objective: f64,
    pub iterations: u32,
    pub converged: bool,
}

fn total_jsd(c: &Distribution5, inputs: &[Distribution5]) -> f64 {
    inputs.iter().map(|p| jsd(c, p)).sum()
}

fn mean_distribution(inputs: &[Distribution5]) -> Distribution5 {
    let mut acc = [0.0; BINS];
    for p in inputs {
        for k in 0..BINS {
            acc[k] += p.probs()[k];
        }
    }
    let n = inputs.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Distribution5::from_masses(acc).expect("mean of distributions has positive mass")
}

// One fixed-point step: the stationarity condition puts the next iterate at
// the normalized geometric mean of the midpoints m_i = (c + p_i)/2, which is
// a monotone multiplicative update for the convex objective.
fn centroid_step(c: &Distribution5, inputs: &[Distribution5]) -> Distribution5 {
    let n = inputs.len() as f64;
    let mut next = [0.0; BINS];
    for k in 0..BINS {
        let mut log_sum = 0.0;
        let mut dead = false;
        for p in inputs {
            let m = 0.5 * (c.probs()[k] + p.probs()[k]);
            if m <= 0.0 {
                dead = true;
                break;
            }
            log_sum += m.ln();
        }
        next[k] = if dead { 0.0 } else { (log_sum / n).exp() };
    }
    Distribution5::from_masses(next).expect("geometric means have positive mass")
}

/// Minimize the total JSD to `inputs` over the 5-bin simplex.
///
/// Starts at the arithmetic mean and descends until the objective improves
/// by less than [`CENTROID_TOL`] or [`CENTROID_MAX_ITERS`] is hit; the
/// result never scores worse than the mean initialization.
pub fn js_centroid(inputs: &[Distribution5]) -> Result<CentroidResult, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut current = mean_distribution(inputs);
    let mut objective = total_jsd(&current, inputs);
    let mut iterations = 0u32;
    let mut converged = false;
    while iterations < CENTROID_MAX_ITERS {
        iterations += 1;
        let candidate = centroid_step(&current, inputs);
        let candidate_obj = total_jsd(&candidate, inputs);
        let improvement = objective - candidate_obj;
        if candidate_obj <= objective {
            current = candidate;
            objective = candidate_obj;
        }
        if improvement < CENTROID_TOL {
            converged = true;
            break;
        }
    }
    Ok(CentroidResult {
        centroid: current,
        objective,
        iterations,
        converged,
    })
}

/// Per-question distributions of a response set, keyed by question id.
pub fn question_distributions(
    responses: &[&ProbeResponse],
) -> BTreeMap<u16, Vec<Distribution5>> {
    let mut map: BTreeMap<u16, Vec<Distribution5>> = BTreeMap::new();
    for r in responses {
        map.entry(r.question_id)
            .or_default()
            .push(*r.distribution.distribution());
    }
    map
}

/// Mean per-question JSD between the centroids of two response groups.
///
/// Questions answered by only one group are dropped from the average.
pub fn group_distance(
    group_a: &[&ProbeResponse],
    group_b: &[&ProbeResponse],
    survey: &Survey,
) -> Result<f64, MetricsError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let by_q_a = question_distributions(group_a);
    let by_q_b = question_distributions(group_b);
    let mut acc = 0.0;
    let mut used = 0usize;
    for q in survey.questions() {
        let (Some(da), Some(db)) = (by_q_a.get(&q.question_id), by_q_b.get(&q.question_id))
        else {
            continue;
        };
        let ca = js_centroid(da)?.centroid;
        let cb = js_centroid(db)?.centroid;
        acc += jsd(&ca, &cb);
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::NoSharedQuestions);
    }
    Ok(acc / used as f64)
}

/// Mean JSD from each group's per-question centroid to the global
/// per-question centroid, averaged over questions and groups.
///
/// `groups` maps a group label to the member responses; `all` is the full
/// response set the global centroid is built from.
pub fn adaptation_baseline(
    groups: &BTreeMap<String, Vec<&ProbeResponse>>,
    all: &[&ProbeResponse],
    survey: &Survey,
) -> Result<f64, MetricsError> {
    if groups.is_empty() || all.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    for members in groups.values() {
        if members.is_empty() {
            return Err(MetricsError::EmptyGroup);
        }
    }
    let global = question_distributions(all);
    let mut acc = 0.0;
    let mut terms = 0usize;
    for members in groups.values() {
        let by_q = question_distributions(members);
        for q in survey.questions() {
            let (Some(dg), Some(dall)) = (by_q.get(&q.question_id), global.get(&q.question_id))
            else {
                continue;
            };
            let cg = js_centroid(dg)?.centroid;
            let call = js_centroid(dall)?.centroid;
            acc += jsd(&cg, &call);
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(MetricsError::NoSharedQuestions);
    }
    Ok(acc / terms as f64)
}

fn histogram(values: &[u8]) -> Result<[f64; BINS], MetricsError> {
    let mut h = [0.0; BINS];
    for &v in values {
        if !(1..=BINS as u8).contains(&v) {
            return Err(MetricsError::ValueOutOfRange(v));
        }
        h[(v - 1) as usize] += 1.0;
    }
    Ok(h)
}

/// Earth mover's distance between two ordinal selection sequences via
/// cumulative histogram gaps; bounded by `BINS - 1 = 4`.
pub fn emd(su: &SelectionSequence, sd: &SelectionSequence) -> Result<f64, MetricsError> {
    if su.values.len() != sd.values.len() {
        return Err(MetricsError::LengthMismatch {
            left: su.values.len(),
            right: sd.values.len(),
        });
    }
    if su.values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let hu = histogram(&su.values)?;
    let hd = histogram(&sd.values)?;
    let m = su.values.len() as f64;
    let mut acc = 0.0;
    let mut cu = 0.0;
    let mut cd = 0.0;
    for k in 0..BINS - 1 {
        cu += hu[k] / m;
        cd += hd[k] / m;
        acc += (cu - cd).abs();
    }
    Ok(acc)
}

/// Mean EMD over matched (profile, dialogue) sequence pairs.
pub fn consistency_score(
    pairs: &[(SelectionSequence, SelectionSequence)],
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut acc = 0.0;
    for (su, sd) in pairs {
        if su.user_id != sd.user_id {
            return Err(MetricsError::UnmatchedPair {
                left: su.user_id.clone(),
                right: sd.user_id.clone(),
            });
        }
        acc += emd(su, sd)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Uniform random derangement of `0..n` (no index maps to itself).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>, MetricsError> {
    if n < 2 {
        return Err(MetricsError::TooFewUsers(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    // Rejection sampling keeps the distribution uniform over derangements.
    loop {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Mean EMD after a seeded derangement re-pairs every user with another
/// user's dialogue sequence.
pub fn consistency_baseline(
    pairs: &[(SelectionSequence, SelectionSequence)],
    seed: u64,
) -> Result<f64, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewUsers(pairs.len()));
    }
    let perm = derangement(pairs.len(), seed)?;
    let mut acc = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        acc += emd(&pairs[i].0, &pairs[j].1)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Ratio of a measured distance to its baseline.
pub fn divergence_ratio(measured: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(measured / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Scenario;

    fn dist(probs: [f64; 5]) -> Distribution5 {
        Distribution5::new(probs).unwrap()
    }

    fn seq(user: &str, scenario: Scenario, values: Vec<u8>) -> SelectionSequence {
        SelectionSequence {
            user_id: user.to_string(),
            scenario,
            values,
        }
    }

    #[test]
    fn distribution_rejects_bad_mass() {
        assert!(Distribution5::new([0.5, 0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(Distribution5::new([-0.1, 0.6, 0.5, 0.0, 0.0]).is_err());
        assert!(Distribution5::new([0.2; 5]).is_ok());
    }

    #[test]
    fn distribution_renormalizes_small_drift() {
        let d = Distribution5::new([0.2 + 5e-7, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn jsd_identity_is_zero() {
        let p = dist([0.1, 0.7, 0.05, 0.0, 0.15]);
        assert_eq!(jsd(&p, &p), 0.0);
    }

    #[test]
    fn jsd_disjoint_onehots_is_one() {
        let p = Distribution5::one_hot(1).unwrap();
        let q = Distribution5::one_hot(2).unwrap();
        assert!((jsd(&p, &q) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn jsd_uniform_vs_onehot_matches_direct_oracle() {
        // Independent route: 0.5*KL(P||M) + 0.5*KL(Q||M) expanded by hand.
        fn kl_base2(a: &[f64; 5], b: &[f64; 5]) -> f64 {
            let mut s = 0.0;
            for k in 0..5 {
                if a[k] > 0.0 {
                    s += a[k] * (a[k] / b[k]).log2();
                }
            }
            s
        }
        let p = Distribution5::uniform();
        let q = Distribution5::one_hot(1).unwrap();
        let mut m = [0.0; 5];
        for k in 0..5 {
            m[k] = 0.5 * (p.probs()[k] + q.probs()[k]);
        }
        let expected = 0.5 * kl_base2(p.probs(), &m) + 0.5 * kl_base2(q.probs(), &m);
        assert!((jsd(&p, &q) - expected).abs() <= 1e-12);
        assert!((jsd(&p, &q) - 0.60999).abs() <= 1e-5);
    }

    #[test]
    fn centroid_of_identical_inputs_is_the_input() {
        let p = dist([0.3, 0.2, 0.1, 0.25, 0.15]);
        let result = js_centroid(&[p, p, p]).unwrap();
        assert!(result.objective.abs() <= 1e-12);
        for k in 0..5 {
            assert!((result.centroid.probs()[k] - p.probs()[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn centroid_of_two_onehots_splits_evenly() {
        let a = Distribution5::one_hot(1).unwrap();
        let b = Distribution5::one_hot(2).unwrap();
        let result = js_centroid(&[a, b]).unwrap();
        let c = result.centroid.probs();
        assert!((c[0] - 0.5).abs() <= 1e-9);
        assert!((c[1] - 0.5).abs() <= 1e-9);
        assert!(c[2] == 0.0 && c[3] == 0.0 && c[4] == 0.0);
    }

    #[test]
    fn centroid_never_beats_the_mean_bound() {
        let inputs = [
            dist([0.1, 0.7, 0.05, 0.0, 0.15]),
            dist([0.4, 0.1, 0.3, 0.1, 0.1]),
            dist([0.2; 5]),
        ];
        let mean = mean_distribution(&inputs);
        let result = js_centroid(&inputs).unwrap();
        assert!(result.objective <= total_jsd(&mean, &inputs) + 1e-12);
        assert!(result.converged);
    }

    #[test]
    fn emd_forced_cases() {
        let a = seq("u", Scenario::Profile, vec![1; 18]);
        let b = seq("u", Scenario::Dialogue, vec![5; 18]);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        assert!((emd(&a, &b).unwrap() - 4.0).abs() <= 1e-12);
        let c = seq("u", Scenario::Profile, vec![1, 3]);
        let d = seq("u", Scenario::Dialogue, vec![2, 4]);
        assert!((emd(&c, &d).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn emd_rejects_bad_input() {
        let a = seq("u", Scenario::Profile, vec![1, 2]);
        let b = seq("u", Scenario::Dialogue, vec![1]);
        assert!(matches!(
            emd(&a, &b),
            Err(MetricsError::LengthMismatch { .. })
        ));
        let c = seq("u", Scenario::Dialogue, vec![1, 6]);
        let a2 = seq("u", Scenario::Profile, vec![1, 2]);
        assert!(matches!(emd(&a2, &c), Err(MetricsError::ValueOutOfRange(6))));
    }

    #[test]
    fn consistency_score_means_over_pairs() {
        let pairs = vec![
            (
                seq("a", Scenario::Profile, vec![1; 18]),
                seq("a", Scenario::Dialogue, vec![5; 18]),
            ),
            (
                seq("b", Scenario::Profile, vec![3; 18]),
                seq("b", Scenario::Dialogue, vec![3; 18]),
            ),
        ];
        assert!((consistency_score(&pairs).unwrap() - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn consistency_score_rejects_unmatched_users() {
        let pairs = vec![(
            seq("a", Scenario::Profile, vec![1, 2]),
            seq("b", Scenario::Dialogue, vec![1, 2]),
        )];
        assert!(matches!(
            consistency_score(&pairs),
            Err(MetricsError::UnmatchedPair { .. })
        ));
    }

    #[test]
    fn derangement_of_two_is_the_swap() {
        for s in 0..32 {
            assert_eq!(derangement(2, s).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for s in 0..200 {
            let perm = derangement(7, s).unwrap();
            assert!(perm.iter().enumerate().all(|(i, &p)| i != p));
        }
    }

    #[test]
    fn consistency_baseline_replays_the_pairing() {
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                (
                    seq(&format!("u{i}"), Scenario::Profile, vec![1 + i as u8; 6]),
                    seq(&format!("u{i}"), Scenario::Dialogue, vec![5 - i as u8; 6]),
                )
            })
            .collect();
        let seed = 99;
        let got = consistency_baseline(&pairs, seed).unwrap();
        let perm = derangement(4, seed).unwrap();
        let mut expected = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            expected += emd(&pairs[i].0, &pairs[j].1).unwrap();
        }
        expected /= 4.0;
        assert!((got - expected).abs() <= 1e-12);
    }

    #[test]
    fn ratio_matches_published_rows() {
        // (measured, baseline, expected-to-3-decimals)
        let rows = [
            (0.305, 0.312, 0.978),
            (0.214, 0.225, 0.951),
            (0.276, 0.276, 1.000),
            (0.176, 0.190, 0.926),
            (0.118, 0.128, 0.922),
            (0.112, 0.125, 0.896),
        ];
        for (measured, baseline, expected) in rows {
            let ratio = divergence_ratio(measured, baseline).unwrap();
            assert!(
                (ratio - expected).abs() <= 1e-3,
                "{measured}/{baseline} -> {ratio}, want {expected}"
            );
        }
        assert!(matches!(
            divergence_ratio(0.1, 0.0),
            Err(MetricsError::ZeroBaseline)
        ));
    }
}
