//! Scoring, operating-point selection under a false-alarm budget, and
//! federated metric aggregation.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, UserId, POSITIVE_CLASS};
use crate::error::{config_err, usage_err, Error, Result};
use crate::model::{Classifier, LabeledExample, Params};
use crate::scalar::Scalar;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample<T> {
    /// Positive-class probability.
    pub score: T,
    pub label: usize,
    pub duration_s: T,
}

impl<T> ScoredExample<T> {
    pub fn is_positive(&self) -> bool {
        self.label == POSITIVE_CLASS
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTargets {
    #[serde(default = "default_fah_budget")]
    pub fah_budget: f64,
    #[serde(default = "default_recall_target")]
    pub recall_target: f64,
}

fn default_fah_budget() -> f64 {
    5.0
}

fn default_recall_target() -> f64 {
    0.95
}

impl Default for EvalTargets {
    fn default() -> Self {
        Self { fah_budget: default_fah_budget(), recall_target: default_recall_target() }
    }
}

impl EvalTargets {
    pub fn validate(&self) -> Result<()> {
        if !(self.fah_budget >= 0.0 && self.fah_budget.is_finite()) {
            return Err(config_err("fah_budget must be finite and nonnegative"));
        }
        if !(self.recall_target >= 0.0 && self.recall_target <= 1.0) {
            return Err(config_err("recall_target must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Whether per-user metrics are averaged or all scores are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Distributed,
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint<T> {
    /// Trigger when `score >= tau`.
    pub tau: T,
    pub recall: T,
    pub fah: T,
    /// False when every observed score exceeds the false-alarm budget, in which
    /// case `tau` is the sentinel above 1 and recall is 0.
    pub feasible: bool,
}

/// Threshold strictly above any probability: the next float after 1.
pub fn sentinel_threshold<T: Scalar>() -> T {
    T::one() + T::epsilon()
}

pub fn score_examples<T, M>(model: &M, w: &Params<T>, examples: &[LabeledExample<T>]) -> Result<Vec<ScoredExample<T>>>
where
    T: Scalar,
    M: Classifier<T>,
{
    if model.class_count() <= POSITIVE_CLASS {
        return Err(usage_err("model has no positive class"));
    }
    examples
        .iter()
        .map(|ex| {
            let p = model.probabilities(w, &ex.features)?;
            Ok(ScoredExample { score: p[POSITIVE_CLASS], label: ex.label, duration_s: ex.duration_s })
        })
        .collect()
}

/// False alarms per hour at `count` alarms over `negative_seconds` of audio.
pub fn false_alarms_per_hour<T: Scalar>(count: usize, negative_seconds: T) -> T {
    T::of_usize(count) / (negative_seconds / T::of(SECONDS_PER_HOUR))
}

/// Recall-maximizing threshold with `FAH <= fah_budget`.
///
/// Candidates are the distinct scores plus a sentinel above 1. Among
/// thresholds with equal recall the largest one wins.
pub fn operating_point<T: Scalar>(scored: &[ScoredExample<T>], targets: &EvalTargets) -> Result<OperatingPoint<T>> {
    let positives = scored.iter().filter(|s| s.is_positive()).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(usage_err(format!(
            "operating point needs positives and negatives, got {positives} and {negatives}"
        )));
    }
    let negative_seconds: T = scored.iter().filter(|s| !s.is_positive()).map(|s| s.duration_s).sum();
    if !(negative_seconds > T::zero()) {
        return Err(usage_err("negative examples have zero total duration"));
    }
    if scored.iter().any(|s| s.score.is_nan()) {
        return Err(usage_err("NaN score"));
    }
    let budget = T::of(targets.fah_budget);
    let n_pos = T::of_usize(positives);

    let mut order: Vec<&ScoredExample<T>> = scored.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("no NaN scores"));

    let mut best = OperatingPoint { tau: sentinel_threshold(), recall: T::zero(), fah: T::zero(), feasible: false };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    // Walk thresholds from high to low; FAH only grows, so stop at the first
    // threshold over budget.
    while i < order.len() {
        let tau = order[i].score;
        while i < order.len() && order[i].score == tau {
            if order[i].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fah = false_alarms_per_hour(fp, negative_seconds);
        if fah > budget {
            break;
        }
        best.feasible = true;
        let recall = T::of_usize(tp) / n_pos;
        if recall > best.recall {
            best.tau = tau;
            best.recall = recall;
            best.fah = fah;
        }
    }
    Ok(best)
}

/// Operating point on the examples of one user.
pub fn user_operating_point<T, M>(
    model: &M,
    w: &Params<T>,
    examples: &[LabeledExample<T>],
    targets: &EvalTargets,
) -> Result<OperatingPoint<T>>
where
    T: Scalar,
    M: Classifier<T>,
{
    operating_point(&score_examples(model, w, examples)?, targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedMetric {
    /// Weighted recall over the evaluated users (or pooled recall).
    pub value: f64,
    pub evaluated_users: usize,
    pub skipped_users: Vec<UserId>,
}

fn can_score<T: Scalar>(examples: &[LabeledExample<T>]) -> bool {
    let has_pos = examples.iter().any(|e| e.label == POSITIVE_CLASS);
    let neg_seconds: T = examples.iter().filter(|e| e.label != POSITIVE_CLASS).map(|e| e.duration_s).sum();
    has_pos && neg_seconds > T::zero()
}

/// Recall over evaluation users.
///
/// In distributed mode every user picks its own budgeted operating point and
/// the recalls are combined with weights `n_k / sum n_k`; users without both
/// positives and negatives are skipped and left out of the normalizer. In
/// pooled mode all scores feed a single operating point.
pub fn federated_eval<T, M>(
    model: &M,
    w: &Params<T>,
    federation: &Federation<T>,
    eval_user_ids: &[UserId],
    targets: &EvalTargets,
    mode: EvalMode,
) -> Result<FederatedMetric>
where
    T: Scalar,
    M: Classifier<T>,
{
    let mut ids = eval_user_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Evaluation("no evaluation users".into()));
    }
    let partitions = ids.iter().map(|&id| federation.require(id)).collect::<Result<Vec<_>>>()?;

    match mode {
        EvalMode::Distributed => {
            let mut weighted = 0.0;
            let mut weight_total = 0usize;
            let mut evaluated = 0;
            let mut skipped = Vec::new();
            for p in partitions {
                if !can_score(&p.examples) {
                    skipped.push(p.user_id);
                    continue;
                }
                let op = user_operating_point(model, w, &p.examples, targets)?;
                weighted += p.len() as f64 * op.recall.as_f64();
                weight_total += p.len();
                evaluated += 1;
            }
            if !skipped.is_empty() {
                debug!("skipped {} evaluation users lacking positives or negatives", skipped.len());
            }
            if evaluated == 0 {
                return Err(Error::Evaluation(format!(
                    "all {} evaluation users lack positives or negatives",
                    skipped.len()
                )));
            }
            Ok(FederatedMetric {
                value: weighted / weight_total as f64,
                evaluated_users: evaluated,
                skipped_users: skipped,
            })
        }
        EvalMode::Pooled => {
            let mut scored = Vec::new();
            for p in &partitions {
                scored.extend(score_examples(model, w, &p.examples)?);
            }
            let op =
                operating_point(&scored, targets).map_err(|e| Error::Evaluation(format!("pooled evaluation: {e}")))?;
            Ok(FederatedMetric { value: op.recall.as_f64(), evaluated_users: partitions.len(), skipped_users: vec![] })
        }
    }
}

/// Inclusive: the target is met when `metric >= recall_target`.
pub fn early_stop_check(metric: f64, targets: &EvalTargets) -> bool {
    metric >= targets.recall_target
}
