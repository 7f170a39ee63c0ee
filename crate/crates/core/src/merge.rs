//! Conflict-resolving aggregators over task vectors.
//!
//! All operators sort their inputs by `task_id` before any reduction, so
//! results are bitwise independent of the order the vectors arrive in.
//! Magnitude ties are always broken in favour of the lowest coordinate
//! index.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::numeric::ModelState;
use crate::seed::{derive_seed, rng_from_seed};
use crate::task_vector::{aggregate_mean, prepare, sorted_sum, MultitaskVector, TaskVector};
use crate::Scalar;

/// Slack when turning `fraction * len` into a count, so that products such
/// as `0.1 * 30` that land one ulp above an integer are not rounded up.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    SumTa,
    Ties,
    DareThenMean,
    BreadcrumbsThenMean,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::SumTa => "sum_ta",
            AggregatorKind::Ties => "ties",
            AggregatorKind::DareThenMean => "dare_then_mean",
            AggregatorKind::BreadcrumbsThenMean => "breadcrumbs_then_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub kind: AggregatorKind,
    #[serde(default = "defaults::ties_keep_fraction")]
    pub ties_keep_fraction: f64,
    #[serde(default = "defaults::dare_drop_prob")]
    pub dare_drop_prob: f64,
    #[serde(default = "defaults::bc_top_fraction")]
    pub bc_top_fraction: f64,
    #[serde(default = "defaults::bc_bottom_fraction")]
    pub bc_bottom_fraction: f64,
    /// Root seed of the stochastic operators.
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn ties_keep_fraction() -> f64 {
        0.2
    }
    pub fn dare_drop_prob() -> f64 {
        0.9
    }
    pub fn bc_top_fraction() -> f64 {
        0.01
    }
    pub fn bc_bottom_fraction() -> f64 {
        0.85
    }
}

impl Aggregator {
    pub fn new(kind: AggregatorKind) -> Self {
        Aggregator {
            kind,
            ties_keep_fraction: defaults::ties_keep_fraction(),
            dare_drop_prob: defaults::dare_drop_prob(),
            bc_top_fraction: defaults::bc_top_fraction(),
            bc_bottom_fraction: defaults::bc_bottom_fraction(),
            seed: 0,
        }
    }

    pub fn mean() -> Self {
        Self::new(AggregatorKind::Mean)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(AtmError::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("ties_keep_fraction", self.ties_keep_fraction)?;
        unit("dare_drop_prob", self.dare_drop_prob)?;
        unit("bc_top_fraction", self.bc_top_fraction)?;
        unit("bc_bottom_fraction", self.bc_bottom_fraction)?;
        if self.ties_keep_fraction == 0.0 {
            return Err(AtmError::config("ties_keep_fraction must be positive"));
        }
        if self.dare_drop_prob >= 1.0 {
            return Err(AtmError::config("dare_drop_prob must be below 1"));
        }
        if self.bc_top_fraction + self.bc_bottom_fraction >= 1.0 {
            return Err(AtmError::config("bc_top_fraction + bc_bottom_fraction must be below 1"));
        }
        Ok(())
    }
}

/// Plain task arithmetic: `base + alpha * sum(tau_i)`.
pub fn merge_task_arithmetic<T: Scalar>(
    base: ModelState<T>,
    vectors: Vec<TaskVector<T>>,
    alpha: T,
) -> Result<ModelState<T>> {
    let sum = sum_aggregate(vectors)?;
    crate::task_vector::apply(base, &sum, alpha)
}

fn sum_aggregate<T: Scalar>(vectors: Vec<TaskVector<T>>) -> Result<MultitaskVector<T>> {
    let (acc, ids) = sorted_sum(vectors)?;
    Ok(MultitaskVector {
        delta: acc.delta,
        contributing_tasks: ids,
        aggregator_name: AggregatorKind::SumTa.name().into(),
        arch: acc.source_arch,
    })
}

/// Descending magnitude, then ascending index.
fn by_magnitude_desc<T: Scalar>(values: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Ascending magnitude, then ascending index.
fn by_magnitude_asc<T: Scalar>(values: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Indices of the `k` first elements of `candidates` under `order`.
fn first_k(mut candidates: Vec<usize>, k: usize, order: impl Fn(&usize, &usize) -> Ordering) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, &order);
        candidates.truncate(k);
    }
    candidates
}

fn sign<T: Scalar>(x: T) -> i8 {
    if x > T::zero() {
        1
    } else if x < T::zero() {
        -1
    } else {
        0
    }
}

/// TIES merging: trim each vector to its `ceil(keep_fraction * d)`
/// largest-magnitude coordinates, elect a sign per coordinate from the sum
/// of the trimmed values, then average the trimmed values that agree with
/// the elected sign. A zero sum elects sign 0 and yields 0.
pub fn ties_aggregate<T: Scalar>(mut vectors: Vec<TaskVector<T>>, keep_fraction: f64) -> Result<MultitaskVector<T>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(AtmError::config(format!(
            "ties keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    prepare(&mut vectors)?;
    let d = vectors[0].delta.len();
    let keep = ((keep_fraction * d as f64 - COUNT_SLACK).ceil() as usize).clamp(1, d.max(1));

    for v in vectors.iter_mut() {
        let kept = first_k((0..d).collect(), keep, by_magnitude_desc(v.delta.as_slice()));
        let mut mask = vec![false; d];
        for i in kept {
            mask[i] = true;
        }
        for (x, m) in v.delta.iter_mut().zip(mask) {
            if !m {
                *x = T::zero();
            }
        }
    }

    // Each output coordinate depends only on that coordinate of the inputs,
    // so the result can overwrite the first (lowest task_id) buffer.
    let ids: Vec<String> = vectors.iter().map(|v| v.task_id.clone()).collect();
    let mut iter = vectors.into_iter();
    let mut out = iter.next().expect("prepare rejects empty lists");
    let rest: Vec<TaskVector<T>> = iter.collect();
    for j in 0..d {
        let column = std::iter::once(out.delta[j]).chain(rest.iter().map(|v| v.delta[j]));
        let total = column.clone().fold(T::zero(), |acc, x| acc + x);
        let elected = sign(total);
        let merged = if elected == 0 {
            T::zero()
        } else {
            let (sum, count) = column
                .filter(|&x| sign(x) == elected)
                .fold((T::zero(), 0usize), |(s, c), x| (s + x, c + 1));
            sum / T::from_usize_lossy(count)
        };
        out.delta[j] = merged;
    }
    Ok(MultitaskVector {
        delta: out.delta,
        contributing_tasks: ids,
        aggregator_name: AggregatorKind::Ties.name().into(),
        arch: out.source_arch,
    })
}

/// DARE: zero each coordinate independently with probability `drop_prob`,
/// scale survivors by `1 / (1 - drop_prob)`.
///
/// Coordinate `i` is dropped when the `i`-th `f64` drawn from
/// [`rng_from_seed(seed)`](crate::seed::rng_from_seed) is below `drop_prob`;
/// one draw is consumed per coordinate.
pub fn dare_transform<T: Scalar>(mut vector: TaskVector<T>, drop_prob: f64, seed: u64) -> Result<TaskVector<T>> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(AtmError::config(format!(
            "dare drop_prob must lie in [0, 1), got {drop_prob}"
        )));
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - drop_prob));
    let mut rng = rng_from_seed(seed);
    for x in vector.delta.iter_mut() {
        let u: f64 = rng.random();
        *x = if u < drop_prob { T::zero() } else { *x * scale };
    }
    Ok(vector)
}

/// Model breadcrumbs: within each layer (weights and biases together) of
/// `d_l` coordinates, zero the `floor(top * d_l)` largest and then, among
/// the rest, the `floor(bottom * d_l)` smallest coordinates by magnitude.
pub fn breadcrumbs_mask<T: Scalar>(
    mut vector: TaskVector<T>,
    top_fraction: f64,
    bottom_fraction: f64,
) -> Result<TaskVector<T>> {
    if !(0.0..=1.0).contains(&top_fraction) || !(0.0..=1.0).contains(&bottom_fraction) {
        return Err(AtmError::config("breadcrumbs fractions must lie in [0, 1]"));
    }
    if top_fraction + bottom_fraction >= 1.0 {
        return Err(AtmError::config(format!(
            "breadcrumbs fractions sum to {} (must be below 1)",
            top_fraction + bottom_fraction
        )));
    }
    for slot in vector.source_arch.layers() {
        let layer = &mut vector.delta[slot.range()];
        let n = layer.len();
        let n_top = (top_fraction * n as f64 + COUNT_SLACK).floor() as usize;
        let n_bottom = (bottom_fraction * n as f64 + COUNT_SLACK).floor() as usize;

        let top = first_k((0..n).collect(), n_top, by_magnitude_desc(layer));
        let mut masked = vec![false; n];
        for &i in &top {
            masked[i] = true;
        }
        let remaining: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
        for i in first_k(remaining, n_bottom, by_magnitude_asc(layer)) {
            masked[i] = true;
        }
        for (x, m) in layer.iter_mut().zip(masked) {
            if m {
                *x = T::zero();
            }
        }
    }
    Ok(vector)
}

/// Dispatches to the operator selected by `agg`.
pub fn resolve<T: Scalar>(agg: &Aggregator, vectors: Vec<TaskVector<T>>) -> Result<MultitaskVector<T>> {
    agg.validate()?;
    if vectors.is_empty() {
        return Err(AtmError::Empty("task vector list"));
    }
    let mut out = match agg.kind {
        AggregatorKind::Mean => aggregate_mean(vectors)?,
        AggregatorKind::SumTa => sum_aggregate(vectors)?,
        AggregatorKind::Ties => ties_aggregate(vectors, agg.ties_keep_fraction)?,
        AggregatorKind::DareThenMean => {
            let dropped = vectors
                .into_iter()
                .map(|v| {
                    let seed = derive_seed(agg.seed, &v.task_id, v.iteration as u64);
                    dare_transform(v, agg.dare_drop_prob, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_mean(dropped)?
        }
        AggregatorKind::BreadcrumbsThenMean => {
            let masked = vectors
                .into_iter()
                .map(|v| breadcrumbs_mask(v, agg.bc_top_fraction, agg.bc_bottom_fraction))
                .collect::<Result<Vec<_>>>()?;
            aggregate_mean(masked)?
        }
    };
    out.aggregator_name = agg.kind.name().into();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Activation, ArchSpec, ParamVector};

    /// Single-layer arch with exactly `n` parameters: [1 -> n/2].
    fn arch_with(n: usize) -> ArchSpec {
        assert!(n.is_multiple_of(2));
        ArchSpec::new(vec![1, n / 2], Activation::Relu).unwrap()
    }

    fn tv(id: &str, v: &[f64]) -> TaskVector<f64> {
        TaskVector::new(arch_with(v.len()), ParamVector::from_vec(v.to_vec()), id, 0).unwrap()
    }

    #[test]
    fn ties_hand_example() {
        let v1 = tv("t1", &[1.0, -2.0, 0.1, 0.0]);
        let v2 = tv("t2", &[-1.0, -1.0, 3.0, 0.0]);
        let out = ties_aggregate(vec![v1, v2], 0.5).unwrap();
        assert_eq!(out.delta.as_slice(), &[0.0, -2.0, 3.0, 0.0]);
    }

    #[test]
    fn ties_trivial_cases() {
        let v = tv("a", &[0.5, -0.25, 2.0, -3.0]);
        let single = ties_aggregate(vec![v.clone()], 1.0).unwrap();
        assert_eq!(single.delta.as_slice(), v.delta.as_slice());
        let mut w = v.clone();
        w.task_id = "b".into();
        let pair = ties_aggregate(vec![v.clone(), w], 1.0).unwrap();
        assert_eq!(pair.delta.as_slice(), v.delta.as_slice());
        assert!(ties_aggregate(Vec::<TaskVector<f64>>::new(), 0.5).is_err());
        assert!(ties_aggregate(vec![v], 0.0).is_err());
    }

    #[test]
    fn ties_keep_count_does_not_round_up_float_noise() {
        // 0.1 * 30 = 3.0000000000000004 in f64
        let values: Vec<f64> = (1..=30).map(f64::from).collect();
        let out = ties_aggregate(vec![tv("a", &values)], 0.1).unwrap();
        assert_eq!(out.delta.iter().filter(|&&x| x != 0.0).count(), 3);
    }

    #[test]
    fn dare_identity_and_errors() {
        let v = tv("a", &[0.5, -0.25, 2.0, -3.0]);
        let same = dare_transform(v.clone(), 0.0, 123).unwrap();
        assert_eq!(same.delta.as_slice(), v.delta.as_slice());
        assert!(dare_transform(v.clone(), 1.0, 0).is_err());
        assert!(dare_transform(v, -0.1, 0).is_err());
    }

    #[test]
    fn dare_matches_reference_trace() {
        let values = [1.0, -2.0, 3.0, -4.0, 0.5, -0.5, 0.25, 8.0];
        let out = dare_transform(tv("a", &values), 0.5, 42).unwrap();

        // Independent replay of the documented stream from the raw generator.
        let mut rng = rng_from_seed(42);
        let replay: Vec<f64> = values
            .iter()
            .map(|&x| {
                let u: f64 = rng.random();
                if u < 0.5 {
                    0.0
                } else {
                    x * 2.0
                }
            })
            .collect();
        assert_eq!(out.delta.as_slice(), replay.as_slice());

        // Frozen output of the stream for seed 42.
        let frozen = [2.0, -4.0, 0.0, -8.0, 0.0, 0.0, 0.0, 16.0];
        assert_eq!(out.delta.as_slice(), &frozen);
    }

    #[test]
    fn breadcrumbs_examples() {
        let v = tv("a", &[5.0, 0.01, 1.0, 2.0]);
        let same = breadcrumbs_mask(v.clone(), 0.0, 0.0).unwrap();
        assert_eq!(same.delta.as_slice(), v.delta.as_slice());
        let band = breadcrumbs_mask(v, 0.25, 0.25).unwrap();
        assert_eq!(band.delta.as_slice(), &[0.0, 0.0, 1.0, 2.0]);
        let flat = breadcrumbs_mask(tv("a", &[1.0, -1.0, 1.0, -1.0]), 0.25, 0.0).unwrap();
        assert_eq!(flat.delta.as_slice(), &[0.0, -1.0, 1.0, -1.0]);
        assert!(breadcrumbs_mask(tv("a", &[1.0, 2.0]), 0.5, 0.5).is_err());
    }

    #[test]
    fn breadcrumbs_is_per_layer() {
        // [1 -> 1 -> 1]: two layers of two parameters each.
        let arch = ArchSpec::new(vec![1, 1, 1], Activation::Relu).unwrap();
        let v = TaskVector::new(arch, ParamVector::from_vec(vec![10.0, 1.0, 3.0, 2.0]), "a", 0).unwrap();
        let out = breadcrumbs_mask(v, 0.5, 0.0).unwrap();
        assert_eq!(out.delta.as_slice(), &[0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn resolve_dispatch_identities() {
        let vs = vec![tv("b", &[0.5, -0.25, 2.0, -3.0]), tv("a", &[1.5, 0.75, -2.0, 1.0])];
        let mean = resolve(&Aggregator::mean(), vs.clone()).unwrap();
        assert_eq!(mean.aggregator_name, "mean");

        let mut dare = Aggregator::new(AggregatorKind::DareThenMean);
        dare.dare_drop_prob = 0.0;
        assert_eq!(resolve(&dare, vs.clone()).unwrap().delta, mean.delta);

        let mut bc = Aggregator::new(AggregatorKind::BreadcrumbsThenMean);
        bc.bc_top_fraction = 0.0;
        bc.bc_bottom_fraction = 0.0;
        assert_eq!(resolve(&bc, vs.clone()).unwrap().delta, mean.delta);

        let single = resolve(&Aggregator::mean(), vec![vs[0].clone()]).unwrap();
        assert_eq!(single.delta.as_slice(), vs[0].delta.as_slice());

        let sum = resolve(&Aggregator::new(AggregatorKind::SumTa), vs.clone()).unwrap();
        assert_eq!(sum.delta.as_slice(), &[2.0, 0.5, 0.0, -2.0]);
        assert!(resolve::<f64>(&Aggregator::mean(), vec![]).is_err());

        let mut bad = Aggregator::new(AggregatorKind::Ties);
        bad.ties_keep_fraction = 1.5;
        assert!(resolve(&bad, vs).is_err());
    }

    #[test]
    fn task_arithmetic_examples() {
        let arch = arch_with(2);
        let base = ModelState::new(arch.clone(), ParamVector::zeros(2), "base").unwrap();
        let out = merge_task_arithmetic(base.clone(), vec![tv("a", &[1.0, 0.0]), tv("b", &[0.0, 1.0])], 0.5).unwrap();
        assert_eq!(out.params().as_slice(), &[0.5, 0.5]);
        let zero = merge_task_arithmetic(base.clone(), vec![tv("a", &[1.0, 0.0])], 0.0).unwrap();
        assert_eq!(zero.params().as_slice(), base.params().as_slice());
        let one = merge_task_arithmetic(base.clone(), vec![tv("a", &[0.3, -0.1])], 1.0).unwrap();
        assert_eq!(one.params().as_slice(), &[0.3, -0.1]);
        assert!(merge_task_arithmetic(base, vec![], 1.0).is_err());
    }

    #[test]
    fn aggregator_json_defaults() {
        let agg: Aggregator = serde_json::from_str(r#"{"kind":"ties"}"#).unwrap();
        assert_eq!(agg.ties_keep_fraction, 0.2);
        assert_eq!(agg.dare_drop_prob, 0.9);
        assert_eq!(agg.bc_top_fraction, 0.01);
        assert_eq!(agg.bc_bottom_fraction, 0.85);
        agg.validate().unwrap();
    }
}
