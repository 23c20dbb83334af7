//! Fixed age thresholds, k-dimensional ranking labels and the
//! error-compressing ranking (ECR) loss, plus the L1 and per-age
//! cross-entropy baselines and the MAE metric.
//!
//! For an age range `a_min..=a_max` there are `K = a_max - a_min + 1`
//! thresholds `b_k = a_min - 0.5 + (k - 1)`, one half-year below each
//! integer age. The label of an age has `y_k = 1` exactly when
//! `age > b_k`, so it is a prefix of ones of length `age - a_min + 1` and
//! even the starting age carries one active bit. The network regresses a
//! single value `h`; the loss is the binary cross-entropy of
//! `σ(h - b_k)` against every `y_k`, and the prediction is `h` itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalPoints {
    a_min: i32,
    a_max: i32,
    thresholds: Vec<f64>,
}

impl IntervalPoints {
    pub fn new(a_min: i32, a_max: i32) -> Result<Self> {
        if a_min >= a_max {
            return Err(Error::invalid(format!(
                "age range needs a_min < a_max, got {a_min}..{a_max}"
            )));
        }
        let thresholds = (a_min..=a_max).map(|a| f64::from(a) - 0.5).collect();
        Ok(IntervalPoints {
            a_min,
            a_max,
            thresholds,
        })
    }

    /// Arbitrary strictly increasing thresholds, one per category starting
    /// at `a_min`. Used for single-threshold and shifted variants.
    pub fn from_thresholds(a_min: i32, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("thresholds must be non-empty and strictly increasing"));
        }
        if thresholds.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("thresholds must be finite"));
        }
        Ok(IntervalPoints {
            a_min,
            a_max: a_min + thresholds.len() as i32 - 1,
            thresholds,
        })
    }

    /// The same categories with every threshold moved by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        IntervalPoints {
            thresholds: self.thresholds.iter().map(|b| b + offset).collect(),
            ..self.clone()
        }
    }

    pub fn a_min(&self) -> i32 {
        self.a_min
    }

    pub fn a_max(&self) -> i32 {
        self.a_max
    }

    /// Number of age categories `K`.
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn contains(&self, age: i32) -> bool {
        (self.a_min..=self.a_max).contains(&age)
    }
}

/// Shorthand for [`IntervalPoints::new`].
pub fn make_interval_points(a_min: i32, a_max: i32) -> Result<IntervalPoints> {
    IntervalPoints::new(a_min, a_max)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingLabel {
    pub age: i32,
    pub bits: Vec<u8>,
}

impl RankingLabel {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True when the bits are a (possibly empty) run of ones followed by zeros.
    pub fn is_prefix_of_ones(&self) -> bool {
        self.bits.windows(2).all(|w| w[0] >= w[1])
    }
}

pub fn encode_ranking_label(age: i32, points: &IntervalPoints) -> Result<RankingLabel> {
    if !points.contains(age) {
        return Err(Error::invalid(format!(
            "age {age} outside {}..={}",
            points.a_min, points.a_max
        )));
    }
    let bits = points
        .thresholds
        .iter()
        .map(|&b| u8::from(f64::from(age) > b))
        .collect();
    Ok(RankingLabel { age, bits })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    #[serde(rename = "ecr")]
    Ecr,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "ce")]
    MulticlassCe,
}

impl LossKind {
    /// Width of the regression head this loss expects.
    pub fn output_dim(self, points: &IntervalPoints) -> usize {
        match self {
            LossKind::Ecr | LossKind::L1 => 1,
            LossKind::MulticlassCe => points.len(),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecr" => Ok(LossKind::Ecr),
            "l1" => Ok(LossKind::L1),
            "ce" => Ok(LossKind::MulticlassCe),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected ecr, l1 or ce)"))),
        }
    }
}

fn check_labels(labels: &[RankingLabel], points: &IntervalPoints) -> Result<()> {
    if let Some(bad) = labels.iter().find(|l| l.bits.len() != points.len()) {
        return Err(Error::shape(
            "ecr_loss",
            format!("label for age {} has {} bits, points have K = {}", bad.age, bad.bits.len(), points.len()),
        ));
    }
    Ok(())
}

/// ECR loss of the N regression outputs in `h` on the tape.
pub fn ecr_loss(
    g: &mut Graph,
    h: Var,
    labels: &[RankingLabel],
    points: &IntervalPoints,
    reduction: Reduction,
) -> Result<Var> {
    check_labels(labels, points)?;
    let n = g.value(h).numel();
    if n != labels.len() {
        return Err(Error::shape("ecr_loss", format!("{n} outputs for {} labels", labels.len())));
    }
    let targets: Vec<f64> = labels
        .iter()
        .flat_map(|l| l.bits.iter().map(|&b| f64::from(b)))
        .collect();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    };
    g.threshold_xent(h, &points.thresholds, &targets, scale)
}

/// Single-sample ECR loss and its derivative with respect to `h`.
pub fn ecr_value_and_grad(h: f64, label: &RankingLabel, points: &IntervalPoints) -> Result<(f64, f64)> {
    check_labels(std::slice::from_ref(label), points)?;
    let mut value = 0.0;
    let mut grad = 0.0;
    for (&b, &y) in points.thresholds.iter().zip(&label.bits) {
        let z = h - b;
        let y = f64::from(y);
        value += y * softplus(-z) + (1.0 - y) * softplus(z);
        grad += sigmoid(z) - y;
    }
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Minimizer {
    pub h: f64,
    pub loss: f64,
    /// The grid minimum sat on an end of the search interval, so the true
    /// minimizer may lie outside it (or not exist).
    pub boundary_hit: bool,
}

/// Brute-force minimizer of the single-sample ECR loss over
/// `[a_min - 5, a_max + 5]`: a grid at step 1e-3, then ternary search
/// around the best grid point.
pub fn ecr_minimizer_oracle(label: &RankingLabel, points: &IntervalPoints) -> Result<Minimizer> {
    const STEP: f64 = 1e-3;
    check_labels(std::slice::from_ref(label), points)?;
    let loss = |h: f64| ecr_value_and_grad(h, label, points).map(|(v, _)| v);
    let lo = f64::from(points.a_min) - 5.0;
    let hi = f64::from(points.a_max) + 5.0;
    let steps = ((hi - lo) / STEP).round() as usize;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..=steps {
        let v = loss(lo + i as f64 * STEP)?;
        if v < best.1 {
            best = (i, v);
        }
    }
    let boundary_hit = best.0 == 0 || best.0 == steps;
    let centre = lo + best.0 as f64 * STEP;
    let (mut a, mut b) = ((centre - STEP).max(lo), (centre + STEP).min(hi));
    while b - a > 1e-10 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if loss(m1)? <= loss(m2)? {
            b = m2;
        } else {
            a = m1;
        }
    }
    let h = 0.5 * (a + b);
    Ok(Minimizer {
        h,
        loss: loss(h)?,
        boundary_hit,
    })
}

/// The predicted age is the regression output itself, unrounded and unclamped.
pub fn decode_age(h: f64) -> f64 {
    h
}

/// Mean absolute error between predicted and true ages.
pub fn mae(pred: &[f64], truth: &[i32]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("mae of an empty set"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("mae", format!("{} predictions, {} ages", pred.len(), truth.len())));
    }
    let total: f64 = pred.iter().zip(truth).map(|(p, &t)| (p - f64::from(t)).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// The training loss for `kind` on the head output.
///
/// ECR and L1 expect one value per sample; the cross-entropy baseline
/// expects K logits per sample and targets class `age - a_min`.
pub fn baseline_loss(
    g: &mut Graph,
    kind: LossKind,
    output: Var,
    ages: &[i32],
    points: &IntervalPoints,
    reduction: Reduction,
) -> Result<Var> {
    let shape = g.value(output).shape().to_vec();
    let n = ages.len();
    let expect = kind.output_dim(points);
    let fits = match shape.as_slice() {
        [m] => *m == n && expect == 1,
        [m, d] => *m == n && *d == expect,
        _ => false,
    };
    if !fits {
        return Err(Error::shape(
            "baseline_loss",
            format!("{kind:?} needs {n}×{expect} head output, got {shape:?}"),
        ));
    }
    if let Some(bad) = ages.iter().find(|&&a| !points.contains(a)) {
        return Err(Error::invalid(format!(
            "age {bad} outside {}..={}",
            points.a_min, points.a_max
        )));
    }
    let raw = match kind {
        LossKind::Ecr => {
            let labels = ages
                .iter()
                .map(|&a| encode_ranking_label(a, points))
                .collect::<Result<Vec<_>>>()?;
            return ecr_loss(g, output, &labels, points, reduction);
        }
        LossKind::L1 => {
            let targets: Vec<f64> = ages.iter().map(|&a| f64::from(a)).collect();
            g.abs_error(output, &targets)?
        }
        LossKind::MulticlassCe => {
            let classes: Vec<usize> = ages.iter().map(|&a| (a - points.a_min) as usize).collect();
            g.softmax_xent(output, &classes)?
        }
    };
    Ok(match reduction {
        Reduction::Sum => raw,
        Reduction::Mean => g.scale(raw, 1.0 / n.max(1) as f64),
    })
}

/// Ages predicted from a head output of `n` rows.
///
/// The cross-entropy head predicts the expectation of the class
/// distribution; the other heads predict their regression value.
pub fn predict_ages(kind: LossKind, output: &[f64], points: &IntervalPoints) -> Vec<f64> {
    match kind {
        LossKind::Ecr | LossKind::L1 => output.iter().map(|&h| decode_age(h)).collect(),
        LossKind::MulticlassCe => output
            .chunks_exact(points.len())
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                weights
                    .iter()
                    .zip(points.a_min..)
                    .map(|(w, a)| w * f64::from(a))
                    .sum::<f64>()
                    / total
            })
            .collect(),
    }
}
