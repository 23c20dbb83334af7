//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Perturbation is `step · max(1, |θ|)`, used in a five-point central
    /// stencil (truncation error O(step⁴)). If it moves the input across
    /// a kink (see [`Graph::branch_signature`]), the step is retried at
    /// 1/10 and 1/100 before the element is skipped.
    pub step: f64,
    pub tolerance: f64,
    /// Differences are divided by `max(|analytic|, |numeric|, abs_floor)`,
    /// so entries far below the floor are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many elements per input (chosen by `seed`);
    /// `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            tolerance: 1e-6,
            abs_floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Elements whose every trial step crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

/// The worst offending element of a failed check.
#[derive(Clone, Debug)]
pub struct GradcheckFailure {
    pub report: GradReport,
    pub tolerance: f64,
}

impl fmt::Display for GradcheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self
            .report
            .inputs
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("failure has at least one input");
        write!(
            f,
            "gradcheck {}: input {} element {}: analytic {:e} vs numeric {:e} (rel err {:e} > {:e})",
            self.report.op,
            worst.input,
            worst.worst_index,
            worst.analytic,
            worst.numeric,
            worst.max_rel_err,
            self.tolerance
        )
    }
}

impl std::error::Error for GradcheckFailure {}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).item()?, g.branch_signature()))
}

const STEP_SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// Analytic gradients of the scalar built by `f` for every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    g.backward(out)?;
    Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
}

/// Compares the backward pass of `f` against central differences.
///
/// `f` receives one graph variable per input and must return a scalar.
/// The outer `Result` carries errors raised by `f` itself; the inner one
/// carries a tolerance failure.
pub fn gradcheck<F>(
    op: &str,
    f: F,
    inputs: &[Tensor],
    cfg: &GradcheckConfig,
) -> Result<std::result::Result<GradReport, GradcheckFailure>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(&f, inputs)?;
    let (_, base_sig) = evaluate(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let numel = inputs[i].numel();
        let indices: Vec<usize> = match cfg.max_elements {
            Some(m) if m < numel => {
                let mut v = sample(&mut rng, numel, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let mut report = InputReport {
            input: i,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let orig = inputs[i].data()[idx];
            let mut numeric = None;
            for shrink in STEP_SHRINK {
                let h = cfg.step * shrink * orig.abs().max(1.0);
                let mut vals = [0.0; 4];
                let mut smooth = true;
                for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                    probe[i].data_mut()[idx] = orig + offset * h;
                    let (v, sig) = evaluate(&f, &probe)?;
                    vals[slot] = v;
                    if sig != base_sig {
                        smooth = false;
                        break;
                    }
                }
                probe[i].data_mut()[idx] = orig;
                if smooth {
                    numeric = Some((8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            report.checked += 1;
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    let report = GradReport {
        op: op.to_string(),
        inputs: reports,
    };
    if report.max_rel_err() > cfg.tolerance {
        Ok(Err(GradcheckFailure {
            report,
            tolerance: cfg.tolerance,
        }))
    } else {
        Ok(Ok(report))
    }
}

/// Reduces any tensor to a scalar by a fixed random linear functional,
/// so every output element contributes a distinct weight to the check.
pub fn random_projection<R: Rng + ?Sized>(g: &mut Graph, x: Var, rng: &mut R) -> Result<Var> {
    let n = g.value(x).numel();
    let flat = g.reshape(x, &[1, n])?;
    let w = g.constant(Tensor::uniform([n, 1], 1.0, rng));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.affine(flat, w, b)?;
    Ok(g.sum(y))
}
