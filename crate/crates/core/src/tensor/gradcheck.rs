//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step used throughout the test suite.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Probe at most this many evenly spaced entries per input.
    pub max_probes: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            max_probes: None,
        }
    }
}

/// One compared entry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// The entry behind each `per_input` value.
    pub worst: Vec<Probe>,
    pub probes: usize,
}

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compare reverse-mode gradients of the scalar produced by `build` against
/// central differences, for every input.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalar(tape.value(out).shape().to_vec()));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worsts = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let picks: Vec<usize> = match opts.max_probes {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = Probe::default();
        for j in picks {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = evaluate(&work, &build)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = evaluate(&work, &build)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let e = relative_error(a, numeric);
            if e > worst.rel_error || j == 0 {
                worst = Probe {
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: e,
                };
            }
            probes += 1;
        }
        per_input.push(worst.rel_error);
        worsts.push(worst);
    }
    Ok(GradcheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        worst: worsts,
        probes,
    })
}
