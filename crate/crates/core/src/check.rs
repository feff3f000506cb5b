//! Finite-difference verification of the whole model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::IGNORE_LABEL;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::{Bound, ParamStore};
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions, Probe};
use crate::tensor::{Function, Tensor};

/// Step for whole-model checks. Loss roundoff, not truncation, dominates at
/// this depth, so it is larger than the per-op default.
pub const MODEL_STEP: f64 = 1e-4;

pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ModelGradcheck {
    /// Worst probe per parameter tensor, in parameter order.
    pub groups: Vec<(String, Probe)>,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl ModelGradcheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// The initialization with biases and norm parameters jittered and the
/// classifier redrawn at unit fan-in scale, so that no gradient is
/// vanishingly small at the checked point.
pub fn check_point(model: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.init(&mut rng)?;
    let jitter = Normal::new(0.0, 0.1).expect("valid std");
    for (name, t) in params.iter_mut() {
        if name.ends_with("classifier.weight") {
            let fan: usize = t.shape()[1..].iter().product();
            *t = Tensor::randn(t.shape(), (1.0 / fan as f64).sqrt(), &mut rng);
        } else if name.ends_with("bias") || name.ends_with("gamma") || name.ends_with("beta") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += jitter.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Identity whose backward scales the gradient, for negative controls.
struct SkewedIdentity(f64);

impl Function for SkewedIdentity {
    fn name(&self) -> &str {
        "skewed_identity"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

pub struct ModelCheckOptions {
    pub batch: usize,
    pub size: (usize, usize),
    pub seed: u64,
    /// Multiply the logits' backward rule by this factor (1 = exact).
    pub corrupt_backward: Option<f64>,
    pub max_probes: Option<usize>,
}

impl ModelCheckOptions {
    /// Two 16×16 images, every parameter entry probed.
    pub fn tiny() -> Self {
        ModelCheckOptions {
            batch: 2,
            size: (16, 16),
            seed: 0,
            corrupt_backward: None,
            max_probes: None,
        }
    }
}

/// Cross-entropy of random images against random labels (with some ignored
/// pixels), checked for every parameter tensor.
pub fn model_gradcheck(model: &ModelConfig, opts: &ModelCheckOptions) -> Result<ModelGradcheck> {
    let params = check_point(model, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (h, w) = opts.size;
    let images = Tensor::uniform(
        [opts.batch, model.encoder.in_channels, h, w],
        0.0,
        1.0,
        &mut rng,
    );
    let k = model.decoder.num_classes as u64;
    let labels: Vec<u8> = (0..opts.batch * h * w)
        .map(|_| {
            let r = rand::Rng::random_range(&mut rng, 0..k * 10);
            if r < k {
                IGNORE_LABEL
            } else {
                (r % k) as u8
            }
        })
        .collect();
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().map(String::as_str), vars);
            let x = tape.constant(images.clone());
            let mut logits = model.forward(tape, &bound, x)?;
            if let Some(f) = opts.corrupt_backward {
                let value = tape.value(logits).clone();
                logits = tape.custom(&[logits], value, Box::new(SkewedIdentity(f)));
            }
            tape.softmax_cross_entropy(logits, &labels, IGNORE_LABEL)
        },
        GradcheckOptions {
            step: MODEL_STEP,
            max_probes: opts.max_probes,
        },
    )?;
    Ok(ModelGradcheck {
        groups: names.into_iter().zip(report.worst).collect(),
        max_rel_error: report.max_rel_error,
        probes: report.probes,
    })
}
