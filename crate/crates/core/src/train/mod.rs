//! Learning-rate schedule, AdamW and the deterministic training loop.

pub mod augment;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_image, Split, Tile, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

pub use augment::{augment, AugmentConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub eval_interval: usize,
    #[serde(default = "default_power")]
    pub poly_power: f64,
    /// Split evaluated for the metrics log.
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Filled from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_power() -> f64 {
    1.0
}

fn default_eval_split() -> Split {
    Split::Val
}

impl TrainConfig {
    /// 15000 iterations, 1500 warmup, lr 6e-4, decay 0.01, batch 16, 512² crops.
    pub fn reference() -> Self {
        TrainConfig {
            total_iters: 15000,
            warmup_iters: 1500,
            base_lr: 6e-4,
            weight_decay: 0.01,
            batch_size: 16,
            crop: (512, 512),
            eval_interval: 1500,
            poly_power: 1.0,
            eval_split: Split::Val,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} must be below total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config("poly_power must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config(
                "batch_size, eval_interval and crop must be positive".into(),
            ));
        }
        self.augment.validate()
    }
}

/// Linear warmup from 0, then polynomial decay to 0 at `total_iters`.
pub fn poly_warmup_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.total_iters {
        return Err(Error::arg(
            "poly_warmup_lr",
            format!("iteration {t} beyond total {}", cfg.total_iters),
        ));
    }
    if t <= cfg.warmup_iters && cfg.warmup_iters > 0 {
        return Ok(cfg.base_lr * t as f64 / cfg.warmup_iters as f64);
    }
    Ok(cfg.base_lr * (1.0 - t as f64 / cfg.total_iters as f64).powf(cfg.poly_power))
}

/// Biases, norm parameters and position embeddings are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias")
        || name.ends_with("gamma")
        || name.ends_with("beta")
        || name == "pos_emb")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (n, t) in p.iter() {
                z.insert(n, Tensor::zeros(t.shape()));
            }
            z
        };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn first_moment(&self) -> &ParamStore {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamStore {
        &self.v
    }

    /// One bias-corrected step with decoupled decay `p ← p·(1 − lr·wd)`.
    /// Rejects non-finite gradients before touching anything.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::arg(
                "adamw_update",
                format!("negative learning rate {lr}"),
            ));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self
                .m
                .get_mut(name)
                .expect("moments mirror params")
                .data_mut();
            let v = self
                .v
                .get_mut(name)
                .expect("moments mirror params")
                .data_mut();
            let decay = if decays(name) {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Stream seed for one (iteration, batch slot) pair.
pub fn sample_seed(seed: u64, iter: usize, slot: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ iter as u64) ^ slot as u64)
}

/// Stack equally sized `(3, h, w)` images into `(batch, 3, h, w)`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::arg("stack", "empty batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}

/// Confusion matrix of `model` over `tiles`, one tile per forward pass.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore,
    tiles: &[Tile],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.decoder.num_classes);
    for tile in tiles {
        let x = stack(std::slice::from_ref(&tile.image))?;
        let pred = model.predict(params, &x)?;
        cm.accumulate(&pred, &tile.label, IGNORE_LABEL)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
}

pub fn metrics_header(num_classes: usize) -> String {
    let mut h = "iter,lr,loss,miou".to_string();
    for c in 0..num_classes {
        write!(h, ",iou_class_{c}").expect("write to string");
    }
    h
}

impl MetricsRow {
    /// Absent classes print as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.6},{:.6}",
            self.iter, self.lr, self.loss, self.miou
        );
        for v in &self.iou {
            match v {
                Some(v) => write!(s, ",{v:.6}"),
                None => write!(s, ",nan"),
            }
            .expect("write to string");
        }
        s
    }
}

pub fn metrics_csv(num_classes: usize, rows: &[MetricsRow]) -> String {
    let mut out = metrics_header(num_classes);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Inputs of one training run.
pub struct TrainJob<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    /// Unnormalized [0, 1] training tiles; augmentation runs on these.
    pub train_tiles: &'a [Tile],
    /// Per-channel normalization applied after augmentation.
    pub normalize: Option<([f64; 3], [f64; 3])>,
    /// Normalized tiles evaluated for the metrics log.
    pub eval_tiles: &'a [Tile],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub rows: Vec<MetricsRow>,
    pub csv: String,
}

/// Forward, loss and gradients of one batch.
pub fn loss_and_grads(
    model: &ModelConfig,
    params: &ParamStore,
    images: Tensor,
    labels: &[u8],
) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(images);
    let logits = model.forward(&mut tape, &bound, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels, IGNORE_LABEL)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect_grads(&tape, grads)))
}

/// Run the schedule. `progress` receives `(iter, lr, loss)` after every step.
pub fn train_loop(
    job: &TrainJob,
    progress: &mut dyn FnMut(usize, f64, f64),
) -> Result<TrainOutcome> {
    let cfg = job.train;
    cfg.validate()?;
    job.model.validate()?;
    if job.train_tiles.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = job.model.init(&mut init_rng)?;
    let mut opt = AdamW::new(&params);
    let mut rows = Vec::new();
    let n = job.train_tiles.len();
    for t in 1..=cfg.total_iters {
        let lr = poly_warmup_lr(t, cfg)?;
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::new();
        for slot in 0..cfg.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, t, slot));
            let tile = &job.train_tiles[rng.random_range(0..n)];
            let (mut img, lab) =
                augment(&tile.image, &tile.label, &cfg.augment, cfg.crop, &mut rng)?;
            if let Some((mean, std)) = job.normalize {
                normalize_image(&mut img, mean, std);
            }
            images.push(img);
            labels.extend(lab);
        }
        let (loss, grads) = loss_and_grads(job.model, &params, stack(&images)?, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {t} (lr {lr:e})"
            )));
        }
        opt.update(&mut params, &grads, lr, cfg.weight_decay)
            .map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} at iteration {t} (lr {lr:e})"))
                }
                e => e,
            })?;
        progress(t, lr, loss);
        if t % cfg.eval_interval == 0 || t == cfg.total_iters {
            let cm = evaluate(job.model, &params, job.eval_tiles)?;
            rows.push(MetricsRow {
                iter: t,
                lr,
                loss,
                miou: cm.miou().unwrap_or(0.0),
                iou: cm.iou_per_class(),
            });
        }
    }
    let csv = metrics_csv(job.model.decoder.num_classes, &rows);
    Ok(TrainOutcome { params, rows, csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(pairs: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in pairs {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn schedule_hits_recipe_values() {
        let cfg = TrainConfig::reference();
        assert_eq!(poly_warmup_lr(1500, &cfg).unwrap(), 0.0006);
        assert_eq!(poly_warmup_lr(7500, &cfg).unwrap(), 0.0003);
        assert_eq!(poly_warmup_lr(15000, &cfg).unwrap(), 0.0);
        assert_eq!(poly_warmup_lr(0, &cfg).unwrap(), 0.0);
        assert_eq!(poly_warmup_lr(750, &cfg).unwrap(), 0.0003);
        assert!(poly_warmup_lr(15001, &cfg).is_err());
    }

    #[test]
    fn junction_jump_is_base_times_warmup_share() {
        let cfg = TrainConfig::reference();
        let at = poly_warmup_lr(1500, &cfg).unwrap();
        let poly_branch = cfg.base_lr * (1.0 - 1500.0 / 15000.0);
        let after = poly_warmup_lr(1501, &cfg).unwrap();
        assert!((at - poly_branch - cfg.base_lr * 1500.0 / 15000.0).abs() < 1e-18);
        assert!(after < poly_branch && poly_branch - after < 1e-7);
    }

    #[test]
    fn fractional_power_applies_to_the_remaining_share() {
        let cfg = TrainConfig {
            poly_power: 0.9,
            ..TrainConfig::reference()
        };
        let lr = poly_warmup_lr(14000, &cfg).unwrap();
        assert!((lr - 0.0006 * (1.0f64 / 15.0).powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::reference();
        cfg.validate().unwrap();
        cfg.warmup_iters = cfg.total_iters;
        assert!(cfg.validate().is_err());
        let zero = TrainConfig {
            total_iters: 0,
            ..TrainConfig::reference()
        };
        zero.validate().unwrap();
        let bad_lr = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::reference()
        };
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays("encoder.stage1.block1.up_main"));
        assert!(decays("decoder.classifier.weight"));
        for n in [
            "pos_emb",
            "stem.bias",
            "encoder.stage1.block1.ln.gamma",
            "encoder.stage1.block1.ln.beta",
        ] {
            assert!(!decays(n), "{n}");
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let w = Tensor::new([3], vec![0.3, -1.2, 4.0]).unwrap();
        let mut p = store(&[("w", w.clone())]);
        let g = store(&[("w", Tensor::zeros([3]))]);
        let mut opt = AdamW::new(&p);
        for _ in 0..5 {
            opt.update(&mut p, &g, 1e-2, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap(), &w);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[("w", Tensor::ones([2]))]);
        let g = store(&[("w", Tensor::ones([2]))]);
        let mut opt = AdamW::new(&p);
        opt.update(&mut p, &g, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!(p
            .get("w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - expected).abs() < 1e-15));
        let m = opt.first_moment().get("w").unwrap().data();
        assert!(m.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn decay_is_multiplicative_and_skips_biases() {
        let mut p = store(&[("w", Tensor::ones([1])), ("w.bias", Tensor::ones([1]))]);
        let g = store(&[("w", Tensor::zeros([1])), ("w.bias", Tensor::zeros([1]))]);
        AdamW::new(&p).update(&mut p, &g, 0.5, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.95]);
        assert_eq!(p.get("w.bias").unwrap().data(), &[1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(&[("w", Tensor::ones([1]))]);
        let mut opt = AdamW::new(&p);
        for _ in 0..100 {
            let w = p.get("w").unwrap().data()[0];
            let g = store(&[("w", Tensor::full([1], 2.0 * w))]);
            opt.update(&mut p, &g, 0.1, 0.0).unwrap();
        }
        assert!(p.get("w").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[("a", Tensor::ones([1])), ("b", Tensor::ones([2]))]);
        let g = store(&[
            ("a", Tensor::ones([1])),
            ("b", Tensor::new([2], vec![0.0, f64::NAN]).unwrap()),
        ]);
        let before = p.clone();
        let err = AdamW::new(&p).update(&mut p, &g, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        assert_eq!(p.get("a"), before.get("a"));
    }

    #[test]
    fn sample_seeds_differ_by_iteration_and_slot() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..50 {
            for s in 0..8 {
                assert!(seen.insert(sample_seed(3, t, s)));
            }
        }
        assert_eq!(sample_seed(3, 7, 2), sample_seed(3, 7, 2));
        assert_ne!(sample_seed(3, 7, 2), sample_seed(4, 7, 2));
    }

    #[test]
    fn metrics_rows_format() {
        let row = MetricsRow {
            iter: 10,
            lr: 3e-4,
            loss: 0.5,
            miou: 0.75,
            iou: vec![Some(1.0), None, Some(0.5)],
        };
        assert_eq!(
            metrics_header(3),
            "iter,lr,loss,miou,iou_class_0,iou_class_1,iou_class_2"
        );
        assert_eq!(
            row.to_csv(),
            "10,0.000300,0.500000,0.750000,1.000000,nan,0.500000"
        );
        assert_eq!(metrics_csv(3, &[]), format!("{}\n", metrics_header(3)));
    }
}
