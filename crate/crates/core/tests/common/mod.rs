//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::Rng;

pub const IGNORE: u8 = 255;

/// Random `n`-pixel prediction and truth over `classes`, with about 10% of
/// truth pixels ignored.
pub fn random_pair<R: Rng>(rng: &mut R, n: usize, classes: u8) -> (Vec<u8>, Vec<u8>) {
    let pred = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let truth = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    (pred, truth)
}

/// Per-class IoU by direct per-pixel counting over several image pairs.
pub fn brute_force_iou(pairs: &[(Vec<u8>, Vec<u8>)], classes: u8) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (pred, truth) in pairs {
                for (&p, &t) in pred.iter().zip(truth) {
                    if t == IGNORE {
                        continue;
                    }
                    match (p == c, t == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

pub fn brute_force_miou(pairs: &[(Vec<u8>, Vec<u8>)], classes: u8) -> f64 {
    let present: Vec<f64> = brute_force_iou(pairs, classes)
        .into_iter()
        .flatten()
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}
