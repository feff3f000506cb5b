//! Finite-difference check of every parameter of the tiny model, then the
//! same check with a deliberately wrong backward rule.

use seglstm::check::{model_gradcheck, ModelCheckOptions, MODEL_TOLERANCE};
use seglstm::model::ModelConfig;

fn main() -> seglstm::Result<()> {
    let model = ModelConfig::tiny();
    let sampled = ModelCheckOptions {
        max_probes: Some(8),
        ..ModelCheckOptions::tiny()
    };

    let exact = model_gradcheck(&model, &sampled)?;
    for (name, probe) in exact.groups.iter().take(6) {
        println!("{name:<40} {:.2e}", probe.rel_error);
    }
    println!(
        "... {} probes, max {:.2e}, passed {}",
        exact.probes,
        exact.max_rel_error,
        exact.passed(MODEL_TOLERANCE)
    );

    let broken = ModelCheckOptions {
        corrupt_backward: Some(1.01),
        ..sampled
    };
    let bad = model_gradcheck(&model, &broken)?;
    println!(
        "1% skewed backward: max {:.2e}, passed {}",
        bad.max_rel_error,
        bad.passed(MODEL_TOLERANCE)
    );
    Ok(())
}
