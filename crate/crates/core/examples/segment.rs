//! Forward a batch through an untrained tiny model and score its argmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seglstm::metrics::ConfusionMatrix;
use seglstm::model::ModelConfig;
use seglstm::Tensor;

fn main() -> seglstm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ModelConfig::tiny();
    let params = model.init(&mut rng)?;
    let images = Tensor::uniform([2, 3, 16, 16], 0.0, 1.0, &mut rng);

    let logits = model.logits(&params, &images)?;
    println!(
        "logits {:?}, finite: {}",
        logits.shape(),
        logits.is_finite()
    );

    let pred = model.predict(&params, &images)?;
    let truth: Vec<u8> = (0..pred.len()).map(|i| (i / 16 % 3) as u8).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth, 255)?;
    println!("chance-level mIoU {:.3}", cm.miou()?);
    Ok(())
}
