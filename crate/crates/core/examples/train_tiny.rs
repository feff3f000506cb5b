//! A short training run of the tiny model on synthetic tiles.

use seglstm::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use seglstm::model::ModelConfig;
use seglstm::train::{train_loop, AugmentConfig, TrainConfig, TrainJob};

fn main() -> seglstm::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut spec = SyntheticSpec::new(4, 16, 3, 2);
    spec.train_fraction = 1.0;
    let meta = generate_synthetic(&spec, dir.path())?;
    let ds = Dataset::open(dir.path())?;
    let raw = ds.load_split_raw(Split::Train)?;
    let eval = ds.load_split(Split::Train)?;

    let mut model = ModelConfig::tiny();
    model.encoder.embed_dim = 16;
    let train = TrainConfig {
        total_iters: 300,
        warmup_iters: 30,
        base_lr: 3e-3,
        batch_size: 2,
        crop: (16, 16),
        eval_interval: 100,
        augment: AugmentConfig::none(),
        ..TrainConfig::reference()
    };
    let job = TrainJob {
        model: &model,
        train: &train,
        train_tiles: &raw,
        normalize: meta.normalization(),
        eval_tiles: &eval,
    };
    let out = train_loop(&job, &mut |iter, lr, loss| {
        if iter % 50 == 0 {
            println!("iter {iter:>3} lr {lr:.2e} loss {loss:.4}");
        }
    })?;
    print!("{}", out.csv);
    Ok(())
}
