//! Apply the training augmentations to one synthetic tile under a few seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seglstm::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use seglstm::train::{augment, AugmentConfig};

fn main() -> seglstm::Result<()> {
    let dir = tempfile::tempdir()?;
    generate_synthetic(&SyntheticSpec::new(2, 48, 3, 5), dir.path())?;
    let ds = Dataset::open(dir.path())?;
    let tile = ds.load_split_raw(Split::Train)?.remove(0);
    let cfg = AugmentConfig::default();

    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, label) = augment(&tile.image, &tile.label, &cfg, (32, 32), &mut rng)?;
        let padded = label.iter().filter(|&&l| l == 255).count();
        let mean = img.sum() / img.numel() as f64;
        println!(
            "seed {seed}: image {:?}, mean intensity {mean:.3}, {padded} padded pixels",
            img.shape()
        );
    }
    Ok(())
}
