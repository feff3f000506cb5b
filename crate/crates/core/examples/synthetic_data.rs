//! Generate a small synthetic segmentation dataset and read it back.

use seglstm::data::{generate_synthetic, Dataset, Split, SyntheticSpec};

fn main() -> seglstm::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec::new(6, 32, 4, 11);
    let meta = generate_synthetic(&spec, dir.path())?;
    println!(
        "classes {:?}, ignore label {}",
        meta.class_names, meta.ignore_label
    );

    let ds = Dataset::open(dir.path())?;
    for split in [Split::Train, Split::Val] {
        let tiles = ds.load_split(split)?;
        let mut counts = vec![0usize; meta.class_names.len()];
        for t in &tiles {
            for &l in &t.label {
                if let Some(c) = counts.get_mut(l as usize) {
                    *c += 1;
                }
            }
        }
        println!(
            "{split:?}: {} tiles, pixels per class {counts:?}",
            tiles.len()
        );
    }
    Ok(())
}
