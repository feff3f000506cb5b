//! Parameter table for the full-size model and both depth layouts.

use seglstm::model::ModelConfig;

fn main() -> seglstm::Result<()> {
    let model = ModelConfig::reference();
    print!("{}", seglstm::cli::params_report(&model)?);

    let mut deep = model.clone();
    deep.encoder.depths = [4, 4, 12, 4];
    let (a, b) = (model.count_parameters()?, deep.count_parameters()?);
    println!(
        "\nencoder 6-6-6-6: {}, 4-4-12-4: {}",
        a.encoder(),
        b.encoder()
    );
    Ok(())
}
