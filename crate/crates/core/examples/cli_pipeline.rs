//! The command-line workflow driven in-process: write data, print the
//! parameter table, train briefly and evaluate the checkpoint.

use std::fs;

fn run(args: &[&str]) -> i32 {
    let argv = std::iter::once("seglstm").chain(args.iter().copied());
    seglstm::cli::run(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn main() -> seglstm::Result<()> {
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let config = dir.path().join("run.json");
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"num_tiles": 4, "tile_size": 16, "num_classes": 3, "seed": 1}"#,
    )?;
    fs::write(
        &config,
        format!(
            r#"{{
  "model": {{"embed_dim": 8, "depths": [1, 1, 1, 1], "patch_size": 8, "decoder_channels": 16, "num_classes": 3}},
  "train": {{"total_iters": 10, "warmup_iters": 2, "base_lr": 0.003, "weight_decay": 0.01,
            "batch_size": 2, "crop": [16, 16], "eval_interval": 5}},
  "data": {{"manifest": {:?}}},
  "output": {:?},
  "seed": 1
}}"#,
            data, out
        ),
    )?;
    let cfg = config.to_str().unwrap();
    let ckpt = out.join("checkpoint.bin");

    let steps: [&[&str]; 4] = [
        &[
            "gen-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        &["params", "--config", cfg],
        &["train", "--config", cfg],
        &[
            "eval",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "val",
        ],
    ];
    for args in steps {
        println!("$ seglstm {}", args.join(" "));
        let code = run(args);
        if code != 0 {
            eprintln!("exit {code}");
            std::process::exit(code);
        }
    }
    Ok(())
}
