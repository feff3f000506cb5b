//! The `seglstm` command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including bad
//! arguments), 3 for runtime failures such as divergence or a failed check.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::check::{model_gradcheck, ModelCheckOptions, MODEL_TOLERANCE};
use crate::config::{DataSection, RunConfig};
use crate::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use crate::decoder::{HeadKind, Resample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{checkpoint, Tensor};
use crate::train::{evaluate, train_loop, TrainJob};
use crate::xlstm::{mlstm_scan, ForgetGate, MLstmConfig, MLstmParams, ScanDirection};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Published total for the 6-class UperNet configuration, in millions.
pub const REFERENCE_PARAMS_M: f64 = 51.80;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(name = "seglstm", version, about = "Vision-LSTM semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CheckSize {
    Tiny,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tile dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config; writes the checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-class IoU and mIoU of a checkpoint on one split, as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the checkpoint in the config's output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Parameter count per component.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every model parameter.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        size: CheckSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the logits' backward rule (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
        #[arg(long, hide = true)]
        max_probes: Option<usize>,
    },
    /// Median wall time of the mLSTM scan per sequence length, as CSV.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (including the program name) and run, writing results to
/// `out` and progress and errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData { spec, out: dir } => {
            let text = fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec.display())))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            gen_data(&spec, &dir, out)?;
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            train(&cfg, out, err)?;
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let cfg = RunConfig::load(&config)?;
            let split: Split = split.parse()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
            let report = eval(&cfg, &ckpt, split)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            out.write_all(params_report(&cfg.model()?)?.as_bytes())?;
        }
        Command::Gradcheck {
            size: CheckSize::Tiny,
            seed,
            corrupt_backward,
            max_probes,
        } => {
            let opts = ModelCheckOptions {
                seed,
                corrupt_backward,
                max_probes,
                ..ModelCheckOptions::tiny()
            };
            return gradcheck(&ModelConfig::tiny(), &opts, out, err);
        }
        Command::BenchScan {
            lengths,
            dim,
            runs,
            seed,
        } => {
            out.write_all(bench_scan(&lengths, dim, runs, seed)?.as_bytes())?;
        }
    }
    Ok(0)
}

fn gen_data(spec: &SyntheticSpec, dir: &std::path::Path, out: &mut dyn Write) -> Result<()> {
    let meta = generate_synthetic(spec, dir)?;
    writeln!(
        out,
        "wrote {} tiles ({} train, {} val), {}×{}, {} classes to {}",
        spec.num_tiles,
        spec.num_train(),
        spec.num_tiles - spec.num_train(),
        spec.tile_size,
        spec.tile_size,
        meta.num_classes,
        dir.display()
    )?;
    Ok(())
}

/// Validate, prepare data, train, then write `checkpoint.bin` and
/// `metrics.csv` into the output directory.
pub fn train(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    if let DataSection::Synthetic(spec) = &cfg.data {
        generate_synthetic(spec, &cfg.data_dir())?;
    }
    let ds = Dataset::open(&cfg.data_dir())?;
    let train_tiles = ds.load_split_raw(Split::Train)?;
    let eval_tiles = ds.load_split(cfg.train.eval_split)?;
    if eval_tiles.is_empty() {
        return Err(Error::Config(format!(
            "{:?} split is empty",
            cfg.train.eval_split
        )));
    }
    let job = TrainJob {
        model: &model,
        train: &cfg.train,
        train_tiles: &train_tiles,
        normalize: ds.meta.normalization(),
        eval_tiles: &eval_tiles,
    };
    let start = Instant::now();
    let total = cfg.train.total_iters;
    let every = (total / 20).max(1);
    let outcome = train_loop(&job, &mut |t, lr, loss| {
        if t % every == 0 || t == total {
            let _ = writeln!(
                err,
                "iter {t}/{total} lr {lr:.3e} loss {loss:.4} ({:.0?})",
                start.elapsed()
            );
        }
    })?;
    checkpoint::save(cfg.output.join(CHECKPOINT_FILE), &outcome.params)?;
    fs::write(cfg.output.join(METRICS_FILE), &outcome.csv)?;
    if let Some(last) = outcome.rows.last() {
        writeln!(
            out,
            "final iter {} loss {:.6} miou {:.6}",
            last.iter, last.loss, last.miou
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub tiles: usize,
    pub pixels: u64,
    pub miou: f64,
    /// Per-class IoU in class order; `null` for classes absent from both
    /// prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    pub class_names: Vec<String>,
}

pub fn eval(cfg: &RunConfig, ckpt: &std::path::Path, split: Split) -> Result<EvalReport> {
    let model = cfg.validate()?;
    let ds = Dataset::open(&cfg.data_dir())?;
    let params = checkpoint::load(ckpt)
        .map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", ckpt.display())))?;
    model.check_params(&params)?;
    let tiles = ds.load_split(split)?;
    let cm = evaluate(&model, &params, &tiles)?;
    Ok(EvalReport {
        split,
        tiles: tiles.len(),
        pixels: cm.total(),
        miou: cm.miou()?,
        iou: cm.iou_per_class(),
        class_names: ds.meta.class_names.clone(),
    })
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// Component table plus the assumptions behind decoder and mLSTM sizes.
pub fn params_report(model: &ModelConfig) -> Result<String> {
    let c = model.count_parameters()?;
    let e = &model.encoder;
    let per_block = e.block_num_parameters();
    let mut s = String::new();
    let mut row = |name: &str, n: usize| {
        let _ = writeln!(s, "{name:<24} {n:>12} {:>9}", millions(n));
    };
    row("stem", c.stem);
    row("pos_emb", c.pos_emb);
    for (i, &depth) in e.depths.iter().enumerate() {
        row(
            &format!("stage{} ({depth} blocks)", i + 1),
            depth * per_block,
        );
    }
    row("encoder", c.encoder());
    row("adapter", c.adapter);
    row("head", c.head);
    row("decoder", c.decoder());
    row("total", c.total());
    let dev = (c.total() as f64 / 1e6 / REFERENCE_PARAMS_M - 1.0) * 100.0;
    let _ = writeln!(
        s,
        "reference {REFERENCE_PARAMS_M:.2}M, deviation {dev:+.1}%"
    );
    let d = &model.decoder;
    let _ = writeln!(s, "assumptions:");
    let _ = writeln!(
        s,
        "  mLSTM: {} head(s), q/k/v block-diagonal with {}×{} blocks, elementwise output gate",
        e.num_heads, e.qkv_block_size, e.qkv_block_size
    );
    match d.head {
        HeadKind::Upernet => {
            let _ = writeln!(
                s,
                "  decoder: UperNet, {} channels, pool scales {:?}, 3×3 FPN convs, no batch norm",
                d.channels, d.pool_scales
            );
            let plan = crate::decoder::adapter_plan(e.patch_size)?;
            let steps: Vec<String> = plan
                .iter()
                .zip(crate::decoder::PYRAMID_STRIDES)
                .map(|(r, stride)| match r {
                    Resample::Up(n) => {
                        format!("stride {stride}: {n}× (2×2 transposed conv, stride 2)")
                    }
                    Resample::Identity => format!("stride {stride}: identity"),
                    Resample::Pool(f) => format!("stride {stride}: {f}×{f} max pool"),
                })
                .collect();
            let _ = writeln!(s, "  adapter: {}", steps.join("; "));
        }
        HeadKind::Fcn => {
            let _ = writeln!(
                s,
                "  decoder: FCN, {} channels, last encoder tap only",
                d.channels
            );
        }
    }
    Ok(s)
}

pub fn gradcheck(
    model: &ModelConfig,
    opts: &ModelCheckOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    writeln!(
        err,
        "checking {} parameters",
        model.count_parameters()?.total()
    )?;
    let start = Instant::now();
    let report = model_gradcheck(model, opts)?;
    writeln!(
        out,
        "{:<44} {:>6} {:>14} {:>14} {:>10}",
        "parameter", "index", "analytic", "numeric", "rel_error"
    )?;
    for (name, p) in &report.groups {
        writeln!(
            out,
            "{name:<44} {:>6} {:>14.6e} {:>14.6e} {:>10.2e}",
            p.index, p.analytic, p.numeric, p.rel_error
        )?;
    }
    let pass = report.passed(MODEL_TOLERANCE);
    writeln!(
        out,
        "max relative error {:.3e} over {} probes in {:.1?}: {}",
        report.max_rel_error,
        report.probes,
        start.elapsed(),
        if pass { "ok" } else { "FAILED" }
    )?;
    Ok(if pass { 0 } else { EXIT_RUNTIME })
}

/// `length,median_seconds,runs` rows for a single-head mLSTM of width `dim`.
pub fn bench_scan(lengths: &[usize], dim: usize, runs: usize, seed: u64) -> Result<String> {
    if runs == 0 || lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Config(
            "bench-scan needs positive lengths and runs".into(),
        ));
    }
    let cfg = MLstmConfig {
        dim,
        num_heads: 1,
        qkv_block_size: if dim.is_multiple_of(4) { 4 } else { dim },
        forget_gate: ForgetGate::Exp,
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MLstmParams::init(cfg, &mut rng)?;
    let mut s = String::from("length,median_seconds,runs\n");
    for &l in lengths {
        let seq = Tensor::randn([l, dim], 1.0, &mut rng);
        mlstm_scan(&params, &seq, ScanDirection::Forward)?;
        let mut times: Vec<f64> = (0..runs)
            .map(|_| {
                let t = Instant::now();
                let y = mlstm_scan(&params, &seq, ScanDirection::Forward);
                std::hint::black_box(y).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        times.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            times[runs / 2]
        } else {
            (times[runs / 2 - 1] + times[runs / 2]) / 2.0
        };
        let _ = writeln!(s, "{l},{median:.9},{runs}");
    }
    Ok(s)
}
