//! Command-line entry points: synthetic data generation, two-stage training,
//! tiled inference, metric evaluation, gradient checking, and routing
//! diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use omnilight::backbone::{init_model, model_forward_with_prior, ModelConfig};
use omnilight::checkpoint;
use omnilight::config::RunConfig;
use omnilight::error::Result;
use omnilight::imageio::{load_png, save_png};
use omnilight::objectives::{l1_loss, ms_ssim, ms_ssim_loss, psnr, ssim_single, MsSsimConfig};
use omnilight::params::Binder;
use omnilight::synthlight::{make_dataset, make_task_dataset, Task};
use omnilight::tensor::{grad_check, Tape, Tensor};
use omnilight::tile::{plan_tiles, tiled_infer};
use omnilight::trainer::{route_diagnostics, train_stage, TrainConfig};

#[derive(Parser)]
#[command(name = "omnilight", version, about = "Lighting restoration: shadows and ambient light normalization")]
struct Cli {
    /// JSON run configuration (model/train/tile settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset as PNGs plus a manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_per_task: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train one stage and write a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoint (stage 2 usually starts from stage 1).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 8)]
        n_per_task: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// JSON-lines epoch log (stdout if omitted).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Restore one image with sliding-window tiling.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
    },
    /// Compare prediction and ground-truth directories; one JSON line per image.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
    },
    /// Finite-difference gradient audit on a micro configuration.
    CheckGrad,
    /// Emit gate weights and the routing separability score.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_per_task: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}

fn load_run_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<RunConfig> {
    let mut rc = match cli_config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli_seed {
        rc.seed = s;
        rc.model.seed = s;
        if let Some(t) = &mut rc.train {
            t.seed = s;
        }
    } else {
        rc.model.seed = rc.seed;
    }
    Ok(rc)
}

fn run(cli: Cli) -> Result<()> {
    let rc = load_run_config(&cli.config, cli.seed)?;
    match cli.cmd {
        Cmd::Synth { out_dir, n_per_task, size } => synth(&rc, &out_dir, n_per_task, size),
        Cmd::Train { stage, out, init, epochs, batch_size, n_per_task, size, log } => train(
            &rc, stage, &out, init.as_deref(), epochs, batch_size, n_per_task, size,
            log.as_deref(),
        ),
        Cmd::Infer { input, output, checkpoint, tile, overlap } => {
            infer(&rc, &input, &output, &checkpoint, tile, overlap)
        }
        Cmd::Eval { pred_dir, gt_dir } => eval(&pred_dir, &gt_dir),
        Cmd::CheckGrad => check_grad(rc.seed),
        Cmd::RouteStats { checkpoint, n_per_task, size } => {
            route_stats(&rc, &checkpoint, n_per_task, size)
        }
    }
}

fn synth(rc: &RunConfig, out_dir: &Path, n_per_task: usize, size: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let set = make_dataset(n_per_task, size, size, rc.seed);
    let mut manifest = Vec::new();
    for (idx, s) in set.iter().enumerate() {
        let stem = format!("{:04}_{}", idx, s.task.as_str());
        save_png(&s.degraded, &out_dir.join(format!("{stem}_in.png")))?;
        save_png(&s.clean, &out_dir.join(format!("{stem}_gt.png")))?;
        manifest.push(serde_json::json!({
            "index": idx,
            "task": s.task.as_str(),
            "seed": s.seed,
        }));
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    println!("wrote {} pairs to {}", set.len(), out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    rc: &RunConfig,
    stage: u8,
    out: &Path,
    init: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    n_per_task: usize,
    size: usize,
    log: Option<&Path>,
) -> Result<()> {
    let mut tcfg = match &rc.train {
        Some(t) if t.stage == stage => *t,
        _ => {
            if stage == 1 {
                TrainConfig::stage1()
            } else {
                TrainConfig::stage2()
            }
        }
    };
    if let Some(e) = epochs {
        tcfg.epochs = e;
        if tcfg.stage == 2 {
            tcfg.warmup_epochs = (e / 10).max(1).min(e.saturating_sub(1)).max(0);
        }
    }
    if let Some(b) = batch_size {
        tcfg.batch_size = b;
    }
    tcfg.seed = rc.seed;
    tcfg.validate()?;

    let mut store = match init {
        Some(p) => {
            let loaded = checkpoint::load(p)?;
            checkpoint::check_compatible(&loaded, &init_model(&rc.model)?)?;
            loaded
        }
        None => init_model(&rc.model)?,
    };

    let dataset = if stage == 1 {
        make_task_dataset(Task::WhiteAln, 3 * n_per_task, size, size, rc.seed)
    } else {
        make_dataset(n_per_task, size, size, rc.seed)
    };

    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut best = f64::NEG_INFINITY;
    let best_path = out.with_extension("best.wdt1");
    let mut epoch_err: Option<omnilight::Error> = None;
    train_stage(&rc.model, &mut store, &dataset, &tcfg, |ep, params| {
        if let Ok(line) = serde_json::to_string(ep) {
            let _ = writeln!(sink, "{}", line);
        }
        if ep.psnr_val > best {
            best = ep.psnr_val;
            if let Err(e) = checkpoint::save(params, &best_path) {
                epoch_err = Some(e);
            }
        }
    })?;
    if let Some(e) = epoch_err {
        return Err(e);
    }
    checkpoint::save(&store, out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn infer(
    rc: &RunConfig,
    input: &Path,
    output: &Path,
    ckpt: &Path,
    tile: Option<usize>,
    overlap: Option<f64>,
) -> Result<()> {
    let store = checkpoint::load(ckpt)?;
    checkpoint::check_compatible(&store, &init_model(&rc.model)?)?;
    let image = load_png(input)?;
    let tile = tile.unwrap_or(rc.tile);
    let overlap = overlap.unwrap_or(rc.overlap);
    let plan = plan_tiles(
        image.shape[1],
        image.shape[2],
        tile,
        overlap,
        rc.model.spatial_divisor(),
    )?;
    let restored = tiled_infer(&rc.model, &store, &image, &plan)?;
    save_png(&restored, output)?;
    println!(
        "restored {} ({} tiles) -> {}",
        input.display(),
        plan.tiles.len(),
        output.display()
    );
    Ok(())
}

fn eval(pred_dir: &Path, gt_dir: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(omnilight::Error::InvalidArgument(format!(
            "no PNG files in {}",
            pred_dir.display()
        )));
    }
    let cfg = MsSsimConfig::default();
    for name in names {
        let gt_path = gt_dir.join(&name);
        if !gt_path.exists() {
            continue;
        }
        let pred = load_png(&pred_dir.join(&name))?;
        let gt = load_png(&gt_path)?;
        let (c, h, w) = (pred.shape[0], pred.shape[1], pred.shape[2]);
        let p4 = Tensor::constant(pred.data.as_ref().clone(), vec![1, c, h, w])?;
        let g4 = Tensor::constant(gt.data.as_ref().clone(), vec![1, c, h, w])?;
        let tape = Tape::new();
        let line = serde_json::json!({
            "name": name,
            "psnr": psnr(&pred.data, &gt.data, 1.0),
            "ssim": ssim_single(&tape, &p4, &g4, &cfg)?.item(),
            "ms_ssim": ms_ssim(&tape, &p4, &g4, &cfg)?.item(),
        });
        println!("{}", line);
    }
    Ok(())
}

fn check_grad(seed: u64) -> Result<()> {
    let mut worst: f64 = 0.0;
    let mut report = |name: &str, err: f64, tol: f64| -> Result<()> {
        println!("{name}: max relative error {err:.3e} (tolerance {tol:.1e})");
        worst = worst.max(err / tol);
        if err > tol {
            return Err(omnilight::Error::InvalidArgument(format!(
                "gradient check '{}' failed: {} > {}",
                name, err, tol
            )));
        }
        Ok(())
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xc6ec));

    let x0: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check(
        |t, x| {
            let x = t.reshape(x, &[2, 3, 8, 8])?;
            let bands = omnilight::wavelet::dwt2(t, &x)?;
            let back = omnilight::wavelet::idwt2(t, &bands)?;
            let y = t.gelu(&back);
            let sq = t.mul(&y, &y)?;
            Ok(t.sum_all(&sq))
        },
        &x0,
        &[2 * 3 * 8 * 8],
        1e-5,
    )?;
    report("wavelet roundtrip + gelu", err, 1e-6)?;

    let target: Vec<f64> = (0..1 * 3 * 16 * 16).map(|_| rng.gen_range(0.2..0.8)).collect();
    let x0: Vec<f64> = target.iter().map(|v| (v + 0.05).min(0.95)).collect();
    let tgt = target.clone();
    let err = grad_check(
        move |t, x| {
            let x = t.reshape(x, &[1, 3, 16, 16])?;
            let target = Tensor::constant(tgt.clone(), vec![1, 3, 16, 16])?;
            let cfg = MsSsimConfig::default();
            let l1 = l1_loss(t, &x, &target)?;
            let msl = ms_ssim_loss(t, &x, &target, &cfg)?;
            t.add(&l1, &t.scale(&msl, 0.25))
        },
        &x0,
        &[3 * 16 * 16],
        1e-5,
    )?;
    report("l1 + ms-ssim objective", err, 1e-6)?;

    let cfg = ModelConfig {
        levels: 2,
        base_width: 4,
        prior_channels: 8,
        prior_patch: 4,
        blocks_per_level: 1,
        seed,
    };
    let mut store = init_model(&cfg)?;
    for (_, p) in store.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let img: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    let prior = cfg
        .provider()
        .features(&Tensor::constant(img.clone(), vec![1, 3, 16, 16])?)?;
    let err = grad_check(
        |t, x| {
            let b = Binder::inference(t, &store);
            let img4 = t.reshape(x, &[1, 3, 16, 16])?;
            let out = model_forward_with_prior(&cfg, &b, &img4, &prior)?.restored;
            let sq = t.mul(&out, &out)?;
            Ok(t.sum_all(&sq))
        },
        &img,
        &[3 * 16 * 16],
        1e-5,
    )?;
    report("full model (micro config)", err, 1e-4)?;

    println!("all gradient checks passed");
    Ok(())
}

fn route_stats(rc: &RunConfig, ckpt: &Path, n_per_task: usize, size: usize) -> Result<()> {
    let store = checkpoint::load(ckpt)?;
    checkpoint::check_compatible(&store, &init_model(&rc.model)?)?;
    let dataset = make_dataset(n_per_task, size, size, rc.seed.wrapping_add(0xd1a6));
    let (records, score) = route_diagnostics(&rc.model, &store, &dataset)?;
    for r in &records {
        for (module, (low, high)) in r.gates.iter().enumerate() {
            for (head, row) in [("low", low), ("high", high)] {
                let weights: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                println!(
                    "{},module{},{},{},{}",
                    r.image_id,
                    module,
                    head,
                    weights.join(","),
                    r.task.as_str()
                );
            }
        }
    }
    println!("separability {:.4}", score);
    Ok(())
}
