use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};

use mtbit::data::{
    generate_synthetic, read_image, read_f32, read_mask, split_stats, validate_tile, DatasetManifest, Image,
    Severity, Split, DELTA_FILE, IMG_FILES, MASK_FILE,
};
use mtbit::metrics::{predict_images, truth_from, Evaluation, MetricReport, TileOutcome};
use mtbit::model::{export_attention_maps, Model};
use mtbit::training::{
    gradcheck, gradcheck_sample, load_checkpoint, log_csv, save_checkpoint, Checkpoint, Trainer, FD_STEP,
    GRADCHECK_TOL, LOG_HEADER,
};

use crate::config::{usage, Preset, RunConfig};
use crate::{Cli, Command, DatasetCommand, InputArgs, TrainArgs};

pub const REPORT_JSON: &str = "report.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "log.csv";

pub fn run(cli: Cli) -> Result<ExitCode> {
    let fallback = match cli.command {
        Command::Gradcheck => Preset::Tiny,
        _ => Preset::Full,
    };
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), cli.common.preset, fallback)?;
    if let Some(seed) = cli.common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = cli.common.out {
        cfg.out = Some(out);
    }
    if let Some(d) = cli.common.dataset {
        cfg.dataset = Some(d);
    }

    match cli.command {
        Command::Dataset(DatasetCommand::Gen { tiles }) => {
            if let Some(n) = tiles {
                cfg.synth.n_tiles = n;
            }
            start(&cfg)?;
            dataset_gen(&cfg)
        }
        Command::Dataset(DatasetCommand::Validate { strict }) => {
            start(&cfg)?;
            dataset_validate(&cfg, strict)
        }
        Command::Dataset(DatasetCommand::Stats) => {
            start(&cfg)?;
            dataset_stats(&cfg)
        }
        Command::Train(args) => train(cfg, &args),
        Command::Eval(args) => {
            let ckpt = read_checkpoint(&args.checkpoint, &mut cfg)?;
            start(&cfg)?;
            eval(&cfg, &ckpt, args.split)
        }
        Command::Predict(args) => {
            let ckpt = read_checkpoint(&args.input.checkpoint, &mut cfg)?;
            start(&cfg)?;
            predict(&cfg, &ckpt, &args.input, args.trace)
        }
        Command::ExportAttn(args) => {
            let ckpt = read_checkpoint(&args.checkpoint, &mut cfg)?;
            start(&cfg)?;
            export_attn(&cfg, &ckpt, &args)
        }
        Command::Gradcheck => {
            start(&cfg)?;
            run_gradcheck(&cfg)
        }
    }
}

/// Validates the configuration and echoes it to stderr and the output dir.
fn start(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    eprintln!("# effective config\n{}", cfg.to_toml());
    if let Some(out) = &cfg.out {
        cfg.echo(out)?;
    }
    Ok(())
}

fn require_out(cfg: &RunConfig) -> Result<&Path> {
    cfg.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn require_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    let root = cfg.dataset.as_deref().ok_or_else(|| usage("--dataset is required"))?;
    DatasetManifest::load(root).with_context(|| format!("loading dataset {}", root.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Model and training configuration come from the checkpoint.
fn read_checkpoint(path: &Path, cfg: &mut RunConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.model = ckpt.model.clone();
    cfg.train = ckpt.train.clone();
    Ok(ckpt)
}

fn dataset_gen(cfg: &RunConfig) -> Result<ExitCode> {
    let out = require_out(cfg)?;
    let m = generate_synthetic(&cfg.synth, out).context("generating dataset")?;
    println!(
        "wrote {} tiles to {} (train {}, val {}, test {})",
        cfg.synth.n_tiles,
        out.display(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn dataset_validate(cfg: &RunConfig, strict: bool) -> Result<ExitCode> {
    let m = require_dataset(cfg)?;
    let (mut errors, mut warnings, mut tiles) = (0usize, 0usize, 0usize);
    for split in Split::ALL {
        for id in m.ids(split) {
            tiles += 1;
            let t = match m.load_tile(id) {
                Ok(t) => t,
                Err(e) => {
                    errors += 1;
                    println!("error {split}/{id}: {e}");
                    continue;
                }
            };
            for v in validate_tile(&t, strict) {
                let label = match v.severity {
                    Severity::Error => {
                        errors += 1;
                        "error"
                    }
                    Severity::Warning => {
                        warnings += 1;
                        "warning"
                    }
                };
                println!("{label} {split}/{id}: {:?}: {}", v.kind, v.message);
            }
        }
    }
    if let Err(e) = m.check_h_scale() {
        errors += 1;
        println!("error h_scale: {e}");
    }
    println!("{tiles} tiles, {errors} errors, {warnings} warnings");
    Ok(if errors == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn dataset_stats(cfg: &RunConfig) -> Result<ExitCode> {
    let m = require_dataset(cfg)?;
    let stats = split_stats(&m)?;
    let text = json(&stats);
    print!("{text}");
    if let Some(out) = &cfg.out {
        write(&out.join("stats.json"), &text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(mut cfg: RunConfig, args: &TrainArgs) -> Result<ExitCode> {
    let resumed = match &args.resume {
        Some(path) => Some(read_checkpoint(path, &mut cfg)?),
        None => None,
    };
    if resumed.is_some() && (args.lr.is_some() || args.batch_size.is_some()) {
        return Err(usage("--lr and --batch-size cannot change a resumed run"));
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.max_steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    start(&cfg)?;
    let out = require_out(&cfg)?.to_path_buf();
    let m = require_dataset(&cfg)?;

    let mut trainer = match resumed {
        Some(mut ckpt) => {
            ckpt.train = cfg.train.clone();
            Trainer::resume(ckpt, m.load_split(Split::Train)?, m.load_split(Split::Val)?)?
        }
        None => Trainer::from_manifest(&m, cfg.model.clone(), cfg.train.clone())?,
    };
    let ckpt_dir = out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
        trainer.checkpoint_dir = Some(ckpt_dir);
    }
    eprintln!(
        "training {} parameters on {} tiles, {} steps per epoch",
        trainer.model.param_count(),
        trainer.train_tiles().len(),
        trainer.steps_per_epoch()
    );
    eprintln!("{LOG_HEADER}");
    let rows = trainer.run(|row| eprintln!("{}", row.to_csv_line()))?;

    let log_path = out.join(LOG_FILE);
    if args.resume.is_some() && log_path.exists() {
        let mut text = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        for r in &rows {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        write(&log_path, text)?;
    } else {
        write(&log_path, log_csv(&rows))?;
    }
    let final_path = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer.checkpoint(), &final_path)?;
    println!(
        "step {}, epoch {}, checkpoint {}",
        trainer.state.step,
        trainer.state.epoch,
        final_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, ckpt: &Checkpoint, split: Split) -> Result<ExitCode> {
    let out = require_out(cfg)?;
    let m = require_dataset(cfg)?;
    let tiles = m.load_split(split)?;
    if tiles.is_empty() {
        anyhow::bail!("split {split} has no tiles");
    }
    let model = Model::new(ckpt.model.clone())?;
    let ev: Evaluation = mtbit::metrics::evaluate_tiles(&model, &ckpt.state.params, &tiles, ckpt.h_scale)?;
    let text = ev.report.to_json();
    write(&out.join(REPORT_JSON), &text)?;
    write(&out.join("report.csv"), ev.report.to_csv())?;
    write(&out.join("histogram.csv"), ev.histogram_csv())?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

struct PairInput {
    img1: Image,
    img2: Image,
    /// Tile directory, when ground truth may be present.
    tile: Option<PathBuf>,
}

fn read_pair(args: &InputArgs) -> Result<PairInput> {
    let (p1, p2, tile) = match (&args.tile, &args.img1, &args.img2) {
        (Some(dir), None, None) => (dir.join(IMG_FILES[0]), dir.join(IMG_FILES[1]), Some(dir.clone())),
        (None, Some(a), Some(b)) => (a.clone(), b.clone(), None),
        _ => return Err(usage("give either --tile or both --img1 and --img2")),
    };
    let read = |p: &Path| read_image(p).with_context(|| format!("reading image {}", p.display()));
    Ok(PairInput {
        img1: read(&p1)?,
        img2: read(&p2)?,
        tile,
    })
}

fn predict(cfg: &RunConfig, ckpt: &Checkpoint, args: &InputArgs, trace: bool) -> Result<ExitCode> {
    let out = require_out(cfg)?;
    let pair = read_pair(args)?;
    let model = Model::new(ckpt.model.clone())?;
    let pred = predict_images(&model, &ckpt.state.params, &pair.img1, &pair.img2, ckpt.h_scale, trace)?;
    pred.mask.write(&out.join(MASK_FILE))?;
    pred.dh.write(&out.join(DELTA_FILE))?;
    println!(
        "{} change pixels of {}, mean dH {:.4} m",
        pred.mask.count_ones(),
        pred.mask.values.len(),
        pred.dh.mean()
    );

    if let Some(dir) = &pair.tile {
        let (mask_path, delta_path) = (dir.join(MASK_FILE), dir.join(DELTA_FILE));
        if mask_path.exists() && delta_path.exists() {
            let (gt_mask, gt_dh) = truth_from(&read_mask(&mask_path)?, &read_f32(&delta_path)?, model.cfg.input_size);
            let outcome = TileOutcome {
                tile_id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                pred_mask: pred.mask.clone(),
                pred_dh: pred.dh.values.iter().map(|&v| v as f64).collect(),
                gt_mask,
                gt_dh,
            };
            let text = MetricReport::from_outcomes(&[outcome])?.to_json();
            write(&out.join(REPORT_JSON), &text)?;
            println!("{text}");
        }
    }
    if trace {
        let paths = export_attention_maps(pred.trace.as_ref(), 0, &out.join("attention"))?;
        println!("wrote {} attention maps", paths.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn export_attn(cfg: &RunConfig, ckpt: &Checkpoint, args: &InputArgs) -> Result<ExitCode> {
    let out = require_out(cfg)?;
    let pair = read_pair(args)?;
    let model = Model::new(ckpt.model.clone())?;
    let pred = predict_images(&model, &ckpt.state.params, &pair.img1, &pair.img2, ckpt.h_scale, true)?;
    let paths = export_attention_maps(pred.trace.as_ref(), 0, out)?;
    println!("wrote {} attention maps to {}", paths.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(cfg: &RunConfig) -> Result<ExitCode> {
    let seed = cfg.train.seed;
    let model = Model::new(cfg.model.clone())?;
    let params = model.init(seed);
    let sample = gradcheck_sample(cfg.model.input_size, seed)?;
    let t0 = Instant::now();
    let r = gradcheck(&model, &params, &sample, &cfg.train)?;
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "step {FD_STEP:e}: max rel err {:.3e} at {} ({} checked, {} excluded, {} violations, {} on stencils crossing a kink)",
        r.max_rel_err, r.worst_name, r.checked, r.excluded, r.violations, r.kink_crossed
    );
    println!(
        "kink-free Richardson differences: max rel err {:.3e} at {} ({} unresolved)",
        r.max_rel_err_refined, r.worst_refined_name, r.unresolved
    );
    let ok = r.passed_refined();
    println!("{} (tolerance {GRADCHECK_TOL:e}, {secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    if let Some(out) = &cfg.out {
        write(&out.join("gradcheck.json"), json(&r))?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
