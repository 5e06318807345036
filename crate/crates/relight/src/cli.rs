//! Command-line entry point exposing the full pipeline.
//!
//! Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numeric or state-mismatch
//! failure. Errors print one machine-parseable line to stderr:
//! `error: <category>: <message>`.

use crate::error::{Error, Result};
use crate::evaluation::{
    eval_ablations, eval_sequential, eval_single, side_by_side, write_ablation_csv,
    write_sequential_csv, write_single_csv, AblationVariant,
};
use crate::imaging::{read_image, read_mask, write_image, PortraitImage, SegMask};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::renderer::RenderMode;
use crate::synthdata::{generate_dataset, open_split, DatasetConfig};
use crate::training::{relight_once, write_csv, SceneCache, Trainer, TrainingConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const DATA_ROOT_ENV: &str = "RELIGHT_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "relight",
    version,
    about = "Referral-based portrait relighting: dataset generation, training, inference and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train and test splits).
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Relight one source image with the illumination of a target image.
    Relight(RelightArgs),
    /// Render a lighting-rotation sweep from one source/target pair.
    Rotate(RotateArgs),
    /// Evaluate a checkpoint, or run the ablation table.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output root; falls back to RELIGHT_DATA_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training-split subjects.
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    /// Training-split environments.
    #[arg(long, default_value_t = 6)]
    envs: usize,
    #[arg(long, default_value_t = 2)]
    test_subjects: usize,
    #[arg(long, default_value_t = 2)]
    test_envs: usize,
    /// Square image resolution.
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Equirectangular environment-map width.
    #[arg(long, default_value_t = 96)]
    env_width: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (contains train/, test/); falls back to RELIGHT_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV path; defaults to `<out>.losses.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optimization steps; overrides --epochs.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1.5e-5)]
    lr: f32,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Render mode: MNR, Concat or Mul.
    #[arg(long, default_value = "MNR")]
    mode: String,
    /// Single lighting code instead of the three-way representation.
    #[arg(long)]
    no_ot3: bool,
    /// One foreground-only illumination encoder.
    #[arg(long)]
    no_bg: bool,
    /// Drop the feature cycle-consistency objective.
    #[arg(long)]
    no_feat: bool,
    /// Drop the latent lighting-consistency objective.
    #[arg(long)]
    no_cons: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subject feature channels.
    #[arg(long, default_value_t = 32)]
    cs: usize,
    #[arg(long, default_value_t = 64)]
    trunk_hidden: usize,
    /// Periodic checkpoint interval in steps (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RelightArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_mask: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    target_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional rotation angle in degrees within [-180, 180].
    #[arg(long)]
    angle: Option<f64>,
    /// Emit the raw render without compositing onto the inpainted target
    /// background.
    #[arg(long)]
    no_composite: bool,
}

#[derive(Args)]
struct RotateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_mask: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    target_mask: PathBuf,
    /// Comma-separated angles in degrees, e.g. "-90,0,45".
    #[arg(long, conflicts_with = "sweep")]
    angles: Option<String>,
    /// Sweep step in degrees: frames at -180, -180+step, .. up to 180.
    #[arg(long)]
    sweep: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    no_composite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root; falls back to RELIGHT_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequential-rotation protocol instead of single-image relighting.
    #[arg(long)]
    sequential: bool,
    /// Comma-separated ablation variants to train and evaluate
    /// (full,no-bg,no-ot3,no-feat,no-cons,concat,mul).
    #[arg(long)]
    ablation_table: Option<String>,
    /// Training steps per ablation variant.
    #[arg(long, default_value_t = 60)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Run the CLI and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (category, code) = classify(&e);
            eprintln!("error: {category}: {e}");
            code
        }
    }
}

fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("usage", 2),
        Error::Io(_) | Error::Image(_) | Error::Json(_) => ("io", 3),
        Error::Shape(_) | Error::Numeric(_) | Error::Checkpoint(_) | Error::MissingRecord(_) => {
            ("numeric", 4)
        }
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::config(format!(
            "no data root: pass --out/--data or set {DATA_ROOT_ENV}"
        ))),
    }
}

fn parse_mode(s: &str) -> Result<RenderMode> {
    match s.to_ascii_lowercase().as_str() {
        "mnr" => Ok(RenderMode::Mnr),
        "concat" => Ok(RenderMode::Concat),
        "mul" => Ok(RenderMode::Mul),
        other => Err(Error::config(format!(
            "unknown render mode '{other}' (expected MNR, Concat or Mul)"
        ))),
    }
}

fn load_pair(img: &Path, mask: &Path) -> Result<(PortraitImage, SegMask)> {
    Ok((read_image(img)?, read_mask(mask)?.binarized()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Relight(a) => relight(a),
        Command::Rotate(a) => rotate(a),
        Command::Eval(a) => eval(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let root = data_root(a.out)?;
    let cfg = DatasetConfig {
        root: root.clone(),
        seed: a.seed,
        resolution: a.res,
        train_subjects: a.subjects,
        train_envs: a.envs,
        test_subjects: a.test_subjects,
        test_envs: a.test_envs,
        env_width: a.env_width,
        sample_grid: 16,
        explicit_seeds: None,
    };
    let bundle = generate_dataset(&cfg)?;
    println!(
        "train: {} scenes ({} subjects x {} envs x 12 rotations) -> {}",
        bundle.train.manifest.records.len(),
        bundle.train.manifest.subjects(),
        bundle.train.manifest.envs(),
        bundle.train.dir.display()
    );
    if let Some(test) = bundle.test {
        println!(
            "test:  {} scenes ({} subjects x {} envs x 12 rotations) -> {}",
            test.manifest.records.len(),
            test.manifest.subjects(),
            test.manifest.envs(),
            test.dir.display()
        );
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let root = data_root(a.data)?;
    let dataset = open_split(&root, "train")?;
    let cache = SceneCache::load(dataset)?;

    let mut trainer = match &a.resume {
        Some(path) => Trainer::load(path)?,
        None => {
            let mode = parse_mode(&a.mode)?;
            let cfg = TrainingConfig {
                model: ModelConfig {
                    resolution: cache.dataset.manifest.resolution,
                    subject_channels: a.cs,
                    render_mode: mode,
                    ot3: !a.no_ot3 && mode == RenderMode::Mnr,
                    bg_split: !a.no_bg,
                    trunk_hidden: a.trunk_hidden,
                    seed: a.seed,
                },
                lr: a.lr,
                batch_size: a.batch,
                epochs: a.epochs,
                steps: a.steps,
                seed: a.seed,
                weights: LossWeights::default(),
                feat: !a.no_feat,
                cons: !a.no_cons,
                checkpoint_every: a.checkpoint_every,
            };
            Trainer::new(cfg)?
        }
    };

    let steps = match a.steps {
        Some(s) => s,
        None => trainer.cfg.total_steps(cache.len()),
    };
    let mut rows = Vec::new();
    let every = trainer.cfg.checkpoint_every;
    let mut remaining = steps;
    while remaining > 0 {
        let chunk = if every > 0 { every.min(remaining) } else { remaining };
        let summary = trainer.run(&cache, chunk)?;
        rows.extend(summary.rows);
        remaining -= chunk;
        if every > 0 && remaining > 0 {
            trainer.save(&a.out)?;
        }
    }
    trainer.save(&a.out)?;
    let csv_path = a
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.losses.csv", a.out.display())));
    write_csv(&csv_path, &rows)?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "trained {} steps: total {} -> {} (relight {} -> {})",
            steps, first.values.total, last.values.total, first.values.relight, last.values.relight
        );
    } else {
        println!("trained 0 steps: checkpoint equals initialization");
    }
    println!("checkpoint: {}", a.out.display());
    println!("loss log:   {}", csv_path.display());
    Ok(())
}

fn relight(a: RelightArgs) -> Result<()> {
    let trainer = Trainer::load(&a.ckpt)?;
    let (src, src_m) = load_pair(&a.source, &a.source_mask)?;
    let (tgt, tgt_m) = load_pair(&a.target, &a.target_mask)?;
    let out = relight_once(
        &trainer.model,
        &src,
        &src_m,
        &tgt,
        &tgt_m,
        a.angle,
        !a.no_composite,
    )?;
    write_image(&a.out, &out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sweep_angles(step: f64) -> Result<Vec<f64>> {
    if !(1.0..=180.0).contains(&step) {
        return Err(Error::config(format!(
            "sweep step {step} outside [1, 180] degrees"
        )));
    }
    let mut out = Vec::new();
    let mut a = -180.0;
    while a < 180.0 - 1e-9 {
        out.push(a);
        a += step;
    }
    Ok(out)
}

fn angle_file_name(angle: f64) -> String {
    let text = format!("{angle}").replace('-', "m").replace('.', "_");
    format!("angle_{text}.png")
}

fn rotate(a: RotateArgs) -> Result<()> {
    let trainer = Trainer::load(&a.ckpt)?;
    let (src, src_m) = load_pair(&a.source, &a.source_mask)?;
    let (tgt, tgt_m) = load_pair(&a.target, &a.target_mask)?;
    let angles: Vec<f64> = match (&a.angles, a.sweep) {
        (Some(list), None) => {
            let mut parsed = Vec::new();
            for piece in list.split(',') {
                let v: f64 = piece.trim().parse().map_err(|_| {
                    Error::config(format!("bad angle '{piece}' in --angles"))
                })?;
                parsed.push(v);
            }
            parsed
        }
        (None, Some(step)) => sweep_angles(step)?,
        (None, None) => sweep_angles(30.0)?,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if angles.is_empty() {
        return Err(Error::config("no angles requested"));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let mut frames = Vec::with_capacity(angles.len());
    for &angle in &angles {
        let frame = relight_once(
            &trainer.model,
            &src,
            &src_m,
            &tgt,
            &tgt_m,
            Some(angle),
            !a.no_composite,
        )?;
        write_image(&a.out_dir.join(angle_file_name(angle)), &frame)?;
        frames.push(frame);
    }
    let strip = side_by_side(&frames.iter().collect::<Vec<_>>());
    write_image(&a.out_dir.join("strip.png"), &strip)?;
    println!("wrote {} frames + strip.png to {}", frames.len(), a.out_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let root = data_root(a.data)?;
    let trainer = Trainer::load(&a.ckpt)?;

    if let Some(list) = &a.ablation_table {
        let variants: Vec<AblationVariant> = list
            .split(',')
            .map(|s| AblationVariant::parse(s.trim()))
            .collect::<Result<_>>()?;
        let train_set = open_split(&root, "train")?;
        let test_set = open_split(&root, "test")?;
        let rows = eval_ablations(&variants, &trainer.cfg, &train_set, &test_set, a.steps, a.seed)?;
        write_ablation_csv(&a.out, &rows)?;
        for r in &rows {
            println!(
                "{:8} rmse={:.4} psnr={:.2} ssim={:.4} cfg={:016x}",
                r.variant, r.rmse, r.psnr, r.ssim, r.config_hash
            );
        }
        println!("wrote {}", a.out.display());
        return Ok(());
    }

    let test_set = open_split(&root, "test")?;
    let cache = SceneCache::load(test_set)?;
    if a.sequential {
        let report = eval_sequential(&trainer.model, &cache, a.seed)?;
        write_sequential_csv(&a.out, &report)?;
        println!(
            "sequential: rmse={:.4} psnr={:.2} ssim={:.4} over {} renders",
            report.model.rmse, report.model.psnr, report.model.ssim, report.model.count
        );
    } else {
        let report = eval_single(&trainer.model, &cache, a.seed)?;
        write_single_csv(&a.out, &report)?;
        println!(
            "single: rmse={:.4} psnr={:.2} ssim={:.4} | identity baseline rmse={:.4} psnr={:.2} ssim={:.4}",
            report.model.rmse,
            report.model.psnr,
            report.model.ssim,
            report.identity.rmse,
            report.identity.psnr,
            report.identity.ssim
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_of_thirty_degrees_has_twelve_frames() {
        let angles = sweep_angles(30.0).unwrap();
        assert_eq!(angles.len(), 12);
        assert_eq!(angles[0], -180.0);
        assert_eq!(angles[11], 150.0);
        assert!(sweep_angles(0.5).is_err());
    }

    #[test]
    fn angle_file_names_are_filesystem_safe() {
        assert_eq!(angle_file_name(-180.0), "angle_m180.png");
        assert_eq!(angle_file_name(45.5), "angle_45_5.png");
        assert_eq!(angle_file_name(0.0), "angle_0.png");
    }

    #[test]
    fn mode_parsing_accepts_documented_names() {
        assert_eq!(parse_mode("MNR").unwrap(), RenderMode::Mnr);
        assert_eq!(parse_mode("concat").unwrap(), RenderMode::Concat);
        assert_eq!(parse_mode("Mul").unwrap(), RenderMode::Mul);
        assert!(parse_mode("other").is_err());
    }

    #[test]
    fn error_classification_matches_exit_code_contract() {
        assert_eq!(classify(&Error::config("x")).1, 2);
        assert_eq!(
            classify(&Error::Io(std::io::Error::other("x"))).1,
            3
        );
        assert_eq!(classify(&Error::numeric("x")).1, 4);
        assert_eq!(classify(&Error::Checkpoint("x".into())).1, 4);
    }
}
