//! `radepth` command line: synthetic data generation, training, EM inference,
//! completion, evaluation and rendering.
//!
//! Exit codes: 0 success, 1 other failure, 2 I/O error, 3 bad file magic,
//! 4 configuration or argument violation. Stdout only carries JSON.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use radepth::io;
use radepth::metrics::evaluate;
use radepth::pipeline::{complete_depth, infer_em, train, TrainConfig};
use radepth::synth::{synthesize, SceneRecipe, SensorNoise, SensorSuite};
use radepth::sparse_depth::SparseDepthMap;
use radepth::Error;

#[derive(Parser)]
#[command(name = "radepth", version, about = "Camera-radar sparse depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene directories.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Scene i uses seed `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// default, noiseless or harsh.
        #[arg(long, default_value = "default")]
        noise_profile: String,
    },
    /// Train the feature extractor and evaluator; writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Validation scenes for the per-epoch AUC.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Write the estimated sparse depth map of one scene.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Rows of upward radar expansion.
        #[arg(long, default_value_t = 60)]
        v: usize,
    },
    /// Densify a sparse depth map guided by an image.
    Complete {
        #[arg(long)]
        em: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dense prediction against LiDAR (an SDM1 file or a scene directory).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a depth map as PGM, or PPM with missing pixels in red.
    Render {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        min: f64,
        #[arg(long, default_value_t = 80.0)]
        max: f64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 2,
                Error::BadMagic { .. } => 3,
                Error::Config(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthGen {
            out,
            scenes,
            seed,
            noise_profile,
        } => synth_gen(&out, scenes, seed, &noise_profile),
        Command::Train { data, config, out, val } => train_cmd(&data, config.as_deref(), &out, val.as_deref()),
        Command::Infer {
            ckpt,
            scene,
            out,
            tau,
            v,
        } => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!("--tau must lie in [0, 1], got {tau}")).into());
            }
            if v == 0 {
                return Err(Error::Config("--v must be at least 1".into()).into());
            }
            let mut model = io::read_checkpoint(&ckpt)?;
            let data = io::load_scene_dir(&scene)?;
            let em = infer_em(&mut model, &data, v, tau)?;
            io::write_depth(&out, &em.map)?;
            print_json(&serde_json::json!({ "out": out, "pixels": em.map.measured_count(), "tau": tau }));
            Ok(())
        }
        Command::Complete { em, image, out } => {
            let sparse = io::read_depth(&em)?;
            let image = io::read_pgm(&image)?;
            let dense = complete_depth(&sparse, &image)?;
            io::write_depth(&out, &dense)?;
            print_json(&serde_json::json!({ "out": out, "input_pixels": sparse.measured_count() }));
            Ok(())
        }
        Command::Eval { pred, lm, json } => {
            let prediction = io::read_depth(&pred)?;
            let reference = load_reference(&lm)?;
            let report = evaluate(&prediction, &reference)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = json {
                io::write_bytes(&path, format!("{text}\n").as_bytes())?;
            }
            print_json(&serde_json::to_value(report)?);
            Ok(())
        }
        Command::Render { depth, out, min, max } => {
            let range = io::RenderRange::new(min, max).map_err(|e| Error::Config(e.to_string()))?;
            let map = io::read_depth(&depth)?;
            let ppm = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
            let bytes = if ppm {
                io::render_depth_ppm(&map, &range)
            } else {
                io::render_depth_pgm(&map, &range)
            };
            io::write_bytes(&out, &bytes)?;
            print_json(&serde_json::json!({ "out": out, "format": if ppm { "ppm" } else { "pgm" } }));
            Ok(())
        }
    }
}

fn load_reference(path: &Path) -> Result<SparseDepthMap> {
    if path.is_dir() {
        let meta = io::read_meta(path)?;
        Ok(io::read_lidar(&path.join(io::scene_files::LIDAR), &meta.camera)?)
    } else {
        Ok(io::read_depth(path)?)
    }
}

fn synth_gen(out: &Path, scenes: usize, seed: u64, profile: &str) -> Result<()> {
    let sensors = SensorSuite {
        noise: SensorNoise::from_profile(profile)?,
        ..SensorSuite::default()
    };
    let recipe = SceneRecipe::default();
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut hashes = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let scene_seed = seed.wrapping_add(i as u64);
        let frame = synthesize(scene_seed, &recipe, &sensors).with_context(|| format!("scene seed {scene_seed}"))?;
        io::write_scene_dir(&out.join(format!("scene_{i:04}")), &frame, &sensors)?;
        hashes.push(io::scene_hash(&frame.scene)?);
    }
    print_json(&serde_json::json!({ "out": out, "scenes": scenes, "seed": seed, "scene_hashes": hashes }));
    Ok(())
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, val: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => io::read_run_config(path)?,
        None => TrainConfig::default(),
    };
    let train_set = io::load_dataset(data)?;
    let val_set = match val {
        Some(dir) => io::load_dataset(dir)?,
        None => Vec::new(),
    };
    eprintln!(
        "training on {} scenes ({} validation) for {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.epochs
    );
    let trained = train(&train_set, &val_set, &cfg, |log| {
        println!("{}", serde_json::to_string(log).expect("epoch log serializes"));
    })?;
    io::write_checkpoint(out, &trained.model)?;
    Ok(())
}
