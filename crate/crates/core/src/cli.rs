//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{generate_scene, read_dataset, write_scene, ScenePair};
use crate::error::{Error, Result};
use crate::metrics::{csv_row, CSV_HEADER};
use crate::net::{pipeline_forward, Checkpoint, PipelineOptions};
use crate::train::{checkpoint_options, evaluate, loss_csv, Ablation, Predictor, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rigidflow", version, about = "Decomposed scene flow: synthetic data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scene files and a manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Write files without ground truth.
        #[arg(long)]
        strip_labels: bool,
        /// Drop points below this height from both frames.
        #[arg(long)]
        remove_ground: Option<f64>,
    },
    /// Train a model; writes checkpoint.rfnw, loss.csv and metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out scenes for the scheduled evaluations (default: training set).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.csv and hist.csv.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k_infer: usize,
        /// none, no-ego or no-refine.
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Evaluate the ICP baseline; writes metrics.csv and hist.csv.
    Icp {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time inference per refinement count; writes timing.csv.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k_infer: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::DegenerateGeometry(_) | Error::NonRotationMatrix { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::from_file)
}

fn generate(config: &ExperimentConfig, out: &Path, count: usize, strip: bool, ground: Option<f64>) -> Result<String> {
    create_dir(out)?;
    write(&out.join("config.resolved"), &config.resolved())?;
    let mut manifest = String::from("index,file,seed\n");
    for i in 0..count {
        let cfg = config.gen.for_scene(i);
        let mut s = generate_scene(&cfg)?;
        if let Some(h) = ground {
            s = s.remove_ground(h)?;
        }
        if strip {
            s = s.without_truth();
        }
        let file = format!("{}.rfsp", s.scene_id);
        write_scene(out.join(&file), &s)?;
        let _ = writeln!(manifest, "{i},{file},{}", cfg.seed);
    }
    write(&out.join("manifest.csv"), &manifest)?;
    Ok(format!("wrote {count} scenes to {}", out.display()))
}

fn train(
    config: &ExperimentConfig,
    data: &[ScenePair],
    eval_data: Option<&[ScenePair]>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<String> {
    create_dir(out)?;
    write(&out.join("config.resolved"), &config.resolved())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.train.clone(), &Checkpoint::read(p)?)?,
        None => Trainer::new(config.train.clone())?,
    };
    let ckpt_path = out.join("checkpoint.rfnw");
    let loss_path = out.join("loss.csv");
    let append = resume.is_some() && loss_path.exists();
    let prior = if append {
        fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?
    } else {
        String::new()
    };
    let save_losses = |t: &Trainer| -> Result<()> {
        let fresh = loss_csv(&t.curve);
        let text = if append {
            // Skip the header of the new block.
            let body = fresh.split_once('\n').map_or("", |x| x.1);
            format!("{prior}{body}")
        } else {
            fresh
        };
        write(&loss_path, &text)
    };

    let every = config.train.checkpoint_every;
    // Without a held-out set, score the training data when it has labels.
    let eval_set = eval_data.or_else(|| data.iter().all(ScenePair::has_truth).then_some(data));
    let mut metrics = String::from("epoch,");
    metrics.push_str(CSV_HEADER);
    metrics.push('\n');
    let result = trainer.run(data, eval_set, |t, outcome| {
        if every > 0 && t.epoch % every == 0 {
            t.checkpoint().write(&ckpt_path)?;
            save_losses(t)?;
        }
        if let Some(o) = outcome {
            let _ = writeln!(metrics, "{},{}", t.epoch, csv_row("all", &o.aggregate));
        }
        Ok(())
    });
    if let Err(e) = result {
        // The failing step never touched the weights, so they are the last
        // good state.
        trainer.checkpoint().write(&ckpt_path)?;
        save_losses(&trainer)?;
        return Err(e);
    }
    trainer.checkpoint().write(&ckpt_path)?;
    save_losses(&trainer)?;
    let summary = format!("trained {} epochs ({} steps)", trainer.epoch, trainer.step);
    let Some(eval_set) = eval_set else {
        return Ok(format!("{summary}; no labelled data to evaluate"));
    };
    let last = evaluate(
        eval_set,
        &Predictor::network(&trainer.params, config.refine.k_infer, config.train.ego_motion),
        None,
    )?;
    let _ = writeln!(metrics, "final,{}", csv_row("all", &last.aggregate));
    write(&out.join("metrics.csv"), &metrics)?;
    Ok(format!("{summary}, final EPE3D {:.4}", last.aggregate.epe3d))
}

fn eval_outputs(out: &Path, outcome: &crate::train::EvalOutcome) -> Result<()> {
    create_dir(out)?;
    write(&out.join("metrics.csv"), &outcome.metrics_csv()?)?;
    write(&out.join("hist.csv"), &outcome.histogram.to_csv())
}

fn eval(checkpoint: Option<&Path>, data: &[ScenePair], out: &Path, k: usize, ablation: Ablation) -> Result<String> {
    if k == 0 {
        return Err(Error::InvalidConfig("k_infer must be >= 1".into()));
    }
    let outcome = match checkpoint {
        None => evaluate(data, &Predictor::Oracle, None)?,
        Some(p) => {
            let ckpt = Checkpoint::read(p)?;
            let params = ckpt.params()?;
            let trained_ego = checkpoint_options(&ckpt).is_none_or(|o| o.ego_motion);
            let opts = ablation.apply(PipelineOptions {
                k,
                ego_motion: trained_ego,
            });
            evaluate(data, &Predictor::Network { params: &params, opts }, None)?
        }
    };
    eval_outputs(out, &outcome)?;
    Ok(format!("EPE3D {:.4} over {} scenes", outcome.aggregate.epe3d, data.len()))
}

fn bench(checkpoint: &Path, data: &[ScenePair], out: &Path, ks: &[usize], runs: usize) -> Result<String> {
    if runs < 2 || ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("bench needs runs >= 2 and k values >= 1".into()));
    }
    let ckpt = Checkpoint::read(checkpoint)?;
    let params = ckpt.params()?;
    let ego = checkpoint_options(&ckpt).is_none_or(|o| o.ego_motion);
    create_dir(out)?;
    let mut csv = String::from("k,runs,mean_ms,stdev_ms,min_ms\n");
    for &k in ks {
        let opts = PipelineOptions { k, ego_motion: ego };
        let s0 = &data[0];
        pipeline_forward(&s0.p1, &s0.p2, &params, opts)?;
        let mut times = Vec::with_capacity(runs);
        for r in 0..runs {
            let s = &data[r % data.len()];
            let t0 = Instant::now();
            pipeline_forward(&s.p1, &s.p2, &params, opts)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / runs as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(csv, "{k},{runs},{mean},{},{min}", var.sqrt());
    }
    write(&out.join("timing.csv"), &csv)?;
    Ok(csv)
}

/// Runs a parsed command and returns the text to print.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate {
            config,
            out,
            count,
            strip_labels,
            remove_ground,
        } => {
            let cfg = load_config(config.as_deref())?;
            generate(&cfg, &out, count.unwrap_or(cfg.count), strip_labels, remove_ground)
        }
        Command::Train {
            config,
            data,
            out,
            eval_data,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_dataset(&data)?;
            let eval_data = eval_data.map(read_dataset).transpose()?;
            train(&cfg, &data, eval_data.as_deref(), &out, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            oracle: _,
            data,
            out,
            k_infer,
            ablation,
        } => {
            let ablation: Ablation = ablation.parse()?;
            let data = read_dataset(&data)?;
            eval(checkpoint.as_deref(), &data, &out, k_infer, ablation)
        }
        Command::Icp { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_dataset(&data)?;
            let outcome = evaluate(&data, &Predictor::Icp(cfg.icp), None)?;
            eval_outputs(&out, &outcome)?;
            write(&out.join("config.resolved"), &cfg.resolved())?;
            Ok(format!("ICP EPE3D {:.4} over {} scenes", outcome.aggregate.epe3d, data.len()))
        }
        Command::Bench {
            checkpoint,
            data,
            out,
            k_infer,
            runs,
        } => {
            let data = read_dataset(&data)?;
            bench(&checkpoint, &data, &out, &k_infer, runs)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
