use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mugshot_kit::attribute::{load_descriptions, SynonymTable};
use mugshot_kit::demo::build_demo_world;
use mugshot_kit::imageio;
use mugshot_kit::pipeline::{build_report, emit_gnuplot, Manifest, Pipeline, PipelineConfig, ReidOutcome, MANIFEST_FILE};
use mugshot_kit::prompt::{AgingDirection, PromptFeature};
use mugshot_kit::tv::{self, DenoiseParams};
use mugshot_kit::{Error, Result};

/// Forensic mugshot pipeline: enhance, describe, score, generate, re-identify.
#[derive(Parser)]
#[command(name = "mugshot", version)]
struct Cli {
    /// Run configuration (TOML); defaults to ./mugshot.toml
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Answer every backend call from this fixture directory
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Answer every backend call from an earlier run's journal
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Distance threshold for verification metrics
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Also report verification metrics over a threshold sweep
    #[arg(long, global = true)]
    sweep: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PromptArgs {
    /// Extra term whose clauses are removed from prompts (repeatable)
    #[arg(long = "exclude-term")]
    exclude_terms: Vec<String>,
    /// Restrict prompts to these features (repeatable)
    #[arg(long = "include-category")]
    include: Vec<String>,
    /// Images per generation request
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Describe reference images (raw and enhanced) and score the answers
    Describe,
    /// Total-variation denoise one image
    Denoise {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Generate images for every configured arm
    Augment {
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Generate aged or de-aged images and compare them with the other age
    Age {
        #[arg(long)]
        target_age: Option<f64>,
        /// age or deage
        #[arg(long)]
        direction: Option<AgingDirection>,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Embed references and generated images, write confusion matrices
    Reid {
        /// Defaults to <out>/manifest.json
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a JSON file of predicted descriptions against the dataset
    Score {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// describe, augment, reid and (if configured) age, then report
    Pipeline {
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Summarize the output directory into run_report.json
    Report {
        /// Also write plots.gp for gnuplot
        #[arg(long)]
        emit_gnuplot: bool,
    },
    /// Write a synthetic dataset with recorded fixtures to DIR
    Demo { dir: PathBuf },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.clone().unwrap_or_else(|| PathBuf::from("mugshot.toml"));
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "configuration {} not found (pass --config)",
            path.display()
        )));
    }
    let mut cfg = PipelineConfig::load(&path)?;
    cfg.apply_process_env();
    if let Some(d) = &cli.fixtures {
        cfg.use_fixtures(d);
    }
    if let Some(j) = &cli.replay {
        cfg.use_replay(j);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = cli.threshold {
        cfg.reid.distance_threshold = Some(t);
    }
    if cli.sweep {
        cfg.reid.sweep = true;
    }
    Ok(cfg)
}

fn apply_prompt_args(cfg: &mut PipelineConfig, args: &PromptArgs) -> Result<()> {
    cfg.prompt.exclude_terms.extend(args.exclude_terms.iter().cloned());
    if !args.include.is_empty() {
        let feats = args
            .include
            .iter()
            .map(|s| s.parse::<PromptFeature>())
            .collect::<Result<Vec<_>>>()?;
        cfg.prompt.include = Some(feats);
    }
    if let Some(c) = args.count {
        cfg.generation.count = c;
    }
    Ok(())
}

fn print_reid(outcome: &ReidOutcome) {
    for arm in &outcome.arms {
        match (&arm.distance, &arm.similarity, &arm.error) {
            (Some(d), Some(s), _) => println!(
                "{:<22} identification {:.3} (distance) {:.3} (similarity), mean genuine similarity {:.3}",
                arm.arm, d.identification_accuracy, s.identification_accuracy, s.mean_genuine_score
            ),
            (_, _, Some(e)) => println!("{:<22} aborted: {e}", arm.arm),
            _ => println!("{:<22} no result", arm.arm),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Denoise {
            input,
            output,
            iterations,
            lambda,
            epsilon,
            step,
        } => {
            let mut p = match &cli.config {
                Some(_) => load_config(&cli)?.denoise,
                None => DenoiseParams::default(),
            };
            p.iterations = iterations.unwrap_or(p.iterations);
            p.lambda = lambda.unwrap_or(p.lambda);
            p.epsilon = epsilon.unwrap_or(p.epsilon);
            p.step = step.unwrap_or(p.step);
            p.validate()?;
            denoise_file(input, output, &p)
        }
        Command::Demo { dir } => {
            let world = build_demo_world(dir)?;
            println!("demo written to {}", world.root.display());
            println!("run: mugshot --config {} pipeline", world.config.display());
            Ok(())
        }
        Command::Report { emit_gnuplot: plots } => {
            let out = match (&cli.out, &cli.config) {
                (Some(o), _) => o.clone(),
                _ => load_config(&cli)?.out_dir,
            };
            let report = build_report(&out)?;
            println!(
                "{} written ({} generated images)",
                out.join("run_report.json").display(),
                report.generated_images
            );
            if *plots {
                println!("{} written", emit_gnuplot(&out)?.display());
            }
            Ok(())
        }
        Command::Describe => {
            let p = Pipeline::open(load_config(&cli)?)?;
            let outcome = p.run_describe()?;
            print!("{}", outcome.cohort.render());
            for f in &outcome.failures {
                eprintln!("warning: {} ({}): {}", f.subject_id, f.arm, f.reason);
            }
            Ok(())
        }
        Command::Score { predictions } => {
            let p = Pipeline::open(load_config(&cli)?)?;
            let preds = load_descriptions(predictions, &SynonymTable::default())?;
            print!("{}", p.score_predictions(&preds)?.cohort.render());
            Ok(())
        }
        Command::Augment { prompt } => {
            let mut cfg = load_config(&cli)?;
            apply_prompt_args(&mut cfg, prompt)?;
            let m = Pipeline::open(cfg)?.run_augment()?;
            for (arm, a) in &m.arms {
                println!("{arm:<22} {} subjects", a.subjects.len());
            }
            for s in &m.skipped {
                eprintln!("skipped {} ({}): {}", s.subject_id, s.arm, s.reason);
            }
            Ok(())
        }
        Command::Age {
            target_age,
            direction,
            prompt,
        } => {
            let mut cfg = load_config(&cli)?;
            apply_prompt_args(&mut cfg, prompt)?;
            let target = target_age.or(cfg.age.map(|a| a.target_age)).ok_or_else(|| {
                Error::Usage("pass --target-age or set [age] target_age".into())
            })?;
            let dir = direction.or(cfg.age.map(|a| a.direction)).unwrap_or(AgingDirection::Age);
            let outcome = Pipeline::open(cfg)?.run_age(target, dir)?;
            print_reid(&ReidOutcome {
                arms: vec![outcome.evaluation],
            });
            Ok(())
        }
        Command::Reid { manifest } => {
            let p = Pipeline::open(load_config(&cli)?)?;
            let path = manifest.clone().unwrap_or_else(|| p.out_dir().join(MANIFEST_FILE));
            print_reid(&p.run_reid(&Manifest::load(path)?)?);
            Ok(())
        }
        Command::Pipeline { prompt } => {
            let mut cfg = load_config(&cli)?;
            apply_prompt_args(&mut cfg, prompt)?;
            let p = Pipeline::open(cfg)?;
            p.run()?;
            let out = p.out_dir();
            if let Ok(text) = std::fs::read_to_string(out.join("describe/cohort.csv")) {
                print!("{text}");
            }
            println!("reports written to {}", out.display());
            Ok(())
        }
    }
}

fn denoise_file(input: &Path, output: &Path, p: &DenoiseParams) -> Result<()> {
    if imageio::is_grayscale_path(input) {
        let img = imageio::read_gray(input)?;
        let out = tv::denoise(&img, p)?;
        println!(
            "total variation {:.4} -> {:.4}",
            tv::total_variation(&img),
            tv::total_variation(&out)
        );
        imageio::write_gray(output, &out)
    } else {
        let img = imageio::read_rgb(input)?;
        let out = tv::denoise_rgb(&img, p)?;
        let tv_sum = |i: &tv::RgbImage| i.channels().iter().map(tv::total_variation).sum::<f64>();
        println!("total variation {:.4} -> {:.4}", tv_sum(&img), tv_sum(&out));
        imageio::write_rgb_png(output, &out)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
