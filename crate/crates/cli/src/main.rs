//! `diffedit` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
//! (with `diagnostics.txt` written to the workdir).

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffedit::toyworld::{emotion_index, NUM_EMOTIONS};
use diffedit::Error;

use artifacts::Workdir;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "diffedit",
    version,
    about = "Toy conditional diffusion editing pipeline"
)]
struct Cli {
    /// Root for every input and output path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// `key = value` config file, relative to the workdir.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and held-out toy face sets.
    GenData,
    /// Train the emotion oracle and identity embedder and check their targets.
    Calibrate,
    /// Train the image/latent map.
    TrainFirstStage,
    /// Train the class-conditional denoiser on first-stage latents.
    TrainLdm,
    /// Tune copies of the denoiser toward each target class.
    Finetune,
    /// Edit images and write grids plus a metrics CSV.
    Edit(EditArgs),
    /// Run the (t0, gamma, T_ddim) grid over held-out faces.
    Ablate,
}

#[derive(Args)]
struct EditArgs {
    /// Graymap to edit (relative to the workdir); needs --src.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    image: Option<PathBuf>,
    /// Edit `edit.images` held-out faces.
    #[arg(long)]
    dataset: bool,
    /// Editing strength, or a comma list for one grid per value.
    #[arg(long, value_delimiter = ',')]
    t0: Option<Vec<usize>>,
    #[arg(long)]
    gamma: Option<f64>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Source emotion (name or index).
    #[arg(long, value_parser = parse_emotion)]
    src: Option<usize>,
    /// Target emotion (name or index); all classes when omitted.
    #[arg(long, value_parser = parse_emotion)]
    trg: Option<usize>,
}

fn parse_emotion(s: &str) -> Result<usize, String> {
    if let Some(i) = emotion_index(s) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(i) if i < NUM_EMOTIONS => Ok(i),
        _ => Err(format!("unknown emotion '{s}'")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_)
        | Error::Divergence(_)
        | Error::InvalidVariance { .. }
        | Error::Degenerate(_)
        | Error::Calibration(_) => 3,
        _ => 2,
    }
}

fn resolve_config(cli: &Cli) -> diffedit::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&cli.workdir.join(p))?,
        None => RunConfig::defaults(),
    };
    if let Ok(seed) = std::env::var("DIFFEDIT_SEED") {
        cfg.set("seed", &seed)
            .map_err(|e| Error::Config(format!("DIFFEDIT_SEED: {e}")))?;
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Calibrate => "calibrate",
        Command::TrainFirstStage => "train-first-stage",
        Command::TrainLdm => "train-ldm",
        Command::Finetune => "finetune",
        Command::Edit(_) => "edit",
        Command::Ablate => "ablate",
    }
}

fn run(wd: &Workdir, command: &Command) -> diffedit::Result<()> {
    let echo = wd.config.echo();
    diffedit::io::write_file(
        &wd.path(&format!("logs/{}.config", wd.command)),
        echo.as_bytes(),
    )?;
    eprintln!(
        "{}: config {} ({} of {} keys defaulted), seed {}",
        wd.command,
        &wd.config.hash()[..16],
        wd.config.defaulted().len(),
        echo.lines().count(),
        wd.seed()
    );
    match command {
        Command::GenData => commands::gen_data(wd),
        Command::Calibrate => commands::calibrate(wd),
        Command::TrainFirstStage => commands::train_first_stage(wd),
        Command::TrainLdm => commands::train_ldm(wd),
        Command::Finetune => commands::finetune_cmd(wd),
        Command::Edit(a) => {
            let c = &wd.config;
            let opts = commands::EditOptions {
                image: a.image.clone(),
                t0: match &a.t0 {
                    Some(v) => v.clone(),
                    None => c.counts("edit.t0", 1)?,
                },
                gamma: a.gamma.unwrap_or_else(|| c.float("edit.gamma")),
                steps: match a.steps {
                    Some(s) => s,
                    None => c.count("edit.T_ddim", 1)?,
                },
                eta: a.eta.unwrap_or_else(|| c.float("edit.eta")),
                inversion_gamma: c.float_or_same("edit.inversion_gamma"),
                src: a.src,
                trg: a.trg,
            };
            commands::edit_cmd(wd, &opts)
        }
        Command::Ablate => commands::ablate(wd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let wd = Workdir::new(&cli.workdir, cfg, name);
    match run(&wd, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == 3 {
                match commands::write_diagnostics(
                    &cli.workdir,
                    name,
                    &wd.config.hash(),
                    wd.seed(),
                    &e,
                ) {
                    Ok(p) => eprintln!("diagnostics written to {}", p.display()),
                    Err(io) => eprintln!("could not write diagnostics: {io}"),
                }
            }
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_errors_map_to_three() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
        assert_eq!(exit_code(&Error::Calibration("x".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Stale("x".into())), 2);
    }

    #[test]
    fn emotions_parse_by_name_or_index() {
        assert_eq!(parse_emotion("happy"), Ok(1));
        assert_eq!(parse_emotion("6"), Ok(6));
        assert!(parse_emotion("7").is_err());
        assert!(parse_emotion("bored").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
