//! Command-line front end: config loading, artifact formats and the
//! `pretrain`, `similarity`, `select`, `attack`, `eval`, `compare-fusion`
//! and `render` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use clap::{Parser, Subcommand};
use commands::{Context, EvalTexture};
use config::Loaded;
use error::Result;
use std::path::PathBuf;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OGA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "oga",
    version,
    about = "Adversarial texture attacks on surrogate ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the pool models and save their weights.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Retrain even when saved weights are current.
        #[arg(long)]
        force: bool,
    },
    /// Write the pool's pairwise gradient similarity matrix.
    Similarity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Choose the attack ensemble.
    Select {
        #[arg(long)]
        config: PathBuf,
        /// Similarity CSV to select from instead of the run's own.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Optimize the adversarial texture against the ensemble.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a texture on held-out views.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// OGAF texture; defaults to the attack output.
        #[arg(long, conflicts_with = "initial")]
        texture: Option<PathBuf>,
        /// Score the starting texture instead.
        #[arg(long)]
        initial: bool,
        /// Score every pool model, not just the ensemble.
        #[arg(long)]
        pool: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the same attack under each fusion strategy and patch size.
    CompareFusion {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dump rendered views of a texture as PPM images.
    Render {
        #[arg(long)]
        config: Option<PathBuf>,
        /// OGAF texture; defaults to the seeded starting texture.
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        views: usize,
        /// Image directory; defaults to `render/` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, force } => {
            commands::cmd_pretrain(&Context::open(&config)?, force).map(drop)
        }
        Command::Similarity { config } => {
            commands::cmd_similarity(&Context::open(&config)?).map(drop)
        }
        Command::Select { config, matrix } => {
            commands::cmd_select(&Context::open(&config)?, matrix.as_deref()).map(drop)
        }
        Command::Attack { config } => commands::cmd_attack(&Context::open(&config)?).map(drop),
        Command::Eval {
            config,
            texture,
            initial,
            pool,
            output,
        } => {
            let which = match (texture, initial) {
                (Some(p), _) => EvalTexture::File(p),
                (None, true) => EvalTexture::Initial,
                (None, false) => EvalTexture::Attacked,
            };
            commands::cmd_eval(&Context::open(&config)?, which, pool, output.as_deref()).map(drop)
        }
        Command::CompareFusion { config } => {
            commands::cmd_compare(&Context::open(&config)?).map(drop)
        }
        Command::Render {
            config,
            texture,
            views,
            out,
        } => {
            let loaded = match &config {
                Some(p) => config::load(p)?,
                None => Loaded::defaults(out.clone().unwrap_or_else(|| PathBuf::from("."))),
            };
            let dir = out.unwrap_or_else(|| loaded.output_dir.join("render"));
            let ctx = Context::from_loaded(loaded)?;
            commands::cmd_render(&ctx, texture.as_deref(), views, &dir).map(drop)
        }
    }
}
