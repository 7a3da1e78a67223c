use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vsd_core::dataspace::Split;
use vsd_core::harness::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, Decoding, ExperimentConfig, Overrides, RelationSource,
};
use vsd_core::model::{ModelConfig, ModelMode};
use vsd_core::VsdError;

const OUTPUT_ROOT_ENV: &str = "VSD_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "vsd", version, about = "Visual spatial description experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file with every default filled in.
    Init {
        #[arg(long, default_value = "vsd.toml")]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic train/dev/test files and manifest.
    GenData(Common),
    /// Train every seed and keep the best dev checkpoint.
    Train(Common),
    /// Evaluate trained checkpoints on the test split.
    Eval(Common),
    /// Decode instances with one seed's checkpoints, one JSON line each.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished experiments side by side.
    Compare {
        /// One config per experiment.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Small,
    Tiny,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    decoding: Option<String>,
    #[arg(long)]
    relation_source: Option<String>,
    #[arg(long)]
    beam_size: Option<usize>,
    /// Overrides the config's output directory and $VSD_OUTPUT_ROOT.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

fn load_config(path: &Path, output_dir: Option<&PathBuf>) -> Result<ExperimentConfig, VsdError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(d) = output_dir {
        cfg.output_dir = Some(d.clone());
    } else if cfg.output_dir.is_none() {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = Some(PathBuf::from(root));
        }
    }
    Ok(cfg)
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, VsdError> {
        let mut cfg = load_config(&self.config, self.output_dir.as_ref())?;
        let o = Overrides {
            seed: self.seed,
            mode: self.mode.as_deref().map(str::parse::<ModelMode>).transpose()?,
            decoding: self.decoding.as_deref().map(str::parse::<Decoding>).transpose()?,
            relation_source: self.relation_source.as_deref().map(str::parse::<RelationSource>).transpose()?,
            beam_size: self.beam_size,
            output_dir: None,
        };
        cfg.apply(&o)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Init { output, preset, force } => {
            if output.exists() && !force {
                return Err(VsdError::OutputExists { path: output }.into());
            }
            let model = match preset {
                Preset::Desk => ModelConfig::desk(),
                Preset::Small => ModelConfig::small(),
                Preset::Tiny => ModelConfig::tiny(),
            };
            let cfg = ExperimentConfig {
                model,
                ..ExperimentConfig::default()
            };
            cfg.save(&output)?;
            writeln!(out, "wrote {}", output.display())?;
        }
        Command::GenData(c) => {
            let cfg = c.config()?;
            let m = cmd_gen_data(&cfg, c.force)?;
            writeln!(
                out,
                "{} instances (train {}, dev {}, test {}) in {}",
                m.n_instances,
                m.counts.train,
                m.counts.dev,
                m.counts.test,
                cfg.data_dir().display()
            )?;
            for (rel, n) in &m.relation_histogram {
                writeln!(out, "  {rel:<16} {n}")?;
            }
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let s = cmd_train(&cfg)?;
            for (component, ms) in &s.dev_scores {
                writeln!(out, "{} {component}: dev {:.2} ± {:.2} over {} seeds", s.name, ms.mean, ms.std, s.seeds.len())?;
            }
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let r = cmd_eval(&cfg)?;
            write!(out, "{}", r.to_text())?;
        }
        Command::Infer {
            common,
            split,
            limit,
            out: dest,
        } => {
            let cfg = common.config()?;
            let split: Split = split.parse()?;
            let seed = cfg.seeds[0];
            let records = cmd_infer(&cfg, seed, split, limit)?;
            let mut w: Box<dyn Write> = match &dest {
                Some(p) => Box::new(BufWriter::new(
                    fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => Box::new(&mut out),
            };
            for r in &records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Command::Compare {
            configs,
            output_dir,
            json,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load_config(p, output_dir.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            let cmp = cmd_compare(&cfgs)?;
            if json {
                serde_json::to_writer_pretty(&mut out, &cmp)?;
                writeln!(out)?;
            } else {
                write!(out, "{}", cmp.to_text())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<VsdError>().map_or(1, VsdError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
