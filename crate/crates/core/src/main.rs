use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mipkd::config::{ChainConfig, TrainConfig};
use mipkd::data::{bicubic_resize, save_png, synth_textures, DataSource, DatasetSpec};
use mipkd::metrics::markdown_table;
use mipkd::train::{collect_reports, distill_chain, evaluate, summarize, train};
use mipkd::{Error, Result};

#[derive(Parser)]
#[command(name = "mipkd", version, about = "Mixture-of-priors distillation for super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key.path=value`, applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on directories of HR PNG images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 0..)]
        data: Vec<PathBuf>,
    },
    /// Run a multi-stage distillation chain.
    Chain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write procedural HR textures, plus bicubic LR copies per scale.
    MakeData {
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<out>_x<s>` directories of degraded images.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<usize>,
    },
    /// Summarise run reports as CSV and markdown.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn make_data(count: usize, size: usize, seed: u64, out: &PathBuf, scales: &[usize]) -> Result<()> {
    let images = synth_textures(count, size, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    for &s in scales {
        if !matches!(s, 2..=4) || size % s != 0 {
            return Err(Error::Config(format!("scale x{s} unsupported for size {size}")));
        }
        let dir = out.with_file_name(format!("{name}_x{s}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, img) in images.iter().enumerate() {
            let lr = bicubic_resize(img, size / s, size / s)?;
            save_png(&dir.join(format!("synth_{i:04}.png")), &lr)?;
        }
    }
    for (i, img) in images.iter().enumerate() {
        save_png(&out.join(format!("synth_{i:04}.png")), img)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let report = train(&cfg)?;
            println!("{}", markdown_table(&[(report.name.clone(), report.final_eval.clone())]));
            println!("run directory: {}", report.run_dir.display());
        }
        Command::Eval { ckpt, data } => {
            let specs: Vec<DatasetSpec> = data
                .iter()
                .map(|d| DatasetSpec {
                    name: d
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| d.display().to_string()),
                    source: DataSource::Directory,
                    hr_dir: Some(d.clone()),
                    ..DatasetSpec::default()
                })
                .collect();
            let reports = evaluate(&ckpt, &specs)?;
            for r in &reports {
                print!("{}", r.to_csv());
            }
            if !reports.is_empty() {
                println!("{}", markdown_table(&[(ckpt.display().to_string(), reports)]));
            }
        }
        Command::Chain { config, overrides } => {
            let chain = ChainConfig::load(&config, &overrides)?;
            let reports = distill_chain(&chain.stages)?;
            let (_, md) = summarize(&reports);
            println!("{md}");
        }
        Command::MakeData {
            count,
            size,
            seed,
            out,
            scales,
        } => make_data(count, size, seed, &out, &scales)?,
        Command::Report { runs } => {
            let reports = collect_reports(&runs)?;
            let (csv, md) = summarize(&reports);
            let csv_path = runs.join("summary.csv");
            let md_path = runs.join("summary.md");
            std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
            std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
