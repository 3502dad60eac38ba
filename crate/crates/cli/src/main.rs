use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medrnn::checkpoint::Checkpoint;
use medrnn::data::{load_csv, synth_generate, write_csv, SynthParams, SYNTH_MIN_STATIONS, SYNTH_MIN_STEPS};
use medrnn::pipeline::{run_train, Region, RunConfig, TrainedModel};
use medrnn::{Error, Result};

/// Multi-encoder-decoder RNN forecasting with spatial attention fusion.
#[derive(Parser)]
#[command(name = "medrnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic regime-switching network as DIR/data.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(SYNTH_MIN_STATIONS as u64..))]
        stations: u64,
        #[arg(long, default_value_t = 6000, value_parser = clap::value_parser!(u64).range(SYNTH_MIN_STEPS as u64..))]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one model family and write a checkpoint plus a JSON report.
    Train {
        /// Input CSV; overrides `data.path` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON file with flat dotted keys; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the test MSE in percent (100 × MSE on normalised data).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, valid, test or all.
        #[arg(long, default_value = "test")]
        region: Region,
    },
    /// Write back-to-back forecasts over the data in the input CSV schema.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention weights as `sample,decoder,encoder,weight` rows.
    Attention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            stations,
            steps,
            seed,
        } => {
            let series = synth_generate(stations as usize, steps as usize, seed, &SynthParams::default())?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_csv(&series, out.join("data.csv"))
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            report,
        } => {
            let mut rc = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    RunConfig::from_json(&text)?
                }
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                rc.train.seed = seed;
            }
            if data.is_some() {
                rc.data_path = data;
            }
            let data = rc
                .data_path
                .clone()
                .ok_or_else(|| Error::InvalidArgument("no input data: pass --data or set data.path".into()))?;
            let series = load_csv(&data)?;
            let (model, rep) = run_train(&series, &rc)?;
            model.to_checkpoint().save(&out)?;
            let report = report.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".report.json");
                p.into()
            });
            let mut w = create(&report)?;
            serde_json::to_writer_pretty(&mut w, &rep)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(&report, e))
        }
        Command::Eval { model, data, region } => {
            let model = load_model(&model)?;
            let mse = model.evaluate_series(&load_csv(&data)?, region)?;
            println!("{mse:.2}");
            Ok(())
        }
        Command::Predict { model, data, out } => {
            let model = load_model(&model)?;
            write_csv(&model.predict_series(&load_csv(&data)?)?, out)
        }
        Command::Attention { model, data, out } => {
            let model = load_model(&model)?;
            let rows = model.attention_rows(&load_csv(&data)?)?;
            let mut w = create(&out)?;
            let result = (|| {
                writeln!(w, "sample,decoder,encoder,weight")?;
                for (n, j, i, v) in rows {
                    writeln!(w, "{n},{j},{i},{v}")?;
                }
                w.flush()
            })();
            result.map_err(|e| Error::io(&out, e))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
