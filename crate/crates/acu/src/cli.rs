//! Command-line driver.
//!
//! One command per process; every source of randomness flows from the
//! `seed` of the subcommand or its config file, never from the clock, so
//! reruns produce byte-identical outputs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::equivalence::{equivalence_sweep, extrapolate_weights, sparsity_report, SparsityReport};
use crate::error::{Error, Result};
use crate::export;
use crate::manifest::{load_manifest, load_snapshot, save_snapshot};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::train::{
    make_multi_shift_task, make_shift_task, train, Dataset, Targets, TrainConfig,
};
use crate::verify::{render_report_table, reports_to_csv, run_gradient_suite};

#[derive(Parser)]
#[command(name = "acu", version, about = "Convolution with learnable sampling positions")]
struct Cli {
    /// Bound worker parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Verify random units against their lowered dense kernels.
    Equivcheck(EquivcheckArgs),
    /// Print the parameter and MAdd table of a manifest.
    Count(CountArgs),
    /// Train a network per a JSON config file.
    Train(TrainArgs),
    /// Export learned positions of a snapshot as CSV.
    ExportPositions(ExportArgs),
    /// Lower every position-based layer of a snapshot to dense kernels.
    Lower(LowerArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Pass threshold on the relative error.
    #[arg(long, default_value_t = crate::verify::GRAD_TOL)]
    tol: f64,
    /// Also write the reports as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EquivcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; see `RunConfig` in the library docs.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for traces and the final snapshot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Snapshot directory written by `train`.
    #[arg(long)]
    snapshot: PathBuf,
    /// Positions CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional 2-D histogram CSV path.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
}

#[derive(Args)]
struct LowerArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Output directory for kernel tensors and the sparsity CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Dataset selection for a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Synthetic regression: the target is the input shifted by `offset`.
    Shift {
        offset: [f64; 2],
        samples: usize,
        size: usize,
    },
    /// Per-channel shifts, one per input channel.
    MultiShift {
        offsets: Vec<[f64; 2]>,
        samples: usize,
        size: usize,
    },
    /// Regression targets from tensor files.
    Tensors { inputs: String, targets: String },
    /// Classification labels from a `(n, 1, 1, 1)` tensor of class indices.
    LabeledTensors { inputs: String, labels: String },
}

/// Top-level JSON config consumed by `acu train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Network manifest path, relative to this config file.
    pub manifest: String,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn build_dataset(task: &TaskSpec, base: &Path, seed: u64) -> Result<Dataset> {
    match task {
        TaskSpec::Shift {
            offset,
            samples,
            size,
        } => make_shift_task(
            (offset[0], offset[1]),
            *samples,
            *size,
            crate::tensor::derive_seed(seed, "task"),
        ),
        TaskSpec::MultiShift {
            offsets,
            samples,
            size,
        } => {
            let pairs: Vec<(f64, f64)> = offsets.iter().map(|o| (o[0], o[1])).collect();
            make_multi_shift_task(
                &pairs,
                *samples,
                *size,
                crate::tensor::derive_seed(seed, "task"),
            )
        }
        TaskSpec::Tensors { inputs, targets } => {
            let x = read_tensor(base.join(inputs))?;
            let t = read_tensor(base.join(targets))?;
            Dataset::new(x, Targets::Fields(t))
        }
        TaskSpec::LabeledTensors { inputs, labels } => {
            let x = read_tensor(base.join(inputs))?;
            let l = read_tensor(base.join(labels))?;
            if l.dims() != (x.n(), 1, 1, 1) {
                return Err(Error::InvalidArgument(format!(
                    "labels must have shape ({}, 1, 1, 1), found {:?}",
                    x.n(),
                    l.dims()
                )));
            }
            let classes: Vec<usize> = l.as_slice().iter().map(|&v| v as usize).collect();
            Dataset::new(x, Targets::Classes(classes))
        }
    }
}

/// Runs the CLI on the given argument list and returns the process exit
/// code. The first argument is the program name.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        // best effort: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(ok) => {
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Gradcheck(args) => {
            let reports = run_gradient_suite(args.seed, args.trials)?;
            let mut all_pass = true;
            let reports: Vec<_> = reports
                .into_iter()
                .map(|mut r| {
                    r.pass = r.max_rel_err <= args.tol;
                    all_pass &= r.pass;
                    r
                })
                .collect();
            print!("{}", render_report_table(&reports));
            if let Some(csv) = &args.csv {
                export::write_text(csv, &reports_to_csv(&reports))?;
            }
            println!(
                "{} of {} parameter blocks pass at tol {:e}",
                reports.iter().filter(|r| r.pass).count(),
                reports.len(),
                args.tol
            );
            Ok(all_pass)
        }
        Command::Equivcheck(args) => {
            let worst = equivalence_sweep(args.seed, args.cases)?;
            println!("max |direct - lowered| over {} cases: {worst:e}", args.cases);
            Ok(worst <= args.tol)
        }
        Command::Count(args) => {
            let loaded = load_manifest(&args.manifest, 0)?;
            let rows = crate::cost::network_cost_rows(
                &loaded.net,
                (loaded.input.channels, loaded.input.height, loaded.input.width),
            )?;
            print!("{}", crate::cost::render_cost_table(&rows));
            if let Some(csv) = &args.csv {
                export::write_text(csv, &crate::cost::cost_rows_to_csv(&rows))?;
            }
            Ok(true)
        }
        Command::Train(args) => run_training(&args),
        Command::ExportPositions(args) => {
            let loaded = load_snapshot(&args.snapshot)?;
            export::write_text(&args.out, &export::positions_csv(&loaded.net))?;
            if let Some(hist) = &args.histogram {
                export::write_text(
                    hist,
                    &export::position_histogram_csv(&loaded.net, args.bin_width)?,
                )?;
            }
            Ok(true)
        }
        Command::Lower(args) => {
            let loaded = load_snapshot(&args.snapshot)?;
            std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            let mut csv = String::from(SparsityReport::CSV_HEADER);
            csv.push('\n');
            let mut result: Result<()> = Ok(());
            loaded.net.visit_acu(&mut |path, layer| {
                if result.is_err() {
                    return;
                }
                result = (|| {
                    let kernel = extrapolate_weights(layer)?;
                    let report = sparsity_report(&kernel);
                    csv.push_str(&report.csv_row(path));
                    csv.push('\n');
                    let stem = path.replace('/', "__");
                    write_tensor(args.out.join(format!("{stem}.kernel.tnsr")), &kernel.weights)?;
                    let meta = serde_json::json!({
                        "layer": path,
                        "origin": [kernel.origin.0, kernel.origin.1],
                        "extent": [kernel.extent().0, kernel.extent().1],
                    });
                    export::write_text(
                        args.out.join(format!("{stem}.kernel.json")),
                        &format!("{}\n", serde_json::to_string_pretty(&meta)?),
                    )
                })();
            });
            result?;
            export::write_text(args.out.join("sparsity.csv"), &csv)?;
            Ok(true)
        }
    }
}

fn run_training(args: &TrainArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let run: RunConfig = serde_json::from_str(&text)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let loaded = load_manifest(base.join(&run.manifest), run.train.seed)?;
    let mut net = loaded.net;
    let data = build_dataset(&run.task, &base, run.train.seed)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    match train(&mut net, &data, &run.train) {
        Ok(report) => {
            export::write_text(args.out.join("loss.csv"), &export::loss_trace_csv(&report.loss_trace))?;
            export::write_text(
                args.out.join("positions.csv"),
                &export::position_trace_csv(&report.position_trace),
            )?;
            save_snapshot(&net, loaded.input, args.out.join("snapshot"))?;
            println!(
                "trained {} iters: loss {} -> {}",
                run.train.total_iters, report.initial_loss, report.final_loss
            );
            Ok(true)
        }
        Err(Error::Diverged { iter, loss }) => {
            // the network has been restored to its last good state
            save_snapshot(&net, loaded.input, args.out.join("snapshot"))?;
            Err(Error::Diverged { iter, loss })
        }
        Err(e) => Err(e),
    }
}
