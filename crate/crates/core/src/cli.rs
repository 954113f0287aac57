//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage, configuration, state and I/O
//! failures, 2 for numeric failures. `HVPL_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{HvplError, Result};
use crate::harness::ablation::{run_ablation, Variant};
use crate::harness::bench::{bench_traversal, slope_of, to_csv, trees_json, ScanPath, DEFAULT_BRUTE_SIZES, DEFAULT_FAST_SIZES};
use crate::harness::eval::evaluate;
use crate::harness::metrics::ClassMetrics;
use crate::harness::oracle_check::run_all;
use crate::harness::run::run_experiment;
use crate::harness::store::RunStore;
use crate::harness::train::Experiment;
use crate::harness::TrainConfig;
use crate::tensor::io::read_headers;

#[derive(Parser, Debug)]
#[command(name = "hvpl", version, about = "Continual video instance segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate every task of a configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a stored run on the test videos of its completed tasks.
    Eval {
        #[arg(long)]
        state: PathBuf,
    },
    /// Compare component ablations over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,disable_ogc")]
        variants: Vec<String>,
        /// Overrides `ablation_seeds` from the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Writes the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the fast and explicit tree scans and fit their scaling slopes.
    BenchTraversal {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FAST_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BRUTE_SIZES)]
        brute_sizes: Vec<usize>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Also writes the benchmark trees as JSON parent arrays.
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run every oracle suite.
    OracleCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print the record headers of HVPL-MAT files (directories are walked).
    FmtDump {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn configure_threads() {
    if let Some(n) = std::env::var("HVPL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A pool that already exists (e.g. in tests) is kept as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| HvplError::io(path, e))?;
    TrainConfig::from_json(&text)
}

fn fmt_metrics(m: Option<ClassMetrics>) -> String {
    match m {
        Some(m) => format!("AP {:.4}  AP50 {:.4}  AP75 {:.4}  AR1 {:.4}", m.ap, m.ap50, m.ap75, m.ar1),
        None => "no ground truth".to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".to_string(), |x| format!("{x:.4}"))
}

fn hvpl_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(path).to_path_buf();
            HvplError::io(p, e.into())
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "hvpl") {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: String| -> Result<()> {
        writeln!(out, "{s}").map_err(|e| HvplError::io("<stdout>", e))
    };
    match cli.command {
        Command::Train { config, out: dir } => {
            let cfg = read_config(&config)?;
            let outcome = run_experiment(&cfg, Some(&dir))?;
            for e in &outcome.report.evaluations {
                w(out, format!("after task {}: {}", e.after_task, fmt_metrics(e.overall)))?;
            }
            w(out, format!("FAP {}  FAR1 {}", fmt_opt(outcome.report.fap.value), fmt_opt(outcome.report.far1.value)))?;
            w(out, format!("run directory: {}", dir.display()))?;
        }
        Command::Eval { state } => {
            let store = RunStore::open(&state)?;
            let cfg = store.load_config()?;
            let exp = Experiment::new(cfg.clone())?;
            let run = store.load_state(&cfg)?;
            let result = evaluate(&exp, &run)?;
            let e = &result.evaluation;
            w(out, format!("after task {}: {}", e.after_task, fmt_metrics(e.overall)))?;
            for t in &e.per_task {
                w(out, format!("  task {}: {}", t.task, fmt_metrics(t.metrics)))?;
            }
            let path = state.join("eval.json");
            let text = serde_json::to_string_pretty(e)?;
            fs::write(&path, text + "\n").map_err(|err| HvplError::io(&path, err))?;
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            out: report_path,
        } => {
            let cfg = read_config(&config)?;
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            let seeds = seeds.unwrap_or_else(|| cfg.ablation_seeds.clone());
            let report = run_ablation(&cfg, &seeds, &variants)?;
            out.write_all(report.table().as_bytes())
                .map_err(|e| HvplError::io("<stdout>", e))?;
            if let Some(wins) = report.full_beats_disable_ogc {
                w(out, format!("full forgets less than disable_ogc on {wins}/{} seeds", seeds.len()))?;
            }
            if let Some(p) = report_path {
                let text = serde_json::to_string_pretty(&report)?;
                fs::write(&p, text + "\n").map_err(|e| HvplError::io(&p, e))?;
            }
        }
        Command::BenchTraversal {
            sizes,
            brute_sizes,
            out: csv_path,
            trees,
            seed,
        } => {
            let rows = bench_traversal(&sizes, &brute_sizes, seed)?;
            let csv = to_csv(&rows);
            fs::write(&csv_path, &csv).map_err(|e| HvplError::io(&csv_path, e))?;
            out.write_all(csv.as_bytes()).map_err(|e| HvplError::io("<stdout>", e))?;
            if let Some(p) = trees {
                let mut all = sizes.clone();
                all.extend(&brute_sizes);
                fs::write(&p, trees_json(&all, seed)? + "\n").map_err(|e| HvplError::io(&p, e))?;
            }
            w(out, format!("fast slope {}", fmt_opt(slope_of(&rows, ScanPath::Fast))))?;
            w(out, format!("brute slope {}", fmt_opt(slope_of(&rows, ScanPath::Brute))))?;
        }
        Command::OracleCheck { seed } => {
            let suites = run_all(seed)?;
            let mut failed = 0;
            for s in &suites {
                w(
                    out,
                    format!(
                        "{:<22} {:>4}/{:<4} worst {:.3e}  {:.2}s",
                        s.name,
                        s.passed,
                        s.total,
                        s.worst,
                        s.elapsed.as_secs_f64()
                    ),
                )?;
                failed += usize::from(!s.ok());
            }
            if failed > 0 {
                return Err(HvplError::Numeric(format!("{failed} oracle suite(s) failed")));
            }
        }
        Command::FmtDump { paths } => {
            for p in paths {
                for file in hvpl_files(&p)? {
                    let bytes = fs::read(&file).map_err(|e| HvplError::io(&file, e))?;
                    let headers = read_headers(&bytes).map_err(|msg| HvplError::Format {
                        path: file.clone(),
                        msg,
                    })?;
                    w(out, format!("{} ({} bytes)", file.display(), bytes.len()))?;
                    for (i, h) in headers.iter().enumerate() {
                        w(
                            out,
                            format!(
                                "  [{i}] offset {} dtype {:?} dims {:?} payload {} bytes",
                                h.offset, h.dtype, h.dims, h.payload_bytes
                            ),
                        )?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Normal output goes to `out`, errors to
/// standard error.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cli_main() -> i32 {
    let mut stdout = std::io::stdout();
    run_cli(std::env::args_os(), &mut stdout)
}
