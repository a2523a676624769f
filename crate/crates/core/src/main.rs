use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use phenovit::dataset::{export_visual_rhythm, save_manifest, write_rhythm_csv};
use phenovit::experiment::{
    cost_rows, grid, run, synthetic_preset, write_cost_csv, write_grid_csv, DataSource, DesignPoint, Stage,
    ARTIFACTS_ENV, KEYS,
};
use phenovit::sampler::WindowSpec;
use phenovit::tokenizer::TokenMode;
use phenovit::{Error, Result};

/// Short flag names accepted in place of dotted keys.
const ALIASES: &[(&str, &str)] = &[
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("batch-size", "train.batch_size"),
    ("manifest", "data.manifest"),
    ("synthetic", "data.synthetic"),
];

fn design_flags_help() -> String {
    let mut s = String::from("Design flags (override the config file):\n");
    for k in KEYS {
        s.push_str(&format!("  --{k} <VALUE>\n"));
    }
    s.push_str("Aliases: ");
    s.push_str(&ALIASES.iter().map(|(a, k)| format!("--{a} = --{k}")).collect::<Vec<_>>().join(", "));
    s
}

#[derive(Parser)]
#[command(name = "phenovit", version, about = "ViT pixel classification of image time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Input24,
    Arch,
    Windows,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenArg {
    Temporal,
    Spatial,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one design point.
    #[command(after_help = design_flags_help())]
    Run {
        /// Flat JSON config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Artifacts root (default: $PHENOVIT_ARTIFACTS or ./artifacts).
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Run an ablation grid and write its summary CSV.
    #[command(after_help = design_flags_help())]
    Grid {
        #[arg(value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Concurrent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run cells whose artifacts already exist.
        #[arg(long)]
        force: bool,
        /// Summary CSV path (default: <artifacts>/grid_<stage>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP counts for a series length and window.
    #[command(after_help = design_flags_help())]
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Series length.
        #[arg(long = "M", default_value_t = 13)]
        m: usize,
        /// Square window side.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value_t = TokenArg::Temporal)]
        token: TokenArg,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Comma-separated window sides.
        #[arg(long = "sweep-k", value_delimiter = ',')]
        sweep_k: Vec<usize>,
        /// Comma-separated series lengths.
        #[arg(long = "sweep-M", value_delimiter = ',')]
        sweep_m: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as a manifest directory.
    Synth {
        #[arg(long, default_value = "four_class")]
        preset: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one pixel's visual rhythm as CSV.
    Rhythm {
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        /// Chromaticity-normalize each pixel.
        #[arg(long)]
        normalized: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Splits design flags (`--sampler.k 13`, `--seed=3`, aliases) from the
/// arguments clap parses.
fn split_design_flags(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let resolve = |name: &str| -> Option<String> {
        if KEYS.contains(&name) {
            return Some(name.to_string());
        }
        ALIASES.iter().find(|(a, _)| *a == name).map(|(_, k)| k.to_string())
    };
    let mut rest = Vec::with_capacity(args.len());
    let mut design = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        match resolve(name) {
            Some(key) => {
                let value = match inline {
                    Some(v) => v,
                    None => it.next().ok_or_else(|| Error::config(key.clone(), "missing value"))?,
                };
                design.push((key, value));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, design))
}

fn load_design(config: Option<&Path>, overrides: &[(String, String)]) -> Result<DesignPoint> {
    let mut design = match config {
        Some(path) => DesignPoint::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => DesignPoint::default(),
    };
    for (k, v) in overrides {
        design.set_str(k, v)?;
    }
    design.validate()?;
    Ok(design)
}

fn artifacts_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Returns whether every part of the command succeeded.
fn execute(command: Command, overrides: &[(String, String)]) -> Result<bool> {
    match command {
        Command::Run { config, artifacts } => {
            let design = load_design(config.as_deref(), overrides)?;
            let out = run(&design, &artifacts_root(artifacts))?;
            println!("{}", out.dir.display());
            println!(
                "best_val_accuracy={:.4} test_accuracy={:.4} test_balanced_accuracy={:.4} params={} flops={}",
                out.metrics.best_val_accuracy,
                out.metrics.test.accuracy,
                out.metrics.test.balanced_accuracy,
                out.metrics.params,
                out.metrics.flops
            );
            Ok(true)
        }
        Command::Grid { stage, config, artifacts, jobs, force, out } => {
            let design = load_design(config.as_deref(), overrides)?;
            let root = artifacts_root(artifacts);
            let (stage, name) = match stage {
                StageArg::Input24 => (Stage::Input24, "input24"),
                StageArg::Arch => (Stage::Arch, "arch"),
                StageArg::Windows => (Stage::Windows, "windows"),
            };
            fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            let result = grid(stage, &design, &root, jobs, force)?;
            if let Some(stage1) = &result.input24_rows {
                let path = root.join("grid_input24.csv");
                let mut buf = Vec::new();
                write_grid_csv(stage1, &mut buf)?;
                fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            }
            let path = out.unwrap_or_else(|| root.join(format!("grid_{name}.csv")));
            let mut buf = Vec::new();
            write_grid_csv(&result.rows, &mut buf)?;
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
            std::io::stdout().write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
            let failed = result.rows.iter().filter(|r| r.status.starts_with("failed")).count();
            if failed > 0 {
                eprintln!("error: {failed} grid cell(s) failed; see the status column of {}", path.display());
            }
            Ok(failed == 0)
        }
        Command::Cost { config, m, k, token, classes, sweep_k, sweep_m, format, out } => {
            let design = load_design(config.as_deref(), overrides)?;
            if classes == 0 {
                return Err(Error::config("classes", "must be positive"));
            }
            let base = design.model_config(1, classes);
            let mode = match token {
                TokenArg::Temporal => TokenMode::Temporal,
                TokenArg::Spatial => TokenMode::Spatial,
            };
            let square = |k: usize| WindowSpec::square(k).map_err(|_| Error::config("k", format!("{k} is not an odd side >= 3")));
            let mut points = Vec::new();
            if !sweep_k.is_empty() {
                for &kk in &sweep_k {
                    points.push((m, square(kk)?));
                }
            }
            if !sweep_m.is_empty() {
                for &mm in &sweep_m {
                    points.push((mm, square(k)?));
                }
            }
            if points.is_empty() {
                points.push((m, square(k)?));
            }
            if let Some((bad, _)) = points.iter().find(|(mm, _)| *mm == 0) {
                return Err(Error::config("M", format!("series length {bad} must be positive")));
            }
            let rows = cost_rows(&base, &points, mode)?;
            let bytes = match format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    write_cost_csv(&rows, &mut buf)?;
                    buf
                }
                Format::Json => (serde_json::to_string_pretty(&rows)? + "\n").into_bytes(),
            };
            write_output(out.as_deref(), &bytes)?;
            Ok(true)
        }
        Command::Synth { preset, seed, out } => {
            let dataset = phenovit::dataset::generate_synthetic(&synthetic_preset(&preset, seed)?)?;
            let path = save_manifest(&out, &dataset)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Rhythm { manifest, synthetic, seed, x, y, normalized, out } => {
            let source = match (manifest, synthetic) {
                (Some(path), _) => DataSource::Manifest(path),
                (None, Some(preset)) => DataSource::Synthetic { preset, seed },
                (None, None) => return Err(Error::config("manifest", "either --manifest or --synthetic is required")),
            };
            let ds = source.load()?;
            let rows = export_visual_rhythm(&ds.series, &ds.mask, x, y, normalized)?;
            let mut buf = Vec::new();
            write_rhythm_csv(&rows, &mut buf)?;
            write_output(out.as_deref(), &buf)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let takes_design = args.get(1).is_some_and(|c| ["run", "grid", "cost"].contains(&c.as_str()));
    let (args, overrides) = if takes_design {
        match split_design_flags(args) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        (args, Vec::new())
    };
    let cli = Cli::parse_from(args);
    match execute(cli.command, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_flags_are_split_out() {
        let args = ["phenovit", "run", "--sampler.k", "13", "--epochs=0", "--artifacts", "a", "--seed", "7"]
            .map(String::from)
            .to_vec();
        let (rest, design) = split_design_flags(args).unwrap();
        assert_eq!(rest, vec!["phenovit", "run", "--artifacts", "a"]);
        assert_eq!(
            design,
            vec![
                ("sampler.k".to_string(), "13".to_string()),
                ("train.epochs".to_string(), "0".to_string()),
                ("seed".to_string(), "7".to_string()),
            ]
        );
    }
}
