//! Command-line front end. Every command resolves a [`RunConfig`] from an
//! optional TOML file plus `--key value` overrides and calls into the
//! library; nothing numeric happens here.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datagen::{partition_stats, write_heatmap_csv, Partition, PartitionKind, PartitionStats};
use crate::error::{Error, Result};
use crate::simulator::{
    read_checkpoint, read_metrics_jsonl, run, score_checkpoint, write_run, RunConfig, RunKind, RunSummary, World,
    CHECKPOINT_DIR, CONFIG_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "fedmodal", version, about = "Federated vision-language alignment simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition the training set and write the partition and its heatmap.
    Partition(Common),
    /// Run training (or a baseline) and write metrics and checkpoints.
    Train {
        #[arg(long, default_value = "fedalign")]
        baseline: String,
        #[command(flatten)]
        common: Common,
    },
    /// Re-score a checkpoint written by `train`.
    Eval {
        /// Output directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// One run per value of an ablation axis; writes a CSV.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per value, counting up from the configured seed.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Merge metrics JSONL files or ablation CSVs into one table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `--key value` overrides of any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

/// Pairs `--key value` / `--key=value` tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok.strip_prefix("--").ok_or_else(|| Error::Config(format!("expected --key, found {tok:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

impl Common {
    pub fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        self.resolve_over("", extra)
    }

    /// `--config` replaces `fallback` as the base document when given.
    pub fn resolve_over(&self, fallback: &str, extra: &[(String, String)]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => read_config(p)?,
            None => fallback.to_string(),
        };
        let mut overrides = parse_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        overrides.extend_from_slice(extra);
        RunConfig::from_toml_with(&text, &overrides)
    }
}

fn read_config(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Command::Partition(common) => cmd_partition(&common.resolve(&[])?, &common.out, &mut stdout),
        Command::Train { baseline, common } => {
            let kind: RunKind = baseline.parse()?;
            let summary = cmd_train(&common.resolve(&[])?, kind, &common.out)?;
            writeln!(stdout, "{}", serde_json::to_string(&summary.final_metrics)?)?;
            Ok(())
        }
        Command::Eval { run, common } => {
            let cfg = common.resolve_over(&read_config(&run.join(CONFIG_FILE))?, &[])?;
            let report = cmd_eval(&cfg, &run.join(CHECKPOINT_DIR))?;
            writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
            Ok(())
        }
        Command::Ablate { axis, values, repeats, common } => {
            let base = common.resolve(&[])?;
            let rows = cmd_ablate(&base, &axis, &values, repeats)?;
            fs::create_dir_all(&common.out)?;
            let path = common.out.join(format!("ablate_{axis}.csv"));
            write_rows(&rows, fs::File::create(&path)?)?;
            fs::write(common.out.join(CONFIG_FILE), base.to_toml())?;
            writeln!(stdout, "wrote {} rows to {}", rows.len(), path.display())?;
            Ok(())
        }
        Command::Report { files, out } => {
            let table = cmd_report(&files)?;
            match out {
                Some(p) => fs::write(p, table)?,
                None => stdout.write_all(table.as_bytes())?,
            }
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct PartitionFile<'a> {
    seed: u64,
    config: &'a RunConfig,
    partition: &'a Partition,
    stats: &'a PartitionStats,
}

pub fn cmd_partition(cfg: &RunConfig, out: &Path, log: &mut impl Write) -> Result<()> {
    let world = World::<f64>::build(cfg)?;
    let stats = partition_stats(&world.partition);
    fs::create_dir_all(out)?;
    let file = PartitionFile { seed: cfg.seed, config: cfg, partition: &world.partition, stats: &stats };
    fs::write(out.join("partition.json"), serde_json::to_vec_pretty(&file)?)?;
    write_heatmap_csv(&stats, fs::File::create(out.join("partition_heatmap.csv"))?)?;
    writeln!(
        log,
        "{} clients, shard sizes {:?}, mean max-class share {:.3}, empty clients {:?}",
        cfg.num_clients,
        stats.shard_sizes,
        stats.mean_max_class_share(),
        stats.empty_clients
    )?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, kind: RunKind, out: &Path) -> Result<RunSummary> {
    let output = run::<f64>(cfg, kind)?;
    write_run(&output, out)?;
    Ok(RunSummary::from_output(&output))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub global_accuracy: f64,
    pub local_accuracy: Vec<Option<f64>>,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ckpt = read_checkpoint::<f64>(checkpoint).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) => Error::Format(format!("{}: {e}", checkpoint.display())),
        e => e,
    })?;
    let world = World::<f64>::build(cfg)?;
    let (global_accuracy, local_accuracy) = score_checkpoint(&world, &ckpt, &cfg.objective())?;
    Ok(EvalReport { seed: cfg.seed, global_accuracy, local_accuracy })
}

pub const ABLATION_AXES: [&str; 9] =
    ["mu", "boundary_m", "rank_r", "lora_start_l", "desc_style", "ex_query", "sim_kind", "upload_ratio", "alpha"];

/// Config key and value for one ablation setting.
pub fn ablation_override(axis: &str, value: &str) -> Result<(String, String)> {
    let v = value.trim();
    let pair = |k: &str, v: String| Ok((k.to_string(), v));
    match axis {
        "mu" | "boundary_m" | "desc_style" | "sim_kind" | "upload_ratio" => pair(axis, v.to_string()),
        "rank_r" => pair("rank", v.to_string()),
        "lora_start_l" => pair("lora_start", v.to_string()),
        "ex_query" => match v {
            "on" | "true" => pair("ex_query", "true".into()),
            "off" | "false" => pair("ex_query", "false".into()),
            other => Err(Error::Config(format!("ex_query takes on/off, got {other:?}"))),
        },
        "alpha" => {
            pair("partition", PartitionKind::Dir { alpha: v.parse().map_err(|_| bad_value(axis, v))? }.to_string())
        }
        other => Err(Error::Config(format!("unknown ablation axis {other:?}; expected one of {ABLATION_AXES:?}"))),
    }
}

fn bad_value(axis: &str, v: &str) -> Error {
    Error::Config(format!("bad value {v:?} for axis {axis}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub run: RunKind,
    pub rounds: usize,
    pub global_accuracy: f64,
    pub mean_local_accuracy: Option<f64>,
    pub upload_factored: usize,
    pub upload_dense: usize,
    pub download_factored: usize,
    pub download_dense: usize,
}

/// Each value runs on the same seeds, so rows differ only in the ablated
/// setting.
pub fn cmd_ablate(base: &RunConfig, axis: &str, values: &[String], repeats: u64) -> Result<Vec<AblationRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let settings = values
        .iter()
        .map(|v| ablation_override(axis, v).map(|o| (v.trim().to_string(), o)))
        .collect::<Result<Vec<_>>>()?;
    let base_toml = base.to_toml();
    let mut rows = Vec::new();
    for (value, (key, raw)) in settings {
        for rep in 0..repeats {
            let seed = base.seed + rep;
            let cfg = RunConfig::from_toml_with(
                &base_toml,
                &[(key.clone(), raw.clone()), ("seed".into(), seed.to_string())],
            )?;
            let out = run::<f64>(&cfg, RunKind::Fedalign)?;
            let totals = crate::simulator::comm_totals(&out.comm);
            let last = out.final_metrics();
            rows.push(AblationRow {
                axis: axis.to_string(),
                value: value.clone(),
                seed,
                run: out.run,
                rounds: cfg.rounds,
                global_accuracy: last.global_accuracy,
                mean_local_accuracy: last.mean_local_accuracy,
                upload_factored: totals.upload_factored,
                upload_dense: totals.upload_dense,
                download_factored: totals.download_factored,
                download_dense: totals.download_dense,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write, R: Serialize>(rows: &[R], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReportRow {
    source: String,
    run: RunKind,
    seed: u64,
    round: usize,
    global_accuracy: f64,
    mean_local_accuracy: Option<f64>,
}

/// Metrics files become one row per round; CSV files with a shared header
/// are concatenated. Mixing the two is an error.
pub fn cmd_report(files: &[PathBuf]) -> Result<String> {
    let is_csv = |p: &PathBuf| p.extension().is_some_and(|e| e == "csv");
    let mut buf = Vec::new();
    if files.iter().all(is_csv) {
        let mut header: Option<csv::StringRecord> = None;
        let mut w = csv::Writer::from_writer(&mut buf);
        for f in files {
            let mut r = csv::Reader::from_path(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
            let h = r.headers()?.clone();
            match &header {
                None => {
                    w.write_record(&h)?;
                    header = Some(h);
                }
                Some(prev) if *prev != h => {
                    return Err(Error::Format(format!("{} has a different header", f.display())));
                }
                Some(_) => {}
            }
            for rec in r.records() {
                w.write_record(&rec?)?;
            }
        }
        w.flush()?;
    } else if files.iter().any(is_csv) {
        return Err(Error::Config("report takes either metrics files or CSV tables, not both".into()));
    } else {
        let mut rows = Vec::new();
        for f in files {
            let metrics = read_metrics_jsonl(f).map_err(|e| match e {
                Error::Io(io) => Error::Format(format!("{}: {io}", f.display())),
                e => e,
            })?;
            rows.extend(metrics.into_iter().map(|m| ReportRow {
                source: f.display().to_string(),
                run: m.run,
                seed: m.seed,
                round: m.round,
                global_accuracy: m.global_accuracy,
                mean_local_accuracy: m.mean_local_accuracy,
            }));
        }
        write_rows(&rows, &mut buf)?;
    }
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}
