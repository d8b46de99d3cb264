use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{comm_totals, Checkpoint, CommRecord, CommTotals, RoundMetrics, RunConfig, RunKind, RunOutput};
use crate::error::{Error, Result};
use crate::lora::{decode_dense, encode_dense, DenseDelta};
use crate::numerics::{Scalar, Vector};
use crate::server::AggregationReport;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const CHECKPOINT_META: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: RunKind,
    pub seed: u64,
    pub config: RunConfig,
    pub final_metrics: RoundMetrics,
    pub comm_totals: CommTotals,
    pub comm: Vec<CommRecord>,
    pub aggregation: Vec<AggregationReport>,
}

impl RunSummary {
    pub fn from_output<T>(out: &RunOutput<T>) -> Self {
        Self {
            run: out.run,
            seed: out.config.seed,
            config: out.config.clone(),
            final_metrics: out.final_metrics().clone(),
            comm_totals: comm_totals(&out.comm),
            comm: out.comm.clone(),
            aggregation: out.aggregation.clone(),
        }
    }
}

pub fn write_metrics_jsonl<W: Write>(metrics: &[RoundMetrics], mut w: W) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Metrics, summary, resolved config, timings and the checkpoint of a run.
/// Everything except the timing file is a deterministic function of the
/// config.
pub fn write_run<T: Scalar>(out: &RunOutput<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metrics = Vec::new();
    write_metrics_jsonl(&out.metrics, &mut metrics)?;
    fs::write(dir.join(METRICS_FILE), metrics)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&RunSummary::from_output(out))?)?;
    fs::write(dir.join(CONFIG_FILE), out.config.to_toml())?;
    fs::write(
        dir.join(TIMING_FILE),
        serde_json::to_vec_pretty(&serde_json::json!({ "round_seconds": out.wall_seconds }))?,
    )?;
    write_checkpoint(&out.checkpoint, &dir.join(CHECKPOINT_DIR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    run: RunKind,
    num_clients: usize,
    num_layers: usize,
    has_global: bool,
    text_feats: Vec<Vec<f64>>,
}

fn write_stack<T: Scalar>(stack: &[DenseDelta<T>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, d) in stack.iter().enumerate() {
        fs::write(dir.join(format!("delta_{i:02}.fald")), encode_dense(d))?;
    }
    Ok(())
}

fn read_stack<T: Scalar>(dir: &Path, layers: usize) -> Result<Vec<DenseDelta<T>>> {
    (0..layers).map(|i| decode_dense(&fs::read(dir.join(format!("delta_{i:02}.fald")))?)).collect()
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let num_layers = ckpt.local.first().map_or(0, Vec::len);
    if let Some(g) = &ckpt.global {
        write_stack(g, &dir.join("global"))?;
    }
    for (k, stack) in ckpt.local.iter().enumerate() {
        write_stack(stack, &dir.join(format!("client_{k:02}")))?;
    }
    let meta = CheckpointMeta {
        run: ckpt.run,
        num_clients: ckpt.local.len(),
        num_layers,
        has_global: ckpt.global.is_some(),
        text_feats: ckpt.text_feats.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect(),
    };
    fs::write(dir.join(CHECKPOINT_META), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(CHECKPOINT_META))?)?;
    let global = if meta.has_global { Some(read_stack(&dir.join("global"), meta.num_layers)?) } else { None };
    let local = (0..meta.num_clients)
        .map(|k| read_stack(&dir.join(format!("client_{k:02}")), meta.num_layers))
        .collect::<Result<Vec<_>>>()?;
    let text_feats = meta
        .text_feats
        .iter()
        .map(|v| Vector::new(v.iter().map(|&x| T::of(x)).collect()).map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { run: meta.run, global, local, text_feats })
}
