//! Run outputs: line-delimited JSON metrics and the results CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ecgtext_core::eval::EvalResult;
use ecgtext_core::train::{EpochRecord, StepRecord, TrainSink};
use serde::Serialize;

use crate::error::CliResult;

/// Appends one JSON object per training step/epoch to `metrics.jsonl`.
pub struct JsonlSink {
    writer: BufWriter<fs::File>,
    pub steps: u64,
    pub epochs: u64,
}

#[derive(Serialize)]
struct StepLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    rec: &'a StepRecord,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    rec: &'a EpochRecord,
}

impl JsonlSink {
    pub fn create(path: &Path) -> CliResult<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(JsonlSink { writer: BufWriter::new(fs::File::create(path)?), steps: 0, epochs: 0 })
    }

    pub fn finish(mut self) -> CliResult<(u64, u64)> {
        self.writer.flush()?;
        Ok((self.steps, self.epochs))
    }
}

impl TrainSink for JsonlSink {
    fn on_step(&mut self, rec: &StepRecord) {
        let line = serde_json::to_string(&StepLine { kind: "step", rec }).expect("serializable");
        let _ = writeln!(self.writer, "{line}");
        self.steps += 1;
    }

    fn on_epoch(&mut self, rec: &EpochRecord) {
        let line = serde_json::to_string(&EpochLine { kind: "epoch", rec }).expect("serializable");
        let _ = writeln!(self.writer, "{line}");
        self.epochs += 1;
    }
}

/// The results table: one row per (task, metric). Values print with the
/// shortest round-trip float formatting, so identical runs give identical
/// bytes.
pub struct ResultsCsv {
    rows: Vec<EvalResult>,
}

impl ResultsCsv {
    pub fn new() -> Self {
        ResultsCsv { rows: Vec::new() }
    }

    pub fn push(&mut self, row: EvalResult) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[EvalResult] {
        &self.rows
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "task,metric,value,n,seed,config_hash")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.task, r.metric, r.value, r.n, r.seed, r.config_hash)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Append rows to an existing file (or create it with a header).
    pub fn append(path: &Path, rows: &[EvalResult]) -> CliResult<()> {
        let exists = path.exists();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
        if !exists {
            writeln!(w, "task,metric,value,n,seed,config_hash")?;
        }
        for r in rows {
            writeln!(w, "{},{},{},{},{},{}", r.task, r.metric, r.value, r.n, r.seed, r.config_hash)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Default for ResultsCsv {
    fn default() -> Self {
        Self::new()
    }
}

/// Eval rows also go to a JSONL log next to the CSV.
pub fn write_results_jsonl(path: &Path, rows: &[EvalResult]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Export per-record global embeddings for external projection/plotting.
pub fn write_embeddings_csv(
    path: &Path,
    rows: &[(String, Vec<String>, Vec<f32>)],
) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let dim = rows.first().map(|(_, _, e)| e.len()).unwrap_or(0);
    let header: Vec<String> = (0..dim).map(|i| format!("e{i}")).collect();
    writeln!(w, "id,labels,{}", header.join(","))?;
    for (id, labels, emb) in rows {
        let vals: Vec<String> = emb.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{id},{},{}", labels.join("|"), vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
