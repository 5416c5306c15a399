use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{PipelineError, StageTag};
use crate::distill::{DistillStepReport, ParamGroup, Rule};

/// One `metrics.jsonl` line. Wall-clock durations live in `timings.jsonl`
/// so that metrics stay reproducible.
#[derive(Serialize)]
struct MetricsLine<'a> {
    stage: StageTag,
    iter: usize,
    rule: Rule,
    t: usize,
    weight: f64,
    residual_norm: f64,
    grad_norms: &'a BTreeMap<ParamGroup, f64>,
    clipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_mse: Option<f64>,
}

#[derive(Serialize)]
struct TimingLine {
    stage: StageTag,
    iter: usize,
    duration_secs: f64,
}

/// Appends step reports to `metrics.jsonl` and `timings.jsonl`.
pub struct MetricsLog {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl MetricsLog {
    /// Opens both files in `dir`, truncating them unless `append`.
    pub fn open(dir: &Path, append: bool) -> Result<Self, PipelineError> {
        let open = |name: &str| {
            let path = dir.join(name);
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map(BufWriter::new)
                .map_err(|e| PipelineError::io(&path, e))
        };
        Ok(Self {
            metrics: open("metrics.jsonl")?,
            timings: open("timings.jsonl")?,
        })
    }

    pub fn record(&mut self, stage: StageTag, iter: usize, report: &DistillStepReport, heldout_mse: Option<f64>) -> Result<(), PipelineError> {
        let line = MetricsLine {
            stage,
            iter,
            rule: report.rule,
            t: report.t,
            weight: report.weight,
            residual_norm: report.residual_norm,
            grad_norms: &report.grad_norms,
            clipped: report.clipped,
            heldout_mse,
        };
        let timing = TimingLine {
            stage,
            iter,
            duration_secs: report.duration_secs,
        };
        let write = |w: &mut BufWriter<File>, s: String| w.write_all(s.as_bytes()).and_then(|_| w.write_all(b"\n"));
        write(&mut self.metrics, serde_json::to_string(&line).expect("metrics serialize"))
            .and_then(|_| write(&mut self.timings, serde_json::to_string(&timing).expect("timings serialize")))
            .map_err(|e| PipelineError::io(Path::new("metrics.jsonl"), e))
    }

    pub fn flush(&mut self) -> Result<(), PipelineError> {
        self.metrics
            .flush()
            .and_then(|_| self.timings.flush())
            .map_err(|e| PipelineError::io(Path::new("metrics.jsonl"), e))
    }
}
