//! Training, evaluation, sweeps, kernel export, checkpoints and the
//! invariant suite behind the `dmps` command line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod sweep;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::{annotated_defaults, OptimizerConfig, RunConfig, Schedule, SweepConfig, TrainingConfig};
pub use export::{export_kernel, off_diagonal_summary, KernelExport, OffDiagonalSummary};
pub use sweep::{sweep_gamma, sweep_rho, SweepRow, SweepTable};
pub use verify::{run_invariant_suite, CheckResult, Fault, SuiteReport};
pub use train::{evaluate, evaluation_sets, sample_sets, train, Evaluation, MetricsRecord, SetPrediction, TrainOutcome};

/// One JSON object per line.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
